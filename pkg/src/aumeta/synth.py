"""Synthetic identity-confounded corpus for desk-scale experiments.

Each subject gets a rigidly translated copy of a canonical 49-point landmark
template plus a per-(subject, AU) identity coefficient gamma in
[-identity_strength, identity_strength]. A frame is rendered by stamping a
fixed per-AU pattern at both of the AU's centers with intensity
(label + gamma): gamma mimics or masks activation exactly the way
subject-specific appearance does, and it is constant per subject, so it can
only be disentangled by models that calibrate per identity.

Rendering is a pure function of (spec, subject, label vector): no per-frame
noise. Labels are Bernoulli draws at configurable base rates, optionally
pushed through pairwise co-activation rules (a, b, p): whenever AU a is
active, AU b is forced on with probability p. The generator emits the
standard manifest plus the AU-center rule file the images were painted with.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence, Tuple

import numpy as np
from PIL import Image

from .errors import ConfigError
from .geometry import AUCenterRule, AUCenterTable, compute_au_centers, save_au_table
from .rng import stream

IMAGE_SIZE = 224
STAMP_SIZE = 18
STAMP_AMP = 0.4

# Canonical 49-point template (x, y), image-coordinate layout:
# brows 0-9, nose 10-18, eyes 19-30, mouth 31-48. Mirror-symmetric about x=112.
TEMPLATE_49 = np.array([
    # left brow 0-4 (outer -> inner), right brow 5-9 (inner -> outer)
    (46, 70), (57, 67), (68, 66), (79, 67), (90, 70),
    (134, 70), (145, 67), (156, 66), (167, 67), (178, 70),
    # nose bridge 10-13, nose base 14-18
    (112, 86), (112, 96), (112, 106), (112, 116),
    (96, 124), (104, 127), (112, 129), (120, 127), (128, 124),
    # left eye 19-24: outer, upper-outer, upper-inner, inner, lower-inner, lower-outer
    (65, 92), (71, 88), (85, 88), (91, 92), (85, 96), (71, 96),
    # right eye 25-30: inner, upper-inner, upper-outer, outer, lower-outer, lower-inner
    (133, 92), (139, 88), (153, 88), (159, 92), (153, 96), (139, 96),
    # outer mouth 31-42: left corner, upper lip l->r, right corner, lower lip r->l
    (84, 160), (92, 152), (101, 148), (112, 147), (123, 148), (132, 152),
    (140, 160), (132, 168), (123, 172), (112, 173), (101, 172), (92, 168),
    # inner mouth 43-48
    (94, 160), (103, 156), (121, 156), (130, 160), (121, 164), (103, 164),
], dtype=np.float64)

# Synthetic AU rule bank: spatially well-separated region pairs. A corpus with
# C AUs uses the first C rules.
_RULE_BANK = (
    AUCenterRule("syn0", 4, 5, 0.00, -0.20),   # inner brow, raised
    AUCenterRule("syn1", 0, 9, 0.00, -0.12),   # outer brow
    AUCenterRule("syn2", 19, 28, 0.00, 0.40),  # cheek below eye corner
    AUCenterRule("syn3", 14, 18, -0.08, 0.00), # nose side
    AUCenterRule("syn4", 31, 37, -0.10, 0.00), # mouth corner
    AUCenterRule("syn5", 41, 39, 0.00, 0.28),  # below lower lip
    AUCenterRule("syn6", 33, 35, 0.00, -0.10), # upper lip
    AUCenterRule("syn7", 2, 7, 0.00, -0.30),   # forehead above brow mid
)


@dataclass(frozen=True)
class CorpusSpec:
    n_subjects: int
    frames_per_subject: int
    n_au: int
    identity_strength: float = 0.0
    base_rate: float = 0.45
    au_correlation: Tuple[Tuple[int, int, float], ...] = ()
    jitter_px: int = 8
    seed: int = 0

    def __post_init__(self):
        if self.n_subjects < 1 or self.frames_per_subject < 1:
            raise ConfigError("need at least one subject and one frame per subject")
        if not (1 <= self.n_au <= len(_RULE_BANK)):
            raise ConfigError(f"n_au must be in [1, {len(_RULE_BANK)}]")
        if not (0.0 <= self.identity_strength <= 1.0):
            raise ConfigError("identity_strength must lie in [0, 1]")
        if not (0.0 < self.base_rate < 1.0):
            raise ConfigError("base_rate must lie in (0, 1)")
        for a, b, p in self.au_correlation:
            if not (0 <= a < self.n_au and 0 <= b < self.n_au and a != b):
                raise ConfigError(f"correlation pair ({a},{b}) out of range")
            if not (0.0 <= p <= 1.0):
                raise ConfigError("correlation probabilities must lie in [0, 1]")
        if self.jitter_px < 0:
            raise ConfigError("jitter_px must be non-negative")


def synthetic_table(n_au: int) -> AUCenterTable:
    return AUCenterTable(tuple(_RULE_BANK[:n_au]))


def _stamp(au: int) -> np.ndarray:
    """Fixed (STAMP_SIZE, STAMP_SIZE, 3) signed activation pattern for one AU."""
    r = np.arange(STAMP_SIZE) - (STAMP_SIZE - 1) / 2.0
    u, v = np.meshgrid(r, r, indexing="ij")
    theta = au * math.pi / 8.0
    wave = np.cos((u * math.cos(theta) + v * math.sin(theta)) * (2.0 * math.pi / (5.0 + au)))
    envelope = np.exp(-(u * u + v * v) / (2.0 * 4.5 ** 2))
    mono = envelope * wave
    mix = np.full(3, 0.25)
    mix[au % 3] = 1.0
    return mono[:, :, None] * mix[None, None, :]


def _identity_blob(au: int) -> np.ndarray:
    """Smooth subject-bias texture for one AU region: same support as the
    activation stamp but a plain Gaussian lobe with a rotated channel mix, so
    pattern-selective features can separate it from the grating."""
    r = np.arange(STAMP_SIZE) - (STAMP_SIZE - 1) / 2.0
    u, v = np.meshgrid(r, r, indexing="ij")
    envelope = np.exp(-(u * u + v * v) / (2.0 * 5.5 ** 2))
    mix = np.full(3, 0.25)
    mix[(au + 1) % 3] = 1.0
    return envelope[:, :, None] * mix[None, None, :]


def _paint(canvas: np.ndarray, center_xy: np.ndarray, stamp: np.ndarray, intensity: float) -> None:
    half = STAMP_SIZE // 2
    cx, cy = int(round(center_xy[0])), int(round(center_xy[1]))
    y0, x0 = cy - half, cx - half
    sy0, sx0 = max(0, -y0), max(0, -x0)
    y0, x0 = max(0, y0), max(0, x0)
    y1 = min(IMAGE_SIZE, cy - half + STAMP_SIZE)
    x1 = min(IMAGE_SIZE, cx - half + STAMP_SIZE)
    if y1 <= y0 or x1 <= x0:
        return
    canvas[y0:y1, x0:x1] += intensity * stamp[sy0 : sy0 + (y1 - y0), sx0 : sx0 + (x1 - x0)]


def subject_landmarks(spec: CorpusSpec, subject: int) -> np.ndarray:
    rng = stream(spec.seed, f"corpus/affine/{subject}")
    t = rng.integers(-spec.jitter_px, spec.jitter_px + 1, size=2)
    return TEMPLATE_49 + t.astype(np.float64)


def subject_identity_coeffs(spec: CorpusSpec, subject: int):
    """Per-(subject, AU) appearance bias, two components scaled by strength.

    gamma multiplies the AU's own activation stamp (mimics/masks activation,
    the part only per-subject calibration can undo); delta multiplies a
    smooth blob over the same region (subject texture a pattern-selective
    model can learn to ignore). Both are bimodal — random sign times a
    magnitude in [0.5, 1] x strength — so every subject is substantially
    confounded on every AU (a uniform draw would leave many near-zero
    coefficients and dilute the cross-subject effect the corpus exists to
    exercise).
    """
    rng = stream(spec.seed, f"corpus/identity/{subject}")
    sign = np.where(rng.random(spec.n_au) < 0.5, -1.0, 1.0)
    magnitude = rng.uniform(0.5, 1.0, size=spec.n_au)
    gamma = spec.identity_strength * sign * magnitude
    sign_b = np.where(rng.random(spec.n_au) < 0.5, -1.0, 1.0)
    magnitude_b = rng.uniform(0.5, 1.0, size=spec.n_au)
    delta = spec.identity_strength * sign_b * magnitude_b
    return gamma, delta


def render_frame(spec: CorpusSpec, subject: int, labels: np.ndarray) -> np.ndarray:
    """Pure rendering: uint8 (224,224,3) image for one subject/label vector."""
    landmarks = subject_landmarks(spec, subject)
    gamma, delta = subject_identity_coeffs(spec, subject)
    centers = compute_au_centers(landmarks, synthetic_table(spec.n_au))
    canvas = np.full((IMAGE_SIZE, IMAGE_SIZE, 3), 0.5, dtype=np.float64)
    for c in range(spec.n_au):
        # A region cannot render negative activation: a bias that masks an
        # active AU leaves a faint pattern, a bias on a neutral face leaves a
        # spurious one, and a blank region is genuinely neutral.
        intensity = max(float(labels[c]) + gamma[c], 0.0)
        blob = 2.0 * delta[c]
        stamp = _stamp(c)
        blob_stamp = _identity_blob(c)
        for center in (centers[2 * c], centers[2 * c + 1]):
            if intensity != 0.0:
                _paint(canvas, center, stamp, STAMP_AMP * intensity)
            if blob != 0.0:
                _paint(canvas, center, blob_stamp, STAMP_AMP * blob)
    return (np.clip(canvas, 0.0, 1.0) * 255.0).round().astype(np.uint8)


def sample_labels(spec: CorpusSpec, rng) -> np.ndarray:
    z = (rng.random(spec.n_au) < spec.base_rate).astype(np.int8)
    for a, b, p in spec.au_correlation:
        if z[a] == 1 and rng.random() < p:
            z[b] = 1
    return z


def implied_marginals(spec: CorpusSpec) -> np.ndarray:
    """Expected per-AU occurrence rates under the sampling scheme.

    Mirrors `sample_labels`: correlations are applied in list order, each one
    lifting P(b) by P(a) * p * (1 - base_rate_b).
    """
    marg = np.full(spec.n_au, spec.base_rate, dtype=np.float64)
    for a, b, p in spec.au_correlation:
        marg[b] = marg[b] + marg[a] * p * (1.0 - spec.base_rate)
    return marg


def generate_corpus(spec: CorpusSpec, out_dir) -> Path:
    """Render the corpus; returns the manifest path.

    Writes images/<subject>/<frame>.png, manifest.txt, the au_centers.txt the
    images were painted with, and a corpus_config.txt snapshot.
    """
    out_dir = Path(out_dir)
    img_root = out_dir / "images"
    img_root.mkdir(parents=True, exist_ok=True)
    table = synthetic_table(spec.n_au)
    lines = []
    for s in range(spec.n_subjects):
        sid = f"s{s:02d}"
        subject_dir = img_root / sid
        subject_dir.mkdir(exist_ok=True)
        landmarks = subject_landmarks(spec, s)
        label_rng = stream(spec.seed, f"corpus/labels/{s}")
        lm_text = " ".join(f"{v:.2f}" for v in landmarks.ravel())
        for f in range(spec.frames_per_subject):
            labels = sample_labels(spec, label_rng)
            img = render_frame(spec, s, labels)
            rel = f"images/{sid}/f{f:04d}.png"
            Image.fromarray(img).save(out_dir / rel)
            lines.append(f"{rel} {sid} {lm_text} {' '.join(str(int(v)) for v in labels)}")
    manifest = out_dir / "manifest.txt"
    manifest.write_text("\n".join(lines) + "\n", encoding="utf-8")
    save_au_table(out_dir / "au_centers.txt", table)
    snapshot = [
        f"n_subjects = {spec.n_subjects}",
        f"frames_per_subject = {spec.frames_per_subject}",
        f"n_au = {spec.n_au}",
        f"identity_strength = {spec.identity_strength}",
        f"base_rate = {spec.base_rate}",
        "au_correlation = " + ",".join(f"{a}>{b}:{p}" for a, b, p in spec.au_correlation),
        f"jitter_px = {spec.jitter_px}",
        f"seed = {spec.seed}",
    ]
    (out_dir / "corpus_config.txt").write_text("\n".join(snapshot) + "\n", encoding="utf-8")
    return manifest


# ---------------------------------------------------------------------------
# identity mixing diagnostics
# ---------------------------------------------------------------------------

def identity_mixing_score(embeddings: np.ndarray, subject_ids: Sequence) -> float:
    """1 - (fraction of frames whose nearest neighbour shares their subject).

    Quantitative proxy for how well per-frame embeddings mix identities: 0
    means subjects form perfectly separated clusters, values near 1 mean a
    frame's nearest neighbour (self excluded; distance ties resolve to the
    lowest index) is usually another subject's frame.
    """
    emb = np.asarray(embeddings, dtype=np.float64)
    ids = np.asarray(subject_ids)
    if emb.ndim != 2 or emb.shape[0] != ids.shape[0]:
        raise ValueError("embeddings must be (N,E) with one subject id per row")
    uniq, counts = np.unique(ids, return_counts=True)
    if uniq.size < 2 or counts.min() < 2:
        raise ValueError("need at least 2 subjects with at least 2 frames each")
    sq = np.sum(emb * emb, axis=1)
    d2 = sq[:, None] + sq[None, :] - 2.0 * (emb @ emb.T)
    np.fill_diagonal(d2, np.inf)
    nn = np.argmin(d2, axis=1)
    same = ids[nn] == ids
    return float(1.0 - same.mean())
