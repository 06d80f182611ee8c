"""Frame manifests, subject-exclusive folds, and episodic task sampling.

Manifest format (one frame per line, whitespace-separated):

    image_path subject_id x0 y0 ... x48 y48 label_0 ... label_{C-1}

Image paths are resolved relative to the manifest file's directory. Subjects
are tasks: an episode draws S support and Q query frames without replacement
from one subject, and a meta-batch holds K episodes with distinct subjects.
Subjects with fewer than S+Q frames are excluded from episodic sampling (with
a warning) but keep their frames for plain supervised training.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional

import numpy as np
from PIL import Image

from .errors import ConfigError, ManifestError, SamplingError
from .geometry import N_LANDMARKS, AUCenterTable, grid_centers_from_landmarks

logger = logging.getLogger(__name__)


@dataclass(frozen=True, eq=False)
class FrameRecord:
    image_path: str  # resolved, absolute
    subject_id: str
    landmarks: np.ndarray  # (49, 2) float64, (x, y)
    labels: np.ndarray  # (C,) int8


class SubjectIndex:
    """Frames grouped by subject, with optional fold assignment."""

    def __init__(self, subjects: Dict[str, List[FrameRecord]], n_au: int):
        self.subjects = subjects
        self.n_au = n_au
        self.folds: Optional[Dict[str, int]] = None
        self.n_folds: Optional[int] = None
        self.test_fold: Optional[int] = None
        self._warned_small = set()

    @property
    def subject_ids(self) -> List[str]:
        return list(self.subjects.keys())

    def all_records(self) -> List[FrameRecord]:
        return [r for recs in self.subjects.values() for r in recs]

    def subjects_for_role(self, role: str) -> List[str]:
        """Subjects eligible for 'train' or 'test' given the selected fold."""
        if role not in ("train", "test"):
            raise ValueError(f"role must be 'train' or 'test', got {role!r}")
        if self.folds is None:
            if role == "test":
                raise ConfigError("no folds assigned; cannot select test subjects")
            return self.subject_ids
        if self.test_fold is None:
            raise ConfigError("folds assigned but no test fold selected")
        want_test = role == "test"
        return [s for s in self.subject_ids if (self.folds[s] == self.test_fold) == want_test]

    def records_for_role(self, role: str) -> List[FrameRecord]:
        return [r for s in self.subjects_for_role(role) for r in self.subjects[s]]


@dataclass(frozen=True)
class Episode:
    task_id: str
    support: List[FrameRecord]
    query: List[FrameRecord]

    def __post_init__(self):
        ids = {r.subject_id for r in self.support} | {r.subject_id for r in self.query}
        if ids != {self.task_id}:
            raise ValueError("episode frames must all belong to the task's subject")
        if set(map(id, self.support)) & set(map(id, self.query)):
            raise ValueError("support and query sets overlap")


@dataclass(frozen=True)
class MetaBatch:
    episodes: List[Episode]

    def __post_init__(self):
        ids = [e.task_id for e in self.episodes]
        if len(set(ids)) != len(ids):
            raise ValueError("meta-batch task ids must be pairwise distinct")


def load_manifest(path, n_au: int) -> SubjectIndex:
    """Parse a manifest into a SubjectIndex, preserving manifest order."""
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"manifest not found: {path}")
    root = path.parent
    expected = 2 + 2 * N_LANDMARKS + n_au
    subjects: Dict[str, List[FrameRecord]] = {}
    with open(path, "r", encoding="utf-8") as fh:
        for line_no, raw in enumerate(fh, start=1):
            line = raw.strip()
            if not line or line.startswith("#"):
                continue
            parts = line.split()
            if len(parts) != expected:
                raise ManifestError(
                    path, line_no,
                    f"expected {expected} fields (path, subject, {2 * N_LANDMARKS} landmark "
                    f"coordinates, {n_au} labels), got {len(parts)}",
                )
            img, subject = parts[0], parts[1]
            try:
                lm = np.array(parts[2 : 2 + 2 * N_LANDMARKS], dtype=np.float64).reshape(N_LANDMARKS, 2)
            except ValueError as exc:
                raise ManifestError(path, line_no, f"bad landmark value: {exc}") from exc
            if not np.all(np.isfinite(lm)):
                raise ManifestError(path, line_no, "non-finite landmark coordinate")
            lab_raw = parts[2 + 2 * N_LANDMARKS :]
            if any(v not in ("0", "1") for v in lab_raw):
                raise ManifestError(path, line_no, "labels must be 0 or 1")
            labels = np.array(lab_raw, dtype=np.int8)
            rec = FrameRecord(str((root / img).resolve()), subject, lm, labels)
            subjects.setdefault(subject, []).append(rec)
    if not subjects:
        raise ManifestError(path, 0, "manifest contains no frames")
    return SubjectIndex(subjects, n_au)


def split_folds(index: SubjectIndex, n_folds: int, seed: int) -> SubjectIndex:
    """Assign each subject to a fold: seeded shuffle then round-robin.

    Fold sizes differ by at most one; the assignment is a pure function of
    (subject order, n_folds, seed).
    """
    if n_folds < 2:
        raise ConfigError(f"need at least 2 folds, got {n_folds}")
    ids = index.subject_ids
    if len(ids) < n_folds:
        raise ConfigError(f"{len(ids)} subjects cannot fill {n_folds} folds")
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0x5F01D]))
    order = rng.permutation(len(ids))
    out = SubjectIndex(index.subjects, index.n_au)
    out.folds = {ids[int(j)]: i % n_folds for i, j in enumerate(order)}
    out.n_folds = n_folds
    return out


def select_test_fold(index: SubjectIndex, fold_id: int) -> SubjectIndex:
    if index.folds is None:
        raise ConfigError("split_folds must run before selecting a test fold")
    if not (0 <= fold_id < index.n_folds):
        raise ConfigError(f"fold id {fold_id} outside [0,{index.n_folds})")
    out = SubjectIndex(index.subjects, index.n_au)
    out.folds = index.folds
    out.n_folds = index.n_folds
    out.test_fold = fold_id
    return out


def eligible_subjects(index: SubjectIndex, role: str, min_frames: int) -> List[str]:
    """Subjects in `role` with at least `min_frames` frames; warns once each."""
    keep = []
    for s in index.subjects_for_role(role):
        if len(index.subjects[s]) >= min_frames:
            keep.append(s)
        elif s not in index._warned_small:
            index._warned_small.add(s)
            logger.warning(
                "subject %s has %d frames (< %d); excluded from episodic sampling",
                s, len(index.subjects[s]), min_frames,
            )
    return keep


def sample_episode(index: SubjectIndex, subject: str, s: int, q: int, rng) -> Episode:
    recs = index.subjects[subject]
    picks = rng.choice(len(recs), size=s + q, replace=False)
    support = [recs[int(i)] for i in picks[:s]]
    query = [recs[int(i)] for i in picks[s:]]
    return Episode(subject, support, query)


def sample_meta_batch(index: SubjectIndex, role: str, k: int, s: int, q: int, rng) -> MetaBatch:
    """K episodes from distinct subjects, each with S support + Q query frames."""
    pool = eligible_subjects(index, role, s + q)
    if len(pool) < k:
        raise SamplingError(
            f"need {k} subjects with >= {s + q} frames in role {role!r}, have {len(pool)}"
        )
    chosen = rng.choice(len(pool), size=k, replace=False)
    episodes = [sample_episode(index, pool[int(i)], s, q, rng) for i in chosen]
    return MetaBatch(episodes)


def occurrence_rates(records: List[FrameRecord], n_au: int) -> np.ndarray:
    if not records:
        raise ConfigError("cannot compute occurrence rates from zero frames")
    labels = np.stack([r.labels for r in records]).astype(np.float64)
    if labels.shape[1] != n_au:
        raise ConfigError(f"records carry {labels.shape[1]} labels, expected {n_au}")
    return labels.mean(axis=0)


class FrameLoader:
    """Decodes frames to arrays and caches them with their grid centers.

    Desk-scale corpora fit in memory, so images are decoded once; centers are
    a pure function of landmarks and the AU table and are cached alongside.
    """

    def __init__(self, table: AUCenterTable, image_size: int, grid_size: int):
        self.table = table
        self.image_size = image_size
        self.grid_size = grid_size
        self._images: Dict[str, np.ndarray] = {}
        self._centers: Dict[int, np.ndarray] = {}

    def _image(self, path: str) -> np.ndarray:
        arr = self._images.get(path)
        if arr is None:
            with Image.open(path) as im:
                rgb = im.convert("RGB")
                if rgb.size != (self.image_size, self.image_size):
                    rgb = rgb.resize((self.image_size, self.image_size), Image.BILINEAR)
                arr = np.asarray(rgb, dtype=np.float64) / 255.0
            self._images[path] = arr
        return arr

    def centers(self, rec: FrameRecord) -> np.ndarray:
        c = self._centers.get(id(rec))
        if c is None:
            c = grid_centers_from_landmarks(rec.landmarks, self.table, self.image_size, self.grid_size)
            self._centers[id(rec)] = c
        return c

    def batch(self, records: List[FrameRecord]):
        """Stack records into (images (B,H,W,3), centers (B,2C,2), labels (B,C))."""
        images = np.stack([self._image(r.image_path) for r in records])
        centers = np.stack([self.centers(r) for r in records])
        labels = np.stack([r.labels for r in records]).astype(np.float64)
        return images, centers, labels
