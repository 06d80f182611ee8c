"""AU center geometry: landmarks -> AU center pixels -> feature-grid crops.

Landmarks follow the common 49-point layout (no jaw line): brows 0-9, nose
10-18, eyes 19-30, mouth 31-48. AU centers are defined by a rule table — per
AU a (left, right) anchor landmark pair plus an offset in inter-ocular
-distance units. The shipped table approximates the usual AU-center
conventions for the 12 BP4D AUs; it is a plain data file precisely so the
approximation is auditable and swappable.

Offset sign convention: dy > 0 moves down (image coordinates); dx is applied
as +dx for the left entry and -dx for the right entry, so a horizontal flip
of the landmarks swaps the left/right center lists exactly.
"""

from __future__ import annotations

import importlib.resources
from dataclasses import dataclass
from typing import List, Sequence, Tuple

import numpy as np

from .errors import ConfigError

N_LANDMARKS = 49
LEFT_EYE = tuple(range(19, 25))
RIGHT_EYE = tuple(range(25, 31))

# Index permutation pairing each landmark with its mirror twin (identity for
# midline points). A horizontal image flip re-labels semantic landmarks this
# way, so flip_landmarks applies it together with the coordinate mirror.
_MIRROR_PAIRS = (
    (0, 9), (1, 8), (2, 7), (3, 6), (4, 5),
    (14, 18), (15, 17),
    (19, 28), (20, 27), (21, 26), (22, 25), (23, 30), (24, 29),
    (31, 37), (32, 36), (33, 35), (38, 42), (39, 41),
    (43, 46), (44, 45), (47, 48),
)
MIRROR_PERM_49 = np.arange(N_LANDMARKS)
for _a, _b in _MIRROR_PAIRS:
    MIRROR_PERM_49[_a], MIRROR_PERM_49[_b] = _b, _a


def flip_landmarks(landmarks: np.ndarray, axis_x: float) -> np.ndarray:
    """Semantic horizontal flip: mirror x about `axis_x` and swap left/right
    landmark indices (as a detector would re-assign them on a flipped image)."""
    lm = np.asarray(landmarks, dtype=np.float64)[MIRROR_PERM_49].copy()
    lm[:, 0] = 2.0 * axis_x - lm[:, 0]
    return lm


@dataclass(frozen=True)
class AUCenterRule:
    au_name: str
    left_anchor: int
    right_anchor: int
    dx_frac: float
    dy_frac: float


@dataclass(frozen=True)
class AUCenterTable:
    rules: Tuple[AUCenterRule, ...]

    def __post_init__(self):
        for r in self.rules:
            for a in (r.left_anchor, r.right_anchor):
                if not (0 <= a < N_LANDMARKS):
                    raise ConfigError(f"AU {r.au_name}: anchor {a} outside [0,{N_LANDMARKS})")

    @property
    def n_au(self) -> int:
        return len(self.rules)

    @property
    def au_names(self) -> List[str]:
        return [r.au_name for r in self.rules]


def load_au_table(path) -> AUCenterTable:
    """Parse a rule file: one line per AU, `au_id left right dx_frac dy_frac`."""
    rules = []
    with open(path, "r", encoding="utf-8") as fh:
        for line_no, raw in enumerate(fh, start=1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            parts = line.split()
            if len(parts) != 5:
                raise ConfigError(f"{path}:{line_no}: expected 5 fields, got {len(parts)}")
            try:
                rules.append(
                    AUCenterRule(parts[0], int(parts[1]), int(parts[2]), float(parts[3]), float(parts[4]))
                )
            except ValueError as exc:
                raise ConfigError(f"{path}:{line_no}: {exc}") from exc
    if not rules:
        raise ConfigError(f"{path}: no AU rules found")
    return AUCenterTable(tuple(rules))


def save_au_table(path, table: AUCenterTable) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("# au_id left_anchor right_anchor dx_frac dy_frac\n")
        fh.write("# offsets in inter-ocular-distance units; dy>0 moves down,\n")
        fh.write("# dx is mirrored (+dx left entry, -dx right entry)\n")
        for r in table.rules:
            fh.write(f"{r.au_name} {r.left_anchor} {r.right_anchor} {r.dx_frac:g} {r.dy_frac:g}\n")


def builtin_bp4d_table() -> AUCenterTable:
    ref = importlib.resources.files("aumeta.data").joinpath("au_centers_bp4d.txt")
    with importlib.resources.as_file(ref) as path:
        return load_au_table(path)


def interocular_distance(landmarks: np.ndarray) -> float:
    lm = np.asarray(landmarks, dtype=np.float64)
    left = lm[list(LEFT_EYE)].mean(axis=0)
    right = lm[list(RIGHT_EYE)].mean(axis=0)
    return float(np.linalg.norm(left - right))


def compute_au_centers(landmarks: np.ndarray, table: AUCenterTable) -> np.ndarray:
    """49 (x,y) landmarks -> (2C,2) AU center pixels.

    Output order is (AU0-left, AU0-right, AU1-left, AU1-right, ...). Offsets
    may push centers outside the image; downstream grid mapping clamps.
    """
    lm = np.asarray(landmarks, dtype=np.float64)
    if lm.shape != (N_LANDMARKS, 2):
        raise ValueError(f"expected ({N_LANDMARKS},2) landmarks, got {lm.shape}")
    iod = interocular_distance(lm)
    centers = np.empty((2 * table.n_au, 2), dtype=np.float64)
    for i, r in enumerate(table.rules):
        off_l = np.array([r.dx_frac * iod, r.dy_frac * iod])
        off_r = np.array([-r.dx_frac * iod, r.dy_frac * iod])
        centers[2 * i] = lm[r.left_anchor] + off_l
        centers[2 * i + 1] = lm[r.right_anchor] + off_r
    return centers


def map_to_feature_grid(point, image_size: int = 224, grid_size: int = 14) -> np.ndarray:
    """Map pixel coordinates onto the feature grid, componentwise.

    Each coordinate is floor-divided by the stride (image_size // grid_size)
    and clamped to [0, grid_size); the caller keeps its own axis convention.
    """
    if image_size % grid_size != 0:
        raise ConfigError(f"image size {image_size} not divisible by grid size {grid_size}")
    stride = image_size // grid_size
    p = np.floor(np.asarray(point, dtype=np.float64) / stride).astype(np.int64)
    return np.clip(p, 0, grid_size - 1)


def grid_centers_from_landmarks(
    landmarks: np.ndarray, table: AUCenterTable, image_size: int, grid_size: int
) -> np.ndarray:
    """Landmarks -> (2C,2) integer (row, col) centers on the feature grid."""
    centers_xy = compute_au_centers(landmarks, table)
    return map_to_feature_grid(centers_xy[:, ::-1], image_size, grid_size)


def _crop_origin(center_rc, grid: int, size: int) -> Tuple[int, int]:
    half = size // 2
    top = min(max(int(center_rc[0]) - half, 0), grid - size)
    left = min(max(int(center_rc[1]) - half, 0), grid - size)
    return top, left


def crop_region(feature_map: np.ndarray, center, size: int = 6) -> np.ndarray:
    """Fixed-size window around `center` (row, col), shifted to stay in-bounds.

    The window's top-left is center - size//2; when it would overflow the
    grid it is shifted (never zero-padded), so the output is always
    (size, size, D) of real feature content.
    """
    h, w = feature_map.shape[0], feature_map.shape[1]
    if size > h or size > w:
        raise ConfigError(f"crop size {size} exceeds feature grid {h}x{w}")
    r, c = int(center[0]), int(center[1])
    if not (0 <= r < h and 0 <= c < w):
        raise ValueError(f"center {(r, c)} outside {h}x{w} grid")
    top, left = _crop_origin((r, c), h, size)
    return feature_map[top : top + size, left : left + size]


def crops_forward(feature_maps: np.ndarray, centers: np.ndarray, size: int = 6):
    """Batched crops: fmaps (B,H,W,D), centers (B,2C,2) -> (B,2C,s,s,D).

    Also returns the (B,2C,2) window origins needed by the backward pass.
    """
    b, h, w, d = feature_maps.shape
    if size > h or size > w:
        raise ConfigError(f"crop size {size} exceeds feature grid {h}x{w}")
    n = centers.shape[1]
    out = np.empty((b, n, size, size, d), dtype=feature_maps.dtype)
    origins = np.empty((b, n, 2), dtype=np.int64)
    for bi in range(b):
        for k in range(n):
            top, left = _crop_origin(centers[bi, k], h, size)
            origins[bi, k, 0] = top
            origins[bi, k, 1] = left
            out[bi, k] = feature_maps[bi, top : top + size, left : left + size]
    return out, origins


def crops_backward(dcrops: np.ndarray, origins: np.ndarray, fmap_shape) -> np.ndarray:
    """Scatter-add crop gradients back onto the feature-map grid."""
    b, n, size = dcrops.shape[0], dcrops.shape[1], dcrops.shape[2]
    df = np.zeros(fmap_shape, dtype=dcrops.dtype)
    for bi in range(b):
        for k in range(n):
            top, left = origins[bi, k]
            df[bi, top : top + size, left : left + size] += dcrops[bi, k]
    return df
