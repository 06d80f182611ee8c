"""Named-tensor checkpoint archives.

An archive is an .npz holding float64 tensors plus a JSON manifest with the
tensor names/shapes/dtypes, a config fingerprint, the checkpoint kind
('marl' or 'relation'), and arbitrary extra state (epoch counters, optimizer
scalars, RNG stream states). Loads verify the fingerprint and refuse on
mismatch unless forced. Round-trips are bit-exact.
"""

from __future__ import annotations

import hashlib
import json
from pathlib import Path
from typing import Dict, Optional, Tuple

import numpy as np

from .errors import CheckpointError
from .params import ParameterSet

_MANIFEST_KEY = "__manifest__"
_PARAM_PREFIX = "param::"


def config_fingerprint(fields: dict) -> str:
    """Stable hash of the architecture-defining config fields."""
    blob = json.dumps(fields, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(blob.encode("utf-8")).hexdigest()[:16]


def save_checkpoint(
    path,
    params: ParameterSet,
    *,
    kind: str,
    fingerprint: str,
    extra: Optional[dict] = None,
    arrays: Optional[Dict[str, np.ndarray]] = None,
) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    payload = {f"{_PARAM_PREFIX}{k}": v for k, v in params.items()}
    if arrays:
        for k, v in arrays.items():
            if k.startswith(_PARAM_PREFIX) or k == _MANIFEST_KEY:
                raise ValueError(f"reserved array key: {k}")
            payload[k] = v
    manifest = {
        "kind": kind,
        "fingerprint": fingerprint,
        "names": params.names,
        "shapes": {k: list(v.shape) for k, v in params.items()},
        "dtypes": {k: str(v.dtype) for k, v in params.items()},
        "extra": extra or {},
    }
    payload[_MANIFEST_KEY] = np.frombuffer(
        json.dumps(manifest, sort_keys=True).encode("utf-8"), dtype=np.uint8
    )
    tmp = path.with_suffix(path.suffix + ".tmp")
    with open(tmp, "wb") as fh:
        np.savez(fh, **payload)
    tmp.replace(path)


def load_checkpoint(
    path,
    *,
    expect_fingerprint: Optional[str] = None,
    expect_kind: Optional[str] = None,
    force: bool = False,
) -> Tuple[ParameterSet, dict, Dict[str, np.ndarray]]:
    """Returns (params, manifest, extra_arrays)."""
    path = Path(path)
    if not path.is_file():
        raise CheckpointError(f"checkpoint not found: {path}")
    try:
        with np.load(path, allow_pickle=False) as zf:
            if _MANIFEST_KEY not in zf:
                raise CheckpointError(f"{path}: not a checkpoint archive (no manifest)")
            manifest = json.loads(bytes(zf[_MANIFEST_KEY]).decode("utf-8"))
            data = {k: zf[k] for k in zf.files if k != _MANIFEST_KEY}
    except (OSError, ValueError, KeyError) as exc:
        raise CheckpointError(f"{path}: corrupt checkpoint archive ({exc})") from exc
    if expect_kind is not None and manifest.get("kind") != expect_kind:
        raise CheckpointError(
            f"{path}: checkpoint kind {manifest.get('kind')!r}, expected {expect_kind!r}"
        )
    if expect_fingerprint is not None and manifest["fingerprint"] != expect_fingerprint:
        if not force:
            raise CheckpointError(
                f"{path}: config fingerprint mismatch "
                f"({manifest['fingerprint']} != {expect_fingerprint}); pass --force to override"
            )
    tensors = {}
    for name in manifest["names"]:
        key = f"{_PARAM_PREFIX}{name}"
        if key not in data:
            raise CheckpointError(f"{path}: manifest lists missing tensor {name!r}")
        tensors[name] = data.pop(key)
    return ParameterSet(tensors), manifest, data
