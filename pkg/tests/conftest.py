import numpy as np
import pytest

from aumeta.dataset import FrameLoader, load_manifest, select_test_fold, split_folds
from aumeta.region_network import BackboneConfig, RegionNetwork
from aumeta.synth import CorpusSpec, generate_corpus, synthetic_table

# Desk-scale network for gradient checks: 96x96 input keeps the 4-group /
# stride-16 topology (grid 6) while staying cheap enough for FD loops.
TINY_BB = dict(n_au=3, input_size=96, grid_size=6, crop_size=4,
               widths=(2, 3, 4, 5), convs_per_group=1, branch_channels=6,
               embed_dim=8, head_hidden=5)


@pytest.fixture(scope="session")
def tiny_net():
    return RegionNetwork(BackboneConfig(**TINY_BB))


@pytest.fixture(scope="session")
def tiny_corpus(tmp_path_factory):
    """Small rendered corpus shared across dataset/CLI tests."""
    root = tmp_path_factory.mktemp("corpus")
    spec = CorpusSpec(n_subjects=6, frames_per_subject=12, n_au=3,
                      identity_strength=0.5, seed=11)
    manifest = generate_corpus(spec, root)
    return {"root": root, "manifest": manifest, "spec": spec}


@pytest.fixture()
def tiny_index(tiny_corpus):
    index = load_manifest(tiny_corpus["manifest"], 3)
    return select_test_fold(split_folds(index, 3, seed=0), 0)


@pytest.fixture(scope="session")
def tiny_loader():
    return FrameLoader(synthetic_table(3), 224, 14)


def rel_err(a, b):
    a = np.asarray(a, dtype=np.float64).ravel()
    b = np.asarray(b, dtype=np.float64).ravel()
    denom = max(np.linalg.norm(a), np.linalg.norm(b), 1e-12)
    return float(np.linalg.norm(a - b) / denom)


def fd_gradient(f, x, eps=1e-6):
    """Central-difference gradient of scalar f at x (ndarray), elementwise."""
    x = np.asarray(x, dtype=np.float64)
    g = np.zeros_like(x)
    it = np.nditer(x, flags=["multi_index"])
    while not it.finished:
        idx = it.multi_index
        h = eps * max(1.0, abs(x[idx]))
        xp = x.copy(); xp[idx] += h
        xm = x.copy(); xm[idx] -= h
        g[idx] = (f(xp) - f(xm)) / (2 * h)
        it.iternext()
    return g
