"""AU local-region representation network, the stage-1 meta-learner.

Pipeline per frame: a 4-group stride-16 convolutional backbone maps a
224x224x3 image to a 14x14xD feature map; 2C independent region branches
each consume one 6x6 crop around an AU center (one full-crop convolution,
i.e. a kernel spanning the whole window, then a fully connected layer to the
embedding width E); left/right branches of the same AU are averaged into C
AU embeddings; a per-AU two-layer head produces occurrence logits.

Branch independence is structural: branch k sees only crop k, so its output
gradient w.r.t. any other crop is exactly zero (tested by finite
differences). All parameters live in one ParameterSet so the meta-learning
inner loop can treat the whole network as a flat vector.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import List, Optional, Tuple

import numpy as np

from .checkpoint import CheckpointError, config_fingerprint, load_checkpoint
from .errors import ConfigError
from .geometry import AUCenterTable, crops_backward, crops_forward, grid_centers_from_landmarks
from .losses import LossWeights, au_loss, au_loss_value_and_grad, weighted_bce_value_and_grad
from .nn.layers import (
    conv3x3_backward,
    conv3x3_forward,
    grouped_linear_backward,
    grouped_linear_forward,
    maxpool2_backward,
    maxpool2_forward,
    relu_backward,
    relu_forward,
    sigmoid,
)
from .params import ParameterSet
from .rng import stream

N_GROUPS = 4
PROB_CLAMP = 1e-7


@dataclass(frozen=True)
class BackboneConfig:
    """Region-network architecture; widths shrink for desk-scale runs."""

    n_au: int
    input_size: int = 224
    grid_size: int = 14
    crop_size: int = 6
    widths: Tuple[int, ...] = (16, 32, 48, 64)
    convs_per_group: int = 1
    branch_channels: int = 64
    embed_dim: int = 150
    head_hidden: int = 64

    def __post_init__(self):
        if self.n_au < 1:
            raise ConfigError("n_au must be >= 1")
        if len(self.widths) != N_GROUPS:
            raise ConfigError(f"need {N_GROUPS} group widths, got {len(self.widths)}")
        if self.input_size != self.grid_size * 2 ** N_GROUPS:
            raise ConfigError(
                f"input {self.input_size} must equal grid {self.grid_size} x stride {2 ** N_GROUPS}"
            )
        if self.crop_size > self.grid_size:
            raise ConfigError(f"crop size {self.crop_size} exceeds grid {self.grid_size}")
        if min(self.widths) < 1 or self.convs_per_group < 1:
            raise ConfigError("widths and convs_per_group must be positive")

    @property
    def feature_channels(self) -> int:
        return self.widths[-1]

    def fingerprint_fields(self) -> dict:
        return {
            "n_au": self.n_au,
            "input_size": self.input_size,
            "grid_size": self.grid_size,
            "crop_size": self.crop_size,
            "widths": list(self.widths),
            "convs_per_group": self.convs_per_group,
            "branch_channels": self.branch_channels,
            "embed_dim": self.embed_dim,
            "head_hidden": self.head_hidden,
        }

    def fingerprint(self) -> str:
        return config_fingerprint(self.fingerprint_fields())


class RegionNetwork:
    """Forward/backward passes over a ParameterSet; holds no weights itself."""

    def __init__(self, cfg: BackboneConfig):
        self.cfg = cfg

    # -- parameter construction -------------------------------------------

    def backbone_names(self) -> List[str]:
        return [
            f"backbone.g{g}.c{c}.{t}"
            for g in range(N_GROUPS)
            for c in range(self.cfg.convs_per_group)
            for t in ("w", "b")
        ]

    def head_names(self) -> List[str]:
        return ["head.fc1.w", "head.fc1.b", "head.fc2.w", "head.fc2.b"]

    def init_params(self, seed: int, pretrained_path: Optional[str] = None) -> ParameterSet:
        """Fresh parameters; backbone tensors may come from a checkpoint file.

        Branch and head weights are always freshly initialized (the file only
        seeds the backbone). Deterministic in `seed`.
        """
        cfg = self.cfg
        tensors = {}
        rng_bb = stream(seed, "init/backbone")
        cin = 3
        for g in range(N_GROUPS):
            cout = cfg.widths[g]
            for c in range(cfg.convs_per_group):
                std = np.sqrt(2.0 / (9 * cin))
                tensors[f"backbone.g{g}.c{c}.w"] = rng_bb.standard_normal((3, 3, cin, cout)) * std
                tensors[f"backbone.g{g}.c{c}.b"] = np.zeros(cout)
                cin = cout
        rng_br = stream(seed, "init/branch")
        n2 = 2 * cfg.n_au
        m = cfg.crop_size * cfg.crop_size * cfg.feature_channels
        tensors["branch.conv.w"] = rng_br.standard_normal((n2, m, cfg.branch_channels)) * np.sqrt(2.0 / m)
        tensors["branch.conv.b"] = np.zeros((n2, cfg.branch_channels))
        tensors["branch.fc.w"] = rng_br.standard_normal(
            (n2, cfg.branch_channels, cfg.embed_dim)
        ) * np.sqrt(1.0 / cfg.branch_channels)
        tensors["branch.fc.b"] = np.zeros((n2, cfg.embed_dim))
        rng_hd = stream(seed, "init/head")
        tensors["head.fc1.w"] = rng_hd.standard_normal(
            (cfg.n_au, cfg.embed_dim, cfg.head_hidden)
        ) * np.sqrt(2.0 / cfg.embed_dim)
        tensors["head.fc1.b"] = np.zeros((cfg.n_au, cfg.head_hidden))
        tensors["head.fc2.w"] = rng_hd.standard_normal((cfg.n_au, cfg.head_hidden, 1)) * np.sqrt(
            1.0 / cfg.head_hidden
        )
        tensors["head.fc2.b"] = np.zeros((cfg.n_au, 1))
        params = ParameterSet(tensors)
        if pretrained_path is not None:
            self._load_backbone(params, pretrained_path)
        return params

    def _load_backbone(self, params: ParameterSet, path) -> None:
        loaded, _, _ = load_checkpoint(path)
        missing, mismatched = [], []
        for name in self.backbone_names():
            if name not in loaded:
                missing.append(name)
            elif loaded[name].shape != params[name].shape:
                mismatched.append(f"{name}: file {loaded[name].shape} vs config {params[name].shape}")
        if missing or mismatched:
            detail = "; ".join([f"missing {m}" for m in missing] + mismatched)
            raise CheckpointError(f"pretrained backbone incompatible: {detail}")
        for name in self.backbone_names():
            params[name] = loaded[name].copy()

    # -- forward / backward -----------------------------------------------

    def forward_features(self, params: ParameterSet, images: np.ndarray):
        if images.ndim != 4 or images.shape[1:] != (self.cfg.input_size, self.cfg.input_size, 3):
            raise ValueError(
                f"expected images (B,{self.cfg.input_size},{self.cfg.input_size},3), got {images.shape}"
            )
        x = images - 0.5
        caches = []
        for g in range(N_GROUPS):
            for c in range(self.cfg.convs_per_group):
                x, cc = conv3x3_forward(x, params[f"backbone.g{g}.c{c}.w"], params[f"backbone.g{g}.c{c}.b"])
                x, mask = relu_forward(x)
                caches.append((f"backbone.g{g}.c{c}", cc, mask))
            x, pc = maxpool2_forward(x)
            caches.append(("pool", pc, None))
        return x, caches

    def backward_features(self, caches, dfmap, grads: dict) -> None:
        dx = dfmap
        for entry in reversed(caches):
            tag, cache, mask = entry
            if tag == "pool":
                dx = maxpool2_backward(dx, cache)
            else:
                dx = relu_backward(dx, mask)
                dx, dw, db = conv3x3_backward(dx, cache)
                grads[f"{tag}.w"] = dw
                grads[f"{tag}.b"] = db

    def forward_embeddings(self, params: ParameterSet, fmap: np.ndarray, centers: np.ndarray):
        """Feature map + (B,2C,2) grid centers -> C merged AU tokens (B,C,E)."""
        cfg = self.cfg
        b = fmap.shape[0]
        n2 = 2 * cfg.n_au
        if centers.shape != (b, n2, 2):
            raise ValueError(f"expected centers (B,{n2},2), got {centers.shape}")
        crops, origins = crops_forward(fmap, centers, cfg.crop_size)
        flat = np.ascontiguousarray(crops.reshape(b, n2, -1).transpose(1, 0, 2))
        h, c1 = grouped_linear_forward(flat, params["branch.conv.w"], params["branch.conv.b"])
        a, m1 = relu_forward(h)
        e, c2 = grouped_linear_forward(a, params["branch.fc.w"], params["branch.fc.b"])
        emb = e.transpose(1, 0, 2)  # (B, 2C, E)
        tokens = 0.5 * (emb[:, 0::2] + emb[:, 1::2])
        cache = (origins, fmap.shape, c1, m1, c2)
        return tokens, cache

    def backward_embeddings(self, cache, dtokens: np.ndarray, grads: dict) -> np.ndarray:
        origins, fmap_shape, c1, m1, c2 = cache
        b, ncc, e = dtokens.shape
        demb = np.empty((b, 2 * ncc, e), dtype=dtokens.dtype)
        demb[:, 0::2] = 0.5 * dtokens
        demb[:, 1::2] = 0.5 * dtokens
        de = np.ascontiguousarray(demb.transpose(1, 0, 2))
        da, dwfc, dbfc = grouped_linear_backward(de, c2)
        dh = relu_backward(da, m1)
        dflat, dwcv, dbcv = grouped_linear_backward(dh, c1)
        grads["branch.fc.w"] = dwfc
        grads["branch.fc.b"] = dbfc
        grads["branch.conv.w"] = dwcv
        grads["branch.conv.b"] = dbcv
        s, d = self.cfg.crop_size, fmap_shape[3]
        dcrops = dflat.transpose(1, 0, 2).reshape(b, 2 * ncc, s, s, d)
        return crops_backward(dcrops, origins, fmap_shape)

    def forward_head(self, params: ParameterSet, tokens: np.ndarray):
        t = np.ascontiguousarray(tokens.transpose(1, 0, 2))  # (C, B, E)
        h, c1 = grouped_linear_forward(t, params["head.fc1.w"], params["head.fc1.b"])
        a, mask = relu_forward(h)
        z, c2 = grouped_linear_forward(a, params["head.fc2.w"], params["head.fc2.b"])
        logits = z[:, :, 0].T  # (B, C)
        return logits, (c1, mask, c2)

    def backward_head(self, cache, dlogits: np.ndarray, grads: dict) -> np.ndarray:
        c1, mask, c2 = cache
        dz = np.ascontiguousarray(dlogits.T[:, :, None])
        da, dw2, db2 = grouped_linear_backward(dz, c2)
        dh = relu_backward(da, mask)
        dt, dw1, db1 = grouped_linear_backward(dh, c1)
        grads["head.fc1.w"] = dw1
        grads["head.fc1.b"] = db1
        grads["head.fc2.w"] = dw2
        grads["head.fc2.b"] = db2
        return dt.transpose(1, 0, 2)

    def forward_logits(self, params: ParameterSet, images: np.ndarray, centers: np.ndarray):
        fmap, fcache = self.forward_features(params, images)
        tokens, ecache = self.forward_embeddings(params, fmap, centers)
        logits, hcache = self.forward_head(params, tokens)
        return logits, (fcache, ecache, hcache)

    def backward_logits(self, params: ParameterSet, caches, dlogits: np.ndarray) -> ParameterSet:
        fcache, ecache, hcache = caches
        grads: dict = {}
        dtokens = self.backward_head(hcache, dlogits, grads)
        dfmap = self.backward_embeddings(ecache, dtokens, grads)
        self.backward_features(fcache, dfmap, grads)
        return ParameterSet({name: grads[name] for name in params.names})

    # -- public ops ---------------------------------------------------------

    def embed(self, params: ParameterSet, images: np.ndarray, centers: np.ndarray) -> np.ndarray:
        """AU embedding tokens (B, C, E) with no gradient bookkeeping kept."""
        fmap, _ = self.forward_features(params, images)
        tokens, _ = self.forward_embeddings(params, fmap, centers)
        return tokens

    def predict_marl(
        self,
        params: ParameterSet,
        images: np.ndarray,
        centers: Optional[np.ndarray] = None,
        landmarks: Optional[np.ndarray] = None,
        table: Optional[AUCenterTable] = None,
    ) -> np.ndarray:
        """Per-AU occurrence probabilities, strictly inside (0, 1)."""
        if centers is None:
            if landmarks is None or table is None:
                raise ValueError("provide either grid centers or landmarks plus an AU table")
            lm = np.asarray(landmarks, dtype=np.float64)
            if lm.ndim == 2:
                lm = lm[None]
            centers = np.stack(
                [
                    grid_centers_from_landmarks(l, table, self.cfg.input_size, self.cfg.grid_size)
                    for l in lm
                ]
            )
        logits, _ = self.forward_logits(params, images, centers)
        return np.clip(sigmoid(logits), PROB_CLAMP, 1.0 - PROB_CLAMP)

    def loss_and_grad(
        self,
        params: ParameterSet,
        images: np.ndarray,
        centers: np.ndarray,
        labels: np.ndarray,
        weights: LossWeights,
        kind: str = "bce",
        mu: float = 1.5,
        eps: float = 1.0,
    ):
        """Loss, full parameter gradient, and the predicted probabilities."""
        logits, caches = self.forward_logits(params, images, centers)
        probs = sigmoid(logits)
        if kind == "bce":
            loss, dprobs = weighted_bce_value_and_grad(probs, labels, weights)
        elif kind == "au":
            loss, dprobs = au_loss_value_and_grad(probs, labels, weights, mu, eps)
        else:
            raise ValueError(f"unknown loss kind {kind!r}")
        dlogits = dprobs * probs * (1.0 - probs)
        grad = self.backward_logits(params, caches, dlogits)
        return loss, grad, probs


class RegionLearner:
    """Adapter giving the MAML engine loss/gradient callables over batches.

    A batch is an (images, centers, labels) triple. Inner loss is the
    weighted cross entropy; outer loss is the full AU loss (bce + mu * dice).
    """

    def __init__(self, net: RegionNetwork, weights: LossWeights, mu: float = 1.5, eps: float = 1.0):
        self.net = net
        self.weights = weights
        self.mu = mu
        self.eps = eps

    def inner_loss_and_grad(self, params: ParameterSet, batch):
        images, centers, labels = batch
        loss, grad, _ = self.net.loss_and_grad(params, images, centers, labels, self.weights, "bce")
        return loss, grad

    def outer_loss_and_grad(self, params: ParameterSet, batch):
        images, centers, labels = batch
        loss, grad, _ = self.net.loss_and_grad(
            params, images, centers, labels, self.weights, "au", self.mu, self.eps
        )
        return loss, grad

    def predict(self, params: ParameterSet, batch) -> np.ndarray:
        images, centers, _ = batch
        return self.net.predict_marl(params, images, centers=centers)

    def outer_loss(self, params: ParameterSet, batch) -> float:
        """Forward-only outer loss, for evaluation logging."""
        images, centers, labels = batch
        probs = self.net.predict_marl(params, images, centers=centers)
        return au_loss(probs, labels, self.weights, self.mu, self.eps)
