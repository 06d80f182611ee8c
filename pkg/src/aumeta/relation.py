"""Stage-2 relation learning over AU embeddings.

The stage-1 checkpoint is imported minus its classification head (the last
two fully connected layers); the retained backbone + branch tensors produce
the C AU embedding tokens, a transformer encoder (multi-head self-attention
and a feed-forward block with post-norm residuals, no positional encoding)
mixes information across AUs, and a fresh per-AU two-layer classifier emits
occurrence logits. Training is plain supervised learning on the overall AU
loss with a step-decayed Adam schedule.

`use_encoder=False` bypasses the encoder entirely (tokens go straight to the
classifier), giving the token-independent baseline the ablation experiments
compare against.
"""

from __future__ import annotations

import json
import logging
import math
import re
from dataclasses import dataclass
from pathlib import Path
from typing import List, Optional

import numpy as np

from .checkpoint import CheckpointError, config_fingerprint, load_checkpoint, save_checkpoint
from .errors import ConfigError
from .losses import MetricsReport, au_loss_value_and_grad
from .maml import TrainingData
from .nn.attention import mha_backward, mha_forward
from .nn.layers import (
    dropout_backward,
    dropout_forward,
    grouped_linear_backward,
    grouped_linear_forward,
    layernorm_backward,
    layernorm_forward,
    linear_backward,
    linear_forward,
    relu_backward,
    relu_forward,
    sigmoid,
)
from .optim import Adam
from .params import ParameterSet
from .region_network import PROB_CLAMP, RegionNetwork
from .rng import stream

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class EncoderConfig:
    n_tokens: int
    width: int
    n_heads: int = 4
    n_layers: int = 2
    ff_width: Optional[int] = None
    dropout: float = 0.1
    cls_hidden: int = 64

    def __post_init__(self):
        if self.width % self.n_heads != 0:
            raise ConfigError(f"width {self.width} not divisible by {self.n_heads} heads")
        if self.n_layers < 1:
            raise ConfigError("encoder needs at least one layer")
        if not (0.0 <= self.dropout < 1.0):
            raise ConfigError("dropout rate must be in [0, 1)")

    @property
    def ff(self) -> int:
        return self.ff_width if self.ff_width is not None else 4 * self.width

    def fingerprint_fields(self) -> dict:
        return {
            "n_tokens": self.n_tokens,
            "width": self.width,
            "n_heads": self.n_heads,
            "n_layers": self.n_layers,
            "ff_width": self.ff,
            "cls_hidden": self.cls_hidden,
        }


@dataclass
class RelationTrainConfig:
    epochs: int = 30
    batch_size: int = 16
    test_batch_size: int = 32
    lr: float = 0.006
    lr_decay: float = 0.3
    lr_decay_every: int = 2
    mu: float = 1.5
    smooth_eps: float = 1.0


def relation_lr(cfg: RelationTrainConfig, epoch: int) -> float:
    """Step-decay schedule: lr multiplied by `lr_decay` every `lr_decay_every` epochs."""
    return cfg.lr * cfg.lr_decay ** (epoch // cfg.lr_decay_every)


class RelationModel:
    """Forward/backward for the retained region network + encoder + classifier."""

    def __init__(self, net: RegionNetwork, enc_cfg: EncoderConfig):
        if enc_cfg.n_tokens != net.cfg.n_au or enc_cfg.width != net.cfg.embed_dim:
            raise ConfigError("encoder token count/width must match the region network")
        self.net = net
        self.enc_cfg = enc_cfg

    def fingerprint(self) -> str:
        return config_fingerprint(
            {"region": self.net.cfg.fingerprint_fields(), "encoder": self.enc_cfg.fingerprint_fields()}
        )

    # -- parameters ---------------------------------------------------------

    def retained_names(self) -> List[str]:
        """Stage-1 tensors kept after dropping the classification head."""
        dummy = self.net
        names = dummy.backbone_names() + ["branch.conv.w", "branch.conv.b", "branch.fc.w", "branch.fc.b"]
        return names

    def init_head_params(self, seed: int) -> dict:
        """Fresh encoder + classifier tensors (retained tensors come from import)."""
        cfg = self.enc_cfg
        e, ff, c = cfg.width, cfg.ff, cfg.n_tokens
        rng = stream(seed, "init/relation")
        t = {}
        for i in range(cfg.n_layers):
            pre = f"enc.l{i}"
            for nm in ("wq", "wk", "wv", "wo"):
                t[f"{pre}.attn.{nm}"] = rng.standard_normal((e, e)) * np.sqrt(1.0 / e)
            for nm in ("bq", "bk", "bv", "bo"):
                t[f"{pre}.attn.{nm}"] = np.zeros(e)
            t[f"{pre}.ln1.g"] = np.ones(e)
            t[f"{pre}.ln1.b"] = np.zeros(e)
            t[f"{pre}.ff.w1"] = rng.standard_normal((e, ff)) * np.sqrt(2.0 / e)
            t[f"{pre}.ff.b1"] = np.zeros(ff)
            t[f"{pre}.ff.w2"] = rng.standard_normal((ff, e)) * np.sqrt(1.0 / ff)
            t[f"{pre}.ff.b2"] = np.zeros(e)
            t[f"{pre}.ln2.g"] = np.ones(e)
            t[f"{pre}.ln2.b"] = np.zeros(e)
        t["cls.fc1.w"] = rng.standard_normal((c, e, cfg.cls_hidden)) * np.sqrt(2.0 / e)
        t["cls.fc1.b"] = np.zeros((c, cfg.cls_hidden))
        t["cls.fc2.w"] = rng.standard_normal((c, cfg.cls_hidden, 1)) * np.sqrt(1.0 / cfg.cls_hidden)
        t["cls.fc2.b"] = np.zeros((c, 1))
        return t

    # -- encoder ------------------------------------------------------------

    def encode_forward(self, params: ParameterSet, tokens: np.ndarray,
                       train: bool = False, rng=None, collect_attention: bool = False):
        """Tokens (B,C,E) -> (B,C,E); token count and width are preserved.

        With dropout off (train=False) the map is deterministic and exactly
        permutation-equivariant. Optionally returns per-layer attention maps
        (B, heads, C, C).
        """
        cfg = self.enc_cfg
        if tokens.ndim != 3 or tokens.shape[2] != cfg.width:
            raise ValueError(f"expected tokens (B,T,{cfg.width}), got {tokens.shape}")
        rate = cfg.dropout if train else 0.0
        drop_rng = rng if train else None
        x = tokens
        caches, attns = [], []
        for i in range(cfg.n_layers):
            pre = f"enc.l{i}"
            a_out, attn, acache = mha_forward(x, params, f"{pre}.attn", cfg.n_heads, rate, drop_rng)
            if collect_attention:
                attns.append(attn)
            n1, c_ln1 = layernorm_forward(x + a_out, params[f"{pre}.ln1.g"], params[f"{pre}.ln1.b"])
            f1, c_f1 = linear_forward(n1, params[f"{pre}.ff.w1"], params[f"{pre}.ff.b1"])
            f1a, fmask = relu_forward(f1)
            f2, c_f2 = linear_forward(f1a, params[f"{pre}.ff.w2"], params[f"{pre}.ff.b2"])
            f2, dmask = dropout_forward(f2, rate, drop_rng)
            n2, c_ln2 = layernorm_forward(n1 + f2, params[f"{pre}.ln2.g"], params[f"{pre}.ln2.b"])
            caches.append((acache, c_ln1, c_f1, fmask, c_f2, dmask, c_ln2))
            x = n2
        return x, caches, attns

    def encode_backward(self, dout: np.ndarray, caches, grads: dict) -> np.ndarray:
        dx = dout
        for i in reversed(range(self.enc_cfg.n_layers)):
            pre = f"enc.l{i}"
            acache, c_ln1, c_f1, fmask, c_f2, dmask, c_ln2 = caches[i]
            dr2, dg2, db2 = layernorm_backward(dx, c_ln2)
            grads[f"{pre}.ln2.g"] = dg2
            grads[f"{pre}.ln2.b"] = db2
            df2 = dropout_backward(dr2, dmask)
            df1a, dw2, db2f = linear_backward(df2, c_f2)
            grads[f"{pre}.ff.w2"] = dw2
            grads[f"{pre}.ff.b2"] = db2f
            df1 = relu_backward(df1a, fmask)
            dn1_ff, dw1, db1f = linear_backward(df1, c_f1)
            grads[f"{pre}.ff.w1"] = dw1
            grads[f"{pre}.ff.b1"] = db1f
            dn1 = dr2 + dn1_ff
            dr1, dg1, db1 = layernorm_backward(dn1, c_ln1)
            grads[f"{pre}.ln1.g"] = dg1
            grads[f"{pre}.ln1.b"] = db1
            dx_attn, agrads = mha_backward(dr1, acache)
            for nm, g in agrads.items():
                grads[f"{pre}.attn.{nm}"] = g
            dx = dr1 + dx_attn
        return dx

    # -- classifier ---------------------------------------------------------

    def classify_forward(self, params: ParameterSet, tokens: np.ndarray):
        t = np.ascontiguousarray(tokens.transpose(1, 0, 2))
        h, c1 = grouped_linear_forward(t, params["cls.fc1.w"], params["cls.fc1.b"])
        a, mask = relu_forward(h)
        z, c2 = grouped_linear_forward(a, params["cls.fc2.w"], params["cls.fc2.b"])
        return z[:, :, 0].T, (c1, mask, c2)

    def classify_backward(self, dlogits: np.ndarray, cache, grads: dict) -> np.ndarray:
        c1, mask, c2 = cache
        dz = np.ascontiguousarray(dlogits.T[:, :, None])
        da, dw2, db2 = grouped_linear_backward(dz, c2)
        dh = relu_backward(da, mask)
        dt, dw1, db1 = grouped_linear_backward(dh, c1)
        grads["cls.fc1.w"] = dw1
        grads["cls.fc1.b"] = db1
        grads["cls.fc2.w"] = dw2
        grads["cls.fc2.b"] = db2
        return dt.transpose(1, 0, 2)

    # -- full pipeline ------------------------------------------------------

    def tokens_to_logits(self, params: ParameterSet, tokens: np.ndarray, *,
                         use_encoder: bool = True, train: bool = False, rng=None):
        if use_encoder:
            enc_out, enc_caches, _ = self.encode_forward(params, tokens, train, rng)
        else:
            enc_out, enc_caches = tokens, None
        logits, ccache = self.classify_forward(params, enc_out)
        return logits, (enc_caches, ccache)

    def logits_backward_tokens(self, dlogits: np.ndarray, caches, grads: dict,
                               use_encoder: bool = True) -> np.ndarray:
        enc_caches, ccache = caches
        denc = self.classify_backward(dlogits, ccache, grads)
        if use_encoder:
            return self.encode_backward(denc, enc_caches, grads)
        return denc

    def forward_logits(self, params: ParameterSet, images: np.ndarray, centers: np.ndarray, *,
                       use_encoder: bool = True, train: bool = False, rng=None):
        fmap, fcache = self.net.forward_features(params, images)
        tokens, ecache = self.net.forward_embeddings(params, fmap, centers)
        logits, tcaches = self.tokens_to_logits(params, tokens, use_encoder=use_encoder,
                                                train=train, rng=rng)
        return logits, (fcache, ecache, tcaches)

    def predict(self, params: ParameterSet, images: np.ndarray, centers: np.ndarray,
                use_encoder: bool = True) -> np.ndarray:
        logits, _ = self.forward_logits(params, images, centers, use_encoder=use_encoder)
        return np.clip(sigmoid(logits), PROB_CLAMP, 1.0 - PROB_CLAMP)

    def loss_and_grad(self, params: ParameterSet, batch, weights, *, mu: float = 1.5,
                      eps: float = 1.0, use_encoder: bool = True, freeze_backbone: bool = False,
                      train: bool = False, rng=None):
        """Loss and gradient through the whole relational pipeline.

        With `freeze_backbone` the gradient stops at the AU tokens and the
        returned set only covers encoder/classifier tensors.
        """
        images, centers, labels = batch
        fmap, fcache = self.net.forward_features(params, images)
        tokens, ecache = self.net.forward_embeddings(params, fmap, centers)
        logits, tcaches = self.tokens_to_logits(params, tokens, use_encoder=use_encoder,
                                                train=train, rng=rng)
        probs = sigmoid(logits)
        loss, dprobs = au_loss_value_and_grad(probs, labels, weights, mu, eps)
        dlogits = dprobs * probs * (1.0 - probs)
        grads: dict = {}
        dtokens = self.logits_backward_tokens(dlogits, tcaches, grads, use_encoder=use_encoder)
        if not freeze_backbone:
            dfmap = self.net.backward_embeddings(ecache, dtokens, grads)
            self.net.backward_features(fcache, dfmap, grads)
        grad = ParameterSet({n: grads[n] for n in params.names if n in grads})
        return loss, grad, probs

    def loss_and_grad_tokens(self, params: ParameterSet, tokens: np.ndarray, labels: np.ndarray,
                             weights, *, mu: float = 1.5, eps: float = 1.0,
                             use_encoder: bool = True, train: bool = False, rng=None):
        """Frozen-backbone path over precomputed tokens."""
        logits, tcaches = self.tokens_to_logits(params, tokens, use_encoder=use_encoder,
                                                train=train, rng=rng)
        probs = sigmoid(logits)
        loss, dprobs = au_loss_value_and_grad(probs, labels, weights, mu, eps)
        dlogits = dprobs * probs * (1.0 - probs)
        grads: dict = {}
        self.logits_backward_tokens(dlogits, tcaches, grads, use_encoder=use_encoder)
        grad = ParameterSet({n: grads[n] for n in params.names if n in grads})
        return loss, grad, probs


# ---------------------------------------------------------------------------
# stage-1 import and training
# ---------------------------------------------------------------------------

def import_marl(marl_ckpt, model: RelationModel, seed: int, force: bool = False) -> ParameterSet:
    """Load the optimal stage-1 parameters, drop the stage-1 head, and attach
    freshly initialized encoder/classifier tensors."""
    region_fp = model.net.cfg.fingerprint()
    loaded, manifest, _ = load_checkpoint(marl_ckpt, expect_fingerprint=region_fp,
                                          expect_kind="marl", force=force)
    retained = model.retained_names()
    missing = [n for n in retained if n not in loaded]
    if missing:
        raise CheckpointError(f"{marl_ckpt}: stage-1 checkpoint missing tensors: {', '.join(missing)}")
    tensors = {n: loaded[n].copy() for n in retained}
    tensors.update(model.init_head_params(seed))
    return ParameterSet(tensors)


def evaluate_relation(model: RelationModel, params: ParameterSet, data: TrainingData,
                      batch_size: int, *, use_encoder: bool = True,
                      fold_id: Optional[int] = None, seed: Optional[int] = None) -> MetricsReport:
    """Plain (non-episodic) evaluation over every test-fold frame."""
    records = data.index.records_for_role("test")
    if not records:
        raise ConfigError("no test-fold frames to evaluate")
    preds, labels = [], []
    for i in range(0, len(records), batch_size):
        chunk = records[i : i + batch_size]
        images, centers, lab = data.loader.batch(chunk)
        preds.append(model.predict(params, images, centers, use_encoder=use_encoder))
        labels.append(lab)
    return MetricsReport.from_predictions(np.concatenate(preds), np.concatenate(labels),
                                          au_names=data.au_names or None,
                                          fold_id=fold_id, seed=seed)


def _latest_epoch_ckpt(out_dir: Path):
    best, best_epoch = None, -1
    for p in out_dir.glob("relation_epoch_*.ckpt"):
        m = re.match(r"relation_epoch_(\d+)\.ckpt$", p.name)
        if m and int(m.group(1)) > best_epoch:
            best_epoch = int(m.group(1))
            best = p
    return best, best_epoch


def run_relation_training(cfg: RelationTrainConfig, data: TrainingData, model: RelationModel,
                          marl_ckpt, out_dir, *, seed: int, fold_id: Optional[int] = None,
                          freeze_backbone: bool = False, use_encoder: bool = True,
                          resume: bool = False, force: bool = False) -> Path:
    """Supervised stage-2 training from a stage-1 checkpoint.

    Evaluates on the test fold each epoch, tracks the best checkpoint, and
    resumes from the last epoch checkpoint when asked. With a frozen backbone
    the AU tokens are precomputed once and training touches only the
    encoder/classifier tensors.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    fingerprint = model.fingerprint()
    params = import_marl(marl_ckpt, model, seed, force=force)
    optimizer = Adam(lr=cfg.lr)
    if freeze_backbone:
        optimizer.frozen = set(model.retained_names())
    start_epoch, best_score, best_path = 0, -math.inf, None

    if resume:
        path, _ = _latest_epoch_ckpt(out_dir)
        if path is not None:
            params, manifest, arrays = load_checkpoint(path, expect_fingerprint=fingerprint,
                                                       expect_kind="relation")
            extra = manifest["extra"]
            start_epoch = extra["epoch"]
            best_score = extra["best_score"] if extra["best_score"] is not None else -math.inf
            best_path = extra.get("best_path")
            optimizer.load_state_arrays(arrays, params, extra["adam_t"])
            logger.info("resumed relation training from %s", path)

    train_records = data.index.records_for_role("train")
    if not train_records:
        raise ConfigError("no training-fold frames available")

    token_cache = None
    if freeze_backbone:
        token_cache = {}
        for recs in (train_records, data.index.records_for_role("test")):
            for i in range(0, len(recs), cfg.test_batch_size):
                chunk = recs[i : i + cfg.test_batch_size]
                images, centers, _ = data.loader.batch(chunk)
                toks = model.net.embed(params, images, centers)
                for rec, tok in zip(chunk, toks):
                    token_cache[id(rec)] = tok

    mode = "a" if start_epoch > 0 else "w"
    with open(out_dir / "relation_train_log.txt", mode) as train_log, \
         open(out_dir / "relation_metrics_log.txt", mode) as metrics_log:
        for epoch in range(start_epoch, cfg.epochs):
            lr = relation_lr(cfg, epoch)
            order_rng = stream(seed, f"relation/order/epoch{epoch}")
            drop_rng = stream(seed, f"relation/dropout/epoch{epoch}")
            order = order_rng.permutation(len(train_records))
            for step, lo in enumerate(range(0, len(order), cfg.batch_size)):
                chunk = [train_records[int(i)] for i in order[lo : lo + cfg.batch_size]]
                if token_cache is not None:
                    tokens = np.stack([token_cache[id(r)] for r in chunk])
                    labels = np.stack([r.labels for r in chunk]).astype(np.float64)
                    loss, grad, _ = model.loss_and_grad_tokens(
                        params, tokens, labels, data.weights, mu=cfg.mu, eps=cfg.smooth_eps,
                        use_encoder=use_encoder, train=True, rng=drop_rng)
                else:
                    batch = data.loader.batch(chunk)
                    loss, grad, _ = model.loss_and_grad(
                        params, batch, data.weights, mu=cfg.mu, eps=cfg.smooth_eps,
                        use_encoder=use_encoder, freeze_backbone=False, train=True, rng=drop_rng)
                if not np.isfinite(loss) or not grad.all_finite():
                    logger.warning("epoch %d step %d: non-finite loss; step skipped", epoch, step)
                    continue
                _apply_partial_step(optimizer, params, grad, lr)
                train_log.write(f"{epoch} {step} {loss:.6f} {lr:.8f}\n")
            train_log.flush()

            report = evaluate_relation(model, params, data, cfg.test_batch_size,
                                       use_encoder=use_encoder, fold_id=fold_id, seed=seed)
            per_au = " ".join(f"{n} {f:.6f}" for n, f in zip(report.au_names, report.per_au_f1))
            metrics_log.write(f"epoch {epoch} avg_f1 {report.avg_f1:.6f} {per_au}\n")
            metrics_log.flush()
            if report.avg_f1 > best_score:
                best_score = report.avg_f1
                best = out_dir / "relation_best.ckpt"
                save_checkpoint(best, params, kind="relation", fingerprint=fingerprint,
                                extra={"epoch": epoch, "avg_f1": report.avg_f1,
                                       "use_encoder": use_encoder})
                best_path = str(best)

            ckpt = out_dir / f"relation_epoch_{epoch + 1}.ckpt"
            save_checkpoint(ckpt, params, kind="relation", fingerprint=fingerprint,
                            extra={"epoch": epoch + 1,
                                   "best_score": best_score if math.isfinite(best_score) else None,
                                   "best_path": best_path, "adam_t": optimizer.t,
                                   "use_encoder": use_encoder},
                            arrays=optimizer.state_arrays())
            prev = out_dir / f"relation_epoch_{epoch}.ckpt"
            if prev.exists():
                prev.unlink()

    if best_path is None:
        raise RuntimeError("relation training finished without saving a best checkpoint")
    return Path(best_path)


def _apply_partial_step(optimizer: Adam, params: ParameterSet, grad: ParameterSet, lr: float):
    """Adam step where `grad` may cover a subset of `params` (frozen backbone)."""
    if grad.names == params.names:
        optimizer.step(params, grad, lr=lr)
        return
    full = params.zeros_like()
    for name, g in grad.items():
        full[name] = g
    optimizer.step(params, full, lr=lr)
