"""Bilevel meta-training engine: inner-loop adaptation, outer meta-updates,
meta-testing, and the epoch loop with best-checkpoint tracking.

The inner loop takes plain gradient steps with step size alpha on the support
loss. The outer loop updates the shared initialization with Adam (step size
beta) on the mean query loss across the task batch. In second-order mode the
meta-gradient is the exact reverse recursion

    v <- (I - alpha * H(theta_k)) v,   k = last step .. first step,

seeded with the query gradient at the adapted parameters; the Hessian-vector
products are evaluated by central finite differences of the analytic gradient
(two extra gradient calls per inner step). First-order mode skips the
recursion and uses the query gradient directly. Both modes are validated in
the tests against closed forms on a quadratic task family and against finite
differences of the composed map.

Also provides an identically-budgeted plain supervised trainer over the same
network, checkpoint format, and model-selection protocol, used as the
non-meta baseline in the ablation experiments.
"""

from __future__ import annotations

import json
import logging
import math
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import List, Optional, Tuple

import numpy as np

from .checkpoint import load_checkpoint, save_checkpoint
from .dataset import FrameLoader, MetaBatch, SubjectIndex, sample_meta_batch
from .errors import AdaptationError, ConfigError, MetaGradientError
from .losses import LossWeights, MetricsReport
from .optim import Adam
from .params import ParameterSet
from .rng import stream

logger = logging.getLogger(__name__)

_FD_EPS_BASE = float(np.cbrt(np.finfo(np.float64).eps))  # ~6.06e-6


@dataclass
class MetaConfig:
    alpha: float = 0.01
    beta: float = 0.006
    k_tasks: int = 5
    support_size: int = 5
    query_size: int = 15
    inner_steps: int = 1
    order: str = "second"
    epochs: int = 100
    batches_per_epoch: int = 100
    test_batches: int = 600
    test_adapt_steps: int = 5
    hvp_eps: Optional[float] = None

    def __post_init__(self):
        # alpha/beta = 0 stays legal for the documented degenerate diagnostics
        # (zero-step identity checks); real runs use the positive defaults.
        if self.alpha < 0 or self.beta < 0:
            raise ConfigError("step sizes must be non-negative")
        if self.k_tasks < 1 or self.inner_steps < 1 or self.test_adapt_steps < 0:
            raise ConfigError("k_tasks/inner_steps must be >= 1, test_adapt_steps >= 0")
        if self.order not in ("second", "first"):
            raise ConfigError(f"order must be 'second' or 'first', got {self.order!r}")


@dataclass
class MetaState:
    params: ParameterSet
    optimizer: Adam
    epoch: int = 0
    best_score: float = -math.inf
    best_path: Optional[str] = None


@dataclass
class TrainingData:
    """What a training run reads: fold-aware index, frame loader, loss weights."""

    index: SubjectIndex
    loader: FrameLoader
    weights: LossWeights
    au_names: List[str] = field(default_factory=list)


# ---------------------------------------------------------------------------
# core engine
# ---------------------------------------------------------------------------

def inner_adapt(learner, params: ParameterSet, support_batch, alpha: float, steps: int,
                task_id: str = "task", record_trajectory: bool = False):
    """Plain gradient descent on the support loss.

    Returns (adapted params, trajectory, last support loss). The trajectory
    holds the parameter points where gradients were taken, which the
    second-order correction replays in reverse; `steps=0` or `alpha=0`
    leaves the parameters unchanged.
    """
    theta = params
    trajectory: List[ParameterSet] = []
    last_loss = None
    for _ in range(steps):
        loss, grad = learner.inner_loss_and_grad(theta, support_batch)
        if not np.isfinite(loss) or not grad.all_finite():
            raise AdaptationError(task_id, f"non-finite inner loss/gradient (loss={loss})")
        if record_trajectory:
            trajectory.append(theta)
        last_loss = loss
        theta = theta.add_scaled(grad, -alpha)
    return theta, trajectory, last_loss


def fd_hvp(grad_fn, theta: ParameterSet, vec: ParameterSet,
           base_eps: Optional[float] = None) -> ParameterSet:
    """Hessian-vector product H(theta) @ vec via central differences of grad_fn."""
    vnorm = vec.norm()
    if vnorm == 0.0:
        return vec.zeros_like()
    eps = base_eps if base_eps is not None else _FD_EPS_BASE
    h = eps * (1.0 + theta.norm()) / vnorm
    _, gp = grad_fn(theta.add_scaled(vec, h))
    _, gm = grad_fn(theta.add_scaled(vec, -h))
    return (gp - gm) * (1.0 / (2.0 * h))


def episode_meta_gradient(learner, params: ParameterSet, support_batch, query_batch,
                          alpha: float, inner_steps: int, order: str,
                          task_id: str = "task", hvp_eps: Optional[float] = None):
    """Meta-gradient of one episode's query loss w.r.t. the shared params.

    Returns (grad, outer_loss, inner_loss).
    """
    second = order == "second"
    theta_i, trajectory, inner_loss = inner_adapt(
        learner, params, support_batch, alpha, inner_steps, task_id, record_trajectory=second
    )
    outer_loss, g_query = learner.outer_loss_and_grad(theta_i, query_batch)
    if not second or alpha == 0.0:
        return g_query, outer_loss, inner_loss
    v = g_query
    for theta_k in reversed(trajectory):
        hv = fd_hvp(lambda p: learner.inner_loss_and_grad(p, support_batch), theta_k, v, hvp_eps)
        v = v.add_scaled(hv, -alpha)
    return v, outer_loss, inner_loss


def meta_gradient(learner, params: ParameterSet, episodes, cfg: MetaConfig):
    """Average the episode meta-gradients; episodes are (support, query, task_id)."""
    acc = None
    outer_losses, inner_losses = [], []
    for support_batch, query_batch, task_id in episodes:
        g, outer_loss, inner_loss = episode_meta_gradient(
            learner, params, support_batch, query_batch,
            cfg.alpha, cfg.inner_steps, cfg.order, task_id, cfg.hvp_eps,
        )
        acc = g if acc is None else acc + g
        outer_losses.append(outer_loss)
        if inner_loss is not None:
            inner_losses.append(inner_loss)
    mean_grad = acc * (1.0 / len(outer_losses))
    mean_inner = float(np.mean(inner_losses)) if inner_losses else math.nan
    return mean_grad, float(np.mean(outer_losses)), mean_inner


def outer_step(state: MetaState, episodes, cfg: MetaConfig, learner) -> Tuple[float, float]:
    """One meta-update of `state.params` in place.

    Raises MetaGradientError before touching the state if the averaged
    meta-gradient is non-finite. Returns (outer loss, inner loss).
    """
    grad, outer_loss, inner_loss = meta_gradient(learner, state.params, episodes, cfg)
    if not np.isfinite(outer_loss) or not grad.all_finite():
        raise MetaGradientError(f"non-finite meta-gradient (outer loss {outer_loss})")
    state.optimizer.step(state.params, grad, lr=cfg.beta)
    return outer_loss, inner_loss


def batches_from_meta_batch(meta_batch: MetaBatch, loader: FrameLoader):
    return [
        (loader.batch(ep.support), loader.batch(ep.query), ep.task_id)
        for ep in meta_batch.episodes
    ]


# ---------------------------------------------------------------------------
# meta-testing
# ---------------------------------------------------------------------------

def meta_test(learner, params: ParameterSet, data: TrainingData, cfg: MetaConfig, rng,
              n_batches: Optional[int] = None, fold_id: Optional[int] = None,
              seed: Optional[int] = None) -> MetricsReport:
    """Adapt a clone of `params` on each test episode's adaptation frames,
    score the adapted model on the episode's held-out frames, and pool all
    predictions into per-AU F1."""
    n_batches = cfg.test_batches if n_batches is None else n_batches
    all_preds, all_labels, losses = [], [], []
    for _ in range(n_batches):
        mb = sample_meta_batch(data.index, "test", cfg.k_tasks, cfg.support_size, cfg.query_size, rng)
        for support_batch, query_batch, task_id in batches_from_meta_batch(mb, data.loader):
            theta_te, _, _ = inner_adapt(
                learner, params, support_batch, cfg.alpha, cfg.test_adapt_steps, task_id
            )
            all_preds.append(learner.predict(theta_te, query_batch))
            all_labels.append(query_batch[2])
            losses.append(learner.outer_loss(theta_te, query_batch))
    return MetricsReport.from_predictions(
        np.concatenate(all_preds), np.concatenate(all_labels),
        au_names=data.au_names or None, fold_id=fold_id, seed=seed,
        losses={"outer": float(np.mean(losses))},
    )


# ---------------------------------------------------------------------------
# training loops
# ---------------------------------------------------------------------------

def _latest_epoch_ckpt(out_dir: Path):
    best, best_epoch = None, -1
    for p in out_dir.glob("marl_epoch_*.ckpt"):
        m = re.match(r"marl_epoch_(\d+)\.ckpt$", p.name)
        if m and int(m.group(1)) > best_epoch:
            best_epoch = int(m.group(1))
            best = p
    return best, best_epoch


def _save_epoch_ckpt(out_dir: Path, state: MetaState, fingerprint: str, sampler_rng) -> None:
    path = out_dir / f"marl_epoch_{state.epoch}.ckpt"
    extra = {
        "epoch": state.epoch,
        "best_score": state.best_score if math.isfinite(state.best_score) else None,
        "adam_t": state.optimizer.t,
        "sampler_rng": json.dumps(sampler_rng.bit_generator.state),
    }
    save_checkpoint(path, state.params, kind="marl", fingerprint=fingerprint,
                    extra=extra, arrays=state.optimizer.state_arrays())
    prev = out_dir / f"marl_epoch_{state.epoch - 1}.ckpt"
    if prev.exists():
        prev.unlink()


def _resume_state(out_dir: Path, state: MetaState, fingerprint: str, sampler_rng) -> bool:
    path, epoch = _latest_epoch_ckpt(out_dir)
    if path is None:
        return False
    params, manifest, arrays = load_checkpoint(path, expect_fingerprint=fingerprint, expect_kind="marl")
    extra = manifest["extra"]
    state.params = params
    state.epoch = extra["epoch"]
    state.best_score = extra["best_score"] if extra["best_score"] is not None else -math.inf
    state.optimizer.load_state_arrays(arrays, params, extra["adam_t"])
    sampler_rng.bit_generator.state = json.loads(extra["sampler_rng"])
    logger.info("resumed from %s at epoch %d", path, epoch)
    return True


def _evaluate_and_checkpoint(state: MetaState, learner, data: TrainingData, cfg: MetaConfig,
                             out_dir: Path, metrics_log, *, seed: int, fold_id,
                             fingerprint: str, test_batches: Optional[int], sampler_rng) -> None:
    epoch = state.epoch
    test_rng = stream(seed, f"meta/test/epoch{epoch}")
    report = meta_test(learner, state.params, data, cfg, test_rng,
                       n_batches=test_batches, fold_id=fold_id, seed=seed)
    per_au = " ".join(f"{n} {f:.6f}" for n, f in zip(report.au_names, report.per_au_f1))
    metrics_log.write(f"epoch {epoch} avg_f1 {report.avg_f1:.6f} {per_au}\n")
    metrics_log.flush()
    if report.avg_f1 > state.best_score:
        state.best_score = report.avg_f1
        best_path = out_dir / "marl_best.ckpt"
        save_checkpoint(best_path, state.params, kind="marl", fingerprint=fingerprint,
                        extra={"epoch": epoch, "avg_f1": report.avg_f1})
        state.best_path = str(best_path)
        logger.info("epoch %d: new best avg F1 %.4f", epoch, report.avg_f1)
    state.epoch = epoch + 1
    _save_epoch_ckpt(out_dir, state, fingerprint, sampler_rng)


def run_meta_training(cfg: MetaConfig, data: TrainingData, learner, init_params: ParameterSet,
                      out_dir, *, seed: int, fingerprint: str, fold_id: Optional[int] = None,
                      test_batches_per_epoch: Optional[int] = None,
                      resume: bool = False) -> Path:
    """Full meta-training: N outer steps per epoch, meta-test every epoch,
    keep the best initialization by average F1. Returns the best-ckpt path.

    Epoch checkpoints carry optimizer moments and the sampler RNG state, so
    an interrupted run resumes from the last finished epoch bit-exactly.
    """
    if cfg.alpha <= 0 or cfg.beta <= 0:
        raise ConfigError("meta-training needs positive alpha and beta")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    sampler_rng = stream(seed, "meta/sampling")
    state = MetaState(params=init_params.copy(), optimizer=Adam(lr=cfg.beta))
    resumed = resume and _resume_state(out_dir, state, fingerprint, sampler_rng)
    mode = "a" if resumed else "w"
    with open(out_dir / "train_log.txt", mode) as train_log, \
         open(out_dir / "metrics_log.txt", mode) as metrics_log:
        for epoch in range(state.epoch, cfg.epochs):
            for step in range(cfg.batches_per_epoch):
                mb = sample_meta_batch(data.index, "train", cfg.k_tasks,
                                       cfg.support_size, cfg.query_size, sampler_rng)
                episodes = batches_from_meta_batch(mb, data.loader)
                try:
                    outer_loss, inner_loss = outer_step(state, episodes, cfg, learner)
                except MetaGradientError as exc:
                    logger.warning("epoch %d step %d rejected: %s", epoch, step, exc)
                    continue
                train_log.write(f"{epoch} {step} {inner_loss:.6f} {outer_loss:.6f}\n")
            train_log.flush()
            _evaluate_and_checkpoint(state, learner, data, cfg, out_dir, metrics_log,
                                     seed=seed, fold_id=fold_id, fingerprint=fingerprint,
                                     test_batches=test_batches_per_epoch, sampler_rng=sampler_rng)
    if state.best_path is None:
        raise RuntimeError("meta-training finished without saving a best checkpoint")
    return Path(state.best_path)


def run_plain_training(cfg: MetaConfig, data: TrainingData, learner, init_params: ParameterSet,
                       out_dir, *, seed: int, fingerprint: str, fold_id: Optional[int] = None,
                       test_batches_per_epoch: Optional[int] = None,
                       resume: bool = False) -> Path:
    """Plain supervised baseline under the meta-training budget.

    Each step consumes one batch of K*(S+Q) training-fold frames and takes a
    single Adam step on the overall AU loss, matching the images-per-step and
    steps-per-epoch of `run_meta_training`. Evaluation and model selection
    use the identical meta-test protocol, so checkpoints from both trainers
    are directly comparable (and interchangeable downstream).
    """
    if cfg.beta <= 0:
        raise ConfigError("plain training needs a positive step size beta")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    batch_size = cfg.k_tasks * (cfg.support_size + cfg.query_size)
    records = data.index.records_for_role("train")
    if not records:
        raise ConfigError("no training-fold frames available")
    sampler_rng = stream(seed, "plain/sampling")
    state = MetaState(params=init_params.copy(), optimizer=Adam(lr=cfg.beta))
    resumed = resume and _resume_state(out_dir, state, fingerprint, sampler_rng)
    mode = "a" if resumed else "w"
    with open(out_dir / "plain_train_log.txt", mode) as train_log, \
         open(out_dir / "metrics_log.txt", mode) as metrics_log:
        for epoch in range(state.epoch, cfg.epochs):
            for step in range(cfg.batches_per_epoch):
                picks = sampler_rng.choice(len(records), size=batch_size,
                                           replace=len(records) < batch_size)
                batch = data.loader.batch([records[int(i)] for i in picks])
                loss, grad = learner.outer_loss_and_grad(state.params, batch)
                if not np.isfinite(loss) or not grad.all_finite():
                    logger.warning("epoch %d step %d: non-finite loss; step skipped", epoch, step)
                    continue
                state.optimizer.step(state.params, grad, lr=cfg.beta)
                train_log.write(f"{epoch} {step} {loss:.6f}\n")
            train_log.flush()
            _evaluate_and_checkpoint(state, learner, data, cfg, out_dir, metrics_log,
                                     seed=seed, fold_id=fold_id, fingerprint=fingerprint,
                                     test_batches=test_batches_per_epoch, sampler_rng=sampler_rng)
    if state.best_path is None:
        raise RuntimeError("plain training finished without saving a best checkpoint")
    return Path(state.best_path)
