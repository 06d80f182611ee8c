"""Command-line entry points wiring the cascade together.

Subcommands:
  synth-gen       render a synthetic identity-confounded corpus
  marl-train      stage 1: meta-train (or plain-train) the region network
  relation-train  stage 2: import the best stage-1 checkpoint, train relations
  evaluate        score a checkpoint on the test fold, write a report
  crossval        full cascade per fold plus an aggregated report

Exit codes: 0 success, 1 user error (bad flags/paths/config), 2 internal error.
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path
from typing import Optional

import numpy as np

from . import maml
from .checkpoint import load_checkpoint
from .config import RunConfig, build_config, read_config_file
from .dataset import FrameLoader, load_manifest, occurrence_rates, select_test_fold, split_folds
from .errors import UserError
from .losses import MetricsReport, compute_weights
from .region_network import RegionLearner, RegionNetwork
from .relation import RelationModel, evaluate_relation, import_marl, run_relation_training
from .rng import stream
from .synth import CorpusSpec, generate_corpus

logger = logging.getLogger(__name__)


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UserError(f"{self.prog}: {message}")


def _add_common(p: _Parser) -> None:
    p.add_argument("--config", help="config file (key = value lines)")
    p.add_argument("--out", help="output directory")
    p.add_argument("--seed", type=int, help="root seed for all random streams")


def _add_data(p: _Parser) -> None:
    p.add_argument("--manifest", help="frame manifest path")
    p.add_argument("--au-table", dest="au_table", help="AU center rule file")
    p.add_argument("--folds", dest="n_folds", type=int, help="number of subject folds")
    p.add_argument("--fold-id", dest="fold_id", type=int, help="test fold id")
    p.add_argument("--aus", dest="n_au", type=int, help="number of AUs (C)")


def build_parser() -> _Parser:
    parser = _Parser(prog="aumeta", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth-gen", help="generate a synthetic corpus")
    p.add_argument("--config", help="corpus config file (key = value lines)")
    p.add_argument("--out", required=True)
    p.add_argument("--subjects", type=int)
    p.add_argument("--frames", type=int, help="frames per subject")
    p.add_argument("--aus", type=int)
    p.add_argument("--identity-strength", type=float)
    p.add_argument("--base-rate", type=float)
    p.add_argument("--correlation", help="co-activation rules, e.g. 0>1:1.0,2>3:0.5")
    p.add_argument("--jitter", type=int, help="per-subject translation jitter (px)")
    p.add_argument("--seed", type=int)

    p = sub.add_parser("marl-train", help="stage-1 training of the region network")
    _add_common(p)
    _add_data(p)
    p.add_argument("--mode", choices=("meta", "plain"), help="meta-learning or plain supervised")
    p.add_argument("--resume", action="store_true", default=None)

    p = sub.add_parser("relation-train", help="stage-2 relation training")
    _add_common(p)
    _add_data(p)
    p.add_argument("--marl-ckpt", dest="marl_ckpt", help="stage-1 checkpoint to import")
    p.add_argument("--freeze-backbone", dest="freeze_backbone", action="store_true", default=None)
    p.add_argument("--no-encoder", dest="use_encoder", action="store_false", default=None)
    p.add_argument("--resume", action="store_true", default=None)
    p.add_argument("--force", action="store_true", default=None,
                   help="load checkpoints despite a config fingerprint mismatch")

    p = sub.add_parser("evaluate", help="evaluate a checkpoint on the test fold")
    _add_common(p)
    _add_data(p)
    p.add_argument("--ckpt", help="checkpoint to evaluate (marl or relation)")
    p.add_argument("--force", action="store_true", default=None)

    p = sub.add_parser("crossval", help="full cascade over all folds")
    _add_common(p)
    _add_data(p)
    p.add_argument("--freeze-backbone", dest="freeze_backbone", action="store_true", default=None)

    return parser


# ---------------------------------------------------------------------------
# shared plumbing
# ---------------------------------------------------------------------------

_CONFIG_KEYS = (
    "manifest", "au_table", "out", "seed", "n_folds", "fold_id", "n_au", "mode",
    "marl_ckpt", "ckpt", "resume", "force", "freeze_backbone", "use_encoder",
)


def _config_from_args(args) -> RunConfig:
    overrides = {k: getattr(args, k) for k in _CONFIG_KEYS if hasattr(args, k)}
    return build_config(args.config, overrides)


def _prepare_data(cfg: RunConfig) -> maml.TrainingData:
    if not cfg.manifest:
        raise UserError("--manifest is required")
    index = load_manifest(cfg.manifest, cfg.n_au)
    index = split_folds(index, cfg.n_folds, cfg.seed)
    index = select_test_fold(index, cfg.fold_id)
    table = cfg.load_table()
    loader = FrameLoader(table, cfg.input_size, cfg.grid_size)
    rates = occurrence_rates(index.records_for_role("train"), cfg.n_au)
    weights = compute_weights(rates)
    return maml.TrainingData(index=index, loader=loader, weights=weights,
                             au_names=table.au_names)


def _write_report(out_dir: Path, report: MetricsReport, name: str = "report.txt") -> Path:
    path = Path(out_dir) / name
    path.write_text(report.format_table(), encoding="utf-8")
    return path


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------

def cmd_synth_gen(args) -> int:
    raw = dict(read_config_file(args.config)) if args.config else {}
    def pick(key, flag, cast):
        v = getattr(args, flag, None)
        if v is not None:
            return v
        if key in raw:
            return cast(raw[key])
        return None
    corr = pick("au_correlation", "correlation", str)
    fields = {
        "n_subjects": pick("n_subjects", "subjects", int),
        "frames_per_subject": pick("frames_per_subject", "frames", int),
        "n_au": pick("n_au", "aus", int),
        "identity_strength": pick("identity_strength", "identity_strength", float),
        "base_rate": pick("base_rate", "base_rate", float),
        "jitter_px": pick("jitter_px", "jitter", int),
        "seed": pick("seed", "seed", int),
    }
    fields = {k: v for k, v in fields.items() if v is not None}
    fields.setdefault("n_subjects", 12)
    fields.setdefault("frames_per_subject", 40)
    fields.setdefault("n_au", 6)
    if corr:
        fields["au_correlation"] = parse_correlation(corr)
    spec = CorpusSpec(**fields)
    manifest = generate_corpus(spec, args.out)
    print(f"wrote {manifest}")
    return 0


def parse_correlation(text: str):
    rules = []
    for part in text.split(","):
        part = part.strip()
        if not part:
            continue
        try:
            pair, prob = part.split(":")
            a, b = pair.split(">")
            rules.append((int(a), int(b), float(prob)))
        except ValueError as exc:
            raise UserError(f"bad correlation rule {part!r} (expected a>b:p)") from exc
    return tuple(rules)


def cmd_marl_train(args) -> int:
    cfg = _config_from_args(args)
    out_dir = Path(cfg.out)
    cfg.write_resolved(out_dir)
    data = _prepare_data(cfg)
    net = RegionNetwork(cfg.backbone_config())
    learner = RegionLearner(net, data.weights, cfg.mu, cfg.smooth_eps)
    init = net.init_params(cfg.seed)
    runner = maml.run_meta_training if cfg.mode == "meta" else maml.run_plain_training
    best = runner(cfg.meta_config(), data, learner, init, out_dir, seed=cfg.seed,
                  fingerprint=cfg.fingerprint(), fold_id=cfg.fold_id, resume=cfg.resume)
    print(f"best checkpoint: {best}")
    return 0


def cmd_relation_train(args) -> int:
    cfg = _config_from_args(args)
    if not cfg.marl_ckpt:
        raise UserError("relation-train requires --marl-ckpt (stage-1 checkpoint)")
    out_dir = Path(cfg.out)
    cfg.write_resolved(out_dir)
    data = _prepare_data(cfg)
    net = RegionNetwork(cfg.backbone_config())
    model = RelationModel(net, cfg.encoder_config())
    best = run_relation_training(
        cfg.relation_config(), data, model, cfg.marl_ckpt, out_dir, seed=cfg.seed,
        fold_id=cfg.fold_id, freeze_backbone=cfg.freeze_backbone,
        use_encoder=cfg.use_encoder, resume=cfg.resume, force=cfg.force,
    )
    print(f"best checkpoint: {best}")
    return 0


def cmd_evaluate(args) -> int:
    cfg = _config_from_args(args)
    if not cfg.ckpt:
        raise UserError("evaluate requires --ckpt")
    out_dir = Path(cfg.out)
    cfg.write_resolved(out_dir)
    data = _prepare_data(cfg)
    _, manifest, _ = load_checkpoint(cfg.ckpt)
    kind = manifest.get("kind")
    net = RegionNetwork(cfg.backbone_config())
    if kind == "marl":
        params, _, _ = load_checkpoint(cfg.ckpt, expect_fingerprint=cfg.fingerprint(),
                                       expect_kind="marl", force=cfg.force)
        learner = RegionLearner(net, data.weights, cfg.mu, cfg.smooth_eps)
        rng = stream(cfg.seed, "evaluate/meta")
        report = maml.meta_test(learner, params, data, cfg.meta_config(), rng,
                                fold_id=cfg.fold_id, seed=cfg.seed)
    elif kind == "relation":
        model = RelationModel(net, cfg.encoder_config())
        params, man, _ = load_checkpoint(cfg.ckpt, expect_fingerprint=model.fingerprint(),
                                         expect_kind="relation", force=cfg.force)
        use_encoder = man["extra"].get("use_encoder", True)
        report = evaluate_relation(model, params, data, cfg.relation_test_batch,
                                   use_encoder=use_encoder, fold_id=cfg.fold_id, seed=cfg.seed)
    else:
        raise UserError(f"{cfg.ckpt}: unknown checkpoint kind {kind!r}")
    path = _write_report(out_dir, report)
    sys.stdout.write(report.format_table())
    print(f"report: {path}")
    return 0


def cmd_crossval(args) -> int:
    cfg = _config_from_args(args)
    out_dir = Path(cfg.out)
    cfg.write_resolved(out_dir)
    per_fold = []
    for fold in range(cfg.n_folds):
        fold_cfg = build_config(None, {})
        fold_cfg.__dict__.update(cfg.__dict__)
        fold_cfg.fold_id = fold
        data = _prepare_data(fold_cfg)
        net = RegionNetwork(fold_cfg.backbone_config())
        learner = RegionLearner(net, data.weights, fold_cfg.mu, fold_cfg.smooth_eps)
        init = net.init_params(fold_cfg.seed)
        marl_dir = out_dir / f"fold{fold}" / "marl"
        runner = maml.run_meta_training if fold_cfg.mode == "meta" else maml.run_plain_training
        marl_best = runner(fold_cfg.meta_config(), data, learner, init, marl_dir,
                           seed=fold_cfg.seed, fingerprint=fold_cfg.fingerprint(),
                           fold_id=fold, resume=fold_cfg.resume)
        model = RelationModel(net, fold_cfg.encoder_config())
        rel_dir = out_dir / f"fold{fold}" / "relation"
        rel_best = run_relation_training(
            fold_cfg.relation_config(), data, model, marl_best, rel_dir, seed=fold_cfg.seed,
            fold_id=fold, freeze_backbone=fold_cfg.freeze_backbone,
            use_encoder=fold_cfg.use_encoder, resume=fold_cfg.resume)
        params, man, _ = load_checkpoint(rel_best, expect_kind="relation")
        report = evaluate_relation(model, params, data, fold_cfg.relation_test_batch,
                                   use_encoder=man["extra"].get("use_encoder", True),
                                   fold_id=fold, seed=fold_cfg.seed)
        _write_report(out_dir / f"fold{fold}", report)
        per_fold.append(report)
        logger.info("fold %d: avg F1 %.4f", fold, report.avg_f1)

    per_au = np.mean([r.per_au_f1 for r in per_fold], axis=0)
    aggregate = MetricsReport(
        au_names=per_fold[0].au_names, per_au_f1=per_au, avg_f1=float(per_au.mean()),
        degenerate=np.zeros(per_au.size, dtype=bool), fold_id=None, seed=cfg.seed,
    )
    path = _write_report(out_dir, aggregate, "aggregate_report.txt")
    sys.stdout.write(aggregate.format_table())
    print(f"aggregate report: {path}")
    return 0


_COMMANDS = {
    "synth-gen": cmd_synth_gen,
    "marl-train": cmd_marl_train,
    "relation-train": cmd_relation_train,
    "evaluate": cmd_evaluate,
    "crossval": cmd_crossval,
}


def main(argv=None) -> int:
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(name)s: %(message)s")
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        return _COMMANDS[args.command](args)
    except UserError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:  # internal error contract: exit 2
        logger.exception("internal error: %s", exc)
        return 2


if __name__ == "__main__":
    sys.exit(main())
