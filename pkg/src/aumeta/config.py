"""Run configuration: documented defaults, config-file parsing, CLI layering.

Resolution order is defaults <- config file <- command-line flags. Every
command writes the fully resolved configuration to `<out>/resolved_config.txt`
in the same `key = value` format it can read back, so a run is reproducible
from its own snapshot.

Defaults follow the published training protocol wherever it specifies one
(inner/outer step sizes 0.01/0.006, task batch K=5 with S=5/Q=15, 100 meta
epochs of 100 task batches, 600 meta-test batches, stage-2: 30 epochs, batch
16/32, lr 0.006 decayed x0.3 every 2 epochs, mu=1.5, eps=1, 3 folds).
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Tuple

from .checkpoint import config_fingerprint
from .errors import ConfigError
from .geometry import AUCenterTable, builtin_bp4d_table, load_au_table
from .maml import MetaConfig
from .region_network import BackboneConfig
from .relation import EncoderConfig, RelationTrainConfig


@dataclass
class RunConfig:
    # data / orchestration
    manifest: str = ""
    au_table: str = ""  # empty: au_centers.txt beside the manifest, else builtin table
    out: str = "run_out"
    seed: int = 0
    n_folds: int = 3
    fold_id: int = 0
    n_au: int = 12
    # region network
    input_size: int = 224
    grid_size: int = 14
    crop_size: int = 6
    widths: Tuple[int, ...] = (16, 32, 48, 64)
    convs_per_group: int = 1
    branch_channels: int = 64
    embed_dim: int = 150
    head_hidden: int = 64
    # meta-learning
    alpha: float = 0.01
    beta: float = 0.006
    k_tasks: int = 5
    support_size: int = 5
    query_size: int = 15
    inner_steps: int = 1
    order: str = "second"
    meta_epochs: int = 100
    batches_per_epoch: int = 100
    test_batches: int = 600
    test_adapt_steps: int = 5
    mode: str = "meta"  # marl-train: meta | plain
    # relation stage
    relation_epochs: int = 30
    relation_batch: int = 16
    relation_test_batch: int = 32
    relation_lr: float = 0.006
    lr_decay: float = 0.3
    lr_decay_every: int = 2
    enc_layers: int = 2
    enc_heads: int = 4
    ff_width: int = 0  # 0: use 4 * embed_dim
    dropout: float = 0.1
    cls_hidden: int = 64
    freeze_backbone: bool = False
    use_encoder: bool = True
    # loss
    mu: float = 1.5
    smooth_eps: float = 1.0
    # checkpoints
    marl_ckpt: str = ""
    ckpt: str = ""
    resume: bool = False
    force: bool = False

    # -- derived configs ----------------------------------------------------

    def backbone_config(self) -> BackboneConfig:
        return BackboneConfig(
            n_au=self.n_au, input_size=self.input_size, grid_size=self.grid_size,
            crop_size=self.crop_size, widths=tuple(self.widths),
            convs_per_group=self.convs_per_group, branch_channels=self.branch_channels,
            embed_dim=self.embed_dim, head_hidden=self.head_hidden,
        )

    def encoder_config(self) -> EncoderConfig:
        return EncoderConfig(
            n_tokens=self.n_au, width=self.embed_dim, n_heads=self.enc_heads,
            n_layers=self.enc_layers, ff_width=self.ff_width or None,
            dropout=self.dropout, cls_hidden=self.cls_hidden,
        )

    def meta_config(self) -> MetaConfig:
        return MetaConfig(
            alpha=self.alpha, beta=self.beta, k_tasks=self.k_tasks,
            support_size=self.support_size, query_size=self.query_size,
            inner_steps=self.inner_steps, order=self.order, epochs=self.meta_epochs,
            batches_per_epoch=self.batches_per_epoch, test_batches=self.test_batches,
            test_adapt_steps=self.test_adapt_steps,
        )

    def relation_config(self) -> RelationTrainConfig:
        return RelationTrainConfig(
            epochs=self.relation_epochs, batch_size=self.relation_batch,
            test_batch_size=self.relation_test_batch, lr=self.relation_lr,
            lr_decay=self.lr_decay, lr_decay_every=self.lr_decay_every,
            mu=self.mu, smooth_eps=self.smooth_eps,
        )

    def load_table(self) -> AUCenterTable:
        if self.au_table:
            table = load_au_table(self.au_table)
        else:
            sibling = Path(self.manifest).parent / "au_centers.txt" if self.manifest else None
            if sibling is not None and sibling.is_file():
                table = load_au_table(sibling)
            else:
                table = builtin_bp4d_table()
        if table.n_au != self.n_au:
            raise ConfigError(
                f"AU table has {table.n_au} entries but config expects n_au={self.n_au}"
            )
        return table

    def fingerprint(self) -> str:
        return config_fingerprint(self.backbone_config().fingerprint_fields())

    # -- serialization ------------------------------------------------------

    def to_text(self) -> str:
        lines = []
        for f in dataclasses.fields(self):
            lines.append(f"{f.name} = {_format_value(getattr(self, f.name))}")
        return "\n".join(lines) + "\n"

    def write_resolved(self, out_dir) -> Path:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        path = out_dir / "resolved_config.txt"
        path.write_text(self.to_text(), encoding="utf-8")
        return path


def _format_value(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, tuple):
        return ",".join(str(x) for x in v)
    return str(v)


def _parse_value(field: dataclasses.Field, raw: str):
    raw = raw.strip()
    default = field.default
    if isinstance(default, bool):
        low = raw.lower()
        if low in ("true", "1", "yes"):
            return True
        if low in ("false", "0", "no"):
            return False
        raise ConfigError(f"{field.name}: expected a boolean, got {raw!r}")
    if isinstance(default, int):
        try:
            return int(raw)
        except ValueError as exc:
            raise ConfigError(f"{field.name}: expected an integer, got {raw!r}") from exc
    if isinstance(default, float):
        try:
            return float(raw)
        except ValueError as exc:
            raise ConfigError(f"{field.name}: expected a number, got {raw!r}") from exc
    if isinstance(default, tuple):
        try:
            return tuple(int(x) for x in raw.split(",") if x.strip())
        except ValueError as exc:
            raise ConfigError(f"{field.name}: expected comma-separated integers") from exc
    return raw


def read_config_file(path) -> dict:
    """Parse `key = value` lines (# comments allowed) into raw strings."""
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file not found: {path}")
    raw = {}
    for line_no, line in enumerate(path.read_text(encoding="utf-8").splitlines(), start=1):
        body = line.split("#", 1)[0].strip()
        if not body:
            continue
        if "=" not in body:
            raise ConfigError(f"{path}:{line_no}: expected 'key = value'")
        key, value = body.split("=", 1)
        raw[key.strip()] = value.strip()
    return raw


def build_config(file_path: Optional[str] = None, overrides: Optional[dict] = None) -> RunConfig:
    """Layer defaults <- config file <- overrides into a RunConfig."""
    fields = {f.name: f for f in dataclasses.fields(RunConfig)}
    values = {}
    if file_path:
        for key, raw in read_config_file(file_path).items():
            if key not in fields:
                raise ConfigError(f"unknown config key {key!r}")
            values[key] = _parse_value(fields[key], raw)
    for key, val in (overrides or {}).items():
        if val is None:
            continue
        if key not in fields:
            raise ConfigError(f"unknown config key {key!r}")
        if isinstance(val, str):
            val = _parse_value(fields[key], val)
        elif isinstance(val, (list, tuple)):
            val = tuple(int(x) for x in val)
        values[key] = val
    return RunConfig(**values)
