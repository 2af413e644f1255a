"""Two-stage training: a headless base network with the max-of-hinges loss,
then projection heads trained with a contrastive loss on top of it.

A run writes into its own directory::

    config.txt        resolved configuration, ``key = value``
    loss_curve.tsv    epoch<TAB>mean_loss<TAB>val_rsum per epoch
    val_reports.txt   validation table, epoch 0 = untrained
    checkpoint.cvse   parameters from the epoch with the best validation rsum
    report.txt        test-split table of the selected checkpoint
    report.kv         the same, machine readable
"""

from __future__ import annotations

import dataclasses
import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .checkpoint import encode_checkpoint, read_checkpoint
from .data import PairedDataset, make_batches
from .errors import ConfigError, NumericError
from .evaluation import RetrievalReport, evaluate, format_kv, format_table
from .losses import LossConfig, LossKind, batch_loss
from .model import (BASE_DIM, HIDDEN_DIM, JOINT_DIM, EmbeddingNetwork, NetworkConfig, identity_head,
                    init_from_base, init_network)
from .numerics import derive_rng
from .optim import BASE_SCHEDULE, CONTRASTIVE_SCHEDULE, AdamState, LrSchedule, adam_step, lr_at, sgd_step

log = logging.getLogger(__name__)

STAGE_BASE = "base"
STAGE_CONTRASTIVE = "contrastive"

# substream labels for derive_rng
_INIT, _SHUFFLE = 0, 1


@dataclass(frozen=True)
class TrainConfig:
    loss: str = "CMN"
    alpha: float = 0.2
    tau: float = 0.1
    dim: int = JOINT_DIM
    hidden_dim: int = HIDDEN_DIM
    base_dim: int = BASE_DIM
    batch: int | None = None          # None -> 128 for the base stage, 256 for the contrastive stage
    epochs: int = 30
    schedule: str | None = None       # None -> the stage's default schedule
    seed: int = 0
    freeze_base: bool = False
    mask_same_image: bool = False
    optimizer: str = "adam"           # "sgd" is a diagnostic mode
    head_init: str = "glorot"         # "identity" needs hidden_dim == 2*base_dim and dim == base_dim
    eval_split: str = "test"

    def __post_init__(self):
        LossKind.parse(self.loss)
        if self.epochs < 1:
            raise ConfigError("epochs must be >= 1")
        if self.batch is not None and self.batch < 2:
            raise ConfigError("batch must be >= 2")
        if self.optimizer not in ("adam", "sgd"):
            raise ConfigError(f"unknown optimizer {self.optimizer!r}")
        if self.head_init not in ("glorot", "identity"):
            raise ConfigError(f"unknown head init {self.head_init!r}")
        for name in ("dim", "hidden_dim", "base_dim"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1")
        if self.schedule is not None:
            LrSchedule.parse(self.schedule)
        self.loss_config()

    def loss_config(self) -> LossConfig:
        return LossConfig(LossKind.parse(self.loss), self.alpha, self.tau, self.mask_same_image)

    def batch_for(self, stage: str) -> int:
        if self.batch is not None:
            return self.batch
        return 128 if stage == STAGE_BASE else 256

    def schedule_for(self, stage: str) -> LrSchedule:
        if self.schedule is not None:
            return LrSchedule.parse(self.schedule)
        return BASE_SCHEDULE if stage == STAGE_BASE else CONTRASTIVE_SCHEDULE

    def resolved(self, stage: str) -> dict:
        out = dataclasses.asdict(self)
        out["loss"] = "MH" if stage == STAGE_BASE else LossKind.parse(self.loss).value
        out["batch"] = self.batch_for(stage)
        out["schedule"] = self.schedule_for(stage).format()
        out["stage"] = stage
        return out


def base_stage_config(cfg: TrainConfig) -> TrainConfig:
    """The base stage always trains with the max-of-hinges loss."""
    return dataclasses.replace(cfg, loss="MH")


@dataclass
class RunResult:
    net: EmbeddingNetwork
    best_epoch: int
    losses: list[float]
    val_reports: list[RetrievalReport]  # index 0 is the untrained network
    report: RetrievalReport
    checkpoint: Path | None = None


def _meta(cfg: TrainConfig, stage: str, epoch: int) -> dict:
    return {"stage": stage, "epoch": epoch, "seed": cfg.seed, "loss": LossKind.parse(cfg.loss).value,
            "alpha": cfg.alpha, "tau": cfg.tau}


def fit(net: EmbeddingNetwork, ds: PairedDataset, cfg: TrainConfig, stage: str,
        stream: int = 0, trainable: set[str] | None = None) -> tuple[EmbeddingNetwork, int, list, list]:
    """Train ``net`` in place; return the best-by-validation copy and the traces."""
    loss_cfg = cfg.loss_config()
    schedule = cfg.schedule_for(stage)
    batch_size = cfg.batch_for(stage)
    rng = derive_rng(cfg.seed, stream, _SHUFFLE)
    params = net.params()
    trainable = set(params) if trainable is None else trainable
    state = AdamState.fresh({k: params[k] for k in trainable})

    val_reports = [evaluate(net, ds, "val")]
    best_rsum, best_epoch, best_params = -np.inf, 0, None
    losses = []
    for epoch in range(cfg.epochs):
        lr = lr_at(schedule, epoch)
        total, count = 0.0, 0
        for batch in make_batches(ds, "train", batch_size, rng):
            value, grads = batch_loss(net, batch.image_feats, batch.text_feats, loss_cfg, batch.groups)
            if not np.isfinite(value):
                raise NumericError(f"non-finite loss at epoch {epoch + 1}")
            grads = {k: g for k, g in grads.items() if k in trainable}
            if cfg.optimizer == "adam":
                adam_step(params, grads, state, lr, inplace=True)
            else:
                sgd_step(params, grads, lr)
            net.touch()
            total += value
            count += 1
        if count == 0:
            raise ConfigError(f"training split has fewer pairs than one batch of {batch_size}")
        losses.append(total / count)
        report = evaluate(net, ds, "val")
        val_reports.append(report)
        log.info("%s epoch %d loss %.6f val rsum %.2f", stage, epoch + 1, losses[-1], report.rsum)
        if report.rsum > best_rsum:
            best_rsum, best_epoch = report.rsum, epoch + 1
            best_params = {k: p.copy() for k, p in params.items()}
    best = net.copy()
    best.set_params(best_params)
    return best, best_epoch, losses, val_reports


def train_base(ds: PairedDataset, cfg: TrainConfig) -> RunResult:
    cfg = base_stage_config(cfg)
    net_cfg = NetworkConfig(ds.images.dim, ds.captions.dim, cfg.base_dim)
    net = init_network(net_cfg, derive_rng(cfg.seed, 0, _INIT))
    best, epoch, losses, vals = fit(net, ds, cfg, STAGE_BASE, stream=0)
    return RunResult(best, epoch, losses, vals, evaluate(best, ds, cfg.eval_split))


def attach_heads(base: EmbeddingNetwork, cfg: TrainConfig) -> EmbeddingNetwork:
    if base.has_heads:
        raise ConfigError("contrastive training needs a headless base checkpoint")
    if cfg.head_init == "identity":
        width = base.image_base.out_dim
        if cfg.hidden_dim != 2 * width or cfg.dim != width:
            raise ConfigError(f"identity heads need hidden_dim={2 * width} and dim={width}")
        return EmbeddingNetwork(base.image_base, base.text_base, identity_head(width), identity_head(width)).copy()
    return init_from_base(base, derive_rng(cfg.seed, 1, _INIT), cfg.hidden_dim, cfg.dim)


def train_contrastive(ds: PairedDataset, base: EmbeddingNetwork, cfg: TrainConfig) -> RunResult:
    if base.image_base.in_dim != ds.images.dim or base.text_base.in_dim != ds.captions.dim:
        raise ConfigError(f"checkpoint expects feature dims ({base.image_base.in_dim}, {base.text_base.in_dim}), "
                          f"dataset has ({ds.images.dim}, {ds.captions.dim})")
    net = attach_heads(base, cfg)
    trainable = None
    if cfg.freeze_base:
        trainable = {k for k in net.params() if not k.split(".")[0].endswith("_base")}
    best, epoch, losses, vals = fit(net, ds, cfg, STAGE_CONTRASTIVE, stream=1, trainable=trainable)
    return RunResult(best, epoch, losses, vals, evaluate(best, ds, cfg.eval_split))


# -- run directories ---------------------------------------------------------

def format_config(values: dict) -> str:
    return "".join(f"{k} = {v}\n" for k, v in values.items())


def write_run(out_dir, result: RunResult, cfg: TrainConfig, stage: str, extra: dict | None = None) -> Path:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    resolved = cfg.resolved(stage)
    resolved.update(extra or {})
    (out / "config.txt").write_text(format_config(resolved), encoding="utf-8")
    curve = "".join(f"{e + 1}\t{loss!r}\t{rep.rsum!r}\n"
                    for e, (loss, rep) in enumerate(zip(result.losses, result.val_reports[1:])))
    (out / "loss_curve.tsv").write_text(curve, encoding="utf-8")
    (out / "val_reports.txt").write_text(
        format_table([(str(e), r) for e, r in enumerate(result.val_reports)], label="epoch"), encoding="utf-8")
    ckpt = out / "checkpoint.cvse"
    ckpt.write_bytes(encode_checkpoint(result.net, _meta(cfg, stage, result.best_epoch)))
    (out / "report.txt").write_text(format_table([(cfg.eval_split, result.report)], label="split"),
                                    encoding="utf-8")
    (out / "report.kv").write_text(format_kv(result.report), encoding="utf-8")
    result.checkpoint = ckpt
    return ckpt


def load_base_checkpoint(path) -> EmbeddingNetwork:
    net, _ = read_checkpoint(path)
    if net.has_heads:
        raise ConfigError(f"{path} already has projection heads; expected a base checkpoint")
    return net
