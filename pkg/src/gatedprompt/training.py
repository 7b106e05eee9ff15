"""Deterministic SGD training for the three prompt-tuning modes.

Every source of randomness (batch order, hard-gate sampling) is derived
from the run seed, so identical (config, seed, data) reproduce bit-identical
checkpoints and metrics. The backbone is frozen by construction: parameters
outside the trainable mask never receive gradients and are carried through
as the same objects.
"""

from __future__ import annotations

import io
import time
from dataclasses import dataclass, field, replace

import numpy as np

from . import tensor as T
from .checkpoint import Checkpoint, backbone_hash
from .data import LabeledDataset
from .errors import ConfigError, DomainError, NumericError, StateError, TrainingAbort
from .prompts import (
    build_trainable_mask,
    gate_bank_from_params,
    gated_forward,
    init_tuning_params,
    temperature_bank_from_params,
    vpt_deep_forward,
    vpt_shallow_forward,
)
from .tensor import Tensor, backward, cross_entropy
from .vit import ViTConfig, init_params, param_shapes

LR_GRID = (0.05, 0.1, 0.25, 0.5, 1.0, 2.5, 5.0)


@dataclass(frozen=True)
class TrainConfig:
    mode: str = "gated"
    lr: float = 0.1
    momentum: float = 0.9
    batch_size: int = 50
    epochs: int = 100
    seed: int = 0
    n_prompts: int = 8
    gate_init: float = 5.0
    gate_variant: str = "soft"
    gumbel_temp: float = 1.0
    with_temps: bool = True
    eval_cadence: int = 10
    fixed_gate_value: float | None = None

    def __post_init__(self):
        if self.mode not in ("shallow", "deep", "gated"):
            raise ConfigError(f"unknown tuning mode '{self.mode}'")
        if self.gate_variant not in ("soft", "hard"):
            raise ConfigError(f"unknown gate variant '{self.gate_variant}'")
        if self.batch_size < 1 or self.epochs < 0:
            raise ConfigError("batch_size must be positive and epochs non-negative")
        if self.lr <= 0 or not 0.0 <= self.momentum < 1.0:
            raise ConfigError("lr must be positive and momentum in [0, 1)")
        if self.n_prompts < 1:
            raise ConfigError(f"n_prompts must be >= 1, got {self.n_prompts}")
        if self.eval_cadence < 1:
            raise ConfigError("eval_cadence must be >= 1")


@dataclass
class RunMetrics:
    """Per-epoch training losses plus accuracy snapshots at the eval cadence."""

    train_losses: list[float] = field(default_factory=list)
    records: list[tuple[int, str, float, float]] = field(default_factory=list)
    first_batch_loss: float | None = None
    final_gates: list[float] = field(default_factory=list)
    final_temps: list[float] = field(default_factory=list)
    wall_time: float = 0.0

    def to_csv(self, fingerprint: str = "") -> str:
        buf = io.StringIO()
        if fingerprint:
            buf.write(f"# config_fingerprint={fingerprint}\n")
        buf.write("epoch,split,loss,accuracy\n")
        for epoch, split_name, loss, acc in self.records:
            buf.write(f"{epoch},{split_name},{loss!r},{acc!r}\n")
        return buf.getvalue()


def sgd_step(params: dict[str, Tensor], mask: set[str], lr: float, momentum: float,
             velocity: dict[str, np.ndarray]) -> dict[str, Tensor]:
    """One SGD-with-momentum update, applied only to masked parameters.

    v <- momentum * v + g; p <- p - lr * v. Unmasked parameters are returned
    as the same objects, untouched.
    """
    new_params = dict(params)
    for name in sorted(mask):
        t = params[name]
        if t.grad is None:
            raise StateError(f"sgd_step: masked parameter '{name}' has no gradient")
        v = momentum * velocity[name] + t.grad if name in velocity else t.grad.copy()
        velocity[name] = v
        new_params[name] = Tensor(t.data - lr * v, requires_grad=True)
    return new_params


def forward_logits(params, config, cfg: TrainConfig, images: Tensor,
                   training: bool = False, rng=None) -> Tensor:
    """Mode dispatch for one forward pass."""
    temps = temperature_bank_from_params(params, config) if cfg.with_temps else None
    if cfg.mode == "gated":
        if cfg.fixed_gate_value is not None:
            bank = gate_bank_from_params(
                params, config, variant="fixed",
                fixed_values=[cfg.fixed_gate_value] * (config.num_blocks - 1))
        else:
            bank = gate_bank_from_params(params, config, variant=cfg.gate_variant,
                                         gumbel_temp=cfg.gumbel_temp)
        logits, _ = gated_forward(images, params, config, bank, temps,
                                  training=training, rng=rng)
        return logits
    if cfg.mode == "shallow":
        return vpt_shallow_forward(images, params, config, temps)
    return vpt_deep_forward(images, params, config, temps)


def init_backbone_checkpoint(config: ViTConfig, seed: int) -> Checkpoint:
    """A fresh, fully frozen backbone (encoder plus head init, no tuning
    parameters); the shared starting point for ablation cells."""
    return Checkpoint(config=config, params=init_params(config, seed),
                      trainable=set(), seed=seed)


def build_initial_checkpoint(config: ViTConfig, cfg: TrainConfig,
                             backbone: Checkpoint | None = None) -> Checkpoint:
    """Assemble the full parameter map (frozen backbone + fresh tuning
    parameters) and its trainable mask."""
    if backbone is not None:
        if backbone.config != config:
            raise ConfigError("backbone checkpoint config does not match the run config")
        # Only true backbone names are taken; stale tuning parameters from a
        # previously tuned checkpoint must not leak into a new run. Fresh
        # wrappers keep autodiff state private per run while sharing the
        # read-only arrays, so concurrent ablation cells cannot interfere.
        try:
            params = {name: Tensor(backbone.params[name].data, _check=False)
                      for name in param_shapes(config)}
        except KeyError as exc:
            raise ConfigError(f"backbone checkpoint is missing parameter {exc}") from exc
        seed = backbone.seed
    else:
        params = init_params(config, cfg.seed)
        seed = cfg.seed
    params.update(init_tuning_params(config, cfg.mode, cfg.n_prompts, cfg.seed + 1,
                                     gate_init=cfg.gate_init, with_temps=cfg.with_temps))
    mask = build_trainable_mask(config, cfg.mode, cfg.with_temps)
    if cfg.fixed_gate_value is not None:
        # Fixed gates never enter the forward graph, so they cannot train.
        mask -= {n for n in mask if n.startswith("gates.gamma.")}
    for name, t in params.items():
        t.requires_grad = name in mask
        t.grad = None
    extras = {"mode": cfg.mode, "n_prompts": cfg.n_prompts, "with_temps": cfg.with_temps,
              "gate_variant": cfg.gate_variant, "gumbel_temp": cfg.gumbel_temp,
              "fixed_gate_value": cfg.fixed_gate_value}
    return Checkpoint(config=config, params=params, trainable=mask, seed=seed, extras=extras)


def train(config: ViTConfig, cfg: TrainConfig, dataset: LabeledDataset,
          val_dataset: LabeledDataset | None = None,
          backbone: Checkpoint | None = None) -> tuple[Checkpoint, RunMetrics]:
    """Run the full training loop; deterministic given (config, cfg, data)."""
    if dataset is None or len(dataset) < 1:
        raise ConfigError("training dataset is empty")
    start = time.perf_counter()
    ckpt = build_initial_checkpoint(config, cfg, backbone)
    params, mask = ckpt.params, ckpt.trainable

    seq = np.random.SeedSequence(cfg.seed)
    batch_rng, gumbel_rng = [np.random.default_rng(s) for s in seq.spawn(2)]

    metrics = RunMetrics()
    velocity: dict[str, np.ndarray] = {}
    n = len(dataset)
    for epoch in range(cfg.epochs):
        order = batch_rng.permutation(n)
        epoch_losses = []
        for step, lo in enumerate(range(0, n, cfg.batch_size)):
            idx = order[lo:lo + cfg.batch_size]
            images = Tensor(dataset.images[idx])
            labels = dataset.labels[idx]
            T.zero_grads(params)
            try:
                loss = cross_entropy(forward_logits(params, config, cfg, images,
                                                    training=True, rng=gumbel_rng), labels)
                loss_val = loss.item()
                backward(loss)
            except (NumericError, DomainError) as exc:
                # DomainError here means a parameter (e.g. a temperature)
                # collapsed out of its domain: the run has diverged.
                raise TrainingAbort(
                    f"non-finite loss at epoch {epoch}, step {step}: {exc}") from exc
            if metrics.first_batch_loss is None:
                metrics.first_batch_loss = loss_val
            epoch_losses.append(loss_val)
            params = sgd_step(params, mask, cfg.lr, cfg.momentum, velocity)
        metrics.train_losses.append(float(np.mean(epoch_losses)))
        if (epoch + 1) % cfg.eval_cadence == 0 or epoch == cfg.epochs - 1:
            tr_acc, tr_loss = _evaluate_params(params, config, cfg, dataset)
            metrics.records.append((epoch + 1, "train", tr_loss, tr_acc))
            if val_dataset is not None:
                va_acc, va_loss = _evaluate_params(params, config, cfg, val_dataset)
                metrics.records.append((epoch + 1, "val", va_loss, va_acc))

    tuned = Checkpoint(config=config, params=params, trainable=mask,
                       seed=ckpt.seed, extras=dict(ckpt.extras))
    if cfg.mode == "gated" and cfg.fixed_gate_value is None:
        metrics.final_gates = [
            float(1.0 / (1.0 + np.exp(-params[f"gates.gamma.{l}"].item())))
            for l in range(config.num_blocks - 1)]
    if cfg.with_temps:
        metrics.final_temps = [float(np.exp(params[f"temps.log_tau.{l}"].item()))
                               for l in range(config.num_blocks)]
    metrics.wall_time = time.perf_counter() - start
    return tuned, metrics


def _evaluate_params(params, config, cfg: TrainConfig, dataset: LabeledDataset,
                     batch_size: int = 100) -> tuple[float, float]:
    # Detached copies keep evaluation off the autodiff graph entirely.
    detached = {name: (t.detach() if t.requires_grad else t) for name, t in params.items()}
    correct, total, loss_sum = 0, 0, 0.0
    for lo in range(0, len(dataset), batch_size):
        images = Tensor(dataset.images[lo:lo + batch_size])
        labels = dataset.labels[lo:lo + batch_size]
        logits = forward_logits(detached, config, cfg, images, training=False).data
        shifted = logits - logits.max(axis=1, keepdims=True)
        logp = shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))
        loss_sum += float(-logp[np.arange(len(labels)), labels].sum())
        correct += int((logits.argmax(axis=1) == labels).sum())
        total += len(labels)
    return correct / total, loss_sum / total


def evaluate(ckpt: Checkpoint, dataset: LabeledDataset | None,
             batch_size: int = 100) -> tuple[float, float]:
    """Accuracy and mean loss of a checkpoint on a dataset; mutates nothing."""
    if dataset is None or len(dataset) < 1:
        raise ConfigError("evaluation dataset is empty")
    cfg = train_config_from_checkpoint(ckpt)
    return _evaluate_params(ckpt.params, ckpt.config, cfg, dataset, batch_size)


def train_config_from_checkpoint(ckpt: Checkpoint) -> TrainConfig:
    ex = ckpt.extras
    return TrainConfig(mode=ex.get("mode", "gated"), n_prompts=ex.get("n_prompts", 1),
                       with_temps=ex.get("with_temps", True),
                       gate_variant=ex.get("gate_variant", "soft"),
                       gumbel_temp=ex.get("gumbel_temp", 1.0),
                       fixed_gate_value=ex.get("fixed_gate_value"),
                       seed=ckpt.seed)


@dataclass
class AblationCell:
    mode: str
    shaping: bool
    gate_variant: str
    metrics: RunMetrics
    final_train_acc: float
    final_val_acc: float | None
    backbone_hash: str


def run_ablation(config: ViTConfig, base_cfg: TrainConfig, dataset: LabeledDataset,
                 val_dataset: LabeledDataset | None, modes, shaping_options,
                 gate_variants, backbone: Checkpoint,
                 max_workers: int = 1) -> list[AblationCell]:
    """Train one cell per (mode, shaping, gate variant) combination against a
    shared frozen backbone and identical seed/data. Each cell records the
    hash of its own frozen parameters, which must agree across cells."""
    cells_spec = [(m, s, gv) for m in modes for s in shaping_options for gv in gate_variants]

    def run_cell(spec):
        mode, shaping, gate_variant = spec
        cfg = replace(base_cfg, mode=mode, with_temps=bool(shaping),
                      gate_variant=gate_variant if mode == "gated" else "soft")
        tuned, metrics = train(config, cfg, dataset, val_dataset, backbone=backbone)
        train_recs = [r for r in metrics.records if r[1] == "train"]
        val_recs = [r for r in metrics.records if r[1] == "val"]
        return AblationCell(mode=mode, shaping=bool(shaping), gate_variant=gate_variant,
                            metrics=metrics,
                            final_train_acc=train_recs[-1][3] if train_recs else float("nan"),
                            final_val_acc=val_recs[-1][3] if val_recs else None,
                            backbone_hash=backbone_hash(tuned))

    if max_workers > 1:
        from concurrent.futures import ThreadPoolExecutor

        with ThreadPoolExecutor(max_workers=max_workers) as pool:
            cells = list(pool.map(run_cell, cells_spec))
    else:
        cells = [run_cell(spec) for spec in cells_spec]
    return cells


def ablation_csv(cells: list[AblationCell], base_cfg: TrainConfig,
                 fingerprint: str = "") -> str:
    buf = io.StringIO()
    if fingerprint:
        buf.write(f"# config_fingerprint={fingerprint}\n")
    buf.write("mode,attention_shaping,gate_variant,lr,epochs,seed,backbone_hash,"
              "config_fingerprint,final_train_loss,final_train_accuracy,"
              "final_val_accuracy\n")
    for cell in cells:
        final_loss = cell.metrics.train_losses[-1] if cell.metrics.train_losses else float("nan")
        val_acc = "" if cell.final_val_acc is None else repr(cell.final_val_acc)
        buf.write(f"{cell.mode},{int(cell.shaping)},{cell.gate_variant},"
                  f"{base_cfg.lr!r},{base_cfg.epochs},{base_cfg.seed},{cell.backbone_hash},"
                  f"{fingerprint},{final_loss!r},{cell.final_train_acc!r},{val_acc}\n")
    return buf.getvalue()
