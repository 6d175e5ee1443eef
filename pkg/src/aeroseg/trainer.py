"""Optimization loop: mixed-batch steps, SGD/Adam, checkpoints, logs.

Runs are deterministic end to end: parameter init, batch order, the
augmentation coin flips and the held-out split all derive from the config
seed, so identical configs produce bit-identical checkpoints and logs, and
a resumed run continues exactly like an uninterrupted one.
"""

from __future__ import annotations

import json
import struct
import zlib
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .data import AugmentPolicy, Batch, Dataset, Sample, make_batches
from .errors import (ConfigurationError, CorruptionError, DimensionError,
                     FormatError, NumericError)
from .loss import ADVERSARIAL_REVERSAL, LITERAL, LossBreakdown, total_loss
from .metrics import ConfusionMatrix, MetricsReport, compute_report, confusion_accumulate
from .model import ArchConfig, ModelParams, forward, init_params, predict_mask
from .tensor import Tensor, no_grad

HELD_OUT_FRACTION = 0.1


@dataclass
class TrainConfig:
    lambda1: float = 1.0
    lambda2: float = 1.0
    learning_rate: float = 1e-3
    optimizer: str = "adam"
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    batch_size: int = 8
    labelled_fraction: float = 0.5
    epochs: int = 1
    seed: int = 0
    domain_loss_mode: str = LITERAL
    eps_clamp: float = 1e-7
    dice_smoothing: float = 1e-6
    augment: AugmentPolicy = field(default_factory=AugmentPolicy)

    def validate(self) -> None:
        if self.learning_rate <= 0:
            raise ConfigurationError(f"learning_rate must be > 0, got {self.learning_rate}")
        if self.epochs < 1:
            raise ConfigurationError(f"epochs must be >= 1, got {self.epochs}")
        if self.lambda1 < 0 or self.lambda2 < 0:
            raise ConfigurationError("lambda weights must be >= 0")
        if self.optimizer not in ("sgd", "adam"):
            raise ConfigurationError(f"unknown optimizer {self.optimizer!r}")
        if self.domain_loss_mode not in (LITERAL, ADVERSARIAL_REVERSAL):
            raise ConfigurationError(f"unknown domain_loss_mode {self.domain_loss_mode!r}")
        if not 0 < self.labelled_fraction <= 1:
            raise ConfigurationError(f"labelled_fraction must be in (0,1], got {self.labelled_fraction}")
        if self.batch_size < 1:
            raise ConfigurationError(f"batch_size must be >= 1, got {self.batch_size}")


# -- parameter updates ----------------------------------------------------------


def sgd_update(param: Tensor, grad: np.ndarray, lr: float) -> Tensor:
    if grad.shape != param.data.shape:
        raise DimensionError(f"sgd: grad {grad.shape} vs param {param.data.shape}")
    param.data -= lr * grad
    return param


def adam_update(param: Tensor, grad: np.ndarray, state: tuple, step: int, lr: float,
                betas: tuple = (0.9, 0.999), eps: float = 1e-8) -> tuple:
    """Textbook bias-corrected update. ``state`` is (m, v); returns the new
    pair. ``step`` counts from 1."""
    if grad.shape != param.data.shape:
        raise DimensionError(f"adam: grad {grad.shape} vs param {param.data.shape}")
    beta1, beta2 = betas
    m, v = state
    m = beta1 * m + (1 - beta1) * grad
    v = beta2 * v + (1 - beta2) * grad * grad
    m_hat = m / (1 - beta1 ** step)
    v_hat = v / (1 - beta2 ** step)
    param.data -= lr * m_hat / (np.sqrt(v_hat) + eps)
    return m, v


@dataclass
class OptState:
    kind: str
    step: int = 0
    moments: dict = field(default_factory=dict)  # name -> (m, v)

    @staticmethod
    def fresh(params: ModelParams, kind: str) -> "OptState":
        state = OptState(kind=kind)
        if kind == "adam":
            for name, tensor in params.named():
                state.moments[name] = (np.zeros_like(tensor.data), np.zeros_like(tensor.data))
        return state


# -- stepping ---------------------------------------------------------------------


def train_step(params: ModelParams, batch: Batch, config: TrainConfig,
               opt_state: OptState) -> tuple[ModelParams, OptState, LossBreakdown]:
    """Forward, loss, backward, one optimizer update. Gradients are zeroed
    after the step. A non-finite loss term aborts with its name."""
    reverse = config.domain_loss_mode == ADVERSARIAL_REVERSAL
    output = forward(params, Tensor(batch.images), domain_grad_reversed=reverse)
    objective, breakdown = total_loss(
        output, batch.masks, batch.domains, config.lambda1, config.lambda2,
        dice_smoothing=config.dice_smoothing, eps_clamp=config.eps_clamp,
        domain_loss_mode=config.domain_loss_mode)
    for term, value in (("l0", breakdown.l0), ("l1", breakdown.l1), ("l2", breakdown.l2)):
        if not np.isfinite(value):
            raise NumericError(f"loss term {term} is non-finite ({value})")

    objective.backward()
    opt_state.step += 1
    for name, tensor in params.named():
        grad = tensor.grad if tensor.grad is not None else np.zeros_like(tensor.data)
        if config.optimizer == "sgd":
            sgd_update(tensor, grad, config.learning_rate)
        else:
            opt_state.moments[name] = adam_update(
                tensor, grad, opt_state.moments[name], opt_state.step,
                config.learning_rate, (config.adam_beta1, config.adam_beta2), config.adam_eps)
        tensor.grad = None
    return params, opt_state, breakdown


# -- evaluation -------------------------------------------------------------------


def evaluate_params(params: ModelParams, samples: Sequence[Sample],
                    exclude_class: Optional[int] = None,
                    eval_batch: int = 16) -> tuple[Optional[MetricsReport], float]:
    """Segmentation report over the labelled subset of ``samples`` plus
    domain-head accuracy over all of them. Report is None when no sample
    carries a mask."""
    cm = ConfusionMatrix(params.arch.num_classes)
    any_labelled = False
    domain_hits = 0
    with no_grad():
        for start in range(0, len(samples), eval_batch):
            chunk = list(samples[start:start + eval_batch])
            images = np.stack([s.image for s in chunk])
            output = forward(params, Tensor(images))
            predicted = predict_mask(output)
            domain_pred = np.argmax(output.domain_logits.data, axis=1)
            for i, sample in enumerate(chunk):
                if sample.mask is not None:
                    confusion_accumulate(cm, predicted[i], sample.mask)
                    any_labelled = True
                if domain_pred[i] == sample.domain.index:
                    domain_hits += 1
    report = compute_report(cm, exclude_class) if any_labelled else None
    return report, domain_hits / len(samples) if samples else 0.0


# -- the loop ---------------------------------------------------------------------


@dataclass
class EpochStats:
    epoch: int
    mean_l0: float
    mean_l1: float
    mean_l2: float
    mean_total: float
    held_out: Optional[MetricsReport]
    domain_accuracy: float


@dataclass
class TrainLog:
    steps: list = field(default_factory=list)    # LossBreakdown per step
    epochs: list = field(default_factory=list)   # EpochStats per epoch


def _id_rank(seed: int, sample_id: str) -> int:
    return zlib.crc32(f"{seed}:{sample_id}".encode())


def split_held_out(datasets: Sequence[Dataset], seed: int) -> tuple[list, list]:
    """Deterministic split: per pool (labelled vs unlabelled), the 10% of
    samples with the lowest seeded id hash (at least one) are held out.
    Stable under dataset reordering."""
    held_ids: set = set()
    held_out: list = []
    for pool_labelled in (True, False):
        pool = [s for d in datasets if d.spec.labelled == pool_labelled for s in d.samples]
        if not pool:
            continue
        n_held = max(1, round(HELD_OUT_FRACTION * len(pool)))
        ranked = sorted(pool, key=lambda s: (_id_rank(seed, s.id), s.id))
        for sample in ranked[:n_held]:
            held_ids.add(sample.id)
            held_out.append(sample)
    train_sets = [Dataset(spec=d.spec, samples=[s for s in d.samples if s.id not in held_ids])
                  for d in datasets]
    return train_sets, held_out


@dataclass
class Checkpoint:
    arch: ArchConfig
    param_arrays: dict
    opt_state: OptState
    config: TrainConfig
    epoch: int
    loss_history: list
    init_seed: int

    def to_params(self) -> ModelParams:
        params = ModelParams(arch=self.arch, seed=self.init_seed)
        for name, array in self.param_arrays.items():
            params.tensors[name] = Tensor(array.copy(), requires_grad=True)
        return params


def train_loop(datasets: Sequence[Dataset], arch: ArchConfig, config: TrainConfig,
               resume_from: Optional[Checkpoint] = None) -> tuple[Checkpoint, TrainLog]:
    """Seeded end-to-end optimization over mixed datasets.

    Evaluates every epoch on the held-out split. With ``resume_from`` the
    loop continues at the stored epoch and reproduces the exact
    continuation of an uninterrupted run.
    """
    config.validate()
    arch.validate()
    if not any(d.spec.labelled for d in datasets):
        raise ConfigurationError("train_loop needs at least one labelled dataset")

    train_sets, held_out = split_held_out(datasets, config.seed)
    if not any(s.mask is not None for s in held_out):
        raise ConfigurationError("held-out split is empty for labelled data")
    if not any(s for d in train_sets for s in d.samples if d.spec.labelled):
        raise ConfigurationError("no labelled samples left to train on after the held-out split")

    if resume_from is not None:
        params = resume_from.to_params()
        opt_state = resume_from.opt_state
        start_epoch = resume_from.epoch
        history = list(resume_from.loss_history)
    else:
        params = init_params(arch, config.seed)
        opt_state = OptState.fresh(params, config.optimizer)
        start_epoch = 0
        history = []

    log = TrainLog(steps=list(history))
    for epoch in range(start_epoch, config.epochs):
        epoch_seed = int(np.random.SeedSequence([config.seed, 104729, epoch]).generate_state(1)[0])
        batches = make_batches(train_sets, config.batch_size, config.labelled_fraction,
                               epoch_seed, config.augment)
        epoch_breakdowns = []
        for batch in batches:
            params, opt_state, breakdown = train_step(params, batch, config, opt_state)
            epoch_breakdowns.append(breakdown)
            log.steps.append(breakdown)
            history.append(breakdown)
        report, domain_acc = evaluate_params(params, held_out)
        log.epochs.append(EpochStats(
            epoch=epoch,
            mean_l0=float(np.mean([b.l0 for b in epoch_breakdowns])),
            mean_l1=float(np.mean([b.l1 for b in epoch_breakdowns])),
            mean_l2=float(np.mean([b.l2 for b in epoch_breakdowns])),
            mean_total=float(np.mean([b.total for b in epoch_breakdowns])),
            held_out=report,
            domain_accuracy=domain_acc,
        ))

    checkpoint = Checkpoint(
        arch=arch,
        param_arrays={name: t.data.copy() for name, t in params.named()},
        opt_state=opt_state,
        config=config,
        epoch=config.epochs,
        loss_history=history,
        init_seed=config.seed,
    )
    return checkpoint, log


# -- checkpoint file format --------------------------------------------------------

_MAGIC = b"AEROSEGC"
_VERSION = 1


def _config_to_dict(config: TrainConfig) -> dict:
    raw = asdict(config)
    raw["augment"]["downsample_factors"] = list(raw["augment"]["downsample_factors"])
    return raw


def _config_from_dict(raw: dict) -> TrainConfig:
    raw = dict(raw)
    aug = dict(raw.pop("augment"))
    aug["downsample_factors"] = tuple(aug["downsample_factors"])
    return TrainConfig(augment=AugmentPolicy(**aug), **raw)


def _arch_to_dict(arch: ArchConfig) -> dict:
    return {"in_channels": arch.in_channels, "num_classes": arch.num_classes,
            "num_domains": arch.num_domains, "stage_widths": list(arch.stage_widths),
            "input_size": list(arch.input_size)}


def _arch_from_dict(raw: dict) -> ArchConfig:
    return ArchConfig(in_channels=raw["in_channels"], num_classes=raw["num_classes"],
                      num_domains=raw["num_domains"], stage_widths=tuple(raw["stage_widths"]),
                      input_size=tuple(raw["input_size"]))


def save_checkpoint(path, checkpoint: Checkpoint) -> None:
    """Binary layout: 8-byte magic, u32 version, u64 header length, JSON
    header, then raw little-endian float64 tensor payloads in header
    order."""
    tensors = []
    payloads = []
    for name, array in checkpoint.param_arrays.items():
        tensors.append({"name": name, "shape": list(array.shape), "role": "param"})
        payloads.append(np.ascontiguousarray(array, dtype="<f8").tobytes())
    for name, (m, v) in checkpoint.opt_state.moments.items():
        tensors.append({"name": name, "shape": list(m.shape), "role": "adam_m"})
        payloads.append(np.ascontiguousarray(m, dtype="<f8").tobytes())
        tensors.append({"name": name, "shape": list(v.shape), "role": "adam_v"})
        payloads.append(np.ascontiguousarray(v, dtype="<f8").tobytes())
    header = {
        "arch": _arch_to_dict(checkpoint.arch),
        "config": _config_to_dict(checkpoint.config),
        "epoch": checkpoint.epoch,
        "init_seed": checkpoint.init_seed,
        "optimizer": {"kind": checkpoint.opt_state.kind, "step": checkpoint.opt_state.step},
        "loss_history": [[b.l0, b.l1, b.l2, b.lambda1, b.lambda2, b.total]
                         for b in checkpoint.loss_history],
        "tensors": tensors,
    }
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(struct.pack("<I", _VERSION))
        fh.write(struct.pack("<Q", len(blob)))
        fh.write(blob)
        for payload in payloads:
            fh.write(payload)


def load_checkpoint(path) -> Checkpoint:
    raw = Path(path).read_bytes()
    if len(raw) < 20 or raw[:8] != _MAGIC:
        raise FormatError(f"{path}: not a checkpoint file (bad magic)")
    version = struct.unpack("<I", raw[8:12])[0]
    if version != _VERSION:
        raise FormatError(f"{path}: unsupported checkpoint version {version} (expected {_VERSION})")
    header_len = struct.unpack("<Q", raw[12:20])[0]
    if len(raw) < 20 + header_len:
        raise CorruptionError(f"{path}: truncated header")
    try:
        header = json.loads(raw[20:20 + header_len].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CorruptionError(f"{path}: unreadable header ({exc})") from exc

    offset = 20 + header_len
    param_arrays: dict = {}
    moments: dict = {}
    for entry in header["tensors"]:
        count = int(np.prod(entry["shape"])) if entry["shape"] else 1
        nbytes = count * 8
        if len(raw) < offset + nbytes:
            raise CorruptionError(f"{path}: truncated tensor payload for {entry['name']!r}")
        array = np.frombuffer(raw[offset:offset + nbytes], dtype="<f8").reshape(entry["shape"]).copy()
        offset += nbytes
        if entry["role"] == "param":
            param_arrays[entry["name"]] = array
        elif entry["role"] == "adam_m":
            moments.setdefault(entry["name"], [None, None])[0] = array
        elif entry["role"] == "adam_v":
            moments.setdefault(entry["name"], [None, None])[1] = array
        else:
            raise CorruptionError(f"{path}: unknown tensor role {entry['role']!r}")
    if offset != len(raw):
        raise CorruptionError(f"{path}: {len(raw) - offset} trailing bytes")

    opt_state = OptState(kind=header["optimizer"]["kind"], step=header["optimizer"]["step"],
                         moments={name: (m, v) for name, (m, v) in moments.items()})
    history = [LossBreakdown(l0=e[0], l1=e[1], l2=e[2], lambda1=e[3], lambda2=e[4], total=e[5])
               for e in header["loss_history"]]
    return Checkpoint(
        arch=_arch_from_dict(header["arch"]),
        param_arrays=param_arrays,
        opt_state=opt_state,
        config=_config_from_dict(header["config"]),
        epoch=header["epoch"],
        loss_history=history,
        init_seed=header["init_seed"],
    )


# -- log serialization ---------------------------------------------------------------


def steps_csv(log: TrainLog) -> str:
    lines = ["step,l0,l1,l2,total"]
    for i, b in enumerate(log.steps):
        lines.append(f"{i},{b.l0!r},{b.l1!r},{b.l2!r},{b.total!r}")
    return "\n".join(lines) + "\n"


def epochs_csv(log: TrainLog) -> str:
    lines = ["epoch,mean_l0,mean_l1,mean_l2,mean_total,held_out_accuracy,held_out_mean_iou,domain_accuracy"]
    for e in log.epochs:
        acc = repr(e.held_out.overall_accuracy) if e.held_out else ""
        iou = repr(e.held_out.mean_iou) if e.held_out else ""
        lines.append(f"{e.epoch},{e.mean_l0!r},{e.mean_l1!r},{e.mean_l2!r},{e.mean_total!r},"
                     f"{acc},{iou},{e.domain_accuracy!r}")
    return "\n".join(lines) + "\n"
