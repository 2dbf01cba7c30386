"""Synthetic cluster tasks, AdamW with linear warmup/decay, and the training loop."""

from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass, fields

import numpy as np

from .core import Matrix, NonFiniteError, Rng, add, constant, logsumexp, mean_all, pick, scale, square, sub
from .moe import ConfigError

TASK_KINDS = ("cluster_regression", "cluster_classification")


class DivergedError(RuntimeError):
    def __init__(self, step: int, detail: str = ""):
        super().__init__(f"training diverged at step {step}" + (f": {detail}" if detail else ""))
        self.step = step


@dataclass(frozen=True)
class SyntheticTaskSpec:
    kind: str = "cluster_classification"
    num_clusters: int = 4
    D: int = 16
    T: int = 8
    samples: int = 256
    noise_std: float = 0.1
    seed: int = 0
    mean_scale: float = 1.0

    def __post_init__(self):
        if self.kind not in TASK_KINDS:
            raise ConfigError(f"kind: must be one of {TASK_KINDS} (got {self.kind!r})")
        if self.num_clusters < 2:
            raise ConfigError(f"num_clusters: must be >= 2 (got {self.num_clusters})")
        if self.noise_std < 0:
            raise ConfigError(f"noise_std: must be >= 0 (got {self.noise_std})")
        for name in ("D", "T", "samples"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name}: must be >= 1 (got {getattr(self, name)})")


@dataclass
class Dataset:
    """``inputs`` is (S, T, D).  ``targets`` is (S,) class ids or (S, T, D) regression targets."""

    spec: SyntheticTaskSpec
    inputs: np.ndarray
    targets: np.ndarray
    clusters: np.ndarray
    means: np.ndarray
    maps: np.ndarray | None = None

    def __len__(self) -> int:
        return self.inputs.shape[0]

    @property
    def is_classification(self) -> bool:
        return self.spec.kind == "cluster_classification"

    def subset(self, idx) -> "Dataset":
        idx = np.asarray(idx)
        return Dataset(self.spec, self.inputs[idx], self.targets[idx], self.clusters[idx], self.means, self.maps)


def generate_task(spec: SyntheticTaskSpec) -> Dataset:
    """Sequences whose tokens all come from one Gaussian cluster.

    Cluster means are random directions of norm ``mean_scale * sqrt(D)``, redrawn
    until every pair is at least ``mean_scale`` apart.  Classification targets are
    the cluster id; regression targets are ``x W_c + noise`` with a per-cluster
    map ``W_c`` of unit-variance columns.
    """
    rng = Rng(spec.seed)
    C, D = spec.num_clusters, spec.D
    mrng = rng.child("means")
    while True:
        means = mrng.normal((C, D)) * spec.mean_scale
        gaps = np.linalg.norm(means[:, None] - means[None], axis=-1)
        if gaps[~np.eye(C, dtype=bool)].min() >= spec.mean_scale:
            break
    clusters = rng.child("assign").integers(0, C, spec.samples)
    noise = rng.child("noise").normal((spec.samples, spec.T, D), spec.noise_std)
    inputs = means[clusters][:, None, :] + noise
    maps = None
    if spec.kind == "cluster_classification":
        targets = clusters.copy()
    else:
        maps = rng.child("maps").normal((C, D, D), D ** -0.5)
        target_noise = rng.child("target_noise").normal(inputs.shape, spec.noise_std)
        targets = np.einsum("std,sde->ste", inputs, maps[clusters]) + target_noise
    return Dataset(spec, inputs, targets, clusters, means, maps)


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 1e-3
    warmup_steps: int = 100
    batch_size: int = 16
    epochs: int = 3
    aux_coef: float = 0.01
    weight_decay: float = 0.0
    seed: int = 0
    betas: tuple[float, float] = (0.9, 0.999)
    adam_eps: float = 1e-8

    def __post_init__(self):
        if not self.lr >= 0:
            raise ConfigError(f"lr: must be >= 0 (got {self.lr})")
        if self.warmup_steps < 0:
            raise ConfigError(f"warmup_steps: must be >= 0 (got {self.warmup_steps})")
        if self.batch_size < 1:
            raise ConfigError(f"batch_size: must be >= 1 (got {self.batch_size})")
        if self.epochs < 0:
            raise ConfigError(f"epochs: must be >= 0 (got {self.epochs})")
        if self.aux_coef < 0:
            raise ConfigError(f"aux_coef: must be >= 0 (got {self.aux_coef})")
        if self.weight_decay < 0:
            raise ConfigError(f"weight_decay: must be >= 0 (got {self.weight_decay})")


@dataclass
class TrainRecord:
    step: int
    total_loss: float
    task_loss: float
    lb_moe: float
    z_moe: float
    lb_peft: float
    learning_rate: float


HISTORY_COLUMNS = ("step", "total_loss", "task_loss", "lb_moe", "z_moe", "lb_peft", "lr")


def write_history_csv(history: list[TrainRecord], path) -> None:
    lines = [",".join(HISTORY_COLUMNS)]
    for r in history:
        lines.append(",".join([str(r.step)] + [repr(float(getattr(r, f.name))) for f in fields(r)[1:]]))
    with open(path, "w", newline="\n") as fh:
        fh.write("\n".join(lines) + "\n")


def lr_at(step: int, total_steps: int, base_lr: float, warmup_steps: int) -> float:
    """Learning rate for 1-based ``step``: linear ramp to ``base_lr`` at ``warmup_steps``, then linear to 0."""
    if step < warmup_steps:
        return base_lr * step / warmup_steps
    if total_steps <= warmup_steps:
        return base_lr
    return base_lr * (total_steps - step) / (total_steps - warmup_steps)


class AdamW:
    """Adam with decoupled weight decay; parameters are updated in place."""

    def __init__(self, params: dict[str, Matrix], betas=(0.9, 0.999), eps: float = 1e-8,
                 weight_decay: float = 0.0):
        self.params = params
        self.b1, self.b2 = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.t = 0
        self.m = {k: np.zeros_like(p.data) for k, p in params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in params.items()}

    def step(self, lr: float) -> None:
        self.t += 1
        c1 = 1.0 - self.b1 ** self.t
        c2 = 1.0 - self.b2 ** self.t
        for k, p in self.params.items():
            if not p.requires_grad:
                continue
            g = p.grad if p.grad is not None else np.zeros_like(p.data)
            m, v = self.m[k], self.v[k]
            m *= self.b1
            m += (1.0 - self.b1) * g
            v *= self.b2
            v += (1.0 - self.b2) * g * g
            if self.weight_decay:
                p.data *= 1.0 - lr * self.weight_decay
            p.data -= lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


def task_loss(model, batch: Dataset, rng: Rng | None = None):
    """(task loss, aux losses, per-layer stats, logits or None) for one batch."""
    S, T, D = batch.inputs.shape
    x = constant(batch.inputs.reshape(S * T, D))
    hidden, aux, stats = model.forward(x, seq_len=T, rng=rng)
    if batch.is_classification:
        logits = model.logits(hidden, T)
        loss = mean_all(sub(logsumexp(logits), pick(logits, batch.targets)))
        return loss, aux, stats, logits
    diff = sub(hidden, constant(batch.targets.reshape(S * T, D)))
    return mean_all(square(diff)), aux, stats, None


def digest(m: Matrix) -> str:
    return hashlib.sha256(np.ascontiguousarray(m.data).tobytes()).hexdigest()


def train(model, dataset: Dataset, cfg: TrainConfig) -> list[TrainRecord]:
    """Minimise task + aux_coef·(lb_moe + z_moe + lb_peft) over unfrozen parameters."""
    params = model.trainable()
    if not params:
        raise ConfigError("model has no trainable parameters")
    S = len(dataset)
    per_epoch = math.ceil(S / cfg.batch_size)
    total = per_epoch * cfg.epochs
    opt = AdamW(params, cfg.betas, cfg.adam_eps, cfg.weight_decay)
    root = Rng(cfg.seed)
    history: list[TrainRecord] = []
    step = 0
    for epoch in range(cfg.epochs):
        order = root.child("epoch", epoch).permutation(S)
        for b in range(per_epoch):
            step += 1
            batch = dataset.subset(order[b * cfg.batch_size:(b + 1) * cfg.batch_size])
            lr = lr_at(step, total, cfg.lr, cfg.warmup_steps)
            try:
                loss, aux, _, _ = task_loss(model, batch, root.child("dropout", step))
                total_loss = add(loss, scale(aux.total(), cfg.aux_coef))
            except NonFiniteError as exc:
                raise DivergedError(step, str(exc)) from exc
            if not math.isfinite(total_loss.item()):
                raise DivergedError(step, "non-finite loss")
            model.zero_grad()
            total_loss.backward()
            opt.step(lr)
            a = aux.values()
            history.append(TrainRecord(step, total_loss.item(), loss.item(), a["lb_moe"], a["z_moe"],
                                       a["lb_peft"], lr))
    model.zero_grad()
    return history


def evaluate(model, dataset: Dataset, batch_size: int = 64) -> dict:
    """Mean per-sample task loss, accuracy (classification) and MoE dispatch fractions per layer."""
    S = len(dataset)
    total_loss, correct = 0.0, 0
    counts = None
    for start in range(0, S, batch_size):
        batch = dataset.subset(np.arange(start, min(S, start + batch_size)))
        loss, _, stats, logits = task_loss(model, batch)
        total_loss += loss.item() * len(batch)
        if logits is not None:
            correct += int((logits.data.argmax(axis=1) == batch.targets).sum())
        sel = [np.bincount(st["moe"].selected.ravel(), minlength=st["moe"].num_experts) for st in stats]
        counts = sel if counts is None else [c + s for c, s in zip(counts, sel)]
    out = {"loss": total_loss / S,
           "accuracy": correct / S if dataset.is_classification else None,
           "moe_fractions": [(c / c.sum()).tolist() for c in counts]}
    return out


__all__ = [
    "AdamW", "Dataset", "DivergedError", "SyntheticTaskSpec", "TrainConfig", "TrainRecord",
    "digest", "evaluate", "generate_task", "lr_at", "task_loss", "train",
    "write_history_csv",
]
