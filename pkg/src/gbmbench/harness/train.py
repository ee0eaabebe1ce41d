"""Fixed-budget training and evaluation of one model on one fold."""

from __future__ import annotations

import logging
import math
import time
import warnings
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from ..balance import AugmentConfig, SamplePlan, augment
from ..errors import LeakageError, NonFiniteLoss
from .metrics import Metrics, compute_metrics

log = logging.getLogger(__name__)

DEFAULT_SEEDS = (21, 33, 42)


@dataclass(frozen=True)
class TrainConfig:
    optimizer: str = "ADAM"
    learning_rate: float = 1e-4
    loss: str = "cross_entropy"
    epochs: int = 10
    batch_size: int = 1
    seed: int = 21

    def __post_init__(self):
        if self.optimizer != "ADAM" or self.loss != "cross_entropy":
            raise ValueError("only Adam with cross-entropy is supported")
        if self.epochs < 1 or self.batch_size < 1 or self.learning_rate < 0:
            raise ValueError("epochs and batch_size must be positive, learning_rate nonnegative")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass(frozen=True)
class TrainingSample:
    """One model input. ``sources`` are the patients the sample derives from."""

    sample_id: str
    array: np.ndarray  # (D, H, W) model layout
    label: int
    sources: tuple[str, ...]
    synthetic: bool = False


@dataclass
class TrainOutcome:
    model: nn.Module
    seconds: float
    losses: list[float]
    nondeterministic_ops: list[str] = field(default_factory=list)

    @property
    def final_loss(self) -> float:
        return self.losses[-1]


def assert_training_only(samples: Sequence[TrainingSample], train_patients: Sequence[str],
                         plan: SamplePlan | None, split: str = "train") -> None:
    allowed = set(train_patients)
    if plan is not None:
        plan.check_training_split(train_patients, split)
    elif split != "train":
        raise LeakageError("training is only allowed on a training split")
    for s in samples:
        outside = set(s.sources) - allowed
        if outside:
            raise LeakageError(f"training sample {s.sample_id} derives from non-training patients {sorted(outside)}")


def _stack(samples: Sequence[np.ndarray]) -> torch.Tensor:
    return torch.from_numpy(np.stack(samples).astype(np.float32))[:, None]


def train_one(
    model: nn.Module,
    samples: Sequence[TrainingSample],
    cfg: TrainConfig,
    train_patients: Sequence[str],
    plan: SamplePlan | None = None,
    augment_cfg: AugmentConfig | None = AugmentConfig(),
    split: str = "train",
    fold: int = 0,
) -> TrainOutcome:
    """Train ``model`` in place for exactly ``cfg.epochs`` epochs.

    Samples are reshuffled every epoch and, when ``augment_cfg`` is given,
    re-augmented with a generator seeded by (seed, fold, epoch, index).
    """
    assert_training_only(samples, train_patients, plan, split)
    if not samples:
        raise ValueError("no training samples")
    labels = torch.tensor([s.label for s in samples])
    opt = torch.optim.Adam(model.parameters(), lr=cfg.learning_rate)
    gen = torch.Generator().manual_seed(cfg.seed * 1000 + fold)
    model.train()
    t0 = time.perf_counter()
    previous = torch.are_deterministic_algorithms_enabled()
    torch.use_deterministic_algorithms(True, warn_only=True)
    try:
        with warnings.catch_warnings(record=True) as caught:
            warnings.simplefilter("always")
            losses = _epochs(model, samples, labels, cfg, opt, gen, augment_cfg, fold)
    finally:
        torch.use_deterministic_algorithms(previous)
    nondet = sorted({str(w.message).split("\n")[0] for w in caught if "determinis" in str(w.message)})
    for msg in nondet:
        log.warning("nondeterministic kernel: %s", msg)
    seconds = time.perf_counter() - t0
    return TrainOutcome(model=model, seconds=seconds, losses=losses, nondeterministic_ops=nondet)


def _epochs(model, samples, labels, cfg, opt, gen, augment_cfg, fold) -> list[float]:
    losses = []
    for epoch in range(cfg.epochs):
        order = torch.randperm(len(samples), generator=gen).tolist()
        total = 0.0
        for start in range(0, len(order), cfg.batch_size):
            idx = order[start:start + cfg.batch_size]
            arrays = []
            for i in idx:
                a = samples[i].array
                if augment_cfg is not None:
                    rng = np.random.default_rng([cfg.seed, fold, epoch, i])
                    a = augment(a, augment_cfg, rng)
                arrays.append(a)
            x = _stack(arrays)
            opt.zero_grad()
            loss = F.cross_entropy(model(x), labels[idx])
            if not torch.isfinite(loss):
                raise NonFiniteLoss(f"loss became {loss.item()} at epoch {epoch}")
            loss.backward()
            opt.step()
            total += loss.item() * len(idx)
        losses.append(total / len(samples))
        log.debug("epoch %d loss %.6f", epoch, losses[-1])
    if not all(math.isfinite(v) for v in losses):
        raise NonFiniteLoss("non-finite epoch loss")
    return losses


@dataclass
class Evaluation:
    sample_ids: list[str]
    y_true: np.ndarray
    proba: np.ndarray
    metrics: Metrics


def predict_proba(model: nn.Module, arrays: Sequence[np.ndarray], batch_size: int = 8) -> np.ndarray:
    model.eval()
    out = []
    with torch.no_grad():
        for start in range(0, len(arrays), batch_size):
            logits = model(_stack(arrays[start:start + batch_size]))
            out.append(torch.softmax(logits.double(), dim=1).numpy())
    return np.concatenate(out)


def evaluate(model: nn.Module, val_set: Sequence[TrainingSample], batch_size: int = 8) -> Evaluation:
    """Class probabilities and metrics on untouched validation samples."""
    if any(s.synthetic for s in val_set):
        raise LeakageError("validation sets must not contain synthetic samples")
    arrays = [s.array for s in val_set]
    y = np.array([s.label for s in val_set])
    proba = predict_proba(model, arrays, batch_size)
    return Evaluation([s.sample_id for s in val_set], y, proba, compute_metrics(y, proba))
