"""Parameter counting, analytic FLOP counting and inference timing.

FLOPs are reported as 2 x multiply-accumulates (MACs). Counting rules by
layer type (biases and elementwise work are not MACs):

* ``ConvNd`` / ``ConvTransposeNd``: output elements x (C_in / groups) x kernel volume
* ``Linear``: rows x in_features x out_features
* ``LSTM``: per step and layer, 4 x hidden x (input + hidden)
* modules exposing ``macs(inputs, output)``: their own rule (attention score
  and value products, state-space scans); child layers are counted separately
* normalisation, activation, pooling, dropout and reshaping layers: 0

Any other leaf layer has no rule: it is counted as 0 and listed in
``ComplexityRecord.unsupported``.
"""

from __future__ import annotations

import logging
import math
import statistics
import time
from dataclasses import dataclass, field
from typing import Sequence

import torch
import torch.nn as nn

from ..errors import UnsupportedLayer
from ..zoo.layers import SliceSampler
from ..zoo.spec import ModelSpec

log = logging.getLogger(__name__)

_ZERO_COST = (
    nn.ReLU, nn.GELU, nn.SiLU, nn.Sigmoid, nn.LeakyReLU, nn.Tanh, nn.Softmax, nn.Identity, nn.Dropout,
    nn.Flatten, nn.Unflatten,
    nn.BatchNorm1d, nn.BatchNorm2d, nn.BatchNorm3d, nn.LayerNorm, nn.GroupNorm,
    nn.MaxPool1d, nn.MaxPool2d, nn.MaxPool3d, nn.AvgPool1d, nn.AvgPool2d, nn.AvgPool3d,
    nn.AdaptiveAvgPool1d, nn.AdaptiveAvgPool2d, nn.AdaptiveAvgPool3d,
    nn.AdaptiveMaxPool1d, nn.AdaptiveMaxPool2d, nn.AdaptiveMaxPool3d,
    SliceSampler,
)

_CONV = (nn.Conv1d, nn.Conv2d, nn.Conv3d, nn.ConvTranspose1d, nn.ConvTranspose2d, nn.ConvTranspose3d)


def count_params(model: nn.Module) -> int:
    """Number of trainable scalars."""
    return sum(p.numel() for p in model.parameters() if p.requires_grad)


def _first_tensor(obj):
    if isinstance(obj, torch.Tensor):
        return obj
    if isinstance(obj, (tuple, list)):
        for o in obj:
            t = _first_tensor(o)
            if t is not None:
                return t
    return None


def layer_macs(module: nn.Module, inputs, output) -> int | None:
    """MACs of one call of ``module``; ``None`` when no rule applies."""
    if hasattr(module, "macs"):
        return int(module.macs(inputs, output))
    if isinstance(module, _CONV):
        if isinstance(module, (nn.ConvTranspose1d, nn.ConvTranspose2d, nn.ConvTranspose3d)):
            # each input element is scattered through the kernel to every output channel
            x = inputs[0]
            return x.numel() * (module.out_channels // module.groups) * math.prod(module.kernel_size)
        out = _first_tensor(output)
        return out.numel() * (module.in_channels // module.groups) * math.prod(module.kernel_size)
    if isinstance(module, nn.Linear):
        out = _first_tensor(output)
        rows = out.numel() // module.out_features
        return rows * module.in_features * module.out_features
    if isinstance(module, nn.LSTM):
        x = inputs[0]
        steps = x.shape[0] * x.shape[1] if x.dim() == 3 else x.shape[0]
        total = 0
        dirs = 2 if module.bidirectional else 1
        for layer in range(module.num_layers):
            in_size = module.input_size if layer == 0 else module.hidden_size * dirs
            total += dirs * 4 * module.hidden_size * (in_size + module.hidden_size)
        return steps * total
    if isinstance(module, _ZERO_COST):
        return 0
    return None


@dataclass
class MacCount:
    macs: int = 0
    per_type: dict[str, int] = field(default_factory=dict)
    unsupported: list[str] = field(default_factory=list)

    @property
    def flops(self) -> int:
        return 2 * self.macs


def count_macs(model: nn.Module, example: torch.Tensor | Sequence[torch.Tensor], strict: bool = False) -> MacCount:
    """Run one forward pass on ``example`` and tally MACs with hooks.

    Works on the ``meta`` device, so very large models can be counted
    without allocating activations. Layers without a counting rule are
    listed in ``unsupported``; with ``strict`` they raise ``UnsupportedLayer``.
    """
    result = MacCount()
    handles = []

    def hook(name):
        def fn(module, inputs, output):
            m = layer_macs(module, inputs, output)
            kind = type(module).__name__
            if m is None:
                if name not in result.unsupported:
                    result.unsupported.append(name)
                return
            result.macs += m
            if m:
                result.per_type[kind] = result.per_type.get(kind, 0) + m
        return fn

    for name, module in model.named_modules():
        is_leaf = next(module.children(), None) is None
        if is_leaf or hasattr(module, "macs"):
            handles.append(module.register_forward_hook(hook(name or type(module).__name__)))
    try:
        with torch.no_grad():
            args = example if isinstance(example, (tuple, list)) else (example,)
            model(*args)
    finally:
        for h in handles:
            h.remove()
    if result.unsupported and strict:
        raise UnsupportedLayer(f"no counting rule for: {', '.join(result.unsupported)}")
    if result.unsupported:
        log.warning("no counting rule for %d layer(s): %s", len(result.unsupported), ", ".join(result.unsupported[:10]))
    return result


@dataclass
class ComplexityRecord:
    params: int
    flops_per_sample: float
    batch_size: int
    batch_time_mean_s: float | None = None
    batch_time_sd_s: float | None = None
    n_timed: int = 0
    unsupported: list[str] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "params": self.params,
            "flops_per_sample": self.flops_per_sample,
            "batch_size": self.batch_size,
            "batch_time_mean_s": self.batch_time_mean_s,
            "batch_time_sd_s": self.batch_time_sd_s,
            "n_timed": self.n_timed,
            "unsupported": list(self.unsupported),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ComplexityRecord":
        return cls(**d)


@dataclass(frozen=True)
class ModelCard:
    spec: ModelSpec
    param_count: int
    flops_per_sample: float
    input_contract: tuple[int, ...]

    def to_dict(self) -> dict:
        return {
            "spec": self.spec.to_dict(),
            "param_count": self.param_count,
            "flops_per_sample": self.flops_per_sample,
            "input_contract": list(self.input_contract),
        }


def time_inference(model: nn.Module, x: torch.Tensor, n_warmup: int = 3, n_timed: int = 20) -> list[float]:
    model.eval()
    times = []
    with torch.no_grad():
        for _ in range(n_warmup):
            model(x)
        for _ in range(n_timed):
            t0 = time.perf_counter()
            model(x)
            times.append(time.perf_counter() - t0)
    return times


def profile(
    model: nn.Module,
    input_contract: Sequence[int],
    batch_size: int = 1,
    timing: bool = True,
    n_warmup: int = 3,
    n_timed: int = 20,
) -> ComplexityRecord:
    """Params, FLOPs per sample and batch inference time of ``model``.

    ``input_contract`` is the per-sample shape, e.g. ``(1, 32, 32, 32)``.
    Timing is skipped for models on the meta device.
    """
    if n_timed < 20 and timing:
        raise ValueError("timing needs at least 20 batches")
    param = next(model.parameters(), None)
    device = param.device if param is not None else torch.device("cpu")
    was_training = model.training
    model.eval()
    probe = torch.zeros(1, *input_contract, device=device)
    macs = count_macs(model, probe)
    record = ComplexityRecord(
        params=count_params(model),
        flops_per_sample=float(macs.flops),
        batch_size=batch_size,
        unsupported=list(macs.unsupported),
    )
    if timing and device.type != "meta":
        x = torch.randn(batch_size, *input_contract, generator=torch.Generator().manual_seed(0)).to(device)
        times = time_inference(model, x, n_warmup, n_timed)
        record.batch_time_mean_s = statistics.fmean(times)
        record.batch_time_sd_s = statistics.pstdev(times)
        record.n_timed = len(times)
    model.train(was_training)
    return record


def model_card(spec: ModelSpec, model: nn.Module) -> ModelCard:
    rec = profile(model, spec.input_shape, timing=False)
    return ModelCard(spec=spec, param_count=rec.params, flops_per_sample=rec.flops_per_sample,
                     input_contract=spec.input_shape)
