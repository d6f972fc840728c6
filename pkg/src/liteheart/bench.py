"""Inference-efficiency bench: parameter count, analytic FLOPs, latency, peak memory."""

from __future__ import annotations

import json
import statistics
import time
from dataclasses import asdict, dataclass

import numpy as np
import torch
from torch import nn

from .models import param_count


def _conv_flops(m: nn.Conv1d, inp: torch.Tensor, out: torch.Tensor) -> int:
    n, c_out, l_out = out.shape
    return 2 * m.kernel_size[0] * (m.in_channels // m.groups) * c_out * l_out * n


def _convt_flops(m: nn.ConvTranspose1d, inp: torch.Tensor, out: torch.Tensor) -> int:
    n, c_in, l_in = inp.shape
    return 2 * m.kernel_size[0] * c_in * (m.out_channels // m.groups) * l_in * n


def _linear_flops(m: nn.Linear, inp: torch.Tensor, out: torch.Tensor) -> int:
    rows = out.numel() // m.out_features
    return 2 * m.in_features * m.out_features * rows


def _mha_flops(m: nn.MultiheadAttention, q: torch.Tensor, k: torch.Tensor) -> int:
    if not m.batch_first:
        q, k = q.transpose(0, 1), k.transpose(0, 1)
    n, t_q, d = q.shape
    t_k = k.shape[1]
    proj = 2 * d * d * (t_q + 2 * t_k)  # Q, K, V
    scores = 2 * t_q * t_k * d
    mix = 2 * t_q * t_k * d
    out = 2 * d * d * t_q
    return n * (proj + scores + mix + out)


def count_flops(model: nn.Module, input_shape: tuple[int, ...], dtype=torch.float32) -> int:
    """Forward FLOPs (2 per multiply-accumulate) counted from conv, linear and attention layers."""
    total = 0
    handles = []

    def add(fn):
        def hook(module, inputs, output):
            nonlocal total
            out = output[0] if isinstance(output, tuple) else output
            total += fn(module, inputs[0], out)
        return hook

    def mha_hook(module, args, kwargs, output):
        nonlocal total
        q = args[0] if args else kwargs["query"]
        k = args[1] if len(args) > 1 else kwargs["key"]
        total += _mha_flops(module, q, k)

    for mod in model.modules():
        if isinstance(mod, nn.Conv1d):
            handles.append(mod.register_forward_hook(add(_conv_flops)))
        elif isinstance(mod, nn.ConvTranspose1d):
            handles.append(mod.register_forward_hook(add(_convt_flops)))
        elif isinstance(mod, nn.MultiheadAttention):
            handles.append(mod.register_forward_hook(mha_hook, with_kwargs=True))
        elif isinstance(mod, nn.Linear) and not isinstance(mod, nn.modules.linear.NonDynamicallyQuantizableLinear):
            handles.append(mod.register_forward_hook(add(_linear_flops)))
    was_training = model.training
    model.eval()
    try:
        with torch.no_grad():
            model(torch.zeros(input_shape, dtype=dtype))
    finally:
        for h in handles:
            h.remove()
        model.train(was_training)
    return int(total)


@dataclass
class LatencyStats:
    median_ms: float
    iqr_ms: float
    mean_ms: float
    reps: int
    warmup: int


def measure_latency(model: nn.Module, input_shape: tuple[int, ...], reps: int = 100, warmup: int = 10) -> LatencyStats:
    """Wall-clock per forward on a warm model; warm-up iterations are discarded."""
    model.eval()
    x = torch.randn(input_shape, generator=torch.Generator().manual_seed(0))
    times = []
    with torch.no_grad():
        for _ in range(warmup):
            model(x)
        for _ in range(reps):
            t0 = time.perf_counter()
            model(x)
            times.append(1e3 * (time.perf_counter() - t0))
    q1, q3 = np.percentile(times, [25, 75])
    return LatencyStats(statistics.median(times), float(q3 - q1), statistics.fmean(times), reps, warmup)


def _state_bytes(model: nn.Module) -> int:
    return sum(t.numel() * t.element_size() for t in model.state_dict().values())


def measure_peak_memory(model: nn.Module, input_shape: tuple[int, ...]) -> float:
    """Resident weights plus peak activation allocation of one forward, in MB.

    Activation allocations come from the CPU profiler's per-op memory
    accounting replayed in time order.
    """
    from torch.profiler import ProfilerActivity, profile

    model.eval()
    x = torch.randn(input_shape, generator=torch.Generator().manual_seed(0))
    with torch.no_grad():
        model(x)
        with profile(activities=[ProfilerActivity.CPU], profile_memory=True) as prof:
            model(x)
    timeline = []
    for ev in prof.events():
        if ev.name == "[memory]":
            timeline.append((ev.time_range.start, ev.cpu_memory_usage))
        elif ev.self_cpu_memory_usage:
            timeline.append((ev.time_range.start, ev.self_cpu_memory_usage))
    current = peak = 0
    for _, delta in sorted(timeline, key=lambda e: e[0]):
        current += delta
        peak = max(peak, current)
    return (_state_bytes(model) + peak + x.numel() * x.element_size()) / 2**20


@dataclass
class EfficiencyReport:
    param_count: int
    flops_per_forward: int
    latency_ms: dict
    peak_memory_mb: float
    batch_size: int = 4
    input_shape: tuple = ()

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "EfficiencyReport":
        d = json.loads(text)
        d["input_shape"] = tuple(d["input_shape"])
        return cls(**d)


def efficiency_report(model: nn.Module, input_shape: tuple[int, ...], reps: int = 100, warmup: int = 10) -> EfficiencyReport:
    lat = measure_latency(model, input_shape, reps, warmup)
    return EfficiencyReport(
        param_count=param_count(model),
        flops_per_forward=count_flops(model, input_shape),
        latency_ms=asdict(lat),
        peak_memory_mb=measure_peak_memory(model, input_shape),
        batch_size=input_shape[0],
        input_shape=tuple(input_shape),
    )
