"""Roofline estimate of decoding latency for N concurrent thinkers."""

from __future__ import annotations

import math
from collections.abc import Mapping
from dataclasses import asdict, dataclass

from .scheduler import GroupConfig, Mode


@dataclass(frozen=True)
class HardwareProfile:
    """Accelerator and model figures; all user-supplied.

    ``kv_bytes_per_token`` adds KV-cache reads to the memory term (per cached
    token per thinker); it defaults to 0 so weights alone set the floor.
    """

    mem_bandwidth: float
    compute: float
    weight_bytes: float
    flops_per_token: float
    kv_bytes_per_token: float = 0.0

    def __post_init__(self) -> None:
        for name in ("mem_bandwidth", "compute", "weight_bytes", "flops_per_token"):
            value = getattr(self, name)
            if not value > 0:
                raise ValueError(f"{name} must be positive, got {value}")
        if not self.kv_bytes_per_token >= 0:
            raise ValueError("kv_bytes_per_token must be >= 0")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: Mapping) -> HardwareProfile:
        known = {"mem_bandwidth", "compute", "weight_bytes", "flops_per_token", "kv_bytes_per_token"}
        extra = set(d) - known
        if extra:
            raise ValueError(f"unknown hardware fields: {sorted(extra)}")
        return cls(**{k: float(v) for k, v in d.items()})


def _check_batch(batch: int) -> None:
    if isinstance(batch, bool) or int(batch) != batch or batch < 1:
        raise ValueError(f"batch must be a positive integer, got {batch!r}")


def memory_time(p: HardwareProfile, batch: int = 1, context_tokens: int = 0) -> float:
    return (p.weight_bytes + batch * context_tokens * p.kv_bytes_per_token) / p.mem_bandwidth


def compute_time(p: HardwareProfile, batch: int) -> float:
    return batch * p.flops_per_token / p.compute


def crossover_batch(p: HardwareProfile) -> float:
    """Batch size where weight traffic and compute take equally long:
    ``(weight_bytes * compute) / (mem_bandwidth * flops_per_token)``."""
    # evaluated as a ratio of the two step times, which is also what
    # step_latency compares against
    return memory_time(p) / (p.flops_per_token / p.compute)


def step_latency(p: HardwareProfile, batch: int, context_tokens: int = 0) -> float:
    """Seconds for one decoding step producing ``batch`` tokens.

    At or below the crossover the memory term is returned as is, so the
    plateau is exact rather than subject to rounding in the compute term.
    Above it the result is strictly larger than the memory term, by at most
    one ulp when the two terms round to the same value.
    """
    _check_batch(batch)
    if context_tokens < 0:
        raise ValueError("context_tokens must be >= 0")
    mem = memory_time(p, batch, context_tokens)
    if context_tokens:
        return max(mem, compute_time(p, batch))
    if batch <= crossover_batch(p):
        return mem
    # past the crossover the exact compute term is larger; keep that ordering
    # when both terms round to the same double
    return max(compute_time(p, batch), math.nextafter(mem, math.inf))


def total_latency(cfg: GroupConfig, p: HardwareProfile, k: int) -> float:
    """Wall-clock estimate for every thinker to emit ``k`` tokens."""
    if not 0 <= k <= cfg.budget:
        raise ValueError(f"k must lie in 0..{cfg.budget}, got {k}")
    n = cfg.n_agents
    if cfg.mode is Mode.GROUP_THINK_INTERLEAVED:
        # one token per forward pass, agents in turn
        return k * n * step_latency(p, 1)
    if cfg.mode is Mode.SINGLE_COT:
        return k * step_latency(p, 1)
    return k * step_latency(p, n)


def plateau_end(p: HardwareProfile) -> int:
    """Largest integer batch still on the memory-bound plateau."""
    return max(1, math.floor(crossover_batch(p)))
