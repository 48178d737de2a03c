"""Sobol sampling and empirical angle-difference bound estimation.

Voltage configurations are sampled per connected subgraph of roughly a dozen
buses (Sobol sequences lose their low-discrepancy edge in high dimension),
flows are evaluated with the polar equations, samples violating a line's
thermal limit are dropped for that line, and the surviving angle differences
give per-line bounds for the QC envelopes.

Each subgraph draws from its own offset block of the unscrambled Sobol
sequence, so results are deterministic for a fixed seed and the per-subgraph
streams are distinct.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.stats import qmc as scipy_qmc

from .netmodel import MarketInstance, Network
from .relax import AngleBounds, LineBounds, VoltageProfile

__all__ = [
    "SobolConfig",
    "SampleReport",
    "EmptyFeasibleSetError",
    "sobol",
    "partition_subgraphs",
    "sample_bounds_global",
    "sample_bounds_local",
]

_HALF_PI = math.pi / 2
_WRAP_MARGIN = 1e-9
MAX_SOBOL_DIM = 64


class EmptyFeasibleSetError(RuntimeError):
    """No sample on some line satisfied the thermal filter."""

    def __init__(self, line_key):
        super().__init__(
            f"no feasible samples for line {line_key[0]}-{line_key[1]}; "
            "raise the sample count or widen the limits"
        )
        self.line_key = line_key


@dataclass(frozen=True)
class SobolConfig:
    dimension: int
    log2_samples: int
    seed: int = 0

    def __post_init__(self):
        if not 1 <= self.dimension <= MAX_SOBOL_DIM:
            raise ValueError(f"dimension must be in [1, {MAX_SOBOL_DIM}]")
        if self.log2_samples < 0:
            raise ValueError("log2_samples must be >= 0")


def sobol(config: SobolConfig) -> np.ndarray:
    """2^log2_samples points of the unscrambled Sobol sequence in [0, 1]^d.

    The all-zeros origin is always skipped; ``seed`` selects consecutive
    blocks of the standard sequence, so seed 0 starts at the first nonzero
    element.
    """
    n = 1 << config.log2_samples
    engine = scipy_qmc.Sobol(d=config.dimension, scramble=False)
    engine.fast_forward(1 + config.seed * n)
    return engine.random(n)


def partition_subgraphs(network: Network, target_size: int = 12) -> list[list[int]]:
    """BFS peeling into connected, disjoint, covering parts of <= target size."""
    adj = network.adjacency()
    unvisited = set(adj)
    parts: list[list[int]] = []
    while unvisited:
        start = min(unvisited)
        part = [start]
        unvisited.discard(start)
        frontier = [start]
        while frontier and len(part) < target_size:
            nxt = []
            for v in frontier:
                for w in sorted(adj[v]):
                    if w in unvisited and len(part) < target_size:
                        unvisited.discard(w)
                        part.append(w)
                        nxt.append(w)
            frontier = nxt
        parts.append(part)
    return parts


@dataclass
class SampleReport:
    """Per-line feasible counts and per-subgraph sampling totals."""

    method: str
    log2_samples: int
    seed: int
    feasible: dict = field(default_factory=dict)  # (from, to) -> count
    subgraph_totals: dict = field(default_factory=dict)  # part index -> samples
    subgraph_rejected: dict = field(default_factory=dict)
    eps_v: float | None = None
    eps_theta: float | None = None


def _wrap(delta: np.ndarray) -> np.ndarray:
    """arctan(tan(.)) wrap into (-pi/2, pi/2), nudged off the endpoints."""
    return np.clip(
        np.arctan(np.tan(delta)), -_HALF_PI + _WRAP_MARGIN, _HALF_PI - _WRAP_MARGIN
    )


def _polar_flow(mag_v, mag_w, dtheta, g, b):
    cos_d, sin_d = np.cos(dtheta), np.sin(dtheta)
    p = mag_v**2 * g - mag_v * mag_w * (g * cos_d + b * sin_d)
    q = -(mag_v**2) * b - mag_v * mag_w * (g * sin_d - b * cos_d)
    return p, q


def _extract_bounds(instance, mag, ang, part_of, report):
    """Filter per line on the thermal limit and min/max the survivors."""
    net = instance.network
    lines = {}
    for line in net.lines:
        kv, kw = net.index[line.from_bus], net.index[line.to_bus]
        dtheta = _wrap(ang[kv] - ang[kw])
        p, q = _polar_flow(mag[kv], mag[kw], dtheta, line.g, line.b)
        limit = line.i_max * net.bus(line.from_bus).v_min
        keep = np.hypot(p, q) <= limit
        key = (line.from_bus, line.to_bus)
        count = int(np.count_nonzero(keep))
        report.feasible[key] = count
        part = part_of[kv]
        report.subgraph_rejected[part] = report.subgraph_rejected.get(part, 0) + (
            len(keep) - count
        )
        if count == 0:
            raise EmptyFeasibleSetError(key)
        kept = dtheta[keep]
        sin_k, cos_k = np.sin(kept), np.cos(kept)
        lines[key] = LineBounds(
            dtheta_lo=float(kept.min()),
            dtheta_hi=float(kept.max()),
            cos_lo=float(cos_k.min()),
            cos_hi=float(cos_k.max()),
            sin_lo=float(sin_k.min()),
            sin_hi=float(sin_k.max()),
        )
    return AngleBounds(lines)


def _per_part_samples(instance, log2_samples, seed):
    """Sobol points per subgraph mapped to column pairs of each member bus."""
    net = instance.network
    parts = partition_subgraphs(net)
    n = 1 << log2_samples
    part_of = {}
    xi_of = {}
    col_of = {}
    for pi, part in enumerate(parts):
        members = sorted(part)
        config = SobolConfig(
            dimension=2 * len(members), log2_samples=log2_samples, seed=seed + pi
        )
        xi = sobol(config)
        for k, v in enumerate(members):
            part_of[v] = pi
            xi_of[v] = xi
            col_of[v] = 2 * k
    return parts, n, part_of, xi_of, col_of


def sample_bounds_global(
    instance: MarketInstance, log2_samples: int, seed: int
) -> tuple[AngleBounds, SampleReport]:
    """Bounds from voltage configurations over the full admissible ranges.

    Magnitudes map onto [v_min, v_max], angles onto [-pi, pi); differences are
    wrapped into (-pi/2, pi/2) before flows are evaluated.
    """
    net = instance.network
    parts, n, part_of, xi_of, col_of = _per_part_samples(instance, log2_samples, seed)
    report = SampleReport(
        method="global",
        log2_samples=log2_samples,
        seed=seed,
        subgraph_totals={pi: n for pi in range(len(parts))},
    )
    mag, ang = {}, {}
    for bus in net.buses:
        k = net.index[bus.id]
        xi = xi_of[k]
        c = col_of[k]
        mag[k] = bus.v_min + xi[:, c] * (bus.v_max - bus.v_min)
        ang[k] = math.pi * (2.0 * xi[:, c + 1] - 1.0)
    bounds = _extract_bounds(instance, mag, ang, part_of, report)
    return bounds, report


def sample_bounds_local(
    instance: MarketInstance,
    profile: VoltageProfile,
    *,
    eps_v: float = 0.1,
    eps_theta: float = 0.15,
    log2_samples: int = 6,
    seed: int = 0,
) -> tuple[AngleBounds, SampleReport]:
    """Bounds from a neighborhood of a solved voltage profile.

    Magnitude offsets scale half the admissible window by eps_v (one-sided,
    then clamped into the window); angle offsets span eps_theta * pi both
    ways.  Multi-period profiles pool their kept samples per line.
    """
    net = instance.network
    parts, n, part_of, xi_of, col_of = _per_part_samples(instance, log2_samples, seed)
    report = SampleReport(
        method="local",
        log2_samples=log2_samples,
        seed=seed,
        subgraph_totals={pi: n * profile.periods for pi in range(len(parts))},
        eps_v=eps_v,
        eps_theta=eps_theta,
    )
    mags = profile.magnitudes()
    angs = profile.angles()
    mag, ang = {}, {}
    for bus in net.buses:
        k = net.index[bus.id]
        xi = xi_of[k]
        c = col_of[k]
        mag_rows, ang_rows = [], []
        for t in range(profile.periods):
            m = mags[t, k] + eps_v * xi[:, c] * 0.5 * (bus.v_max - bus.v_min)
            mag_rows.append(np.clip(m, bus.v_min, bus.v_max))
            ang_rows.append(angs[t, k] + eps_theta * math.pi * (2.0 * xi[:, c + 1] - 1.0))
        mag[k] = np.concatenate(mag_rows)
        ang[k] = np.concatenate(ang_rows)
    bounds = _extract_bounds(instance, mag, ang, part_of, report)
    return bounds, report
