"""Subnetwork sampling, physical-accuracy metrics, and the benchmark harness.

One benchmark row is one (relaxation, subnetwork) measurement: welfare and
penalty, solver and total wall time, peak resident-memory growth over the
build+solve span, current phasor error, and thermal violation (both RMS over
directed lines and periods).  Rows accumulate into a CSV; a second CSV holds
per-(relaxation, size) means.
"""

from __future__ import annotations

import csv
import math
import threading
import time
from dataclasses import dataclass

import numpy as np
import psutil

from .conic import BackendConfig
from .market import MarketSolution, SolveFailure, solve_with_commitment_rounding
from .netmodel import MarketInstance, Network
from .relax import VoltageProfile

__all__ = [
    "BenchRecord",
    "CSV_COLUMNS",
    "sample_connected_subnetwork",
    "phasor_error_rms",
    "thermal_violation_rms",
    "run_benchmark",
    "PeakRssSampler",
]

CSV_COLUMNS = [
    "relaxation",
    "size",
    "sample",
    "status",
    "welfare",
    "penalty",
    "solver_time_s",
    "total_time_s",
    "peak_mem_bytes",
    "phasor_rms",
    "thermal_rms",
    "rank_ratio",
]


@dataclass
class BenchRecord:
    relaxation: str
    size: int
    sample: int
    status: str
    welfare: float | None
    penalty: float | None
    solver_time_s: float | None
    total_time_s: float | None
    peak_mem_bytes: int | None
    phasor_rms: float | None
    thermal_rms: float | None
    rank_ratio: float | None

    def row(self) -> list:
        def cell(x):
            if x is None or (isinstance(x, float) and not math.isfinite(x)):
                return ""
            return x

        return [cell(getattr(self, col)) for col in CSV_COLUMNS]


def sample_connected_subnetwork(instance: MarketInstance, n: int, seed: int) -> MarketInstance:
    """Randomly grown connected subnetwork with at least one buyer and seller.

    Starting from a random bus, uniformly chosen neighbors of the current set
    are added until it holds n buses; only internal lines survive.  Samples
    without both market sides are rejected and redrawn from a derived seed.
    """
    net = instance.network
    if not 1 <= n <= net.n_buses:
        raise ValueError(f"target size {n} outside [1, {net.n_buses}]")
    if not instance.sellers or not instance.buyers:
        raise ValueError("base instance lacks a market side; no viable subnetwork")

    for attempt in range(1000):
        rng = np.random.default_rng([seed, attempt])
        ids = [b.id for b in net.buses]
        chosen = {ids[rng.integers(0, len(ids))]}
        while len(chosen) < n:
            frontier = sorted(
                {w for v in chosen for w in net.neighbors[v]} - chosen
            )
            chosen.add(frontier[rng.integers(0, len(frontier))])
        buyers = tuple(b for b in instance.buyers if b.bus in chosen)
        sellers = tuple(s for s in instance.sellers if s.bus in chosen)
        if not buyers or not sellers:
            continue
        buses = tuple(b for b in net.buses if b.id in chosen)
        lines = tuple(
            ln for ln in net.lines if ln.from_bus in chosen and ln.to_bus in chosen
        )
        ref = net.ref_bus if net.ref_bus in chosen else min(chosen)
        return MarketInstance(
            Network(buses, lines, ref), buyers, sellers, instance.periods
        )
    raise RuntimeError(f"no viable subnetwork of size {n} found after 1000 attempts")


def phasor_error_rms(
    p_flow: dict, q_flow: dict, profile: VoltageProfile, network: Network
) -> float:
    """RMS gap between voltage-implied and flow-implied line currents.

    For each directed line and period the current from Ohm's law,
    Y (V_v - V_w), is compared against the current implied by the solved
    flow, conj((p + jq) / V_v).
    """
    errors = []
    for t in range(profile.periods):
        for v_id, w_id, line in network.directed_lines():
            kv, kw = network.index[v_id], network.index[w_id]
            volt_v = profile.values[t, kv]
            if abs(volt_v) < 1e-9:
                raise ValueError(f"voltage magnitude at {v_id} below 1e-9")
            admittance = complex(line.g, line.b)
            i_volt = admittance * (volt_v - profile.values[t, kw])
            s = complex(p_flow[v_id, w_id, t], q_flow[v_id, w_id, t])
            i_flow = np.conj(s / volt_v)
            errors.append(abs(i_volt - i_flow) ** 2)
    return float(math.sqrt(np.mean(errors)))


def thermal_violation_rms(
    p_flow: dict, q_flow: dict, network: Network, periods: int
) -> float:
    """RMS of max(0, |S| - i_max * v_min) over directed lines and periods."""
    violations = []
    for t in range(periods):
        for v_id, w_id, line in network.directed_lines():
            limit = line.i_max * network.bus(v_id).v_min
            mag = math.hypot(p_flow[v_id, w_id, t], q_flow[v_id, w_id, t])
            violations.append(max(0.0, mag - limit) ** 2)
    return float(math.sqrt(np.mean(violations)))


class PeakRssSampler:
    """High-water mark of resident memory growth over a code span.

    A sampling thread polls the process RSS; the result is the peak minus the
    baseline at entry, floored at zero.  Exact mechanism is adapter-level;
    rows measured this way should run serially.
    """

    def __init__(self, interval_s: float = 0.002):
        self.interval_s = interval_s
        self.peak_bytes = 0

    def __enter__(self):
        proc = psutil.Process()
        self._baseline = proc.memory_info().rss
        self._peak = self._baseline
        self._stop = threading.Event()

        def poll():
            while not self._stop.is_set():
                rss = proc.memory_info().rss
                if rss > self._peak:
                    self._peak = rss
                self._stop.wait(self.interval_s)

        self._thread = threading.Thread(target=poll, daemon=True)
        self._thread.start()
        return self

    def __exit__(self, *exc):
        self._stop.set()
        self._thread.join()
        rss = psutil.Process().memory_info().rss
        self._peak = max(self._peak, rss)
        self.peak_bytes = max(0, self._peak - self._baseline)
        return False


def _measure_row(sub, size, sample, tag, backend, merge_fraction, qc_log2n, seed):
    t0 = time.perf_counter()
    try:
        with PeakRssSampler() as mem:
            solution: MarketSolution = solve_with_commitment_rounding(
                sub,
                tag,
                backend,
                merge_fraction=merge_fraction,
                qc_log2n=qc_log2n,
                qc_seed=seed,
            )
            phasor = phasor_error_rms(
                solution.p_flow, solution.q_flow, solution.voltages, sub.network
            )
            thermal = thermal_violation_rms(
                solution.p_flow, solution.q_flow, sub.network, sub.periods
            )
        total = time.perf_counter() - t0
        return BenchRecord(
            relaxation=tag,
            size=size,
            sample=sample,
            status=solution.status + ("-fallback" if solution.fallback else ""),
            welfare=solution.welfare,
            penalty=solution.penalty,
            solver_time_s=solution.solver_time_s,
            total_time_s=total,
            peak_mem_bytes=mem.peak_bytes,
            phasor_rms=phasor,
            thermal_rms=thermal,
            rank_ratio=solution.rank_ratio,
        )
    except SolveFailure as exc:
        total = time.perf_counter() - t0
        status = exc.report.status if exc.report is not None else "error"
        return BenchRecord(
            relaxation=tag,
            size=size,
            sample=sample,
            status=f"failed-stage{exc.stage}-{status}",
            welfare=None,
            penalty=None,
            solver_time_s=None,
            total_time_s=total,
            peak_mem_bytes=None,
            phasor_rms=None,
            thermal_rms=None,
            rank_ratio=None,
        )


def run_benchmark(
    instance: MarketInstance,
    sizes: list[int],
    relaxations: list[str],
    out_path,
    *,
    batch: int = 10,
    backend: BackendConfig | None = None,
    seed: int = 0,
    merge_fraction: float = 0.1,
    qc_log2n: int = 6,
    summary_path=None,
    progress=None,
) -> list[BenchRecord]:
    """Full protocol: per size, sample ``batch`` subnetworks, run every
    relaxation on each, append rows, and write the CSV plus a per-size mean
    summary.  Individual failures become rows; the run continues.

    Subnetwork seeds derive as seed XOR size XOR sample index.
    """
    backend = backend or BackendConfig()
    records: list[BenchRecord] = []
    for size in sizes:
        if size > instance.network.n_buses:
            raise ValueError(f"size {size} exceeds network ({instance.network.n_buses})")
        for sample in range(batch):
            sub_seed = seed ^ size ^ sample
            sub = sample_connected_subnetwork(instance, size, sub_seed)
            for tag in relaxations:
                record = _measure_row(
                    sub, size, sample, tag, backend, merge_fraction, qc_log2n, sub_seed
                )
                records.append(record)
                if progress is not None:
                    progress(record)

    with open(out_path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(CSV_COLUMNS)
        for record in records:
            writer.writerow(record.row())

    summary_path = summary_path or _default_summary_path(out_path)
    _write_summary(records, summary_path)
    return records


def _default_summary_path(out_path):
    text = str(out_path)
    return (text[:-4] if text.endswith(".csv") else text) + "_summary.csv"


def _write_summary(records: list[BenchRecord], path):
    numeric = CSV_COLUMNS[4:]
    groups: dict[tuple[str, int], list[BenchRecord]] = {}
    for record in records:
        groups.setdefault((record.relaxation, record.size), []).append(record)
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["relaxation", "size", "rows", "failures"] + numeric)
        for (tag, size), rows in sorted(groups.items()):
            ok = [r for r in rows if r.welfare is not None]
            cells = [tag, size, len(rows), len(rows) - len(ok)]
            for col in numeric:
                vals = [getattr(r, col) for r in ok if getattr(r, col) is not None]
                cells.append(float(np.mean(vals)) if vals else "")
            writer.writerow(cells)
