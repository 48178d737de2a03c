"""Network and market data model, instance file ingestion, synthetic instances.

All electrical quantities are per-unit; lines are stored undirected with both
directed views derived by consumers.  Every type is immutable after
construction, so instances can be shared freely across benchmark workers.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np

__all__ = [
    "Bus",
    "Line",
    "Network",
    "Block",
    "Buyer",
    "Seller",
    "MarketInstance",
    "ValidationError",
    "line_admittance",
    "load_instance",
    "save_instance",
    "instance_from_dict",
    "instance_to_dict",
    "generate_synthetic_instance",
]


class ValidationError(ValueError):
    """An instance invariant does not hold; the message names the first violation."""


def line_admittance(r: float, x: float) -> tuple[float, float]:
    """Series admittance (g, b) of a line with impedance r + jx.

    g = r / (r^2 + x^2), b = -x / (r^2 + x^2); zero impedance is rejected.
    """
    denom = r * r + x * x
    if denom == 0.0:
        raise ValidationError("line impedance (r, x) = (0, 0) has no admittance")
    return r / denom, -x / denom


@dataclass(frozen=True)
class Bus:
    id: str
    v_min: float
    v_max: float

    def __post_init__(self):
        if not (0.0 < self.v_min <= self.v_max):
            raise ValidationError(
                f"bus {self.id}: need 0 < v_min <= v_max, got [{self.v_min}, {self.v_max}]"
            )


@dataclass(frozen=True)
class Line:
    from_bus: str
    to_bus: str
    g: float
    b: float
    i_max: float

    def __post_init__(self):
        if self.from_bus == self.to_bus:
            raise ValidationError(f"line {self.from_bus}-{self.to_bus} is a self-loop")
        if self.i_max <= 0:
            raise ValidationError(
                f"line {self.from_bus}-{self.to_bus}: thermal rating must be positive"
            )
        if self.g == 0.0 and self.b == 0.0:
            raise ValidationError(
                f"line {self.from_bus}-{self.to_bus}: admittance must be nonzero"
            )
        for name in ("g", "b", "i_max"):
            if not math.isfinite(getattr(self, name)):
                raise ValidationError(f"line {self.from_bus}-{self.to_bus}: non-finite {name}")


@dataclass(frozen=True)
class Network:
    """Connected undirected power network with a unique reference bus."""

    buses: tuple[Bus, ...]
    lines: tuple[Line, ...]
    ref_bus: str
    index: dict[str, int] = field(init=False, repr=False, compare=False)
    neighbors: dict[str, tuple[str, ...]] = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        ids = [b.id for b in self.buses]
        if len(set(ids)) != len(ids):
            raise ValidationError("duplicate bus ids")
        object.__setattr__(self, "index", {bid: k for k, bid in enumerate(ids)})
        if self.ref_bus not in self.index:
            raise ValidationError(f"reference bus {self.ref_bus!r} does not exist")
        nbrs: dict[str, set[str]] = {bid: set() for bid in ids}
        seen: set[frozenset] = set()
        for ln in self.lines:
            for end in (ln.from_bus, ln.to_bus):
                if end not in self.index:
                    raise ValidationError(f"line references unknown bus {end!r}")
            key = frozenset((ln.from_bus, ln.to_bus))
            if key in seen:
                raise ValidationError(
                    f"undirected pair {ln.from_bus}-{ln.to_bus} appears more than once"
                )
            seen.add(key)
            nbrs[ln.from_bus].add(ln.to_bus)
            nbrs[ln.to_bus].add(ln.from_bus)
        object.__setattr__(
            self, "neighbors", {bid: tuple(sorted(s)) for bid, s in nbrs.items()}
        )
        if not self._connected():
            raise ValidationError("network graph is not connected")

    def _connected(self) -> bool:
        if not self.buses:
            return False
        seen = {self.buses[0].id}
        stack = [self.buses[0].id]
        while stack:
            v = stack.pop()
            for w in self.neighbors[v]:
                if w not in seen:
                    seen.add(w)
                    stack.append(w)
        return len(seen) == len(self.buses)

    @property
    def n_buses(self) -> int:
        return len(self.buses)

    def bus(self, bus_id: str) -> Bus:
        return self.buses[self.index[bus_id]]

    def directed_lines(self):
        """Yield (v, w, line) for both orientations of every line."""
        for ln in self.lines:
            yield ln.from_bus, ln.to_bus, ln
            yield ln.to_bus, ln.from_bus, ln

    def adjacency(self) -> dict[int, set[int]]:
        """Adjacency over integer bus indices (for graph algorithms)."""
        adj: dict[int, set[int]] = {k: set() for k in range(self.n_buses)}
        for ln in self.lines:
            a, b = self.index[ln.from_bus], self.index[ln.to_bus]
            adj[a].add(b)
            adj[b].add(a)
        return adj


@dataclass(frozen=True)
class Block:
    """One bid/offer block: a quantity at a single price."""

    size: float
    price: float

    def __post_init__(self):
        if self.size < 0:
            raise ValidationError(f"block size must be >= 0, got {self.size}")


def _check_blocks(blocks, periods, who):
    if len(blocks) != periods:
        raise ValidationError(
            f"{who}: expected {periods} per-period block lists, got {len(blocks)}"
        )


@dataclass(frozen=True)
class Buyer:
    bus: str
    p_min: float
    p_max: float
    q_min: float
    q_max: float
    blocks: tuple[tuple[Block, ...], ...]  # one tuple per period

    def __post_init__(self):
        if self.p_min > self.p_max:
            raise ValidationError(f"buyer at {self.bus}: p_min > p_max")
        if self.q_min > self.q_max:
            raise ValidationError(f"buyer at {self.bus}: q_min > q_max")


@dataclass(frozen=True)
class Seller:
    bus: str
    p_min: float
    p_max: float
    q_min: float
    q_max: float
    blocks: tuple[tuple[Block, ...], ...]
    no_load_cost: float
    min_uptime: int

    def __post_init__(self):
        if self.p_min > self.p_max:
            raise ValidationError(f"seller at {self.bus}: p_min > p_max")
        if self.q_min > self.q_max:
            raise ValidationError(f"seller at {self.bus}: q_min > q_max")
        if self.no_load_cost < 0:
            raise ValidationError(f"seller at {self.bus}: no-load cost must be >= 0")
        if self.min_uptime < 1:
            raise ValidationError(f"seller at {self.bus}: min uptime must be >= 1")


@dataclass(frozen=True)
class MarketInstance:
    network: Network
    buyers: tuple[Buyer, ...]
    sellers: tuple[Seller, ...]
    periods: int

    def __post_init__(self):
        if self.periods < 1:
            raise ValidationError("periods must be >= 1")
        if not self.buyers:
            raise ValidationError("instance has no buyers")
        if not self.sellers:
            raise ValidationError("instance has no sellers")
        for who, group in (("buyer", self.buyers), ("seller", self.sellers)):
            for p in group:
                if p.bus not in self.network.index:
                    raise ValidationError(f"{who} references unknown bus {p.bus!r}")
                _check_blocks(p.blocks, self.periods, f"{who} at {p.bus}")


# -- JSON ingestion ----------------------------------------------------------


def _blocks_from_json(raw, periods, who):
    out = []
    for per in raw:
        out.append(tuple(Block(float(b["size"]), float(b["price"])) for b in per))
    blocks = tuple(out)
    _check_blocks(blocks, periods, who)
    return blocks


def instance_from_dict(doc: dict) -> MarketInstance:
    """Build and validate a MarketInstance from the JSON document structure."""
    try:
        buses = tuple(
            Bus(str(b["id"]), float(b["v_min"]), float(b["v_max"])) for b in doc["buses"]
        )
        periods = int(doc["periods"])
        lines = []
        for ln in doc["lines"]:
            if "g" in ln or "b" in ln:
                g, b = float(ln["g"]), float(ln["b"])
            else:
                g, b = line_admittance(float(ln["r"]), float(ln["x"]))
            lines.append(Line(str(ln["from"]), str(ln["to"]), g, b, float(ln["i_max"])))
        network = Network(buses, tuple(lines), str(doc["ref_bus"]))
        buyers = tuple(
            Buyer(
                str(u["bus"]),
                float(u["p_min"]),
                float(u["p_max"]),
                float(u["q_min"]),
                float(u["q_max"]),
                _blocks_from_json(u["blocks"], periods, f"buyer at {u['bus']}"),
            )
            for u in doc["buyers"]
        )
        sellers = tuple(
            Seller(
                str(u["bus"]),
                float(u["p_min"]),
                float(u["p_max"]),
                float(u["q_min"]),
                float(u["q_max"]),
                _blocks_from_json(u["blocks"], periods, f"seller at {u['bus']}"),
                float(u["no_load_cost"]),
                int(u["min_uptime"]),
            )
            for u in doc["sellers"]
        )
    except (KeyError, TypeError) as exc:
        raise ValidationError(f"malformed instance document: {exc!r}") from exc
    return MarketInstance(network, buyers, sellers, periods)


def instance_to_dict(instance: MarketInstance) -> dict:
    def participant(u):
        d = {
            "bus": u.bus,
            "p_min": u.p_min,
            "p_max": u.p_max,
            "q_min": u.q_min,
            "q_max": u.q_max,
            "blocks": [[{"size": b.size, "price": b.price} for b in per] for per in u.blocks],
        }
        if isinstance(u, Seller):
            d["no_load_cost"] = u.no_load_cost
            d["min_uptime"] = u.min_uptime
        return d

    net = instance.network
    return {
        "buses": [{"id": b.id, "v_min": b.v_min, "v_max": b.v_max} for b in net.buses],
        "lines": [
            {"from": ln.from_bus, "to": ln.to_bus, "g": ln.g, "b": ln.b, "i_max": ln.i_max}
            for ln in net.lines
        ],
        "ref_bus": net.ref_bus,
        "periods": instance.periods,
        "buyers": [participant(u) for u in instance.buyers],
        "sellers": [participant(u) for u in instance.sellers],
    }


def load_instance(path) -> MarketInstance:
    """Load and validate an instance file (JSON schema in the README)."""
    with open(path) as fh:
        try:
            doc = json.load(fh)
        except json.JSONDecodeError as exc:
            raise ValidationError(f"cannot parse {path}: {exc}") from exc
    return instance_from_dict(doc)


def save_instance(instance: MarketInstance, path):
    with open(path, "w") as fh:
        json.dump(instance_to_dict(instance), fh, indent=1)
        fh.write("\n")


# -- synthetic instances -----------------------------------------------------

# Parameter ranges for the generator, chosen so every relaxation stays
# feasible at desk scale: impedances and ratings in typical per-unit bands,
# flat voltage windows, small no-load costs relative to trade surplus.
_R_RANGE = (0.005, 0.05)
_X_RANGE = (0.02, 0.2)
_IMAX_RANGE = (0.5, 3.0)
_V_MIN, _V_MAX = 0.95, 1.05
_BUYER_PRICE = (20.0, 60.0)
_SELLER_PRICE = (5.0, 40.0)
_BLOCK_SIZE = (0.1, 1.0)
_SELLER_FRACTION = 0.15
_BUYER_FRACTION = 0.65


def _random_edges(rng: np.random.Generator, n: int):
    """Random spanning tree plus ceil(0.35 n) distinct extra edges."""
    order = rng.permutation(n)
    edges = set()
    for k in range(1, n):
        parent = order[rng.integers(0, k)]
        edges.add((min(order[k], parent), max(order[k], parent)))
    extra = math.ceil(0.35 * n)
    all_pairs = n * (n - 1) // 2
    budget = min(extra, all_pairs - len(edges))
    while budget > 0:
        a = int(rng.integers(0, n))
        b = int(rng.integers(0, n))
        if a == b:
            continue
        e = (min(a, b), max(a, b))
        if e in edges:
            continue
        edges.add(e)
        budget -= 1
    return sorted(edges)


def _price_blocks(rng, count, price_range, descending):
    sizes = rng.uniform(*_BLOCK_SIZE, size=count)
    prices = np.sort(rng.uniform(*price_range, size=count))
    if descending:
        prices = prices[::-1]
    return tuple(Block(float(s), float(p)) for s, p in zip(sizes, prices))


def generate_synthetic_instance(
    n_buses: int, seed: int, periods: int = 1
) -> MarketInstance:
    """Deterministic random meshed instance: tree + 35% extra edges.

    Roughly 15% of buses host a seller and 65% a buyer (at least one of
    each is forced), with monotone block curves.  Identical (n, seed) calls
    return identical instances.
    """
    if n_buses < 2:
        raise ValidationError("need at least 2 buses")
    rng = np.random.default_rng(seed)
    width = len(str(n_buses - 1))
    ids = [f"b{str(k).zfill(width)}" for k in range(n_buses)]
    buses = tuple(Bus(bid, _V_MIN, _V_MAX) for bid in ids)

    lines = []
    for a, b in _random_edges(rng, n_buses):
        r = rng.uniform(*_R_RANGE)
        x = rng.uniform(*_X_RANGE)
        g, susc = line_admittance(float(r), float(x))
        lines.append(Line(ids[a], ids[b], g, susc, float(rng.uniform(*_IMAX_RANGE))))
    network = Network(buses, tuple(lines), ids[0])

    buyers, sellers = [], []
    roll = rng.uniform(size=(n_buses, 2))
    for k, bid in enumerate(ids):
        if roll[k, 0] < _SELLER_FRACTION:
            sellers.append(k)
        if roll[k, 1] < _BUYER_FRACTION:
            buyers.append(k)
    if not sellers:
        sellers.append(0)
    if not buyers:
        buyers.append(n_buses - 1)

    def make_buyer(k):
        per = tuple(
            _price_blocks(rng, int(rng.integers(2, 5)), _BUYER_PRICE, descending=True)
            for _ in range(periods)
        )
        cap = max(sum(b.size for b in blocks) for blocks in per)
        return Buyer(ids[k], 0.0, cap, 0.0, 0.3 * cap, per)

    def make_seller(k):
        per = tuple(
            _price_blocks(rng, int(rng.integers(2, 5)), _SELLER_PRICE, descending=False)
            for _ in range(periods)
        )
        cap = max(sum(b.size for b in blocks) for blocks in per)
        uptime = int(rng.integers(1, min(3, periods) + 1))
        return Seller(
            ids[k],
            0.0,
            cap,
            -0.6 * cap,
            0.6 * cap,
            per,
            float(rng.uniform(0.5, 3.0)),
            uptime,
        )

    buyer_objs = tuple(make_buyer(k) for k in sorted(set(buyers)))
    seller_objs = tuple(make_seller(k) for k in sorted(set(sellers)))
    return MarketInstance(network, buyer_objs, seller_objs, periods)
