"""Constraint emitters and voltage reconstructors for DC, Shor SDP, Jabr
SOCP, and QC formulations.

Conventions shared by every emitter:

* flow-definition equalities are widened into two-sided inequalities with the
  eps_p / eps_q tolerances, so "equality" rows always come in pairs;
* thermal limits are soft, scaled by ``(1 + i_viol * beta_i)`` with one
  violation variable per undirected line;
* Jabr/QC pairwise variables are stored once per undirected line in the
  stored orientation, and a direction flip negates the sine-like quantity
  structurally instead of via extra constraints.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np

from .conic import ConicProgram, LinExpr, as_expr
from .netmodel import MarketInstance, Network

__all__ = [
    "AngleBounds",
    "LineBounds",
    "VoltageProfile",
    "DegenerateMatrixError",
    "MissingBoundsError",
    "EnvelopeDomainError",
    "DcHandles",
    "ShorHandles",
    "JabrHandles",
    "QcHandles",
    "emit_dc",
    "emit_shor_real",
    "emit_jabr",
    "emit_qc",
    "envelope_sin",
    "envelope_cos",
    "envelope_sq",
    "envelope_mccormick",
    "reconstruct_dc",
    "reconstruct_dc_profile",
    "reconstruct_shor",
    "reconstruct_jabr",
    "reconstruct_jabr_profile",
    "load_bounds",
    "save_bounds",
]

_HALF_PI = math.pi / 2


class DegenerateMatrixError(ValueError):
    """The lifted matrix has no positive dominant eigenvalue."""


class MissingBoundsError(KeyError):
    """A line has no angle-difference bounds."""


class EnvelopeDomainError(ValueError):
    """Envelope interval is empty or outside the admissible range."""


@dataclass(frozen=True)
class LineBounds:
    """Angle-difference interval and its trigonometric ranges for one line."""

    dtheta_lo: float
    dtheta_hi: float
    cos_lo: float
    cos_hi: float
    sin_lo: float
    sin_hi: float

    def __post_init__(self):
        if not self.dtheta_lo <= self.dtheta_hi:
            raise ValueError("dtheta_lo > dtheta_hi")
        if not (-_HALF_PI < self.dtheta_lo and self.dtheta_hi < _HALF_PI):
            raise ValueError("angle bounds must lie inside (-pi/2, pi/2)")
        if not (0.0 < self.cos_lo <= self.cos_hi <= 1.0 + 1e-12):
            raise ValueError("cosine bounds inconsistent with the angle interval")
        if not (-1.0 <= self.sin_lo <= self.sin_hi <= 1.0):
            raise ValueError("sine bounds inconsistent")


@dataclass(frozen=True)
class AngleBounds:
    """Per-line bounds keyed by the stored (from, to) orientation."""

    lines: dict

    def for_line(self, from_bus: str, to_bus: str) -> LineBounds:
        try:
            return self.lines[(from_bus, to_bus)]
        except KeyError:
            raise MissingBoundsError(
                f"no angle bounds for line {from_bus}-{to_bus}"
            ) from None


def save_bounds(bounds: AngleBounds, path):
    doc = {
        f"{a}|{b}": {
            "dtheta_lo": lb.dtheta_lo,
            "dtheta_hi": lb.dtheta_hi,
            "cos_lo": lb.cos_lo,
            "cos_hi": lb.cos_hi,
            "sin_lo": lb.sin_lo,
            "sin_hi": lb.sin_hi,
        }
        for (a, b), lb in bounds.lines.items()
    }
    with open(path, "w") as fh:
        json.dump(doc, fh, indent=1, sort_keys=True)
        fh.write("\n")


def load_bounds(path) -> AngleBounds:
    with open(path) as fh:
        doc = json.load(fh)
    lines = {}
    for key, rec in doc.items():
        a, _, b = key.partition("|")
        lines[(a, b)] = LineBounds(**rec)
    return AngleBounds(lines)


@dataclass(frozen=True)
class VoltageProfile:
    """Complex bus voltages, one row per period.

    After reconstruction the reference bus entry is real with unit magnitude
    (up to numerical noise from the solve itself).
    """

    values: np.ndarray  # shape (periods, n_buses), complex

    @property
    def periods(self) -> int:
        return self.values.shape[0]

    def at(self, t: int, bus_index: int) -> complex:
        return complex(self.values[t, bus_index])

    def magnitudes(self) -> np.ndarray:
        return np.abs(self.values)

    def angles(self) -> np.ndarray:
        return np.angle(self.values)


# -- shared emission helpers -------------------------------------------------


def _flow_definition(program, flow_var, expr_terms, eps, tag):
    """|flow - expr| <= eps as a pair of inequalities."""
    program.add_le([(flow_var, 1.0)] + [(v, -c) for v, c in expr_terms], eps, tag=tag)
    program.add_le([(flow_var, -1.0)] + list(expr_terms), eps, tag=tag)


def _thermal_soc(instance, program, variables, tag="thermal-soc"):
    """||(p, q)|| <= i_max * v_min * (1 + i_viol * beta_i), both directions."""
    beta = variables.coefficients.beta_i
    net = instance.network
    for v_id, w_id, line in net.directed_lines():
        limit = line.i_max * net.bus(v_id).v_min
        key = (line.from_bus, line.to_bus)
        for t in range(instance.periods):
            iv = variables.i_viol[key, t]
            head = LinExpr(((iv, limit * beta),), limit)
            program.add_soc(
                head,
                [
                    as_expr(variables.p_flow[v_id, w_id, t]),
                    as_expr(variables.q_flow[v_id, w_id, t]),
                ],
                tag=tag,
            )


# -- DC approximation --------------------------------------------------------


@dataclass
class DcHandles:
    theta: dict  # (bus_id, t) -> var


def emit_dc(instance: MarketInstance, program: ConicProgram, variables) -> DcHandles:
    """Linearized flows p = B (theta_v - theta_w), zero reactive flow.

    The thermal limit degrades to |p| <= i_max (1 + i_viol beta_i) since the
    current magnitude is approximately |p| under flat voltages.
    """
    net = instance.network
    coef = variables.coefficients
    theta = {}
    for bus in net.buses:
        for t in range(instance.periods):
            theta[bus.id, t] = program.add_var(f"theta_{bus.id}t{t}")
    for t in range(instance.periods):
        program.set_bounds(theta[net.ref_bus, t], 0.0, 0.0)

    for v_id, w_id, line in net.directed_lines():
        for t in range(instance.periods):
            p = variables.p_flow[v_id, w_id, t]
            q = variables.q_flow[v_id, w_id, t]
            program.set_bounds(q, 0.0, 0.0)
            expr = [(theta[v_id, t], line.b), (theta[w_id, t], -line.b)]
            _flow_definition(program, p, expr, coef.eps_p, tag="flow-p")
            iv = variables.i_viol[(line.from_bus, line.to_bus), t]
            scaled = line.i_max * coef.beta_i
            program.add_le([(p, 1.0), (iv, -scaled)], line.i_max, tag="thermal-dc")
            program.add_le([(p, -1.0), (iv, -scaled)], line.i_max, tag="thermal-dc")
    return DcHandles(theta=theta)


def reconstruct_dc(theta: np.ndarray) -> np.ndarray:
    """Complex voltages (cos theta, sin theta) from solved phase angles."""
    theta = np.asarray(theta, dtype=float)
    return np.cos(theta) + 1j * np.sin(theta)


def reconstruct_dc_profile(instance, x, handles: DcHandles) -> VoltageProfile:
    net = instance.network
    rows = []
    for t in range(instance.periods):
        theta = np.array([x[handles.theta[bus.id, t]] for bus in net.buses])
        rows.append(reconstruct_dc(theta))
    return VoltageProfile(np.array(rows))


# -- Shor SDP (real-valued form) ----------------------------------------------


@dataclass
class ShorHandles:
    blocks: list  # one PsdBlock of dimension 2n per period


def _w_re_terms(block, kv, kw):
    # |V_v|^2 - Re(V_v conj(V_w)) in the interleaved (d, q) indexing
    return [
        (block.entry(2 * kv, 2 * kv), 1.0),
        (block.entry(2 * kv + 1, 2 * kv + 1), 1.0),
        (block.entry(2 * kv, 2 * kw), -1.0),
        (block.entry(2 * kv + 1, 2 * kw + 1), -1.0),
    ]


def _w_im_terms(block, kv, kw):
    return [
        (block.entry(2 * kv, 2 * kw + 1), 1.0),
        (block.entry(2 * kv + 1, 2 * kw), -1.0),
    ]


def emit_shor_real(instance: MarketInstance, program: ConicProgram, variables) -> ShorHandles:
    """One PSD block of dimension 2|V| per period with real (d, q) interleaving.

    Flows are linear in the block entries; the reference bus is pinned by
    zeroing its quadrature row and fixing the direct-axis square to one.
    """
    net = instance.network
    coef = variables.coefficients
    n = net.n_buses
    ref = net.index[net.ref_bus]
    blocks = []
    for t in range(instance.periods):
        block = program.add_psd_block(2 * n, f"W{t}")
        blocks.append(block)

        for v_id, w_id, line in net.directed_lines():
            kv, kw = net.index[v_id], net.index[w_id]
            g, b = line.g, line.b
            w_re = _w_re_terms(block, kv, kw)
            w_im = _w_im_terms(block, kv, kw)
            p_expr = [(var, g * c) for var, c in w_re] + [(var, b * c) for var, c in w_im]
            q_expr = [(var, -b * c) for var, c in w_re] + [(var, g * c) for var, c in w_im]
            _flow_definition(
                program, variables.p_flow[v_id, w_id, t], p_expr, coef.eps_p, tag="flow-p"
            )
            _flow_definition(
                program, variables.q_flow[v_id, w_id, t], q_expr, coef.eps_q, tag="flow-q"
            )

        for bus in net.buses:
            k = net.index[bus.id]
            diag = [
                (block.entry(2 * k, 2 * k), 1.0),
                (block.entry(2 * k + 1, 2 * k + 1), 1.0),
            ]
            program.add_le([(v, -c) for v, c in diag], -bus.v_min ** 2, tag="v-lo")
            program.add_le(diag, bus.v_max ** 2, tag="v-hi")

        program.add_eq([(block.entry(2 * ref, 2 * ref), 1.0)], 1.0, tag="ref")
        program.add_eq([(block.entry(2 * ref + 1, 2 * ref + 1), 1.0)], 0.0, tag="ref")
        for j in range(2 * n):
            if j == 2 * ref + 1:
                continue
            program.add_eq([(block.entry(2 * ref + 1, j), 1.0)], 0.0, tag="ref-q-row")

    _thermal_soc(instance, program, variables)
    return ShorHandles(blocks=blocks)


def reconstruct_shor(w: np.ndarray, ref_index: int):
    """Rank-one projection of a solved lifted matrix.

    Symmetrizes, takes the dominant eigenpair, interleaves (d, q) components
    into complex voltages, and rotates so the reference bus angle is zero.
    Returns (voltages, lambda2/lambda1).
    """
    w = np.asarray(w, dtype=float)
    w = 0.5 * (w + w.T)
    vals, vecs = np.linalg.eigh(w)
    lam1 = float(vals[-1])
    if lam1 <= 0:
        raise DegenerateMatrixError(f"dominant eigenvalue is {lam1:g}")
    lam2 = float(vals[-2]) if len(vals) > 1 else 0.0
    vec = math.sqrt(lam1) * vecs[:, -1]
    volts = vec[0::2] + 1j * vec[1::2]
    rotation = np.exp(-1j * np.angle(volts[ref_index]))
    return volts * rotation, max(lam2, 0.0) / lam1


# -- Jabr SOCP ----------------------------------------------------------------


@dataclass
class JabrHandles:
    c_diag: dict  # (bus_id, t) -> var, |V|^2 surrogate
    c: dict  # ((from, to), t) -> var in the stored orientation
    s: dict


def emit_jabr(instance: MarketInstance, program: ConicProgram, variables) -> JabrHandles:
    """Edge-based relaxation: c/s pairs per line tied by a rotated cone.

    Skew-symmetry of s is structural: the reverse direction reuses the stored
    variable with a negated coefficient.
    """
    net = instance.network
    coef = variables.coefficients
    c_diag, c_e, s_e = {}, {}, {}
    for bus in net.buses:
        for t in range(instance.periods):
            c_diag[bus.id, t] = program.add_var(
                f"c_{bus.id}{t}", lb=bus.v_min ** 2, ub=bus.v_max ** 2
            )
    for line in net.lines:
        key = (line.from_bus, line.to_bus)
        for t in range(instance.periods):
            c_e[key, t] = program.add_var(f"c_{key[0]}-{key[1]}t{t}")
            s_e[key, t] = program.add_var(f"s_{key[0]}-{key[1]}t{t}")
            program.add_rotated(
                c_diag[line.from_bus, t],
                c_diag[line.to_bus, t],
                [as_expr(c_e[key, t]), as_expr(s_e[key, t])],
                tag="jabr-cone",
            )

    for v_id, w_id, line in net.directed_lines():
        key = (line.from_bus, line.to_bus)
        sign = 1.0 if (v_id, w_id) == key else -1.0
        g, b = line.g, line.b
        for t in range(instance.periods):
            p_expr = [
                (c_diag[v_id, t], g),
                (c_e[key, t], -g),
                (s_e[key, t], -b * sign),
            ]
            q_expr = [
                (c_diag[v_id, t], -b),
                (s_e[key, t], -g * sign),
                (c_e[key, t], b),
            ]
            _flow_definition(
                program, variables.p_flow[v_id, w_id, t], p_expr, coef.eps_p, tag="flow-p"
            )
            _flow_definition(
                program, variables.q_flow[v_id, w_id, t], q_expr, coef.eps_q, tag="flow-q"
            )

    for t in range(instance.periods):
        program.add_eq([(c_diag[net.ref_bus, t], 1.0)], 1.0, tag="ref")

    _thermal_soc(instance, program, variables)
    return JabrHandles(c_diag=c_diag, c=c_e, s=s_e)


def reconstruct_jabr(c_diag: dict, c: dict, s: dict, network: Network, ref_bus: str):
    """Voltages from pairwise products via a BFS spanning tree from the reference.

    The child rule uses the parent-to-child orientation's (c, s); traversing a
    line against its stored orientation negates s.
    """
    for bus_id, val in c_diag.items():
        if val <= 0:
            raise DegenerateMatrixError(f"c_vv at bus {bus_id} is {val:g}, not positive")

    line_of = {}
    for (a, b), _ in c.items():
        line_of[a, b] = (a, b, 1.0)
        line_of[b, a] = (a, b, -1.0)

    volts = {ref_bus: 1.0 + 0.0j}
    queue = [ref_bus]
    while queue:
        v = queue.pop(0)
        for w in network.neighbors[v]:
            if w in volts:
                continue
            a, b, sign = line_of[v, w]
            c_val = c[a, b]
            s_val = sign * s[a, b]
            mag_v = abs(volts[v])
            mag_w = math.sqrt(c_val * c_val + s_val * s_val) / mag_v
            ang_w = np.angle(volts[v]) - math.atan2(s_val, c_val)
            volts[w] = mag_w * np.exp(1j * ang_w)
            queue.append(w)
    return np.array([volts[bus.id] for bus in network.buses])


def reconstruct_jabr_profile(instance, x, handles: JabrHandles) -> VoltageProfile:
    net = instance.network
    rows = []
    for t in range(instance.periods):
        c_diag = {bus.id: float(x[handles.c_diag[bus.id, t]]) for bus in net.buses}
        c_vals = {key: float(x[var]) for (key, tt), var in handles.c.items() if tt == t}
        s_vals = {key: float(x[var]) for (key, tt), var in handles.s.items() if tt == t}
        rows.append(reconstruct_jabr(c_diag, c_vals, s_vals, net, net.ref_bus))
    return VoltageProfile(np.array(rows))


# -- convex envelopes ---------------------------------------------------------


def _check_interval(lo, hi, trig: bool):
    if lo > hi:
        raise EnvelopeDomainError(f"empty interval [{lo}, {hi}]")
    if trig and not (-_HALF_PI < lo and hi < _HALF_PI):
        raise EnvelopeDomainError(
            f"interval [{lo}, {hi}] not inside (-pi/2, pi/2)"
        )


def _domain_rows(program, x, lo, hi, tag):
    x = as_expr(x)
    if lo == hi:
        program.add_eq(x, lo, tag=tag)
    else:
        program.add_le(x, hi, tag=tag)
        program.add_le(-x, -lo, tag=tag)


def envelope_sin(program: ConicProgram, x, z, lo: float, hi: float, tag="env-sin"):
    """Tangent-line envelope of sin over [lo, hi] inside (-pi/2, pi/2)."""
    _check_interval(lo, hi, trig=True)
    x, z = as_expr(x), as_expr(z)
    _domain_rows(program, x, lo, hi, tag)
    if lo == hi:
        program.add_eq(z, math.sin(lo), tag=tag)
        return
    x_m = max(abs(lo), abs(hi))
    slope = math.cos(x_m / 2.0)
    # z <= slope (x - x_m/2) + sin(x_m/2);  z >= slope (x + x_m/2) - sin(x_m/2)
    program.add_le(z - slope * x, math.sin(x_m / 2.0) - slope * x_m / 2.0, tag=tag)
    program.add_le(slope * x - z, math.sin(x_m / 2.0) - slope * x_m / 2.0, tag=tag)


def envelope_cos(program: ConicProgram, x, z, lo: float, hi: float, tag="env-cos"):
    """Quadratic upper / secant lower envelope of cos over [lo, hi]."""
    _check_interval(lo, hi, trig=True)
    x, z = as_expr(x), as_expr(z)
    _domain_rows(program, x, lo, hi, tag)
    if lo == hi:
        program.add_eq(z, math.cos(lo), tag=tag)
        return
    x_m = max(abs(lo), abs(hi))
    if x_m < 1e-6:
        k = 0.5 - x_m * x_m / 24.0
    else:
        k = (1.0 - math.cos(x_m)) / (x_m * x_m)
    # z <= 1 - k x^2  as  ||x||^2 <= (1 - z) * (1/k)
    program.add_rotated(1.0 - z, 1.0 / k, [x], tag=tag)
    slope = (math.cos(lo) - math.cos(hi)) / (lo - hi)
    # z >= slope (x - lo) + cos(lo)
    program.add_le(slope * x - z, slope * lo - math.cos(lo), tag=tag)


def envelope_sq(program: ConicProgram, x, z, lo: float, hi: float, tag="env-sq"):
    """Secant upper / quadratic lower envelope of x^2 over [lo, hi]."""
    _check_interval(lo, hi, trig=False)
    x, z = as_expr(x), as_expr(z)
    _domain_rows(program, x, lo, hi, tag)
    # z >= x^2  as  ||x||^2 <= z * 1
    program.add_rotated(z, 1.0, [x], tag=tag)
    # z <= (lo + hi) x - lo hi
    program.add_le(z - (lo + hi) * x, -lo * hi, tag=tag)


def envelope_mccormick(
    program: ConicProgram, x, y, z, x_lo, x_hi, y_lo, y_hi, tag="env-mc"
):
    """Four-plane McCormick envelope of z = x*y over a box."""
    if x_lo > x_hi or y_lo > y_hi:
        raise EnvelopeDomainError("empty McCormick box")
    x, y, z = as_expr(x), as_expr(y), as_expr(z)
    _domain_rows(program, x, x_lo, x_hi, tag)
    _domain_rows(program, y, y_lo, y_hi, tag)
    program.add_le(x_lo * y + y_lo * x - z, x_lo * y_lo, tag=tag)
    program.add_le(x_hi * y + y_hi * x - z, x_hi * y_hi, tag=tag)
    program.add_le(z - x_lo * y - y_hi * x, -x_lo * y_hi, tag=tag)
    program.add_le(z - x_hi * y - y_lo * x, -x_hi * y_lo, tag=tag)


# -- QC relaxation ------------------------------------------------------------


@dataclass
class QcHandles:
    jabr: JabrHandles
    theta: dict = field(default_factory=dict)  # (bus_id, t) -> var
    vmag: dict = field(default_factory=dict)
    cos_aux: dict = field(default_factory=dict)  # ((from, to), t) -> var
    sin_aux: dict = field(default_factory=dict)
    m: dict = field(default_factory=dict)


def emit_qc(
    instance: MarketInstance,
    program: ConicProgram,
    variables,
    bounds: AngleBounds,
) -> QcHandles:
    """Jabr plus convex envelopes linking c/s to angles and magnitudes.

    Auxiliary angles are shared per bus and period; all envelope families are
    wired in the stored line orientation (direction flips are row-equivalent).
    """
    if bounds is None:
        raise MissingBoundsError("QC emission requires angle bounds for every line")
    jabr = emit_jabr(instance, program, variables)
    net = instance.network
    handles = QcHandles(jabr=jabr)

    for bus in net.buses:
        for t in range(instance.periods):
            handles.theta[bus.id, t] = program.add_var(f"qc_theta_{bus.id}t{t}")
            handles.vmag[bus.id, t] = program.add_var(
                f"qc_vmag_{bus.id}t{t}", lb=bus.v_min, ub=bus.v_max
            )

    for bus in net.buses:
        for t in range(instance.periods):
            envelope_sq(
                program,
                handles.vmag[bus.id, t],
                jabr.c_diag[bus.id, t],
                bus.v_min,
                bus.v_max,
                tag="qc-sq",
            )

    for line in net.lines:
        key = (line.from_bus, line.to_bus)
        rec = bounds.for_line(*key)
        bus_a, bus_b = net.bus(line.from_bus), net.bus(line.to_bus)
        m_lo = bus_a.v_min * bus_b.v_min
        m_hi = bus_a.v_max * bus_b.v_max
        for t in range(instance.periods):
            cp = program.add_var(f"qc_c'_{key[0]}-{key[1]}t{t}", lb=rec.cos_lo, ub=rec.cos_hi)
            sp = program.add_var(f"qc_s'_{key[0]}-{key[1]}t{t}", lb=rec.sin_lo, ub=rec.sin_hi)
            mv = program.add_var(f"qc_m_{key[0]}-{key[1]}t{t}", lb=m_lo, ub=m_hi)
            handles.cos_aux[key, t] = cp
            handles.sin_aux[key, t] = sp
            handles.m[key, t] = mv
            dtheta = as_expr(handles.theta[key[0], t]) - as_expr(handles.theta[key[1], t])
            envelope_cos(program, dtheta, cp, rec.dtheta_lo, rec.dtheta_hi, tag="qc-cos")
            envelope_sin(program, dtheta, sp, rec.dtheta_lo, rec.dtheta_hi, tag="qc-sin")
            envelope_mccormick(
                program,
                handles.vmag[key[0], t],
                handles.vmag[key[1], t],
                mv,
                bus_a.v_min,
                bus_a.v_max,
                bus_b.v_min,
                bus_b.v_max,
                tag="qc-mc-vv",
            )
            envelope_mccormick(
                program, mv, cp, jabr.c[key, t], m_lo, m_hi, rec.cos_lo, rec.cos_hi,
                tag="qc-mc-c",
            )
            envelope_mccormick(
                program, mv, sp, jabr.s[key, t], m_lo, m_hi, rec.sin_lo, rec.sin_hi,
                tag="qc-mc-s",
            )
    return handles
