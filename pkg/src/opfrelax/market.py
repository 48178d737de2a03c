"""Relaxation-independent market model and the commitment rounding loop.

The base model carries bid blocks, participant bounds, continuous commitment,
minimum uptime, and soft active/reactive balance with penalty variables.  Each
relaxation emitter then attaches its own physics.  Integrality of commitment
is recovered by solving with u in [0, 1], rounding every u to the nearest
integer simultaneously (ties at 0.5 round up, keeping capacity available),
fixing them, and re-optimizing.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

from . import chordal as chordal_mod
from . import relax
from .conic import BackendConfig, ConicProgram, SolveReport, solve
from .netmodel import MarketInstance

__all__ = [
    "PenaltyCoefficients",
    "MarketVariables",
    "MarketSolution",
    "SolveFailure",
    "StageTwoInfeasible",
    "RELAXATION_TAGS",
    "penalty_coefficients",
    "build_base_model",
    "extract_welfare",
    "round_commitments",
    "solve_with_commitment_rounding",
]

RELAXATION_TAGS = ("dc", "shor", "chordal", "jabr", "qc")


class SolveFailure(RuntimeError):
    """A stage of the rounding loop did not reach an optimal status."""

    def __init__(self, message: str, stage: int, report: SolveReport | None = None):
        super().__init__(message)
        self.stage = stage
        self.report = report


class StageTwoInfeasible(SolveFailure):
    """Re-optimization with fixed commitments failed; stage-one solution rides along."""

    def __init__(self, message: str, first_stage: "MarketSolution", report: SolveReport):
        super().__init__(message, stage=2, report=report)
        self.first_stage = first_stage


@dataclass(frozen=True)
class PenaltyCoefficients:
    """Objective penalty weights and soft-constraint scalings.

    The alphas are normalized by the count of potential violations; the betas
    scale the constraint-side slack and the epsilons widen flow-definition
    equalities into two-sided inequalities.
    """

    alpha_welfare: float
    alpha_p_imb: float
    alpha_q_imb: float
    alpha_i_viol: float
    beta_p: float = 3e-1
    beta_q: float = 3e-1
    beta_i: float = 3e-1
    eps_p: float = 5e-4
    eps_q: float = 5e-4


def penalty_coefficients(instance: MarketInstance) -> PenaltyCoefficients:
    """Welfare-scale-normalized penalty coefficients for one instance."""
    total = 0.0
    for buyer in instance.buyers:
        total += sum(abs(b.price) for per in buyer.blocks for b in per)
    for seller in instance.sellers:
        total += sum(abs(b.price) for per in seller.blocks for b in per)
        total += abs(seller.no_load_cost) * instance.periods
    nv = instance.network.n_buses
    nt = instance.periods
    return PenaltyCoefficients(
        alpha_welfare=total,
        alpha_p_imb=total / (nv * nt),
        alpha_q_imb=total / (nv * nt),
        alpha_i_viol=total / (nv * nv * nt),
    )


@dataclass
class MarketVariables:
    """Handles into a ConicProgram for every market-side decision variable."""

    coefficients: PenaltyCoefficients
    p_btl: dict = field(default_factory=dict)  # (buyer, t, block) -> var
    p_bt: dict = field(default_factory=dict)  # (buyer, t) -> var
    q_bt: dict = field(default_factory=dict)
    p_stl: dict = field(default_factory=dict)  # (seller, t, block) -> var
    p_st: dict = field(default_factory=dict)
    q_st: dict = field(default_factory=dict)
    u_st: dict = field(default_factory=dict)
    phi_st: dict = field(default_factory=dict)
    p_flow: dict = field(default_factory=dict)  # (v_id, w_id, t) -> var
    q_flow: dict = field(default_factory=dict)
    p_imb: dict = field(default_factory=dict)  # (bus_id, t) -> var
    q_imb: dict = field(default_factory=dict)
    i_viol: dict = field(default_factory=dict)  # ((from, to), t) -> var


def build_base_model(
    instance: MarketInstance,
    program: ConicProgram,
    fixed_u: dict | None = None,
) -> MarketVariables:
    """Install objective, bid blocks, commitment, uptime, and soft balance.

    ``fixed_u`` pins commitment variables for the re-optimization stage.
    Returns handles for every variable; flow variables exist for both
    directions of every line.
    """
    coef = penalty_coefficients(instance)
    v = MarketVariables(coefficients=coef)
    net = instance.network
    periods = range(instance.periods)
    obj: list[tuple[int, float]] = []

    for bi, buyer in enumerate(instance.buyers):
        for t in periods:
            tot = []
            for li, block in enumerate(buyer.blocks[t]):
                var = program.add_var(f"p_b{bi}t{t}l{li}", lb=0.0, ub=block.size)
                v.p_btl[bi, t, li] = var
                obj.append((var, block.price))
                tot.append((var, 1.0))
            pb = program.add_var(f"p_b{bi}t{t}", lb=buyer.p_min, ub=buyer.p_max)
            qb = program.add_var(f"q_b{bi}t{t}", lb=buyer.q_min, ub=buyer.q_max)
            v.p_bt[bi, t] = pb
            v.q_bt[bi, t] = qb
            program.add_eq([(pb, 1.0)] + [(var, -c) for var, c in tot], 0.0, tag="buyer-agg")

    for si, seller in enumerate(instance.sellers):
        for t in periods:
            if fixed_u is not None:
                uval = float(fixed_u[si, t])
                u = program.add_var(f"u_s{si}t{t}", lb=uval, ub=uval)
            else:
                u = program.add_var(f"u_s{si}t{t}", lb=0.0, ub=1.0)
            v.u_st[si, t] = u
            obj.append((u, -seller.no_load_cost))
            tot = []
            for li, block in enumerate(seller.blocks[t]):
                var = program.add_var(f"p_s{si}t{t}l{li}", lb=0.0)
                v.p_stl[si, t, li] = var
                obj.append((var, -block.price))
                tot.append((var, 1.0))
                # p_stl <= sigma * u
                program.add_le([(var, 1.0), (u, -block.size)], 0.0, tag="seller-block")
            ps = program.add_var(f"p_s{si}t{t}")
            qs = program.add_var(f"q_s{si}t{t}")
            v.p_st[si, t] = ps
            v.q_st[si, t] = qs
            program.add_eq([(ps, 1.0)] + [(var, -c) for var, c in tot], 0.0, tag="seller-agg")
            program.add_le([(ps, 1.0), (u, -seller.p_max)], 0.0, tag="seller-p-hi")
            program.add_le([(ps, -1.0), (u, seller.p_min)], 0.0, tag="seller-p-lo")
            program.add_le([(qs, 1.0), (u, -seller.q_max)], 0.0, tag="seller-q-hi")
            program.add_le([(qs, -1.0), (u, seller.q_min)], 0.0, tag="seller-q-lo")

    # minimum uptime applies only to multi-period instances
    if instance.periods > 1:
        for si, seller in enumerate(instance.sellers):
            for t in periods:
                v.phi_st[si, t] = program.add_var(f"phi_s{si}t{t}", lb=0.0)
            for t in range(1, instance.periods):
                program.add_le(
                    [
                        (v.phi_st[si, t], -1.0),
                        (v.u_st[si, t], 1.0),
                        (v.u_st[si, t - 1], -1.0),
                    ],
                    0.0,
                    tag="uptime-start",
                )
            for t in range(seller.min_uptime, instance.periods):
                window = [
                    (v.phi_st[si, i], 1.0) for i in range(t - seller.min_uptime, t)
                ]
                program.add_le(window + [(v.u_st[si, t], -1.0)], 0.0, tag="uptime-hold")

    for v_id, w_id, _line in net.directed_lines():
        for t in periods:
            v.p_flow[v_id, w_id, t] = program.add_var(f"p_{v_id}->{w_id}t{t}")
            v.q_flow[v_id, w_id, t] = program.add_var(f"q_{v_id}->{w_id}t{t}")
    for line in net.lines:
        for t in periods:
            v.i_viol[(line.from_bus, line.to_bus), t] = program.add_var(
                f"iviol_{line.from_bus}-{line.to_bus}t{t}", lb=0.0
            )

    buyers_at: dict[str, list[int]] = {}
    sellers_at: dict[str, list[int]] = {}
    for bi, buyer in enumerate(instance.buyers):
        buyers_at.setdefault(buyer.bus, []).append(bi)
    for si, seller in enumerate(instance.sellers):
        sellers_at.setdefault(seller.bus, []).append(si)

    for bus in net.buses:
        for t in periods:
            v.p_imb[bus.id, t] = program.add_var(f"pimb_{bus.id}t{t}", lb=0.0)
            v.q_imb[bus.id, t] = program.add_var(f"qimb_{bus.id}t{t}", lb=0.0)
            obj.append((v.p_imb[bus.id, t], -coef.alpha_p_imb))
            obj.append((v.q_imb[bus.id, t], -coef.alpha_q_imb))
            p_terms = [(v.p_flow[bus.id, w, t], 1.0) for w in net.neighbors[bus.id]]
            q_terms = [(v.q_flow[bus.id, w, t], 1.0) for w in net.neighbors[bus.id]]
            for si in sellers_at.get(bus.id, []):
                p_terms.append((v.p_st[si, t], -1.0))
                q_terms.append((v.q_st[si, t], -1.0))
            for bi in buyers_at.get(bus.id, []):
                p_terms.append((v.p_bt[bi, t], 1.0))
                q_terms.append((v.q_bt[bi, t], 1.0))
            slack_p = (v.p_imb[bus.id, t], -coef.beta_p)
            slack_q = (v.q_imb[bus.id, t], -coef.beta_q)
            program.add_le(p_terms + [slack_p], 0.0, tag="p-balance")
            program.add_le([(var, -c) for var, c in p_terms] + [slack_p], 0.0, tag="p-balance")
            program.add_le(q_terms + [slack_q], 0.0, tag="q-balance")
            program.add_le([(var, -c) for var, c in q_terms] + [slack_q], 0.0, tag="q-balance")

    for key, var in v.i_viol.items():
        obj.append((var, -coef.alpha_i_viol))

    program.set_objective_max(obj)
    return v


def extract_welfare(x: np.ndarray, variables: MarketVariables, instance: MarketInstance):
    """Split an optimal point into penalty-free welfare and the penalty total.

    Welfare is buyer valuations minus seller block costs minus committed
    no-load costs; the penalty is the alpha-weighted sum of imbalance and
    thermal violation variables, so objective = welfare - penalty.
    """
    welfare = 0.0
    for (bi, t, li), var in variables.p_btl.items():
        welfare += instance.buyers[bi].blocks[t][li].price * x[var]
    for (si, t, li), var in variables.p_stl.items():
        welfare -= instance.sellers[si].blocks[t][li].price * x[var]
    for (si, t), var in variables.u_st.items():
        welfare -= instance.sellers[si].no_load_cost * x[var]
    coef = variables.coefficients
    penalty = coef.alpha_p_imb * sum(x[var] for var in variables.p_imb.values())
    penalty += coef.alpha_q_imb * sum(x[var] for var in variables.q_imb.values())
    penalty += coef.alpha_i_viol * sum(x[var] for var in variables.i_viol.values())
    return float(welfare), float(penalty)


def round_commitments(u_values: dict) -> dict:
    """Round every u simultaneously to the nearest integer; 0.5 rounds up."""
    return {key: (1.0 if val >= 0.5 else 0.0) for key, val in u_values.items()}


@dataclass
class MarketSolution:
    """Final solution of the rounding loop plus reconstruction artifacts."""

    relaxation: str
    status: str
    welfare: float
    penalty: float
    objective: float
    stage1_welfare: float
    stage1_objective: float
    u: dict
    p_flow: dict  # (v_id, w_id, t) -> float
    q_flow: dict
    voltages: relax.VoltageProfile | None
    rank_ratio: float | None
    solver_time_s: float
    stage_times: tuple[float, float]
    fallback: bool = False
    angle_bounds: relax.AngleBounds | None = None


def _emit_relaxation(tag, instance, program, variables, *, bounds, decomposition):
    if tag == "dc":
        return relax.emit_dc(instance, program, variables)
    if tag == "shor":
        return relax.emit_shor_real(instance, program, variables)
    if tag == "jabr":
        return relax.emit_jabr(instance, program, variables)
    if tag == "chordal":
        return chordal_mod.emit_chordal_sdp(instance, program, variables, decomposition)
    if tag == "qc":
        return relax.emit_qc(instance, program, variables, bounds)
    raise ValueError(f"unknown relaxation tag {tag!r}")


def _reconstruct(tag, instance, x, variables, handles):
    net = instance.network
    if tag == "dc":
        return relax.reconstruct_dc_profile(instance, x, handles), None
    if tag == "shor":
        profiles = []
        ratio = 0.0
        for t in range(instance.periods):
            w = handles.blocks[t].matrix_values(x)
            volts, r = relax.reconstruct_shor(w, net.index[net.ref_bus])
            profiles.append(volts)
            ratio = max(ratio, r)
        return relax.VoltageProfile(np.array(profiles)), ratio
    if tag == "chordal":
        return chordal_mod.reconstruct_chordal(instance, x, handles)
    if tag in ("jabr", "qc"):
        return relax.reconstruct_jabr_profile(instance, x, handles), None
    raise ValueError(tag)


def _solve_loop(instance, tag, backend, *, bounds=None, decomposition=None):
    """relax -> round -> fix -> re-optimize for one relaxation tag."""

    def build(fixed_u):
        program = ConicProgram()
        variables = build_base_model(instance, program, fixed_u=fixed_u)
        handles = _emit_relaxation(
            tag, instance, program, variables, bounds=bounds, decomposition=decomposition
        )
        return program.seal(), variables, handles

    program1, vars1, _handles1 = build(None)
    report1 = solve(program1, backend)
    if report1.status != "optimal":
        raise SolveFailure(
            f"{tag}: first-stage solve ended with status {report1.status}",
            stage=1,
            report=report1,
        )
    welfare1, _pen1 = extract_welfare(report1.primal, vars1, instance)
    u_relaxed = {key: report1.value(var) for key, var in vars1.u_st.items()}
    u_fixed = round_commitments(u_relaxed)

    program2, vars2, handles2 = build(u_fixed)
    report2 = solve(program2, backend)
    if report2.status != "optimal":
        first = _package(
            tag, instance, report1, vars1, _handles1, welfare1, report1, u_relaxed
        )
        raise StageTwoInfeasible(
            f"{tag}: re-optimization with fixed commitments ended with "
            f"status {report2.status}",
            first_stage=first,
            report=report2,
        )
    return _package(tag, instance, report2, vars2, handles2, welfare1, report1, u_fixed)


def _package(tag, instance, report, variables, handles, welfare1, report1, u_vals):
    welfare, penalty = extract_welfare(report.primal, variables, instance)
    voltages, ratio = _reconstruct(tag, instance, report.primal, variables, handles)
    p_flow = {key: report.value(var) for key, var in variables.p_flow.items()}
    q_flow = {key: report.value(var) for key, var in variables.q_flow.items()}
    return MarketSolution(
        relaxation=tag,
        status=report.status,
        welfare=welfare,
        penalty=penalty,
        objective=report.objective,
        stage1_welfare=welfare1,
        stage1_objective=report1.objective,
        u=dict(u_vals),
        p_flow=p_flow,
        q_flow=q_flow,
        voltages=voltages,
        rank_ratio=ratio,
        solver_time_s=report1.solve_time_s + report.solve_time_s,
        stage_times=(report1.solve_time_s, report.solve_time_s),
    )


def solve_with_commitment_rounding(
    instance: MarketInstance,
    relaxation: str,
    backend: BackendConfig | None = None,
    *,
    bounds: relax.AngleBounds | None = None,
    merge_fraction: float = 0.1,
    qc_log2n: int = 6,
    qc_seed: int = 0,
    eps_v: float = 0.1,
    eps_theta: float = 0.15,
) -> MarketSolution:
    """Solve one relaxation end to end, including the commitment rounding loop.

    For ``qc`` without explicit bounds, a Jabr pre-solve feeds local sampling;
    if sampling finds no feasible points, the QC model fails, or its phasor
    error is worse than the Jabr baseline, the Jabr allocation is returned
    with ``fallback=True``.  With explicit bounds QC failures propagate.
    """
    backend = backend or BackendConfig()
    if relaxation not in RELAXATION_TAGS:
        raise ValueError(f"unknown relaxation tag {relaxation!r}")

    if relaxation == "chordal":
        decomposition = chordal_mod.decompose_network(
            instance.network, merge_fraction=merge_fraction
        )
        return _solve_loop(instance, "chordal", backend, decomposition=decomposition)

    if relaxation != "qc":
        return _solve_loop(instance, relaxation, backend)

    if bounds is not None:
        sol = _solve_loop(instance, "qc", backend, bounds=bounds)
        sol.angle_bounds = bounds
        return sol

    from . import qmc
    from .bench import phasor_error_rms

    jabr_sol = _solve_loop(instance, "jabr", backend)

    def jabr_as_qc():
        out = replace(jabr_sol, relaxation="qc", fallback=True)
        return out

    try:
        bounds, _report = qmc.sample_bounds_local(
            instance,
            jabr_sol.voltages,
            eps_v=eps_v,
            eps_theta=eps_theta,
            log2_samples=qc_log2n,
            seed=qc_seed,
        )
    except qmc.EmptyFeasibleSetError:
        return jabr_as_qc()
    try:
        qc_sol = _solve_loop(instance, "qc", backend, bounds=bounds)
    except SolveFailure:
        return jabr_as_qc()
    qc_sol.angle_bounds = bounds

    err_jabr = phasor_error_rms(
        jabr_sol.p_flow, jabr_sol.q_flow, jabr_sol.voltages, instance.network
    )
    err_qc = phasor_error_rms(
        qc_sol.p_flow, qc_sol.q_flow, qc_sol.voltages, instance.network
    )
    if not math.isfinite(err_qc) or err_qc > err_jabr:
        return jabr_as_qc()
    return qc_sol
