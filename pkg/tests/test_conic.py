"""Conic container and backend adapter tests."""

import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from opfrelax.conic import (
    BackendConfig,
    ConicProgram,
    LinExpr,
    UnsupportedConeError,
    as_expr,
    dump_program,
    max_violation,
    rotated_to_soc,
    solve,
)

BACKEND = BackendConfig()


def test_one_variable_lp():
    prog = ConicProgram()
    x = prog.add_var("x")
    prog.add_le([(x, 1.0)], 1.0)
    prog.set_objective_max([(x, 1.0)])
    report = solve(prog, BACKEND)
    assert report.status == "optimal"
    assert report.objective == pytest.approx(1.0, abs=1e-8)
    assert report.value(x) == pytest.approx(1.0, abs=1e-8)


def test_contradictory_bounds_infeasible():
    prog = ConicProgram()
    x = prog.add_var("x")
    prog.add_le([(x, 1.0)], 0.0)
    prog.add_le([(x, -1.0)], -1.0)  # x >= 1
    prog.set_objective_max([(x, 1.0)])
    assert solve(prog, BACKEND).status == "infeasible"


def test_unbounded():
    prog = ConicProgram()
    x = prog.add_var("x")
    prog.set_objective_max([(x, 1.0)])
    assert solve(prog, BACKEND).status == "unbounded"


def test_unit_soc():
    prog = ConicProgram()
    t = prog.add_var("t")
    prog.add_soc(1.0, [t])
    prog.set_objective_max([(t, 1.0)])
    report = solve(prog, BACKEND)
    assert report.status == "optimal"
    assert report.objective == pytest.approx(1.0, abs=1e-7)


def test_rotated_cone_boundary_points():
    # (u=1, v=1, tail=(1, 0)) boundary; (u=1, v=1, tail=(0.8, 0.6)) boundary
    for tail in [(1.0, 0.0), (0.8, 0.6)]:
        head, full = rotated_to_soc(1.0, 1.0, [as_expr(t) for t in tail])
        norm = math.sqrt(sum(t.const ** 2 for t in full))
        assert norm == pytest.approx(head.const, abs=1e-12)


def test_rotated_cone_violated_product():
    # u*v = 0.5 < ||tail||^2 = 1
    head, full = rotated_to_soc(1.0, 0.5, [as_expr(1.0), as_expr(0.0)])
    norm = math.sqrt(sum(t.const ** 2 for t in full))
    assert norm > head.const + 1e-9


def test_rotated_cone_in_solver():
    # maximize c subject to c^2 <= u*v with u <= 2, v <= 2  ->  c = 2
    prog = ConicProgram()
    u = prog.add_var("u", ub=2.0)
    v = prog.add_var("v", ub=2.0)
    c = prog.add_var("c")
    prog.add_rotated(u, v, [c])
    prog.set_objective_max([(c, 1.0)])
    report = solve(prog, BACKEND)
    assert report.status == "optimal"
    assert report.objective == pytest.approx(2.0, abs=1e-6)


def test_psd_block_caps_offdiagonal():
    # maximize W12 with W11 = W22 = 1 and W PSD  ->  W12 = 1
    prog = ConicProgram()
    block = prog.add_psd_block(2, "W")
    prog.add_eq([(block.entry(0, 0), 1.0)], 1.0)
    prog.add_eq([(block.entry(1, 1), 1.0)], 1.0)
    prog.set_objective_max([(block.entry(1, 0), 1.0)])
    report = solve(prog, BACKEND)
    assert report.status == "optimal"
    assert report.objective == pytest.approx(1.0, abs=1e-6)
    assert max_violation(prog, report.primal) <= 1e-6


def test_psd_block_entry_is_symmetric_storage():
    prog = ConicProgram()
    block = prog.add_psd_block(3)
    assert block.entry(0, 2) == block.entry(2, 0)
    assert block.num_entries == 6


def test_unsupported_cone_error():
    prog = ConicProgram()
    prog.add_psd_block(2)
    with pytest.raises(UnsupportedConeError):
        solve(prog, BackendConfig(supports_psd=False))


def test_feasibility_recheck_on_mixed_program():
    # LP + SOC + rotated + PSD together; optimal point re-checked independently
    prog = ConicProgram()
    x = prog.add_var("x", lb=0.0, ub=3.0)
    y = prog.add_var("y", lb=0.0)
    t = prog.add_var("t")
    prog.add_le([(x, 1.0), (y, 1.0)], 4.0)
    prog.add_soc(as_expr(x) + 1.0, [t])
    prog.add_rotated(x, y, [t])
    block = prog.add_psd_block(2)
    prog.add_eq([(block.entry(0, 0), 1.0), (x, -1.0)], 0.0)
    prog.add_eq([(block.entry(1, 1), 1.0)], 1.0)
    prog.add_le([(block.entry(1, 0), -1.0), (t, 1.0)], 0.0)  # t <= W10
    prog.set_objective_max([(t, 1.0)])
    report = solve(prog, BACKEND)
    assert report.status == "optimal"
    assert max_violation(prog, report.primal) <= 1e-6


def test_solve_is_deterministic():
    def build():
        prog = ConicProgram()
        x = prog.add_var("x", lb=0.0, ub=2.0)
        y = prog.add_var("y", lb=0.0, ub=2.0)
        prog.add_rotated(x, y, [as_expr(1.0)])
        prog.set_objective_max([(x, 1.0), (y, -0.3)])
        return prog

    a = solve(build(), BACKEND)
    b = solve(build(), BACKEND)
    assert a.objective == b.objective
    assert np.array_equal(a.primal, b.primal)


def test_sealed_program_rejects_mutation():
    prog = ConicProgram()
    prog.add_var("x")
    prog.seal()
    with pytest.raises(RuntimeError):
        prog.add_var("y")


def test_row_referencing_unknown_variable():
    prog = ConicProgram()
    prog.add_var("x")
    with pytest.raises(ValueError):
        prog.add_eq([(5, 1.0)], 0.0)


def test_dump_mentions_every_section():
    prog = ConicProgram()
    x = prog.add_var("speed", lb=0.0)
    prog.add_le([(x, 1.0)], 1.0, tag="cap")
    prog.add_soc(1.0, [x])
    prog.add_rotated(x, x, [x])
    prog.add_psd_block(2, "M")
    prog.set_objective_max([(x, 1.0)])
    text = dump_program(prog)
    for token in ("speed", "cap", "soc:", "rot:", "psd:", "maximize"):
        assert token in text


@given(
    u=st.floats(0.01, 10),
    v=st.floats(0.01, 10),
    a=st.floats(-3, 3),
    b=st.floats(-3, 3),
)
@settings(max_examples=200, deadline=None)
def test_rotated_to_soc_equivalence(u, v, a, b):
    # emitted SOC holds exactly when u*v >= ||tail||^2
    head, full = rotated_to_soc(u, v, [as_expr(a), as_expr(b)])
    lhs = math.sqrt(sum(t.const ** 2 for t in full))
    should_hold = u * v >= a * a + b * b
    holds = lhs <= head.const + 1e-12
    if abs(u * v - (a * a + b * b)) > 1e-9:
        assert holds == should_hold


@given(st.floats(-5, 5), st.floats(-5, 5), st.floats(-5, 5))
@settings(max_examples=100, deadline=None)
def test_linexpr_algebra(a, b, c):
    e = 2.0 * LinExpr.variable(0) - LinExpr.variable(1) + c
    x = np.array([a, b])
    assert e.value(x) == pytest.approx(2 * a - b + c, rel=1e-12, abs=1e-12)
