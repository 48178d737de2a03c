"""Solver-independent conic program container and a Clarabel backend adapter.

The container holds scalar variables with optional bounds, sparse linear
equality/inequality rows, second-order cones ``||tail|| <= head``, rotated
cones ``||tail||^2 <= u*v`` (with ``u, v >= 0`` implied), and PSD blocks over
symmetric matrix variables stored as lower-triangle scalar lists.  The
objective is a linear functional to maximize.

A program is mutable while being built, sealed before solving, and immutable
afterwards.  Distinct sealed programs may be solved concurrently.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, field

import numpy as np
from scipy import sparse

__all__ = [
    "LinExpr",
    "PsdBlock",
    "ConicProgram",
    "BackendConfig",
    "SolveReport",
    "SolverBackendError",
    "UnsupportedConeError",
    "rotated_to_soc",
    "solve",
    "max_violation",
    "dump_program",
]

_INF = float("inf")


class UnsupportedConeError(ValueError):
    """The configured backend cannot handle a cone family in the program."""


class SolverBackendError(RuntimeError):
    """The backend raised; the original diagnostics ride along."""


@dataclass(frozen=True)
class LinExpr:
    """Sparse affine expression ``sum(coef * x[var]) + const``."""

    terms: tuple[tuple[int, float], ...] = ()
    const: float = 0.0

    @staticmethod
    def variable(index: int) -> "LinExpr":
        return LinExpr(((index, 1.0),))

    @staticmethod
    def constant(value: float) -> "LinExpr":
        return LinExpr((), float(value))

    def _combine(self, other: "LinExpr", sign: float) -> "LinExpr":
        acc: dict[int, float] = dict(self.terms)
        for var, coef in other.terms:
            acc[var] = acc.get(var, 0.0) + sign * coef
        terms = tuple((v, c) for v, c in acc.items() if c != 0.0)
        return LinExpr(terms, self.const + sign * other.const)

    def __add__(self, other) -> "LinExpr":
        return self._combine(as_expr(other), 1.0)

    def __radd__(self, other) -> "LinExpr":
        return self.__add__(other)

    def __sub__(self, other) -> "LinExpr":
        return self._combine(as_expr(other), -1.0)

    def __rsub__(self, other) -> "LinExpr":
        return as_expr(other)._combine(self, -1.0)

    def __mul__(self, scalar: float) -> "LinExpr":
        s = float(scalar)
        return LinExpr(tuple((v, s * c) for v, c in self.terms), s * self.const)

    def __rmul__(self, scalar: float) -> "LinExpr":
        return self.__mul__(scalar)

    def __neg__(self) -> "LinExpr":
        return self.__mul__(-1.0)

    def value(self, x: np.ndarray) -> float:
        return self.const + sum(c * x[v] for v, c in self.terms)


def as_expr(obj) -> LinExpr:
    """Normalize an int (variable index), float (constant), or LinExpr."""
    if isinstance(obj, LinExpr):
        return obj
    if isinstance(obj, bool):
        raise TypeError("bool is not a valid expression")
    if isinstance(obj, (int, np.integer)):
        return LinExpr.variable(int(obj))
    if isinstance(obj, (float, np.floating)):
        return LinExpr.constant(float(obj))
    raise TypeError(f"cannot interpret {obj!r} as an affine expression")


def rotated_to_soc(u, v, tail) -> tuple[LinExpr, tuple[LinExpr, ...]]:
    """Reformulate ``||tail||^2 <= u*v, u,v >= 0`` as one second-order cone.

    Returns the (head, tail) pair ``||[(u-v)/2, tail]|| <= (u+v)/2``, which is
    satisfied exactly when the rotated constraint holds; the nonnegativity of
    u and v is implied by the cone itself.
    """
    u = as_expr(u)
    v = as_expr(v)
    head = 0.5 * (u + v)
    first = 0.5 * (u - v)
    tails = (first,) + tuple(as_expr(t) for t in tail)
    return head, tails


@dataclass(frozen=True)
class PsdBlock:
    """Handle to a symmetric PSD matrix variable of dimension ``dim``.

    Scalar entries cover the lower triangle in row-major order; ``entry(i, j)``
    resolves either orientation to the canonical scalar variable index.
    """

    dim: int
    start: int
    name: str = ""

    @property
    def num_entries(self) -> int:
        return self.dim * (self.dim + 1) // 2

    def entry(self, i: int, j: int) -> int:
        if not (0 <= i < self.dim and 0 <= j < self.dim):
            raise IndexError(f"entry ({i},{j}) outside block of dim {self.dim}")
        if i < j:
            i, j = j, i
        return self.start + i * (i + 1) // 2 + j

    def pairs(self):
        """Yield (var_index, row, col) over the lower triangle."""
        k = self.start
        for i in range(self.dim):
            for j in range(i + 1):
                yield k, i, j
                k += 1

    def matrix_values(self, x: np.ndarray) -> np.ndarray:
        w = np.zeros((self.dim, self.dim))
        for k, i, j in self.pairs():
            w[i, j] = x[k]
            w[j, i] = x[k]
        return w


@dataclass
class ConicProgram:
    """Builder/container for one conic optimization problem (maximize)."""

    var_names: list[str] = field(default_factory=list)
    lb: list[float] = field(default_factory=list)
    ub: list[float] = field(default_factory=list)
    rows: list[tuple[tuple[tuple[int, float], ...], float, str, str]] = field(default_factory=list)
    socs: list[tuple[LinExpr, tuple[LinExpr, ...], str]] = field(default_factory=list)
    rotated: list[tuple[LinExpr, LinExpr, tuple[LinExpr, ...], str]] = field(default_factory=list)
    psd_blocks: list[PsdBlock] = field(default_factory=list)
    obj_terms: dict[int, float] = field(default_factory=dict)
    obj_const: float = 0.0
    sealed: bool = False

    # -- construction ------------------------------------------------------

    @property
    def num_vars(self) -> int:
        return len(self.lb)

    def _check_open(self):
        if self.sealed:
            raise RuntimeError("program is sealed; no further mutation allowed")

    def add_var(self, name: str = "", lb: float = -_INF, ub: float = _INF) -> int:
        self._check_open()
        if not (lb <= ub):
            raise ValueError(f"variable bounds reversed: [{lb}, {ub}]")
        self.var_names.append(name or f"x{len(self.lb)}")
        self.lb.append(float(lb))
        self.ub.append(float(ub))
        return len(self.lb) - 1

    def set_bounds(self, var: int, lb: float = -_INF, ub: float = _INF):
        self._check_open()
        if not (lb <= ub):
            raise ValueError(f"variable bounds reversed: [{lb}, {ub}]")
        self.lb[var] = float(lb)
        self.ub[var] = float(ub)

    def _norm_row(self, expr) -> tuple[tuple[tuple[int, float], ...], float]:
        if isinstance(expr, (list, tuple)) and not isinstance(expr, LinExpr):
            e = LinExpr(tuple((int(v), float(c)) for v, c in expr))
        else:
            e = as_expr(expr)
        for v, c in e.terms:
            if not 0 <= v < self.num_vars:
                raise ValueError(f"row references undeclared variable {v}")
            if not math.isfinite(c):
                raise ValueError("non-finite coefficient in row")
        return e.terms, e.const

    def add_eq(self, expr, rhs: float = 0.0, tag: str = ""):
        """Add ``expr == rhs``; expr is a LinExpr or [(var, coef), ...]."""
        self._check_open()
        terms, const = self._norm_row(expr)
        self.rows.append((terms, float(rhs) - const, "eq", tag))

    def add_le(self, expr, rhs: float = 0.0, tag: str = ""):
        """Add ``expr <= rhs``."""
        self._check_open()
        terms, const = self._norm_row(expr)
        self.rows.append((terms, float(rhs) - const, "le", tag))

    def add_soc(self, head, tail, tag: str = ""):
        """Add ``||tail||_2 <= head`` (head/tail are affine expressions)."""
        self._check_open()
        entries = tuple(as_expr(t) for t in tail)
        if not entries:
            self.add_le(-as_expr(head), 0.0, tag or "soc-degenerate")
            return
        self.socs.append((as_expr(head), entries, tag))

    def add_rotated(self, u, v, tail, tag: str = ""):
        """Add ``||tail||^2 <= u*v`` with ``u, v >= 0``."""
        self._check_open()
        self.rotated.append((as_expr(u), as_expr(v), tuple(as_expr(t) for t in tail), tag))

    def add_psd_block(self, dim: int, name: str = "") -> PsdBlock:
        """Declare a symmetric PSD matrix variable; returns its handle."""
        self._check_open()
        if dim < 1:
            raise ValueError("PSD block dimension must be >= 1")
        start = self.num_vars
        for i in range(dim):
            for j in range(i + 1):
                self.add_var(f"{name or 'W'}[{i},{j}]")
        block = PsdBlock(dim, start, name)
        self.psd_blocks.append(block)
        return block

    def set_objective_max(self, expr, extra_terms=None):
        """Install the (linear) objective to maximize."""
        self._check_open()
        e = as_expr(expr) if not isinstance(expr, (list, tuple)) else LinExpr(
            tuple((int(v), float(c)) for v, c in expr)
        )
        if extra_terms:
            e = e + LinExpr(tuple((int(v), float(c)) for v, c in extra_terms))
        acc: dict[int, float] = {}
        for v, c in e.terms:
            if not 0 <= v < self.num_vars:
                raise ValueError(f"objective references undeclared variable {v}")
            acc[v] = acc.get(v, 0.0) + c
        self.obj_terms = acc
        self.obj_const = e.const

    def seal(self):
        self.sealed = True
        return self

    # -- introspection -----------------------------------------------------

    def all_soc_lowered(self):
        """All second-order cones, with rotated cones lowered via rotated_to_soc."""
        for head, tails, tag in self.socs:
            yield head, tails, tag
        for u, v, tails, tag in self.rotated:
            head, full = rotated_to_soc(u, v, tails)
            yield head, full, tag or "rotated"


@dataclass(frozen=True)
class BackendConfig:
    """Clarabel adapter configuration.

    ``feasibility_tol``/``gap_tol`` map onto the solver's termination
    tolerances; ``max_threads = 1`` keeps solves bit-deterministic.  The
    solver's own chordal decomposition stays off so that block structure is
    exactly what the program declares.
    """

    feasibility_tol: float = 1e-8
    gap_abs_tol: float = 1e-8
    gap_rel_tol: float = 1e-8
    max_iter: int = 200
    time_limit_s: float = 0.0
    verbose: bool = False
    max_threads: int = 1
    supports_psd: bool = True


@dataclass(frozen=True)
class SolveReport:
    """Outcome of one backend call."""

    status: str  # optimal | infeasible | unbounded | numerical-failure
    objective: float
    primal: np.ndarray | None
    solve_time_s: float
    backend_status: str = ""

    def value(self, var: int) -> float:
        if self.primal is None:
            raise ValueError(f"no primal available (status={self.status})")
        return float(self.primal[var])


_STATUS_MAP = {
    "Solved": "optimal",
    "PrimalInfeasible": "infeasible",
    "AlmostPrimalInfeasible": "infeasible",
    "DualInfeasible": "unbounded",
    "AlmostDualInfeasible": "unbounded",
}


def _assemble(program: ConicProgram):
    """Lower the program to Clarabel's ``min q'x  s.t.  Ax + s = b, s in K``."""
    import clarabel

    n = program.num_vars
    a_rows: list[tuple[tuple[tuple[int, float], ...], float]] = []
    cones = []

    eq_rows: list[tuple[tuple[tuple[int, float], ...], float]] = []
    ineq_rows: list[tuple[tuple[tuple[int, float], ...], float]] = []

    for terms, rhs, kind, _tag in program.rows:
        (eq_rows if kind == "eq" else ineq_rows).append((terms, rhs))
    for v in range(n):
        lo, hi = program.lb[v], program.ub[v]
        if lo == hi:
            eq_rows.append((((v, 1.0),), lo))
            continue
        if lo > -_INF:
            ineq_rows.append((((v, -1.0),), -lo))
        if hi < _INF:
            ineq_rows.append((((v, 1.0),), hi))

    if eq_rows:
        cones.append(clarabel.ZeroConeT(len(eq_rows)))
        a_rows.extend(eq_rows)
    if ineq_rows:
        cones.append(clarabel.NonnegativeConeT(len(ineq_rows)))
        a_rows.extend(ineq_rows)

    for head, tails, _tag in program.all_soc_lowered():
        dim = 1 + len(tails)
        cones.append(clarabel.SecondOrderConeT(dim))
        for e in (head, *tails):
            # s = b - Ax must equal the entry value terms.x + const
            a_rows.append((tuple((v, -c) for v, c in e.terms), e.const))

    sqrt2 = math.sqrt(2.0)
    for block in program.psd_blocks:
        cones.append(clarabel.PSDTriangleConeT(block.dim))
        for var, i, j in block.pairs():
            scale = 1.0 if i == j else sqrt2
            a_rows.append((((var, -scale),), 0.0))

    ridx, cidx, vals, b = [], [], [], []
    for r, (terms, rhs) in enumerate(a_rows):
        b.append(rhs)
        for v, c in terms:
            ridx.append(r)
            cidx.append(v)
            vals.append(c)
    a_mat = sparse.csc_matrix(
        (vals, (ridx, cidx)), shape=(len(a_rows), n), dtype=float
    )
    q = np.zeros(n)
    for v, c in program.obj_terms.items():
        q[v] = -c  # clarabel minimizes
    return a_mat, np.asarray(b, dtype=float), q, cones


def solve(program: ConicProgram, backend: BackendConfig | None = None) -> SolveReport:
    """Solve a sealed program through the Clarabel backend.

    Wall time covers backend setup plus iterations only, not our matrix
    assembly.  On ``optimal`` the reported primal satisfies every constraint
    within the backend feasibility tolerance.
    """
    import clarabel

    backend = backend or BackendConfig()
    if program.psd_blocks and not backend.supports_psd:
        raise UnsupportedConeError(
            "program has PSD blocks but the backend is configured without PSD support"
        )
    if not program.sealed:
        program.seal()

    a_mat, b, q, cones = _assemble(program)
    p_mat = sparse.csc_matrix((program.num_vars, program.num_vars), dtype=float)

    settings = clarabel.DefaultSettings()
    settings.verbose = backend.verbose
    settings.tol_feas = backend.feasibility_tol
    settings.tol_gap_abs = backend.gap_abs_tol
    settings.tol_gap_rel = backend.gap_rel_tol
    settings.max_iter = backend.max_iter
    settings.max_threads = backend.max_threads
    settings.chordal_decomposition_enable = False
    if backend.time_limit_s > 0:
        settings.time_limit = backend.time_limit_s

    t0 = time.perf_counter()
    try:
        solver = clarabel.DefaultSolver(p_mat, q, a_mat, b, cones, settings)
        solution = solver.solve()
    except BaseException as exc:  # pass through with diagnostics
        raise SolverBackendError(f"clarabel failed: {exc!r}") from exc
    wall = time.perf_counter() - t0

    backend_status = str(solution.status)
    status = _STATUS_MAP.get(backend_status, "numerical-failure")
    if status == "optimal":
        x = np.asarray(solution.x, dtype=float)
        objective = program.obj_const + sum(
            c * x[v] for v, c in program.obj_terms.items()
        )
        return SolveReport(status, float(objective), x, wall, backend_status)
    return SolveReport(status, float("nan"), None, wall, backend_status)


def max_violation(program: ConicProgram, x: np.ndarray) -> float:
    """Largest constraint violation at ``x``, re-checked from first principles.

    Independent of any solver claim: linear rows, variable bounds, lowered
    cones, and PSD blocks (via eigenvalues) are all evaluated directly.
    """
    worst = 0.0

    def expr_val(terms, const=0.0):
        return const + sum(c * x[v] for v, c in terms)

    for terms, rhs, kind, _tag in program.rows:
        r = expr_val(terms) - rhs
        worst = max(worst, abs(r) if kind == "eq" else r)
    for v in range(program.num_vars):
        if program.lb[v] > -_INF:
            worst = max(worst, program.lb[v] - x[v])
        if program.ub[v] < _INF:
            worst = max(worst, x[v] - program.ub[v])
    for head, tails, _tag in program.all_soc_lowered():
        h = head.value(x)
        norm = math.sqrt(sum(t.value(x) ** 2 for t in tails))
        worst = max(worst, norm - h)
    for block in program.psd_blocks:
        w = block.matrix_values(x)
        if block.dim == 1:
            lam = w[0, 0]
        else:
            lam = float(np.linalg.eigvalsh(w)[0])
        worst = max(worst, -lam)
    return worst


def dump_program(program: ConicProgram) -> str:
    """Human-readable listing of a program; a debugging aid, not a format."""
    out = [f"# conic program: {program.num_vars} vars, {len(program.rows)} rows"]
    for v in range(program.num_vars):
        lo, hi = program.lb[v], program.ub[v]
        bound = ""
        if lo > -_INF or hi < _INF:
            bound = f"  in [{lo:g}, {hi:g}]"
        out.append(f"var {v}: {program.var_names[v]}{bound}")

    def fmt(terms, const=0.0):
        parts = [f"{c:+g}*{program.var_names[v]}" for v, c in terms]
        if const or not parts:
            parts.append(f"{const:+g}")
        return " ".join(parts)

    for terms, rhs, kind, tag in program.rows:
        op = "==" if kind == "eq" else "<="
        label = f"  [{tag}]" if tag else ""
        out.append(f"row: {fmt(terms)} {op} {rhs:g}{label}")
    for head, tails, tag in program.socs:
        label = f"  [{tag}]" if tag else ""
        body = "; ".join(fmt(t.terms, t.const) for t in tails)
        out.append(f"soc: ||{body}|| <= {fmt(head.terms, head.const)}{label}")
    for u, v, tails, tag in program.rotated:
        label = f"  [{tag}]" if tag else ""
        body = "; ".join(fmt(t.terms, t.const) for t in tails)
        out.append(
            f"rot: ||{body}||^2 <= ({fmt(u.terms, u.const)}) * ({fmt(v.terms, v.const)}){label}"
        )
    for block in program.psd_blocks:
        out.append(f"psd: {block.name or 'W'} dim {block.dim} (vars {block.start}..{block.start + block.num_entries - 1})")
    obj = fmt(tuple(program.obj_terms.items()), program.obj_const)
    out.append(f"maximize: {obj}")
    return "\n".join(out)
