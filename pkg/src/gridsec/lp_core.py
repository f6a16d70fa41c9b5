"""Linear programs with primal and dual output.

Problems are always ``minimize cost @ x`` subject to row constraints
``A x (<=|>=|=) rhs`` and variable bounds.  Row duals follow the sensitivity
convention ``y_i = d(objective) / d(rhs_i)``: nonnegative on ``>=`` rows,
nonpositive on ``<=`` rows, free on equalities.  Reduced costs are
``cost - A.T @ y``.

The default backend is a dense bounded-variable revised simplex (two-phase,
Dantzig pricing with a Bland fallback on degenerate stalls).  ``backend="highs"``
routes through :func:`scipy.optimize.linprog`.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp

log = logging.getLogger(__name__)

INF = np.inf
SENSES = ("<", ">", "=")


class LpNumericalError(RuntimeError):
    """Iteration limit, singular basis or similar solver breakdown."""


@dataclass(frozen=True)
class Tolerances:
    feas_tol: float = 1e-7
    dual_tol: float = 1e-7
    comp_tol: float = 1e-6
    pivot_tol: float = 1e-9
    max_iter: int = 50_000


DEFAULT_TOL = Tolerances()


@dataclass(frozen=True, eq=False)
class LpProblem:
    cost: np.ndarray
    rows: np.ndarray
    cols: np.ndarray
    vals: np.ndarray
    senses: tuple[str, ...]
    rhs: np.ndarray
    lb: np.ndarray
    ub: np.ndarray
    var_names: tuple[str, ...] = ()
    con_names: tuple[str, ...] = ()

    def __post_init__(self):
        n, m = len(self.cost), len(self.rhs)
        set_ = lambda k, v: object.__setattr__(self, k, v)
        set_("cost", np.asarray(self.cost, float))
        set_("rhs", np.asarray(self.rhs, float))
        set_("lb", np.asarray(self.lb, float))
        set_("ub", np.asarray(self.ub, float))
        set_("rows", np.asarray(self.rows, int))
        set_("cols", np.asarray(self.cols, int))
        set_("vals", np.asarray(self.vals, float))
        set_("senses", tuple(self.senses))
        if not self.var_names:
            set_("var_names", tuple(f"x{j}" for j in range(n)))
        if not self.con_names:
            set_("con_names", tuple(f"r{i}" for i in range(m)))
        if len(self.lb) != n or len(self.ub) != n or len(self.var_names) != n:
            raise ValueError("variable arrays disagree with cost length")
        if len(self.senses) != m or len(self.con_names) != m:
            raise ValueError("row arrays disagree with rhs length")
        if not (len(self.rows) == len(self.cols) == len(self.vals)):
            raise ValueError("triplet arrays differ in length")
        if len(self.rows) and (self.rows.min() < 0 or self.rows.max() >= m
                               or self.cols.min() < 0 or self.cols.max() >= n):
            raise ValueError("triplet index out of range")
        for name, arr in (("cost", self.cost), ("rhs", self.rhs), ("vals", self.vals)):
            if not np.all(np.isfinite(arr)):
                raise ValueError(f"non-finite entry in {name}")
        if np.isnan(self.lb).any() or np.isnan(self.ub).any():
            raise ValueError("NaN bound")
        if bad := [s for s in self.senses if s not in SENSES]:
            raise ValueError(f"unknown sense {bad[0]!r}")
        if len(set(self.var_names)) != n or len(set(self.con_names)) != m:
            raise ValueError("variable and constraint names must be unique")

    @property
    def n_vars(self) -> int:
        return len(self.cost)

    @property
    def n_rows(self) -> int:
        return len(self.rhs)

    def matrix(self) -> sp.csr_matrix:
        return sp.csr_matrix((self.vals, (self.rows, self.cols)),
                             shape=(self.n_rows, self.n_vars))

    def dense(self) -> np.ndarray:
        return self.matrix().toarray()

    @classmethod
    def from_dense(cls, cost, A, senses, rhs, lb=None, ub=None, **names) -> "LpProblem":
        A = np.atleast_2d(np.asarray(A, float))
        n = len(cost)
        if A.size and A.shape != (len(rhs), n):
            raise ValueError(f"matrix shape {A.shape} does not match ({len(rhs)}, {n})")
        r, c = np.nonzero(A)
        return cls(cost=cost, rows=r, cols=c, vals=A[r, c], senses=tuple(senses), rhs=rhs,
                   lb=np.zeros(n) if lb is None else lb,
                   ub=np.full(n, INF) if ub is None else ub, **names)


class LpBuilder:
    """Incremental construction by name; :meth:`build` freezes an :class:`LpProblem`."""

    def __init__(self):
        self._cost: list[float] = []
        self._lb: list[float] = []
        self._ub: list[float] = []
        self._vnames: list[str] = []
        self._vindex: dict[str, int] = {}
        self._r: list[int] = []
        self._c: list[int] = []
        self._v: list[float] = []
        self._senses: list[str] = []
        self._rhs: list[float] = []
        self._cnames: list[str] = []

    def var(self, name: str, lb: float = 0.0, ub: float = INF, cost: float = 0.0) -> int:
        j = len(self._cost)
        self._vindex[name] = j
        self._vnames.append(name)
        self._cost.append(cost)
        self._lb.append(lb)
        self._ub.append(ub)
        return j

    def vars(self, prefix: str, n: int, lb=0.0, ub=INF, cost=0.0) -> np.ndarray:
        lb, ub, cost = (np.broadcast_to(np.asarray(a, float), (n,)) for a in (lb, ub, cost))
        return np.array([self.var(f"{prefix}[{i}]", lb[i], ub[i], cost[i]) for i in range(n)],
                        dtype=int)

    def row(self, name: str, idx, coef, sense: str, rhs: float) -> int:
        i = len(self._rhs)
        idx = np.asarray(idx, int).ravel()
        coef = np.asarray(coef, float).ravel()
        keep = coef != 0
        self._r.extend([i] * int(keep.sum()))
        self._c.extend(idx[keep].tolist())
        self._v.extend(coef[keep].tolist())
        self._senses.append(sense)
        self._rhs.append(float(rhs))
        self._cnames.append(name)
        return i

    @property
    def n_vars(self) -> int:
        return len(self._cost)

    def build(self) -> LpProblem:
        return LpProblem(cost=np.array(self._cost), rows=np.array(self._r, int),
                         cols=np.array(self._c, int), vals=np.array(self._v),
                         senses=tuple(self._senses), rhs=np.array(self._rhs),
                         lb=np.array(self._lb), ub=np.array(self._ub),
                         var_names=tuple(self._vnames), con_names=tuple(self._cnames))


@dataclass
class LpSolution:
    status: str  # "optimal" | "infeasible" | "unbounded"
    x: np.ndarray | None = None
    duals: np.ndarray | None = None
    reduced_costs: np.ndarray | None = None
    objective: float = float("nan")
    iterations: int = 0
    farkas: np.ndarray | None = None
    ray: np.ndarray | None = None

    @property
    def optimal(self) -> bool:
        return self.status == "optimal"


@dataclass(frozen=True)
class ResidualReport:
    primal_residual: float
    dual_residual: float
    complementarity: float
    gap: float
    primal_objective: float
    dual_objective: float


# ---------------------------------------------------------------------------
# native revised simplex


class _Simplex:
    """Bounded-variable revised simplex on ``M z = b, L <= z <= U``."""

    REFACTOR = 64
    BLAND_AFTER = 50

    def __init__(self, M, b, L, U, tol: Tolerances):
        self.M, self.b, self.L, self.U, self.tol = M, b, L, U, tol
        self.m, self.n = M.shape
        self.iters = 0

    def start(self, basis: np.ndarray, z: np.ndarray):
        self.basis = basis.copy()
        self.z = z.copy()
        self.is_basic = np.zeros(self.n, bool)
        self.is_basic[basis] = True
        self.refactor()

    def refactor(self):
        B = self.M[:, self.basis]
        try:
            self.Binv = np.linalg.inv(B)
        except np.linalg.LinAlgError as exc:
            raise LpNumericalError("singular basis") from exc
        nonb = ~self.is_basic
        r = self.b - self.M[:, nonb] @ self.z[nonb]
        self.z[self.basis] = self.Binv @ r
        self.since_refactor = 0

    def duals(self, c):
        return c[self.basis] @ self.Binv

    def run(self, c) -> str:
        tol = self.tol
        degenerate_streak = 0
        while True:
            if self.iters >= tol.max_iter:
                raise LpNumericalError(f"simplex iteration limit {tol.max_iter} reached")
            y = self.duals(c)
            d = c - y @ self.M
            z, L, U = self.z, self.L, self.U
            nonb = ~self.is_basic
            can_up = nonb & (z < U - tol.feas_tol) & (d < -tol.dual_tol)
            can_dn = nonb & (z > L + tol.feas_tol) & (d > tol.dual_tol)
            cand = np.flatnonzero(can_up | can_dn)
            if cand.size == 0:
                return "optimal"
            bland = degenerate_streak >= self.BLAND_AFTER
            j = int(cand[0]) if bland else int(cand[np.argmax(np.abs(d[cand]))])
            direction = 1.0 if d[j] < 0 else -1.0

            w = self.Binv @ self.M[:, j]
            rate = -direction * w  # dz_B / dt
            xb = z[self.basis]
            lb_b, ub_b = L[self.basis], U[self.basis]
            t_best = U[j] - L[j]
            leave = -1
            with np.errstate(divide="ignore", invalid="ignore"):
                dec = rate < -tol.pivot_tol
                inc = rate > tol.pivot_tol
                ratios = np.full(self.m, INF)
                ratios[dec] = (xb[dec] - lb_b[dec]) / -rate[dec]
                ratios[inc] = (ub_b[inc] - xb[inc]) / rate[inc]
            ratios = np.maximum(ratios, 0.0)
            if ratios.size:
                rmin = ratios.min()
                if rmin < t_best:
                    ties = np.flatnonzero(ratios <= rmin + 1e-12 * max(1.0, abs(rmin)))
                    if bland:
                        leave = int(ties[np.argmin(self.basis[ties])])
                    else:
                        leave = int(ties[np.argmax(np.abs(w[ties]))])
                    t_best = ratios[leave]
            if not np.isfinite(t_best):
                self.unbounded_dir = (j, direction, w)
                return "unbounded"

            self.iters += 1
            degenerate_streak = degenerate_streak + 1 if t_best <= 1e-12 else 0
            z[j] += direction * t_best
            z[self.basis] = xb + t_best * rate
            if leave < 0:
                # bound flip of the entering variable
                z[j] = U[j] if direction > 0 else L[j]
                continue
            out = self.basis[leave]
            z[out] = lb_b[leave] if rate[leave] < 0 else ub_b[leave]
            self.basis[leave] = j
            self.is_basic[out] = False
            self.is_basic[j] = True
            piv = w[leave]
            row = self.Binv[leave] / piv
            self.Binv -= np.outer(w, row)
            self.Binv[leave] = row
            self.since_refactor += 1
            if self.since_refactor >= self.REFACTOR:
                self.refactor()


def _solve_native(p: LpProblem, tol: Tolerances) -> LpSolution:
    m, n = p.n_rows, p.n_vars
    A = p.dense()
    slack_lb = np.array([0.0 if s == "<" else (-INF if s == ">" else 0.0) for s in p.senses])
    slack_ub = np.array([INF if s == "<" else 0.0 for s in p.senses])
    L = np.concatenate([p.lb, slack_lb])
    U = np.concatenate([p.ub, slack_ub])
    if np.any(L > U + tol.feas_tol):
        return LpSolution("infeasible", farkas=None)

    z = np.zeros(n + m)
    for j in range(n):
        z[j] = L[j] if np.isfinite(L[j]) else (U[j] if np.isfinite(U[j]) else 0.0)
    resid = p.rhs - A @ z[:n]
    # crash: slack basic where its implied value fits, artificial otherwise
    slack_val = np.clip(resid, slack_lb, slack_ub)
    need = resid - slack_val
    art_rows = np.flatnonzero(np.abs(need) > 0)
    n_art = len(art_rows)
    art_cols = np.zeros((m, n_art))
    art_cols[art_rows, np.arange(n_art)] = np.sign(need[art_rows])
    M = np.hstack([A, np.eye(m), art_cols])
    Lf = np.concatenate([L, np.zeros(n_art)])
    Uf = np.concatenate([U, np.full(n_art, INF)])
    zf = np.concatenate([z, np.zeros(n_art)])
    zf[n:n + m] = slack_val
    zf[n + m:] = np.abs(need[art_rows])
    basis = np.arange(n, n + m)
    basis[art_rows] = n + m + np.arange(n_art)

    spx = _Simplex(M, p.rhs, Lf, Uf, tol)
    spx.start(basis, zf)
    if n_art:
        c1 = np.concatenate([np.zeros(n + m), np.ones(n_art)])
        status = spx.run(c1)
        infeas = float(spx.z[n + m:].sum())
        if status != "optimal":
            raise LpNumericalError("phase 1 did not terminate optimally")
        scale = 1.0 + float(np.abs(p.rhs).max(initial=0.0))
        if infeas > tol.feas_tol * scale:
            y1 = spx.duals(c1)
            return LpSolution("infeasible", farkas=y1, iterations=spx.iters)
        spx.U[n + m:] = 0.0
        spx.z[n + m:] = np.minimum(spx.z[n + m:], 0.0)
    c2 = np.concatenate([p.cost, np.zeros(m + n_art)])
    status = spx.run(c2)
    if status == "unbounded":
        j, direction, w = spx.unbounded_dir
        ray = np.zeros(n + m + n_art)
        ray[j] = direction
        ray[spx.basis] = -direction * w
        return LpSolution("unbounded", ray=ray[:n], iterations=spx.iters)
    spx.refactor()
    x = spx.z[:n].copy()
    y = spx.duals(c2)
    d = p.cost - A.T @ y
    return LpSolution("optimal", x=x, duals=y, reduced_costs=d,
                      objective=float(p.cost @ x), iterations=spx.iters)


# ---------------------------------------------------------------------------
# HiGHS adapter


def _solve_highs(p: LpProblem, tol: Tolerances) -> LpSolution:
    from scipy.optimize import linprog

    A = p.matrix()
    senses = np.array(p.senses)
    ub_rows = np.flatnonzero(senses != "=")
    eq_rows = np.flatnonzero(senses == "=")
    sign = np.where(senses[ub_rows] == "<", 1.0, -1.0)
    A_ub = sp.diags(sign) @ A[ub_rows] if len(ub_rows) else None
    b_ub = sign * p.rhs[ub_rows] if len(ub_rows) else None
    A_eq = A[eq_rows] if len(eq_rows) else None
    b_eq = p.rhs[eq_rows] if len(eq_rows) else None
    bounds = [(None if not np.isfinite(l) else l, None if not np.isfinite(u) else u)
              for l, u in zip(p.lb, p.ub)]
    res = linprog(p.cost, A_ub=A_ub, b_ub=b_ub, A_eq=A_eq, b_eq=b_eq, bounds=bounds,
                  method="highs", options={"primal_feasibility_tolerance": tol.feas_tol,
                                           "dual_feasibility_tolerance": tol.dual_tol})
    if res.status == 2:
        return LpSolution("infeasible")
    if res.status == 3:
        return LpSolution("unbounded")
    if res.status != 0:
        raise LpNumericalError(res.message)
    y = np.zeros(p.n_rows)
    if len(ub_rows):
        y[ub_rows] = sign * res.ineqlin.marginals
    if len(eq_rows):
        y[eq_rows] = res.eqlin.marginals
    d = p.cost - A.T @ y
    return LpSolution("optimal", x=res.x, duals=y, reduced_costs=d,
                      objective=float(res.fun), iterations=int(res.nit))


BACKENDS = {"native": _solve_native, "highs": _solve_highs}


def solve_lp(p: LpProblem, tol: Tolerances = DEFAULT_TOL, backend: str = "native") -> LpSolution:
    """Solve ``p``; raises :class:`LpNumericalError` on solver breakdown."""
    try:
        fn = BACKENDS[backend]
    except KeyError:
        raise ValueError(f"unknown LP backend {backend!r}") from None
    return fn(p, tol)


def check_certificates(p: LpProblem, s: LpSolution) -> ResidualReport:
    """Primal/dual residuals and duality gap of a claimed optimal pair.

    Reduced costs are recomputed from ``s.duals`` so the report does not trust
    the solver's own bookkeeping.
    """
    A = p.matrix()
    x, y = np.asarray(s.x, float), np.asarray(s.duals, float)
    ax = A @ x
    senses = np.array(p.senses)
    viol = np.zeros(p.n_rows)
    viol[senses == "<"] = np.maximum(ax - p.rhs, 0)[senses == "<"]
    viol[senses == ">"] = np.maximum(p.rhs - ax, 0)[senses == ">"]
    viol[senses == "="] = np.abs(ax - p.rhs)[senses == "="]
    bound_viol = np.maximum(np.maximum(p.lb - x, x - p.ub), 0)
    primal = float(max(viol.max(initial=0.0), bound_viol.max(initial=0.0)))

    d = p.cost - A.T @ y
    sign_viol = np.zeros(p.n_rows)
    sign_viol[senses == "<"] = np.maximum(y, 0)[senses == "<"]
    sign_viol[senses == ">"] = np.maximum(-y, 0)[senses == ">"]
    d_pos, d_neg = np.maximum(d, 0), np.minimum(d, 0)
    # a positive reduced cost needs a finite lower bound, a negative one a finite upper
    unsupported = np.where(np.isfinite(p.lb), 0, d_pos) + np.where(np.isfinite(p.ub), 0, -d_neg)
    dual = float(max(sign_viol.max(initial=0.0), unsupported.max(initial=0.0)))

    lbf = np.where(np.isfinite(p.lb), p.lb, 0.0)
    ubf = np.where(np.isfinite(p.ub), p.ub, 0.0)
    dual_obj = float(p.rhs @ y + lbf @ d_pos + ubf @ d_neg)
    primal_obj = float(p.cost @ x)
    row_slack = np.abs(ax - p.rhs)
    comp_rows = np.abs(y) * row_slack
    comp_vars = d_pos * np.abs(x - lbf) * np.isfinite(p.lb) + (-d_neg) * np.abs(ubf - x) * np.isfinite(p.ub)
    comp = float(max(comp_rows.max(initial=0.0), comp_vars.max(initial=0.0)))
    return ResidualReport(primal_residual=primal, dual_residual=dual, complementarity=comp,
                          gap=abs(primal_obj - dual_obj), primal_objective=primal_obj,
                          dual_objective=dual_obj)


def to_lp_format(p: LpProblem) -> str:
    """CPLEX-LP text export, for cross-checking with external solvers."""

    def term(coef: float, name: str, first: bool) -> str:
        sign = "-" if coef < 0 else ("" if first else "+")
        return f"{sign} {abs(coef):.17g} {name}".strip()

    def clean(name: str) -> str:
        return name.replace("[", "(").replace("]", ")").replace(",", "_")

    vn = [clean(v) for v in p.var_names]
    lines = ["\\ exported by gridsec", "Minimize", " obj:"]
    obj = [term(c, vn[j], not k) for k, (j, c) in enumerate(
        (j, c) for j, c in enumerate(p.cost) if c != 0)]
    lines.append("  " + (" ".join(obj) if obj else "0 " + vn[0]))
    lines.append("Subject To")
    A = p.matrix().tocsr()
    op = {"<": "<=", ">": ">=", "=": "="}
    for i in range(p.n_rows):
        lo, hi = A.indptr[i], A.indptr[i + 1]
        terms = [term(A.data[k], vn[A.indices[k]], k == lo) for k in range(lo, hi)]
        body = " ".join(terms) if terms else f"0 {vn[0]}"
        lines.append(f" {clean(p.con_names[i])}: {body} {op[p.senses[i]]} {p.rhs[i]:.17g}")
    lines.append("Bounds")
    for j in range(p.n_vars):
        lo, hi = p.lb[j], p.ub[j]
        if not np.isfinite(lo) and not np.isfinite(hi):
            lines.append(f" {vn[j]} free")
        else:
            los = "-inf" if not np.isfinite(lo) else f"{lo:.17g}"
            his = "+inf" if not np.isfinite(hi) else f"{hi:.17g}"
            lines.append(f" {los} <= {vn[j]} <= {his}")
    lines.append("End")
    return "\n".join(lines) + "\n"
