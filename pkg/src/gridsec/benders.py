"""Modified Benders' decomposition for bi-level LPs in canonical min/min form.

Slave problem at fixed ``u`` (variables ``v`` free, ``beta >= 0``)::

    min  d1 @ v
    s.t. (b2 - A2 u) @ beta - d2 @ v >= 0      (delta)
         A3 v >= b2 - A2 u                     (gamma)
         A3.T beta = d2                        (lambda)

Its optimal value equals ``gamma @ (b2 - A2 u) + lambda @ d2``; the same
expression with ``u`` free is the optimality cut added to the master problem.
Cuts and ``alpha`` carry the constant ``d1_const`` so that ``alpha`` tracks
the full second-level contribution to the objective.
"""

from __future__ import annotations

import hashlib
import json
import logging
from dataclasses import dataclass, field

import numpy as np

from .attack import BilevelProblem
from .lp_core import DEFAULT_TOL, INF, LpBuilder, LpNumericalError, Tolerances, solve_lp

log = logging.getLogger(__name__)

ALPHA_FLOOR = -1e6
DEFAULT_EPS = 5e-5
CUT_IDENTITY_TOL = 1e-6


class BendersError(RuntimeError):
    pass


class MasterInfeasible(BendersError):
    """First level plus feasibility cuts admit no ``u``."""


class CutIdentityError(BendersError):
    """An optimality cut failed to reproduce the slave objective at its own ``u``."""


@dataclass(frozen=True)
class Cut:
    kind: str              # "optimality" | "feasibility"
    const: float           # gamma @ b2 + lambda @ d2 (+ d1_const for optimality cuts)
    coef: np.ndarray       # -A2.T @ gamma, i.e. the cut reads  alpha >= const + coef @ u

    def value(self, u) -> float:
        return float(self.const + self.coef @ u)

    def key(self) -> str:
        data = np.round(np.r_[self.const, self.coef], 9).tobytes() + self.kind.encode()
        return hashlib.sha1(data).hexdigest()


@dataclass
class SlaveResult:
    status: str
    v: np.ndarray | None = None
    beta: np.ndarray | None = None
    delta: float = 0.0
    gamma: np.ndarray | None = None
    lam: np.ndarray | None = None
    objective: float = float("nan")   # d1 @ v, no constant
    slacks: tuple | None = None

    @property
    def optimal(self) -> bool:
        return self.status == "optimal"


def _check_u(bp: BilevelProblem, u) -> np.ndarray:
    u = np.asarray(u, float)
    if u.shape != (bp.n_u,):
        raise ValueError("u has the wrong length")
    if not bp.first_level_feasible(u, 1e-7):
        raise ValueError("u violates the first-level constraints A1 u >= b1")
    return u


def _slave_lp(bp: BilevelProblem, u, relax: bool, penalty: float, phase1: bool):
    m2, nv = len(bp.b2), bp.n_v
    rhs2 = bp.b2 - bp.A2 @ u
    lb = LpBuilder()
    V = lb.vars("v", nv, lb=-INF, cost=0.0 if phase1 else bp.d1)
    Bt = lb.vars("beta", m2, lb=0.0)
    if relax:
        S1 = lb.var("s1", 0.0, INF, penalty)
        S2 = lb.vars("s2", m2, 0.0, INF, penalty)
        S3p = lb.vars("s3+", nv, 0.0, INF, penalty)
        S3m = lb.vars("s3-", nv, 0.0, INF, penalty)
    idx = np.r_[Bt, V]
    coef = np.r_[rhs2, -bp.d2]
    if relax:
        idx, coef = np.r_[idx, S1], np.r_[coef, 1.0]
    lb.row("delta", idx, coef, ">", 0.0)
    for i in range(m2):
        if relax:
            lb.row(f"gamma[{i}]", np.r_[V, S2[i]], np.r_[bp.A3[i], 1.0], ">", rhs2[i])
        else:
            lb.row(f"gamma[{i}]", V, bp.A3[i], ">", rhs2[i])
    for j in range(nv):
        if relax:
            lb.row(f"lambda[{j}]", np.r_[Bt, S3p[j], S3m[j]],
                   np.r_[bp.A3[:, j], 1.0, -1.0], "=", bp.d2[j])
        else:
            lb.row(f"lambda[{j}]", Bt, bp.A3[:, j], "=", bp.d2[j])
    return lb.build(), V, Bt


def _unpack(bp, sol, V, Bt, m2, nv) -> SlaveResult:
    y = sol.duals
    return SlaveResult(status="optimal", v=sol.x[V], beta=sol.x[Bt], delta=float(y[0]),
                       gamma=y[1:1 + m2].copy(), lam=y[1 + m2:1 + m2 + nv].copy(),
                       objective=float(bp.d1 @ sol.x[V]))


def solve_sp(bp: BilevelProblem, u, tol: Tolerances = DEFAULT_TOL,
             backend: str = "native") -> SlaveResult:
    u = _check_u(bp, u)
    lp, V, Bt = _slave_lp(bp, u, relax=False, penalty=0.0, phase1=False)
    sol = solve_lp(lp, tol, backend)
    if sol.status == "infeasible":
        return SlaveResult(status="infeasible")
    if sol.status == "unbounded":
        raise BendersError("slave problem unbounded; second level admits unbounded d1 @ v")
    return _unpack(bp, sol, V, Bt, len(bp.b2), bp.n_v)


def relaxation_penalty(bp: BilevelProblem) -> float:
    return 1e3 * max(float(np.abs(bp.d1).max(initial=0.0)), 1e-12)


def solve_relaxed_sp(bp: BilevelProblem, u, penalty: float | None = None,
                     phase1: bool = False, tol: Tolerances = DEFAULT_TOL,
                     backend: str = "native") -> SlaveResult:
    """Slack-relaxed slave; always feasible.

    Slacks are priced at ``penalty`` (default ``1e3 * max|d1|``).  With
    ``phase1=True`` the ``d1 @ v`` term is dropped, leaving a pure
    minimum-infeasibility problem whose duals give a classical feasibility cut.
    """
    u = _check_u(bp, u)
    w = relaxation_penalty(bp) if penalty is None else penalty
    if phase1:
        w = 1.0
    lp, V, Bt = _slave_lp(bp, u, relax=True, penalty=w, phase1=phase1)
    sol = solve_lp(lp, tol, backend)
    if not sol.optimal:
        raise LpNumericalError(f"relaxed slave problem returned {sol.status}")
    m2, nv = len(bp.b2), bp.n_v
    res = _unpack(bp, sol, V, Bt, m2, nv)
    x = sol.x
    off = nv + m2
    s1 = float(x[off])
    s2 = x[off + 1:off + 1 + m2]
    s3 = x[off + 1 + m2:off + 1 + m2 + nv] - x[off + 1 + m2 + nv:off + 1 + m2 + 2 * nv]
    res.slacks = (s1, s2.copy(), s3.copy())
    res.status = "relaxed"
    return res


def optimality_cut(bp: BilevelProblem, sp: SlaveResult) -> Cut:
    return Cut("optimality", float(sp.gamma @ bp.b2 + sp.lam @ bp.d2 + bp.d1_const),
               -(bp.A2.T @ sp.gamma))


def feasibility_cut(bp: BilevelProblem, sp: SlaveResult) -> Cut:
    return Cut("feasibility", float(sp.gamma @ bp.b2 + sp.lam @ bp.d2), -(bp.A2.T @ sp.gamma))


@dataclass
class BendersState:
    j: int = 0
    u: np.ndarray | None = None
    alpha: float = ALPHA_FLOOR
    cuts: list[Cut] = field(default_factory=list)
    cut_keys: set[str] = field(default_factory=set)
    sp_status: list[str] = field(default_factory=list)
    gap: float = INF
    max_identity_residual: float = 0.0

    def add_cut(self, cut: Cut) -> bool:
        """Append ``cut``; returns False when an identical cut is already present."""
        k = cut.key()
        if k in self.cut_keys:
            return False
        self.cut_keys.add(k)
        self.cuts.append(cut)
        return True


def add_cut(state: BendersState, cut: Cut) -> bool:
    return state.add_cut(cut)


def solve_mp(bp: BilevelProblem, state: BendersState, alpha_floor: float = ALPHA_FLOOR,
             tol: Tolerances = DEFAULT_TOL, backend: str = "native") -> tuple[np.ndarray, float]:
    """Master problem: min c1 @ u + alpha over A1 u >= b1 and the accumulated cuts."""
    lb = LpBuilder()
    U = lb.vars("u", bp.n_u, lb=-INF, cost=bp.c1)
    a = lb.var("alpha", alpha_floor, INF, 1.0)
    for i in range(len(bp.b1)):
        lb.row(f"A1[{i}]", U, bp.A1[i], ">", bp.b1[i])
    for n, cut in enumerate(state.cuts):
        if cut.kind == "optimality":
            # alpha - coef @ u >= const
            lb.row(f"cut{n}", np.r_[U, a], np.r_[-cut.coef, 1.0], ">", cut.const)
        else:
            # 0 >= const + coef @ u
            lb.row(f"cut{n}", U, -cut.coef, ">", cut.const)
    sol = solve_lp(lb.build(), tol, backend)
    if sol.status == "infeasible":
        raise MasterInfeasible("master problem infeasible: first level contradicts feasibility cuts")
    if not sol.optimal:
        raise BendersError(f"master problem {sol.status}")
    return sol.x[U], float(sol.x[a])


@dataclass
class TraceRecord:
    j: int
    u_norm1: float
    alpha: float
    sp_objective: float | None
    cut_type: str
    gap: float

    def to_dict(self) -> dict:
        return {"j": self.j, "u_norm1": self.u_norm1, "alpha": self.alpha,
                "sp_objective": self.sp_objective, "cut_type": self.cut_type, "gap": self.gap}


@dataclass
class BendersResult:
    u: np.ndarray | None
    v: np.ndarray | None
    objective: float          # c1 @ u + d1 @ v + d1_const of the best certified pair
    gap: float
    iterations: int
    status: str               # converged | max_iter | stall | infeasible
    trace: list[TraceRecord]
    cuts: list[Cut]
    max_identity_residual: float = 0.0

    @property
    def converged(self) -> bool:
        return self.status == "converged"

    @property
    def attacker_value(self) -> float:
        """Objective in the attacker's maximize sense."""
        return -self.objective

    def trace_jsonl(self) -> str:
        return "".join(json.dumps(r.to_dict()) + "\n" for r in self.trace)


def _gap(sp_value: float, alpha: float) -> float:
    if abs(alpha) < 1e-9:
        return abs(sp_value - alpha)
    return abs((sp_value - alpha) / alpha)


def mbd(bp: BilevelProblem, eps: float = DEFAULT_EPS, max_iter: int = 200, u0=None,
        tol: Tolerances = DEFAULT_TOL, backend: str = "native",
        alpha_floor: float = ALPHA_FLOOR) -> BendersResult:
    """Run the SP -> cut -> MP loop from ``u0`` (default 0)."""
    if not eps > 0:
        raise ValueError("eps must be positive")
    u = np.zeros(bp.n_u) if u0 is None else np.asarray(u0, float)
    u = _check_u(bp, u)
    state = BendersState(u=u)
    trace: list[TraceRecord] = []
    best = (INF, None, None)
    status = "max_iter"
    for j in range(1, max_iter + 1):
        state.j = j
        sp = solve_sp(bp, u, tol, backend)
        state.sp_status.append(sp.status)
        sp_value = None
        if sp.optimal:
            cut = optimality_cut(bp, sp)
            sp_value = sp.objective + bp.d1_const
            resid = abs(cut.value(u) - sp_value)
            state.max_identity_residual = max(state.max_identity_residual, resid)
            if resid > CUT_IDENTITY_TOL * max(1.0, abs(sp_value)):
                raise CutIdentityError(
                    f"iteration {j}: cut value {cut.value(u):.12g} != slave objective {sp_value:.12g}")
            obj = float(bp.c1 @ u) + sp_value
            if obj < best[0]:
                best = (obj, u.copy(), sp.v.copy())
        else:
            # minimum-infeasibility duals carry no d1 term, so the cut does not
            # also shave off feasible u the way penalised duals can
            rel = solve_relaxed_sp(bp, u, phase1=True, tol=tol, backend=backend)
            cut = feasibility_cut(bp, rel)
            if cut.value(u) <= 1e-9:
                rel = solve_relaxed_sp(bp, u, tol=tol, backend=backend)
                cut = feasibility_cut(bp, rel)
        new = state.add_cut(cut)
        try:
            u_next, alpha = solve_mp(bp, state, alpha_floor, tol, backend)
        except MasterInfeasible:
            if best[1] is None:
                return BendersResult(None, None, INF, INF, j, "infeasible", trace, state.cuts,
                                     state.max_identity_residual)
            status = "infeasible"
            break
        state.alpha = alpha
        gap = _gap(sp_value, alpha) if sp_value is not None else INF
        state.gap = gap
        trace.append(TraceRecord(j, float(np.abs(u).sum()), alpha, sp_value, cut.kind, gap))
        log.debug("mbd j=%d alpha=%.9g sp=%s gap=%.3g", j, alpha, sp_value, gap)
        if gap < eps:
            status = "converged"
            # certify the master's final u as well; the reported pair must be SP-optimal
            if not np.allclose(u_next, u, atol=1e-10, rtol=0):
                fin = solve_sp(bp, u_next, tol, backend)
                if fin.optimal:
                    obj = float(bp.c1 @ u_next) + fin.objective + bp.d1_const
                    if obj < best[0]:
                        best = (obj, u_next.copy(), fin.v.copy())
            break
        if not new and np.allclose(u_next, u, atol=1e-8, rtol=0):
            status = "stall"
            break
        u = u_next
        state.u = u
    obj, ub, vb = best
    return BendersResult(u=ub, v=vb, objective=obj, gap=state.gap, iterations=state.j,
                         status=status, trace=trace, cuts=state.cuts,
                         max_identity_residual=state.max_identity_residual)


def mbd_multistart(bp: BilevelProblem, starts: int = 0, seed: int = 0, **kw) -> BendersResult:
    """Best certified result over the zero start plus ``starts`` random feasible starts."""
    result = mbd(bp, **kw)
    if starts <= 0:
        return result
    from .attack import u_box
    rng = np.random.default_rng(seed)
    box = u_box(bp, backend="native")
    tries = 0
    found = 0
    while found < starts and tries < 50 * starts:
        tries += 1
        u0 = rng.uniform(box[:, 0], box[:, 1])
        # shrink toward the origin until first-level feasible (0 is feasible for attacks)
        for _ in range(30):
            if bp.first_level_feasible(u0, 1e-9):
                break
            u0 *= 0.5
        else:
            continue
        found += 1
        r = mbd(bp, u0=u0, **kw)
        if r.u is not None and (result.u is None or r.objective < result.objective - 1e-12):
            result = r
    return result
