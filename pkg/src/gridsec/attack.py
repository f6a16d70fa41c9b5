"""Attacker-defender bi-level LP assembly and independent oracles.

Everything is stated in min/min canonical form::

    min_u  c1 @ u + d1 @ v* + d1_const
    s.t.   A1 u >= b1
           v* in argmin_v { d2 @ v : A2 u + A3 v >= b2 }

For an attack, ``u = (c+, c-)`` over the non-slack buses and ``v`` holds the
SCED variables.  The attacker's "maximize flow - sigma*|c|_1" is negated, so
the attacker's value is ``-objective``.  Oracles use an LP backend different
from the default native simplex used by the Benders engine.
"""

from __future__ import annotations

import heapq
import itertools
import json
import logging
import math
from dataclasses import dataclass, field, replace

import numpy as np

from .grid_model import GridCase
from .lp_core import INF, LpBuilder, LpProblem, Tolerances, solve_lp
from .network import DistFactors, active_limits
from .rtca import BASE, SecurityConstraintSet
from .sced import ScedModel, ScedParams, sced_model

log = logging.getLogger(__name__)

DEFAULT_SIGMA = 1e-3


class AttackSpecError(ValueError):
    """Attack specification inconsistent with the case or constraint set."""


class OracleError(RuntimeError):
    """Oracle precondition not met (dimension, node budget, big-M)."""


@dataclass(frozen=True)
class AttackSpec:
    target: str
    contingency: str = BASE
    n1: float = 1.0
    ls: float = 0.1
    sigma: float = DEFAULT_SIGMA

    def __post_init__(self):
        if not self.n1 > 0:
            raise ValueError("N1 (l1 budget) must be > 0")
        if not 0 < self.ls <= 1:
            raise ValueError("load shift L_S must lie in (0, 1]")
        if not self.sigma > 0:
            raise ValueError("sigma must be > 0")


@dataclass(frozen=True, eq=False)
class BilevelProblem:
    c1: np.ndarray
    d1: np.ndarray
    A1: np.ndarray
    b1: np.ndarray
    A2: np.ndarray
    A3: np.ndarray
    b2: np.ndarray
    d2: np.ndarray
    d1_const: float = 0.0
    u_names: tuple[str, ...] = ()
    v_names: tuple[str, ...] = ()
    row_names: tuple[str, ...] = ()
    # attack-specific metadata (None for generic instances)
    u_to_c: np.ndarray | None = None
    u_to_shift: np.ndarray | None = None
    sced: ScedModel | None = None
    target_row: np.ndarray | None = None
    orientation: float = 1.0
    mva_base: float = 1.0

    def __post_init__(self):
        nu, nv, m1, m2 = len(self.c1), len(self.d1), len(self.b1), len(self.b2)
        if self.A1.shape != (m1, nu) or self.A2.shape != (m2, nu) or self.A3.shape != (m2, nv):
            raise ValueError("bilevel matrix dimensions inconsistent")
        if len(self.d2) != nv:
            raise ValueError("d2 length must match v")

    @property
    def n_u(self) -> int:
        return len(self.c1)

    @property
    def n_v(self) -> int:
        return len(self.d1)

    def objective(self, u, v) -> float:
        return float(self.c1 @ u + self.d1 @ v + self.d1_const)

    def first_level_feasible(self, u, tol: float = 1e-7) -> bool:
        return bool(np.all(self.A1 @ u >= self.b1 - tol * (1 + np.abs(self.b1))))

    def lower_lp(self, u) -> LpProblem:
        """Second-level LP at fixed ``u``."""
        return LpProblem.from_dense(self.d2, self.A3, [">"] * len(self.b2),
                                    self.b2 - self.A2 @ u,
                                    lb=np.full(self.n_v, -INF), ub=np.full(self.n_v, INF))

    def to_dict(self) -> dict:
        def trip(M):
            r, c = np.nonzero(M)
            return {"shape": list(M.shape), "rows": r.tolist(), "cols": c.tolist(),
                    "vals": M[r, c].tolist()}
        return {
            "form": "min c1'u + d1'v + d1_const s.t. A1 u >= b1; v in argmin d2'v s.t. A2 u + A3 v >= b2",
            "c1": self.c1.tolist(), "d1": self.d1.tolist(), "d1_const": self.d1_const,
            "A1": trip(self.A1), "b1": self.b1.tolist(),
            "A2": trip(self.A2), "A3": trip(self.A3), "b2": self.b2.tolist(),
            "d2": self.d2.tolist(), "u_names": list(self.u_names),
            "v_names": list(self.v_names), "row_names": list(self.row_names),
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict())

    @classmethod
    def from_dict(cls, d: dict) -> "BilevelProblem":
        def dense(t):
            M = np.zeros(t["shape"])
            M[t["rows"], t["cols"]] = t["vals"]
            return M
        return cls(c1=np.array(d["c1"], float), d1=np.array(d["d1"], float),
                   A1=dense(d["A1"]), b1=np.array(d["b1"], float), A2=dense(d["A2"]),
                   A3=dense(d["A3"]), b2=np.array(d["b2"], float), d2=np.array(d["d2"], float),
                   d1_const=float(d["d1_const"]), u_names=tuple(d["u_names"]),
                   v_names=tuple(d["v_names"]), row_names=tuple(d["row_names"]))


def target_flow_row(factors: DistFactors, target: str, contingency: str) -> np.ndarray:
    """Row mapping bus injections (MW) to the physical flow on the target."""
    l = factors.branch_pos(target)
    if contingency == BASE:
        return factors.ptdf[l].copy()
    k = factors.branch_pos(contingency)
    if k == l:
        raise AttackSpecError("target line cannot be its own contingency")
    return factors.otdf(k)[l].copy()


def build_bilevel(case: GridCase, factors: DistFactors, constraints: SecurityConstraintSet,
                  spec: AttackSpec, params: ScedParams = ScedParams(),
                  require_monitored: bool = True) -> BilevelProblem:
    """Map the attack problem onto the canonical bi-level form.

    Every SCED equality becomes a pair of ``>=`` rows.  The attack enters the
    second level only through ``A2 u`` (false-load injection shift).
    """
    ids = set(case.branch_ids)
    for b in (spec.target,) + (() if spec.contingency == BASE else (spec.contingency,)):
        if b not in ids:
            raise AttackSpecError(f"unknown branch {b!r}")
    if require_monitored and (spec.target, spec.contingency) not in constraints.keys():
        raise AttackSpecError(
            f"target {spec.target!r} is not monitored under {spec.contingency!r}")
    try:
        row = target_flow_row(factors, spec.target, spec.contingency)
    except ValueError as exc:
        raise AttackSpecError(str(exc)) from exc

    model = sced_model(case, factors, constraints, params)
    nb = case.n_bus
    keep = np.delete(np.arange(nb), case.slack_index)
    n_c = len(keep)
    u_to_c = np.zeros((nb, 2 * n_c))
    u_to_c[keep, np.arange(n_c)] = 1.0
    u_to_c[keep, n_c + np.arange(n_c)] = -1.0
    H = factors.net.H.toarray()
    u_to_shift = case.mva_base * H @ u_to_c

    A_v, A_s = model.A_v.toarray(), model.A_s.toarray() @ u_to_shift
    A3, A2, b2, names = [], [], [], []
    for i, (sense, name) in enumerate(zip(model.senses, model.con_names)):
        if sense in (">", "="):
            A3.append(A_v[i]); A2.append(A_s[i]); b2.append(model.rhs[i])
            names.append(name if sense == ">" else name + ":ge")
        if sense in ("<", "="):
            A3.append(-A_v[i]); A2.append(-A_s[i]); b2.append(-model.rhs[i])
            names.append(name if sense == "<" else name + ":le")

    loads = case.loads
    A1 = np.vstack([np.eye(2 * n_c), -np.ones((1, 2 * n_c)), u_to_shift, -u_to_shift])
    b1 = np.concatenate([np.zeros(2 * n_c), [-spec.n1], -spec.ls * loads, -spec.ls * loads])

    gb = case.gen_bus_matrix()
    flow0 = float(row @ (gb @ case.p0 - loads))
    orient = 1.0 if flow0 >= 0 else -1.0
    d1 = np.zeros(model.n_vars)
    d1[model.pg] = -orient * (row @ gb) / case.mva_base
    d1_const = orient * float(row @ loads) / case.mva_base
    c1 = np.full(2 * n_c, spec.sigma)

    bus_ids = case.bus_ids
    u_names = tuple([f"c+[{bus_ids[i]}]" for i in keep] + [f"c-[{bus_ids[i]}]" for i in keep])
    return BilevelProblem(c1=c1, d1=d1, A1=A1, b1=b1, A2=np.array(A2), A3=np.array(A3),
                          b2=np.array(b2), d2=model.cost.copy(), d1_const=d1_const,
                          u_names=u_names, v_names=model.var_names, row_names=tuple(names),
                          u_to_c=u_to_c, u_to_shift=u_to_shift, sced=model,
                          target_row=row, orientation=orient, mva_base=case.mva_base)


# ---------------------------------------------------------------------------
# oracles


@dataclass
class OracleResult:
    u: np.ndarray
    v: np.ndarray
    objective: float
    evaluated: int = 0
    big_m: float | None = None
    status: str = "optimal"


def optimistic_response(bp: BilevelProblem, u, backend: str = "highs",
                        tol: Tolerances = Tolerances()) -> np.ndarray | None:
    """Second-level optimum at ``u``, ties broken in the attacker's favour.

    Two sequential LPs: the defender's optimum value, then the best ``d1``
    over that optimal face.  Returns None when the second level is infeasible.
    """
    lp = bp.lower_lp(u)
    s = solve_lp(lp, tol, backend)
    if not s.optimal:
        return None
    z = s.objective
    A = np.vstack([bp.A3, -bp.d2[None, :]])
    rhs = np.concatenate([bp.b2 - bp.A2 @ u, [-(z + 1e-9 * (1 + abs(z)))]])
    face = LpProblem.from_dense(bp.d1, A, [">"] * len(rhs), rhs,
                                lb=np.full(bp.n_v, -INF), ub=np.full(bp.n_v, INF))
    s2 = solve_lp(face, tol, backend)
    return s2.x if s2.optimal else s.x


def u_box(bp: BilevelProblem, backend: str = "highs") -> np.ndarray:
    """Per-coordinate bounds of the first-level feasible set, shape (n_u, 2)."""
    box = np.zeros((bp.n_u, 2))
    for i in range(bp.n_u):
        for j, sgn in enumerate((1.0, -1.0)):
            c = np.zeros(bp.n_u)
            c[i] = sgn
            lp = LpProblem.from_dense(c, bp.A1, [">"] * len(bp.b1), bp.b1,
                                      lb=np.full(bp.n_u, -INF), ub=np.full(bp.n_u, INF))
            s = solve_lp(lp, backend=backend)
            if s.status == "unbounded":
                raise OracleError("first-level feasible set is unbounded")
            if not s.optimal:
                raise OracleError("first-level feasible set is empty")
            box[i, j] = sgn * s.objective
    return box


def enumerate_oracle(bp: BilevelProblem, resolution: float, backend: str = "highs",
                     max_dim: int = 4) -> OracleResult:
    """Grid search over the first-level box; returns the best grid point.

    The result is attained by an actual (u, v*) pair, so in the attacker's
    maximize sense it is a lower bound on the bi-level optimum.
    """
    if bp.n_u > max_dim:
        raise OracleError(f"dim(u)={bp.n_u} exceeds enumeration limit {max_dim}")
    box = u_box(bp, backend)
    axes = []
    for lo, hi in box:
        n = max(1, int(math.ceil((hi - lo) / resolution - 1e-9))) + 1
        axes.append(np.linspace(lo, hi, n) if hi > lo else np.array([lo]))
    best: OracleResult | None = None
    count = 0
    for pt in itertools.product(*axes):
        u = np.array(pt)
        if not bp.first_level_feasible(u, 1e-9):
            continue
        v = optimistic_response(bp, u, backend)
        count += 1
        if v is None:
            continue
        obj = bp.objective(u, v)
        if best is None or obj < best.objective - 1e-12:
            best = OracleResult(u=u, v=v, objective=obj)
    if best is None:
        raise OracleError("no grid point admits a feasible second level")
    best.evaluated = count
    return best


def _kkt_solve(bp: BilevelProblem, big_m: float, max_nodes: int, backend: str,
               comp_tol: float) -> OracleResult:
    nu, nv, m2 = bp.n_u, bp.n_v, len(bp.b2)
    # variable layout: u | v | beta | z
    U = np.arange(nu)
    V = nu + np.arange(nv)
    B = nu + nv + np.arange(m2)
    Z = nu + nv + m2 + np.arange(m2)
    n = nu + nv + 2 * m2
    rows = []
    for i in range(len(bp.b1)):
        rows.append((np.r_[U], bp.A1[i], ">", bp.b1[i]))
    for i in range(m2):
        rows.append((np.r_[U, V], np.r_[bp.A2[i], bp.A3[i]], ">", bp.b2[i]))
        # slack_i <= M (1 - z_i)
        rows.append((np.r_[U, V, Z[i]], np.r_[bp.A2[i], bp.A3[i], big_m], "<", bp.b2[i] + big_m))
        # beta_i <= M z_i
        rows.append((np.r_[B[i], Z[i]], np.r_[1.0, -big_m], "<", 0.0))
    for j in range(nv):
        rows.append((B, bp.A3[:, j], "=", bp.d2[j]))
    A = np.zeros((len(rows), n))
    for r, (idx, coef, _, _) in enumerate(rows):
        np.add.at(A[r], idx, coef)
    senses = [r[2] for r in rows]
    rhs = np.array([r[3] for r in rows])
    cost = np.zeros(n)
    cost[U], cost[V] = bp.c1, bp.d1
    lb = np.r_[np.full(nu + nv, -INF), np.zeros(2 * m2)]
    ub_base = np.r_[np.full(nu + nv, INF), np.full(m2, big_m), np.ones(m2)]

    incumbent: OracleResult | None = None
    counter = itertools.count()
    heap = [(-INF, next(counter), np.zeros(m2, int) - 1)]  # -1 free, 0 / 1 fixed
    nodes = 0
    while heap:
        bound, _, fix = heapq.heappop(heap)
        if incumbent is not None and bound >= incumbent.objective - bp.d1_const - 1e-9:
            continue
        nodes += 1
        if nodes > max_nodes:
            raise OracleError(f"complementarity search exceeded {max_nodes} nodes")
        lo, hi = lb.copy(), ub_base.copy()
        lo[Z[fix == 1]] = 1.0
        hi[Z[fix == 0]] = 0.0
        lp = LpProblem.from_dense(cost, A, senses, rhs, lo, hi)
        s = solve_lp(lp, backend=backend)
        if not s.optimal:
            continue
        if incumbent is not None and s.objective >= incumbent.objective - bp.d1_const - 1e-9:
            continue
        x = s.x
        u, v, beta = x[U], x[V], x[B]
        slack = bp.A2 @ u + bp.A3 @ v - bp.b2
        scale = 1.0 + np.abs(bp.b2)
        viol = np.minimum(beta, slack / scale)
        viol[fix >= 0] = 0.0
        i = int(np.argmax(viol))
        if viol[i] <= comp_tol:
            obj = s.objective + bp.d1_const
            res = OracleResult(u=u, v=v, objective=obj, big_m=big_m)
            res.beta = beta
            incumbent = res
            continue
        for val in (1, 0):
            child = fix.copy()
            child[i] = val
            heapq.heappush(heap, (s.objective, next(counter), child))
    if incumbent is None:
        raise OracleError("bi-level problem is infeasible")
    incumbent.evaluated = nodes
    return incumbent


def kkt_milp_oracle(bp: BilevelProblem, big_m: float = 1e4, retries: int = 3,
                    max_nodes: int = 20000, backend: str = "highs",
                    comp_tol: float = 1e-8) -> OracleResult:
    """Exact optimistic bi-level optimum via the big-M KKT reformulation.

    The MILP over complementarity indicators is solved by best-first branching
    over complementarity patterns with LP relaxations.  If a multiplier or a
    slack reaches big-M at the optimum, M is doubled (up to ``retries`` times).
    """
    M = big_m
    for attempt in range(retries + 1):
        res = _kkt_solve(bp, M, max_nodes, backend, comp_tol)
        slack = bp.A2 @ res.u + bp.A3 @ res.v - bp.b2
        hit = max(float(np.max(res.beta, initial=0.0)), float(np.max(slack, initial=0.0)))
        if hit < M * (1 - 1e-6):
            return res
        log.info("big-M %.3g reached by a multiplier or slack; doubling", M)
        M *= 2
    raise OracleError(f"big-M too small: bound {M / 2:g} still active after {retries} retries")
