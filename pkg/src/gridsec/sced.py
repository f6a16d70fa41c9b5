"""Security-constrained economic dispatch (the defender's problem).

The model is kept in the form ``A_v v + A_s s (sense) rhs`` where ``v`` are
the dispatch variables ``[P_G, R_G, P̄, P̄_k]`` and ``s`` is the MW injection
shift caused by false loads (``s = mva_base * H c``).  :func:`build_sced`
fixes ``s`` and returns an LP; :mod:`gridsec.attack` keeps ``s`` symbolic.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field

import numpy as np
import scipy.sparse as sp

from .grid_model import GridCase
from .lp_core import DEFAULT_TOL, INF, LpProblem, LpSolution, Tolerances, solve_lp
from .network import DistFactors
from .rtca import BASE, SecurityConstraintSet

CTG_FLOW_FORMS = ("paper", "textbook")


class ScedInputError(ValueError):
    """Constraint set or shift inconsistent with the case."""


@dataclass(frozen=True)
class ScedParams:
    t_h: float = 15.0          # look-ahead, minutes
    t_r: float = 10.0          # spinning reserve window, minutes
    tau: float = 0.90
    tau_base: float | None = None
    kv_min: float = 100.0
    st_factor: float | None = 1.15
    loss_mode: str = "uniform"
    ctg_flow_form: str = "paper"

    def __post_init__(self):
        if not (self.t_h > 0 and self.t_r > 0):
            raise ValueError("t_h and t_r must be positive")
        if not 0 < self.tau <= 1:
            raise ValueError("tau must lie in (0, 1]")
        if self.tau_base is not None and not 0 < self.tau_base <= 1:
            raise ValueError("tau_base must lie in (0, 1]")
        if self.loss_mode not in ("uniform", "none"):
            raise ValueError(f"unknown loss_mode {self.loss_mode!r}")
        if self.ctg_flow_form not in CTG_FLOW_FORMS:
            raise ValueError(f"ctg_flow_form must be one of {CTG_FLOW_FORMS}")

    @property
    def tau_base_eff(self) -> float:
        return self.tau if self.tau_base is None else self.tau_base


@dataclass(frozen=True, eq=False)
class ScedModel:
    A_v: sp.csr_matrix
    A_s: sp.csr_matrix
    senses: tuple[str, ...]
    rhs: np.ndarray
    cost: np.ndarray
    var_names: tuple[str, ...]
    con_names: tuple[str, ...]
    n_gen: int
    base_keys: tuple[str, ...]
    ctg_keys: tuple[tuple[str, str], ...]

    @property
    def n_vars(self) -> int:
        return self.A_v.shape[1]

    @property
    def pg(self) -> slice:
        return slice(0, self.n_gen)

    @property
    def rg(self) -> slice:
        return slice(self.n_gen, 2 * self.n_gen)

    @property
    def pbar(self) -> slice:
        return slice(2 * self.n_gen, 2 * self.n_gen + len(self.base_keys))

    @property
    def pk(self) -> slice:
        s = 2 * self.n_gen + len(self.base_keys)
        return slice(s, s + len(self.ctg_keys))

    def lp(self, shift: np.ndarray | None = None) -> LpProblem:
        rhs = self.rhs.copy()
        if shift is not None:
            rhs -= self.A_s @ np.asarray(shift, float)
        A = self.A_v.tocoo()
        n = self.n_vars
        return LpProblem(cost=self.cost, rows=A.row, cols=A.col, vals=A.data,
                         senses=self.senses, rhs=rhs, lb=np.full(n, -INF),
                         ub=np.full(n, INF), var_names=self.var_names,
                         con_names=self.con_names)


@dataclass(frozen=True, eq=False)
class ScedProblem:
    model: ScedModel
    lp: LpProblem
    shift: np.ndarray


def sced_model(case: GridCase, factors: DistFactors, constraints: SecurityConstraintSet,
               params: ScedParams = ScedParams()) -> ScedModel:
    ng, nb = len(case.generators), case.n_bus
    gb = case.gen_bus_matrix()
    ptdf = factors.ptdf
    p_g0 = case.p0
    known = set(case.branch_ids)
    for c in constraints.base:
        if c.line not in known:
            raise ScedInputError(f"unknown monitored branch {c.line!r}")
    for c in constraints.contingency:
        if c.line not in known or c.contingency not in known:
            raise ScedInputError(f"unknown branch in entry {(c.line, c.contingency)!r}")
    nbase, nctg = len(constraints.base), len(constraints.contingency)
    nv = 2 * ng + nbase + nctg
    PG, RG = np.arange(ng), ng + np.arange(ng)
    PB = 2 * ng + np.arange(nbase)
    PK = 2 * ng + nbase + np.arange(nctg)

    rows_v: list[np.ndarray] = []
    rows_s: list[np.ndarray | None] = []
    senses, rhs, names = [], [], []

    def add(name, vcoef, sense, b, scoef=None):
        rows_v.append(vcoef)
        rows_s.append(scoef)
        senses.append(sense)
        rhs.append(float(b))
        names.append(name)

    def vrow(idx, coef):
        r = np.zeros(nv)
        np.add.at(r, np.atleast_1d(idx), coef)
        return r

    load = float(case.loads.sum())
    scale = 1.0 + case.loss_fraction if params.loss_mode == "uniform" else 1.0
    add("balance", vrow(PG, 1.0), "=", scale * load)

    for i, c in enumerate(constraints.base):
        m = factors.branch_pos(c.line)
        sens = ptdf[m] @ gb
        add(f"flow[{c.line}]", vrow(np.r_[PB[i], PG], np.r_[1.0, -sens]), "=",
            c.p0 - sens @ p_g0, -ptdf[m])
    for i, c in enumerate(constraints.contingency):
        m, k = factors.branch_pos(c.line), factors.branch_pos(c.contingency)
        otdf_row = factors.otdf(k)[m]
        sens = otdf_row @ gb
        s_coef = otdf_row.copy()
        if params.ctg_flow_form == "paper":
            s_coef = s_coef + factors.lodf(k)[m] * ptdf[k]
        add(f"flow[{c.line}|{c.contingency}]", vrow(np.r_[PK[i], PG], np.r_[1.0, -sens]),
            "=", c.pk0 - sens @ p_g0, -s_coef)

    for i, c in enumerate(constraints.base):
        add(f"pmax[{c.line}]", vrow(PB[i], 1.0), "<", c.p_max)
        add(f"pmin[{c.line}]", vrow(PB[i], 1.0), ">", -c.p_max)
    for i, c in enumerate(constraints.contingency):
        add(f"pkmax[{c.line}|{c.contingency}]", vrow(PK[i], 1.0), "<", c.pk_max)
        add(f"pkmin[{c.line}|{c.contingency}]", vrow(PK[i], 1.0), ">", -c.pk_max)

    for g, gen in enumerate(case.generators):
        lo = max(gen.p0 - gen.ramp_rate * params.t_h, gen.p_min)
        hi = min(gen.p0 + gen.ramp_rate * params.t_h, gen.p_max)
        add(f"ramp_dn[{gen.id}]", vrow(PG[g], 1.0), ">", lo)
        add(f"ramp_up[{gen.id}]", vrow(PG[g], 1.0), "<", hi)
    for g, gen in enumerate(case.generators):
        add(f"res_lo[{gen.id}]", vrow(RG[g], 1.0), ">", 0.0)
        add(f"res_hi[{gen.id}]", vrow(RG[g], 1.0), "<", gen.ramp_rate * params.t_r)
    for g, gen in enumerate(case.generators):
        add(f"cap[{gen.id}]", vrow([PG[g], RG[g]], 1.0), "<", gen.p_max)
    # a lone unit has no peers to cover its loss; the row would force P_g <= 0
    for g, gen in enumerate(case.generators if ng > 1 else ()):
        # sum_g' R_g' >= P_g + R_g
        add(f"cover[{gen.id}]", vrow(np.r_[RG, PG[g], RG[g]], np.r_[np.ones(ng), -1.0, -1.0]),
            ">", 0.0)

    A_v = sp.csr_matrix(np.array(rows_v))
    A_s = sp.csr_matrix(np.array([np.zeros(nb) if s is None else s for s in rows_s]))
    cost = np.zeros(nv)
    cost[PG] = [g.cost_energy for g in case.generators]
    cost[RG] = [g.cost_reserve for g in case.generators]
    var_names = ([f"PG[{g.id}]" for g in case.generators] + [f"RG[{g.id}]" for g in case.generators]
                 + [f"Pbar[{c.line}]" for c in constraints.base]
                 + [f"Pk[{c.line}|{c.contingency}]" for c in constraints.contingency])
    return ScedModel(A_v=A_v, A_s=A_s, senses=tuple(senses), rhs=np.array(rhs), cost=cost,
                     var_names=tuple(var_names), con_names=tuple(names), n_gen=ng,
                     base_keys=tuple(c.line for c in constraints.base),
                     ctg_keys=tuple((c.line, c.contingency) for c in constraints.contingency))


def build_sced(case: GridCase, factors: DistFactors, constraints: SecurityConstraintSet,
               false_load_shift=None, params: ScedParams = ScedParams()) -> ScedProblem:
    """SCED LP with the false-load injection shift ``H c`` (MW per bus) fixed."""
    shift = np.zeros(case.n_bus) if false_load_shift is None else np.asarray(false_load_shift, float)
    if shift.shape != (case.n_bus,):
        raise ScedInputError("false_load_shift must have one entry per bus")
    if abs(shift.sum()) > 1e-6 * max(1.0, float(np.abs(shift).sum())):
        raise ScedInputError("false_load_shift must sum to zero")
    model = sced_model(case, factors, constraints, params)
    return ScedProblem(model=model, lp=model.lp(shift), shift=shift)


@dataclass
class ScedSolution:
    status: str
    p_g: np.ndarray | None = None
    r_g: np.ndarray | None = None
    base_flows: dict[str, float] = field(default_factory=dict)
    ctg_flows: dict[tuple[str, str], float] = field(default_factory=dict)
    objective: float = float("nan")
    duals: dict[str, float] = field(default_factory=dict)
    gen_ids: tuple[str, ...] = ()
    lp_solution: LpSolution | None = field(default=None, repr=False)

    @property
    def optimal(self) -> bool:
        return self.status == "optimal"

    def binding(self, tol: float = 1e-7) -> dict[str, float]:
        return {k: v for k, v in self.duals.items() if abs(v) > tol}

    def to_dict(self) -> dict:
        if not self.optimal:
            return {"status": self.status}
        return {
            "status": self.status,
            "objective": self.objective,
            "dispatch": {g: float(p) for g, p in zip(self.gen_ids, self.p_g)},
            "reserves": {g: float(r) for g, r in zip(self.gen_ids, self.r_g)},
            "base_flows": self.base_flows,
            "contingency_flows": {f"{l}|{k}": v for (l, k), v in self.ctg_flows.items()},
            "binding_constraints": self.binding(),
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=1, sort_keys=True)


def solve_sced(problem: ScedProblem, tol: Tolerances = DEFAULT_TOL,
               backend: str = "native") -> ScedSolution:
    """Solve; an infeasible dispatch is returned as status, not raised (no load shedding)."""
    m = problem.model
    sol = solve_lp(problem.lp, tol, backend)
    gen_ids = tuple(n[3:-1] for n in m.var_names[m.pg])
    if not sol.optimal:
        return ScedSolution(status=sol.status, gen_ids=gen_ids, lp_solution=sol)
    x = sol.x
    return ScedSolution(
        status="optimal", p_g=x[m.pg].copy(), r_g=x[m.rg].copy(),
        base_flows={l: float(v) for l, v in zip(m.base_keys, x[m.pbar])},
        ctg_flows={k: float(v) for k, v in zip(m.ctg_keys, x[m.pk])},
        objective=sol.objective,
        duals={n: float(y) for n, y in zip(m.con_names, sol.duals)},
        gen_ids=gen_ids, lp_solution=sol)


def run_sced(case: GridCase, factors: DistFactors, constraints: SecurityConstraintSet,
             false_load_shift=None, params: ScedParams = ScedParams(),
             backend: str = "native") -> ScedSolution:
    return solve_sced(build_sced(case, factors, constraints, false_load_shift, params),
                      backend=backend)
