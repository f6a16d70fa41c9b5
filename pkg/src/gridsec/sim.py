"""Closed-loop attack implementation and vulnerability assessment.

One EMS cycle: the defender estimates false loads ``P_D - H c``, runs its own
RTCA on them, dispatches with SCED, and the dispatch is applied to the real
system.  Target flows are then reported three ways: as predicted by the
attacker, as seen by the operator (cyber) and as they physically are.
"""

from __future__ import annotations

import csv
import io
import json
import logging
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from .attack import AttackSpec, BilevelProblem, build_bilevel, kkt_milp_oracle
from .benders import DEFAULT_EPS, BendersResult, mbd, mbd_multistart
from .grid_model import GridCase, case_from_dict, case_to_dict
from .network import DistFactors, active_limits, build_dc
from .rtca import BASE, ScreenResult, SecurityConstraintSet, injections, run_rtca
from .sced import ScedParams, ScedSolution, run_sced

log = logging.getLogger(__name__)

C_ZERO_TOL = 1e-6


class Ems:
    """RTCA + SCED bound to one case.  Attacker and defender both run this code."""

    def __init__(self, case: GridCase, params: ScedParams = ScedParams(),
                 factors: DistFactors | None = None, backend: str = "native"):
        self.case = case
        self.params = params
        self.factors = factors if factors is not None else DistFactors(build_dc(case))
        self.backend = backend

    def rtca(self, p_g=None, loads=None) -> tuple[ScreenResult, SecurityConstraintSet]:
        p = self.params
        return run_rtca(self.case, self.factors, p_g=p_g, loads=loads, tau=p.tau,
                        tau_base=p.tau_base, st_factor=p.st_factor, kv_min=p.kv_min)

    def sced(self, constraints: SecurityConstraintSet, loads=None, p_g0=None,
             shift=None) -> ScedSolution:
        case = self.case
        if loads is not None:
            case = case.with_loads(loads)
        if p_g0 is not None:
            case = case.with_dispatch(p_g0)
        return run_sced(case, self.factors, constraints, shift, self.params, self.backend)

    def target_limit(self, target: str, contingency: str) -> float:
        br = self.case.branch(target)
        if contingency == BASE:
            return active_limits(br, "base")
        return active_limits(br, "contingency", self.params.st_factor)


@dataclass
class AttackDesign:
    spec: AttackSpec
    c: np.ndarray
    shift_mw: np.ndarray
    p_g: np.ndarray
    predicted_flow_mw: float
    limit_mw: float
    objective: float
    status: str
    iterations: int
    gap: float
    trace: list[dict]
    resolved_flow_mw: float | None = None
    max_identity_residual: float = 0.0

    @property
    def predicted_pct(self) -> float:
        return 100.0 * abs(self.predicted_flow_mw) / self.limit_mw

    @property
    def l1(self) -> float:
        return float(np.abs(self.c).sum())

    @property
    def l0(self) -> int:
        return int((np.abs(self.c) > C_ZERO_TOL).sum())

    def to_dict(self) -> dict:
        return {
            "spec": asdict(self.spec),
            "status": self.status,
            "c": self.c.tolist(),
            "false_injection_shift_mw": self.shift_mw.tolist(),
            "predicted_flow_mw": self.predicted_flow_mw,
            "predicted_pct": self.predicted_pct,
            "limit_mw": self.limit_mw,
            "l1": self.l1,
            "l0": self.l0,
            "objective": self.objective,
            "iterations": self.iterations,
            "gap": self.gap,
            "predicted_dispatch": self.p_g.tolist(),
            "resolved_flow_mw": self.resolved_flow_mw,
        }


def design_attack(ems: Ems, spec: AttackSpec, eps: float = DEFAULT_EPS, max_iter: int = 200,
                  multistart: int = 0, seed: int = 0,
                  constraints: SecurityConstraintSet | None = None) -> AttackDesign:
    """Attacker-side RTCA on real loads, bi-level assembly and MBD solve."""
    if constraints is None:
        _, constraints = ems.rtca()
    bp = build_bilevel(ems.case, ems.factors, constraints, spec, ems.params)
    res = mbd_multistart(bp, starts=multistart, seed=seed, eps=eps, max_iter=max_iter,
                         backend=ems.backend)
    return design_from_result(ems, spec, bp, res, constraints)


def design_from_result(ems: Ems, spec: AttackSpec, bp: BilevelProblem, res: BendersResult,
                       constraints: SecurityConstraintSet) -> AttackDesign:
    case = ems.case
    limit = ems.target_limit(spec.target, spec.contingency)
    if res.u is None:
        nb = case.n_bus
        return AttackDesign(spec, np.zeros(nb), np.zeros(nb), case.p0.copy(), float("nan"),
                            limit, float("inf"), res.status, res.iterations, res.gap,
                            [t.to_dict() for t in res.trace])
    c = bp.u_to_c @ res.u
    shift = bp.u_to_shift @ res.u
    p_g = res.v[bp.sced.pg]
    flow = float(bp.target_row @ injections(case, p_g))
    # certify the prediction with an ordinary SCED solve at the designed attack
    sol = ems.sced(constraints, shift=shift)
    resolved = float(bp.target_row @ injections(case, sol.p_g)) if sol.optimal else None
    return AttackDesign(spec=spec, c=c, shift_mw=shift, p_g=p_g, predicted_flow_mw=flow,
                        limit_mw=limit, objective=res.objective, status=res.status,
                        iterations=res.iterations, gap=res.gap,
                        trace=[t.to_dict() for t in res.trace], resolved_flow_mw=resolved,
                        max_identity_residual=res.max_identity_residual)


@dataclass
class AssessmentReport:
    target: str
    contingency: str
    spec: AttackSpec
    sced_status: str
    predicted_pct: float
    cyber_pct: float
    physical_pct: float
    pre_attack_pct: float
    l0: int
    l1: float
    limit_mw: float
    design_status: str
    dispatch: list[float]
    cyber_loads: list[float]
    real_loads: list[float]
    collateral: list[dict] = field(default_factory=list)
    scatter: list[dict] = field(default_factory=list)
    rounds: list[list[float]] = field(default_factory=list)

    @property
    def masked_overflow(self) -> bool:
        return self.cyber_pct <= 100.0 and self.physical_pct > 100.0

    def to_dict(self) -> dict:
        d = asdict(self)
        d["masked_overflow"] = self.masked_overflow
        return d

    def to_json(self, config: dict | None = None) -> str:
        d = self.to_dict()
        if config is not None:
            d["config"] = config
        return json.dumps(d, indent=1, sort_keys=True)

    def scatter_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["line", "contingency", "cyber_pct", "physical_pct"])
        for p in self.scatter:
            w.writerow([p["line"], p["contingency"], f"{p['cyber_pct']:.6f}",
                        f"{p['physical_pct']:.6f}"])
        return buf.getvalue()


def implement_attack(ems: Ems, design: AttackDesign, rounds: int = 1) -> AssessmentReport:
    """Apply the designed false loads to the defender's EMS and evaluate the outcome."""
    case, spec = ems.case, design.spec
    real = case.loads
    cyber = real - design.shift_mw
    p_g0 = case.p0.copy()
    dispatches = []
    status = "optimal"
    p_g = p_g0
    for _ in range(max(1, rounds)):
        _, def_cons = ems.rtca(p_g=p_g0, loads=cyber)
        sol = ems.sced(def_cons, loads=cyber, p_g0=p_g0)
        if not sol.optimal:
            status = sol.status
            break
        p_g = sol.p_g
        dispatches.append(p_g.tolist())
        p_g0 = p_g

    phys, _ = ems.rtca(p_g=p_g, loads=real)
    cyb, _ = ems.rtca(p_g=p_g, loads=cyber)
    pre, _ = ems.rtca()
    key = (spec.target, spec.contingency)
    t_phys, t_cyb, t_pre = (r.lookup(*key) for r in (phys, cyb, pre))
    cyber_index = {(e.line, e.contingency): e for e in cyb.entries}
    scatter, collateral = [], []
    for e in phys.entries:
        ce = cyber_index[(e.line, e.contingency)]
        scatter.append({"line": e.line, "contingency": e.contingency,
                        "cyber_pct": 100 * ce.loading, "physical_pct": 100 * e.loading})
        if e.loading > 1.0 and (e.line, e.contingency) != key:
            collateral.append({"line": e.line, "contingency": e.contingency,
                               "physical_pct": 100 * e.loading, "cyber_pct": 100 * ce.loading})
    return AssessmentReport(
        target=spec.target, contingency=spec.contingency, spec=spec, sced_status=status,
        predicted_pct=design.predicted_pct, cyber_pct=100 * t_cyb.loading,
        physical_pct=100 * t_phys.loading, pre_attack_pct=100 * t_pre.loading,
        l0=design.l0, l1=design.l1, limit_mw=t_phys.limit, design_status=design.status,
        dispatch=[float(x) for x in p_g], cyber_loads=cyber.tolist(), real_loads=real.tolist(),
        collateral=collateral, scatter=scatter, rounds=dispatches)


# ---------------------------------------------------------------------------
# batch screening


@dataclass
class SweepCell:
    target: str
    contingency: str
    n1: float
    ls: float
    status: str
    report: AssessmentReport | None = None
    predicted_pct: float | None = None
    error: str = ""
    oracle_pct: float | None = None


FLAG_STATUSES = ("max_iter", "stall", "infeasible", "error")


@dataclass
class ScreenSweep:
    cells: list[SweepCell]

    def pairs(self) -> list[tuple[str, str]]:
        return sorted({(c.target, c.contingency) for c in self.cells})

    def _audit(self, cells: list[SweepCell]) -> dict:
        ok = [c for c in cells if c.report is not None]
        pf = [c.report.physical_pct for c in ok]
        l0 = [c.report.l0 for c in ok]
        trend = True
        mbd_monotone = True
        oracle_monotone = True
        for ls in sorted({c.ls for c in cells}):
            seq = sorted((c for c in ok if c.ls == ls), key=lambda c: c.n1)
            trend &= all(b.report.l0 >= a.report.l0 for a, b in zip(seq, seq[1:]))
            every = sorted((c for c in cells if c.ls == ls), key=lambda c: c.n1)
            pred = [c.predicted_pct for c in every if c.predicted_pct is not None]
            mbd_monotone &= all(b >= a - 1e-6 for a, b in zip(pred, pred[1:]))
            orc = [c.oracle_pct for c in every if c.oracle_pct is not None]
            oracle_monotone &= all(b >= a - 1e-6 for a, b in zip(orc, orc[1:]))
        flagged = [c for c in cells if c.status in FLAG_STATUSES or c.report is None]
        return {
            "max_pf_min_pct": min(pf) if pf else float("nan"),
            "max_pf_max_pct": max(pf) if pf else float("nan"),
            "l0_min": min(l0) if l0 else 0,
            "l0_max": max(l0) if l0 else 0,
            "l0_nondecreasing": trend,
            "mbd_monotone": mbd_monotone,
            "oracle_monotone": oracle_monotone,
            "flagged_cells": len(flagged),
            "cells": len(cells),
        }

    def table(self) -> list[dict]:
        rows = []
        for t, k in self.pairs():
            cells = [c for c in self.cells if (c.target, c.contingency) == (t, k)]
            rows.append({"target": t, "contingency": k, **self._audit(cells)})
        return rows

    TABLE_COLUMNS = ("target", "contingency", "max_pf_min_pct", "max_pf_max_pct", "l0_min",
                     "l0_max", "l0_nondecreasing", "mbd_monotone", "oracle_monotone",
                     "flagged_cells", "cells")

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(self.TABLE_COLUMNS)
        for r in self.table():
            w.writerow([_fmt(r[c]) for c in self.TABLE_COLUMNS])
        return buf.getvalue()

    DETAIL_COLUMNS = ("target", "contingency", "n1", "ls", "status", "predicted_pct",
                      "cyber_pct", "physical_pct", "l0", "l1", "sced_status", "collateral",
                      "oracle_pct", "error")

    def detail_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(self.DETAIL_COLUMNS)
        for c in self.cells:
            r = c.report
            w.writerow([c.target, c.contingency, _fmt(c.n1), _fmt(c.ls), c.status,
                        _fmt(c.predicted_pct), _fmt(r.cyber_pct if r else None),
                        _fmt(r.physical_pct if r else None), _fmt(r.l0 if r else None),
                        _fmt(r.l1 if r else None), r.sced_status if r else "",
                        len(r.collateral) if r else "", _fmt(c.oracle_pct), c.error])
        return buf.getvalue()

    def plot_csv(self) -> str:
        """Long-format (series, x=N1, y) data for max-PF and l0 plots."""
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["target", "contingency", "ls", "series", "n1", "value"])
        for c in self.cells:
            if c.report is None:
                continue
            r = c.report
            for name, val in (("predicted_pct", r.predicted_pct), ("cyber_pct", r.cyber_pct),
                              ("physical_pct", r.physical_pct), ("l0", r.l0)):
                w.writerow([c.target, c.contingency, _fmt(c.ls), name, _fmt(c.n1), _fmt(val)])
        return buf.getvalue()


def _fmt(x) -> str:
    if x is None:
        return ""
    if isinstance(x, bool):
        return "true" if x else "false"
    if isinstance(x, float):
        return f"{x:.6f}"
    return str(x)


def _run_cell(args) -> SweepCell:
    case_d, params, t, k, n1, ls, sigma, eps, max_iter, multistart, rounds, backend, audit = args
    case = case_from_dict(case_d)
    ems = Ems(case, params, backend=backend)
    try:
        spec = AttackSpec(t, k, n1=n1, ls=ls, sigma=sigma)
        design = design_attack(ems, spec, eps=eps, max_iter=max_iter, multistart=multistart)
        if design.status == "infeasible" or not np.isfinite(design.predicted_flow_mw):
            return SweepCell(t, k, n1, ls, design.status, error="no certified design")
        report = implement_attack(ems, design, rounds=rounds)
        cell = SweepCell(t, k, n1, ls, design.status, report, design.predicted_pct)
        if audit:
            _, cons = ems.rtca()
            bp = build_bilevel(case, ems.factors, cons, spec, params)
            orc = kkt_milp_oracle(bp)
            p_g = orc.v[bp.sced.pg]
            flow = float(bp.target_row @ injections(case, p_g))
            cell.oracle_pct = 100 * abs(flow) / design.limit_mw
        return cell
    except Exception as exc:  # per-cell failures never abort the sweep
        log.warning("cell (%s, %s, %g, %g) failed: %s", t, k, n1, ls, exc)
        return SweepCell(t, k, n1, ls, "error", error=f"{type(exc).__name__}: {exc}")


def warned_pairs(ems: Ems) -> list[tuple[str, str]]:
    res, _ = ems.rtca()
    return sorted({(e.line, e.contingency) for e in res.warnings(contingency_only=True)})


def screen_targets(ems: Ems, n1_grid, ls_list, sigma: float = 1e-3, eps: float = DEFAULT_EPS,
                   max_iter: int = 200, multistart: int = 0, rounds: int = 1, jobs: int = 1,
                   audit_oracle: bool = False,
                   pairs: list[tuple[str, str]] | None = None) -> ScreenSweep:
    """Design and implement an attack for every warned (line, contingency) × N1 × L_S cell."""
    pairs = warned_pairs(ems) if pairs is None else sorted(pairs)
    case_d = case_to_dict(ems.case)
    jobs_list = [(case_d, ems.params, t, k, float(n1), float(ls), sigma, eps, max_iter,
                  multistart, rounds, ems.backend, audit_oracle)
                 for t, k in pairs for ls in sorted(ls_list) for n1 in sorted(n1_grid)]
    if jobs > 1 and len(jobs_list) > 1:
        with ProcessPoolExecutor(jobs) as ex:
            cells = list(ex.map(_run_cell, jobs_list))
    else:
        cells = [_run_cell(a) for a in jobs_list]
    cells.sort(key=lambda c: (c.target, c.contingency, c.n1, c.ls))
    return ScreenSweep(cells)


def steady_state(case: GridCase, params: ScedParams = ScedParams(), max_rounds: int = 100,
                 tol: float = 1e-9) -> GridCase:
    """Repeat RTCA -> SCED from the case dispatch until SCED returns its own input."""
    for _ in range(max_rounds):
        ems = Ems(case, params)
        _, cons = ems.rtca()
        sol = ems.sced(cons)
        if not sol.optimal:
            raise RuntimeError(f"SCED {sol.status} while searching for a steady state")
        # strip round-off that would put p0 a hair outside the unit limits
        lo = np.array([g.p_min for g in case.generators])
        hi = np.array([g.p_max for g in case.generators])
        p_g = np.clip(sol.p_g, lo, hi)
        if np.max(np.abs(p_g - case.p0)) <= tol:
            return case
        case = case.with_dispatch(p_g)
    raise RuntimeError("no steady state within max_rounds")
