"""Real-time contingency analysis: branch-outage screening and security constraints."""

from __future__ import annotations

import csv
import io
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .grid_model import GridCase, radial_branches
from .network import DistFactors, limits_vector

BASE = "base"
# flows this close to the limit (relative) count as at-limit, not over it;
# a binding SCED constraint otherwise flips class on round-off
LIMIT_RTOL = 1e-9


@dataclass(frozen=True)
class ContingencySpec:
    branch_id: str
    eligible: bool
    reason: str = ""


@dataclass(frozen=True)
class ScreenEntry:
    line: str
    contingency: str  # BASE or outaged branch id
    flow: float
    limit: float
    loading: float
    cls: str  # ok | warning | violation


@dataclass(frozen=True)
class ScreenResult:
    entries: tuple[ScreenEntry, ...]

    def flagged(self) -> list[ScreenEntry]:
        return [e for e in self.entries if e.cls != "ok"]

    def warnings(self, contingency_only: bool = True) -> list[ScreenEntry]:
        return [e for e in self.entries if e.cls != "ok"
                and not (contingency_only and e.contingency == BASE)]

    def lookup(self, line: str, contingency: str) -> ScreenEntry:
        for e in self.entries:
            if e.line == line and e.contingency == contingency:
                return e
        raise KeyError((line, contingency))

    def to_csv(self, flagged_only: bool = False) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["monitored_line", "contingency", "flow_mw", "limit_mw", "loading_pct", "class"])
        for e in self.entries:
            if flagged_only and e.cls == "ok":
                continue
            w.writerow([e.line, e.contingency, f"{e.flow:.6f}", f"{e.limit:.6f}",
                        f"{100 * e.loading:.6f}", e.cls])
        return buf.getvalue()


@dataclass(frozen=True)
class BaseConstraint:
    line: str
    p0: float
    p_max: float


@dataclass(frozen=True)
class ContingencyConstraint:
    line: str
    contingency: str
    pk0: float
    pk_max: float


@dataclass(frozen=True)
class SecurityConstraintSet:
    base: tuple[BaseConstraint, ...] = ()
    contingency: tuple[ContingencyConstraint, ...] = ()

    def keys(self) -> set[tuple[str, str]]:
        return ({(c.line, BASE) for c in self.base}
                | {(c.line, c.contingency) for c in self.contingency})

    def __len__(self) -> int:
        return len(self.base) + len(self.contingency)


def classify(flow: float, limit: float, tau: float) -> str:
    a = abs(flow)
    if a > limit * (1.0 + LIMIT_RTOL):
        return "violation"
    if a >= tau * limit:
        return "warning"
    return "ok"


def contingency_list(case: GridCase, kv_min: float = 100.0) -> list[ContingencySpec]:
    """Every branch with its eligibility: in service, non-radial, both ends at ≥ kv_min."""
    radial = radial_branches(case)
    kv = {b.id: b.base_kv for b in case.buses}
    out = []
    for br in case.branches:
        if not br.in_service:
            out.append(ContingencySpec(br.id, False, "out of service"))
        elif br.id in radial:
            out.append(ContingencySpec(br.id, False, "radial"))
        elif min(kv[br.from_bus], kv[br.to_bus]) < kv_min:
            out.append(ContingencySpec(br.id, False, "below kv_min"))
        else:
            out.append(ContingencySpec(br.id, True))
    return out


def eligible_contingencies(case: GridCase, kv_min: float = 100.0) -> list[str]:
    return [c.branch_id for c in contingency_list(case, kv_min) if c.eligible]


def _screen_one(k: str, factors: DistFactors, flows: np.ndarray, lim: np.ndarray,
                ids: list[str], live: np.ndarray, tau: float):
    kpos = factors.branch_pos(k)
    post = factors.post_outage_flows(flows, kpos)
    entries, cons = [], []
    for m in np.flatnonzero(live):
        if m == kpos:
            continue
        f, L = float(post[m]), float(lim[m])
        e = ScreenEntry(ids[m], k, f, L, abs(f) / L, classify(f, L, tau))
        entries.append(e)
        if abs(f) >= tau * L:
            cons.append(ContingencyConstraint(ids[m], k, f, L))
    return entries, cons


def screen(case: GridCase, factors: DistFactors, base_flows, tau: float = 0.9,
           tau_base: float | None = None, contingencies: list[str] | None = None,
           st_factor: float | None = None, kv_min: float = 100.0,
           jobs: int = 1) -> tuple[ScreenResult, SecurityConstraintSet]:
    """Screen base case and every eligible branch outage.

    ``base_flows`` is a branch-flow vector in MW (or a FlowState).  Post-outage
    flows use ``P_m + LODF_k[m] * P_k``.  Entries at or above ``tau`` of their
    limit (``tau_base`` for the base case) become security constraints.
    """
    if not 0 < tau <= 1:
        raise ValueError("tau must lie in (0, 1]")
    tau_b = tau if tau_base is None else tau_base
    flows = np.asarray(getattr(base_flows, "flows", base_flows), float)
    ids = case.branch_ids
    live = np.array([br.in_service for br in case.branches])
    lim_base = limits_vector(case, "base")
    lim_ctg = limits_vector(case, "contingency", st_factor)
    if contingencies is None:
        contingencies = eligible_contingencies(case, kv_min)
    contingencies = sorted(contingencies)

    entries: list[ScreenEntry] = []
    base_cons = []
    for m in np.flatnonzero(live):
        f, L = float(flows[m]), float(lim_base[m])
        entries.append(ScreenEntry(ids[m], BASE, f, L, abs(f) / L, classify(f, L, tau_b)))
        if abs(f) >= tau_b * L:
            base_cons.append(BaseConstraint(ids[m], f, L))

    args = (factors, flows, lim_ctg, ids, live, tau)
    if jobs > 1 and len(contingencies) > 1:
        with ThreadPoolExecutor(jobs) as ex:
            results = list(ex.map(lambda k: _screen_one(k, *args), contingencies))
    else:
        results = [_screen_one(k, *args) for k in contingencies]
    ctg_cons = []
    for ents, cons in results:
        entries.extend(ents)
        ctg_cons.extend(cons)
    return ScreenResult(tuple(entries)), SecurityConstraintSet(tuple(base_cons), tuple(ctg_cons))


def injections(case: GridCase, p_g, loads=None) -> np.ndarray:
    """Net bus injection G_B p_g - P_D in MW (the slack absorbs any imbalance)."""
    loads = case.loads if loads is None else np.asarray(loads, float)
    return case.gen_bus_matrix() @ np.asarray(p_g, float) - loads


def run_rtca(case: GridCase, factors: DistFactors, p_g=None, loads=None, tau: float = 0.9,
             tau_base: float | None = None, st_factor: float | None = None,
             kv_min: float = 100.0, jobs: int = 1):
    """Flows from a dispatch and a load vector, then :func:`screen`."""
    p_g = case.p0 if p_g is None else p_g
    flows = factors.flows(injections(case, p_g, loads))
    return screen(case, factors, flows, tau=tau, tau_base=tau_base, st_factor=st_factor,
                  kv_min=kv_min, jobs=jobs)
