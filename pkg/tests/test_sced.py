import json
from dataclasses import replace

import numpy as np
import pytest
from scipy.optimize import linprog

from gridsec.grid_model import bundled_case
from gridsec.network import DistFactors
from gridsec.rtca import (BaseConstraint, ContingencyConstraint, SecurityConstraintSet,
                          run_rtca)
from gridsec.sced import ScedInputError, ScedParams, build_sced, run_sced, sced_model

from instances import two_bus_two_gen

EMPTY = SecurityConstraintSet()


def solve(case, cons=EMPTY, shift=None, params=ScedParams(), backend="native"):
    return run_sced(case, DistFactors.from_case(case), cons, shift, params, backend)


def test_single_generator_serves_load(case2):
    s = solve(case2)
    assert s.optimal and s.p_g[0] == pytest.approx(102.0)
    assert s.r_g[0] == pytest.approx(0.0)


def test_merit_order():
    s = solve(two_bus_two_gen(rating=1000))
    assert s.p_g == pytest.approx([102.0, 0.0], abs=1e-9)


def test_zero_load_pins_to_cheapest_feasible_point():
    c = two_bus_two_gen(load=0.0)
    c = c.with_dispatch([0.0, 0.0])
    s = solve(c)
    assert s.p_g == pytest.approx([0.0, 0.0], abs=1e-9) and s.objective == pytest.approx(0.0)


def test_load_beyond_ramp_is_infeasible(case2):
    c = case2.with_loads([0.0, 260.0])      # 1.02*260 > 102 + 10*15
    s = solve(c)
    assert s.status == "infeasible" and s.p_g is None


def test_ramp_upper_bound_capped_at_p_max(case5):
    g = case5.generators[0]
    c = replace(case5, generators=(replace(g, p0=390.0),) + case5.generators[1:])
    m = sced_model(c, DistFactors.from_case(c), EMPTY)
    i = m.con_names.index("ramp_up[G1]")
    assert m.rhs[i] == pytest.approx(400.0)      # min(390 + 150, 400)
    j = m.con_names.index("ramp_dn[G1]")
    assert m.rhs[j] == pytest.approx(240.0)      # max(390 - 150, 0)


def oracle_sced(case, cons, st=1.15):
    """Independent SCED: flows substituted out, assembled densely and solved with HiGHS."""
    df = DistFactors.from_case(case)
    gb, p0 = case.gen_bus_matrix(), case.p0
    ng = len(case.generators)
    gens = case.generators
    c = np.r_[[g.cost_energy for g in gens], [g.cost_reserve for g in gens]]
    A_ub, b_ub = [], []
    for k in cons.base:
        sens = df.ptdf[df.branch_pos(k.line)] @ gb
        A_ub += [np.r_[sens, np.zeros(ng)], np.r_[-sens, np.zeros(ng)]]
        b_ub += [k.p_max - k.p0 + sens @ p0, k.p_max + k.p0 - sens @ p0]
    for k in cons.contingency:
        sens = df.otdf(k.contingency)[df.branch_pos(k.line)] @ gb
        A_ub += [np.r_[sens, np.zeros(ng)], np.r_[-sens, np.zeros(ng)]]
        b_ub += [k.pk_max - k.pk0 + sens @ p0, k.pk_max + k.pk0 - sens @ p0]
    for g in range(ng):
        row = np.zeros(2 * ng); row[g] = 1; row[ng + g] = 1
        A_ub.append(row); b_ub.append(gens[g].p_max)
        # the other units' reserve covers the loss of unit g
        row = np.zeros(2 * ng); row[g] = 1; row[ng:] = -1; row[ng + g] = 0
        A_ub.append(row); b_ub.append(0.0)
    bounds = [(max(g.p0 - 15 * g.ramp_rate, g.p_min), min(g.p0 + 15 * g.ramp_rate, g.p_max))
              for g in gens] + [(0, 10 * g.ramp_rate) for g in gens]
    A_eq = [np.r_[np.ones(ng), np.zeros(ng)]]
    b_eq = [(1 + case.loss_fraction) * case.loads.sum()]
    r = linprog(c, A_ub=np.array(A_ub), b_ub=b_ub, A_eq=A_eq, b_eq=b_eq, bounds=bounds,
                method="highs")
    assert r.status == 0
    return r.x[:ng], r.fun


def test_case5_congested_matches_oracle(case5):
    # move off the steady state so the congested line actually re-dispatches
    c = case5.with_dispatch([320.0, 80.0, 59.0])
    df = DistFactors.from_case(c)
    _, cons = run_rtca(c, df, st_factor=1.15)
    assert len(cons.contingency) >= 1
    s = run_sced(c, df, cons)
    pg, obj = oracle_sced(c, cons)
    assert s.p_g == pytest.approx(pg, abs=1e-6)
    assert s.objective == pytest.approx(obj, abs=1e-6)
    assert s.binding()["pkmax[1-3|1-2]"] < 0


@pytest.mark.parametrize("name", ["case2", "case3", "case5", "rts24"])
def test_steady_state(name):
    c = bundled_case(name)
    df = DistFactors.from_case(c)
    _, cons = run_rtca(c, df, st_factor=1.15)
    s = run_sced(c, df, cons)
    assert s.optimal
    assert np.abs(s.p_g - c.p0).max() <= 1e-6


@pytest.mark.parametrize("name", ["case5", "rts24"])
@pytest.mark.parametrize("form", ["paper", "textbook"])
def test_solution_properties(name, form):
    c = bundled_case(name)
    df = DistFactors.from_case(c)
    _, cons = run_rtca(c, df, st_factor=1.15)
    rng = np.random.default_rng(0)
    # a random small zero-sum shift
    shift = rng.normal(scale=2.0, size=c.n_bus)
    shift -= shift.mean()
    s = run_sced(c, df, cons, shift, ScedParams(ctg_flow_form=form))
    if not s.optimal:
        pytest.skip("shift made the dispatch infeasible")
    tol = 1e-6
    assert s.p_g.sum() == pytest.approx(1.02 * c.loads.sum(), abs=tol)
    for g in range(len(c.generators)):
        assert s.r_g.sum() - s.r_g[g] >= s.p_g[g] - tol
    for name_, y in s.duals.items():
        if name_.startswith(("pmax", "pkmax")):
            assert -y >= -1e-9           # shadow price of a <= limit
        if name_.startswith(("pmin", "pkmin")):
            assert y >= -1e-9
    cost = sum(g.cost_energy * p + g.cost_reserve * r
               for g, p, r in zip(c.generators, s.p_g, s.r_g))
    assert s.objective == pytest.approx(cost)


@pytest.mark.parametrize("name", ["case5", "rts24"])
def test_relaxing_limits_never_raises_cost(name):
    c = bundled_case(name)
    df = DistFactors.from_case(c)
    _, cons = run_rtca(c, df, st_factor=1.15)
    base = run_sced(c, df, cons).objective
    for i in range(len(cons.contingency)):
        ctg = list(cons.contingency)
        ctg[i] = replace(ctg[i], pk_max=1.05 * ctg[i].pk_max)
        relaxed = run_sced(c, df, replace(cons, contingency=tuple(ctg))).objective
        assert relaxed <= base + 1e-7


def test_shift_must_balance(case5):
    with pytest.raises(ScedInputError):
        build_sced(case5, DistFactors.from_case(case5), EMPTY, np.ones(5))


def test_unknown_branch(case5):
    bad = SecurityConstraintSet(base=(BaseConstraint("9-9", 1.0, 2.0),))
    with pytest.raises(ScedInputError):
        build_sced(case5, DistFactors.from_case(case5), bad)
    bad = SecurityConstraintSet(contingency=(ContingencyConstraint("1-3", "x", 1.0, 2.0),))
    with pytest.raises(ScedInputError):
        build_sced(case5, DistFactors.from_case(case5), bad)


def test_loss_mode_none(case2):
    s = solve(case2.with_dispatch([100.0]), params=ScedParams(loss_mode="none"))
    assert s.p_g[0] == pytest.approx(100.0)


def test_flow_forms_differ_only_in_shift_column(case5):
    df = DistFactors.from_case(case5)
    _, cons = run_rtca(case5, df)
    mp = sced_model(case5, df, cons, ScedParams(ctg_flow_form="paper"))
    mt = sced_model(case5, df, cons, ScedParams(ctg_flow_form="textbook"))
    assert (mp.A_v != mt.A_v).nnz == 0 and np.array_equal(mp.rhs, mt.rhs)
    i = mp.con_names.index("flow[1-3|1-2]")
    l, k = df.branch_pos("1-3"), df.branch_pos("1-2")
    diff = mp.A_s.toarray()[i] - mt.A_s.toarray()[i]
    assert diff == pytest.approx(-df.lodf(k)[l] * df.ptdf[k])


def test_flow_rows_reproduce_shifted_flows(case5):
    """P̄_k returned by SCED equals P_k0 + OTDF (G_B dP + s) in textbook form."""
    df = DistFactors.from_case(case5)
    _, cons = run_rtca(case5, df)
    shift = np.array([5.0, -3.0, 2.0, -6.0, 2.0])
    s = run_sced(case5, df, cons, shift, ScedParams(ctg_flow_form="textbook"))
    c = cons.contingency[0]
    otdf = df.otdf(c.contingency)[df.branch_pos(c.line)]
    gb = case5.gen_bus_matrix()
    expect = c.pk0 + otdf @ (gb @ (s.p_g - case5.p0) + shift)
    assert s.ctg_flows[(c.line, c.contingency)] == pytest.approx(expect)


def test_json_export(case5):
    df = DistFactors.from_case(case5)
    _, cons = run_rtca(case5, df)
    d = json.loads(run_sced(case5, df, cons).to_json())
    assert set(d) == {"status", "objective", "dispatch", "reserves", "base_flows",
                      "contingency_flows", "binding_constraints"}
    assert d["dispatch"]["G1"] == pytest.approx(case5.p0[0])
    assert "flow[1-3|1-2]" in d["binding_constraints"]


def test_backends_agree(rts24):
    df = DistFactors.from_case(rts24)
    _, cons = run_rtca(rts24, df)
    a = run_sced(rts24, df, cons, backend="native")
    b = run_sced(rts24, df, cons, backend="highs")
    assert a.objective == pytest.approx(b.objective, rel=1e-9)


def test_params_validation():
    with pytest.raises(ValueError):
        ScedParams(t_h=0)
    with pytest.raises(ValueError):
        ScedParams(ctg_flow_form="other")
    assert ScedParams().tau_base_eff == 0.9
