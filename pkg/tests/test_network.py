import threading

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from gridsec.grid_model import Branch, bundled_case, radial_branches
from gridsec.network import (DistFactors, RadialBranchError, ReactiveLimitError,
                             SingularNetworkError, active_limits, build_dc, compute_lodf,
                             compute_otdf, compute_ptdf, dc_power_flow, limits_vector)

from instances import dense_flows_oracle, random_balanced, triangle

FIXTURES = ["case2", "case3", "case5", "rts24"]


def dense_H(case):
    """Independent oracle: sum of per-branch 2x2 stamps."""
    idx = case.bus_index()
    H = np.zeros((case.n_bus, case.n_bus))
    for br in case.branches:
        if not br.in_service:
            continue
        i, j, y = idx[br.from_bus], idx[br.to_bus], 1.0 / br.reactance_x
        H[i, i] += y; H[j, j] += y; H[i, j] -= y; H[j, i] -= y
    return H


def test_two_bus_H(case2):
    assert np.allclose(build_dc(case2).H.toarray(), [[10, -10], [-10, 10]])


@pytest.mark.parametrize("name", FIXTURES)
def test_H_matches_stamp_oracle(name):
    case = bundled_case(name)
    H = build_dc(case).H.toarray()
    assert np.allclose(H, dense_H(case), atol=1e-12)
    assert np.abs(H.sum(axis=0)).max() < 1e-12


def test_disconnected_raises(case5):
    with pytest.raises(SingularNetworkError):
        build_dc(case5, drop="4-5")


def test_two_bus_flow(case2):
    f = dc_power_flow(build_dc(case2), np.array([100.0, -100.0]))
    assert f.flows[0] == pytest.approx(100.0)
    assert f.angles[case2.slack_index] == 0.0


def test_zero_injection(case5):
    f = dc_power_flow(build_dc(case5), np.zeros(5))
    assert np.all(f.flows == 0) and np.all(f.angles == 0)


@pytest.mark.parametrize("name", FIXTURES)
def test_power_flow_matches_dense_solve(name):
    case = bundled_case(name)
    inj = case.gen_bus_matrix() @ case.p0 - case.loads
    inj[case.slack_index] -= inj.sum()
    f = dc_power_flow(build_dc(case), inj)
    assert np.abs(f.flows - dense_flows_oracle(case, inj)).max() < 1e-8


def test_ptdf_two_bus():
    from instances import two_bus_two_gen
    c = two_bus_two_gen()
    # slack at bus 2 instead
    from dataclasses import replace
    buses = tuple(replace(b, is_slack=b.id == "2") for b in c.buses)
    P = compute_ptdf(build_dc(replace(c, buses=buses)))
    assert P[0, 0] == pytest.approx(1.0) and P[0, 1] == 0.0


def test_ptdf_triangle_symmetry():
    c = triangle()
    P = compute_ptdf(build_dc(c))
    # inject at bus 1, withdraw at slack 3
    assert P[:, 0] == pytest.approx([1 / 3, 2 / 3, 1 / 3])
    assert np.all(P[:, c.slack_index] == 0)


@pytest.mark.parametrize("name", FIXTURES)
def test_ptdf_matches_power_flow(name):
    case = bundled_case(name)
    net = build_dc(case)
    P = compute_ptdf(net)
    rng = np.random.default_rng(0)
    for _ in range(100):
        u = random_balanced(rng, case.n_bus)
        assert np.abs(P @ u - dc_power_flow(net, u).flows).max() < 1e-8


@pytest.mark.parametrize("name", FIXTURES)
def test_lodf_and_otdf_match_resolve(name):
    case = bundled_case(name)
    df = DistFactors.from_case(case)
    radial = radial_branches(case)
    rng = np.random.default_rng(1)
    U = np.array([random_balanced(rng, case.n_bus) for _ in range(20)])
    for k, br in enumerate(case.branches):
        if br.id in radial:
            with pytest.raises(RadialBranchError):
                df.lodf(k)
            continue
        assert df.lodf(k)[k] == pytest.approx(-1.0, abs=1e-10)
        assert np.all(df.otdf(k)[k] == 0)
        for u in U:
            exact = dense_flows_oracle(case, u, drop=br.id)
            assert np.abs(df.post_outage_flows(df.flows(u), k) - exact).max() < 1e-8
            assert np.abs(df.otdf(k) @ u - exact).max() < 1e-8


def test_parallel_twin_lodf_is_one(case2):
    from dataclasses import replace
    twin = replace(case2.branches[0], id="twin")
    df = DistFactors.from_case(replace(case2, branches=case2.branches + (twin,)))
    assert df.lodf(0)[1] == pytest.approx(1.0)
    assert df.lodf(1)[0] == pytest.approx(1.0)


def test_otdf_row_equals_ptdf_when_lodf_zero(case5):
    df = DistFactors.from_case(case5)
    k = df.branch_pos("1-2")
    lodf = df.lodf(k).copy()
    m = df.branch_pos("4-5")        # radial spur: outage elsewhere cannot shift flow onto it
    assert lodf[m] == pytest.approx(0.0, abs=1e-12)
    otdf = compute_otdf(df.ptdf, lodf, k)
    assert np.allclose(otdf[m], df.ptdf[m])


def test_compute_lodf_direct(case5):
    net = build_dc(case5)
    P = compute_ptdf(net)
    col = compute_lodf(P, 0, net.incidence)
    assert col[0] == -1.0


def test_H_times_c_sums_to_zero(rts24):
    H = build_dc(rts24).H
    rng = np.random.default_rng(3)
    for _ in range(20):
        assert abs((H @ rng.normal(size=rts24.n_bus)).sum()) < 1e-10


def test_concurrent_lodf(rts24):
    df = DistFactors.from_case(rts24)
    serial = DistFactors.from_case(rts24)
    eligible = [k for k, b in enumerate(rts24.branches) if b.id not in radial_branches(rts24)]
    out = {}

    def work(k):
        out[k] = df.otdf(k)

    ts = [threading.Thread(target=work, args=(k,)) for k in eligible]
    for t in ts:
        t.start()
    for t in ts:
        t.join()
    for k in eligible:
        assert np.array_equal(out[k], serial.otdf(k))


def test_csv_dump(case3):
    df = DistFactors.from_case(case3)
    text = df.to_csv("ptdf")
    assert text.splitlines()[0] == "branch,1,2,3"
    assert len(df.to_csv("otdf", "1-2").splitlines()) == 4
    assert df.to_csv("lodf", "1-2").splitlines()[1] == "1-2,-1"


def br(s, qf, qt, qfc=None, qtc=None, short=None):
    return Branch("b", "1", "2", 0.1, s, short if short is not None else 1.15 * s, qf, qt, qfc, qtc)


def test_limit_examples():
    assert active_limits(br(100, 0, 0)) == 100
    assert active_limits(br(100, 60, 60)) == pytest.approx(80)
    with pytest.raises(ReactiveLimitError):
        active_limits(br(100, 101, 0))


def test_contingency_limit_uses_short_rating_and_fallback():
    b = br(100, 30, 10)
    assert active_limits(b, "contingency") == pytest.approx(np.sqrt(115 ** 2 - 30 ** 2))
    assert active_limits(b, "contingency", st_factor=1.2) == pytest.approx(np.sqrt(120 ** 2 - 900))
    b2 = br(100, 30, 10, qfc=50, qtc=-70)
    assert active_limits(b2, "contingency") == pytest.approx(np.sqrt(115 ** 2 - 50 ** 2))


@settings(max_examples=200, deadline=None)
@given(st.floats(1, 1e4), st.floats(-1, 1), st.floats(-1, 1))
def test_limit_formula_property(s, a, b):
    qf, qt = a * s, b * s
    q = max(qf, qt)
    assert active_limits(br(s, qf, qt)) == pytest.approx(np.sqrt(s * s - q * q), rel=1e-12, abs=1e-9)


def test_limits_vector(case5):
    v = limits_vector(case5, "contingency", 1.15)
    assert v[1] == pytest.approx(115.0)
