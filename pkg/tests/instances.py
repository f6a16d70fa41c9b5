"""Small cases and bilevel instances shared by the tests."""

import itertools
from dataclasses import replace

import numpy as np

from gridsec.attack import AttackSpec, BilevelProblem, build_bilevel
from gridsec.grid_model import Branch, Bus, GridCase, Generator, bundled_case
from gridsec.sim import Ems, steady_state


def two_bus_two_gen(load=100.0, rating=200.0) -> GridCase:
    buses = [Bus("1", 230.0, 0.0, 0.0, True), Bus("2", 230.0, load, 0.0, False)]
    branches = [Branch("1-2", "1", "2", 0.1, rating, 1.15 * rating, 0.0, 0.0)]
    gens = [Generator("G1", "1", 0.0, 300.0, 1.02 * load, 20.0, 10.0, 1.0),
            Generator("G2", "2", 0.0, 300.0, 0.0, 20.0, 30.0, 1.0)]
    return GridCase(buses, branches, gens, name="two_bus")


def triangle(x=(0.1, 0.1, 0.1), kv=230.0) -> GridCase:
    buses = [Bus("1", kv, 0.0, 0.0, False), Bus("2", kv, 0.0, 0.0, False),
             Bus("3", kv, 0.0, 0.0, True)]
    branches = [Branch("1-2", "1", "2", x[0], 100.0, 115.0, 0.0, 0.0),
                Branch("1-3", "1", "3", x[1], 100.0, 115.0, 0.0, 0.0),
                Branch("2-3", "2", "3", x[2], 100.0, 115.0, 0.0, 0.0)]
    gens = [Generator("G3", "3", 0.0, 100.0, 0.0, 10.0, 10.0, 1.0),
            Generator("G1", "1", 0.0, 100.0, 0.0, 10.0, 20.0, 1.0)]
    return GridCase(buses, branches, gens, name="triangle")


def binding_case3(target: str, ctg: str, loads, overload: float = 1.10) -> GridCase:
    """case3 with new loads and the target re-rated so SCED holds it at its limit.

    The unconstrained economic dispatch would load (target | ctg) to
    ``overload`` times its limit; the steady state therefore sits on it.
    """
    c = bundled_case("case3").with_loads(loads)
    wide = tuple(replace(b, rating_long_s=1000.0, rating_short_s=1150.0) for b in c.branches)
    c = steady_state(replace(c, branches=wide))
    res, _ = Ems(c).rtca()
    lim = abs(res.lookup(target, ctg).flow) / overload
    br = tuple(replace(b, rating_long_s=lim / 1.15, rating_short_s=lim) if b.id == target else b
               for b in c.branches)
    return steady_state(replace(c, branches=br))


TINY_PAIRS = (("1-2", "1-3"), ("1-3", "1-2"))
TINY_LOADS = ((0.0, 120.0, 30.0), (20.0, 100.0, 20.0), (40.0, 110.0, 0.0))
TINY_N1 = (0.001, 0.005, 0.05)


def tiny_attack_family():
    """Every constructible 3-bus attack over the pair x load x N1 grid.

    dim(u) = 4 (two non-slack buses) and the second level has at most 19
    SCED rows.  Load patterns whose re-rated target makes SCED infeasible are
    skipped, so membership does not depend on how any solver performs.
    """
    out = []
    for (t, k), loads, n1 in itertools.product(TINY_PAIRS, TINY_LOADS, TINY_N1):
        try:
            case = binding_case3(t, k, loads)
        except RuntimeError:
            continue
        ems = Ems(case)
        _, cons = ems.rtca()
        if (t, k) not in cons.keys():
            continue
        spec = AttackSpec(t, k, n1=n1, ls=0.1)
        out.append(((t, k, loads, n1), build_bilevel(case, ems.factors, cons, spec, ems.params)))
    return out


def random_balanced(rng, n, scale=100.0):
    x = rng.normal(scale=scale, size=n)
    return x - x.mean()


def dense_flows_oracle(case, inj, drop=None):
    """Power flow by a dense solve on the (possibly branch-reduced) topology."""
    idx = case.bus_index()
    H = np.zeros((case.n_bus, case.n_bus))
    for br in case.branches:
        if not br.in_service or br.id == drop:
            continue
        i, j, y = idx[br.from_bus], idx[br.to_bus], 1.0 / br.reactance_x
        H[i, i] += y; H[j, j] += y; H[i, j] -= y; H[j, i] -= y
    s = case.slack_index
    keep = [i for i in range(case.n_bus) if i != s]
    th = np.zeros(case.n_bus)
    th[keep] = np.linalg.solve(H[np.ix_(keep, keep)], np.asarray(inj)[keep] / case.mva_base)
    out = np.zeros(len(case.branches))
    for m, br in enumerate(case.branches):
        if br.in_service and br.id != drop:
            out[m] = (th[idx[br.from_bus]] - th[idx[br.to_bus]]) / br.reactance_x * case.mva_base
    return out


def random_bilevel(rng, nu=2, nv=3, m=4):
    """Generic bi-level LP with a box first level and an always-feasible bounded second level."""
    A1 = np.vstack([np.eye(nu), -np.eye(nu)])
    b1 = np.r_[np.zeros(nu), -np.ones(nu)]
    A2r = rng.normal(size=(m, nu))
    A3r = rng.normal(size=(m, nv))
    # v = 0 stays feasible for every u in the unit box
    b2r = np.minimum(A2r, 0).sum(1) - rng.uniform(0.1, 1.0, m)
    A3 = np.vstack([A3r, np.eye(nv), -np.eye(nv)])
    A2 = np.vstack([A2r, np.zeros((2 * nv, nu))])
    b2 = np.r_[b2r, -5 * np.ones(2 * nv)]
    return BilevelProblem(c1=rng.normal(scale=0.1, size=nu), d1=rng.normal(size=nv), A1=A1,
                          b1=b1, A2=A2, A3=A3, b2=b2, d2=rng.normal(size=nv))
