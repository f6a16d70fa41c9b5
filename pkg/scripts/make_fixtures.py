"""Regenerate the bundled JSON cases in src/gridsec/data.

Dispatches (p0) are steady states: they are found by iterating RTCA -> SCED
until SCED returns its own starting point, then written to the file.
Run:  python scripts/make_fixtures.py
"""

from __future__ import annotations

import pathlib
from dataclasses import replace

import numpy as np

from gridsec.grid_model import Branch, Bus, GridCase, Generator, dumps_case, validate
from gridsec.sced import ScedParams
from gridsec.sim import steady_state

DATA = pathlib.Path(__file__).resolve().parents[1] / "src" / "gridsec" / "data"


def case2() -> GridCase:
    buses = [Bus("1", 230.0, 0.0, 0.0, True), Bus("2", 230.0, 100.0, 20.0, False)]
    branches = [Branch("1-2", "1", "2", 0.1, 200.0, 230.0, 20.0, 18.0)]
    gens = [Generator("G1", "1", 0.0, 300.0, 102.0, 10.0, 20.0, 1.0)]
    return GridCase(buses, branches, gens, name="case2")


def case3() -> GridCase:
    buses = [Bus("1", 230.0, 0.0, 0.0, False), Bus("2", 230.0, 150.0, 30.0, False),
             Bus("3", 230.0, 0.0, 0.0, True)]
    branches = [Branch("1-2", "1", "2", 0.1, 150.0, 172.5, 10.0, 10.0),
                Branch("1-3", "1", "3", 0.1, 150.0, 172.5, 5.0, 5.0),
                Branch("2-3", "2", "3", 0.1, 150.0, 172.5, 10.0, 10.0)]
    gens = [Generator("G1", "1", 0.0, 200.0, 100.0, 10.0, 15.0, 1.0),
            Generator("G3", "3", 0.0, 200.0, 53.0, 15.0, 30.0, 2.0)]
    return GridCase(buses, branches, gens, name="case3")


CASE5_TARGET = ("1-3", "1-2")


def case5(rating_13: float = 100.0) -> GridCase:
    """Meshed 4-bus core with a radial spur to bus 5; line 1-3 congests when 1-2 trips."""
    buses = [Bus("1", 230.0, 0.0, 0.0, True), Bus("2", 230.0, 100.0, 25.0, False),
             Bus("3", 230.0, 100.0, 25.0, False), Bus("4", 230.0, 160.0, 35.0, False),
             Bus("5", 115.0, 90.0, 20.0, False)]
    br = [("1-2", "1", "2", 0.06, 300.0), ("1-3", "1", "3", 0.24, rating_13),
          ("1-4", "1", "4", 0.18, 300.0), ("2-3", "2", "3", 0.18, 300.0),
          ("2-4", "2", "4", 0.12, 300.0), ("4-5", "4", "5", 0.08, 300.0)]
    branches = [Branch(i, f, t, x, s, 1.15 * s, 0.0, 0.0) for i, f, t, x, s in br]
    gens = [Generator("G1", "1", 0.0, 400.0, 220.0, 10.0, 10.0, 1.0),
            Generator("G2", "2", 0.0, 150.0, 150.0, 8.0, 20.0, 1.5),
            Generator("G5", "5", 0.0, 350.0, 89.0, 25.0, 40.0, 2.0)]
    return GridCase(buses, branches, gens, name="case5")


# IEEE RTS-24 topology: (from, to, x p.u., long-term MVA rating); "15-21" etc. are doubled
RTS_BRANCHES = [
    (1, 2, 0.0139, 175), (1, 3, 0.2112, 175), (1, 5, 0.0845, 175), (2, 4, 0.1267, 175),
    (2, 6, 0.1920, 175), (3, 9, 0.1190, 175), (3, 24, 0.0839, 400), (4, 9, 0.1037, 175),
    (5, 10, 0.0883, 175), (6, 10, 0.0605, 175), (7, 8, 0.0614, 175), (8, 9, 0.1651, 175),
    (8, 10, 0.1651, 175), (9, 11, 0.0839, 400), (9, 12, 0.0839, 400), (10, 11, 0.0839, 400),
    (10, 12, 0.0839, 400), (11, 13, 0.0476, 500), (11, 14, 0.0418, 500), (12, 13, 0.0476, 500),
    (12, 23, 0.0966, 500), (13, 23, 0.0865, 500), (14, 16, 0.0389, 500), (15, 16, 0.0173, 500),
    (15, 21, 0.0490, 500), (15, 21, 0.0490, 500), (15, 24, 0.0519, 500), (16, 17, 0.0259, 500),
    (16, 19, 0.0231, 500), (17, 18, 0.0144, 500), (17, 22, 0.1053, 500), (18, 21, 0.0259, 500),
    (18, 21, 0.0259, 500), (19, 20, 0.0396, 500), (19, 20, 0.0396, 500), (20, 23, 0.0216, 500),
    (20, 23, 0.0216, 500), (21, 22, 0.0678, 500),
]
RTS_LOADS = {1: (108, 22), 2: (97, 20), 3: (180, 37), 4: (74, 15), 5: (71, 14), 6: (136, 28),
             7: (125, 25), 8: (171, 35), 9: (175, 36), 10: (195, 40), 13: (265, 54),
             14: (194, 39), 15: (317, 64), 16: (100, 20), 18: (333, 68), 19: (181, 37),
             20: (128, 26)}
# unit type: (p_max, p_min, ramp MW/min, energy $/MWh, reserve $/MWh)
RTS_UNITS = {"U12": (12, 2.4, 1.0, 56.0, 4.0), "U20": (20, 0.0, 3.0, 70.0, 5.0),
             "U50": (50, 0.0, 5.0, 1.0, 0.5), "U76": (76, 15.2, 2.0, 16.0, 2.0),
             "U100": (100, 25.0, 7.0, 44.0, 3.0), "U155": (155, 54.3, 3.0, 13.0, 2.0),
             "U197": (197, 69.0, 3.0, 48.0, 3.5), "U350": (350, 140.0, 4.0, 11.0, 2.0),
             "U400": (400, 100.0, 4.0, 5.0, 1.0)}
RTS_GENS = [(1, "U20"), (1, "U20"), (1, "U76"), (1, "U76"), (2, "U20"), (2, "U20"), (2, "U76"),
            (2, "U76"), (7, "U100"), (7, "U100"), (7, "U100"), (13, "U197"), (13, "U197"),
            (13, "U197"), (15, "U12"), (15, "U12"), (15, "U12"), (15, "U12"), (15, "U12"),
            (15, "U155"), (16, "U155"), (18, "U400"), (21, "U400"), (22, "U50"), (22, "U50"),
            (22, "U50"), (22, "U50"), (22, "U50"), (22, "U50"), (23, "U155"), (23, "U155"),
            (23, "U350")]
RTS_LOAD_SCALE = 0.9
# target loading of the worst contingency for the most loaded lines; values
# above 1 make SCED bind there, so the steady state sits on those limits
RTS_TIGHTEN = (0.93, 0.96, 1.04, 1.08)


def rts24_raw() -> GridCase:
    buses = []
    for i in range(1, 25):
        p, q = RTS_LOADS.get(i, (0, 0))
        buses.append(Bus(str(i), 138.0 if i <= 10 else 230.0, RTS_LOAD_SCALE * p,
                         RTS_LOAD_SCALE * q, i == 13))
    branches, seen = [], {}
    for f, t, x, s in RTS_BRANCHES:
        key = f"{f}-{t}"
        seen[key] = seen.get(key, 0) + 1
        bid = key if seen[key] == 1 else f"{key}#{seen[key]}"
        q = 10.0 if s < 500 else 20.0
        branches.append(Branch(bid, str(f), str(t), x, float(s), 1.15 * s, q, -0.8 * q))
    gens, count = [], {}
    # deterministic small cost offsets keep every unit's marginal cost distinct
    for j, (bus, kind) in enumerate(RTS_GENS):
        pmax, pmin, ramp, ce, cr = RTS_UNITS[kind]
        count[bus] = count.get(bus, 0) + 1
        gens.append(Generator(f"G{bus}.{count[bus]}", str(bus), pmin, pmax, pmax / 2, ramp,
                              ce + 0.01 * j, cr + 0.001 * j))
    return GridCase(buses, branches, gens, name="rts24")


def rts24() -> GridCase:
    """RTS-24 at 90% load; the four most loaded lines are re-rated into the warning band."""
    from gridsec.sim import Ems

    params = ScedParams()
    case = steady_state(rts24_raw(), params, max_rounds=500)
    res, _ = Ems(case, params).rtca()
    worst = {}
    for e in res.entries:
        if e.contingency != "base":
            worst[e.line] = max(worst.get(e.line, 0.0), abs(e.flow))
    ranked = sorted(worst, key=lambda l: -worst[l] / case.branch(l).rating_short_s)
    tight = dict(zip(ranked, RTS_TIGHTEN))
    branches = []
    for br in case.branches:
        if br.id in tight:
            lim = worst[br.id] / tight[br.id]
            # contingency limit uses st_factor * S_long with q = 0 on re-rated lines
            br = replace(br, rating_long_s=lim / 1.15, rating_short_s=lim, q_from=0.0, q_to=0.0)
        branches.append(br)
    return steady_state(replace(case, branches=tuple(branches)), params)


def main():
    DATA.mkdir(parents=True, exist_ok=True)
    params = ScedParams()
    for build in (case2, case3, case5, rts24):
        case = steady_state(build(), params)
        errs = [d for d in validate(case) if d.severity == "error"]
        assert not errs, errs
        (DATA / f"{case.name}.json").write_text(dumps_case(case) + "\n")
        print(case.name, np.round(case.p0, 6))


if __name__ == "__main__":
    main()
