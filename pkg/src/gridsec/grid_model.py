"""Grid case representation, case-file ingestion and structural validation.

A :class:`GridCase` stores power quantities in MW / Mvar / MVA and branch
reactances in per-unit on ``mva_base``.  Conversion to per-unit happens in
:mod:`gridsec.network` when the DC model is assembled.
"""

from __future__ import annotations

import json
import logging
import re
from dataclasses import asdict, dataclass, field, replace
from typing import IO, Iterable

import numpy as np

log = logging.getLogger(__name__)

SCHEMA_VERSION = 1
DEFAULT_LOSS_FRACTION = 0.02
DEFAULT_SHORT_TERM_FACTOR = 1.15


class CaseParseError(ValueError):
    """Raised when a case source cannot be parsed."""


class CaseValidationError(ValueError):
    """Raised when a parsed case breaks a structural invariant."""

    def __init__(self, diagnostics: list["Diagnostic"]):
        self.diagnostics = diagnostics
        msg = "; ".join(f"{d.location}: {d.message}" for d in diagnostics)
        super().__init__(msg)


@dataclass(frozen=True)
class Bus:
    id: str
    base_kv: float
    load_p: float = 0.0
    load_q: float = 0.0
    is_slack: bool = False


@dataclass(frozen=True)
class Branch:
    id: str
    from_bus: str
    to_bus: str
    reactance_x: float
    rating_long_s: float
    rating_short_s: float
    q_from: float = 0.0
    q_to: float = 0.0
    q_from_ctg: float | None = None
    q_to_ctg: float | None = None
    in_service: bool = True


@dataclass(frozen=True)
class Generator:
    id: str
    bus: str
    p_min: float
    p_max: float
    p0: float
    ramp_rate: float
    cost_energy: float
    cost_reserve: float = 0.0


@dataclass(frozen=True)
class Diagnostic:
    severity: str  # "error" | "warning"
    location: str
    message: str


@dataclass(frozen=True)
class GridCase:
    buses: tuple[Bus, ...]
    branches: tuple[Branch, ...]
    generators: tuple[Generator, ...]
    loss_fraction: float = DEFAULT_LOSS_FRACTION
    mva_base: float = 100.0
    name: str = ""

    def __post_init__(self):
        # accept lists but store tuples so the case stays hashable/immutable
        object.__setattr__(self, "buses", tuple(self.buses))
        object.__setattr__(self, "branches", tuple(self.branches))
        object.__setattr__(self, "generators", tuple(self.generators))

    @property
    def n_bus(self) -> int:
        return len(self.buses)

    @property
    def bus_ids(self) -> list[str]:
        return [b.id for b in self.buses]

    @property
    def branch_ids(self) -> list[str]:
        return [b.id for b in self.branches]

    def bus_index(self) -> dict[str, int]:
        return {b.id: i for i, b in enumerate(self.buses)}

    def branch_index(self) -> dict[str, int]:
        return {b.id: i for i, b in enumerate(self.branches)}

    def branch(self, branch_id: str) -> Branch:
        for br in self.branches:
            if br.id == branch_id:
                return br
        raise KeyError(branch_id)

    @property
    def slack_index(self) -> int:
        for i, b in enumerate(self.buses):
            if b.is_slack:
                return i
        raise ValueError("case has no slack bus")

    @property
    def loads(self) -> np.ndarray:
        """Real load per bus, MW."""
        return np.array([b.load_p for b in self.buses], dtype=float)

    @property
    def p0(self) -> np.ndarray:
        return np.array([g.p0 for g in self.generators], dtype=float)

    def gen_bus_matrix(self) -> np.ndarray:
        """Generator-to-bus connectivity, shape (n_bus, n_gen)."""
        idx = self.bus_index()
        gb = np.zeros((len(self.buses), len(self.generators)))
        for j, g in enumerate(self.generators):
            gb[idx[g.bus], j] = 1.0
        return gb

    def with_loads(self, loads: Iterable[float]) -> "GridCase":
        buses = [replace(b, load_p=float(p)) for b, p in zip(self.buses, loads)]
        return replace(self, buses=tuple(buses))

    def with_dispatch(self, p_g: Iterable[float]) -> "GridCase":
        gens = [replace(g, p0=float(p)) for g, p in zip(self.generators, p_g)]
        return replace(self, generators=tuple(gens))


# ---------------------------------------------------------------------------
# validation


class _UnionFind:
    def __init__(self, n: int):
        self.parent = list(range(n))

    def find(self, i: int) -> int:
        while self.parent[i] != i:
            self.parent[i] = self.parent[self.parent[i]]
            i = self.parent[i]
        return i

    def union(self, a: int, b: int) -> None:
        ra, rb = self.find(a), self.find(b)
        if ra != rb:
            self.parent[max(ra, rb)] = min(ra, rb)


def connected_components(case: GridCase, skip: str | None = None) -> list[list[str]]:
    """Bus-id components over in-service branches, optionally ignoring one branch."""
    idx = case.bus_index()
    uf = _UnionFind(len(case.buses))
    for br in case.branches:
        if not br.in_service or br.id == skip:
            continue
        if br.from_bus in idx and br.to_bus in idx:
            uf.union(idx[br.from_bus], idx[br.to_bus])
    groups: dict[int, list[str]] = {}
    for b in case.buses:
        groups.setdefault(uf.find(idx[b.id]), []).append(b.id)
    return sorted(groups.values(), key=lambda g: (-len(g), g[0]))


def validate(case: GridCase) -> list[Diagnostic]:
    """Check every structural invariant; returns an empty list for a valid case."""
    out: list[Diagnostic] = []

    def err(loc: str, msg: str) -> None:
        out.append(Diagnostic("error", loc, msg))

    seen: set[str] = set()
    for i, b in enumerate(case.buses):
        loc = f"buses[{i}]"
        if b.id in seen:
            err(f"{loc}.id", f"duplicate bus id {b.id!r}")
        seen.add(b.id)
        if not b.base_kv > 0:
            err(f"{loc}.base_kv", f"bus {b.id!r}: base_kv must be > 0")
    n_slack = sum(b.is_slack for b in case.buses)
    if n_slack != 1:
        err("buses", f"expected exactly one slack bus, found {n_slack}")

    seen = set()
    for i, br in enumerate(case.branches):
        loc = f"branches[{i}]"
        if br.id in seen:
            err(f"{loc}.id", f"duplicate branch id {br.id!r}")
        seen.add(br.id)
        for end in ("from_bus", "to_bus"):
            if getattr(br, end) not in case.bus_index():
                err(f"{loc}.{end}", f"branch {br.id!r}: unknown bus {getattr(br, end)!r}")
        if br.from_bus == br.to_bus:
            err(f"{loc}.to_bus", f"branch {br.id!r}: from_bus equals to_bus")
        if br.reactance_x == 0 or not np.isfinite(br.reactance_x):
            err(f"{loc}.reactance_x", f"branch {br.id!r}: reactance must be nonzero")
        if not br.rating_long_s > 0:
            err(f"{loc}.rating_long_s", f"branch {br.id!r}: rating must be > 0")
        if br.rating_short_s < br.rating_long_s:
            err(f"{loc}.rating_short_s",
                f"branch {br.id!r}: short-term rating below long-term rating")

    seen = set()
    for i, g in enumerate(case.generators):
        loc = f"generators[{i}]"
        if g.id in seen:
            err(f"{loc}.id", f"duplicate generator id {g.id!r}")
        seen.add(g.id)
        if g.bus not in case.bus_index():
            err(f"{loc}.bus", f"generator {g.id!r}: unknown bus {g.bus!r}")
        if not (g.p_min <= g.p0 <= g.p_max):
            err(f"{loc}.p0", f"generator {g.id!r}: p0 outside [p_min, p_max]")
        if g.ramp_rate < 0:
            err(f"{loc}.ramp_rate", f"generator {g.id!r}: negative ramp rate")
        if g.p_max < 0:
            err(f"{loc}.p_max", f"generator {g.id!r}: negative p_max")

    if not case.mva_base > 0:
        err("mva_base", "mva_base must be > 0")
    if not 0 <= case.loss_fraction < 1:
        err("loss_fraction", "loss_fraction must lie in [0, 1)")

    comps = connected_components(case)
    if len(comps) > 1:
        for comp in comps[1:]:
            err("branches", f"network is disconnected: island {{{', '.join(comp)}}}")

    cap = sum(g.p_max for g in case.generators)
    need = (1 + case.loss_fraction) * float(case.loads.sum())
    if cap < need - 1e-9:
        err("generators", f"generation capacity {cap:.3f} MW below loss-adjusted load {need:.3f} MW")
    return out


def radial_branches(case: GridCase) -> set[str]:
    """Ids of in-service branches whose removal disconnects the network (bridges).

    Parallel branches between the same pair of buses are never bridges.
    """
    idx = case.bus_index()
    adj: list[list[tuple[int, int]]] = [[] for _ in case.buses]
    live = [br for br in case.branches if br.in_service]
    for e, br in enumerate(live):
        a, b = idx[br.from_bus], idx[br.to_bus]
        adj[a].append((b, e))
        adj[b].append((a, e))

    n = len(case.buses)
    disc = [-1] * n
    low = [0] * n
    bridges: set[str] = set()
    timer = 0
    for root in range(n):
        if disc[root] >= 0:
            continue
        disc[root] = low[root] = timer
        timer += 1
        # iterative DFS; the parent *edge* is tracked so parallel lines are handled
        stack = [(root, -1, iter(adj[root]))]
        while stack:
            v, pedge, it = stack[-1]
            advanced = False
            for w, e in it:
                if e == pedge:
                    continue
                if disc[w] < 0:
                    disc[w] = low[w] = timer
                    timer += 1
                    stack.append((w, e, iter(adj[w])))
                    advanced = True
                    break
                low[v] = min(low[v], disc[w])
            if advanced:
                continue
            stack.pop()
            if stack:
                u = stack[-1][0]
                low[u] = min(low[u], low[v])
                if low[v] > disc[u]:
                    bridges.add(live[pedge].id)
    return bridges


# ---------------------------------------------------------------------------
# ingestion


def _assign_slack(case: GridCase) -> tuple[GridCase, list[Diagnostic]]:
    if any(b.is_slack for b in case.buses) or not case.generators:
        return case, []
    cap: dict[str, float] = {}
    for g in case.generators:
        cap[g.bus] = cap.get(g.bus, 0.0) + g.p_max
    order = case.bus_index()
    pick = max(cap, key=lambda b: (cap[b], -order.get(b, 0)))
    buses = tuple(replace(b, is_slack=(b.id == pick)) for b in case.buses)
    diag = Diagnostic("warning", "buses",
                      f"no slack bus marked; using highest-capacity generator bus {pick!r}")
    log.warning(diag.message)
    return replace(case, buses=buses), [diag]


def _float(d: dict, key: str, path: str, default=None) -> float:
    if key not in d or d[key] is None:
        if default is None:
            raise CaseValidationError([Diagnostic("error", path + "." + key, "missing field")])
        return default
    try:
        return float(d[key])
    except (TypeError, ValueError):
        raise CaseValidationError(
            [Diagnostic("error", f"{path}.{key}", f"not a number: {d[key]!r}")]) from None


def case_from_dict(data: dict, name: str = "") -> GridCase:
    """Build a case from the native JSON structure (no validation)."""
    for key in ("buses", "branches", "generators"):
        if not isinstance(data.get(key), list):
            raise CaseValidationError([Diagnostic("error", key, "missing or not a list")])
    buses = []
    for i, b in enumerate(data["buses"]):
        p = f"buses[{i}]"
        buses.append(Bus(
            id=str(b["id"]),
            base_kv=_float(b, "base_kv", p),
            load_p=_float(b, "load_p", p, 0.0),
            load_q=_float(b, "load_q", p, 0.0),
            is_slack=bool(b.get("is_slack", False)),
        ))
    branches = []
    for i, br in enumerate(data["branches"]):
        p = f"branches[{i}]"
        s_long = _float(br, "rating_long_s", p)
        q_fc = br.get("q_from_ctg")
        q_tc = br.get("q_to_ctg")
        branches.append(Branch(
            id=str(br["id"]),
            from_bus=str(br["from_bus"]),
            to_bus=str(br["to_bus"]),
            reactance_x=_float(br, "reactance_x", p),
            rating_long_s=s_long,
            rating_short_s=_float(br, "rating_short_s", p, DEFAULT_SHORT_TERM_FACTOR * s_long),
            q_from=_float(br, "q_from", p, 0.0),
            q_to=_float(br, "q_to", p, 0.0),
            q_from_ctg=None if q_fc is None else float(q_fc),
            q_to_ctg=None if q_tc is None else float(q_tc),
            in_service=bool(br.get("in_service", True)),
        ))
    gens = []
    for i, g in enumerate(data["generators"]):
        p = f"generators[{i}]"
        gens.append(Generator(
            id=str(g["id"]),
            bus=str(g["bus"]),
            p_min=_float(g, "p_min", p, 0.0),
            p_max=_float(g, "p_max", p),
            p0=_float(g, "p0", p),
            ramp_rate=_float(g, "ramp_rate", p),
            cost_energy=_float(g, "cost_energy", p),
            cost_reserve=_float(g, "cost_reserve", p, 0.0),
        ))
    return GridCase(
        buses=tuple(buses), branches=tuple(branches), generators=tuple(gens),
        loss_fraction=float(data.get("loss_fraction", DEFAULT_LOSS_FRACTION)),
        mva_base=float(data.get("mva_base", 100.0)),
        name=str(data.get("name", name)),
    )


def case_to_dict(case: GridCase) -> dict:
    return {
        "schema_version": SCHEMA_VERSION,
        "name": case.name,
        "mva_base": case.mva_base,
        "loss_fraction": case.loss_fraction,
        "buses": [asdict(b) for b in case.buses],
        "branches": [asdict(b) for b in case.branches],
        "generators": [asdict(g) for g in case.generators],
    }


def dumps_case(case: GridCase) -> str:
    return json.dumps(case_to_dict(case), indent=1)


_MPC_MATRIX = re.compile(r"mpc\.(\w+)\s*=\s*\[(.*?)\]\s*;", re.S)
_MPC_SCALAR = re.compile(r"mpc\.(\w+)\s*=\s*([-+0-9.eE]+)\s*;")


def _parse_mpc_tables(text: str) -> tuple[dict[str, float], dict[str, np.ndarray]]:
    text = re.sub(r"%[^\n]*", "", text)
    scalars = {k: float(v) for k, v in _MPC_SCALAR.findall(text)}
    tables = {}
    for key, body in _MPC_MATRIX.findall(text):
        rows = []
        for line in re.split(r"[;\n]", body):
            tok = line.replace(",", " ").split()
            if tok:
                rows.append([float(t) for t in tok])
        if rows:
            width = max(len(r) for r in rows)
            tables[key] = np.array([r + [0.0] * (width - len(r)) for r in rows])
    return scalars, tables


def case_from_matpower(text: str, name: str = "", default_ramp: float = 1.0) -> GridCase:
    """Map MATPOWER ``mpc`` tables onto the native case structure.

    Energy cost is the linear coefficient of a polynomial ``gencost`` row.
    Ramp rate (MW/min) comes from RAMP_10/10, then RAMP_AGC, else
    ``default_ramp`` times p_max.
    """
    scalars, tables = _parse_mpc_tables(text)
    if "bus" not in tables or "branch" not in tables or "gen" not in tables:
        raise CaseParseError("MATPOWER text must define mpc.bus, mpc.gen and mpc.branch")
    base = scalars.get("baseMVA", 100.0)
    bus_t, gen_t, br_t = tables["bus"], tables["gen"], tables["branch"]
    cost_t = tables.get("gencost")

    buses = [Bus(id=str(int(r[0])), base_kv=float(r[9]) if len(r) > 9 and r[9] > 0 else 1.0,
                 load_p=float(r[2]), load_q=float(r[3]), is_slack=int(r[1]) == 3)
             for r in bus_t]
    branches = []
    seen: dict[str, int] = {}
    for r in br_t:
        base_id = f"{int(r[0])}-{int(r[1])}"
        seen[base_id] = seen.get(base_id, 0) + 1
        bid = base_id if seen[base_id] == 1 else f"{base_id}#{seen[base_id]}"
        s_long = float(r[5]) if r[5] > 0 else 9999.0
        s_short = float(r[6]) if len(r) > 6 and r[6] >= s_long else DEFAULT_SHORT_TERM_FACTOR * s_long
        status = int(r[10]) if len(r) > 10 else 1
        branches.append(Branch(id=bid, from_bus=str(int(r[0])), to_bus=str(int(r[1])),
                               reactance_x=float(r[3]), rating_long_s=s_long,
                               rating_short_s=s_short, in_service=status > 0))
    gens = []
    for j, r in enumerate(gen_t):
        if len(r) > 7 and int(r[7]) <= 0:
            continue
        p_max, p_min = float(r[8]), float(r[9])
        ramp = 0.0
        if len(r) > 17 and r[17] > 0:
            ramp = float(r[17]) / 10.0
        elif len(r) > 16 and r[16] > 0:
            ramp = float(r[16])
        else:
            ramp = default_ramp * p_max
        cost = 0.0
        if cost_t is not None and j < len(cost_t):
            c = cost_t[j]
            if int(c[0]) == 2:
                n = int(c[3])
                coeffs = c[4:4 + n]
                cost = float(coeffs[-2]) if n >= 2 else 0.0
            else:
                # piecewise linear: slope of the first segment
                cost = float((c[7] - c[5]) / (c[6] - c[4])) if c[6] != c[4] else 0.0
        p0 = min(max(float(r[1]), p_min), p_max)
        gens.append(Generator(id=f"G{j + 1}", bus=str(int(r[0])), p_min=p_min, p_max=p_max,
                              p0=p0, ramp_rate=ramp, cost_energy=cost))
    return GridCase(buses=tuple(buses), branches=tuple(branches), generators=tuple(gens),
                    mva_base=base, loss_fraction=DEFAULT_LOSS_FRACTION, name=name)


def load_case(source: str | bytes | IO, format: str = "json", name: str = "") -> GridCase:
    """Parse and validate a case.

    ``format`` is ``"json"`` (native schema) or ``"matpower"``.  Raises
    :class:`CaseParseError` on malformed input and :class:`CaseValidationError`
    on an invariant breach (diagnostics name the offending field).
    """
    if hasattr(source, "read"):
        source = source.read()
    if isinstance(source, bytes):
        source = source.decode("utf-8")
    if format == "json":
        try:
            data = json.loads(source)
        except json.JSONDecodeError as exc:
            raise CaseParseError(f"malformed JSON: {exc}") from exc
        if not isinstance(data, dict):
            raise CaseParseError("top level of a case must be a JSON object")
        version = data.get("schema_version", SCHEMA_VERSION)
        if version != SCHEMA_VERSION:
            raise CaseParseError(f"unsupported schema_version {version}")
        try:
            case = case_from_dict(data, name=name)
        except KeyError as exc:
            raise CaseValidationError([Diagnostic("error", str(exc), "missing field")]) from None
    elif format == "matpower":
        case = case_from_matpower(source, name=name)
    else:
        raise CaseParseError(f"unknown case format {format!r}")

    case, _ = _assign_slack(case)
    errors = [d for d in validate(case) if d.severity == "error"]
    if errors:
        raise CaseValidationError(errors)
    return case


def load_case_file(path, format: str | None = None) -> GridCase:
    from pathlib import Path
    path = Path(path)
    if format is None:
        format = "matpower" if path.suffix == ".m" else "json"
    with open(path, "rb") as fh:
        return load_case(fh, format=format, name=path.stem)


def bundled_case(name: str) -> GridCase:
    """Load one of the fixtures shipped in ``gridsec/data`` (e.g. ``"case5"``)."""
    from importlib import resources
    ref = resources.files("gridsec") / "data" / f"{name}.json"
    return load_case(ref.read_bytes(), name=name)


def bundled_case_names() -> list[str]:
    from importlib import resources
    root = resources.files("gridsec") / "data"
    return sorted(p.name[:-5] for p in root.iterdir() if p.name.endswith(".json"))
