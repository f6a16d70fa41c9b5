"""``gridsec`` command line: validate, rtca, sced, design, simulate, screen, report.

Every run writes its artifacts (JSON/CSV) into ``--out`` (if given) together
with ``run.json``, which holds the resolved configuration and a SHA-256 of
each artifact.  JSON artifacts also embed the configuration directly.
Exit status: 0 success, 1 domain failure (invalid case, infeasible SCED,
no certified attack), 2 usage error.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import os
import sys
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

from .attack import AttackSpec, AttackSpecError
from .benders import DEFAULT_EPS
from .grid_model import (CaseParseError, CaseValidationError, GridCase, bundled_case,
                         bundled_case_names, load_case_file, validate)
from .rtca import BASE
from .sced import ScedParams
from .sim import Ems, design_attack, implement_attack, screen_targets

log = logging.getLogger("gridsec")


@dataclass
class RunConfig:
    case: str = ""
    format: str | None = None
    tau: float = 0.90
    tau_base: float | None = None
    kv_min: float = 100.0
    st_factor: float = 1.15
    loss_fraction: float | None = None   # None keeps the case value (0.02 unless set)
    t_h: float = 15.0
    t_r: float = 10.0
    eps: float = DEFAULT_EPS
    max_iter: int = 200
    n1: list[float] = field(default_factory=lambda: [0.2, 0.5, 1.0, 2.0])
    ls: list[float] = field(default_factory=lambda: [0.1])
    sigma: float = 1e-3
    target: str | None = None
    contingency: str = BASE
    seed: int = 0
    multistart: int = 0
    rounds: int = 1
    jobs: int = 1
    ctg_flow_form: str = "paper"
    backend: str = "native"
    out: str | None = None

    def sced_params(self) -> ScedParams:
        return ScedParams(t_h=self.t_h, t_r=self.t_r, tau=self.tau, tau_base=self.tau_base,
                          kv_min=self.kv_min, st_factor=self.st_factor,
                          ctg_flow_form=self.ctg_flow_form)

    def to_dict(self) -> dict:
        d = asdict(self)
        d.pop("out")  # output location does not affect results
        return d


class UsageError(Exception):
    pass


def _check_config(cfg: RunConfig, cmd: str):
    def need(ok, flag, msg):
        if not ok:
            raise UsageError(f"{flag}: {msg}")

    need(0 < cfg.tau <= 1, "--tau", "must lie in (0, 1]")
    need(cfg.tau_base is None or 0 < cfg.tau_base <= 1, "--tau-base", "must lie in (0, 1]")
    need(cfg.kv_min >= 0, "--kv-min", "must be >= 0")
    need(cfg.st_factor > 0, "--st-factor", "must be > 0")
    need(cfg.loss_fraction is None or 0 <= cfg.loss_fraction < 1, "--loss-fraction", "must lie in [0, 1)")
    need(cfg.t_h > 0, "--t-h", "must be > 0")
    need(cfg.t_r > 0, "--t-r", "must be > 0")
    need(cfg.eps > 0, "--eps", "must be > 0")
    need(cfg.max_iter >= 1, "--max-iter", "must be >= 1")
    need(all(n > 0 for n in cfg.n1), "--n1", "l1 budget N1 must be > 0")
    need(all(0 < x <= 1 for x in cfg.ls), "--ls", "load-shift fraction must lie in (0, 1]")
    need(cfg.sigma > 0, "--sigma", "must be > 0")
    need(cfg.jobs >= 1, "--jobs", "must be >= 1")
    need(cfg.rounds >= 1, "--rounds", "must be >= 1")
    need(cfg.multistart >= 0, "--multistart", "must be >= 0")
    if cmd in ("design", "simulate"):
        need(cfg.target is not None, "--target", "required for this command")
        need(len(cfg.n1) == 1, "--n1", "takes a single value for this command")
        need(len(cfg.ls) == 1, "--ls", "takes a single value for this command")


def _load(cfg: RunConfig) -> GridCase:
    p = Path(cfg.case)
    if p.exists():
        case = load_case_file(p, cfg.format)
    elif cfg.case in bundled_case_names():
        case = bundled_case(cfg.case)
    else:
        raise UsageError(f"--case: no file or bundled case named {cfg.case!r} "
                         f"(bundled: {', '.join(bundled_case_names())})")
    if cfg.loss_fraction is not None:
        case = replace(case, loss_fraction=cfg.loss_fraction)
    return case


class _Writer:
    def __init__(self, cfg: RunConfig, cmd: str):
        self.cfg, self.cmd = cfg, cmd
        self.out = Path(cfg.out) if cfg.out else None
        self.digests: dict[str, str] = {}
        if self.out:
            self.out.mkdir(parents=True, exist_ok=True)

    def json(self, name: str, payload: dict) -> str:
        payload = dict(payload, config=self.cfg.to_dict(), command=self.cmd)
        return self.text(name, json.dumps(payload, indent=1, sort_keys=True) + "\n")

    def text(self, name: str, body: str) -> str:
        self.digests[name] = hashlib.sha256(body.encode()).hexdigest()
        if self.out:
            (self.out / name).write_text(body)
        return body

    def close(self, status: int):
        if self.out:
            run = {"command": self.cmd, "config": self.cfg.to_dict(), "exit_status": status,
                   "artifacts": dict(sorted(self.digests.items()))}
            (self.out / "run.json").write_text(json.dumps(run, indent=1, sort_keys=True) + "\n")


def _cmd_validate(cfg, w: _Writer) -> int:
    p = Path(cfg.case)
    try:
        case = _load(cfg)
    except (CaseParseError, CaseValidationError) as exc:
        diags = getattr(exc, "diagnostics", None)
        items = [asdict(d) for d in diags] if diags else [{"severity": "error",
                                                          "location": str(p), "message": str(exc)}]
        sys.stdout.write(w.json("diagnostics.json", {"valid": False, "diagnostics": items}))
        return 1
    diags = [asdict(d) for d in validate(case)]
    sys.stdout.write(w.json("diagnostics.json", {"valid": True, "diagnostics": diags}))
    return 0


def _ems(cfg) -> Ems:
    return Ems(_load(cfg), cfg.sced_params(), backend=cfg.backend)


def _cmd_rtca(cfg, w: _Writer) -> int:
    ems = _ems(cfg)
    res, cons = ems.rtca()
    w.text("rtca.csv", res.to_csv())
    sys.stdout.write(w.text("rtca_warnings.csv", res.to_csv(flagged_only=True)))
    w.json("constraints.json", {"base": [asdict(c) for c in cons.base],
                                "contingency": [asdict(c) for c in cons.contingency]})
    return 0


def _cmd_sced(cfg, w: _Writer) -> int:
    ems = _ems(cfg)
    _, cons = ems.rtca()
    sol = ems.sced(cons)
    sys.stdout.write(w.json("sced.json", sol.to_dict()))
    return 0 if sol.optimal else 1


def _spec(cfg) -> AttackSpec:
    return AttackSpec(cfg.target, cfg.contingency, n1=cfg.n1[0], ls=cfg.ls[0], sigma=cfg.sigma)


def _cmd_design(cfg, w: _Writer) -> int:
    ems = _ems(cfg)
    d = design_attack(ems, _spec(cfg), eps=cfg.eps, max_iter=cfg.max_iter,
                      multistart=cfg.multistart, seed=cfg.seed)
    w.text("trace.jsonl", "".join(json.dumps(t, sort_keys=True) + "\n" for t in d.trace))
    sys.stdout.write(w.json("design.json", d.to_dict()))
    return 1 if d.status == "infeasible" else 0


def _cmd_simulate(cfg, w: _Writer) -> int:
    ems = _ems(cfg)
    d = design_attack(ems, _spec(cfg), eps=cfg.eps, max_iter=cfg.max_iter,
                      multistart=cfg.multistart, seed=cfg.seed)
    if d.status == "infeasible":
        sys.stdout.write(w.json("report.json", {"design": d.to_dict()}))
        return 1
    rep = implement_attack(ems, d, rounds=cfg.rounds)
    w.text("scatter.csv", rep.scatter_csv())
    w.text("trace.jsonl", "".join(json.dumps(t, sort_keys=True) + "\n" for t in d.trace))
    sys.stdout.write(w.json("report.json", {"design": d.to_dict(), "report": rep.to_dict()}))
    return 0


def _cmd_screen(cfg, w: _Writer) -> int:
    ems = _ems(cfg)
    sweep = screen_targets(ems, cfg.n1, cfg.ls, sigma=cfg.sigma, eps=cfg.eps,
                           max_iter=cfg.max_iter, multistart=cfg.multistart, rounds=cfg.rounds,
                           jobs=cfg.jobs)
    w.text("screen_cells.csv", sweep.detail_csv())
    w.text("screen_plot.csv", sweep.plot_csv())
    sys.stdout.write(w.text("screen.csv", sweep.to_csv()))
    return 0


def _cmd_report(cfg, w: _Writer) -> int:
    """Human-readable summary of a ``simulate`` report.json or a ``screen`` screen.csv."""
    p = Path(cfg.case)
    if not p.exists():
        raise UsageError(f"--input: no such file {cfg.case!r}")
    if p.suffix == ".json":
        data = json.loads(p.read_text())
        if "report" not in data:
            raise UsageError("--input: not a simulate report")
        r = data["report"]
        lines = [f"target {r['target']} under contingency {r['contingency']}",
                 f"  pre-attack   {r['pre_attack_pct']:9.3f} %",
                 f"  predicted    {r['predicted_pct']:9.3f} %",
                 f"  cyber        {r['cyber_pct']:9.3f} %",
                 f"  physical     {r['physical_pct']:9.3f} %",
                 f"  masked overflow: {'yes' if r['masked_overflow'] else 'no'}",
                 f"  |c|_0 = {r['l0']}, |c|_1 = {r['l1']:.6g}, SCED {r['sced_status']}",
                 f"  collateral violations: {len(r['collateral'])}"]
        for c in r["collateral"]:
            lines.append(f"    {c['line']} | {c['contingency']}: {c['physical_pct']:.3f} %")
    else:
        import csv
        rows = list(csv.DictReader(p.open()))
        lines = [f"{'target':>10} {'contingency':>12} {'max PF range (%)':>22} {'|c|_0 range':>12}"]
        for r in rows:
            pf = f"{float(r['max_pf_min_pct']):.2f}-{float(r['max_pf_max_pct']):.2f}"
            lines.append(f"{r['target']:>10} {r['contingency']:>12} {pf:>22} "
                         f"{r['l0_min'] + '-' + r['l0_max']:>12}")
    sys.stdout.write(w.text("report.txt", "\n".join(lines) + "\n"))
    return 0


COMMANDS = {"validate": _cmd_validate, "rtca": _cmd_rtca, "sced": _cmd_sced,
            "design": _cmd_design, "simulate": _cmd_simulate, "screen": _cmd_screen,
            "report": _cmd_report}


def build_parser() -> argparse.ArgumentParser:
    d = RunConfig()
    ap = argparse.ArgumentParser(prog="gridsec", description=__doc__.splitlines()[0])
    sub = ap.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        if name == "report":
            p.add_argument("--input", dest="case", required=True,
                           help="report.json from simulate or screen.csv from screen")
            p.add_argument("--out")
            continue
        p.add_argument("--case", required=True, help="case file (.json/.m) or bundled case name")
        p.add_argument("--format", choices=("json", "matpower"))
        p.add_argument("--out", help="directory for artifacts")
        if name == "validate":
            continue
        p.add_argument("--tau", type=float, default=d.tau)
        p.add_argument("--tau-base", type=float, default=d.tau_base)
        p.add_argument("--kv-min", type=float, default=d.kv_min)
        p.add_argument("--st-factor", type=float, default=d.st_factor)
        p.add_argument("--loss-fraction", type=float, default=d.loss_fraction)
        p.add_argument("--t-h", type=float, default=d.t_h, help="look-ahead window, minutes")
        p.add_argument("--t-r", type=float, default=d.t_r, help="reserve window, minutes")
        p.add_argument("--ctg-flow-form", choices=("paper", "textbook"), default=d.ctg_flow_form)
        p.add_argument("--backend", choices=("native", "highs"), default=d.backend)
        if name in ("rtca", "sced"):
            continue
        multi = "+" if name == "screen" else None
        p.add_argument("--n1", type=float, nargs=multi,
                       default=d.n1 if name == "screen" else 1.0)
        p.add_argument("--ls", type=float, nargs=multi,
                       default=d.ls if name == "screen" else 0.1)
        p.add_argument("--sigma", type=float, default=d.sigma)
        p.add_argument("--eps", type=float, default=d.eps)
        p.add_argument("--max-iter", type=int, default=d.max_iter)
        p.add_argument("--multistart", type=int, default=d.multistart)
        p.add_argument("--seed", type=int, default=d.seed)
        p.add_argument("--rounds", type=int, default=d.rounds)
        if name == "screen":
            p.add_argument("--jobs", type=int, default=d.jobs)
        else:
            p.add_argument("--target", required=True)
            p.add_argument("--contingency", default=BASE)
    return ap


def config_from_args(ns: argparse.Namespace) -> RunConfig:
    kw = {k: v for k, v in vars(ns).items() if k != "command" and v is not None}
    for k in ("n1", "ls"):
        if k in kw and not isinstance(kw[k], list):
            kw[k] = [kw[k]]
    return RunConfig(**kw)


def main(argv: list[str] | None = None) -> int:
    level = os.environ.get("GRIDSEC_LOG", "WARNING").upper()
    logging.basicConfig(level=getattr(logging, level, logging.WARNING),
                        format="%(levelname)s %(name)s: %(message)s")
    ap = build_parser()
    ns = ap.parse_args(argv)
    cfg = config_from_args(ns)
    try:
        _check_config(cfg, ns.command)
        w = _Writer(cfg, ns.command)
    except UsageError as exc:
        ap.error(str(exc))  # exits 2
    status = 1
    try:
        status = COMMANDS[ns.command](cfg, w)
    except UsageError as exc:
        ap.error(str(exc))
    except (CaseParseError, CaseValidationError, AttackSpecError) as exc:
        print(f"gridsec: {exc}", file=sys.stderr)
        status = 1
    w.close(status)
    return status


if __name__ == "__main__":
    sys.exit(main())
