"""Record the MBD trace on the first 3-bus attack instance as a golden file.

Run once from the repository root; the benders tests compare against it.
The recorded optimum is cross-checked against the KKT oracle before writing.
"""

import json
import sys
from pathlib import Path

sys.path.insert(0, str(Path(__file__).resolve().parents[1] / "tests"))

from instances import tiny_attack_family  # noqa: E402

from gridsec.attack import kkt_milp_oracle  # noqa: E402
from gridsec.benders import mbd  # noqa: E402

GOLDEN = Path(__file__).resolve().parents[1] / "tests" / "golden" / "mbd_case3_trace.json"


def main():
    key, bp = tiny_attack_family()[0]
    res = mbd(bp)
    oracle = kkt_milp_oracle(bp).objective
    if abs(res.objective - oracle) > 1e-3 * abs(oracle):
        raise SystemExit(f"MBD {res.objective} disagrees with oracle {oracle}; not recording")
    GOLDEN.parent.mkdir(exist_ok=True)
    GOLDEN.write_text(json.dumps({
        "instance": {"target": key[0], "contingency": key[1], "loads": list(key[2]),
                     "n1": key[3]},
        "objective": res.objective, "oracle_objective": oracle, "status": res.status,
        "trace": [t.to_dict() for t in res.trace]}, indent=1) + "\n")
    print(f"wrote {GOLDEN} ({len(res.trace)} iterations)")


if __name__ == "__main__":
    main()
