#!/usr/bin/env python3
"""Run the acceptance criteria and write a JSON report.

    python scripts/run_acceptance.py                 # full size, all criteria
    python scripts/run_acceptance.py --quick         # reduced grids, no determinism pass
    python scripts/run_acceptance.py --only 8 16 17  # selected criteria
"""

import argparse
import json
import sys

from cablegff.acceptance import run_acceptance


def main() -> int:
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--quick", action="store_true")
    p.add_argument("--only", type=int, nargs="*")
    p.add_argument("--report", default="acceptance_report.json")
    args = p.parse_args()
    results = run_acceptance(args.quick, args.only, progress=lambda r: print(r.line(), flush=True))
    report = [{**r.to_dict(), "seconds": r.seconds, "budget_s": r.budget_s} for r in results]
    with open(args.report, "w") as fh:
        json.dump(report, fh, indent=2, sort_keys=True)
    failed = [r.number for r in results if not (r.passed and r.within_budget)]
    print(f"{len(results) - len(failed)}/{len(results)} passed" + (f"; failed: {failed}" if failed else ""))
    return 1 if failed else 0


if __name__ == "__main__":
    sys.exit(main())
