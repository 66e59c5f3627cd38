"""Run recurrence and lyapunov on every builtin scenario and print one summary row each.

    python3 scripts/run_all_scenarios.py [--resolution 64] [--out-dir runs]

Artifacts land in <out-dir>/<scenario>/<command>/ exactly as the CLI writes them.
"""
import argparse
import json
import time
from pathlib import Path

from orbiflow import scenarios
from orbiflow.cli import main


def run(argv):
    t0 = time.perf_counter()
    code = main(argv)
    return code, time.perf_counter() - t0


def summarize(out: Path) -> str:
    if not (out / "recurrence" / "recurrence.json").exists():
        return "no recurrence output (see the exit code)"
    rec = json.loads((out / "recurrence" / "recurrence.json").read_text())["recurrence"]
    lyap = out / "lyapunov"
    if (lyap / "certificate.json").exists():
        checks = json.loads((lyap / "certificate.json").read_text())["checks"]
        verdict = "certified" if all(c["passed"] for c in checks["checks"]) else "checks failed"
    elif (lyap / "refusal.json").exists():
        verdict = "refused " + json.loads((lyap / "refusal.json").read_text())["code"]
    else:
        verdict = "no output"
    return (f"R={len(rec['R_boxes'])} Rxi={len(rec['Rxi_boxes'])} Cxi={len(rec['Cxi_boxes'])} "
            f"closed={rec['Cxi_closed']} b={rec['condition_b_holds']} -> {verdict}")


def cli():
    ap = argparse.ArgumentParser(description=__doc__.split("\n\n")[0])
    ap.add_argument("--resolution", type=int, help="override every scenario's resolution")
    ap.add_argument("--out-dir", default="runs")
    args = ap.parse_args()
    for name in scenarios.names():
        out = Path(args.out_dir) / name
        extra = ["--resolution", str(args.resolution)] if args.resolution else []
        codes, total = [], 0.0
        for command in ("recurrence", "lyapunov"):
            code, dt = run([command, "--scenario", name, "--check-expected", "--out-dir",
                            str(out / command), *extra])
            codes.append(code)
            total += dt
        print(f"{name:24s} exit={codes} {total:6.1f}s  {summarize(out)}")


if __name__ == "__main__":
    cli()
