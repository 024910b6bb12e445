"""Run the demo sweep (or a given config) and print a per-ratio comparison table."""

import argparse
import csv
import sys
from pathlib import Path

from gpcover.cli import main as cli_main


def summarize(results: Path) -> str:
    with open(results, newline="") as fh:
        rows = list(csv.DictReader(fh))
    methods = list(dict.fromkeys(r["method"] for r in rows))
    ratios = sorted({float(r["ratio"]) for r in rows}, reverse=True)
    cell = {(r["method"], float(r["ratio"])): r for r in rows}
    head = f"{'ratio':>6} {'target':>9} " + " ".join(f"{m:>24}" for m in methods)
    lines = [head, " " * 17 + " ".join(f"{'wp / length_m / maxvar':>24}" for _ in methods)]
    for ratio in ratios:
        first = cell.get((methods[0], ratio), {})
        target = float(first.get("target_variance") or "nan")
        parts = []
        for m in methods:
            r = cell.get((m, ratio))
            if r is None or r["status"] != "ok":
                parts.append(f"{(r or {}).get('status', 'missing')[:24]:>24}")
                continue
            parts.append(f"{r['waypoints']:>5} / {float(r['path_length_m']):7.1f} / "
                         f"{float(r['max_posterior_variance']):.4f}")
        lines.append(f"{ratio:>6.2f} {target:>9.4f} " + " ".join(f"{p:>24}" for p in parts))
    return "\n".join(lines)


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--config", help="run configuration JSON (default: bundled demo)")
    ap.add_argument("--output-dir", default="bench-out")
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--refit", action="store_true", help="fit the kernel from the pilot survey")
    args = ap.parse_args(argv)

    cmd = ["benchmark", "--seed", str(args.seed), "--output-dir", args.output_dir, "--record-runtime"]
    cmd += ["--config", args.config] if args.config else ["--demo"]
    if args.refit:
        cmd.append("--refit")
    code = cli_main(cmd)
    if code:
        return code
    print(summarize(Path(args.output_dir) / "results.csv"))
    return 0


if __name__ == "__main__":
    sys.exit(main())
