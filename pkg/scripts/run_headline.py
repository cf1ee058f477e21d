"""Full pipeline plus ablation tables for one config, then a short summary.

    python3 scripts/run_headline.py --config scripts/configs/default.yaml --out runs/default
"""
import argparse
import csv
import json
import time
from pathlib import Path

from suma_lab.config import load_with_overrides
from suma_lab.pipeline import Run, check_report


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--config", default=None)
    ap.add_argument("--out", default="runs/headline")
    ap.add_argument("--seed", type=int, default=None)
    ap.add_argument("--set", action="append", default=[], metavar="KEY=VALUE")
    args = ap.parse_args()

    cfg = load_with_overrides(args.config, args.set, args.seed)
    run = Run(cfg, args.out)
    t0 = time.perf_counter()
    run.execute(cfg.stages)
    print(f"pipeline: {time.perf_counter() - t0:.1f}s")
    if cfg.ablations:
        t0 = time.perf_counter()
        run.execute([], cfg.ablations)
        print(f"ablations: {time.perf_counter() - t0:.1f}s")
        run.path("report.json").unlink()  # re-emit with the ablation tables included
        run.execute(cfg.stages)

    report = json.loads(run.path("report.json").read_text())
    m = report["metrics"]
    print(f"\nASR textual {m['asr_textual']:.3f}  CCE {m['asr_cce']:.3f}  UD {m['asr_ud']:.3f}  "
          f"toy_fid {m['toy_fid']:.3f}  toy_clip {m['toy_clip']:.3f}")
    for name, ok, detail in check_report(report):
        if not name.startswith("distance"):
            print(f"  [{'PASS' if ok else 'FAIL'}] {name}")
    dist = [ok for name, ok, _ in check_report(report) if name.startswith("distance")]
    print(f"  distance order holds for {sum(dist)}/{len(dist)} concepts")
    for preset in cfg.ablations:
        print(f"\n{preset}")
        for row in csv.DictReader(Path(run.path(f"ablation_{preset}.csv")).open()):
            vals = "  ".join(f"{k}={float(v):.3f}" for k, v in row.items() if k != "variant")
            print(f"  {row['variant']:<18} {vals}")


if __name__ == "__main__":
    main()
