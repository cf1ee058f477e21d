"""CCE robustness of the erasure modes as a function of the inversion
learning rate used for both construction and attack.

Reuses one pretrained model; every other stage reruns per setting.

    python3 scripts/sweep_ti_lr.py --out runs/sweep_ti_lr --lrs 5e-4 1e-3 2e-3
"""
import argparse
import shutil
from dataclasses import replace
from pathlib import Path

from suma_lab.config import load_with_overrides
from suma_lab.pipeline import Run, rows_to_csv, worst


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--config", default=None)
    ap.add_argument("--out", default="runs/sweep_ti_lr")
    ap.add_argument("--lrs", type=float, nargs="+", default=[5e-4, 1e-3, 2e-3])
    ap.add_argument("--modes", nargs="+", default=["ca_only", "suma", "push"])
    args = ap.parse_args()

    base = load_with_overrides(args.config)
    root = Path(args.out)
    pre = Run(base, root / "pretrain")
    pre.execute(["pretrain"])
    rows = []
    for lr in args.lrs:
        cfg = load_with_overrides(args.config, [f"ti.lr={lr}"])
        run = Run(cfg, root / f"lr_{lr:g}")
        run.out.mkdir(parents=True, exist_ok=True)
        shutil.copy(pre.path("model.suma"), run.path("model.suma"))
        run.stage_construct()
        for mode in args.modes:
            em, _ = run.eliminate(replace(cfg.erasure, mode=mode), tag=f"sweep/{mode}")
            rep = run.evaluate(em, run.attack(em, tag=f"sweep/{mode}", do_ud=False))
            rows.append((f"{lr:g}", mode, rep.asr_textual, rep.asr_cce, worst(rep, "asr_cce"),
                         rep.toy_fid, rep.toy_clip))
            print(f"lr {lr:g} {mode:<10} textual {rep.asr_textual:.3f} CCE {rep.asr_cce:.3f} "
                  f"fid {rep.toy_fid:.3f}")
    text = rows_to_csv(["ti_lr", "mode", "asr_textual", "asr_cce", "asr_cce_max", "toy_fid",
                        "toy_clip"], rows)
    (root / "sweep.csv").write_text(text)
    print(f"-> {root / 'sweep.csv'}")


if __name__ == "__main__":
    main()
