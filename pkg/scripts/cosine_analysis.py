"""Token-geometry analysis on a finished construct stage: cosine histograms
of late-stage inversion tokens within one erasure level and across levels,
the c_t curve of the final tokens, and the early/final/textual distances.

    python3 scripts/cosine_analysis.py --run runs/default
"""
import argparse
from pathlib import Path

import numpy as np

from suma_lab import metrics as M
from suma_lab.config import load_with_overrides
from suma_lab.pipeline import Run


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--run", required=True, help="output dir of a run that finished construct")
    ap.add_argument("--config", default=None)
    ap.add_argument("--concept", default=None)
    ap.add_argument("--from-step", type=int, default=300)
    args = ap.parse_args()

    cfg = load_with_overrides(args.config)
    run = Run(cfg, args.run)
    cid = args.concept or cfg.concepts[0]
    trajs = run.trajectories(cid)
    # short smoke runs: fall back to the second half of the trajectory
    start = min(args.from_step, trajs[0].final_step // 2)
    late = [np.stack([tr.token_at(s) for s in tr.steps if s >= start]) for tr in trajs]
    within = np.concatenate([M.pairwise_cosines(x) for x in late])
    across = np.concatenate([M.cross_cosines(late[i], late[j])
                             for i in range(len(late)) for j in range(i + 1, len(late))])
    finals = [tr.final() for tr in trajs]
    rep = M.CosineReport(within, across, M.c_curve(finals) if len(finals) > 1 else np.zeros(0))
    out = Path(args.run) / f"cosines_{cid}.csv"
    out.write_text(rep.histogram_csv())
    s = rep.summary()
    print(f"{cid}: mean within-level {s['mean_within']:.3f}, across levels {s['mean_across']:.3f}")
    print("c_t:", " ".join(f"{v:.3f}" for v in s["c_t"]))
    model = run.model()
    for j, tr in enumerate(trajs):
        d = M.distance_report(tr.final(), tr.token_at(cfg.erasure.early_step),
                              model.encoder.embedding(run.ids[cid].vocab_token))
        print(f"level {j}: |u - v_early| {d['u_to_early']:.3f}  |u - textual| {d['u_to_textual']:.3f}")
    print(f"histogram -> {out}")


if __name__ == "__main__":
    main()
