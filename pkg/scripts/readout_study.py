"""Desk-scale readout study: QSD ensemble, photocurrent classification, collapse statistics."""

import argparse
import json

import numpy as np

from spinmrfm import harness
from spinmrfm.config import RunConfig


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--n-traj", type=int, default=50)
    ap.add_argument("--seed", type=int, default=2024)
    ap.add_argument("--workers", type=int, default=1)
    ap.add_argument("--out", default="runs/readout")
    args = ap.parse_args()
    cfg = RunConfig(preset="desk-small", kind="readout_study", n_traj=args.n_traj, base_seed=args.seed,
                    workers=args.workers, out_dir=args.out)
    m = harness.run(cfg)
    if m.error:
        raise SystemExit(f"run failed: {m.error}")
    s = m.summary
    print(f"agreement {s['agreement']:.3f} over {s['n_paths']} paths ({s['n_decided']} decided)")
    print(f"reference phase {s['reference_phase']:.4f} rad, window {s['window']}, bin {s['bin_width']:g}")
    ens = harness.run(cfg.with_overrides(kind="qsd_ensemble", out_dir=args.out + "_ensemble"))
    ct = [t for t in ens.summary["collapse_times"] if t is not None]
    print(f"up fraction {ens.summary['up_fraction']:.3f}, collapsed {ens.summary['collapsed_fraction']:.3f}")
    if ct:
        print("collapse time quartiles", json.dumps(np.percentile(ct, [25, 50, 75]).round(2).tolist()))
    print(f"outputs in {args.out}")


if __name__ == "__main__":
    main()
