"""Strong-order step-doubling study of the QSD integrator and a QSD-mean vs master check."""

import argparse
import warnings

import numpy as np

from spinmrfm import integrate as ig
from spinmrfm import model
from spinmrfm.config import preset
from spinmrfm.errors import TruncationWarning


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--fock", type=int, default=16)
    ap.add_argument("--paths", type=int, default=200)
    ap.add_argument("--t-end", type=float, default=5.0)
    ap.add_argument("--dt", type=float, default=0.01)
    ap.add_argument("--halvings", type=int, default=3)
    ap.add_argument("--mean-paths", type=int, default=500, help="paths for the ensemble-mean check (0 to skip)")
    args = ap.parse_args()
    warnings.simplefilter("ignore", TruncationWarning)
    params, prof = preset("desk-small")
    n = args.fock
    ops = model.build_operators(params, prof, n)
    gen = model.eff_generator(params, prof, ops, drop_constant_force=True)
    ls = [model.lindblad_thermal(params, ops), model.lindblad_meas(params, ops)]
    psi = np.zeros(2 * n, dtype=complex)
    psi[0] = psi[n] = 2 ** -0.5

    def runner(cfg, paths):
        return ig.evolve_qsd_batch(psi, gen, ls, 0.0, args.t_end, cfg, ops, paths)

    stride = max(1, int(round(0.5 / args.dt)))
    rep = ig.step_doubling_check(runner, ig.SolverConfig(dt=args.dt, record_stride=stride), 0.0, args.t_end,
                                 n_halvings=args.halvings, n_paths=args.paths, seed=11)
    for dt, e in zip(rep.dts, rep.errors):
        print(f"dt {dt:.5f}  E sup|dZ| {e:.4e}")
    print(f"ratios {np.round(rep.ratios, 3).tolist()}  fitted order {rep.fitted_order:.3f} +- {rep.order_stderr:.3f}")

    if args.mean_paths:
        cfg = ig.SolverConfig(dt=args.dt, record_stride=int(round(1.0 / args.dt)))
        ens = ig.ensemble_run(psi, gen, ls, 0.0, args.t_end, cfg, ops, args.mean_paths, 1, accumulate_density=True)
        ref = ig.evolve_master(np.outer(psi, psi.conj()), gen, ls, 0.0, args.t_end, cfg, ops)
        td = [0.5 * np.abs(np.linalg.eigvalsh(a - b)).sum() for a, b in zip(ens.mean_rho, ref.states)]
        print(f"QSD mean vs master over {args.mean_paths} paths: max trace distance {max(td):.4f}")


if __name__ == "__main__":
    main()
