"""Full Hamiltonian versus rotating-wave form on the desk preset."""

import argparse

import numpy as np

from spinmrfm import integrate
from spinmrfm.config import RunConfig, resolve


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--t-end", type=float, default=None)
    ap.add_argument("--fock", type=int, default=None)
    ap.add_argument("--full-dt", type=float, default=None)
    args = ap.parse_args()
    res = resolve(RunConfig(preset="desk-small", kind="unitary_compare"))
    t_end = args.t_end or res.compare_t_end
    n = args.fock or res.compare_n_fock
    cmp = integrate.compare_full_vs_rwa(res.params, res.profile, t_end, n, 1e-3, args.full_dt or res.full_dt)
    print(f"max relative <Z> deviation {cmp.max_rel_deviation:.4f}")
    for t, d in zip(cmp.density_times, cmp.l1_distances):
        print(f"  t = {t:6.1f}  density L1 {d:.4f}")
    print(f"metadata {cmp.metadata}")
    i = np.argmax(np.abs(cmp.z_full - cmp.z_rwa))
    print(f"largest |dZ| {abs(cmp.z_full[i] - cmp.z_rwa[i]):.4f} at t = {cmp.times[i]:.2f}")


if __name__ == "__main__":
    main()
