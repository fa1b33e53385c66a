"""Analytic SNR, noise decomposition and force limit for a preset."""

import argparse

import numpy as np

from spinmrfm import spectra
from spinmrfm.config import preset


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--preset", default="paper-sec7")
    ap.add_argument("--bandwidth", type=float, default=1.0)
    args = ap.parse_args()
    params, prof = preset(args.preset)
    rep = spectra.snr_at_resonance(params, prof, bandwidth=args.bandwidth)
    print(f"SNR(w_m) = {rep.snr_at_resonance:.2f} s^-1/2  [{rep.g_convention}]")
    for name, val in rep.snr_by_convention.items():
        print(f"  convention {name:10s} {val:10.2f}")
    print(f"|c_1| = {rep.fourier_c1:.5f}")
    for k, v in rep.n_terms.items():
        print(f"  N(w_m) {k:10s} {v:.4e}")
    spec = spectra.noise_spectrum(params, np.array([params.omega_m]))
    print(f"S_out(w_m): shot {spec.shot[0]:.3e}  back-action {spec.backaction[0]:.3e}  thermal {spec.thermal[0]:.3e}")
    fm = rep.f_min
    print(f"F_min high-T {fm['high_t']:.4e}  exact thermal {fm['exact_thermal']:.4e}  all terms {fm['full_noise']:.4e}")
    print(f"Q factors {rep.q_factors}")


if __name__ == "__main__":
    main()
