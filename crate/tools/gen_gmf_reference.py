#!/usr/bin/env python3
"""Reference generator for the C-band GMF data files and golden test values.

This script is the independent transcription of the published CMOD5.N
formulation (28-coefficient C-band VV geophysical model function) used to
freeze golden values before the Rust implementation was written.  It also
emits the shipped coefficient files, including their integrity checksums,
so file content and checksum can never drift apart.

Outputs (paths relative to the repository root):
  crates/rainsar/data/gmf/cmod5n.json        shipped VV GMF coefficients
  crates/rainsar/data/gmf/cmod2pol.json      shipped cross-pol GMF coefficients
  crates/rainsar/tests/data/cmod5n_golden.json    frozen oracle values
  crates/rainsar/tests/data/cmod2pol_golden.json  frozen oracle values

Run from the repository root:  python3 tools/gen_gmf_reference.py
"""

import hashlib
import json
import math
import struct

# CMOD5.N coefficients (equivalent-neutral wind refit of CMOD5), 1-indexed
# in the literature; index 0 here is padding so c[i] matches c_i.
CMOD5N_C = [
    0.0,
    -0.6878, -0.7957, 0.3380, -0.1728, 0.0000, 0.0040, 0.1103,
    0.0159, 6.7329, 2.7713, -2.2885, 0.4971, -0.7250, 0.0450,
    0.0066, 0.3222, 0.0120, 22.7000, 2.0813, 3.0000, 8.3659,
    -3.3428, 1.3236, 6.2437, 2.3893, 0.3249, 4.1590, 1.6930,
]

ZPOW = 1.6
THETM = 40.0
THETHR = 25.0

# Cross-pol fallback: affine in incidence, dB space: db(theta) = a + b*theta.
CMOD2POL_C = [-21.5, -0.15]

VALID_INCIDENCE = (16.0, 50.0)


def cmod5n(v, phi_deg, theta_deg):
    """Scalar CMOD5.N forward evaluation, float64 throughout."""
    c = CMOD5N_C
    x = (theta_deg - THETM) / THETHR
    xx = x * x

    # B0: wind speed / incidence term
    a0 = c[1] + c[2] * x + c[3] * xx + c[4] * x * xx
    a1 = c[5] + c[6] * x
    a2 = c[7] + c[8] * x
    gam = c[9] + c[10] * x + c[11] * xx
    s0 = c[12] + c[13] * x
    s = a2 * v
    if s >= s0:
        a3 = 1.0 / (1.0 + math.exp(-s))
    else:
        a3 = 1.0 / (1.0 + math.exp(-s0))
        a3 = a3 * (s / s0) ** (s0 * (1.0 - a3))
    b0 = (a3 ** gam) * 10.0 ** (a0 + a1 * v)

    # B1: upwind/downwind term
    b1 = c[15] * v * (0.5 + x - math.tanh(4.0 * (x + c[16] + c[17] * v)))
    b1 = (c[14] * (1.0 + x) - b1) / (math.exp(0.34 * (v - c[18])) + 1.0)

    # B2: upwind/crosswind term
    y0 = c[19]
    pn = c[20]
    a = y0 - (y0 - 1.0) / pn
    b = 1.0 / (pn * (y0 - 1.0) ** (pn - 1.0))
    v0 = c[21] + c[22] * x + c[23] * xx
    d1 = c[24] + c[25] * x + c[26] * xx
    d2 = c[27] + c[28] * x
    v2 = v / v0 + 1.0
    if v2 < y0:
        v2 = a + b * (v2 - 1.0) ** pn
    b2 = (-d1 + d2 * v2) * math.exp(-v2)

    phi = math.radians(phi_deg)
    csfi = math.cos(phi)
    cs2fi = 2.0 * csfi * csfi - 1.0
    return b0 * (1.0 + b1 * csfi + b2 * cs2fi) ** ZPOW


def cmod2pol(theta_deg):
    """Cross-pol noise-floor GMF: affine in incidence in dB space."""
    db = CMOD2POL_C[0] + CMOD2POL_C[1] * theta_deg
    return 10.0 ** (db / 10.0)


def checksum(name, version, coeffs, valid):
    """sha256 over a canonical byte layout: utf8 name, NUL, u32 LE version,
    f64 LE coefficients, f64 LE validity bounds."""
    h = hashlib.sha256()
    h.update(name.encode("utf-8"))
    h.update(b"\x00")
    h.update(struct.pack("<I", version))
    for c in coeffs:
        h.update(struct.pack("<d", c))
    h.update(struct.pack("<d", valid[0]))
    h.update(struct.pack("<d", valid[1]))
    return h.hexdigest()


def coefficient_file(path, name, version, coeffs, valid):
    doc = {
        "name": name,
        "version": version,
        "coefficients": coeffs,
        "valid_incidence_deg": list(valid),
        "sha256": checksum(name, version, coeffs, valid),
    }
    with open(path, "w") as f:
        json.dump(doc, f, indent=2)
        f.write("\n")
    print(f"wrote {path}")


def grid_axis(lo, hi, n):
    return [lo + (hi - lo) * i / (n - 1) for i in range(n)]


def main():
    coefficient_file(
        "crates/rainsar/data/gmf/cmod5n.json",
        "cmod5n", 1, CMOD5N_C[1:], VALID_INCIDENCE,
    )
    coefficient_file(
        "crates/rainsar/data/gmf/cmod2pol.json",
        "cmod2pol-affine-db", 1, CMOD2POL_C, VALID_INCIDENCE,
    )

    # 1000-point grid: 10 speeds x 10 directions x 10 incidence angles.
    speeds = grid_axis(0.5, 24.5, 10)
    phis = [36.0 * i for i in range(10)]
    thetas = grid_axis(VALID_INCIDENCE[0], VALID_INCIDENCE[1], 10)
    grid = []
    for v in speeds:
        for phi in phis:
            for th in thetas:
                grid.append([v, phi, th, cmod5n(v, phi, th)])

    named = {
        "reference_10ms_45deg_35deg": cmod5n(10.0, 45.0, 35.0),
        "reference_10ms_45deg_16deg": cmod5n(10.0, 45.0, 16.0),
        "reference_10ms_45deg_50deg": cmod5n(10.0, 45.0, 50.0),
        "low_wind_5ms_90deg_30deg": cmod5n(5.0, 90.0, 30.0),
        "high_wind_20ms_180deg_40deg": cmod5n(20.0, 180.0, 40.0),
    }

    with open("crates/rainsar/tests/data/cmod5n_golden.json", "w") as f:
        json.dump({"named": named, "grid_vphitheta_sigma0": grid}, f)
        f.write("\n")
    print("wrote crates/rainsar/tests/data/cmod5n_golden.json "
          f"({len(grid)} grid points)")

    xgrid = [[th, cmod2pol(th)] for th in grid_axis(16.0, 50.0, 35)]
    xnamed = {"reference_35deg": cmod2pol(35.0)}
    with open("crates/rainsar/tests/data/cmod2pol_golden.json", "w") as f:
        json.dump({"named": xnamed, "grid_theta_sigma0": xgrid}, f)
        f.write("\n")
    print("wrote crates/rainsar/tests/data/cmod2pol_golden.json")

    for k, val in named.items():
        print(f"  {k} = {val!r}")
    print(f"  cmod2pol(35.0) = {cmod2pol(35.0)!r}")


if __name__ == "__main__":
    main()
