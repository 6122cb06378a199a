"""Regenerate the bundled model hBN one-phonon DOS (src/vibronic/data/hbn_model_dos.csv).

The table is a smooth stand-in built from Gaussian van Hove features at the
usual hBN branch energies (acoustic, ZO, in-plane TO/LO). It is not an ab
initio result; swap in a computed DOS with the same CSV layout when available.
"""

from pathlib import Path

import numpy as np

# (center meV, width meV, height)
FEATURES = [
    (40.0, 6.0, 0.50),
    (75.0, 8.0, 0.60),
    (98.0, 3.0, 1.20),
    (130.0, 8.0, 0.50),
    (150.0, 6.0, 0.30),
    (166.0, 3.0, 1.00),
    (172.0, 4.0, 0.80),
    (177.0, 3.0, 0.60),
    (188.0, 4.0, 0.30),
    (200.0, 2.5, 0.15),
]


def model_dos(energy):
    rho = 0.3 * (energy / 30.0) ** 2 * np.exp(-((energy / 60.0) ** 4))
    for c, w, h in FEATURES:
        rho += h * np.exp(-0.5 * ((energy - c) / w) ** 2)
    rho[energy > 205.0] = 0.0
    return rho


if __name__ == "__main__":
    e = np.round(np.arange(0.25, 210.0 + 1e-9, 0.25), 2)
    out = Path(__file__).resolve().parents[1] / "src" / "vibronic" / "data" / "hbn_model_dos.csv"
    with out.open("w") as fh:
        fh.write("energy_meV,dos\n")
        for x, y in zip(e, model_dos(e)):
            fh.write(f"{x:.2f},{y:.6e}\n")
    print(f"wrote {out}")
