"""One Gaussian charge, start to finish.

A single charge gives a spherical level set whose radius solves a scalar
equation, so every stage can be compared against a number you can check by
hand.  Run:  python3 demos/single_charge.py [out_dir]
"""

import math
import sys
from pathlib import Path

import numpy as np
from scipy.optimize import brentq

from chargefield.field import ChargeSet, eval_field
from chargefield.isosurface import default_grid, evaluate_grid, marching_cubes, slice_field
from chargefield.mesh import save_obj

out = Path(sys.argv[1] if len(sys.argv) > 1 else "demo_out/single_charge")
out.mkdir(parents=True, exist_ok=True)

Q, SIGMA, TAU = 3.78, 0.1, 1.0
cs = ChargeSet.from_physical([[0.0, 0.0, 0.0]], Q, SIGMA)

# Near the centre the potential flattens to a finite value; far away it is a point charge.
print("phi(0)        =", float(eval_field(cs, [0, 0, 0])))
print("series limit  =", Q * math.sqrt(2 / math.pi) / (4 * math.pi * SIGMA))
print("phi(100 sigma)=", float(eval_field(cs, [100 * SIGMA, 0, 0])), " vs Q/(4 pi r) =", Q / (4 * math.pi * 100 * SIGMA))

# Where does phi cross tau?
r_star = brentq(lambda r: Q * math.erf(r / (math.sqrt(2) * SIGMA)) - 4 * math.pi * TAU * r, 1e-6, Q / (4 * math.pi))
print(f"iso radius r* = {r_star:.6f}")

for res in (32, 64, 128):
    mesh = marching_cubes(evaluate_grid(cs, *default_grid(res)), TAU)
    r = np.linalg.norm(mesh.vertices, axis=1)
    print(f"  grid {res:>3}^3: {len(mesh.faces):>6} faces, watertight={mesh.is_watertight()}, "
          f"max |r - r*| / r* = {np.abs(r - r_star).max() / r_star:.2e}")
save_obj(mesh, out / "sphere.obj")

img = slice_field(cs, "z", 0.0, 256)
img.write(out / "slice.pgm")
print(f"slice: {len(img.contours)} contour(s), field range [{img.vmin:.3g}, {img.vmax:.3g}] -> {out}/slice.pgm")
