"""The two benchmark cost functionals.

Surface: perimeter / sqrt(area) of the closed periodic cubic spline through
the control points.  The circle gives the lower bound 2 sqrt(pi).

Grid: a coarse field is refined by tensor cubic splines and scored by its
mean gradient magnitude over the unit square.
"""
import warnings

import numpy as np

from dfpo.environments import grid_cost, grid_refine, sample_star_polygon, surface_cost

th = 2 * np.pi * np.arange(32) / 32
circle = np.stack([np.cos(th), np.sin(th)], -1).ravel()
print("circle     %.6f   (2 sqrt(pi) = %.6f)" % (surface_cost(circle), 2 * np.sqrt(np.pi)))

square = np.array([0, 0, 1, 0, 1, 1, 0, 1], float)
print("square     %.6f   polyline %.6f" % (surface_cost(square), surface_cost(square, mode="polyline")))

rng = np.random.default_rng(3)
stars = [sample_star_polygon(32, rng) for _ in range(5)]
# jagged stars can make the spline loop over itself; the cost then uses |area|
with warnings.catch_warnings(record=True) as caught:
    warnings.simplefilter("always")
    print("random stars:", np.round([surface_cost(s) for s in stars], 3))
print("self-intersection warnings:", len(caught))

# scaling a shape leaves the cost alone
print("scaled x7  %.12f vs %.12f" % (surface_cost(7 * stars[0]), surface_cost(stars[0])))

x = np.linspace(0, 1, 16)
ramp = np.repeat(x[:, None], 16, 1) + np.repeat(x[None, :], 16, 0)
print("ramp s+t   %.5f   (exact sqrt 2 = %.5f)" % (grid_cost(ramp, 4), np.sqrt(2)))
print("constant   %.1e" % grid_cost(np.full((16, 16), 2.0), 4))

bumpy = rng.uniform(0.5, 1.5, (16, 16))
fine = grid_refine(bumpy, 4)
print("refined %s -> %s, cost %.3f" % (bumpy.shape, fine.shape, grid_cost(bumpy, 4)))
