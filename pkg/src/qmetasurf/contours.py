"""Level sets on rectilinear grids via scikit-image's marching squares."""

import numpy as np
from skimage import measure


def marching_squares(x, y, f, level):
    """Return the ``f == level`` polylines as a list of ``(n, 2)`` arrays.

    ``f[i, j]`` is sampled at ``(x[i], y[j])``.  Vertices are found by linear
    interpolation along cell edges and mapped from index space back to
    ``(x, y)`` coordinates.  Closed polylines repeat their first vertex.
    """
    f = np.asarray(f, dtype=float)
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    lines = []
    for c in measure.find_contours(f, level):
        px = np.interp(c[:, 0], np.arange(len(x)), x)
        py = np.interp(c[:, 1], np.arange(len(y)), y)
        lines.append(np.column_stack([px, py]))
    return lines
