"""Single-excitation quantum optics of subwavelength atomic arrays with impurity emitters.

Submodules: :mod:`greens` (free-space dyadic coupling), :mod:`lattice`
(array and impurity geometry), :mod:`bands` (Bloch bands, DOS and
isofrequency contours), :mod:`dynamics` (time evolution, Purcell factors,
directionality and collective decay) and :mod:`cli` (config-driven runner).
"""

__version__ = "0.1.0"
