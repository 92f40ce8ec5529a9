"""Finite metasurface geometries, impurity placements and absorbing rims."""

from dataclasses import dataclass, field, replace

import numpy as np

from .errors import DegenerateSeparationError, GeometryError, InvalidProfileError
from .greens import eps_min

KINDS = ("square", "triangular", "bilayer-square")

ABSORBER_GAMMA_MAX = 10.0
ABSORBER_WIDTH = 10.0


def unit(v):
    v = np.asarray(v, dtype=complex)
    n = np.linalg.norm(v)
    if n == 0:
        raise GeometryError("zero polarization vector")
    return v / n


@dataclass(frozen=True)
class GeometrySpec:
    kind: str = "square"
    n_l: int = 30
    d_over_lambda0: float = 0.3
    polarization: tuple = (0.0, 1.0, 0.0)
    d: float = 1.0
    layer_gap: float = 0.1
    shift: tuple = (0.5, 0.5)

    def __post_init__(self):
        if self.kind not in KINDS:
            raise GeometryError(f"unknown lattice kind {self.kind!r}")
        if self.n_l < 2:
            raise GeometryError("n_l must be >= 2")
        if not self.d_over_lambda0 > 0:
            raise GeometryError("d_over_lambda0 must be positive")
        p = np.asarray(self.polarization, dtype=complex)
        if p.shape != (3,) or abs(np.linalg.norm(p) - 1) > 1e-12:
            raise GeometryError("polarization must be a unit 3-vector")

    @property
    def k0(self):
        return 2 * np.pi * self.d_over_lambda0 / self.d

    @property
    def pol(self):
        return np.asarray(self.polarization, dtype=complex)

    def primitive_vectors(self):
        d = self.d
        if self.kind == "triangular":
            return np.array([[d, 0.0], [d / 2, np.sqrt(3) * d / 2]])
        return np.array([[d, 0.0], [0.0, d]])

    def reciprocal_vectors(self):
        a = self.primitive_vectors()
        return 2 * np.pi * np.linalg.inv(a).T

    @property
    def cell_area(self):
        return abs(np.linalg.det(self.primitive_vectors()))


@dataclass(frozen=True, eq=False)
class DipoleArray:
    positions: np.ndarray
    polarizations: np.ndarray
    gammas: np.ndarray
    k0: float
    spec: GeometrySpec
    layer: np.ndarray = None
    r_min: float = np.inf
    gamma_max: float = 0.0

    def __len__(self):
        return len(self.positions)

    @property
    def radius(self):
        return np.hypot(self.positions[:, 0], self.positions[:, 1])

    @property
    def rim(self):
        """Mask of sites inside the absorbing rim."""
        return self.radius >= self.r_min

    @property
    def extra_loss(self):
        """``Gamma0(r_j) - Gamma0`` per site."""
        return self.gammas - 1.0


@dataclass(frozen=True, eq=False)
class ImpuritySet:
    positions: np.ndarray
    polarizations: np.ndarray
    detunings: np.ndarray
    gammas: np.ndarray
    amplitudes: np.ndarray
    label: str = ""

    def __post_init__(self):
        amp = np.asarray(self.amplitudes, dtype=complex)
        if abs(np.linalg.norm(amp) - 1) > 1e-12:
            raise GeometryError("impurity amplitudes must have unit norm")

    def __len__(self):
        return len(self.positions)

    def with_detuning(self, delta):
        return replace(self, detunings=np.full(len(self), float(delta)))


def _layer_sites(n_l, a):
    idx = np.arange(n_l) - (n_l - 1) / 2
    n1, n2 = np.meshgrid(idx, idx, indexing="ij")
    pts = n1.ravel()[:, None] * a[0] + n2.ravel()[:, None] * a[1]
    return pts


def build_lattice(spec: GeometrySpec) -> DipoleArray:
    """Lay out the finite patch centred on the origin."""
    a = spec.primitive_vectors()
    xy = _layer_sites(spec.n_l, a)
    if spec.kind == "bilayer-square":
        top = np.column_stack([xy, np.full(len(xy), spec.layer_gap * spec.d / 2)])
        bot_xy = xy + np.asarray(spec.shift, float) * spec.d
        bot = np.column_stack([bot_xy, np.full(len(xy), -spec.layer_gap * spec.d / 2)])
        pos = np.vstack([top, bot])
        layer = np.repeat([0, 1], len(xy))
    else:
        pos = np.column_stack([xy, np.zeros(len(xy))])
        layer = np.zeros(len(xy), dtype=int)
    pol = np.tile(spec.pol, (len(pos), 1))
    return DipoleArray(pos, pol, np.ones(len(pos)), spec.k0, spec, layer=layer)


def absorbing_profile(radius, r_min, r_max, gamma_max):
    """Quadratic ramp from ``Gamma0`` at ``r_min`` to ``Gamma0 + gamma_max`` at ``r_max``, flat beyond."""
    radius = np.clip(np.asarray(radius, dtype=float), None, r_max)
    ramp = gamma_max * (radius - r_min) ** 2 / (r_max - r_min) ** 2
    return 1.0 + np.where(radius < r_min, 0.0, ramp)


def edge_radius(array: DipoleArray):
    """Smallest in-plane radius among sites on the patch boundary (inscribed circle)."""
    a = array.spec.primitive_vectors()
    frac = np.linalg.solve(a.T, array.positions[:, :2].T).T
    if array.spec.kind == "bilayer-square":
        frac = frac[array.layer == 0]
    lo, hi = frac.min(axis=0), frac.max(axis=0)
    edge = np.any(np.isclose(frac, lo) | np.isclose(frac, hi), axis=1)
    xy = frac[edge] @ a
    return float(np.hypot(xy[:, 0], xy[:, 1]).min())


def apply_absorbing_boundary(array: DipoleArray, r_min=None, r_max=None,
                             gamma_max=ABSORBER_GAMMA_MAX, width=ABSORBER_WIDTH):
    """Quadratic loss ramp between ``r_min`` and ``r_max``.

    By default ``r_max`` is the inscribed radius of the patch, so every
    edge reaches the full ``gamma_max`` (corners stay at that value), and
    ``r_min = r_max - width``.
    """
    rad = array.radius
    if r_max is None:
        r_max = edge_radius(array)
    if r_min is None:
        r_min = r_max - width
    if not r_min < r_max:
        raise InvalidProfileError(f"r_min ({r_min}) must be below r_max ({r_max})")
    if r_max > rad.max() + 1e-9:
        raise InvalidProfileError("r_max exceeds the patch radius")
    gam = absorbing_profile(rad, r_min, r_max, gamma_max)
    return replace(array, gammas=gam, r_min=float(r_min), gamma_max=float(gamma_max))


def nearest_site(array: DipoleArray, layer=0):
    sel = array.layer == layer
    pos = array.positions[sel]
    return pos[np.argmin(np.linalg.norm(pos[:, :2], axis=1))]


def plaquette_center(array: DipoleArray):
    """Centroid of the plaquette closest to the origin (top layer)."""
    spec = array.spec
    a = spec.primitive_vectors()
    site = nearest_site(array)[:2]
    if spec.kind == "triangular":
        cands = [site + (a[0] + a[1]) / 3, site - (a[0] + a[1]) / 3,
                 site + (2 * a[0] - a[1]) / 3, site - (2 * a[0] - a[1]) / 3,
                 site + (2 * a[1] - a[0]) / 3, site - (2 * a[1] - a[0]) / 3]
    else:
        cands = [site + s1 * a[0] / 2 + s2 * a[1] / 2
                 for s1 in (-1, 1) for s2 in (-1, 1)]
    cands = np.array(cands)
    best = cands[np.argmin(np.linalg.norm(cands, axis=1))]
    return best


def _imp(positions, pols, gammas, amps, delta, label):
    positions = np.atleast_2d(np.asarray(positions, dtype=float))
    m = len(positions)
    pols = np.asarray(pols, dtype=complex)
    if pols.ndim == 1:
        pols = np.tile(unit(pols), (m, 1))
    else:
        pols = np.array([unit(p) for p in pols])
    gam = np.broadcast_to(np.asarray(gammas, float), (m,)).copy()
    det = np.broadcast_to(np.asarray(delta, float), (m,)).copy()
    amps = np.asarray(amps, dtype=complex)
    amps = amps / np.linalg.norm(amps)
    return ImpuritySet(positions, pols, det, gam, amps, label)


def place_impurities(array: DipoleArray, config: dict) -> ImpuritySet:
    """Build an :class:`ImpuritySet` for a named configuration.

    ``config`` keys: ``kind`` (single | cluster | pair | cluster_pair |
    bilayer_single | bilayer_pair), ``site`` (on_top | plaquette | origin),
    ``z``, ``position``, ``d_c``, ``d_e``, ``symmetric``, ``direction``,
    ``bilayer_z`` (midplane | caption), ``polarization``, ``gamma``,
    ``detuning``, ``shift`` (in-plane offset of the anchor, in ``d``).
    """
    kind = config.get("kind", "single")
    pol = config.get("polarization", (1 / np.sqrt(2), 1 / np.sqrt(2), 0.0))
    gamma = config.get("gamma", 0.002)
    delta = config.get("detuning", 0.0)
    z = float(config.get("z", 0.0))
    sign = 1.0 if config.get("symmetric", True) else -1.0
    direction = np.asarray(config.get("direction", (1.0, 1.0)), float)
    direction = direction / np.linalg.norm(direction)

    shift = np.zeros(3)
    shift[:2] = np.asarray(config.get("shift", (0.0, 0.0)), float) * array.spec.d

    def anchor():
        if "position" in config:
            return np.asarray(config["position"], dtype=float)
        site = config.get("site", "plaquette")
        if site == "on_top":
            base = nearest_site(array)[:2]
        elif site == "plaquette":
            base = plaquette_center(array)
        elif site == "origin":
            base = np.zeros(2)
        else:
            raise GeometryError(f"unknown site {site!r}")
        return np.array([base[0], base[1], z]) + shift

    def bilayer_anchor():
        if array.spec.kind != "bilayer-square":
            raise GeometryError("bilayer placement requires a bilayer-square lattice")
        base = nearest_site(array, layer=0)
        off = np.asarray(config.get("offset", (0.0, 0.5)), float) * array.spec.d
        zmode = config.get("bilayer_z", "midplane")
        zz = 0.0 if zmode == "midplane" else array.spec.layer_gap * array.spec.d / 2
        return np.array([base[0] + off[0], base[1] + off[1], zz]) + shift

    if kind == "single":
        imps = _imp([anchor()], pol, gamma, [1.0], delta, "single")
    elif kind == "bilayer_single":
        imps = _imp([bilayer_anchor()], pol, gamma, [1.0], delta, "bilayer_single")
    elif kind == "cluster":
        c = anchor()
        dc = float(config.get("d_c", 0.45)) * array.spec.d
        off = np.array([dc / np.sqrt(2), -dc / np.sqrt(2), 0.0])
        imps = _imp([c + off, c - off], pol, gamma, [1.0, sign], delta,
                    "cluster+" if sign > 0 else "cluster-")
    elif kind in ("pair", "bilayer_pair"):
        c = anchor() if kind == "pair" else bilayer_anchor()
        de = float(config["d_e"]) * array.spec.d
        step = np.array([direction[0], direction[1], 0.0]) * de
        imps = _imp([c, c + step], pol, gamma, [1.0, sign], delta, kind)
    elif kind == "cluster_pair":
        c = anchor()
        dc = float(config.get("d_c", 0.45)) * array.spec.d
        de = float(config["d_e"]) * array.spec.d
        off = np.array([dc / np.sqrt(2), -dc / np.sqrt(2), 0.0])
        step = np.array([direction[0], direction[1], 0.0]) * de
        pts = [c + off, c - off, c + step + off, c + step - off]
        imps = _imp(pts, pol, gamma, [1.0, 1.0, sign, sign], delta, "cluster_pair")
    else:
        raise GeometryError(f"unknown impurity configuration {kind!r}")
    check_separation(array, imps)
    return imps


def check_separation(array: DipoleArray, imps: ImpuritySet):
    """Raise if any impurity is closer than the minimum separation to a site or another impurity."""
    rmin = eps_min(array.k0)
    dist = np.linalg.norm(imps.positions[:, None, :] - array.positions[None, :, :], axis=-1)
    if np.any(dist < rmin):
        ia, js = np.nonzero(dist < rmin)
        pairs = [(int(i), int(j)) for i, j in zip(ia, js)]
        raise DegenerateSeparationError(
            f"impurity coincides with lattice site(s): {pairs[:5]}", pairs=pairs)
    if len(imps) > 1:
        dd = np.linalg.norm(imps.positions[:, None] - imps.positions[None], axis=-1)
        dd[np.diag_indices(len(imps))] = np.inf
        if np.any(dd < rmin):
            raise DegenerateSeparationError("two impurities coincide")
