"""Bloch spectrum of the metasurface and derived band observables.

Lattice sums are evaluated in reciprocal space.  For the in-plane sum the
Gaussian (finite atom size) regularisation smears ``G0`` by a 3-D Gaussian
of width ``a_ho``; away from the origin that only rescales ``G0`` by
``exp(-(k0 a_ho)^2 / 2)``, which is undone exactly, so ``a_ho`` acts as a
pure convergence parameter.
"""

import warnings
from dataclasses import dataclass, field, replace

import numpy as np
import scipy.linalg

from . import greens
from .contours import marching_squares
from .errors import AmbiguousContourError, ConvergenceWarning, SolverError
from .lattice import DipoleArray, GeometrySpec

A_HO_DEFAULT = 0.1
CUTOFF_SHELLS = 12
DENSE_LIMIT = 4096


def reciprocal_shells(spec: GeometrySpec, shells):
    """Reciprocal lattice vectors with ``|G| <= shells * 2 pi / d``."""
    b = spec.reciprocal_vectors()
    gmax = shells * 2 * np.pi / spec.d
    nmax = int(np.ceil(gmax / min(np.linalg.norm(b, axis=1)) * 1.2)) + 1
    n = np.arange(-nmax, nmax + 1)
    m1, m2 = np.meshgrid(n, n, indexing="ij")
    g = m1.ravel()[:, None] * b[0] + m2.ravel()[:, None] * b[1]
    g = g[np.linalg.norm(g, axis=1) <= gmax + 1e-9]
    return g[np.argsort(np.linalg.norm(g, axis=1), kind="stable")]


def _chunks(n, size):
    for s in range(0, n, size):
        yield slice(s, min(n, s + size))


def inplane_sum(k, spec: GeometrySpec, a_ho=A_HO_DEFAULT, shells=CUTOFF_SHELLS,
                return_tail=False):
    """``S(k) = sum_{n != 0} exp(-i k.r_n) G0(r_n)`` for a single layer.

    ``k`` has shape ``(..., 2)``; returns ``(..., 3, 3)``.  With
    ``return_tail`` the contribution of the outermost shell is returned too
    (used as a convergence sentinel).
    """
    k = np.asarray(k, dtype=float)
    shape = k.shape[:-1]
    kf = k.reshape(-1, 2)
    k0 = spec.k0
    gvec = reciprocal_shells(spec, shells)
    inner = np.linalg.norm(gvec, axis=1) <= (shells - 1) * 2 * np.pi / spec.d + 1e-9
    g00 = greens.green_regularized_origin(a_ho, k0)
    scale = np.exp((k0 * a_ho) ** 2 / 2)
    out = np.empty((len(kf), 3, 3), dtype=complex)
    tail = np.empty((len(kf), 3, 3), dtype=complex)
    step = max(1, 400_000 // len(gvec))
    for sl in _chunks(len(kf), step):
        q = kf[sl, None, :] + gvec[None, :, :]
        g = greens.weyl_component(q, k0, a_ho)
        tot = g.sum(axis=1) / spec.cell_area
        out[sl] = -scale * (tot - g00)
        tail[sl] = -scale * g[:, ~inner].sum(axis=1) / spec.cell_area
    out = out.reshape(shape + (3, 3))
    if return_tail:
        return out, tail.reshape(shape + (3, 3))
    return out


def _decay_shells(spec, z):
    # exp(-kappa |z|) below 1e-13 at the last shell
    need = 30.0 / abs(z)
    return int(np.ceil(need / (2 * np.pi / spec.d))) + 2


def offplane_sum(k, spec: GeometrySpec, shift, z, shells=None):
    """``T(k) = sum_n exp(-i k.(r_n + s)) G0(r_n + s + z e_z)`` for ``z != 0``."""
    if z == 0:
        raise ValueError("offplane_sum needs z != 0; use inplane_sum")
    k = np.asarray(k, dtype=float)
    shape = k.shape[:-1]
    kf = k.reshape(-1, 2)
    k0 = spec.k0
    if shells is None:
        shells = _decay_shells(spec, z)
    gvec = reciprocal_shells(spec, shells)
    phase_g = np.exp(1j * gvec @ np.asarray(shift, float))
    sgn = np.sign(z)
    out = np.empty((len(kf), 3, 3), dtype=complex)
    step = max(1, 400_000 // len(gvec))
    for sl in _chunks(len(kf), step):
        q = kf[sl, None, :] + gvec[None, :, :]
        lam = np.sqrt((k0**2 - (q**2).sum(-1)).astype(complex))
        lam = np.where(lam == 0, 1e-8 * k0, lam)
        Q = np.concatenate([q.astype(complex), (sgn * lam)[..., None]], axis=-1)
        ten = (k0**2 * np.eye(3) - Q[..., :, None] * Q[..., None, :]) / k0**2
        pref = 1j / (2 * lam) * np.exp(1j * lam * abs(z)) * phase_g[None, :]
        out[sl] = (pref[..., None, None] * ten).sum(axis=1) / spec.cell_area
    return out.reshape(shape + (3, 3))


def _contract(p, tensor):
    return np.einsum("a,...ab,b->...", p.conj(), tensor, p)


@dataclass
class BlochResult:
    energy: np.ndarray
    converged: bool = True
    change: float = 0.0


def bloch_energy(k, spec: GeometrySpec, a_ho=A_HO_DEFAULT, shells=CUTOFF_SHELLS,
                 check=True):
    """Complex Bloch energy ``omega_k - i gamma_k / 2`` relative to ``omega0``.

    Single layers return an array of shape ``k.shape[:-1]``; bilayers return
    both branches in a trailing axis of length 2 (sorted by real part).
    A :class:`ConvergenceWarning` is emitted if adding one more reciprocal
    shell would move any energy by more than ``1e-3``.
    """
    k = np.asarray(k, dtype=float)
    p = spec.pol
    pref = -3 * np.pi / spec.k0
    s_in, tail = inplane_sum(k, spec, a_ho, shells, return_tail=True)
    diag = pref * _contract(p, s_in) - 0.5j
    change = float(np.max(np.abs(pref * _contract(p, tail)))) if check else 0.0
    if spec.kind != "bilayer-square":
        res = diag
    else:
        zb = spec.layer_gap * spec.d
        s = np.asarray(spec.shift, float) * spec.d
        hab = pref * _contract(p, offplane_sum(k, spec, -s, zb))
        hba = pref * _contract(p, offplane_sum(k, spec, s, -zb))
        # eigenvalues of [[diag, hab], [hba, diag]]
        root = np.sqrt(hab * hba)
        res = np.stack([diag - root, diag + root], axis=-1)
        order = np.argsort(res.real, axis=-1)
        res = np.take_along_axis(res, order, axis=-1)
    if check and change > 1e-3:
        warnings.warn(f"reciprocal sum not converged (last shell moves {change:.2e})",
                      ConvergenceWarning, stacklevel=2)
    return res


def light_cone(spec: GeometrySpec):
    return spec.k0


def symmetry_points(spec: GeometrySpec):
    d = spec.d
    if spec.kind == "triangular":
        b = spec.reciprocal_vectors()
        return {"G": np.zeros(2), "M": b[0] / 2,
                "K": np.array([4 * np.pi / (3 * d), 0.0])}
    return {"G": np.zeros(2), "X": np.array([np.pi / d, 0.0]),
            "Y": np.array([0.0, np.pi / d]), "M": np.array([np.pi / d, np.pi / d])}


def mode_energy(spec: GeometrySpec, point="X", a_ho=A_HO_DEFAULT, branch=0):
    """``omega_k`` at a named symmetry point (lowest branch for bilayers by default)."""
    e = bloch_energy(symmetry_points(spec)[point], spec, a_ho, check=False)
    e = np.atleast_1d(e)
    return float(e[min(branch, len(e) - 1)].real)


def band_path(spec: GeometrySpec, points=None, n=300):
    """Piecewise-linear path through named symmetry points.

    Returns ``(k, s, ticks)`` with cumulative path length ``s`` and ``ticks`` the
    ordered ``(label, s)`` corners.
    """
    sym = symmetry_points(spec)
    if points is None:
        points = ["G", "M", "K", "G"] if spec.kind == "triangular" else ["G", "X", "M", "G"]
    corners = [sym[p] for p in points]
    seglen = [np.linalg.norm(b - a) for a, b in zip(corners[:-1], corners[1:])]
    total = sum(seglen)
    ks, ticks = [], [0.0]
    for (a, b), L in zip(zip(corners[:-1], corners[1:]), seglen):
        m = max(2, int(round(n * L / total)))
        t = np.linspace(0, 1, m, endpoint=False)
        ks.append(a + t[:, None] * (b - a))
        ticks.append(ticks[-1] + L)
    ks.append(corners[-1][None, :])
    k = np.vstack(ks)
    s = np.concatenate([[0.0], np.cumsum(np.linalg.norm(np.diff(k, axis=0), axis=1))])
    return k, s, list(zip(points, ticks))


@dataclass
class BandGrid:
    """Complex band energies sampled on a k-grid."""
    kx: np.ndarray
    ky: np.ndarray
    energy: np.ndarray  # (nx, ny) or (nx, ny, 2) for bilayers
    spec: GeometrySpec
    a_ho: float = A_HO_DEFAULT
    shells: int = CUTOFF_SHELLS
    region: str = "bz"
    warnings: list = field(default_factory=list)

    @property
    def omega(self):
        return self.energy.real

    @property
    def gamma(self):
        return -2 * self.energy.imag

    @property
    def spacing(self):
        return (self.kx[1] - self.kx[0], self.ky[1] - self.ky[0])

    def mesh(self):
        return np.meshgrid(self.kx, self.ky, indexing="ij")


def bz_axes(spec: GeometrySpec, resolution, region="bz"):
    """Grid axes.

    ``bz``: cell-centred grid over the full zone, symmetric under ``k -> -k``.
    ``quadrant``: ``[0, pi/d]^2`` including both end points (square only).
    """
    if region == "quadrant":
        ax = np.linspace(0, np.pi / spec.d, resolution)
        return ax, ax.copy()
    if spec.kind == "triangular":
        hx = 4 * np.pi / (3 * spec.d)
        hy = 2 * np.pi / (np.sqrt(3) * spec.d)
    else:
        hx = hy = np.pi / spec.d
    fx = (np.arange(resolution) + 0.5) / resolution
    return -hx + 2 * hx * fx, -hy + 2 * hy * fx


def band_structure(spec: GeometrySpec, resolution=128, region="bz", a_ho=A_HO_DEFAULT,
                   shells=CUTOFF_SHELLS, workers=1):
    """Fill a :class:`BandGrid`; rows are independent and may run in parallel."""
    if resolution < 2:
        raise ValueError("resolution too small")
    kx, ky = bz_axes(spec, resolution, region)
    caught = []

    def row(x):
        with warnings.catch_warnings(record=True) as w:
            warnings.simplefilter("always", ConvergenceWarning)
            kk = np.column_stack([np.full(len(ky), x), ky])
            e = bloch_energy(kk, spec, a_ho, shells)
        return e, [str(m.message) for m in w]

    if workers > 1:
        from concurrent.futures import ThreadPoolExecutor
        with ThreadPoolExecutor(workers) as ex:
            rows = list(ex.map(row, kx))
    else:
        rows = [row(x) for x in kx]
    energy = np.stack([r[0] for r in rows])
    for r in rows:
        caught.extend(r[1])
    return BandGrid(kx, ky, energy, spec, a_ho, shells, region, sorted(set(caught)))


def path_structure(spec: GeometrySpec, n=300, points=None, a_ho=A_HO_DEFAULT,
                   shells=CUTOFF_SHELLS):
    k, s, ticks = band_path(spec, points, n)
    return k, s, ticks, bloch_energy(k, spec, a_ho, shells)


def real_space_sum(k, spec: GeometrySpec, half_width=100, taper=0.5):
    """Brute-force ``S(k)`` over a ``(2 w + 1)^2`` patch with a smooth radial taper.

    The weight is one inside ``taper * w`` and falls to zero at ``w`` with a
    raised-cosine profile, which suppresses the truncation ripple of the
    slowly decaying far field.
    """
    a = spec.primitive_vectors()
    n = np.arange(-half_width, half_width + 1)
    n1, n2 = np.meshgrid(n, n, indexing="ij")
    keep = (n1 != 0) | (n2 != 0)
    xy = n1[keep][:, None] * a[0] + n2[keep][:, None] * a[1]
    rho = np.linalg.norm(xy, axis=1)
    rmax = half_width * spec.d
    r0 = taper * rmax
    w = np.where(rho <= r0, 1.0,
                 np.where(rho >= rmax, 0.0,
                          0.5 * (1 + np.cos(np.pi * (rho - r0) / (rmax - r0)))))
    xy, w = xy[w > 0], w[w > 0]
    pos = np.column_stack([xy, np.zeros(len(xy))])
    g = greens.green_free_space(pos, spec.k0)
    k = np.atleast_2d(np.asarray(k, float))
    ph = np.exp(-1j * k @ xy.T) * w[None, :]
    return np.einsum("kn,nab->kab", ph, g)


def real_space_energy(k, spec: GeometrySpec, half_width=100, taper=0.5):
    s = real_space_sum(k, spec, half_width, taper)
    return -3 * np.pi / spec.k0 * _contract(spec.pol, s) - 0.5j


def saddle_hessian(spec: GeometrySpec, k=None, h=1e-2, a_ho=A_HO_DEFAULT):
    """Central finite-difference Hessian of ``omega_k``; returns ``(H, eigenvalues)``."""
    if k is None:
        k = symmetry_points(spec)["X"]
    k = np.asarray(k, float)
    offs = []
    for dx, dy in [(0, 0), (h, 0), (-h, 0), (0, h), (0, -h), (h, h), (h, -h), (-h, h), (-h, -h)]:
        offs.append(k + [dx, dy])
    w = bloch_energy(np.array(offs), spec, a_ho).real
    f0 = w[0]
    hxx = (w[1] - 2 * f0 + w[2]) / h**2
    hyy = (w[3] - 2 * f0 + w[4]) / h**2
    hxy = (w[5] - w[6] - w[7] + w[8]) / (4 * h**2)
    hess = np.array([[hxx, hxy], [hxy, hyy]])
    return hess, np.linalg.eigvalsh(hess)


@dataclass
class DOS:
    centers: np.ndarray
    density: np.ndarray
    width: float

    @property
    def peak_energy(self):
        return float(self.centers[np.argmax(self.density)])

    def bin_of(self, energy):
        return int(np.clip(np.floor((energy - (self.centers[0] - self.width / 2)) / self.width),
                           0, len(self.centers) - 1))

    def at(self, energy):
        return float(self.density[self.bin_of(energy)])

    def peaks(self, min_fraction=0.2):
        """Energies of local maxima above ``min_fraction`` of the global one, highest first."""
        d = self.density
        idx = [i for i in range(len(d))
               if (i == 0 or d[i] > d[i - 1]) and (i == len(d) - 1 or d[i] >= d[i + 1])
               and d[i] >= min_fraction * d.max()]
        idx.sort(key=lambda i: -d[i])
        return [float(self.centers[i]) for i in idx]


def density_of_states(grid: BandGrid, bins=200, energy_range=None):
    """Normalised histogram of ``omega_k`` over the grid.

    ``energy_range`` defaults to the 1st-99th percentile window, which drops
    the sparse tails produced by the light-line divergence.
    """
    w = grid.omega.ravel()
    if energy_range is None:
        energy_range = tuple(np.percentile(w, [1, 99]))
    hist, edges = np.histogram(w, bins=bins, range=energy_range)
    width = edges[1] - edges[0]
    density = hist / (len(w) * width)
    density = density / (density.sum() * width)
    return DOS(0.5 * (edges[1:] + edges[:-1]), density, width)


@dataclass
class Contour:
    lines: list
    energy: float
    k0: float = None
    spacing: float = None

    @property
    def vertices(self):
        return np.vstack(self.lines) if self.lines else np.empty((0, 2))


def isofrequency(grid: BandGrid, energy, branch=0):
    """Level set ``omega_k = energy`` as ordered polylines."""
    w = grid.omega if grid.omega.ndim == 2 else grid.omega[..., branch]
    lines = marching_squares(grid.kx, grid.ky, w, energy)
    return Contour(lines, float(energy), grid.spec.k0, float(max(grid.spacing)))


def contour_through(contour: Contour, point, tol=None):
    """Polyline passing closest to ``point``."""
    if not contour.lines:
        raise AmbiguousContourError("empty contour")
    point = np.asarray(point, float)
    dists = [np.min(np.linalg.norm(l - point, axis=1)) for l in contour.lines]
    i = int(np.argmin(dists))
    if tol is not None and dists[i] > tol:
        raise AmbiguousContourError(f"no contour within {tol:.3g} of {point.tolist()}")
    return contour.lines[i]


@dataclass
class Branch:
    points: np.ndarray  # sorted by k_x
    end: str  # "edge" or "light_cone"


def x_branch(contour: Contour, d=1.0, guard=0.01):
    """Single-valued isofrequency branch leaving ``X = (pi/d, 0)``.

    The polyline is followed from X while ``k_x`` decreases.  It either
    reaches ``k_x = 0`` (``end="edge"``) or runs into the light-line
    singularity, where ``omega_k -> -inf`` for in-plane dipoles and the
    level set collapses onto the light circle (``end="light_cone"``);
    vertices within ``guard * k0`` of the circle belong to that unresolved
    jump and are dropped.  Branches that turn back or close onto the
    ``k_y = 0`` axis raise :class:`AmbiguousContourError`.
    """
    xpt = np.array([np.pi / d, 0.0])
    h = contour.spacing if contour.spacing is not None else 1e-3
    line = contour_through(contour, xpt, tol=2 * h)
    if np.linalg.norm(line[-1] - xpt) < np.linalg.norm(line[0] - xpt):
        line = line[::-1]
    k0 = contour.k0
    keep = [line[0]]
    end = None
    for p in line[1:]:
        if k0 is not None and np.hypot(*p) < k0 * (1 + guard) + h:
            end = "light_cone"
            break
        if p[0] > keep[-1][0] + 1e-12:
            break
        keep.append(p)
    pts = np.array(keep)
    if end is None:
        if pts[-1, 0] <= h:
            end = "edge"
        else:
            raise AmbiguousContourError(
                f"isofrequency through X closes at k = ({pts[-1, 0]:.3f}, {pts[-1, 1]:.3f})"
                " before reaching k_x = 0")
    if len(pts) < 2:
        raise AmbiguousContourError("isofrequency through X is degenerate")
    return Branch(pts[::-1], end)


def straightness_delta(contour: Contour, d=1.0, line=None, completion="light_cone",
                       guard=0.01):
    """Squared deviation of the isofrequency from ``k_y = pi/d - k_x`` on ``(0, pi/d)``.

    ``k_y(k_x)`` is the branch through X (see :func:`x_branch`) unless an
    explicit ``line`` is passed.  When that branch ends on the light circle,
    the solution of ``omega(k_x, k_y) = omega_X`` for the remaining ``k_x``
    hugs the circle from outside, so ``completion="light_cone"`` continues it
    along ``k_y = sqrt(k0^2 - k_x^2)``; ``completion=None`` integrates only the
    resolved part.  The result is in units of ``pi^3 / d^3``.
    """
    kmax = np.pi / d
    if line is None:
        branch = x_branch(contour, d, guard)
        pts = branch.points
        if branch.end == "light_cone" and completion == "light_cone":
            k0 = contour.k0
            kx = np.linspace(0.0, pts[0, 0], 200, endpoint=False)
            arc = np.column_stack([kx, np.sqrt(np.maximum(k0**2 - kx**2, 0.0))])
            pts = np.vstack([arc, pts])
    else:
        pts = np.asarray(line, float)
        pts = pts[(pts[:, 0] >= -1e-12) & (pts[:, 0] <= kmax + 1e-12)]
        if len(pts) < 2:
            raise AmbiguousContourError("contour does not cover the first quadrant")
        dx = np.diff(pts[:, 0])
        if not (np.all(dx >= -1e-12) or np.all(dx <= 1e-12)):
            raise AmbiguousContourError("contour is not single-valued in k_x")
        pts = pts[np.argsort(pts[:, 0], kind="stable")]
    dev = (kmax - pts[:, 0]) - pts[:, 1]
    return float(np.trapezoid(dev**2, pts[:, 0]) / kmax**3)


def straightness_scan(spec: GeometrySpec, values, resolution=301, completion="light_cone",
                      a_ho=A_HO_DEFAULT, shells=CUTOFF_SHELLS):
    """``Delta`` at the X-mode energy for each ``d/lambda0`` in ``values``.

    Returns a list of ``(d_over_lambda0, delta, status)``; ``delta`` is NaN
    when the X isofrequency does not define ``k_y(k_x)`` (``status`` says why).
    """
    if resolution < 301:
        warnings.warn("straightness scans below 301 x 301 alias the minimum",
                      ConvergenceWarning, stacklevel=2)
    rows = []
    for v in values:
        sp = replace(spec, d_over_lambda0=float(v))
        grid = band_structure(sp, resolution, "quadrant", a_ho, shells)
        wx = float(bloch_energy(symmetry_points(sp)["X"], sp, a_ho, shells, check=False).real)
        try:
            delta = straightness_delta(isofrequency(grid, wx), sp.d, completion=completion)
            status = "ok"
        except AmbiguousContourError as exc:
            delta, status = float("nan"), str(exc)
        rows.append((float(v), delta, status))
    return rows


@dataclass
class FiniteModes:
    eigenvalues: np.ndarray
    eigenvectors: np.ndarray
    k_labels: np.ndarray
    residual: float


def finite_diagonalization(array: DipoleArray, k_resolution=41, limit=DENSE_LIMIT):
    """Diagonalise the single-excitation block of a finite array.

    Each eigenvector is labelled by the grid momentum maximising
    ``|sum_j C_j exp(i k.r_j)|^2``.
    """
    n = len(array)
    if n > limit:
        raise ValueError(f"{n} sites exceed the dense-solver limit {limit}")
    h = greens.coupling_matrix(array.positions, array.polarizations, array.gammas, array.k0)
    try:
        vals, vecs = scipy.linalg.eig(h)
    except (np.linalg.LinAlgError, ValueError) as exc:
        raise SolverError(f"eigensolver failed; cond(H) = {np.linalg.cond(h):.3e}") from exc
    res = np.linalg.norm(h @ vecs - vecs * vals, axis=0).max() / max(np.linalg.norm(h), 1e-300)
    if not np.isfinite(res) or res > 1e-8:
        raise SolverError(f"eigen-residual {res:.2e} above tolerance; cond(H) = {np.linalg.cond(h):.3e}")
    ax = np.linspace(-np.pi / array.spec.d, np.pi / array.spec.d, k_resolution)
    kx, ky = np.meshgrid(ax, ax, indexing="ij")
    kk = np.column_stack([kx.ravel(), ky.ravel()])
    ph = np.exp(1j * kk @ array.positions[:, :2].T)
    weight = np.abs(ph @ vecs) ** 2
    labels = kk[np.argmax(weight, axis=0)]
    return FiniteModes(vals, vecs, labels, float(res))
