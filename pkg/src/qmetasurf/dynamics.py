"""Single-excitation dynamics of impurity atoms coupled to a finite metasurface.

Time is measured in ``1/Gamma0``.  The non-Hermitian Hamiltonian is
propagated through its eigendecomposition; all loss integrals
``int_0^t psi^dag A psi dt'`` are then evaluated in closed form, so they do
not depend on how densely the output times are sampled.  An adaptive
Runge-Kutta integrator is used as a fallback (and as an independent check).
"""

import warnings
from dataclasses import dataclass, field, replace

import numpy as np
import scipy.linalg
from scipy.integrate import cumulative_simpson, solve_ivp

from . import bands, greens
from .errors import (ConvergenceWarning, GeometryError, IntegrationAccuracyError,
                     SolverError)
from .lattice import DipoleArray, GeometrySpec, ImpuritySet

BUDGET_TOL = 1e-6
EIG_RESIDUAL_TOL = 1e-8


@dataclass(frozen=True, eq=False)
class SystemHamiltonian:
    """Dense ``(N + M) x (N + M)`` matrix; array sites first, impurities last."""
    matrix: np.ndarray
    n_sites: int
    n_imp: int
    array: DipoleArray = None
    impurities: ImpuritySet = None

    @property
    def size(self):
        return self.n_sites + self.n_imp

    @property
    def sites(self):
        return slice(0, self.n_sites)

    @property
    def imps(self):
        return slice(self.n_sites, self.size)

    def decay_matrix(self):
        """``i (H - H^dag)``: collective radiative decay plus local absorber loss."""
        return greens.decay_matrix(self.matrix)

    def boundary_weights(self):
        """Extra local loss ``Gamma0(r_j) - Gamma0`` on rim sites, zero elsewhere."""
        w = np.zeros(self.size)
        if self.array is not None:
            rim = self.array.rim
            w[:self.n_sites][rim] = self.array.extra_loss[rim]
        return w

    def initial_state(self):
        psi = np.zeros(self.size, dtype=complex)
        if self.impurities is None or self.n_imp == 0:
            raise GeometryError("no impurity to excite")
        psi[self.imps] = self.impurities.amplitudes
        return psi


def build_hamiltonian(array: DipoleArray, imps: ImpuritySet = None) -> SystemHamiltonian:
    """Assemble ``H = H_m + H_a + H_am`` relative to ``omega0``.

    Array atoms couple with their radiative rate ``Gamma0``; the absorbing
    rim only adds the local loss ``-i (Gamma0(r_j) - Gamma0) / 2`` on the
    diagonal, so the diagonal reads ``-i Gamma0(r_j) / 2``.  Impurities carry
    ``delta_a - i Gamma_a / 2`` and couple with ``sqrt(Gamma0 Gamma_a)``.
    """
    n = len(array)
    if imps is None or len(imps) == 0:
        pos, pol = array.positions, array.polarizations
        rad = np.ones(n)
        m = 0
    else:
        pos = np.vstack([array.positions, imps.positions])
        pol = np.vstack([array.polarizations, imps.polarizations])
        rad = np.concatenate([np.ones(n), imps.gammas])
        m = len(imps)
    h = greens.coupling_matrix(pos, pol, rad, array.k0)
    idx = np.arange(n)
    h[idx, idx] -= 0.5j * (array.gammas - 1.0)
    if m:
        j = np.arange(n, n + m)
        h[j, j] += imps.detunings
    return SystemHamiltonian(h, n, m, array, imps)


def time_grid(t_max, n=600, t_geo=None, n_geo=100):
    """Geometric samples up to ``t_geo`` followed by a linear grid to ``t_max``.

    The grid always contains ``0``, ``0.9 t_max`` and ``t_max``.
    """
    if t_geo is None:
        t_geo = min(1.0, t_max / 10)
    geo = np.geomspace(1e-3 * t_geo, t_geo, n_geo)
    lin = np.linspace(t_geo, t_max, n)
    t = np.unique(np.concatenate([[0.0], geo, lin, [0.9 * t_max]]))
    return t


@dataclass(eq=False)
class Trajectory:
    """Sampled single-excitation state and loss integrals.

    ``loss_total`` is the time-integrated jump loss ``int psi^dag Gamma psi``
    (computed independently of the norm), ``loss_boundary`` the part due to
    the absorbing rim.
    """
    t: np.ndarray
    amplitudes: np.ndarray  # (T, N + M)
    n_sites: int
    loss_total: np.ndarray
    loss_boundary: np.ndarray
    method: str = "eig"
    _integral: object = field(default=None, repr=False)

    @property
    def site_amplitudes(self):
        return self.amplitudes[:, :self.n_sites]

    @property
    def imp_amplitudes(self):
        return self.amplitudes[:, self.n_sites:]

    @property
    def pop_imp(self):
        return np.sum(np.abs(self.imp_amplitudes) ** 2, axis=1)

    @property
    def pop_lattice(self):
        return np.sum(np.abs(self.site_amplitudes) ** 2, axis=1)

    def budget_residual(self):
        return np.abs(self.pop_imp + self.pop_lattice + self.loss_total - 1.0)

    def check_budget(self, tol=BUDGET_TOL):
        res = float(self.budget_residual().max())
        if res > tol:
            raise IntegrationAccuracyError(f"population budget violated by {res:.2e}")
        return res

    def integrated_population(self, sites, t_end=None):
        """``int_0^t_end |C_j|^2 dt`` for the given site indices."""
        sites = np.atleast_1d(sites)
        t_end = self.t[-1] if t_end is None else t_end
        if self._integral is not None:
            return self._integral(sites, t_end)
        sel = self.t <= t_end + 1e-12
        return np.trapezoid(np.abs(self.amplitudes[sel][:, sites]) ** 2, self.t[sel], axis=0)


class Propagator:
    """Eigendecomposition of a :class:`SystemHamiltonian` (immutable, shareable)."""

    def __init__(self, ham: SystemHamiltonian):
        self.ham = ham
        h = ham.matrix
        try:
            vals, vecs = scipy.linalg.eig(h)
        except (np.linalg.LinAlgError, ValueError) as exc:
            raise SolverError(f"eigensolver failed: {exc}") from exc
        scale = max(np.linalg.norm(h), 1e-300)
        self.residual = float(np.max(np.linalg.norm(h @ vecs - vecs * vals, axis=0)) / scale)
        self.ok = bool(np.isfinite(self.residual) and self.residual <= EIG_RESIDUAL_TOL)
        self.vals, self.vecs = vals, vecs
        self._lu = scipy.linalg.lu_factor(vecs) if self.ok else None
        self._gram = {}

    def coefficients(self, psi0):
        c = scipy.linalg.lu_solve(self._lu, psi0)
        err = np.linalg.norm(self.vecs @ c - psi0)
        if not err <= 1e-8:
            raise SolverError(f"eigenbasis expansion error {err:.2e}")
        return c

    def _weighted_gram(self, key, weights):
        """``V^dag diag(w) V`` for a non-negative weight vector (cached)."""
        if key not in self._gram:
            v = self.vecs
            self._gram[key] = v.conj().T @ (weights[:, None] * v)
        return self._gram[key]

    def _kernel_integral(self, a, c, t):
        """``int_0^t psi^dag A psi`` for all ``t`` given ``a = V^dag A V``."""
        lam = self.vals
        delta = lam.conj()[:, None] - lam[None, :]
        small = np.abs(delta) < 1e-13
        a_c = a * np.outer(c.conj(), c)
        with np.errstate(divide="ignore", invalid="ignore"):
            q = np.where(small, 0.0, a_c / (1j * delta))
        w = np.exp(-1j * np.outer(t, lam))
        out = np.einsum("ta,ta->t", w.conj(), w @ q.T) - q.sum()
        if np.any(small):
            out = out + t * a_c[small].sum()
        return out.real

    def trajectory(self, psi0, t):
        ham = self.ham
        t = np.asarray(t, float)
        c = self.coefficients(psi0)
        amps = np.exp(-1j * np.outer(t, self.vals)) * c[None, :]
        psi = amps @ self.vecs.T
        d = ham.decay_matrix()
        v = self.vecs
        loss = self._kernel_integral(v.conj().T @ d @ v, c, t)
        wb = ham.boundary_weights()
        lb = (self._kernel_integral(self._weighted_gram("rim", wb), c, t)
              if np.any(wb) else np.zeros_like(t))

        def integral(sites, t_end):
            x = v[sites] * c[None, :]
            lam = self.vals
            delta = lam.conj()[:, None] - lam[None, :]
            if np.isinf(t_end):
                k = 1j / delta
            else:
                with np.errstate(divide="ignore", invalid="ignore"):
                    k = np.where(np.abs(delta) < 1e-13, t_end,
                                 np.expm1(1j * delta * t_end) / (1j * delta))
            return np.einsum("sa,ab,sb->s", x.conj(), k, x).real

        return Trajectory(t, psi, ham.n_sites, loss, lb, "eig", integral)


def _evolve_ode(ham: SystemHamiltonian, psi0, t, rtol=1e-10, atol=1e-12):
    h = ham.matrix
    d = ham.decay_matrix()
    wb = ham.boundary_weights()
    n = ham.size

    def rhs(_, y):
        psi = y[:n]
        dpsi = -1j * (h @ psi)
        return np.concatenate([dpsi, [np.vdot(psi, d @ psi), np.vdot(psi, wb * psi)]])

    y0 = np.concatenate([np.asarray(psi0, complex), [0.0, 0.0]])
    sol = solve_ivp(rhs, (t[0], t[-1]), y0, method="DOP853", t_eval=t, rtol=rtol, atol=atol)
    if not sol.success:
        raise SolverError(f"integrator failed: {sol.message}")
    y = sol.y.T
    return Trajectory(t, y[:, :n], ham.n_sites, y[:, n].real, y[:, n + 1].real, "ode")


def evolve(ham: SystemHamiltonian, psi0=None, t_grid=None, method="auto", propagator=None,
           check=True):
    """``psi(t) = exp(-i H t) psi0`` on ``t_grid``.

    ``method`` is ``"eig"``, ``"ode"`` or ``"auto"`` (eigendecomposition with
    residual check, falling back to DOP853).  The population budget is
    asserted at every sample when ``check`` is set.
    """
    if psi0 is None:
        psi0 = ham.initial_state()
    psi0 = np.asarray(psi0, complex)
    if abs(np.linalg.norm(psi0) - 1) > 1e-10:
        raise ValueError("initial state must be normalised")
    t = np.asarray(t_grid, float)
    if t[0] != 0 or np.any(np.diff(t) <= 0):
        raise ValueError("t_grid must start at 0 and increase")
    traj = None
    if method in ("auto", "eig"):
        prop = propagator if propagator is not None else Propagator(ham)
        if prop.ok:
            try:
                traj = prop.trajectory(psi0, t)
            except SolverError:
                if method == "eig":
                    raise
        elif method == "eig":
            raise SolverError(f"eigen-residual {prop.residual:.2e} above tolerance")
    if traj is None:
        traj = _evolve_ode(ham, psi0, t)
    if check:
        traj.check_budget()
        norm = traj.pop_imp + traj.pop_lattice
        if np.any(np.diff(norm) > 1e-10):
            raise IntegrationAccuracyError("norm increased between samples")
    return traj


def loss_accounting(traj: Trajectory, ham: SystemHamiltonian = None, channels=False,
                    tol=1e-4):
    """Total loss ``L_T = 1 - P_a - P_L`` and optionally the per-channel split.

    With ``channels`` the decay matrix is diagonalised,
    ``Gamma |phi_a> = gamma_a |phi_a>``, and
    ``L_a(t) = gamma_a int |<phi_a|psi>|^2`` is integrated with the cumulative
    Simpson rule on the trajectory samples.  Returns ``(L_T, L_alpha)``.
    """
    lt = 1.0 - traj.pop_imp - traj.pop_lattice
    if not channels:
        return lt, None
    if ham is None:
        raise ValueError("channel split needs the Hamiltonian")
    gam, phi = np.linalg.eigh(ham.decay_matrix())
    proj = np.abs(traj.amplitudes @ phi.conj()) ** 2
    la = cumulative_simpson(proj, x=traj.t, axis=0, initial=0.0) * gam[None, :]
    err = float(np.max(np.abs(la.sum(axis=1) - lt)))
    if err > tol:
        raise IntegrationAccuracyError(
            f"channel sum differs from the budget by {err:.2e}; refine the time grid")
    return lt, la


def boundary_loss(traj: Trajectory, array: DipoleArray = None):
    """``L_b(t) = sum_rim int (Gamma0(r_j) - Gamma0) |C_j|^2 dt``."""
    if array is not None and array.gamma_max == 0:
        return np.zeros_like(traj.t)
    return traj.loss_boundary


@dataclass
class PurcellResult:
    value: float
    method: str
    gamma_m: float = None
    gamma_prime: float = None
    converged: bool = True
    diagnostics: dict = field(default_factory=dict)


def purcell_curve(traj: Trajectory):
    """``P(t) = (P_L + L_b) / (L_T - L_b)``."""
    lt = 1.0 - traj.pop_imp - traj.pop_lattice
    lb = traj.loss_boundary
    with np.errstate(divide="ignore", invalid="ignore"):
        return (traj.pop_lattice + lb) / (lt - lb)


def purcell_numerical(traj: Trajectory, plateau_tol=1e-2, residual_tol=1e-3):
    p = purcell_curve(traj)
    t = traj.t
    p_end = float(p[-1])
    p_09 = float(np.interp(0.9 * t[-1], t, p))
    residual = float(traj.pop_imp[-1] + traj.pop_lattice[-1])
    flat = abs(p_end - p_09) < plateau_tol * abs(p_end)
    ok = bool(flat or residual < residual_tol)
    return PurcellResult(p_end, "numerical", converged=ok,
                         diagnostics={"p_at_0.9t": p_09, "residual_population": residual,
                                      "t_end": float(t[-1])})


def simulate(array: DipoleArray, imps: ImpuritySet, t_max=None, n_t=600, max_extend=4,
             propagator=None):
    """Evolve the impurity state until the Purcell factor plateaus.

    ``t_max`` defaults to ``20 / Gamma_eff`` (isolated-impurity estimate) and
    is doubled up to ``max_extend`` times.  Returns
    ``(trajectory, PurcellResult, propagator)``.
    """
    ham = build_hamiltonian(array, imps)
    prop = propagator if propagator is not None else Propagator(ham)
    if t_max is None:
        t_max = 20.0 / float(np.max(imps.gammas))
    for _ in range(max_extend + 1):
        traj = evolve(ham, ham.initial_state(), time_grid(t_max, n_t), propagator=prop)
        res = purcell_numerical(traj)
        if res.converged:
            break
        t_max *= 2
    else:
        warnings.warn("Purcell factor did not plateau", ConvergenceWarning, stacklevel=2)
    return traj, res, prop


def _inplane_field_tensor(kf, rho, spec, a_ho, shells):
    """``sum_j G0(rho - r_j) exp(i k.r_j)`` for in-plane ``rho`` off the lattice.

    Poisson summation of the Gaussian-smeared tensor; the smearing only
    rescales ``G0`` away from the sites by ``exp(-(k0 a)^2/2)``, which is
    divided out.
    """
    k0 = spec.k0
    gvec = bands.reciprocal_shells(spec, shells)
    out = np.empty((len(kf), 3, 3), dtype=complex)
    step = max(1, 200_000 // len(gvec))
    for sl in range(0, len(kf), step):
        q = kf[sl:sl + step, None, :] + gvec[None, :, :]
        g = greens.weyl_component(q, k0, a_ho)
        ph = np.exp(1j * (q @ rho))
        out[sl:sl + step] = np.einsum("kgab,kg->kab", g, ph)
    return -np.exp((k0 * a_ho) ** 2 / 2) * out / spec.cell_area


def _offplane_field_tensor(kf, r, spec):
    """``sum_j G0(r - r_j) exp(i k.r_j)`` for ``z != 0`` (Weyl expansion)."""
    t = bands.offplane_sum(kf, spec, r[:2], r[2])
    return np.exp(1j * kf @ r[:2])[:, None, None] * t


def _patch_field_tensor(kf, r, spec, half_width, taper):
    """Tapered real-space ``sum_j G0(r - r_j) exp(i k.r_j)`` over a patch centred on ``r``.

    The lattice phase factorises along the two primitive directions, so
    many ``k`` cost little more than one.
    """
    a = spec.primitive_vectors()
    base = np.round(np.linalg.solve(a.T, r[:2]))
    n = np.arange(-half_width, half_width + 1)
    n1, n2 = base[0] + n, base[1] + n
    m1, m2 = np.meshgrid(n1, n2, indexing="ij")
    xy = m1[..., None] * a[0] + m2[..., None] * a[1]
    sep = np.concatenate([r[:2] - xy, np.full(m1.shape + (1,), r[2])], axis=-1)
    rho = np.linalg.norm(xy - r[:2], axis=-1)
    rmax = half_width * spec.d
    r0 = taper * rmax
    wt = np.where(rho <= r0, 1.0,
                  np.where(rho >= rmax, 0.0,
                           0.5 * (1 + np.cos(np.pi * (rho - r0) / (rmax - r0)))))
    g = greens.green_free_space(sep, spec.k0) * wt[..., None, None]
    e1 = np.exp(1j * np.outer(kf @ a[0], n1))
    e2 = np.exp(1j * np.outer(kf @ a[1], n2))
    return np.einsum("kn,nmab,km->kab", e1, g, e2)


def eigenmode_fields(k, r, spec: GeometrySpec, method="auto", half_width=60, taper=0.5,
                     a_ho=bands.A_HO_DEFAULT, shells=bands.CUTOFF_SHELLS, z_weyl=0.25,
                     check=True):
    """Field eigenmodes ``alpha_k(r)`` and ``beta_k(r)`` of an infinite monolayer.

    ``alpha_k(r) = sum_j G0(r - r_j).p0 exp(i k.r_j)`` and
    ``beta_k(r) = sum_j p0*.G0(r_j - r) exp(-i k.r_j)``.  Methods:

    ``weyl``
        reciprocal-space sum; Gaussian-smeared at ``z = 0``, plain Weyl
        expansion for ``|z| >= z_weyl``.
    ``patch``
        real-space sum over ``(2 w + 1)^2`` sites with a raised-cosine taper.
        Inside the light cone this converges only conditionally.
    ``auto``
        ``weyl`` where it applies, ``patch`` for ``0 < |z| < z_weyl``.

    With ``check`` the patch size is doubled (or two more reciprocal shells
    are added) and a :class:`ConvergenceWarning` is issued above 1%.
    Returns arrays of shape ``k.shape[:-1] + (3,)``.
    """
    if spec.kind == "bilayer-square":
        raise GeometryError("eigenmode fields are defined for single layers")
    k = np.asarray(k, float)
    shape = k.shape[:-1]
    kf = k.reshape(-1, 2)
    r = np.asarray(r, float)
    z = r[2]
    if method == "auto":
        method = "weyl" if (z == 0 or abs(z) >= z_weyl) else "patch"
    if method not in ("weyl", "patch"):
        raise ValueError(f"unknown method {method!r}")
    if method == "weyl" and 0 < abs(z) < z_weyl:
        raise ValueError(f"Weyl expansion needs z = 0 or |z| >= {z_weyl}")

    def tensor(kk, refine=False):
        if method == "patch":
            return _patch_field_tensor(kk, r, spec, 2 * half_width if refine else half_width, taper)
        if z == 0:
            return _inplane_field_tensor(kk, r[:2], spec, a_ho, shells + 2 if refine else shells)
        return _offplane_field_tensor(kk, r, spec)

    p = spec.pol
    alpha = tensor(kf) @ p
    # beta_k = p0* . M(-k) because G0 is symmetric and even
    beta = np.einsum("a,kab->kb", p.conj(), tensor(-kf))
    if check and not (method == "weyl" and z != 0):
        probe = kf[:: max(1, len(kf) // 16)]
        ref = tensor(probe, refine=True) @ p
        cur = alpha[:: max(1, len(kf) // 16)]
        # fields that vanish by symmetry are judged against the nearest-neighbour coupling
        floor = 1e-6 * np.linalg.norm(greens.green_free_space(np.array([spec.d, 0, 0]), spec.k0))
        scale = np.maximum(np.linalg.norm(ref, axis=-1), floor)
        rel = np.linalg.norm(ref - cur, axis=-1) / scale
        if rel.max() > 1e-2:
            warnings.warn(f"eigenmode field sum changes by {rel.max():.1%} on refinement",
                          ConvergenceWarning, stacklevel=2)
    return alpha.reshape(shape + (3,)), beta.reshape(shape + (3,))


def _delta_integral(kx, ky, w, f, energy, mask):
    """``int f(k) delta(energy - w(k)) d^2k`` with piecewise-linear ``w`` and ``f``.

    The periodic grid is split into two triangles per cell; on each, ``w``
    and ``f`` are linear, so the delta function restricts to a straight
    segment whose contribution is ``length * mean(f) / |grad w|``.  Only
    triangles with all vertices in ``mask`` contribute.
    """
    nx, ny = w.shape
    hx, hy = kx[1] - kx[0], ky[1] - ky[0]
    ip = np.roll(np.arange(nx), -1)
    jp = np.roll(np.arange(ny), -1)
    w00, w10 = w, w[ip, :]
    w01, w11 = w[:, jp], w[ip][:, jp]
    f00, f10 = f, f[ip, :]
    f01, f11 = f[:, jp], f[ip][:, jp]
    m00, m10 = mask, mask[ip, :]
    m01, m11 = mask[:, jp], mask[ip][:, jp]
    total = 0.0
    # vertices in local coordinates (units of h): (0,0), (1,0), (0,1), (1,1)
    tris = [((0, 0), (1, 0), (1, 1), w00, w10, w11, f00, f10, f11, m00 & m10 & m11),
            ((0, 0), (1, 1), (0, 1), w00, w11, w01, f00, f11, f01, m00 & m11 & m01)]
    for p0, p1, p2, wa, wb, wc, fa, fb, fc, m in tris:
        P = np.array([p0, p1, p2], float) * [hx, hy]
        W = np.stack([wa, wb, wc], -1)[m]
        F = np.stack([fa, fb, fc], -1)[m]
        # gradient of the linear interpolant
        e1, e2 = P[1] - P[0], P[2] - P[0]
        det = e1[0] * e2[1] - e1[1] * e2[0]
        d1, d2 = W[:, 1] - W[:, 0], W[:, 2] - W[:, 0]
        gx = (d1 * e2[1] - d2 * e1[1]) / det
        gy = (d2 * e1[0] - d1 * e2[0]) / det
        grad = np.hypot(gx, gy)
        lo, hi = W.min(-1), W.max(-1)
        sel = (lo < energy) & (energy < hi) & (grad > 0)
        W, F, grad = W[sel], F[sel], grad[sel]
        pts, vals = [], []
        for a, b in ((0, 1), (1, 2), (2, 0)):
            wa_, wb_ = W[:, a], W[:, b]
            cross = (wa_ - energy) * (wb_ - energy) < 0
            with np.errstate(divide="ignore", invalid="ignore"):
                s = np.where(cross, (energy - wa_) / (wb_ - wa_), np.nan)
            pts.append(P[a][None, :] + s[:, None] * (P[b] - P[a])[None, :])
            vals.append(F[:, a] + s * (F[:, b] - F[:, a]))
        pts = np.stack(pts, 1)
        vals = np.stack(vals, 1)
        ok = ~np.isnan(pts[..., 0])
        # each crossed triangle has exactly two crossed edges
        two = ok.sum(1) == 2
        pts, vals, ok, grad = pts[two], vals[two], ok[two], grad[two]
        p_sel = pts[ok].reshape(-1, 2, 2)
        v_sel = vals[ok].reshape(-1, 2)
        length = np.linalg.norm(p_sel[:, 1] - p_sel[:, 0], axis=1)
        total += np.sum(length * v_sel.mean(1) / grad)
    return total


def _light_fraction(kx, ky, k0, sub=8):
    """Fraction of each grid cell inside the light circle (sub-cell sampling)."""
    hx, hy = kx[1] - kx[0], ky[1] - ky[0]
    o = (np.arange(sub) + 0.5) / sub - 0.5
    ox, oy = np.meshgrid(o * hx, o * hy, indexing="ij")
    X, Y = np.meshgrid(kx, ky, indexing="ij")
    inside = np.zeros(X.shape)
    for dx, dy in zip(ox.ravel(), oy.ravel()):
        inside += (X + dx) ** 2 + (Y + dy) ** 2 <= k0**2
    return inside / sub**2


def lattice_frame(array: DipoleArray, position):
    """Express ``position`` relative to the infinite lattice with a site at the origin.

    Finite patches are centred on the origin, so for even ``N_l`` their sites
    sit at half-integer coordinates; the eigenmode sums assume ``r_j = n a``.
    """
    r = np.array(position, dtype=float)
    xy = array.positions[array.layer == 0]
    site = xy[np.argmin(np.linalg.norm(xy[:, :2] - r[:2], axis=1))]
    r[:2] -= site[:2]
    return r


def purcell_semianalytical(spec: GeometrySpec, position, polarization, omega_a=None,
                           resolution=160, half_width=60, broadening="delta", eta=0.0,
                           field_method="auto",
                           a_ho=bands.A_HO_DEFAULT, check=True):
    """Born-Markov Purcell factor ``P_a = Gamma_m / Gamma'`` for one impurity.

    ``position`` is measured from a lattice site (see :func:`lattice_frame`).

    Rates are positive: ``Gamma = -2 Im Sigma`` with the retarded self-energy
    ``Sigma = (9 d^2 Gamma_a / 4 k0^2) int d^2k F_k / (omega_a - omega_k + i gamma_k / 2)``,
    ``F_k = (p_a*.alpha_k)(beta_k.p_a)``.  Outside the light circle
    ``gamma_k = 0`` and the pole is taken as ``+i0``: with ``broadening="delta"``
    the resulting ``pi delta(omega_a - omega_k)`` is integrated exactly on
    linear triangles; ``broadening="lorentzian"`` instead uses the width
    ``gamma_k / 2 + eta`` on the grid.  Inside the light circle the full
    complex denominator is summed with sub-cell area weights.
    """
    if spec.kind != "square":
        # the rectangular k-grid is a periodic unit cell only for the square lattice
        raise GeometryError("semi-analytical Purcell factor implemented for square monolayers")
    pa = np.asarray(polarization, complex)
    pa = pa / np.linalg.norm(pa)
    if omega_a is None:
        omega_a = bands.mode_energy(spec, "X", a_ho)

    def evaluate(res):
        grid = bands.band_structure(spec, res, "bz", a_ho)
        kx, ky = grid.kx, grid.ky
        X, Y = grid.mesh()
        kk = np.stack([X, Y], -1)
        alpha, beta = eigenmode_fields(kk, position, spec, field_method, half_width,
                                       a_ho=a_ho, check=False)
        f = (alpha @ pa.conj()) * (beta @ pa)
        energy = grid.energy
        k0 = spec.k0
        cell = (kx[1] - kx[0]) * (ky[1] - ky[0])
        pref = 9 * spec.d**2 / (2 * k0**2)
        frac = _light_fraction(kx, ky, k0)
        outside = np.hypot(X, Y) > k0
        if broadening == "delta":
            s_out = np.pi * _delta_integral(kx, ky, energy.real, f.real, omega_a, outside)
        elif broadening == "lorentzian":
            w_out = (1 - frac) * cell
            den = omega_a - energy.real + 1j * (np.maximum(-energy.imag, 0) + eta)
            s_out = -np.sum(w_out * f / den).imag
        else:
            raise ValueError(f"unknown broadening {broadening!r}")
        w_in = frac * cell
        s_in = -np.sum(w_in * f / (omega_a - energy)).imag
        gm = pref * s_out
        gp = 1.0 + pref * s_in
        return gm, gp

    gm, gp = evaluate(resolution)
    diag = {"omega_a": omega_a, "resolution": resolution}
    converged = True
    if check:
        gm2, gp2 = evaluate(resolution // 2)
        p1, p2 = gm / gp, gm2 / gp2
        change = abs(p1 - p2) / max(abs(p1), 1e-300)
        diag["half_grid_value"] = p2
        diag["relative_change"] = change
        converged = change <= 0.05
        if not converged:
            warnings.warn(f"semi-analytical Purcell factor changes by {change:.1%} on grid halving",
                          ConvergenceWarning, stacklevel=2)
    return PurcellResult(gm / gp, "semi-analytical", gamma_m=gm, gamma_prime=gp,
                         converged=converged, diagnostics=diag)


def midpoint_circle(radius):
    """Integer offsets on a discrete circle (midpoint circle algorithm)."""
    radius = int(radius)
    if radius <= 0:
        return np.zeros((1, 2), dtype=int)
    pts = set()
    x, y, err = radius, 0, 1 - radius
    while x >= y:
        for a, b in ((x, y), (y, x), (-y, x), (-x, y), (-x, -y), (-y, -x), (y, -x), (x, -y)):
            pts.add((a, b))
        y += 1
        if err < 0:
            err += 2 * y + 1
        else:
            x -= 1
            err += 2 * (y - x) + 1
    return np.array(sorted(pts))


def circle_sites(array: DipoleArray, center, radius):
    """Indices of layer-0 sites on the discrete circle of ``radius`` (in ``d``) around ``center``.

    The circle is centred on the layer-0 site nearest ``center``.
    """
    spec = array.spec
    a = spec.primitive_vectors()
    layer0 = np.nonzero(array.layer == 0)[0]
    xy = array.positions[layer0, :2]
    anchor = xy[np.argmin(np.linalg.norm(xy - np.asarray(center, float)[:2], axis=1))]
    offs = midpoint_circle(round(radius / spec.d))
    want = anchor[None, :] + offs @ a
    dist = np.linalg.norm(want[:, None, :] - xy[None, :, :], axis=-1)
    near = np.argmin(dist, axis=1)
    if np.any(dist[np.arange(len(want)), near] > 1e-6 * spec.d):
        raise GeometryError(f"circle of radius {radius} leaves the array")
    return layer0[near]


def chi1d_from_populations(pop, theta, theta_max="argmax"):
    """``sum P~_j cos(2 (theta_j - theta_max))`` with ``P~`` normalised to one."""
    pop = np.asarray(pop, float)
    theta = np.mod(np.asarray(theta, float), 2 * np.pi)
    total = pop.sum()
    if total <= 0:
        raise GeometryError("no population on the circle")
    pt = pop / total
    if theta_max == "argmax":
        best = np.flatnonzero(pt == pt.max())
        tmax = theta[best].min()
    elif theta_max == "fixed":
        tmax = np.pi / 4
    else:
        tmax = float(theta_max)
    return float(np.sum(pt * np.cos(2 * (theta - tmax))))


def directionality_chi1d(traj: Trajectory, array: DipoleArray, center, radius,
                         n_circles=5, theta_max="argmax", t_end=None):
    """Mean ``chi_1D`` over ``n_circles`` concentric discrete circles spaced ``d``.

    Populations are time-integrated ``int_0^t_end |C_j|^2 dt`` (``t_end``
    defaults to the last sample; ``np.inf`` is allowed on the eigen route).
    """
    center = np.asarray(center, float)
    vals = []
    for c in range(n_circles):
        rad = radius + c * array.spec.d
        idx = circle_sites(array, center, rad)
        if np.any(array.rim[idx]):
            raise GeometryError(f"circle of radius {rad} reaches the absorbing rim")
        pop = traj.integrated_population(idx, t_end)
        rel = array.positions[idx, :2] - center[:2]
        theta = np.arctan2(rel[:, 1], rel[:, 0])
        vals.append(chi1d_from_populations(pop, theta, theta_max))
    return float(np.mean(vals))


def nonmarkov_witness(amplitude, t=None):
    """Ratio of revival to decay of ``|C_a(t)|^4`` (sign-partitioned increments).

    ``amplitude`` is a :class:`Trajectory` (the impurity-subspace amplitude
    ``sqrt(P_a)`` is used) or a sampled series ``|C_a(t_n)|``.
    """
    if isinstance(amplitude, Trajectory):
        y = amplitude.pop_imp ** 2
    else:
        y = np.abs(np.asarray(amplitude)) ** 4
    inc = np.diff(y)
    up = inc[inc > 0].sum()
    down = -inc[inc < 0].sum()
    if down == 0:
        return 0.0
    return float(up / down)


@dataclass
class DecayFit:
    rate: float
    intercept: float
    residual: float
    window: tuple
    flagged: bool = False
    gamma_a: float = None
    gamma_ind: float = None

    @property
    def ratio_a(self):
        """``Gamma_coll / Gamma_a``."""
        return None if self.gamma_a is None else self.rate / self.gamma_a

    @property
    def ratio_ind(self):
        """``Gamma_coll / Gamma_ind`` (single-emitter or single-cluster rate at the same configuration)."""
        return None if self.gamma_ind is None else self.rate / self.gamma_ind


def collective_decay_fit(t, population, window=(0.1, 0.9), residual_tol=1e-2, gamma_a=None,
                         gamma_ind=None):
    """Least-squares fit of ``ln P(t) = -Gamma t + c`` where ``P in window * P(0)``.

    ``residual_tol`` bounds the RMS residual of ``ln P``; larger values flag
    the fit as non-exponential.
    """
    t = np.asarray(t, float)
    p = np.asarray(population, float)
    lo, hi = window[0] * p[0], window[1] * p[0]
    sel = (p >= lo) & (p <= hi)
    if sel.sum() < 3:
        raise ValueError("fewer than three samples inside the fit window")
    A = np.column_stack([-t[sel], np.ones(sel.sum())])
    coef, *_ = np.linalg.lstsq(A, np.log(p[sel]), rcond=None)
    resid = float(np.sqrt(np.mean((A @ coef - np.log(p[sel])) ** 2)))
    return DecayFit(float(coef[0]), float(coef[1]), resid, (float(t[sel][0]), float(t[sel][-1])),
                    resid > residual_tol, gamma_a, gamma_ind)


def free_hamiltonian(imps: ImpuritySet, k0) -> SystemHamiltonian:
    """Impurities alone in free space (no array)."""
    h = greens.coupling_matrix(imps.positions, imps.polarizations, imps.gammas, k0)
    h[np.diag_indices(len(imps))] += imps.detunings
    return SystemHamiltonian(h, 0, len(imps), None, imps)


def collective_decay(array: DipoleArray, imps: ImpuritySet, t_max=None, n_t=800,
                     gamma_ind=None, k0=None):
    """Evolve ``imps`` from its initial amplitudes and fit the impurity-subspace decay.

    With ``array=None`` the emitters sit in free space at wavenumber ``k0``.
    ``t_max`` defaults to ``4 / Gamma_a``.
    """
    if array is None:
        ham = free_hamiltonian(imps, k0)
    else:
        ham = build_hamiltonian(array, imps)
    if t_max is None:
        t_max = 4.0 / float(np.max(imps.gammas))
    traj = evolve(ham, ham.initial_state(), np.linspace(0, t_max, n_t))
    fit = collective_decay_fit(traj.t, traj.pop_imp, gamma_a=float(np.mean(imps.gammas)),
                               gamma_ind=gamma_ind)
    return fit, traj
