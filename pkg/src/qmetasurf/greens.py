"""Free-space dyadic Green's tensor and photon-mediated dipole couplings.

Units: lengths in lattice constants, rates in units of the array decay
rate ``Gamma0 = 1``.  The real-space tensor follows the outgoing
convention, so ``Im[p.G(r).p] -> k0/(6 pi)`` as ``r -> 0``.  The regularised
origin tensor and the Weyl components are returned exactly as they appear
in the finite-atom-size (Gaussian smeared) momentum representation, which
carries the opposite overall sign; :func:`lattice_sum` takes care of it.
"""

import numpy as np
from scipy import special

from .errors import DegenerateSeparationError, InvalidRegularizerError

EPS_MIN_FACTOR = 1e-6


def eps_min(k0):
    """Minimum pair separation accepted by :func:`green_free_space`."""
    return EPS_MIN_FACTOR / k0


def green_free_space(r, k0, min_separation=None):
    """Dyadic Green's tensor ``G0(r)`` for displacement(s) ``r``.

    ``r`` has shape ``(..., 3)``; the result has shape ``(..., 3, 3)``.
    """
    r = np.asarray(r, dtype=float)
    dist = np.linalg.norm(r, axis=-1)
    rmin = eps_min(k0) if min_separation is None else min_separation
    if np.any(dist < rmin):
        bad = np.argwhere(np.atleast_1d(dist < rmin)).ravel().tolist()
        raise DegenerateSeparationError(
            f"separation below {rmin:.3g}; use green_regularized_origin for r = 0",
            pairs=bad,
        )
    kr = k0 * dist
    pref = np.exp(1j * kr) / (4 * np.pi * k0**2 * dist**3)
    a = pref * (kr**2 + 1j * kr - 1)
    b = pref * (-(kr**2) - 3j * kr + 3)
    rhat = r / dist[..., None]
    outer = rhat[..., :, None] * rhat[..., None, :]
    return a[..., None, None] * np.eye(3) + b[..., None, None] * outer


def green_regularized_origin(a_ho, k0):
    """Finite-size regularised tensor at the origin (diagonal, momentum-space sign)."""
    if not a_ho > 0:
        raise InvalidRegularizerError(f"a_ho must be positive, got {a_ho}")
    x = k0 * a_ho
    val = (k0 / (6 * np.pi)) * (
        (special.erfi(x / np.sqrt(2)) - 1j) * np.exp(-(x**2) / 2)
        + (0.5 - x**2) / (np.sqrt(np.pi / 2) * x**3)
    )
    return val * np.eye(3, dtype=complex)


def _lambda_branch(p2, k0):
    """sqrt(k0^2 - p^2) with the evanescent branch on the positive imaginary axis."""
    lam2 = np.asarray(k0**2 - p2, dtype=float)
    # light-line points carry a genuine 1/Lambda singularity; nudge them
    lam2 = np.where(np.abs(lam2) < 1e-12 * k0**2, 1e-12 * k0**2, lam2)
    return np.sqrt(lam2.astype(complex))


def weyl_integrals(p2, k0, a_ho):
    """Return ``(I0, I2, C)`` for squared in-plane momenta ``p2``."""
    if not a_ho > 0:
        raise InvalidRegularizerError(f"a_ho must be positive, got {a_ho}")
    p2 = np.asarray(p2, dtype=float)
    lam = _lambda_branch(p2, k0)
    cpref = np.exp(-(a_ho**2) * p2 / 2) / (2 * np.pi * k0**2)
    prop = lam.imag == 0
    i0 = np.empty(p2.shape, dtype=complex)
    if np.any(prop):
        lp = lam[prop].real
        i0[prop] = (cpref[prop] * np.pi * np.exp(-(a_ho * lp) ** 2 / 2) / lp
                    * (-1j + special.erfi(a_ho * lp / np.sqrt(2))))
    ev = ~prop
    if np.any(ev):
        kap = lam[ev].imag
        # exp(a^2 kappa^2/2) erfc(a kappa/sqrt2) folded into erfcx for stability
        i0[ev] = -cpref[ev] * np.pi * special.erfcx(a_ho * kap / np.sqrt(2)) / kap
    i2 = lam**2 * i0 - cpref * np.sqrt(2 * np.pi) / a_ho
    return i0, i2, cpref


def weyl_component(p_xy, k0, a_ho):
    """Regularised Weyl tensor ``g*(p)`` for in-plane momentum ``p_xy`` (shape ``(..., 2)``)."""
    p_xy = np.asarray(p_xy, dtype=float)
    px, py = p_xy[..., 0], p_xy[..., 1]
    i0, i2, _ = weyl_integrals(px**2 + py**2, k0, a_ho)
    g = np.zeros(p_xy.shape[:-1] + (3, 3), dtype=complex)
    g[..., 0, 0] = (k0**2 - px**2) * i0
    g[..., 1, 1] = (k0**2 - py**2) * i0
    g[..., 2, 2] = k0**2 * i0 - i2
    g[..., 0, 1] = g[..., 1, 0] = -px * py * i0
    return g


def coupling(pos_i, pol_i, gamma_i, pos_j, pol_j, gamma_j, k0, self_term=False):
    """Photon-mediated coupling ``J_ij - i Gamma_ij / 2`` between two dipoles."""
    if self_term:
        return -0.5j * gamma_i
    sep = np.asarray(pos_i, float) - np.asarray(pos_j, float)
    g = green_free_space(sep, k0)
    pi_ = np.asarray(pol_i, complex)
    pj_ = np.asarray(pol_j, complex)
    return complex(-3 * np.pi * np.sqrt(gamma_i * gamma_j) / k0 * (pi_.conj() @ g @ pj_))


def coupling_matrix(positions, polarizations, gammas, k0, min_separation=None):
    """Dense coupling matrix with ``-i Gamma_i/2`` on the diagonal.

    Off-diagonal entries are ``-(3 pi sqrt(Gamma_i Gamma_j)/k0) p_i*.G0(r_i - r_j).p_j``.
    """
    pos = np.asarray(positions, dtype=float)
    pol = np.asarray(polarizations, dtype=complex)
    gam = np.asarray(gammas, dtype=float)
    n = len(pos)
    rmin = eps_min(k0) if min_separation is None else min_separation
    out = np.empty((n, n), dtype=complex)
    # row blocks keep the (n, n, 3, 3) temporaries bounded
    block = max(1, 2_000_000 // max(n, 1))
    for s in range(0, n, block):
        e = min(n, s + block)
        sep = pos[s:e, None, :] - pos[None, :, :]
        dist = np.linalg.norm(sep, axis=-1)
        idx = np.arange(s, e)
        dist[idx - s, idx] = np.inf
        if np.any(dist < rmin):
            ii, jj = np.nonzero(dist < rmin)
            pairs = [(int(i + s), int(j)) for i, j in zip(ii, jj)]
            raise DegenerateSeparationError(
                f"{len(pairs)} pair(s) closer than {rmin:.3g}: {pairs[:5]}", pairs=pairs)
        kr = k0 * dist
        with np.errstate(invalid="ignore"):
            pref = np.exp(1j * kr) / (4 * np.pi * k0**2 * dist**3)
            a = pref * (kr**2 + 1j * kr - 1)
            b = pref * (-(kr**2) - 3j * kr + 3) / dist**2
        # p_i*.G.p_j = a (p_i*.p_j) + b (p_i*.r)(r.p_j)
        pp = pol[s:e].conj() @ pol.T
        pr_i = np.einsum("ia,ija->ij", pol[s:e].conj(), sep)
        pr_j = np.einsum("ija,ja->ij", sep, pol)
        val = a * pp + b * pr_i * pr_j
        val[idx - s, idx] = 0.0
        out[s:e] = -3 * np.pi * np.sqrt(gam[s:e, None] * gam[None, :]) / k0 * val
    out[np.arange(n), np.arange(n)] = -0.5j * gam
    return out


def decay_matrix(coupling_mat):
    """Matrix ``Gamma_ij`` (twice the negated anti-Hermitian part of the couplings)."""
    return 1j * (coupling_mat - coupling_mat.conj().T)
