"""Observable kernels: each takes a resolved single-point config and returns ``(header, rows)``."""

import copy
import warnings

import numpy as np

from .. import bands, dynamics, lattice
from ..errors import ConvergenceWarning, DegenerateSeparationError
from .config import axis_values, build_array, geometry_spec, impurity_config

NAN = float("nan")


class Context:
    """Lazily built geometry, array and impurity objects for one sweep point."""

    def __init__(self, cfg):
        self.cfg = cfg
        self.num = cfg["numerics"]
        self.spec = geometry_spec(cfg["geometry"])
        self._array = None

    @property
    def array(self):
        if self._array is None:
            self._array = build_array(self.cfg["geometry"])
        return self._array

    def impurities(self, array=None, **changes):
        arr = self.array if array is None else array
        imp = dict(self.cfg["impurities"])
        imp.update(changes)
        return lattice.place_impurities(arr, impurity_config(imp, arr.spec, self.num["a_ho"]))

    def simulate(self, imps, array=None):
        arr = self.array if array is None else array
        return dynamics.simulate(arr, imps, t_max=self.num["t_max"], n_t=self.num["n_t"])

    def grid(self, resolution, region="bz"):
        return bands.band_structure(self.spec, resolution, region, self.num["a_ho"],
                                    self.num["shells"])


def obs_bands(ctx, params):
    k, s, ticks = bands.band_path(ctx.spec, params.get("points"), ctx.num["path_points"])
    e = bands.bloch_energy(k, ctx.spec, ctx.num["a_ho"], ctx.num["shells"])
    header = ["branch", "s (1/d)", "kx (1/d)", "ky (1/d)", "omega (Gamma0)", "gamma (Gamma0)"]
    e = e[:, None] if e.ndim == 1 else e
    rows = []
    for b in range(e.shape[1]):
        for i in range(len(k)):
            rows.append([b, s[i], k[i, 0], k[i, 1], e[i, b].real, -2 * e[i, b].imag])
    return header, rows


def obs_dos(ctx, params):
    grid = ctx.grid(ctx.num["band_resolution"])
    dos = bands.density_of_states(grid, ctx.num["dos_bins"])
    return (["omega (Gamma0)", "dos (1/Gamma0)"],
            [[c, d] for c, d in zip(dos.centers, dos.density)])


def obs_isofrequency(ctx, params):
    grid = ctx.grid(ctx.num["contour_resolution"])
    energy = bands.mode_energy(ctx.spec, params["point"], ctx.num["a_ho"], params["branch"])
    con = bands.isofrequency(grid, energy, params["branch"])
    rows = [[i, p[0], p[1], energy] for i, line in enumerate(con.lines) for p in line]
    return ["line", "kx (1/d)", "ky (1/d)", "omega (Gamma0)"], rows


def obs_delta_scan(ctx, params):
    vals = axis_values(params["values"])
    rows = bands.straightness_scan(ctx.spec, vals, ctx.num["contour_resolution"],
                                   params["completion"], ctx.num["a_ho"], ctx.num["shells"])
    return ["d_over_lambda0", "delta", "status"], [list(r) for r in rows]


def _semi(ctx, imps):
    if ctx.spec.kind != "square" or len(imps) != 1:
        return NAN
    r = dynamics.lattice_frame(ctx.array, imps.positions[0])
    res = dynamics.purcell_semianalytical(
        ctx.spec, r, imps.polarizations[0], omega_a=float(imps.detunings[0]),
        resolution=ctx.num["semi_resolution"], broadening=ctx.num["broadening"],
        field_method=ctx.num["field_method"], a_ho=ctx.num["a_ho"])
    return res.value


def obs_purcell_z_scan(ctx, params):
    rows = []
    for z in axis_values(params["z"]):
        try:
            imps = ctx.impurities(z=float(z))
        except DegenerateSeparationError as exc:
            warnings.warn(f"skipped z={z}: {exc}", ConvergenceWarning, stacklevel=2)
            rows.append([z, NAN, NAN, NAN])
            continue
        traj, res, _ = ctx.simulate(imps)
        pa = _semi(ctx, imps) if params["semi_analytical"] else NAN
        if not res.converged:
            warnings.warn(f"P_n at z={z} did not plateau", ConvergenceWarning, stacklevel=2)
        rows.append([z, pa, res.value, dynamics.nonmarkov_witness(traj)])
    return ["z_over_d", "P_a", "P_n", "witness"], rows


def rotated_polarization(p0, theta):
    """Rotate ``p0`` about ``z`` by ``-theta`` (``y -> (sin theta, cos theta, 0)``)."""
    c, s = np.cos(theta), np.sin(theta)
    rot = np.array([[c, s, 0.0], [-s, c, 0.0], [0.0, 0.0, 1.0]])
    return rot @ np.asarray(p0, complex)


def obs_chi1d_theta_scan(ctx, params):
    """``theta = null`` keeps the configured impurity polarization (one row)."""
    rows = []
    thetas = [None] if params["theta"] is None else axis_values(params["theta"])
    for th in thetas:
        if th is None:
            imps = ctx.impurities()
            pa = imps.polarizations[0]
            th = float(np.arccos(min(1.0, abs(np.vdot(ctx.spec.pol, pa)))))
        else:
            pa = rotated_polarization(ctx.spec.pol, float(th))
            imps = ctx.impurities(polarization=[[v.real, v.imag] for v in pa])
        traj, res, _ = ctx.simulate(imps)
        centre = imps.positions.mean(axis=0)
        chi = dynamics.directionality_chi1d(traj, ctx.array, centre, ctx.num["chi_radius"],
                                            ctx.num["n_circles"], ctx.num["theta_max_mode"])
        rows.append([th, chi, res.value])
    return ["theta (rad)", "chi1d", "P_n"], rows


def obs_emission_pattern(ctx, params):
    imps = ctx.impurities()
    traj, res, _ = ctx.simulate(imps)
    n = len(ctx.array)
    if params.get("t") is None:
        pop = traj.integrated_population(np.arange(n))
        label = "population (1/Gamma0)"
    else:
        i = int(np.argmin(np.abs(traj.t - float(params["t"]))))
        pop = np.abs(traj.site_amplitudes[i]) ** 2
        label = "population"
    pos = ctx.array.positions
    rows = [[pos[j, 0], pos[j, 1], pos[j, 2], pop[j]] for j in range(n)]
    return ["x (d)", "y (d)", "z (d)", label], rows


BILAYER_DEFAULTS = {"geometry": {"kind": "bilayer-square",
                                 "polarization": [0.7071067811865476, 0.7071067811865476, 0.0]},
                    "impurities": {"polarization": [0.0, 1.0, 0.0]}}


def _strategy_context(ctx, strategy):
    name = strategy if isinstance(strategy, str) else strategy["name"]
    cfg = copy.deepcopy(ctx.cfg)
    extra = {} if isinstance(strategy, str) else strategy
    if name == "bilayer":
        cfg["geometry"].update(BILAYER_DEFAULTS["geometry"])
        cfg["impurities"].update(BILAYER_DEFAULTS["impurities"])
    cfg["geometry"].update(extra.get("geometry", {}))
    cfg["impurities"].update(extra.get("impurities", {}))
    return name, Context(cfg)


def obs_collective_distance_scan(ctx, params):
    rows = []
    direction = np.asarray(params["direction"], float)
    step_len = float(np.linalg.norm(direction))
    for strategy in params["strategies"]:
        name, sc = _strategy_context(ctx, strategy)
        base = {"monolayer": ("single", "pair"), "cluster": ("cluster", "cluster_pair"),
                "bilayer": ("bilayer_single", "bilayer_pair"), "free": ("single", "pair")}[name]
        t_max = sc.num["t_max"]
        if name == "free":
            imp1 = sc.impurities(kind=base[0])
            fit1, _ = dynamics.collective_decay(None, imp1, t_max, k0=sc.spec.k0)
        else:
            imp1 = sc.impurities(kind=base[0], symmetric=True)
            fit1, _ = dynamics.collective_decay(sc.array, imp1, t_max)
        for n in params["steps"]:
            d_e = n * step_len
            imps = sc.impurities(kind=base[1], d_e=d_e, direction=list(direction),
                                 symmetric=True)
            arr = None if name == "free" else sc.array
            fit, _ = dynamics.collective_decay(arr, imps, t_max, gamma_ind=fit1.rate,
                                               k0=sc.spec.k0)
            rows.append([name, d_e, fit.ratio_a, fit1.rate / fit.gamma_a, fit.ratio_ind,
                         int(fit.flagged)])
    return (["strategy", "d_e (d)", "gamma_coll (Gamma_a)", "gamma_ind (Gamma_a)",
             "gamma_coll/gamma_ind", "flagged"], rows)


def obs_witness_map(ctx, params):
    rows = []
    for z in axis_values(params["z"]):
        for g in axis_values(params["gamma"]):
            imps = ctx.impurities(z=float(z), gamma=float(g))
            traj, res, _ = ctx.simulate(imps)
            rows.append([z, g, dynamics.nonmarkov_witness(traj), res.value])
    return ["z_over_d", "gamma_a (Gamma0)", "witness", "P_n"], rows


KERNELS = {
    "bands": obs_bands,
    "dos": obs_dos,
    "isofrequency": obs_isofrequency,
    "delta-scan": obs_delta_scan,
    "purcell-z-scan": obs_purcell_z_scan,
    "chi1d-theta-scan": obs_chi1d_theta_scan,
    "emission-pattern": obs_emission_pattern,
    "collective-distance-scan": obs_collective_distance_scan,
    "witness-map": obs_witness_map,
}

OUTPUT_NAMES = {"bands": "band_path"}
