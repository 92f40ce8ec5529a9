"""Experiment configuration: defaults, loading, dot-path overrides and validation."""

import copy
import itertools
import json
from importlib import resources

import numpy as np

from .. import lattice
from ..errors import DegenerateSeparationError, GeometryError, InvalidProfileError

SCHEMA_VERSION = 1

OBSERVABLES = ("bands", "dos", "isofrequency", "delta-scan", "purcell-z-scan",
               "chi1d-theta-scan", "emission-pattern", "collective-distance-scan",
               "witness-map")

DEFAULTS = {
    "schema_version": SCHEMA_VERSION,
    "name": "experiment",
    "description": "",
    "budget_minutes": 30,
    "geometry": {
        "kind": "square",
        "n_l": 30,
        "d_over_lambda0": 0.3,
        "polarization": [0.0, 1.0, 0.0],
        "layer_gap": 0.1,
        "shift": [0.5, 0.5],
        "absorber": {"gamma_max": 10.0, "width": 10.0},
    },
    "impurities": {
        "kind": "single",
        "site": "plaquette",
        "z": 0.0,
        "polarization": [0.7071067811865476, 0.7071067811865476, 0.0],
        "gamma": 0.002,
        "detuning": "X",
    },
    "observables": [],
    "sweep": [],
    "numerics": {
        "a_ho": 0.1,
        "shells": 12,
        "band_resolution": 128,
        "path_points": 300,
        "dos_bins": 200,
        "contour_resolution": 301,
        "semi_resolution": 160,
        "field_method": "auto",
        "broadening": "delta",
        "t_max": None,
        "n_t": 600,
        "chi_radius": 5.0,
        "n_circles": 5,
        "theta_max_mode": "argmax",
    },
    "output_dir": "out",
    "seed": 0,
}

# per-observable parameters and their defaults
OBSERVABLE_PARAMS = {
    "bands": {"points": None},
    "dos": {},
    "isofrequency": {"point": "X", "branch": 0},
    "delta-scan": {"values": {"range": [0.2, 0.4], "steps": 21}, "completion": "light_cone"},
    "purcell-z-scan": {"z": {"range": [0.0, 1.0], "steps": 11}, "semi_analytical": True},
    "chi1d-theta-scan": {"theta": {"range": [0.0, 1.5707963267948966], "steps": 7}},
    "emission-pattern": {"t": None},
    "collective-distance-scan": {"steps": [1, 2, 3, 4, 5, 6], "direction": [1.0, -1.0],
                                 "strategies": ["monolayer"]},
    "witness-map": {"z": {"range": [0.1, 1.0], "steps": 10},
                    "gamma": {"values": [0.002, 0.02]}},
}

STRATEGIES = ("monolayer", "cluster", "bilayer", "free")

# keys every observable accepts: its own sweep axes (replacing the global ones)
# and geometry/impurity sections merged over the top-level ones
COMMON_KEYS = ("type", "sweep", "geometry", "impurities")


class ConfigError(ValueError):
    """Validation failure; ``violations`` lists ``(path, message)`` pairs."""

    def __init__(self, violations):
        self.violations = list(violations)
        super().__init__("; ".join(f"{p}: {m}" for p, m in self.violations))


def _merge(base, extra):
    out = copy.deepcopy(base)
    for key, val in extra.items():
        if isinstance(val, dict) and isinstance(out.get(key), dict):
            out[key] = _merge(out[key], val)
        else:
            out[key] = copy.deepcopy(val)
    return out


def parse_value(text):
    """Override values are JSON where possible, plain strings otherwise."""
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def get_path(cfg, path):
    node = cfg
    for part in path.split("."):
        if isinstance(node, list):
            node = node[int(part)]
        elif isinstance(node, dict) and part in node:
            node = node[part]
        else:
            raise KeyError(path)
    return node


def set_path(cfg, path, value, create=False):
    parts = path.split(".")
    node = cfg
    for part in parts[:-1]:
        if isinstance(node, list):
            node = node[int(part)]
        else:
            if part not in node:
                if not create:
                    raise KeyError(path)
                node[part] = {}
            node = node[part]
    last = parts[-1]
    if isinstance(node, list):
        node[int(last)] = value
    else:
        if last not in node and not create:
            raise KeyError(path)
        node[last] = value


def apply_overrides(cfg, overrides):
    """Apply ``key=value`` strings (dot paths into the config)."""
    cfg = copy.deepcopy(cfg)
    for item in overrides or ():
        if "=" not in item:
            raise ConfigError([(item, "override must look like key=value")])
        key, val = item.split("=", 1)
        set_path(cfg, key.strip(), parse_value(val), create=True)
    return cfg


def load_raw(path):
    with open(path, encoding="utf-8") as fh:
        return json.load(fh)


def resolve(raw):
    """Fill defaults (including per-observable parameters)."""
    cfg = _merge(DEFAULTS, raw)
    if "impurities" in raw:
        # an explicit impurity section replaces the default one except for shared keys
        cfg["impurities"] = _merge({k: DEFAULTS["impurities"][k]
                                    for k in ("polarization", "gamma", "detuning")},
                                   raw["impurities"])
    obs = []
    for o in cfg.get("observables", []):
        if isinstance(o, str):
            o = {"type": o}
        params = OBSERVABLE_PARAMS.get(o.get("type"), {})
        obs.append(_merge(params, o))
    cfg["observables"] = obs
    return cfg


def axis_values(spec):
    """Values of a range specification: ``{"values": [...]}`` or ``{"range": [a, b], "steps": n}``."""
    if isinstance(spec, (list, tuple)):
        return list(spec)
    if isinstance(spec, dict):
        if "values" in spec:
            return list(spec["values"])
        if "range" in spec:
            lo, hi = spec["range"]
            n = int(spec.get("steps", 2))
            return [float(v) for v in np.linspace(lo, hi, n)]
    if isinstance(spec, (int, float)):
        return [spec]
    raise ValueError(f"cannot interpret axis {spec!r}")


def sweep_points(cfg):
    """Cartesian product of the sweep axes as lists of ``(path, value)``."""
    axes = []
    for ax in cfg.get("sweep") or []:
        axes.append([(ax["parameter"], v) for v in axis_values(ax)])
    if not axes:
        return [[]]
    return [list(p) for p in itertools.product(*axes)]


def observable_config(cfg, obs):
    """Config seen by one observable and its sweep points."""
    c = copy.deepcopy(cfg)
    for key in ("geometry", "impurities"):
        if key in obs:
            c[key] = _merge(c[key], obs[key])
    sweep = obs["sweep"] if "sweep" in obs else cfg.get("sweep", [])
    c["sweep"] = sweep
    c["observables"] = [obs]
    return c, sweep_points(c)


def _check_axis(viol, path, spec):
    try:
        vals = axis_values(spec)
    except (ValueError, TypeError) as exc:
        viol.append((path, str(exc)))
        return
    if not vals:
        viol.append((path, "range is empty"))
    if isinstance(spec, dict) and "range" in spec and int(spec.get("steps", 2)) < 1:
        viol.append((path + ".steps", "steps must be >= 1"))


def _check_geometry(viol, g, prefix="geometry"):
    if g.get("kind") not in lattice.KINDS:
        viol.append((f"{prefix}.kind", f"must be one of {', '.join(lattice.KINDS)}"))
    n_l = g.get("n_l")
    if not isinstance(n_l, int) or n_l < 2:
        viol.append((f"{prefix}.n_l", "must be an integer >= 2"))
    dl = g.get("d_over_lambda0")
    if not isinstance(dl, (int, float)) or not dl > 0:
        viol.append((f"{prefix}.d_over_lambda0", "must be positive"))
    try:
        p = polarization(g.get("polarization"))
        if p.shape != (3,) or not np.all(np.isfinite(p)):
            raise ValueError
    except (ValueError, TypeError):
        viol.append((f"{prefix}.polarization", "must be a non-zero 3-vector"))
    if not isinstance(g.get("layer_gap"), (int, float)) or not g["layer_gap"] > 0:
        viol.append((f"{prefix}.layer_gap", "must be positive"))
    ab = g.get("absorber")
    if ab is not None:
        if not isinstance(ab, dict):
            viol.append((f"{prefix}.absorber", "must be an object or null"))
        else:
            if not isinstance(ab.get("gamma_max"), (int, float)) or ab["gamma_max"] < 0:
                viol.append((f"{prefix}.absorber.gamma_max", "must be >= 0"))
            if not isinstance(ab.get("width"), (int, float)) or not ab["width"] > 0:
                viol.append((f"{prefix}.absorber.width", "must be positive"))


def polarization(value):
    """Polarization from a 3-list of reals or ``[[re, im], ...]`` pairs, normalised."""
    if isinstance(value, list) and value and isinstance(value[0], list):
        p = np.array([complex(a, b) for a, b in value])
    else:
        p = np.asarray(value, dtype=complex)
    norm = np.linalg.norm(p)
    if norm == 0:
        raise ValueError("polarization must be non-zero")
    return p / norm


def geometry_spec(g):
    return lattice.GeometrySpec(kind=g["kind"], n_l=int(g["n_l"]),
                                d_over_lambda0=float(g["d_over_lambda0"]),
                                polarization=tuple(polarization(g["polarization"])),
                                layer_gap=float(g["layer_gap"]), shift=tuple(g["shift"]))


def build_array(g):
    spec = geometry_spec(g)
    arr = lattice.build_lattice(spec)
    ab = g.get("absorber")
    if ab and ab.get("gamma_max", 0) > 0:
        arr = lattice.apply_absorbing_boundary(arr, gamma_max=float(ab["gamma_max"]),
                                               width=float(ab["width"]))
    return arr


def validate(cfg):
    """Return a list of ``(path, message)`` violations for a resolved config."""
    viol = []
    if cfg.get("schema_version") != SCHEMA_VERSION:
        viol.append(("schema_version", f"expected {SCHEMA_VERSION}"))
    unknown = set(cfg) - set(DEFAULTS)
    for key in sorted(unknown):
        viol.append((key, "unknown top-level key"))
    _check_geometry(viol, cfg["geometry"])
    num = cfg["numerics"]
    for key in sorted(set(num) - set(DEFAULTS["numerics"])):
        viol.append((f"numerics.{key}", "unknown parameter"))
    for key in ("a_ho",):
        if not isinstance(num.get(key), (int, float)) or not num[key] > 0:
            viol.append((f"numerics.{key}", "must be positive"))
    for key in ("shells", "band_resolution", "path_points", "dos_bins", "contour_resolution",
                "semi_resolution", "n_t", "n_circles"):
        if not isinstance(num.get(key), int) or num[key] < 1:
            viol.append((f"numerics.{key}", "must be a positive integer"))
    if num.get("t_max") is not None and not (isinstance(num["t_max"], (int, float))
                                             and num["t_max"] > 0):
        viol.append(("numerics.t_max", "must be positive or null"))
    imp = cfg["impurities"]
    det = imp.get("detuning")
    if not (isinstance(det, (int, float)) or isinstance(det, str)):
        viol.append(("impurities.detuning", "must be a number or a symmetry point name"))
    if not isinstance(imp.get("gamma"), (int, float)) or not imp["gamma"] > 0:
        viol.append(("impurities.gamma", "must be positive"))
    for i, o in enumerate(cfg["observables"]):
        path = f"observables.{i}"
        typ = o.get("type")
        if typ not in OBSERVABLES:
            viol.append((f"{path}.type", f"unknown observable {typ!r}"))
            continue
        for key in sorted(set(o) - set(OBSERVABLE_PARAMS[typ]) - set(COMMON_KEYS)):
            viol.append((f"{path}.{key}", "unknown parameter"))
        for key in ("values", "z", "theta", "gamma"):
            if key in OBSERVABLE_PARAMS[typ] and key in o and o[key] is not None:
                _check_axis(viol, f"{path}.{key}", o[key])
        if typ == "collective-distance-scan":
            for s in o.get("strategies", []):
                s = s.get("name") if isinstance(s, dict) else s
                if s not in STRATEGIES:
                    viol.append((f"{path}.strategies", f"unknown strategy {s!r}"))
            if not o.get("steps"):
                viol.append((f"{path}.steps", "range is empty"))
        for key in ("geometry", "impurities"):
            if key in o and not isinstance(o[key], dict):
                viol.append((f"{path}.{key}", "must be an object"))
        if "sweep" in o:
            _check_sweep(viol, cfg, o["sweep"], f"{path}.sweep")
    _check_sweep(viol, cfg, cfg.get("sweep", []), "sweep")
    if not viol:
        viol.extend(_check_points(cfg))
    return viol


def _check_sweep(viol, cfg, sweep, prefix):
    if not isinstance(sweep, list):
        viol.append((prefix, "must be a list of axes"))
        return
    for i, ax in enumerate(sweep):
        path = f"{prefix}.{i}"
        par = ax.get("parameter") if isinstance(ax, dict) else None
        if not par:
            viol.append((f"{path}.parameter", "missing"))
            continue
        try:
            get_path(cfg, par)
        except (KeyError, IndexError, ValueError):
            if not par.startswith("impurities."):
                viol.append((f"{path}.parameter", f"{par} does not exist"))
        _check_axis(viol, path, ax)


def _check_points(cfg):
    """Build every sweep point's geometry and impurities to catch range and separation errors."""
    viol = []
    seen = set()
    jobs = [observable_config(cfg, o) for o in cfg["observables"]]
    if not jobs:
        c = copy.deepcopy(cfg)
        jobs = [(c, sweep_points(c))]
    for base, points in jobs:
        for point in points:
            c = copy.deepcopy(base)
            for path, val in point:
                set_path(c, path, val, create=True)
            needs_imps = any(o["type"] not in ("bands", "dos", "isofrequency", "delta-scan")
                             for o in c["observables"])
            key = json.dumps([c["geometry"], c["impurities"] if needs_imps else None],
                             sort_keys=True, default=str)
            if key in seen:
                continue
            seen.add(key)
            where = "" if not point else " at " + ", ".join(f"{p}={v}" for p, v in point)
            g_viol = []
            _check_geometry(g_viol, c["geometry"])
            if g_viol:
                viol.extend((p, m + where) for p, m in g_viol)
                continue
            if not needs_imps:
                continue
            try:
                arr = build_array(c["geometry"])
                lattice.place_impurities(arr, impurity_config(c["impurities"], arr.spec,
                                                              c["numerics"]["a_ho"]))
            except DegenerateSeparationError as exc:
                viol.append(("impurities", f"degenerate separation: {exc}{where}"))
            except (GeometryError, InvalidProfileError) as exc:
                viol.append(("geometry", f"{exc}{where}"))
            except (KeyError, ValueError) as exc:
                viol.append(("impurities", f"{exc}{where}"))
    return viol


def impurity_config(imp, spec, a_ho=0.1):
    """Translate the config section into :func:`lattice.place_impurities` arguments."""
    from .. import bands
    out = dict(imp)
    det = out.get("detuning", 0.0)
    if isinstance(det, str):
        out["detuning"] = bands.mode_energy(spec, det, a_ho)
    out["polarization"] = tuple(polarization(out.get("polarization", [1, 1, 0])))
    return out


def load(path, overrides=None):
    """Read, override and resolve a config; raise :class:`ConfigError` on violations."""
    raw = apply_overrides(load_raw(path), overrides)
    cfg = resolve(raw)
    viol = validate(cfg)
    if viol:
        raise ConfigError(viol)
    return cfg


def preset_names():
    files = resources.files("qmetasurf.presets")
    return sorted(p.name[:-5] for p in files.iterdir() if p.name.endswith(".json"))


def preset_path(name):
    return resources.files("qmetasurf.presets") / f"{name}.json"


def catalog():
    """``[(name, description)]`` for the bundled presets."""
    out = []
    for name in preset_names():
        with preset_path(name).open(encoding="utf-8") as fh:
            out.append((name, json.load(fh).get("description", "")))
    return out
