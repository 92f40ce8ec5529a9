"""Execute a resolved config: sweep points on a worker pool, CSV tables and a JSON manifest."""

import copy
import csv
import json
import math
import os
import time
import traceback
import warnings
from concurrent.futures import ThreadPoolExecutor
from importlib import metadata
from pathlib import Path

import numpy as np

from .config import COMMON_KEYS, observable_config, set_path
from .observables import KERNELS, OUTPUT_NAMES, Context

THREADS_ENV = "QMETASURF_THREADS"


def code_version():
    try:
        return metadata.version("artifact")
    except metadata.PackageNotFoundError:
        return "unknown"


def default_threads():
    try:
        return max(1, int(os.environ.get(THREADS_ENV, "1")))
    except ValueError:
        return 1


def format_cell(v):
    """Locale-independent, fixed-precision cell text (``.10g`` floats)."""
    if isinstance(v, (bool, np.bool_)):
        return str(int(v))
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    if isinstance(v, (float, np.floating)):
        v = float(v)
        if math.isnan(v):
            return "nan"
        if math.isinf(v):
            return "inf" if v > 0 else "-inf"
        return format(v, ".10g")
    if v is None:
        return ""
    return str(v)


def write_csv(path, header, rows):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for r in rows:
            w.writerow([format_cell(v) for v in r])


def output_stem(obs_type, used):
    stem = OUTPUT_NAMES.get(obs_type, obs_type.replace("-", "_"))
    n = used.get(stem, 0) + 1
    used[stem] = n
    return stem if n == 1 else f"{stem}_{n}"


def point_config(cfg, point):
    c = copy.deepcopy(cfg)
    for path, val in point:
        set_path(c, path, val, create=True)
    return c


def _run_point(obs, cfg, point):
    params = {k: v for k, v in obs.items() if k not in COMMON_KEYS}
    header, rows = KERNELS[obs["type"]](Context(point_config(cfg, point)), params)
    return header, rows


def run_observable(obs, cfg, threads):
    """Rows of one observable over all its sweep points, prefixed by the sweep columns."""
    cfg, points = observable_config(cfg, obs)
    sweep_cols = [p for p, _ in points[0]]
    with ThreadPoolExecutor(max_workers=max(1, min(threads, len(points)))) as pool:
        results = list(pool.map(lambda pt: _run_point(obs, cfg, pt), points))
    header = sweep_cols + results[0][0]
    rows = []
    for pt, (_, r) in zip(points, results):
        prefix = [v for _, v in pt]
        rows.extend(prefix + list(row) for row in r)
    return header, rows


def run(cfg, out_dir=None, threads=None):
    """Run every observable of a validated, resolved config and write the manifest last.

    Returns the manifest dict; ``manifest["status"]`` is ``"ok"`` or ``"failed"``.
    """
    out = Path(out_dir if out_dir is not None else cfg["output_dir"])
    out.mkdir(parents=True, exist_ok=True)
    threads = default_threads() if threads is None else max(1, int(threads))
    manifest = {"name": cfg.get("name"), "version": code_version(), "config": cfg,
                "threads": threads, "outputs": {}, "timings": {}, "warnings": [],
                "failures": {}}
    used = {}
    t_all = time.perf_counter()
    for obs in cfg["observables"]:
        stem = output_stem(obs["type"], used)
        t0 = time.perf_counter()
        with warnings.catch_warnings(record=True) as caught:
            warnings.simplefilter("always")
            try:
                header, rows = run_observable(obs, cfg, threads)
                path = out / f"{stem}.csv"
                write_csv(path, header, rows)
                manifest["outputs"][stem] = [path.name]
            except Exception as exc:  # recorded, siblings continue
                manifest["failures"][stem] = {
                    "error": f"{type(exc).__name__}: {exc}",
                    "traceback": traceback.format_exc(limit=5)}
        manifest["timings"][stem] = round(time.perf_counter() - t0, 3)
        seen = set()
        for w in caught:
            msg = f"{stem}: {w.category.__name__}: {w.message}"
            if msg not in seen:
                seen.add(msg)
                manifest["warnings"].append(msg)
    manifest["timings"]["total"] = round(time.perf_counter() - t_all, 3)
    manifest["status"] = "failed" if manifest["failures"] else "ok"
    with open(out / "manifest.json", "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True, default=str)
        fh.write("\n")
    return manifest
