"""Figure data series (CSV) and optional PNG renderings from run manifests.

Outputs, all written under one directory:

* ``pareto.csv``: bootstrap Pareto fronts per task, method and metric with
  columns ``task, method, metric, cost, median, p5, p95``.
* ``hvr.csv``: hypervolume ratio per task, metric and method, plus the
  per-method mean over all (task, metric) pairs under ``task = ALL``.
* ``transport.csv``: CDS fronts split by transport (SDE vs inverse map).
* ``scatter_<task>_<method>.csv``: 2-D sample clouds.
* ``t0_sweep.csv``: round trips, GCB and W2 against ``t0``.

CSV content depends only on the manifests and sample files, so re-running
on the same inputs reproduces the files byte for byte.
"""

from __future__ import annotations

import csv
import logging
from collections import defaultdict
from pathlib import Path

import numpy as np

from ..metrics import bootstrap_front, hypervolume_ratio
from .io import read_samples

__all__ = ["EmptyInputError", "emit_figures", "write_t0_series", "METRICS"]

log = logging.getLogger(__name__)

METRICS = ("w2", "mmd", "tv", "mae")
SCATTER_BUDGET = 2000


class EmptyInputError(ValueError):
    """Nothing to plot."""


def _fmt(v) -> str:
    if isinstance(v, (float, np.floating)):
        return format(float(v), ".10g")
    return str(v)


def _write_csv(path: Path, header, rows):
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for r in rows:
            w.writerow([_fmt(v) for v in r])
    return path


def _usable(manifests):
    return [m for m in manifests if m.get("status") in ("ok", "flagged") and m.get("metrics")]


def _replicates(mans, metric):
    """Configuration key -> list of (cost, value), keyed by label and budget."""
    reps = defaultdict(list)
    for m in mans:
        v = m["metrics"].get(metric)
        if v is None or not np.isfinite(v):
            continue
        reps[(m["label"], m["budget"])].append((float(m["evaluations"]), float(v)))
    return {k: reps[k] for k in sorted(reps)}


def _fronts(groups: dict, metric: str, iterations: int, seed: int):
    """Bootstrap front per group on a grid shared by all groups."""
    reps = {g: _replicates(ms, metric) for g, ms in groups.items()}
    reps = {g: r for g, r in reps.items() if r}
    if not reps:
        return {}, None
    grid = np.unique(np.concatenate([[c for vals in r.values() for c, _ in vals] for r in reps.values()]))
    return {g: bootstrap_front(r, iterations=iterations, seed=seed, grid=grid) for g, r in reps.items()}, grid


def _config_means(mans, metric):
    pts = [np.mean(np.asarray(v), axis=0) for v in _replicates(mans, metric).values()]
    return np.array(pts) if pts else None


def _available_metrics(mans):
    present = set()
    for m in mans:
        present.update(k for k, v in m["metrics"].items() if v is not None)
    out = [k for k in METRICS if k in present]
    for k in METRICS:
        if k not in present:
            log.warning("metric %r missing from all manifests; omitted", k)
    return out


def emit_figures(manifests, out_dir, *, t0_rows=None, sample_root=None, plots: bool = False,
                 iterations: int = 50, seed: int = 0) -> list[Path]:
    """Write every CSV series derivable from ``manifests`` (and ``t0_rows``)."""
    out_dir = Path(out_dir)
    mans = _usable(manifests or [])
    if not mans and not t0_rows:
        raise EmptyInputError("no usable manifests")
    written = []
    if mans:
        metrics = _available_metrics(mans)
        by_task = defaultdict(list)
        for m in mans:
            by_task[m["task"]].append(m)
        pareto_rows, hvr_rows, transport_rows = [], [], []
        hvr_all = defaultdict(list)
        fronts_for_plot = {}
        for task in sorted(by_task):
            tm = by_task[task]
            by_method = defaultdict(list)
            for m in tm:
                by_method[m["method"]].append(m)
            by_method = {k: by_method[k] for k in sorted(by_method)}
            for metric in metrics:
                fronts, grid = _fronts(by_method, metric, iterations, seed)
                for method, rec in fronts.items():
                    for c, md, lo, hi in zip(grid, rec.median, rec.lower, rec.upper):
                        pareto_rows.append((task, method, metric, int(c), md, lo, hi))
                fronts_for_plot[(task, metric)] = (grid, fronts)
                pts = {k: _config_means(v, metric) for k, v in by_method.items()}
                pts = {k: v for k, v in pts.items() if v is not None}
                if pts:
                    for method, h in hypervolume_ratio(pts).items():
                        hvr_rows.append((task, metric, method, h))
                        hvr_all[method].append(h)
            cds = [m for m in tm if m["method"] == "CDS"]
            by_tr = defaultdict(list)
            for m in cds:
                by_tr[str(m["config"]["params"].get("transport", "SDE")).upper()].append(m)
            if len(by_tr) > 1:
                fronts, grid = _fronts({k: by_tr[k] for k in sorted(by_tr)}, "w2", iterations, seed)
                for tr, rec in fronts.items():
                    for c, md, lo, hi in zip(grid, rec.median, rec.lower, rec.upper):
                        transport_rows.append((task, tr, "w2", int(c), md, lo, hi))
        header = ("task", "method", "metric", "cost", "median", "p5", "p95")
        written.append(_write_csv(out_dir / "pareto.csv", header, pareto_rows))
        for method in sorted(hvr_all):
            hvr_rows.append(("ALL", "mean", method, float(np.mean(hvr_all[method]))))
        written.append(_write_csv(out_dir / "hvr.csv", ("task", "metric", "method", "hvr"), hvr_rows))
        if transport_rows:
            written.append(_write_csv(out_dir / "transport.csv",
                                      ("task", "transport", "metric", "cost", "median", "p5", "p95"),
                                      transport_rows))
        written += _scatter(mans, out_dir, sample_root)
        if plots:
            written += _plot_fronts(fronts_for_plot, out_dir)
    if t0_rows:
        written.append(write_t0_series(t0_rows, out_dir / "t0_sweep.csv"))
        if plots:
            written.append(_plot_t0(t0_rows, out_dir / "t0_sweep.png"))
    if plots:
        written += _plot_scatter(out_dir)
    return written


def _scatter(mans, out_dir: Path, sample_root):
    """One sample cloud per 2-D (task, method): budget nearest 2000, first config, replicate 0."""
    if sample_root is None:
        return []
    sample_root = Path(sample_root)
    cands = defaultdict(list)
    for m in mans:
        if m["replicate"] == 0 and "file" in m.get("samples", {}):
            cands[(m["task"], m["method"])].append(m)
    out = []
    for (task, method) in sorted(cands):
        ms = sorted(cands[(task, method)], key=lambda m: (abs(m["budget"] - SCATTER_BUDGET), m["budget"], m["label"]))
        path = sample_root / ms[0]["samples"]["file"]
        if not path.exists():
            log.warning("sample file %s missing; scatter skipped", path)
            continue
        x = read_samples(path)
        if x.ndim != 2 or x.shape[1] != 2:
            continue
        out.append(_write_csv(out_dir / f"scatter_{task}_{method}.csv", ("x", "y"), x.tolist()))
    return out


def write_t0_series(rows, path) -> Path:
    cols = ("task", "seed", "t0", "n_replicas", "round_trips", "gcb", "gcb_main", "w2")
    rows = sorted(rows, key=lambda r: (r["task"], r["seed"], -r["t0"]))
    return _write_csv(Path(path), cols, [[r.get(c, float("nan")) for c in cols] for r in rows])


# -- optional renderings -------------------------------------------------------

def _pyplot():
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    return plt


def _plot_fronts(fronts_for_plot, out_dir: Path):
    plt = _pyplot()
    out = []
    for (task, metric), (grid, fronts) in sorted(fronts_for_plot.items()):
        if not fronts:
            continue
        fig, ax = plt.subplots(figsize=(4.5, 3.2))
        for method, rec in fronts.items():
            ok = np.isfinite(rec.median)
            ax.step(grid[ok], rec.median[ok], where="post", label=method)
            ax.fill_between(grid[ok], rec.lower[ok], rec.upper[ok], step="post", alpha=0.2)
        ax.set_xscale("log")
        ax.set_xlabel("density evaluations")
        ax.set_ylabel(metric)
        ax.set_title(task)
        ax.legend(fontsize=7)
        fig.tight_layout()
        p = out_dir / f"pareto_{task}_{metric}.png"
        fig.savefig(p, dpi=120)
        plt.close(fig)
        out.append(p)
    return out


def _plot_t0(rows, path: Path):
    plt = _pyplot()
    fig, axes = plt.subplots(1, 2, figsize=(7, 3))
    for seed in sorted({r["seed"] for r in rows}):
        rs = sorted((r for r in rows if r["seed"] == seed), key=lambda r: r["t0"])
        t = [r["t0"] for r in rs]
        axes[0].plot(t, [r["round_trips"] for r in rs], "o-", label=f"seed {seed}")
        axes[1].plot(t, [r["gcb"] for r in rs], "o-")
    for ax, lab in zip(axes, ("round trips", "GCB")):
        ax.set_xscale("log")
        ax.set_xlabel("t0")
        ax.set_ylabel(lab)
    axes[0].legend(fontsize=7)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path


def _plot_scatter(out_dir: Path):
    plt = _pyplot()
    out = []
    for p in sorted(out_dir.glob("scatter_*.csv")):
        xy = np.loadtxt(p, delimiter=",", skiprows=1, ndmin=2)
        fig, ax = plt.subplots(figsize=(3.5, 3.5))
        ax.scatter(xy[:, 0], xy[:, 1], s=2)
        ax.set_title(p.stem.replace("scatter_", ""))
        fig.tight_layout()
        png = p.with_suffix(".png")
        fig.savefig(png, dpi=120)
        plt.close(fig)
        out.append(png)
    return out
