"""SVG figures from result CSVs. Reads files only, never recomputes results."""

from __future__ import annotations

import csv
import math
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

from .collision import SAFETY_COLUMNS  # noqa: E402
from .experiments import (  # noqa: E402
    CONV_COLUMNS,
    EVAL_COLUMNS,
    OPENLOOP_COLUMNS,
    SWEEP_COLUMNS,
)
from .ppo import CURVE_COLUMNS  # noqa: E402

Z95 = 1.959963984540054

# fixed ids and no date stamp so re-rendering gives identical bytes
_RC = {"svg.hashsalt": "mfcswarm", "svg.fonttype": "none"}
_SVG_META = {"Date": None, "Creator": None}


class PlotError(ValueError):
    pass


def read_table(path) -> tuple[list[str], dict[str, list]]:
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"CSV not found: {path}")
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise PlotError(f"{path}: empty file") from None
        cols = {h: [] for h in header}
        for lineno, row in enumerate(reader, start=2):
            if len(row) != len(header):
                raise PlotError(f"{path}:{lineno}: expected {len(header)} fields, got {len(row)}")
            for h, v in zip(header, row):
                cols[h].append(_cell(v))
    return header, cols


def _cell(v: str):
    try:
        return float(v)
    except ValueError:
        return v


def detect_kind(header: list[str]) -> str:
    known = {
        "curve": CURVE_COLUMNS, "eval": EVAL_COLUMNS, "convergence": CONV_COLUMNS,
        "openloop": OPENLOOP_COLUMNS, "sweep": SWEEP_COLUMNS, "safety": SAFETY_COLUMNS,
    }
    for kind, cols in known.items():
        if list(header) == list(cols):
            return kind
    raise PlotError(f"unrecognized CSV header: {','.join(header)}")


def _save(fig, path: Path) -> Path:
    fig.tight_layout()
    fig.savefig(path, format="svg", metadata=_SVG_META)
    plt.close(fig)
    return path


def _plot_curve(cols, stem: str, out: Path) -> list[Path]:
    x = cols["iteration"]
    written = []
    for metric in ("mean_return", "mean_kl", "kl_coeff"):
        fig, ax = plt.subplots(figsize=(5, 3.2))
        y = cols[metric]
        ax.plot(x, y, color="C0")
        if metric == "mean_return":
            lo = [m - s for m, s in zip(y, cols["std_return"])]
            hi = [m + s for m, s in zip(y, cols["std_return"])]
            ax.fill_between(x, lo, hi, color="C0", alpha=0.25, linewidth=0)
        if metric == "kl_coeff":
            ax.set_yscale("log")
        ax.set_xlabel("iteration")
        ax.set_ylabel(metric.replace("_", " "))
        written.append(_save(fig, out / f"{stem}_{metric}.svg"))
    return written


def _band(ax, x, mean, lo, hi, color, label):
    ax.plot(x, mean, marker="o", color=color, label=label)
    ax.fill_between(x, lo, hi, color=color, alpha=0.25, linewidth=0)


def _plot_eval(cols, stem, out):
    fig, ax = plt.subplots(figsize=(5, 3.2))
    _band(ax, cols["n_agents"], cols["mean_return"], cols["ci_low"], cols["ci_high"], "C0", "return")
    ax.set_xlabel("N")
    ax.set_ylabel("episode return")
    return [_save(fig, out / f"{stem}.svg")]


def _plot_convergence(cols, stem, out):
    fig, ax = plt.subplots(figsize=(5, 3.2))
    ts = sorted(set(cols["t"]))
    for i, t in enumerate(ts):
        idx = [k for k, v in enumerate(cols["t"]) if v == t]
        pick = lambda c: [cols[c][k] for k in idx]  # noqa: E731
        lo = [max(v, 1e-12) for v in pick("ci_low")]
        _band(ax, pick("n_agents"), pick("mean_gap"), lo, pick("ci_high"), f"C{i}", f"t={int(t)}")
    ax.set_xscale("log")
    ax.set_yscale("log")
    ax.set_xlabel("N")
    ax.set_ylabel("mean |reward gap|")
    ax.legend()
    return [_save(fig, out / f"{stem}.svg")]


def _plot_openloop(cols, stem, out):
    fig, ax = plt.subplots(figsize=(5, 3.2))
    n = cols["n_agents"]
    _band(ax, n, cols["closed_mean"], cols["closed_ci_low"], cols["closed_ci_high"], "C0", "closed loop")
    _band(ax, n, cols["open_mean"], cols["open_ci_low"], cols["open_ci_high"], "C1", "open loop")
    ax.set_xlabel("N")
    ax.set_ylabel("episode return")
    ax.legend()
    return [_save(fig, out / f"{stem}.svg")]


def _plot_sweep(cols, stem, out):
    written = []
    ns = sorted(set(cols["n_agents"]))
    for metric, label in (("mean_return", "episode return"), ("mean_min_distance", "min distance")):
        fig, ax = plt.subplots(figsize=(5, 3.2))
        for i, n in enumerate(ns):
            rows = [k for k, v in enumerate(cols["n_agents"]) if v == n]
            apf = sorted((cols["c_rep"][k], k) for k in rows if cols["mode"][k] == "apf")
            xs = [c for c, _ in apf]
            ys = [cols[metric][k] for _, k in apf]
            if metric == "mean_return":
                _band(ax, xs, ys, [cols["ci_low"][k] for _, k in apf],
                      [cols["ci_high"][k] for _, k in apf], f"C{i}", f"N={int(n)}")
            else:
                ax.plot(xs, ys, marker="o", color=f"C{i}", label=f"N={int(n)}")
            for k in rows:
                if cols["mode"][k] == "plain":
                    ax.axhline(cols[metric][k], color=f"C{i}", linestyle="--", linewidth=1)
        ax.set_xscale("log")
        ax.set_xlabel("c_rep")
        ax.set_ylabel(label)
        ax.legend()
        written.append(_save(fig, out / f"{stem}_{metric}.svg"))
    return written


def _plot_safety(cols, stem, out):
    fig, ax = plt.subplots(figsize=(5, 3.2))
    groups = sorted({(n, c) for n, c in zip(cols["n_agents"], cols["c_rep"])},
                    key=lambda g: (g[0], -1.0 if math.isnan(g[1]) else g[1]))
    data = [[d for n, c, d in zip(cols["n_agents"], cols["c_rep"], cols["min_distance"])
             if n == g[0] and (c == g[1] or (math.isnan(c) and math.isnan(g[1])))] for g in groups]
    ax.boxplot(data)
    ax.set_xticks(range(1, len(groups) + 1),
                  [f"N={int(n)}\n{'plain' if math.isnan(c) else c}" for n, c in groups], fontsize=7)
    ax.set_ylabel("episode min distance")
    return [_save(fig, out / f"{stem}.svg")]


_PLOTTERS = {
    "curve": _plot_curve, "eval": _plot_eval, "convergence": _plot_convergence,
    "openloop": _plot_openloop, "sweep": _plot_sweep, "safety": _plot_safety,
}


def plot_file(path, out_dir=None) -> list[Path]:
    path = Path(path)
    header, cols = read_table(path)
    kind = detect_kind(header)
    if not cols[header[0]]:
        raise PlotError(f"{path}: no data rows")
    out = Path(out_dir) if out_dir else path.parent
    out.mkdir(parents=True, exist_ok=True)
    with plt.rc_context(_RC):
        return _PLOTTERS[kind](cols, path.stem, out)


def plot_files(paths, out_dir=None) -> list[Path]:
    missing = [str(p) for p in paths if not Path(p).is_file()]
    if missing:
        raise FileNotFoundError(f"CSV not found: {', '.join(missing)}")
    written = []
    for p in paths:
        written.extend(plot_file(p, out_dir))
    return written
