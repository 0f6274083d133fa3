"""SVG plots rendered from the CSV artifacts of a run directory."""

from __future__ import annotations

import csv
from pathlib import Path

import numpy as np

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

# metadata pinned so identical data renders to identical bytes
_SVG_META = {"Date": None, "Creator": None}
plt.rcParams["svg.hashsalt"] = "neuralgde"


class MissingArtifact(FileNotFoundError):
    pass


def _rows(path) -> list[dict]:
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def _save(fig, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path, format="svg", metadata=_SVG_META)
    plt.close(fig)
    return path


def mape_bands(rows) -> dict:
    """``{model: (ks, mean, std)}`` from rows with ``model, seed, k, mape``."""
    by: dict = {}
    for r in rows:
        by.setdefault(r["model"], {}).setdefault(int(r["k"]), []).append(float(r["mape"]))
    out = {}
    for model, per_k in by.items():
        ks = np.array(sorted(per_k))
        vals = [np.array(per_k[k]) for k in ks]
        out[model] = (ks, np.array([v.mean() for v in vals]), np.array([v.std() for v in vals]))
    return out


def plot_mape_vs_k(csv_path, out_path) -> Path:
    """Mean MAPE against extrapolation steps with a one-std band across seeds."""
    fig, ax = plt.subplots(figsize=(5, 3.5))
    for model, (ks, mu, sd) in sorted(mape_bands(_rows(csv_path)).items()):
        (line,) = ax.plot(ks, mu, marker="o", label=model)
        ax.fill_between(ks, mu - sd, mu + sd, color=line.get_color(), alpha=0.25, linewidth=0)
    ax.set_xlabel("extrapolation steps")
    ax.set_ylabel("MAPE (%)")
    ax.set_yscale("log")
    ax.legend()
    fig.tight_layout()
    return _save(fig, out_path)


def plot_predictions(csv_path, out_path, series: str | None = None) -> Path:
    """Prediction and target against index for each model (rows ``model, series, index, target, prediction``)."""
    rows = _rows(csv_path)
    if series is None and rows:
        series = rows[0]["series"]
    rows = [r for r in rows if r["series"] == series]
    fig, ax = plt.subplots(figsize=(6, 3.5))
    models = sorted({r["model"] for r in rows})
    target_drawn = False
    for model in models:
        sel = [r for r in rows if r["model"] == model]
        idx = np.array([float(r["index"]) for r in sel])
        if not target_drawn:
            ax.plot(idx, [float(r["target"]) for r in sel], color="black", linewidth=1.5, label="target")
            target_drawn = True
        ax.plot(idx, [float(r["prediction"]) for r in sel], linestyle="--", label=model)
    ax.set_xlabel("time")
    ax.set_ylabel(f"series {series}")
    ax.legend()
    fig.tight_layout()
    return _save(fig, out_path)


def plot_sample_bands(csv_path, out_path) -> Path:
    """Min-max sample band, sample mean and target per species (rows ``t, species, lo, mean, hi, target``)."""
    rows = _rows(csv_path)
    species = list(dict.fromkeys(r["species"] for r in rows))
    fig, axes = plt.subplots(len(species), 1, figsize=(6, 1.6 * len(species)), sharex=True, squeeze=False)
    for ax, name in zip(axes[:, 0], species):
        sel = [r for r in rows if r["species"] == name]
        t = np.array([float(r["t"]) for r in sel])
        col = {k: np.array([float(r[k]) for r in sel]) for k in ("lo", "mean", "hi", "target")}
        ax.fill_between(t, col["lo"], col["hi"], alpha=0.3, linewidth=0)
        ax.plot(t, col["mean"], label="sample mean")
        ax.plot(t, col["target"], color="black", linewidth=1, label="data")
        ax.set_ylabel(name)
    axes[0, 0].legend(loc="upper right", fontsize="small")
    axes[-1, 0].set_xlabel("time (s)")
    fig.tight_layout()
    return _save(fig, out_path)


def attention_traces(rows, node_names=None) -> dict:
    """``{node: {(src, dst): (t, w)}}`` from rows ``t, node, source, target, weight``."""
    node_names = node_names or {}
    out = {}
    for r in rows:
        node = node_names.get(int(r["node"]), int(r["node"]))
        t, w = out.setdefault(node, {}).setdefault((int(r["source"]), int(r["target"])), ([], []))
        t.append(float(r["t"]))
        w.append(float(r["weight"]))
    return {node: {k: (np.array(t), np.array(w)) for k, (t, w) in edges.items()} for node, edges in out.items()}


def plot_attention(csv_path, out_path, node_names=None) -> Path:
    """One panel per species node; one line per incident attention edge."""
    traces = attention_traces(_rows(csv_path), node_names)
    fig, axes = plt.subplots(len(traces), 1, figsize=(6, 1.6 * len(traces)), sharex=True, squeeze=False)
    for ax, (node, edges) in zip(axes[:, 0], traces.items()):
        for (src, dst), (t, w) in sorted(edges.items()):
            ax.plot(t, w, linewidth=1, label=f"{src}->{dst}")
        ax.set_ylabel(str(node))
        ax.legend(fontsize="xx-small", ncol=2, loc="upper right")
    axes[-1, 0].set_xlabel("model time")
    fig.tight_layout()
    return _save(fig, out_path)


# artifact name -> (plot name, renderer)
PLOTS = {
    "particles": {"mape.csv": ("mape_vs_k.svg", plot_mape_vs_k),
                  "predictions.csv": ("predictions.svg", plot_predictions)},
    "hybrid_forecast": {"predictions.csv": ("predictions.svg", plot_predictions)},
    "repressilator": {"samples.csv": ("samples.svg", plot_sample_bands),
                      "attention.csv": ("attention.svg", plot_attention)},
    "oversmoothing": {},
}


def emit_plots(run_dir, experiment: str) -> list[Path]:
    """Render every plot for ``experiment`` from CSVs in ``run_dir``."""
    run_dir = Path(run_dir)
    wanted = PLOTS[experiment]
    missing = [name for name in wanted if not (run_dir / name).is_file()]
    if missing:
        raise MissingArtifact(f"{run_dir}: missing {', '.join(missing)}")
    out = []
    for name, (svg, fn) in wanted.items():
        out.append(fn(run_dir / name, run_dir / "plots" / svg))
    return out
