"""Command-line entry point: ``neuralgde <command> ...``.

Commands share one run directory layout::

    <output_dir>/
        config.ini            resolved configuration
        manifest.json         config hash, seeds, status and artifact hashes
        data/seed<s>/         generated datasets
        metrics/<model>_seed<s>.csv
        checkpoints/<model>_seed<s>.json
        mape.csv | results.csv | predictions.csv | samples.csv | attention.csv
        plots/*.svg
"""

from __future__ import annotations

import argparse
import hashlib
import json
import sys
import traceback
from dataclasses import dataclass, field
from importlib.metadata import PackageNotFoundError, version
from pathlib import Path

import numpy as np

from . import experiments as ex
from .config import ConfigError, ExperimentConfig, apply_environment, default_config, load_config, validate, write_config
from .datagen import ParticleParams, simulate_multi_particle, write_stream
from .models import load_checkpoint, save_checkpoint
from .numerics import RngStream
from .plots import emit_plots
from .solvers import SolverConfig
from .training import MetricsLog, ScheduleSpec, forecast_metrics

MANIFEST_FORMAT = "neuralgde-run"
SPECIES = ("LacI", "TetR", "cI", "mLacI", "mTetR", "mcI")


def _package_version() -> str:
    try:
        return version("neuralgde")
    except PackageNotFoundError:
        return "unknown"


def _sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


@dataclass
class RunArtifacts:
    run_dir: Path
    metrics: list = field(default_factory=list)
    tables: list = field(default_factory=list)
    plots: list = field(default_factory=list)
    checkpoints: list = field(default_factory=list)
    manifest: Path | None = None


class Manifest:
    """Run manifest; written as ``running`` up front and ``complete`` or ``failed`` at the end."""

    def __init__(self, run_dir: Path, cfg: ExperimentConfig, stages):
        self.path = run_dir / "manifest.json"
        self.run_dir = run_dir
        self.doc = {
            "format": MANIFEST_FORMAT,
            "package_version": _package_version(),
            "experiment": cfg.experiment,
            "config": cfg.values,
            "config_hash": cfg.digest(),
            "seeds": cfg.seeds,
            "stages": list(stages),
            "status": "running",
            "artifacts": {},
        }
        self.write()

    def write(self):
        self.path.write_text(json.dumps(self.doc, indent=1, sort_keys=True))

    def finish(self, status: str, error: str | None = None):
        self.doc["status"] = status
        if error:
            self.doc["error"] = error
        files = sorted(p for p in self.run_dir.rglob("*") if p.is_file() and p != self.path)
        self.doc["artifacts"] = {str(p.relative_to(self.run_dir)): _sha256(p) for p in files}
        self.write()


def config_from_manifest(path) -> ExperimentConfig:
    doc = json.loads(Path(path).read_text())
    if doc.get("format") != MANIFEST_FORMAT:
        raise ConfigError(f"{path} is not a run manifest")
    cfg = default_config(doc["experiment"])
    for section, keys in doc["config"].items():
        cfg.values[section].update(keys)
    cfg.source = str(path)
    validate(cfg)
    return cfg


def resolve_config(path=None, experiment: str | None = None, overrides: dict | None = None) -> ExperimentConfig:
    """Load an INI file, a run manifest, or the preset for ``experiment``."""
    if path is not None:
        if str(path).endswith(".json"):
            cfg = config_from_manifest(path)
            apply_environment(cfg)
        else:
            return load_config(path, overrides)
    elif experiment is not None:
        cfg = default_config(experiment)
        apply_environment(cfg)
    else:
        raise ConfigError("give a config file or an experiment name")
    for dotted, raw in (overrides or {}).items():
        cfg.set(dotted, raw)
    validate(cfg)
    return cfg


def _schedule(cfg: ExperimentConfig) -> ScheduleSpec:
    t = cfg["training"]
    return ScheduleSpec(t["schedule"], t["lr"], t["lr_min"], t["T0"], t["peak_epoch"], max(t["epochs"], 1))


def _metrics_log(cfg, run_dir: Path, model: str, seed: int) -> MetricsLog:
    return MetricsLog(run_dir / "metrics" / f"{model}_seed{seed}.csv", cfg["experiment"]["wall_clock"])


def _ckpt_path(run_dir: Path, model: str, seed: int) -> Path:
    return run_dir / "checkpoints" / f"{model}_seed{seed}.json"


def _need(path: Path) -> Path:
    if not path.is_file():
        raise FileNotFoundError(f"missing artifact {path}; run the train stage first")
    return path


# =========================================================================== particles


def _particle_data(cfg, seed):
    d = cfg["data"]
    return ex.particle_data(seed, d["n"], d["T"], d["dt"], d["stride"], d["alpha"], d["beta"], d["r"])


def _particles_generate(cfg, run_dir, art):
    d = cfg["data"]
    for seed in cfg.seeds:
        p = ParticleParams(d["n"], d["alpha"], d["beta"], d["r"])
        roll = simulate_multi_particle(p, d["T"], d["dt"], RngStream(seed, ex.DATA_STREAM))
        write_stream(run_dir / "data" / f"seed{seed}", roll.stream(), ["x", "y", "vx", "vy"],
                     {"experiment": "particles", "seed": seed})


def _particles_train(cfg, run_dir, art):
    m, t = cfg["model"], cfg["training"]
    for seed in cfg.seeds:
        data = _particle_data(cfg, seed)
        for kind in m["models"]:
            log = _metrics_log(cfg, run_dir, kind, seed)
            run = ex.train_particle_model(kind, data, seed, t["epochs"], t["lr"], tuple(m["ks"]), log, m["hidden"],
                                          cfg["data"]["sample_every"], m["baseline_hidden"], _schedule(cfg))
            pred = ex.particle_model(kind, data.states.shape[1], data.step, data.radius, m["hidden"],
                                     m["baseline_hidden"])
            path = _ckpt_path(run_dir, kind, seed)
            path.parent.mkdir(parents=True, exist_ok=True)
            save_checkpoint(path, pred.model, run.params, {"seed": seed}, {"kind": kind})
            art.metrics.append(log.path)
            art.checkpoints.append(path)


def _particles_eval(cfg, run_dir, art):
    m = cfg["model"]
    ks = list(m["ks"])
    rows, pred_rows = [], []
    for seed in cfg.seeds:
        data = _particle_data(cfg, seed)
        nominal = data.nominal("test")
        for kind in m["models"]:
            _, params, _, _ = load_checkpoint(_need(_ckpt_path(run_dir, kind, seed)))
            pred = ex.particle_model(kind, data.states.shape[1], data.step, data.radius, m["hidden"],
                                     m["baseline_hidden"])
            for k in ks:
                idx, yh, y = ex.particle_extrapolation(pred, params, nominal, k)
                rep = forecast_metrics(y.reshape(len(y), -1), yh.reshape(len(yh), -1))
                rows.append([kind, seed, k, rep.mape_conventional, rep.mape, rep.rmse])
                if seed == cfg.seeds[0] and k == max(ks):
                    for i, a, b in zip(idx, y[:, 0, 0], yh[:, 0, 0]):
                        pred_rows.append([kind, "particle0_x", float(i * data.step), float(a), float(b)])
    ex.write_rows(run_dir / "mape.csv", ["model", "seed", "k", "mape", "mape_signed", "rmse"], rows)
    ex.write_rows(run_dir / "predictions.csv", ["model", "series", "index", "target", "prediction"], pred_rows)
    art.tables += [run_dir / "mape.csv", run_dir / "predictions.csv"]


# =========================================================================== hybrid forecasting


def _hybrid_data(cfg, seed, keep):
    d = cfg["data"]
    return ex.traffic_data(seed, keep, d["n_stations"], d["days"], d["base_dt"], d["window"],
                           time_unit=d["time_unit"])


def _hybrid_cfg(cfg) -> SolverConfig:
    return SolverConfig("dopri5", rtol=cfg["model"]["rtol"], atol=cfg["model"]["atol"])


def _hybrid_tag(kind, keep):
    return f"{kind}_keep{int(round(100 * keep))}"


def _hybrid_generate(cfg, run_dir, art):
    for seed in cfg.seeds:
        for keep in cfg["data"]["keep_probs"]:
            data = _hybrid_data(cfg, seed, keep)
            write_stream(run_dir / "data" / f"seed{seed}" / f"keep{int(round(100 * keep))}", data.stream, ["speed"],
                         {"experiment": "hybrid_forecast", "seed": seed, "keep_prob": keep})


def _hybrid_train(cfg, run_dir, art):
    m, t = cfg["model"], cfg["training"]
    for seed in cfg.seeds:
        for keep in cfg["data"]["keep_probs"]:
            data = _hybrid_data(cfg, seed, keep)
            for kind in m["models"]:
                tag = _hybrid_tag(kind, keep)
                log = _metrics_log(cfg, run_dir, tag, seed)
                params, _, _ = ex.train_hybrid_model(kind, data, seed, t["epochs"], t["lr"], t["T0"], log,
                                                     _hybrid_cfg(cfg), m["nz"], _schedule(cfg))
                model = ex.hybrid_model(kind, data.train.features.shape[-1], m["nz"])
                path = _ckpt_path(run_dir, tag, seed)
                path.parent.mkdir(parents=True, exist_ok=True)
                save_checkpoint(path, model, params, {"seed": seed}, {"kind": kind, "keep_prob": keep})
                art.metrics.append(log.path)
                art.checkpoints.append(path)


def _hybrid_eval(cfg, run_dir, art):
    rows, pred_rows = [], []
    for seed in cfg.seeds:
        for keep in cfg["data"]["keep_probs"]:
            data = _hybrid_data(cfg, seed, keep)
            for kind in cfg["model"]["models"]:
                model, params, _, _ = load_checkpoint(_need(_ckpt_path(run_dir, _hybrid_tag(kind, keep), seed)))
                y, yh = ex.hybrid_predictions(model, kind, params, data, _hybrid_cfg(cfg))
                rep = forecast_metrics(y, yh)
                rows.append([kind, keep, seed, rep.mape_conventional, rep.mape, rep.rmse])
                if seed == cfg.seeds[0] and keep == cfg["data"]["keep_probs"][0]:
                    t_q = data.test.query_times * data.time_unit
                    for i in range(len(y)):
                        pred_rows.append([kind, "station0", float(t_q[i]), float(y[i, 0]), float(yh[i, 0])])
    ex.write_rows(run_dir / "results.csv", ["model", "keep_prob", "seed", "mape", "mape_signed", "rmse"], rows)
    ex.write_rows(run_dir / "predictions.csv", ["model", "series", "index", "target", "prediction"], pred_rows)
    art.tables += [run_dir / "results.csv", run_dir / "predictions.csv"]


# =========================================================================== repressilator


def _rep_data(cfg, seed):
    d = cfg["data"]
    data = ex.repressilator_data(seed, d["n_train"] + d["n_test"], d["T"], d["tau"], d["every"], d["time_scale"],
                                 n_fit=d["n_train"])
    n = d["n_train"]
    return data.select(slice(0, n)), data.select(slice(n, None))


def _rep_model(cfg):
    m = cfg["model"]
    return ex.latent_model(m["hidden"], m["sigma_obs"], m["diffusion_scale"])


def _rep_generate(cfg, run_dir, art):
    d = cfg["data"]
    for seed in cfg.seeds:
        train, test = _rep_data(cfg, seed)
        rows = []
        for split, data in (("train", train), ("test", test)):
            counts = data.values * (data.hi - data.lo) + data.lo
            for j in range(counts.shape[0]):
                for i, t in enumerate(data.times):
                    rows.append([split, j, float(t), *[float(c) for c in counts[j, i]]])
        ex.write_rows(run_dir / "data" / f"seed{seed}" / "counts.csv", ["split", "trajectory", "t", *SPECIES], rows)
        meta = {"experiment": "repressilator", "seed": seed, "tau": d["tau"], "every": d["every"]}
        (run_dir / "data" / f"seed{seed}" / "manifest.json").write_text(json.dumps(meta, indent=1, sort_keys=True))


def _rep_train(cfg, run_dir, art):
    t = cfg["training"]
    solver = SolverConfig("euler_heun", h=cfg["model"]["h"])
    for seed in cfg.seeds:
        train, _ = _rep_data(cfg, seed)
        log = _metrics_log(cfg, run_dir, "latent_gsde", seed)
        model, params, _ = ex.train_latent_model(train, seed, t["epochs"], t["lr"], log, solver, _rep_model(cfg),
                                                 _schedule(cfg))
        path = _ckpt_path(run_dir, "latent_gsde", seed)
        path.parent.mkdir(parents=True, exist_ok=True)
        save_checkpoint(path, model, params, {"seed": seed})
        art.metrics.append(log.path)
        art.checkpoints.append(path)


def _rep_eval(cfg, run_dir, art):
    solver = SolverConfig("euler_heun", h=cfg["model"]["h"])
    rows, sample_rows, att_rows = [], [], []
    for seed in cfg.seeds:
        _, test = _rep_data(cfg, seed)
        model, params, _, _ = load_checkpoint(_need(_ckpt_path(run_dir, "latent_gsde", seed)))
        first = seed == cfg.seeds[0]
        samples, traces = ex.latent_samples(model, params, test, cfg["model"]["n_samples"], seed, solver,
                                            record_attention=first)
        target = test.future()
        err = float(np.mean((samples.mean(axis=0) - target) ** 2))
        rows.append(["latent_gsde", seed, err, float(np.sqrt(err))])
        if first:
            t_future = test.times[test.split_index :]
            lo, mean, hi = samples[:, 0].min(axis=0), samples[:, 0].mean(axis=0), samples[:, 0].max(axis=0)
            for i, t in enumerate(t_future):
                for s, name in enumerate(SPECIES):
                    sample_rows.append([float(t), name, lo[i, s], mean[i, s], hi[i, s], target[0, i, s]])
            att_rows = _attention_rows(model.graph.adjacency, traces)
    ex.write_rows(run_dir / "results.csv", ["model", "seed", "mse", "rmse"], rows)
    ex.write_rows(run_dir / "samples.csv", ["t", "species", "lo", "mean", "hi", "target"], sample_rows)
    ex.write_rows(run_dir / "attention.csv", ["t", "node", "source", "target", "weight"], att_rows)
    art.tables += [run_dir / "results.csv", run_dir / "samples.csv", run_dir / "attention.csv"]


def _attention_rows(adjacency, traces, nodes=range(6)):
    """Weights of every GAT edge entering or leaving each species node (first trajectory).

    ``alpha[i, j]`` is the weight node ``i`` places on neighbor ``j``, i.e. the edge ``j -> i``.
    """
    rows = []
    seen = set()
    for t, _, alpha in traces:
        if t in seen:
            continue
        seen.add(t)
        a = np.asarray(alpha)[0]
        for v in nodes:
            for u in np.nonzero(adjacency[v])[0]:
                rows.append([t, v, int(u), v, float(a[v, u])])
                rows.append([t, v, v, int(u), float(a[u, v])])
    return rows


# =========================================================================== oversmoothing


def _over_generate(cfg, run_dir, art):
    pass


def _over_train(cfg, run_dir, art):
    m, t = cfg["model"], cfg["training"]
    rows = []
    for seed in cfg.seeds:
        for span in m["spans"]:
            tag = f"gcde_span{span:g}"
            log = _metrics_log(cfg, run_dir, tag, seed)
            acc, _ = ex.train_node_classifier(seed, span, t["epochs"], t["lr"], m["hidden"], cfg["data"]["n_per_block"],
                                              m["h"], log=log, schedule=_schedule(cfg))
            rows.append([span, seed, acc])
            art.metrics.append(log.path)
    ex.write_rows(run_dir / "results.csv", ["span", "seed", "accuracy"], rows)
    art.tables.append(run_dir / "results.csv")


def _over_eval(cfg, run_dir, art):
    _need(run_dir / "results.csv")


RUNNERS = {
    "particles": (_particles_generate, _particles_train, _particles_eval),
    "hybrid_forecast": (_hybrid_generate, _hybrid_train, _hybrid_eval),
    "repressilator": (_rep_generate, _rep_train, _rep_eval),
    "oversmoothing": (_over_generate, _over_train, _over_eval),
}
STAGES = ("generate", "train", "eval", "plot")


def run_experiment(config, overrides: dict | None = None, stages=STAGES) -> RunArtifacts:
    """Run the requested stages for a config path, manifest path or :class:`ExperimentConfig`."""
    cfg = config if isinstance(config, ExperimentConfig) else resolve_config(config, overrides=overrides)
    unknown = [s for s in stages if s not in STAGES]
    if unknown:
        raise ValueError(f"unknown stages {unknown}")
    run_dir = cfg.output_dir
    run_dir.mkdir(parents=True, exist_ok=True)
    write_config(cfg, run_dir / "config.ini")
    art = RunArtifacts(run_dir)
    manifest = Manifest(run_dir, cfg, stages)
    art.manifest = manifest.path
    generate, train, evaluate = RUNNERS[cfg.experiment]
    try:
        for stage in stages:
            if stage == "generate":
                generate(cfg, run_dir, art)
            elif stage == "train":
                train(cfg, run_dir, art)
            elif stage == "eval":
                evaluate(cfg, run_dir, art)
            else:
                art.plots = emit_plots(run_dir, cfg.experiment)
    except BaseException as exc:
        manifest.finish("failed", f"{type(exc).__name__}: {exc}")
        raise
    manifest.finish("complete")
    return art


# =========================================================================== argument parsing


def _overrides(pairs) -> dict:
    out = {}
    for item in pairs or []:
        if "=" not in item:
            raise ConfigError(f"--set expects section.key=value, got {item!r}")
        k, v = item.split("=", 1)
        out[k.strip()] = v.strip()
    return out


def _add_common(p, positional_experiment=False):
    if positional_experiment:
        p.add_argument("experiment", choices=list(RUNNERS))
    else:
        p.add_argument("--config", help="INI config file or run manifest.json")
        p.add_argument("--experiment", choices=list(RUNNERS), help="use the preset for this experiment")
    p.add_argument("--seed", type=int, action="append", help="seed (repeatable); replaces the config seed list")
    p.add_argument("--output-dir", help="run directory")
    p.add_argument("--epochs", type=int, help="training epochs")
    p.add_argument("--set", action="append", metavar="SECTION.KEY=VALUE", help="override any config value")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="neuralgde", description="Neural graph differential equation experiments.")
    sub = parser.add_subparsers(dest="command", required=True)
    for name, help_text in (("generate", "write datasets"), ("train", "train every model and seed"),
                            ("eval", "evaluate checkpoints and write result tables")):
        _add_common(sub.add_parser(name, help=help_text))
    p = sub.add_parser("plot", help="render SVG plots from a run directory")
    p.add_argument("run_dir")
    p = sub.add_parser("gradcheck", help="compare adjoint and backprop gradients with finite differences")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--tol", type=float, default=1e-4)
    _add_common(sub.add_parser("reproduce", help="generate, train, evaluate and plot a preset"),
                positional_experiment=True)
    return parser


def _config_from_args(args) -> ExperimentConfig:
    overrides = _overrides(args.set)
    if args.seed:
        overrides["experiment.seeds"] = " ".join(str(s) for s in args.seed)
    if args.output_dir:
        overrides["experiment.output_dir"] = args.output_dir
    if args.epochs is not None:
        overrides["training.epochs"] = str(args.epochs)
    path = getattr(args, "config", None)
    return resolve_config(path, args.experiment, overrides)


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        if args.command == "plot":
            run_dir = Path(args.run_dir)
            manifest = json.loads((run_dir / "manifest.json").read_text())
            for path in emit_plots(run_dir, manifest["experiment"]):
                print(path)
            return 0
        if args.command == "gradcheck":
            results = ex.gradient_checks(args.seed)
            a, b = ex.hybrid_equivalence(args.seed)
            results["hybrid_adjoint_vs_backprop"] = ex.relative_error(a, b)
            ok = True
            for name, err in results.items():
                status = "ok" if err < args.tol else "FAIL"
                ok &= err < args.tol
                print(f"{name:28s} rel_err={err:.3e} {status}")
            return 0 if ok else 1
        cfg = _config_from_args(args)
        stages = STAGES if args.command == "reproduce" else (args.command,)
        art = run_experiment(cfg, stages=stages)
        print(f"{cfg.experiment}: {art.run_dir} ({', '.join(stages)})")
        return 0
    except (ConfigError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except Exception:
        traceback.print_exc()
        return 1


if __name__ == "__main__":
    sys.exit(main())
