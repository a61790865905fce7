"""Experiment configs, run orchestration and result export (CSV / SVG / JSON)."""

from __future__ import annotations

import copy
import csv
import hashlib
import io
import json
import logging
import os
import shutil
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from itertools import combinations
from pathlib import Path

import numpy as np

from . import __version__
from .checkpoint import load_checkpoint, save_checkpoint
from .connectivity import (
    DEFAULT_GRID, METRICS, STATIONARITY_THRESHOLD, barrier_curve, cross_block_matrix,
    layer_quadratic_forms, layerwise_barrier_curve, layerwise_predicted, max_barrier, predicted_barrier,
    second_order_curve, sibling_geometry,
)
from .data import load_dataset
from .errors import CheckpointError, ConfigError, EmptyOutputError, PartialRunError
from .net import Network
from .params import LayerMask
from .toyscape import TOY_GRID, ToyLandscape, toy_barrier, toy_predicted_barrier, toy_trace
from .trainer import (
    ForkedRun, ForkSpec, TrainConfig, Trajectory, canonical_json, child_config, run_manifest,
    sha256_hex, thread_count, train,
)

log = logging.getLogger(__name__)

STAGES = ("train", "fork", "barrier", "predict", "layerwise", "geometry", "evolution",
          "compare", "toy")
ANALYSIS_DEFAULTS = {
    "grid": DEFAULT_GRID,
    "metrics": ["loss"],
    "predict": True,
    "threshold": STATIONARITY_THRESHOLD,
    "layerwise": [],
    "layer_sets": [],
    "block_endpoint": "average",
    "geometry": ["origin"],
    "evolution": None,
    "svg": False,
}


# ---------------------------------------------------------------------- config

def _network_from(desc: dict, in_dim=1, out_dim=2) -> Network:
    if "mlp" in desc:
        m = desc["mlp"]
        return Network.mlp(in_dim, m["hidden"], out_dim, m.get("activation", "relu"),
                           desc.get("loss", "cross_entropy"))
    return Network(desc["input_shape"], desc["layers"], desc.get("loss", "cross_entropy"))


@dataclass
class ExperimentConfig:
    name: str = "experiment"
    dataset: dict | None = None
    network: dict | None = None
    train: TrainConfig | None = None
    forks: list = field(default_factory=list)
    analysis: dict = field(default_factory=lambda: dict(ANALYSIS_DEFAULTS))
    toy: dict | None = None
    output_dir: str | None = None
    allow_equal_seeds: bool = False

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        d = copy.deepcopy(d)
        known = {"name", "dataset", "network", "train", "forks", "analysis", "toy",
                 "output_dir", "allow_equal_seeds"}
        extra = set(d) - known
        if extra:
            raise ConfigError(f"unknown config keys {sorted(extra)}")
        analysis = {**ANALYSIS_DEFAULTS, **(d.get("analysis") or {})}
        unknown = set(analysis) - set(ANALYSIS_DEFAULTS)
        if unknown:
            raise ConfigError(f"unknown analysis keys {sorted(unknown)}")
        toy = d.get("toy")
        if toy is not None:
            toy = {"grid_size": TOY_GRID, "pairs": None, "scales": None,
                   "trace": None, **toy}
        cfg = cls(
            name=str(d.get("name", "experiment")),
            dataset=d.get("dataset"),
            network=d.get("network"),
            train=TrainConfig(**d["train"]) if d.get("train") is not None else None,
            forks=[ForkSpec(**f) for f in d.get("forks", [])],
            analysis=analysis,
            toy=toy,
            output_dir=d.get("output_dir"),
            allow_equal_seeds=bool(d.get("allow_equal_seeds", False)),
        )
        cfg.validate()
        return cfg

    @classmethod
    def load(cls, path) -> "ExperimentConfig":
        text = str(path)
        if text.startswith("preset:"):
            from .presets import preset
            try:
                return cls.from_dict(preset(text.split(":", 1)[1]))
            except KeyError:
                raise ConfigError(f"unknown preset {text!r}")
        with open(path) as fh:
            return cls.from_dict(json.load(fh))

    @property
    def trains(self) -> bool:
        return self.dataset is not None

    def validate(self):
        if self.trains:
            if self.network is None or self.train is None:
                raise ConfigError("a dataset needs both network and train sections")
            net = _network_from(self.network)
            a = self.analysis
            names = []
            if a["layerwise"] != "all":
                names += list(a["layerwise"])
            for s in a["layer_sets"]:
                if not s:
                    raise ConfigError("layer sets must be nonempty")
                names += list(s)
            LayerMask(frozenset(names), net.layout)
            for f in self.forks:
                if f.fork_epoch > self.train.epochs:
                    raise ConfigError(f"fork epoch {f.fork_epoch} exceeds parent epochs {self.train.epochs}")
                if f.child_seeds[0] == f.child_seeds[1] and not self.allow_equal_seeds:
                    raise ConfigError("equal child seeds need allow_equal_seeds")
            bad = set(a["metrics"]) - set(METRICS)
            if bad:
                raise ConfigError(f"unknown metrics {sorted(bad)}")
            if a["block_endpoint"] not in ("average", "theta1", "theta2"):
                raise ConfigError("block_endpoint must be average, theta1 or theta2")
            if not set(a["geometry"]) <= {"origin", "fork_point"}:
                raise ConfigError("geometry bases must be origin and/or fork_point")
        elif self.forks:
            raise ConfigError("forks need a dataset")
        if self.toy is not None:
            ToyLandscape(tuple(self.toy["minima"]), self.toy.get("scales"))
        if not self.trains and self.toy is None:
            raise ConfigError("config has neither a dataset nor a toy section")

    def to_dict(self) -> dict:
        return {
            "name": self.name,
            "dataset": self.dataset,
            "network": self.network,
            "train": self.train.to_json() if self.train else None,
            "forks": [f.to_json() for f in self.forks],
            "analysis": self.analysis,
            "toy": self.toy,
            "allow_equal_seeds": self.allow_equal_seeds,
        }

    def canonical(self) -> str:
        # rendering and output location never change results, so they stay out of the hash
        d = self.to_dict()
        d["analysis"] = {k: v for k, v in d["analysis"].items() if k != "svg"}
        return canonical_json(d)

    @property
    def hash(self) -> str:
        return sha256_hex(self.canonical())[:16]

    def with_seed(self, seed: int) -> "ExperimentConfig":
        d = self.to_dict()
        if d["train"] is not None:
            d["train"]["seed"] = int(seed)
        d["output_dir"] = self.output_dir
        return ExperimentConfig.from_dict(d)


# ------------------------------------------------------------------ CSV / SVG

def _fmt(v):
    if v is None:
        return ""
    if isinstance(v, (bool, np.bool_)):
        return str(bool(v)).lower()
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    if isinstance(v, (np.integer,)):
        return str(int(v))
    return str(v)


def csv_text(rows: list[dict], columns: list[str]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(columns)
    for r in rows:
        w.writerow([_fmt(r.get(c)) for c in columns])
    return buf.getvalue()


def write_text(path, text: str):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(text)
    os.replace(tmp, path)


def write_csv(path, rows, columns):
    write_text(path, csv_text(rows, columns))


def render_small_multiples(series: dict, title: str = "", ylabel: str = "") -> str:
    """One panel per key, each a polyline of (x, y) pairs; fixed styling."""
    keys = list(series)
    if not keys:
        raise EmptyOutputError("nothing to render")
    cols = min(4, len(keys))
    rows = (len(keys) + cols - 1) // cols
    pw, ph, pad = 180, 120, 28
    width, height = cols * (pw + pad) + pad, rows * (ph + pad) + pad + 20
    ys = [y for k in keys for _, y in series[k]]
    lo, hi = min(ys), max(ys)
    if hi == lo:
        hi = lo + 1.0
    out = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" '
           f'font-family="monospace" font-size="10">',
           f'<text x="{pad}" y="14">{title} {ylabel}</text>']
    for n, k in enumerate(keys):
        x0 = pad + (n % cols) * (pw + pad)
        y0 = 20 + pad + (n // cols) * (ph + pad)
        out.append(f'<rect x="{x0}" y="{y0}" width="{pw}" height="{ph}" fill="none" stroke="#999"/>')
        out.append(f'<text x="{x0 + 4}" y="{y0 + 12}">{k}</text>')
        pts = " ".join(f"{x0 + x * pw:.2f},{y0 + ph - (y - lo) / (hi - lo) * ph:.2f}"
                       for x, y in series[k])
        out.append(f'<polyline points="{pts}" fill="none" stroke="#1f5fa8" stroke-width="1.5"/>')
    out.append("</svg>")
    return "\n".join(out) + "\n"


# ----------------------------------------------------------- analysis exports

def export_curve_evolution(net, run: ForkedRun, data, stride: int, metric_kind="error_rate",
                           grid=DEFAULT_GRID, run_hash: str = "") -> list[dict]:
    """Barrier curves between the in-training siblings at every ``stride``-th child epoch.

    The first and last child epochs are always sampled.
    """
    epochs = run.child_epochs()
    if stride < 1 or not epochs or stride > epochs[-1] - epochs[0]:
        raise EmptyOutputError(f"stride {stride} exceeds the {epochs[-1] - epochs[0] if epochs else 0} "
                               "available child epochs")
    picked = [t for t in epochs if (t - epochs[0]) % stride == 0]
    if picked[-1] != epochs[-1]:
        picked.append(epochs[-1])
    rows = []
    for t in picked:
        c = barrier_curve(net, run.child1_checkpoints[t], run.child2_checkpoints[t], data, grid,
                          metric_kind)
        for a, v, b in zip(c.alphas, c.segment_values, c.barrier):
            rows.append({"run_hash": run_hash, "fork_epoch": run.fork.fork_epoch, "child_epoch": t,
                         "metric": metric_kind, "alpha": a, "value": v, "barrier": b})
    return rows


EVOLUTION_COLUMNS = ["run_hash", "fork_epoch", "child_epoch", "metric", "alpha", "value", "barrier"]


def evolution_svg(rows: list[dict]) -> str:
    series = {}
    for r in rows:
        series.setdefault(f"t={r['child_epoch']}", []).append((r["alpha"], r["value"]))
    fe = rows[0]["fork_epoch"] if rows else "?"
    return render_small_multiples(series, f"fork {fe}", rows[0]["metric"] if rows else "")


COMPARE_COLUMNS = ["run_hash", "fork_epoch", "actual_max_barrier", "actual_argmax",
                   "predicted_half", "q1", "q2", "grad_norm_1", "grad_norm_2", "distance",
                   "nonstationary"]


def compare_predicted_actual(net, runs, data, grid=DEFAULT_GRID,
                             threshold=STATIONARITY_THRESHOLD) -> list[dict]:
    """One row per fork: grid max of the loss barrier vs the a = 1/2 prediction."""
    rows = []
    for run in runs:
        t1, t2 = run.finals
        alpha, actual = max_barrier(barrier_curve(net, t1, t2, data, grid, "loss"))
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            p = predicted_barrier(net, t1, t2, data, grid, threshold)
        rows.append({"run_hash": run.manifest.get("config_hash", ""),
                     "fork_epoch": run.fork.fork_epoch, "actual_max_barrier": actual,
                     "actual_argmax": alpha, "predicted_half": p.at_half, "q1": p.q1, "q2": p.q2,
                     "grad_norm_1": p.grad_norms[0], "grad_norm_2": p.grad_norms[1],
                     "distance": p.distance, "nonstationary": bool(p.warning_flags)})
    rows.sort(key=lambda r: r["fork_epoch"])
    return rows


# ------------------------------------------------------------------ the runner

def _file_hash(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


class Experiment:
    """Drives one config inside one output directory.

    A directory holding files but no ``manifest.json`` is a partial run and is
    refused unless ``resume`` (reuse valid checkpoints) or ``overwrite``.
    """

    def __init__(self, config: ExperimentConfig, out, resume=False, overwrite=False):
        self.config = config
        self.out = Path(out)
        self.resume = resume
        self.overwrite = overwrite
        self._data = None
        self._net = None
        self._parent = None
        self._runs = {}
        self.notes = []

    # -- directory protocol

    def _prepare(self):
        out = self.out
        if out.exists() and any(out.iterdir()):
            manifest = out / "manifest.json"
            if self.overwrite:
                shutil.rmtree(out)
            elif manifest.exists():
                prior = json.loads(manifest.read_text())
                if prior.get("config_hash") != self.config.hash:
                    raise PartialRunError(
                        f"{out} holds a run of a different config ({prior.get('config_hash')}); "
                        "use overwrite")
                self.resume = True
                manifest.unlink()
            elif not self.resume:
                raise PartialRunError(f"{out} holds a partial run; use resume or overwrite")
        out.mkdir(parents=True, exist_ok=True)
        write_text(out / "config.json", json.dumps(self.config.to_dict(), indent=2, sort_keys=True) + "\n")

    # -- lazily built pieces

    @property
    def data(self):
        if self._data is None:
            self._data = load_dataset(self.config.dataset)
        return self._data

    @property
    def net(self) -> Network:
        if self._net is None:
            n_classes = int(self.data.labels.max()) + 1 if self.data.labels.ndim == 1 else self.data.labels.shape[1]
            in_dim = int(np.prod(self.data.inputs.shape[1:]))
            self._net = _network_from(self.config.network, in_dim, n_classes)
        return self._net

    def _load_traj(self, folder: Path, keys) -> Trajectory | None:
        if not self.resume:
            return None
        traj = Trajectory()
        try:
            for k in keys:
                traj[k] = load_checkpoint(folder / f"e{k:04d}.ckpt", self.net.layout)
        except (OSError, CheckpointError) as exc:
            log.info("retraining %s: %s", folder, exc)
            return None
        traj.final_loss, g = self.net.loss_and_gradient(traj[max(traj)], self.data)
        traj.final_grad_norm = g.norm()
        return traj

    def _save_traj(self, folder: Path, traj) -> dict:
        folder.mkdir(parents=True, exist_ok=True)
        return {str(k): save_checkpoint(folder / f"e{k:04d}.ckpt", traj[k]) for k in sorted(traj)}

    def parent(self) -> Trajectory:
        if self._parent is None:
            cfg = self.config.train
            folder = self.out / "parent"
            traj = self._load_traj(folder, range(cfg.epochs + 1))
            if traj is None:
                log.info("training parent for %d epochs", cfg.epochs)
                traj = train(self.net, self.net.init_params(cfg.seed), self.data, cfg)
                self._save_traj(folder, traj)
            self._parent = traj
        return self._parent

    def _fork_dir(self, i: int, fork: ForkSpec) -> Path:
        return self.out / f"fork{i}_e{fork.fork_epoch:03d}"

    def _child_keys(self, fork):
        return sorted({0, fork.child_epochs} | set(range(0, fork.child_epochs + 1, fork.checkpoint_every)))

    def fork_run(self, i: int) -> ForkedRun:
        if i in self._runs:
            return self._runs[i]
        fork = self.config.forks[i]
        cfg = self.config.train
        parent = self.parent()
        folder = self._fork_dir(i, fork)
        keys = self._child_keys(fork)
        c1 = self._load_traj(folder / "child1", keys)
        c2 = self._load_traj(folder / "child2", keys)
        start = parent[fork.fork_epoch]
        if c1 is None or c2 is None:
            log.info("training fork %d (epoch %d)", i, fork.fork_epoch)
            c1, c2 = (train(self.net, start, self.data, child_config(cfg, fork, s),
                            checkpoint_every=fork.checkpoint_every) for s in fork.child_seeds)
        hashes = {"child1": self._save_traj(folder / "child1", c1),
                  "child2": self._save_traj(folder / "child2", c2)}
        parent_ckpts = {e: p for e, p in parent.items() if e <= fork.fork_epoch}
        hashes["parent"] = {str(e): _file_hash(self.out / "parent" / f"e{e:04d}.ckpt")
                            for e in sorted(parent_ckpts)}
        manifest = run_manifest(self.net, self.data, cfg, fork, {
            "final_grad_norms": {"child1": c1.final_grad_norm, "child2": c2.final_grad_norm},
            "final_losses": {"child1": c1.final_loss, "child2": c2.final_loss},
            "checkpoint_hashes": hashes,
            "directory": folder.name,
        })
        write_text(folder / "fork_manifest.json", json.dumps(manifest, indent=2, sort_keys=True) + "\n")
        run = ForkedRun(parent_ckpts, dict(c1), dict(c2), cfg, fork, manifest)
        self._runs[i] = run
        return run

    def all_runs(self) -> list[ForkedRun]:
        idx = [i for i in range(len(self.config.forks)) if i not in self._runs]
        if idx:
            self.parent()
            with ThreadPoolExecutor(max_workers=thread_count()) as pool:
                list(pool.map(self.fork_run, idx))
        return [self._runs[i] for i in range(len(self.config.forks))]

    # -- analyses

    def _barrier(self, i, run):
        a = self.config.analysis
        t1, t2 = run.finals
        rows = []
        for metric in a["metrics"]:
            c = barrier_curve(self.net, t1, t2, self.data, a["grid"], metric)
            for al, v, b in zip(c.alphas, c.segment_values, c.barrier):
                rows.append({"run_hash": run.manifest["config_hash"], "fork_epoch": run.fork.fork_epoch,
                             "metric": metric, "alpha": al, "value": v, "barrier": b})
        write_csv(self._fork_dir(i, run.fork) / "barrier.csv", rows,
                  ["run_hash", "fork_epoch", "metric", "alpha", "value", "barrier"])

    def _predict(self, i, run):
        a = self.config.analysis
        t1, t2 = run.finals
        with warnings.catch_warnings(record=True) as caught:
            warnings.simplefilter("always")
            p = predicted_barrier(self.net, t1, t2, self.data, a["grid"], a["threshold"])
        for w in caught:
            self.notes.append(f"fork {i} (epoch {run.fork.fork_epoch}): {w.message}")
        actual = barrier_curve(self.net, t1, t2, self.data, a["grid"], "loss")
        rows = [{"run_hash": run.manifest["config_hash"], "fork_epoch": run.fork.fork_epoch,
                 "alpha": al, "predicted": pv, "actual": av, "q1": p.q1, "q2": p.q2,
                 "distance": p.distance, "nonstationary": bool(p.warning_flags)}
                for al, pv, av in zip(p.alphas, p.predicted, actual.barrier)]
        write_csv(self._fork_dir(i, run.fork) / "predicted.csv", rows,
                  ["run_hash", "fork_epoch", "alpha", "predicted", "actual", "q1", "q2",
                   "distance", "nonstationary"])

    def _layerwise(self, i, run):
        a = self.config.analysis
        net, data = self.net, self.data
        t1, t2 = run.finals
        h = run.manifest["config_hash"]
        names = net.layout.names if a["layerwise"] == "all" else list(a["layerwise"])
        report = cross_block_matrix(net, t1, t2, data, a["block_endpoint"])
        curve_rows, layer_rows = [], []
        for name in names:
            lc = layerwise_barrier_curve(net, t1, t2, data, name, a["grid"])
            pred = [None] * len(lc.alphas)
            if a["predict"]:
                pred = second_order_curve(lc.alphas, *layer_quadratic_forms(net, t1, t2, data, name))
            for al, l21, l12, b, pv in zip(lc.alphas, lc.loss_2to1, lc.loss_1to2, lc.barrier, pred):
                curve_rows.append({"run_hash": h, "fork_epoch": run.fork.fork_epoch, "layer": name,
                                   "alpha": al, "loss_2to1": l21, "loss_1to2": l12, "barrier": b,
                                   "predicted": pv})
            alpha, mx = float(lc.alphas[int(np.argmax(lc.barrier))]), float(np.max(lc.barrier))
            layer_rows.append({"run_hash": h, "fork_epoch": run.fork.fork_epoch, "layer": name,
                               "delta_norm": report.delta_norms[name],
                               "block_diagonal": report.layer_predicted[name],
                               "actual_max_barrier": mx, "actual_argmax": alpha})
        block_rows = [{"run_hash": h, "fork_epoch": run.fork.fork_epoch, "layer_i": li, "layer_j": lj,
                       "value": report.block_matrix[r, c], "endpoint": report.endpoint}
                      for r, li in enumerate(report.layers) for c, lj in enumerate(report.layers)]
        set_rows = []
        for s in a["layer_sets"]:
            set_rows.append({"run_hash": h, "fork_epoch": run.fork.fork_epoch,
                             "layer_set": "+".join(s),
                             "predicted_half": layerwise_predicted(net, t1, t2, data, s, 0.5),
                             "block_sum": report.subset_total(s)})
        folder = self._fork_dir(i, run.fork)
        write_csv(folder / "layerwise.csv", curve_rows,
                  ["run_hash", "fork_epoch", "layer", "alpha", "loss_2to1", "loss_1to2", "barrier",
                   "predicted"])
        write_csv(folder / "layers.csv", layer_rows,
                  ["run_hash", "fork_epoch", "layer", "delta_norm", "block_diagonal",
                   "actual_max_barrier", "actual_argmax"])
        write_csv(folder / "blocks.csv", block_rows,
                  ["run_hash", "fork_epoch", "layer_i", "layer_j", "value", "endpoint"])
        if set_rows:
            write_csv(folder / "layer_sets.csv", set_rows,
                      ["run_hash", "fork_epoch", "layer_set", "predicted_half", "block_sum"])

    def _geometry(self, runs):
        angle_rows, trace_rows = [], []
        for i, run in enumerate(runs):
            g = sibling_geometry(run)
            h = run.manifest["config_hash"]
            angle_rows.append({"run_hash": h, "fork_epoch": run.fork.fork_epoch,
                               "angle_origin": g.angle_origin, "angle_fork": g.angle_fork,
                               "epochs_to_cos90": g.epochs_to_cosine(0.9)})
            for t, c, d in zip(g.epochs, g.plane_cosine_trace, g.distance_trace):
                trace_rows.append({"run_hash": h, "fork_epoch": run.fork.fork_epoch,
                                   "child_epoch": t, "plane_cosine": c, "distance": d})
        wanted = self.config.analysis["geometry"]
        cols = ["run_hash", "fork_epoch"] + [c for c, b in (("angle_origin", "origin"),
                                                           ("angle_fork", "fork_point")) if b in wanted]
        write_csv(self.out / "sibling_angles.csv", angle_rows, cols + ["epochs_to_cos90"])
        write_csv(self.out / "sibling_traces.csv", trace_rows,
                  ["run_hash", "fork_epoch", "child_epoch", "plane_cosine", "distance"])
        return angle_rows

    def _evolution(self, i, run):
        ev = self.config.analysis["evolution"]
        if not ev:
            return
        metric = ev.get("metric", "error_rate")
        rows = export_curve_evolution(self.net, run, self.data, int(ev.get("stride", 1)), metric,
                                      self.config.analysis["grid"], run.manifest["config_hash"])
        folder = self._fork_dir(i, run.fork)
        write_csv(folder / "evolution.csv", rows, EVOLUTION_COLUMNS)
        if self.config.analysis["svg"]:
            write_text(folder / "evolution.svg", evolution_svg(rows))

    def _toy(self):
        t = self.config.toy
        land = ToyLandscape(tuple(t["minima"]), t.get("scales"))
        h = self.config.hash
        pairs = t["pairs"] or list(combinations(range(len(land.minima)), 2))
        rows = []
        for i, j in pairs:
            alpha, val = toy_barrier(land, i, j, t["grid_size"])
            rows.append({"run_hash": h, "i": i, "j": j, "theta_i": land.minima[i],
                         "theta_j": land.minima[j], "alpha_star": alpha, "barrier": val,
                         "predicted": toy_predicted_barrier(land, i, j)})
        tr = t["trace"] or {}
        span = land.minima[-1] - land.minima[0]
        lo = tr.get("lo", land.minima[0] - 0.25 * span)
        hi = tr.get("hi", land.minima[-1] + 0.25 * span)
        xs, fs = toy_trace(land, lo, hi, tr.get("points", t["grid_size"]))
        write_csv(self.out / "toy" / "toy_barriers.csv", rows,
                  ["run_hash", "i", "j", "theta_i", "theta_j", "alpha_star", "barrier", "predicted"])
        write_csv(self.out / "toy" / "toy_trace.csv",
                  [{"run_hash": h, "theta": x, "loss": f} for x, f in zip(xs, fs)],
                  ["run_hash", "theta", "loss"])
        if self.config.analysis["svg"]:
            write_text(self.out / "toy" / "toy_trace.svg",
                       render_small_multiples({"f": list(zip((xs - lo) / (hi - lo), fs))}, "toy", "f"))
        return rows

    # -- orchestration

    def run(self, stages=STAGES) -> dict:
        stages = set(stages)
        if stages - set(STAGES):
            raise ConfigError(f"unknown stages {sorted(stages - set(STAGES))}")
        self._prepare()
        cfg = self.config
        summary = {}
        if cfg.trains:
            if "train" in stages or stages & (set(STAGES) - {"toy"}):
                self.parent()
            per_fork = stages & {"fork", "barrier", "predict", "layerwise", "geometry", "evolution",
                                 "compare"}
            if per_fork and cfg.forks:
                runs = self.all_runs()
                jobs = []
                for i, run in enumerate(runs):
                    if "barrier" in stages:
                        jobs.append((self._barrier, i, run))
                    if "predict" in stages and cfg.analysis["predict"]:
                        jobs.append((self._predict, i, run))
                    if "layerwise" in stages and (cfg.analysis["layerwise"] or cfg.analysis["layer_sets"]):
                        jobs.append((self._layerwise, i, run))
                    if "evolution" in stages:
                        jobs.append((self._evolution, i, run))
                with ThreadPoolExecutor(max_workers=thread_count()) as pool:
                    list(pool.map(lambda j: j[0](j[1], j[2]), jobs))
                if "geometry" in stages:
                    summary["angles"] = self._geometry(runs)
                if "compare" in stages:
                    rows = compare_predicted_actual(self.net, runs, self.data, cfg.analysis["grid"],
                                                    cfg.analysis["threshold"])
                    write_csv(self.out / "compare_predicted_actual.csv", rows, COMPARE_COLUMNS)
                    summary["compare"] = rows
        if cfg.toy is not None and "toy" in stages:
            summary["toy"] = self._toy()
        if summary:
            write_text(self.out / "summary.md", render_summary(cfg, summary, self.notes))
        return self._write_manifest(sorted(stages))

    def _write_manifest(self, stages) -> dict:
        files = sorted(p for p in self.out.rglob("*")
                       if p.is_file() and p.name != "manifest.json" and not p.name.endswith(".tmp"))
        results = {str(p.relative_to(self.out)): _file_hash(p) for p in files}
        manifest = {
            "name": self.config.name,
            "config_hash": self.config.hash,
            "code_version": __version__,
            "stages": stages,
            "dataset_id": self._data.id if self._data is not None else None,
            "forks": [self._runs[i].manifest for i in sorted(self._runs)],
            "results": results,
            "result_hash": sha256_hex(canonical_json(results))[:16],
            "notes": self.notes,
        }
        write_text(self.out / "manifest.json", json.dumps(manifest, indent=2, sort_keys=True) + "\n")
        return manifest


def render_summary(cfg: ExperimentConfig, summary: dict, notes) -> str:
    lines = [f"# {cfg.name}", "", f"config hash `{cfg.hash}`", ""]
    if "compare" in summary:
        lines += ["## Predicted vs actual barrier", "",
                  "| fork epoch | actual max | argmax | predicted (a=1/2) | distance | grad norms |",
                  "|---|---|---|---|---|---|"]
        for r in summary["compare"]:
            lines.append(f"| {r['fork_epoch']} | {r['actual_max_barrier']:.5g} | {r['actual_argmax']:.3f} "
                         f"| {r['predicted_half']:.5g} | {r['distance']:.4g} "
                         f"| {r['grad_norm_1']:.2g}, {r['grad_norm_2']:.2g} |")
        lines.append("")
    if "angles" in summary:
        lines += ["## Sibling geometry", "",
                  "| fork epoch | angle at origin | angle at fork | epochs to cos 0.9 |", "|---|---|---|---|"]
        for r in summary["angles"]:
            ao = "n/a" if r["angle_origin"] is None else f"{r['angle_origin']:.3f}"
            af = "n/a" if r["angle_fork"] is None else f"{r['angle_fork']:.3f}"
            lines.append(f"| {r['fork_epoch']} | {ao} | {af} | {r['epochs_to_cos90']} |")
        lines.append("")
    if "toy" in summary:
        lines += ["## Toy landscape", "", "| i | j | barrier | predicted |", "|---|---|---|---|"]
        for r in summary["toy"]:
            lines.append(f"| {r['theta_i']:g} | {r['theta_j']:g} | {r['barrier']:.6g} | {r['predicted']:.6g} |")
        lines.append("")
    if notes:
        lines += ["## Notes", ""] + [f"- {n}" for n in notes] + [""]
    return "\n".join(lines)


def run_experiment(config_path, out=None, resume=False, overwrite=False, seed_override=None,
                   stages=STAGES) -> Path:
    cfg = config_path if isinstance(config_path, ExperimentConfig) else ExperimentConfig.load(config_path)
    if seed_override is not None:
        cfg = cfg.with_seed(seed_override)
    out = out or cfg.output_dir
    if out is None:
        raise ConfigError("no output directory given")
    Experiment(cfg, out, resume, overwrite).run(stages)
    return Path(out)
