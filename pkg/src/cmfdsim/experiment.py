"""Experiment configuration, the runner, metrics, and persistence."""
from __future__ import annotations

import csv
import dataclasses
import json
import logging
import os
import time
from dataclasses import dataclass, field
from typing import Iterable, Optional, Sequence

import numpy as np

from . import CONFIG_SCHEMA_VERSION, __version__
from . import cmfd, data, meta
from .errors import CmfdError, ConfigurationError, ParameterError
from .funcspace import SampleGrid, two_block_measures, uniform_measures, write_function_csv
from .graph import PRESETS, Topology, TopologySpec, dynamic_topology, spectral_summary
from .nn import MlpModel, accuracy

ALGORITHMS = ("meta", "cmfd", "param_avg", "toy")
METRICS_HEADER = ["epoch", "device", "acc", "top5", "distill_loss", "d_t", "bytes"]
DEV_WINDOW = 100

# (eta, schedule, eps); eps None means 1/(2 max degree)
DEFAULT_RATES = {
    "meta": (0.1, "inv_t", None),
    "cmfd": (0.001, "constant", 0.003),
    "param_avg": (0.001, "constant", None),
    "toy": (0.05, "constant", 0.05),
}

log = logging.getLogger("cmfdsim")


@dataclass
class ExperimentConfig:
    """Flat run description. Every field has a same-named CLI flag (``_`` -> ``-``)."""

    algorithm: str = "cmfd"
    # topology
    preset: Optional[str] = None
    topology: str = "ring"
    n: int = 10
    k: int = 1
    m: int = 1
    dynamic: bool = False
    # rates
    # unset rates fall back to per-algorithm defaults (see DEFAULT_RATES)
    eta: Optional[float] = None
    eta_schedule: Optional[str] = None
    eps: Optional[float] = None
    epochs: int = 100
    # data
    dataset: str = "blobs"
    classes: int = 10
    per_class: int = 400
    spread: float = 0.15
    test_per_class: int = 100
    per_device: int = 200
    labels_per_device: int = 2
    partition: str = "ring"
    public_size: int = 500
    mnist_images: Optional[str] = None
    mnist_labels: Optional[str] = None
    # models: comma list of "count x hidden-widths", e.g. "5x64,5x16"; a bare "64" applies to all
    models: str = "64"
    batch_size: int = 100
    distill_batch_size: int = 100
    # meta runs
    grid_size: int = 64
    non_iid: float = 0.8
    loss: str = "mse"
    # toy runs
    toy_init: str = "0.5,0.5,-2,-1"
    toy_scheme: str = "distill"
    toy_steps: int = 400
    # bookkeeping
    cadence: int = 1
    seed: int = 0
    threads: int = 1
    audit: bool = False

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        if self.algorithm not in ALGORITHMS:
            raise ConfigurationError(f"algorithm must be one of {ALGORITHMS}, got {self.algorithm!r}")
        if self.preset is not None and self.preset not in PRESETS:
            raise ConfigurationError(f"unknown preset {self.preset!r}; known: {sorted(PRESETS)}")
        if self.epochs < 0 or self.cadence < 1 or self.threads < 1:
            raise ConfigurationError("epochs >= 0, cadence >= 1 and threads >= 1 are required")
        if (self.eta is not None and self.eta < 0) or (self.eps is not None and self.eps <= 0):
            raise ConfigurationError("eta must be >= 0 and eps > 0")
        if self.dataset not in ("blobs", "mnist"):
            raise ConfigurationError(f"unknown dataset {self.dataset!r}")
        if self.partition not in ("ring", "random_pairs"):
            raise ConfigurationError(f"unknown partition rule {self.partition!r}")
        hidden = self.hidden_layers()
        if self.algorithm == "param_avg" and len(set(hidden)) > 1:
            raise ConfigurationError("param_avg needs one shared architecture on every device")

    # -- derived pieces --

    def topology_spec(self) -> TopologySpec:
        if self.preset is not None:
            return PRESETS[self.preset]
        return TopologySpec(self.topology, self.n, k=self.k, m=self.m, seed=self.seeds()["topology"])

    def device_count(self) -> int:
        return self.topology_spec().n

    def hidden_layers(self) -> list[tuple[int, ...]]:
        """Hidden widths per device, parsed from ``models``."""
        n = self.device_count()
        out: list[tuple[int, ...]] = []
        try:
            for part in self.models.split(","):
                part = part.strip()
                count, _, widths = part.rpartition("x")
                hidden = tuple(int(w) for w in widths.split("-") if w)
                out.extend([hidden] * (int(count) if count else n))
        except ValueError as exc:
            raise ConfigurationError(f"cannot parse model spec {self.models!r}") from exc
        if len(out) != n:
            raise ConfigurationError(f"model spec describes {len(out)} devices, topology has {n}")
        return out

    def seeds(self) -> dict:
        base = int(self.seed)
        return {name: base * 1000 + off for off, name in enumerate(
            ["data", "split", "partition", "public", "init", "train", "topology"])}

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, obj: dict) -> "ExperimentConfig":
        names = {f.name for f in dataclasses.fields(cls)}
        unknown = sorted(set(obj) - names - {"schema_version", "seeds", "version", "resolved"})
        if unknown:
            raise ConfigurationError(f"unknown config fields: {unknown}")
        return cls(**{k: v for k, v in obj.items() if k in names})

    @classmethod
    def from_json_file(cls, path) -> "ExperimentConfig":
        try:
            with open(path) as fh:
                obj = json.load(fh)
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigurationError(f"cannot read config {path}: {exc}") from exc
        return cls.from_dict(obj)

    def resolved(self) -> dict:
        """Config plus everything derived from it that affects results."""
        spec = self.topology_spec()
        return {**self.to_dict(), "schema_version": CONFIG_SCHEMA_VERSION, "version": __version__,
                "seeds": self.seeds(),
                "resolved": {"topology": dataclasses.asdict(spec),
                             "hidden_layers": [list(h) for h in self.hidden_layers()],
                             "eta": self.learning_rate(),
                             "eta_schedule": self.schedule(),
                             "eps": self.sharing_rate(),
                             "init": "he_normal, zero bias"}}

    def learning_rate(self) -> float:
        return float(self.eta if self.eta is not None else DEFAULT_RATES[self.algorithm][0])

    def schedule(self) -> str:
        return self.eta_schedule or DEFAULT_RATES[self.algorithm][1]

    def sharing_rate(self) -> float:
        eps = self.eps if self.eps is not None else DEFAULT_RATES[self.algorithm][2]
        if eps is not None:
            return float(eps)
        return spectral_summary(self.topology_spec().build()).eps_max


@dataclass(frozen=True)
class MetricsRecord:
    epoch: int
    device_acc: tuple = ()
    device_top5: tuple = ()
    distill_loss: tuple = ()
    d_t: Optional[float] = None
    bytes: int = 0

    @property
    def acc(self) -> float:
        return float(np.mean(self.device_acc)) if self.device_acc else float("nan")

    @property
    def max_min(self) -> float:
        return float(max(self.device_acc) - min(self.device_acc)) if self.device_acc else float("nan")

    @property
    def top5(self) -> float:
        return float(np.mean(self.device_top5)) if self.device_top5 else float("nan")

    @property
    def mean_distill_loss(self) -> float:
        return float(np.mean(self.distill_loss)) if self.distill_loss else float("nan")


@dataclass
class RunResult:
    config: ExperimentConfig
    records: list
    summary: dict
    trace: Optional[meta.MetaTrace] = None
    trajectory: Optional[np.ndarray] = None
    models: Optional[list] = None
    broadcasts: list = field(default_factory=list)


# -- summary ------------------------------------------------------------------


def summarize(records: Sequence[MetricsRecord], labels: Optional[dict] = None) -> dict:
    """Final-epoch figures plus ``dev``, the mean per-device accuracy std over the tail."""
    if not records:
        raise ParameterError("cannot summarize an empty stream")
    last = records[-1]
    out = dict(labels or {})
    out["epochs"] = last.epoch
    with_acc = [r for r in records if r.device_acc]
    if with_acc:
        tail = with_acc[-DEV_WINDOW:]
        acc = np.array([r.device_acc for r in tail])
        out.update(acc=last.acc, max_min=last.max_min,
                   dev=float(np.mean(np.std(acc, axis=0))),
                   dev_window=len(tail), dev_short=len(tail) < DEV_WINDOW)
        out["top5"] = last.top5 if last.device_top5 else None
    losses = [r.mean_distill_loss for r in records if r.distill_loss]
    if losses:
        out["distill_loss"] = losses[-1]
    if last.d_t is not None:
        out["d_t"] = last.d_t
    out["bytes_total"] = int(sum(r.bytes for r in records))
    return out


def window_means(values: Sequence[float], window: int = 50) -> tuple[float, float]:
    """Average over the first and over the last ``window`` values."""
    v = np.asarray(values, dtype=float)
    if v.size < window:
        raise ParameterError(f"need at least {window} values, have {v.size}")
    return float(v[:window].mean()), float(v[-window:].mean())


# -- runner -------------------------------------------------------------------


def _topology_source(cfg: ExperimentConfig):
    spec = cfg.topology_spec()
    if not cfg.dynamic:
        return spec.build()
    seed = cfg.seeds()["topology"]
    return lambda epoch: dynamic_topology(spec, seed, epoch)


def build_data(cfg: ExperimentConfig):
    """(partitions, public set, test set) for a classification run."""
    s = cfg.seeds()
    if cfg.dataset == "blobs":
        pool = data.synth_blobs(cfg.classes, cfg.per_class, cfg.spread, seed=s["data"])
    else:
        if not (cfg.mnist_images and cfg.mnist_labels):
            raise ConfigurationError("the mnist dataset needs mnist_images and mnist_labels")
        pool = data.mnist_load(cfg.mnist_images, cfg.mnist_labels, cfg.classes)
    train, test = data.train_test_split(pool, cfg.test_per_class, seed=s["split"])
    n = cfg.device_count()
    if cfg.partition == "ring":
        parts = data.partition_ring(train, n, cfg.labels_per_device, cfg.per_device, seed=s["partition"])
    else:
        parts = data.partition_random_pairs(train, n, seed=s["partition"], per_device=cfg.per_device,
                                            labels_per_device=cfg.labels_per_device)
    public = data.make_public(train, cfg.public_size, seed=s["public"])
    return parts, public, test


def _evaluate(models, test: data.LabeledDataset, epoch, distill, d_bytes) -> MetricsRecord:
    acc = tuple(accuracy(m, test.inputs, test.labels) for m in models)
    top5 = tuple(accuracy(m, test.inputs, test.labels, top=5) for m in models) if test.num_classes > 5 else ()
    return MetricsRecord(epoch, acc, top5, tuple(float(v) for v in distill) if distill is not None else (),
                         None, d_bytes)


def _run_federated(cfg: ExperimentConfig) -> RunResult:
    parts, public, test = build_data(cfg)
    s = cfg.seeds()
    dims = (parts[0].dim, cfg.classes)
    hidden = cfg.hidden_layers()
    shared_init = cfg.algorithm == "param_avg"
    devices = [cmfd.DeviceState(MlpModel([dims[0], *hidden[i], dims[1]],
                                         seed=s["init"] if shared_init else [s["init"], i]), parts[i])
               for i in range(len(parts))]
    eps = cfg.sharing_rate()
    topo = _topology_source(cfg)
    if cfg.algorithm == "cmfd":
        stream = cmfd.run_cmfd(devices, public, topo, cfg.epochs, cfg.learning_rate(), eps,
                               batch_size=cfg.batch_size, distill_batch_size=cfg.distill_batch_size,
                               seed=s["train"], threads=cfg.threads, audit=cfg.audit)
    else:
        stream = cmfd.run_param_avg(devices, topo, cfg.epochs, cfg.learning_rate(), eps,
                                    batch_size=cfg.batch_size, seed=s["train"], threads=cfg.threads)
    records, broadcasts = [], []
    pending = 0
    for res in stream:
        pending += res.bytes
        if res.digests:
            broadcasts.extend({"epoch": res.epoch, "device": i, "outputs_digest": dg}
                              for i, dg in enumerate(res.digests))
        if res.epoch % cfg.cadence == 0 or res.epoch == cfg.epochs:
            records.append(_evaluate(res.models, test, res.epoch, res.distill_loss, pending))
            pending = 0
    summary = summarize(records, _labels(cfg, eps))
    return RunResult(cfg, records, summary, models=[d.model for d in devices], broadcasts=broadcasts)


def _labels(cfg: ExperimentConfig, eps: float) -> dict:
    return {"algorithm": cfg.algorithm, "dataset": cfg.dataset,
            "topology": cfg.preset or f"{cfg.topology}(n={cfg.n},k={cfg.k},m={cfg.m})",
            "eta": cfg.learning_rate(), "eps": eps}


def meta_instance(cfg: ExperimentConfig):
    """Grid, measures and target for a meta run on the points ``(s + 1/2) / S``.

    MSE runs fit ``sin(2 pi x)``. KL runs fit the two-class distribution
    ``(p, 1 - p)`` with ``p = 1/2 + 0.4 sin(2 pi x)``.
    """
    x = (np.arange(cfg.grid_size) + 0.5) / cfg.grid_size
    n = cfg.device_count()
    measures = uniform_measures(n, x.size) if cfg.non_iid == 0.5 else \
        two_block_measures(n, x.size, cfg.non_iid)
    if cfg.loss == "kl":
        p = 0.5 + 0.4 * np.sin(2 * np.pi * x)
        target = np.column_stack([p, 1.0 - p])
    else:
        target = np.sin(2 * np.pi * x)[:, None]
    return SampleGrid(x, target.shape[1]), measures, target


def _run_meta(cfg: ExperimentConfig) -> RunResult:
    if cfg.epochs < 1:
        raise ConfigurationError("meta runs need at least one epoch")
    grid, measures, target = meta_instance(cfg)
    topo = cfg.topology_spec().build()
    loss = meta.LossFunctional(cfg.loss, target)
    f_init = np.zeros((topo.n, grid.size, grid.dim_out))
    if cfg.loss == "kl":
        f_init += 1.0 / grid.dim_out
    etas = meta.step_sizes(cfg.schedule(), cfg.learning_rate(), cfg.epochs)
    eps = cfg.sharing_rate()
    trace = meta.run_meta(topo, measures, loss, f_init, etas, eps, threads=cfg.threads)
    records = [MetricsRecord(t + 1, d_t=float(trace.distance[t])) for t in range(trace.epochs)
               if (t + 1) % cfg.cadence == 0 or t + 1 == trace.epochs]
    summary = summarize(records, _labels(cfg, eps))
    summary.update(loss_best=float(trace.loss_best[-1]), gap=float(trace.gap[-1]),
                   distance_violations=trace.distance_violations(),
                   best_violations=trace.best_violations(), backend=trace.backend,
                   bounds=trace.report.to_dict() if trace.report else None)
    return RunResult(cfg, records, summary, trace=trace)


def parse_toy_init(text: str) -> np.ndarray:
    try:
        vals = [float(v) for v in text.split(",")]
    except ValueError as exc:
        raise ConfigurationError(f"toy init must be four numbers, got {text!r}") from exc
    if len(vals) != 4:
        raise ConfigurationError(f"toy init must be four numbers, got {text!r}")
    return np.array(vals).reshape(2, 2)


def _run_toy(cfg: ExperimentConfig) -> RunResult:
    traj = cmfd.run_toy(cfg.toy_scheme, parse_toy_init(cfg.toy_init), cfg.toy_steps,
                        eta=cfg.learning_rate(), eps=cfg.sharing_rate())
    products = traj[:, :, 0] * traj[:, :, 1]
    summary = {"scheme": cfg.toy_scheme, "steps": cfg.toy_steps,
               "final_weights": traj[-1].tolist(), "final_products": products[-1].tolist(),
               "last_update": float(np.max(np.abs(traj[-1] - traj[-2]))) if len(traj) > 1 else 0.0}
    return RunResult(cfg, [], summary, trajectory=traj)


def run(cfg: ExperimentConfig) -> RunResult:
    """Dispatch on ``cfg.algorithm``. Module errors gain the algorithm name."""
    try:
        if cfg.algorithm == "meta":
            return _run_meta(cfg)
        if cfg.algorithm == "toy":
            return _run_toy(cfg)
        return _run_federated(cfg)
    except CmfdError as exc:
        exc.args = (f"[{cfg.algorithm}] {exc.args[0] if exc.args else ''}",) + exc.args[1:]
        raise


# -- export -------------------------------------------------------------------


def _num(v) -> str:
    if v is None or (isinstance(v, float) and not np.isfinite(v)):
        return ""
    return repr(float(v)) if isinstance(v, float) else str(v)


def metrics_rows(records: Iterable[MetricsRecord]):
    """One row per device per recorded epoch. Meta runs give one row per epoch with device blank."""
    for r in records:
        if not r.device_acc:
            yield [r.epoch, "", "", "", "", _num(r.d_t), r.bytes]
            continue
        for i, a in enumerate(r.device_acc):
            yield [r.epoch, i, _num(a), _num(r.device_top5[i]) if r.device_top5 else "",
                   _num(r.distill_loss[i]) if r.distill_loss else "", _num(r.d_t), r.bytes]


def write_metrics_csv(path, records) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(METRICS_HEADER)
        w.writerows(metrics_rows(records))


def write_metrics_jsonl(path, records) -> None:
    with open(path, "w") as fh:
        for r in records:
            fh.write(json.dumps({"epoch": r.epoch, "device_acc": list(r.device_acc), "acc": _nan(r.acc),
                                 "max_min": _nan(r.max_min), "top5": _nan(r.top5),
                                 "distill_loss": _nan(r.mean_distill_loss), "d_t": r.d_t,
                                 "bytes": r.bytes}) + "\n")


def _nan(v):
    return None if not np.isfinite(v) else v


def export(result: RunResult, out_dir) -> dict:
    """Write every artifact of a run into ``out_dir``; returns name -> path."""
    os.makedirs(out_dir, exist_ok=True)
    paths = {"config": os.path.join(out_dir, "config.resolved.json"),
             "summary": os.path.join(out_dir, "summary.json")}
    with open(paths["config"], "w") as fh:
        json.dump(result.config.resolved(), fh, indent=2, sort_keys=True)
    with open(paths["summary"], "w") as fh:
        json.dump(result.summary, fh, indent=2, sort_keys=True)
    if result.records:
        paths["metrics"] = os.path.join(out_dir, "metrics.csv")
        paths["metrics_jsonl"] = os.path.join(out_dir, "metrics.jsonl")
        write_metrics_csv(paths["metrics"], result.records)
        write_metrics_jsonl(paths["metrics_jsonl"], result.records)
    if result.trace is not None:
        paths["trace"] = os.path.join(out_dir, "meta_trace.csv")
        result.trace.write_csv(paths["trace"])
    if result.trajectory is not None:
        paths["trajectory"] = os.path.join(out_dir, "toy_trajectory.csv")
        with open(paths["trajectory"], "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["step", "wa_0", "wb_0", "wa_1", "wb_1", "prod_0", "prod_1"])
            for t, wt in enumerate(result.trajectory):
                w.writerow([t] + [repr(float(v)) for v in wt.ravel()]
                           + [repr(float(wt[0, 0] * wt[0, 1])), repr(float(wt[1, 0] * wt[1, 1]))])
    if result.broadcasts:
        paths["broadcasts"] = os.path.join(out_dir, "broadcasts.jsonl")
        with open(paths["broadcasts"], "w") as fh:
            for b in result.broadcasts:
                fh.write(json.dumps(b) + "\n")
    return paths


def dump_functions(result: RunResult, out_dir) -> list:
    """Final per-device grid functions of a meta run, one CSV each."""
    if result.trace is None:
        raise ConfigurationError("function dumps are only available for meta runs")
    grid, _, _ = meta_instance(result.config)
    os.makedirs(out_dir, exist_ok=True)
    paths = []
    for i, f in enumerate(result.trace.final):
        p = os.path.join(out_dir, f"function_{i}.csv")
        write_function_csv(p, SampleGrid(grid.points, f.shape[1]), f)
        paths.append(p)
    return paths


def run_logged(cfg: ExperimentConfig, out_dir) -> RunResult:
    """Run, export, and append wall-clock timestamps to ``run.log`` (the only timed file)."""
    os.makedirs(out_dir, exist_ok=True)
    handler = logging.FileHandler(os.path.join(out_dir, "run.log"))
    handler.setFormatter(logging.Formatter("%(asctime)s %(levelname)s %(message)s"))
    log.addHandler(handler)
    log.setLevel(logging.INFO)
    try:
        log.info("start %s epochs=%d", cfg.algorithm, cfg.epochs)
        t0 = time.perf_counter()
        result = run(cfg)
        export(result, out_dir)
        log.info("done in %.3fs", time.perf_counter() - t0)
        return result
    finally:
        log.removeHandler(handler)
        handler.close()
