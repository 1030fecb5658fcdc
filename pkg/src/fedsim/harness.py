"""Experiment orchestration: config tree, the federated round loop,
metrics, persistence, and report emission.

Every stochastic choice derives from the master seed through a string
label (see :mod:`fedsim.rng`), so a config re-run reproduces results
byte for byte and a checkpointed run resumes onto the identical
trajectory.
"""

import copy
import csv
import dataclasses
import io
import json
import os
import pickle
import time
import warnings
from dataclasses import dataclass, field
from typing import List, Optional

import numpy as np

from . import certify as certify_mod
from . import learner
from .aggregators import RoundInfo, make_aggregator
from .attacks import AdversaryView, ThreatModel, make_adversary
from .data import (
    PartitionSpec,
    SyntheticSpec,
    TriggerSpec,
    load_idx_files,
    make_synthetic_dataset,
    partition,
)
from .rng import child_seed

PAPER_BETAS = (0.0, 0.6, 0.9, 0.99)
PAPER_TAUS = (0.1, 1.0, 10.0, 100.0, 1000.0)
PAPER_BUCKETS = (0, 2, 5, 10)
PAPER_MALICIOUS_FRACTIONS = (0.02, 0.05, 0.10, 0.20, 0.30)

RESULTS_HEADER = ("round", "ma", "ba", "gamma", "accepted_total",
                  "accepted_malicious", "clipped_count")


class ConfigError(ValueError):
    pass


@dataclass
class DataConfig:
    train_images: Optional[str] = None
    train_labels: Optional[str] = None
    test_images: Optional[str] = None
    test_labels: Optional[str] = None
    synthetic: Optional[SyntheticSpec] = field(default_factory=SyntheticSpec)
    partition: PartitionSpec = field(default_factory=PartitionSpec)

    def files_given(self) -> bool:
        paths = (self.train_images, self.train_labels, self.test_images, self.test_labels)
        if any(paths) and not all(paths):
            raise ConfigError("dataset paths must name all four IDX files")
        return all(paths)


@dataclass
class AggregatorConfig:
    kind: str = "fedavg"
    tau: float = 10.0
    beta: float = 0.9
    f_assumed: Optional[int] = None  # None: the true f
    s: int = 2
    window: int = 10
    noise_sigma: float = 0.0
    clip_reference: str = "global-distance"
    min_samples: int = 1

    def build(self, true_f: int):
        if self.kind == "fedavg":
            return make_aggregator("fedavg")
        if self.kind == "flame":
            return make_aggregator("flame", noise_sigma=self.noise_sigma,
                                   clip_reference=self.clip_reference,
                                   min_samples=self.min_samples)
        if self.kind == "mdam":
            f = self.f_assumed if self.f_assumed is not None else true_f
            return make_aggregator("mdam", beta=self.beta, f_assumed=f)
        if self.kind == "fldetector":
            return make_aggregator("fldetector", window=self.window)
        if self.kind == "cc":
            return make_aggregator("cc", tau=self.tau)
        if self.kind == "ccb":
            if self.s == 0:  # bucketing disabled
                return make_aggregator("cc", tau=self.tau)
            return make_aggregator("ccb", tau=self.tau, s=self.s)
        raise ConfigError(f"unknown aggregator kind {self.kind!r}")

    def tailored_info(self) -> dict:
        """What an AGR-tailored adversary learns about the server rule."""
        if self.kind in ("cc", "ccb"):
            return {"kind": "cc", "tau": self.tau, "s": self.s}
        if self.kind == "mdam":
            return {"kind": "mdam", "beta": self.beta, "f_assumed": self.f_assumed}
        if self.kind == "flame":
            return {"kind": "flame", "clip_reference": self.clip_reference,
                    "noise_sigma": self.noise_sigma, "min_samples": self.min_samples}
        if self.kind == "fldetector":
            return {"kind": "fldetector", "window": self.window}
        return {"kind": self.kind}


@dataclass
class ExperimentConfig:
    data: DataConfig = field(default_factory=DataConfig)
    model: learner.ModelSpec = field(default_factory=learner.ModelSpec)
    train: learner.TrainConfig = field(default_factory=learner.TrainConfig)
    aggregator: AggregatorConfig = field(default_factory=AggregatorConfig)
    threat: Optional[ThreatModel] = None
    trigger: Optional[TriggerSpec] = None
    master_seed: int = 0
    out_dir: Optional[str] = None
    eval_every: int = 1
    certify: Optional[certify_mod.SmoothingConfig] = None
    certify_examples: int = 200
    checkpoint_every: Optional[int] = None

    def __post_init__(self):
        self.validate()

    def validate(self):
        n = self.data.partition.n_clients
        if self.threat is not None:
            if self.threat.f >= n / 2:
                raise ConfigError(
                    f"malicious count f={self.threat.f} must stay below n/2={n / 2}"
                )
            frac = self.threat.f / n
            if not any(abs(frac - p) < 1e-9 for p in PAPER_MALICIOUS_FRACTIONS):
                warnings.warn(f"malicious fraction {frac:.2f} outside the studied set "
                              f"{PAPER_MALICIOUS_FRACTIONS}", stacklevel=2)
        if self.aggregator.kind == "mdam" and self.aggregator.beta not in PAPER_BETAS:
            warnings.warn(f"beta={self.aggregator.beta} outside {PAPER_BETAS}",
                          stacklevel=2)
        if self.aggregator.kind in ("cc", "ccb") and self.aggregator.tau not in PAPER_TAUS:
            warnings.warn(f"tau={self.aggregator.tau} outside {PAPER_TAUS}", stacklevel=2)
        if self.aggregator.kind == "ccb" and self.aggregator.s not in PAPER_BUCKETS:
            warnings.warn(f"bucket count s={self.aggregator.s} outside {PAPER_BUCKETS}",
                          stacklevel=2)


@dataclass
class RoundLog:
    round: int
    ma: float
    ba: float
    gamma: Optional[float]
    accepted_total: int
    accepted_malicious: int
    clipped_count: int


@dataclass
class Results:
    logs: List[RoundLog]
    final_w: np.ndarray
    config: ExperimentConfig
    certificates: Optional[list] = None
    runtime_s: float = 0.0

    @property
    def final_ma(self) -> float:
        return self.logs[-1].ma

    @property
    def final_ba(self) -> float:
        return self.logs[-1].ba


class Experiment:
    """One federated training run under a fixed config."""

    def __init__(self, cfg: ExperimentConfig):
        self.cfg = cfg
        (train_x, train_y), (test_x, test_y) = self._load_data()
        d_in = train_x.shape[1] * train_x.shape[2]
        if cfg.model.layer_widths[0] != d_in:
            raise ConfigError(f"model input width {cfg.model.layer_widths[0]} "
                              f"does not match flattened image size {d_in}")
        self.X_train = train_x.reshape(len(train_y), -1)
        self.y_train = train_y
        self.X_test = test_x.reshape(len(test_y), -1)
        self.y_test = test_y

        part_spec = dataclasses.replace(
            cfg.data.partition, seed=child_seed(cfg.master_seed, "partition"))
        self.shards = partition(self.y_train, part_spec)

        self.f = cfg.threat.f if cfg.threat else 0
        self.aggregator = cfg.aggregator.build(self.f)
        self.adversary = None
        if cfg.threat is not None:
            self.adversary = make_adversary(cfg.threat, trigger=cfg.trigger,
                                            num_classes=cfg.model.num_classes)

        model_spec = dataclasses.replace(
            cfg.model, init_seed=child_seed(cfg.master_seed, "init"))
        self.model_spec = model_spec
        self.w = learner.init_params(model_spec)
        self.round_index = 0
        self.logs: List[RoundLog] = []

    def _load_data(self):
        d = self.cfg.data
        if d.files_given():
            train = load_idx_files(d.train_images, d.train_labels)
            test = load_idx_files(d.test_images, d.test_labels)
            return train, test
        if d.synthetic is None:
            raise ConfigError("config names no dataset files and no synthetic spec")
        return make_synthetic_dataset(d.synthetic)

    def client_data(self, i: int):
        idx = self.shards[i]
        return self.X_train[idx], self.y_train[idx]

    def _train_client(self, i: int, label: str, X, y) -> np.ndarray:
        seed = child_seed(self.cfg.master_seed, f"round{self.round_index}/{label}{i}")
        return learner.local_train(self.w, self.model_spec, X, y, self.cfg.train, seed)

    def run_round(self) -> RoundLog:
        cfg = self.cfg
        t = self.round_index
        n = cfg.data.partition.n_clients
        f = self.f

        honest = [self._train_client(i, "client", *self.client_data(i))
                  for i in range(f, n)]

        crafted: List[np.ndarray] = []
        gamma = None
        if self.adversary is not None:
            view = self._adversary_view(honest)
            crafted = self.adversary.craft(view)
            if len(crafted) != f:
                raise RuntimeError(f"adversary produced {len(crafted)} updates, expected {f}")
            gamma = self.adversary.last_gamma

        updates = crafted + honest
        agg, trace = self.aggregator.aggregate(
            updates, RoundInfo(t, self.w, cfg.master_seed))
        self.w = self.w - cfg.train.server_lr * agg

        if cfg.eval_every and (t + 1) % cfg.eval_every == 0:
            metrics = learner.evaluate(self.w, self.model_spec, self.X_test,
                                       self.y_test, trigger=cfg.trigger)
        else:
            metrics = {"MA": float("nan"), "BA": float("nan")}

        log = RoundLog(
            round=t,
            ma=metrics["MA"],
            ba=metrics["BA"],
            gamma=gamma,
            accepted_total=sum(tr.accepted for tr in trace),
            accepted_malicious=sum(tr.accepted for tr in trace[:f]),
            clipped_count=sum(tr.clipped_factor < 1.0 for tr in trace),
        )
        self.logs.append(log)
        self.round_index += 1
        self.last_trace = trace
        return log

    def _adversary_view(self, honest_updates) -> AdversaryView:
        cfg = self.cfg
        f = self.f
        clean = [self._train_client(i, "adv-clean", *self.client_data(i))
                 for i in range(f)]
        poisoned = None
        if self.adversary.poisons_training_data():
            poisoned = []
            for i in range(f):
                X, y = self.client_data(i)
                seed = child_seed(cfg.master_seed, f"round{self.round_index}/adv-poison{i}")
                Xp, yp = self.adversary.transform_shard(i, X, y, seed)
                poisoned.append(self._train_client(i, "adv-poisoned", Xp, yp))
        tm = cfg.threat
        return AdversaryView(
            w_global=self.w.copy(),
            n=cfg.data.partition.n_clients,
            f=f,
            server_lr=cfg.train.server_lr,
            round_index=self.round_index,
            seed=child_seed(cfg.master_seed, "adversary"),
            own_clean_updates=clean,
            own_poisoned_updates=poisoned,
            malicious_shards=[self.client_data(i) for i in range(f)],
            model_spec=self.model_spec,
            train_cfg=cfg.train,
            trigger=cfg.trigger,
            benign_updates=list(honest_updates) if tm.gradients_known else None,
            agr=cfg.aggregator.tailored_info() if tm.agr_tailored else None,
        )

    def run(self, rounds: Optional[int] = None) -> Results:
        rounds = rounds if rounds is not None else self.cfg.train.rounds
        start = time.monotonic()
        while self.round_index < rounds:
            self.run_round()
            if (self.cfg.checkpoint_every and self.cfg.out_dir
                    and self.round_index % self.cfg.checkpoint_every == 0):
                self.save_checkpoint()
        certs = None
        if self.cfg.certify is not None:
            sub = slice(0, self.cfg.certify_examples)
            certs = certify_mod.certify_dataset(
                self.w, self.model_spec, self.X_test[sub], self.cfg.certify,
                seed=child_seed(self.cfg.master_seed, "certify"))
        return Results(self.logs, self.w.copy(), self.cfg, certs,
                       runtime_s=time.monotonic() - start)

    def save_checkpoint(self, path: Optional[str] = None):
        path = path or os.path.join(self.cfg.out_dir, "checkpoint.pkl")
        os.makedirs(os.path.dirname(path), exist_ok=True)
        state = {
            "round_index": self.round_index,
            "w": self.w,
            "logs": self.logs,
            "aggregator": self.aggregator,
            "adversary": self.adversary,
        }
        with open(path, "wb") as fh:
            pickle.dump(state, fh)

    def load_checkpoint(self, path: str):
        with open(path, "rb") as fh:
            state = pickle.load(fh)
        self.round_index = state["round_index"]
        self.w = state["w"]
        self.logs = state["logs"]
        self.aggregator = state["aggregator"]
        self.adversary = state["adversary"]


def run_experiment(cfg: ExperimentConfig, rounds: Optional[int] = None) -> Results:
    results = Experiment(cfg).run(rounds)
    if cfg.out_dir:
        emit_reports(results, cfg.out_dir)
    return results


# -- reporting ----------------------------------------------------------


def _fmt(x) -> str:
    if x is None:
        return ""
    if isinstance(x, float):
        return repr(x)
    return str(x)


def results_csv_text(logs: List[RoundLog]) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(RESULTS_HEADER)
    for log in logs:
        writer.writerow([_fmt(v) for v in (
            log.round, log.ma, log.ba, log.gamma,
            log.accepted_total, log.accepted_malicious, log.clipped_count)])
    return buf.getvalue()


def emit_reports(results: Results, out_dir: str):
    """Write results.csv, summary.json, certificates.csv, final model,
    and SVG plots into out_dir."""
    os.makedirs(out_dir, exist_ok=True)
    with open(os.path.join(out_dir, "results.csv"), "w") as fh:
        fh.write(results_csv_text(results.logs))

    summary = {
        "final_ma": results.final_ma if results.logs else None,
        "final_ba": results.final_ba if results.logs else None,
        "rounds": len(results.logs),
        "gamma_trace": [log.gamma for log in results.logs],
        "runtime_s": results.runtime_s,
        "config": config_to_dict(results.config),
    }
    with open(os.path.join(out_dir, "summary.json"), "w") as fh:
        json.dump(summary, fh, indent=2, sort_keys=True)

    np.save(os.path.join(out_dir, "final_model.npy"), results.final_w)

    if results.certificates is not None:
        write_certificates_csv(results.certificates,
                               os.path.join(out_dir, "certificates.csv"))

    plot_dir = os.path.join(out_dir, "plots")
    write_plots(results, plot_dir)


def write_certificates_csv(certs, path: str):
    with open(path, "w") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(("example_id", "prediction", "radius"))
        for i, c in enumerate(certs):
            writer.writerow((i, c.prediction, repr(float(c.radius))))


def write_plots(results: Results, plot_dir: str):
    import matplotlib

    matplotlib.use("svg")
    matplotlib.rcParams["svg.hashsalt"] = "fedsim"
    import matplotlib.pyplot as plt

    os.makedirs(plot_dir, exist_ok=True)
    rounds = [log.round for log in results.logs]

    fig, ax = plt.subplots(figsize=(6, 4))
    ax.plot(rounds, [log.ma for log in results.logs], label="main-task accuracy")
    if any(log.ba > 0 for log in results.logs):
        ax.plot(rounds, [log.ba for log in results.logs], label="backdoor accuracy")
    ax.set_xlabel("round")
    ax.set_ylabel("accuracy")
    ax.set_ylim(0, 1)
    ax.legend()
    fig.savefig(os.path.join(plot_dir, "accuracy.svg"), metadata={"Date": None})
    plt.close(fig)

    if results.certificates is not None:
        radii = np.linspace(0.0, max((c.radius for c in results.certificates), default=0.0) + 1e-9, 50)
        counts = [np.mean([c.radius >= r and c.prediction != certify_mod.ABSTAIN
                           for c in results.certificates]) for r in radii]
        fig, ax = plt.subplots(figsize=(6, 4))
        ax.plot(radii, counts)
        ax.set_xlabel("radius")
        ax.set_ylabel("certified fraction")
        fig.savefig(os.path.join(plot_dir, "certified.svg"), metadata={"Date": None})
        plt.close(fig)


# -- config (de)serialization -------------------------------------------


def config_to_dict(cfg: ExperimentConfig) -> dict:
    return dataclasses.asdict(cfg)


_SECTION_TYPES = {
    "data": DataConfig,
    "model": learner.ModelSpec,
    "train": learner.TrainConfig,
    "aggregator": AggregatorConfig,
    "threat": ThreatModel,
    "trigger": TriggerSpec,
    "certify": certify_mod.SmoothingConfig,
}

_NESTED_TYPES = {
    "synthetic": SyntheticSpec,
    "partition": PartitionSpec,
}


def _build_section(cls, value):
    if value is None:
        return None
    if not isinstance(value, dict):
        raise ConfigError(f"expected a mapping for {cls.__name__}, got {type(value).__name__}")
    kwargs = {}
    names = {f.name for f in dataclasses.fields(cls)}
    for key, val in value.items():
        if key not in names:
            raise ConfigError(f"unknown key {key!r} for {cls.__name__}")
        if key in _NESTED_TYPES and isinstance(val, dict):
            val = _build_section(_NESTED_TYPES[key], val)
        kwargs[key] = val
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{cls.__name__}: {exc}") from exc


def config_from_dict(doc: dict) -> ExperimentConfig:
    """Build a validated ExperimentConfig from a parsed YAML/JSON tree."""
    if not isinstance(doc, dict):
        raise ConfigError("config document must be a mapping")
    doc = dict(doc)
    doc.pop("grid", None)
    kwargs = {}
    for key, value in doc.items():
        if key in _SECTION_TYPES:
            kwargs[key] = _build_section(_SECTION_TYPES[key], value)
        elif key in ("master_seed", "out_dir", "eval_every", "certify_examples",
                     "checkpoint_every"):
            kwargs[key] = value
        else:
            raise ConfigError(f"unknown top-level config key {key!r}")
    try:
        cfg = ExperimentConfig(**kwargs)
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from exc
    out_override = os.environ.get("FEDSIM_OUT")
    if out_override:
        cfg.out_dir = out_override
    return cfg


def load_config(path: str) -> ExperimentConfig:
    with open(path) as fh:
        text = fh.read()
    if path.endswith(".json"):
        doc = json.loads(text)
    else:
        import yaml

        doc = yaml.safe_load(text)
    return config_from_dict(doc)


def grid_values(path: str) -> dict:
    """The grid block of a config file: dotted key -> list of values."""
    with open(path) as fh:
        if path.endswith(".json"):
            doc = json.load(fh)
        else:
            import yaml

            doc = yaml.safe_load(fh)
    return doc.get("grid", {})


def run_grid(cfg: ExperimentConfig, grid: dict, out_dir: str,
             rounds: Optional[int] = None) -> list:
    """Cartesian sweep over dotted-key overrides, one run per cell."""
    import itertools

    keys = sorted(grid)
    rows = []
    for combo in itertools.product(*(grid[k] for k in keys)):
        cell = dict(zip(keys, combo))
        cell_cfg = apply_overrides(cfg, cell)
        tag = "_".join(f"{k.split('.')[-1]}={v}" for k, v in cell.items())
        cell_cfg.out_dir = os.path.join(out_dir, tag)
        cell_cfg.master_seed = child_seed(cfg.master_seed, f"grid/{tag}")
        results = run_experiment(cell_cfg, rounds)
        rows.append({**cell, "final_ma": results.final_ma, "final_ba": results.final_ba,
                     "out_dir": cell_cfg.out_dir})
    with open(os.path.join(out_dir, "grid_summary.csv"), "w") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(keys + ["final_ma", "final_ba", "out_dir"])
        for row in rows:
            writer.writerow([_fmt(row[k]) for k in keys]
                            + [_fmt(row["final_ma"]), _fmt(row["final_ba"]), row["out_dir"]])
    return rows


def apply_overrides(cfg: ExperimentConfig, overrides: dict) -> ExperimentConfig:
    """Deep-copy cfg with dotted-path overrides applied."""
    out = copy.deepcopy(cfg)
    for dotted, value in overrides.items():
        parts = dotted.split(".")
        obj = out
        for part in parts[:-1]:
            obj = getattr(obj, part)
            if obj is None:
                raise ConfigError(f"cannot override {dotted!r}: {part} is unset")
        if not hasattr(obj, parts[-1]):
            raise ConfigError(f"unknown override target {dotted!r}")
        setattr(obj, parts[-1], value)
    out.validate()
    return out
