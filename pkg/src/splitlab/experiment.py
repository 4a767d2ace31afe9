"""Experiment harness: config, one-run driver, sweeps, K-guessing trials, reports."""

from __future__ import annotations

import configparser
import copy
import json
import logging
import os
from collections import Counter
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field

import numpy as np

from .attacks import (
    direction_attack,
    infer_k_attack,
    model_completion_attack,
    norm_attack,
    spectral_attack,
)
from .data import gen_synthetic, load_csv, load_idx, train_test_split
from .numerics import RngStream
from .records import RunRecord, atomic_write, config_hash
from .secdt import Architecture, DefenseConfig, fit
from .splitproto import TrainConfig, evaluate

log = logging.getLogger(__name__)

ATTACKS = ("norm", "direction", "spectral", "model_completion", "infer_k")
BINARY_ONLY = ("norm", "direction", "spectral")
SWEEP_AXES = ("dimension", "noise")
OUTPUT_ENV = "SPLITLAB_OUT"


class ConfigError(ValueError):
    pass


@dataclass
class DataSpec:
    kind: str = "synthetic"  # synthetic | csv | idx
    n: int = 10_000
    d: int = 32
    k: int = 2
    class_weights: list = None  # default: 5% positives for k=2, uniform otherwise
    separation: float = 6.0
    seed: int = 0
    path: str = None
    label_column: str = "label"
    images: str = None
    labels: str = None
    test_fraction: float = 0.2

    def weights(self):
        if self.class_weights is not None:
            return list(self.class_weights)
        if self.k == 2:
            return [0.95, 0.05]
        return [1.0 / self.k] * self.k


@dataclass
class AttackSpec:
    names: list = field(default_factory=lambda: ["norm", "direction", "spectral"])
    window: object = "last"
    majority_hint: int = 0
    spectral_source: str = "embeddings"
    reference_size: int = 512
    aux_per_class: int = 10
    completion_epochs: int = 100
    k_max: int = None  # default 2K
    kmeans_restarts: int = 10
    max_points: int = 2000


@dataclass
class ExperimentConfig:
    data: DataSpec = field(default_factory=DataSpec)
    arch: Architecture = field(default_factory=Architecture)
    epochs: int = 20
    batch_size: int = 64
    learning_rate: float = 0.05
    seed: int = 0
    tap_window: list = None
    defense: DefenseConfig = None
    attacks: AttackSpec = field(default_factory=AttackSpec)
    output_dir: str = None

    def to_dict(self):
        d = asdict(self)
        d.pop("output_dir")
        return d

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        return cls(
            data=DataSpec(**d.pop("data", {})),
            arch=Architecture(**d.pop("arch", {})),
            defense=None if d.get("defense") is None else DefenseConfig(**d.pop("defense")),
            attacks=AttackSpec(**d.pop("attacks", {})),
            **{k: v for k, v in d.items() if k != "defense"},
        )

    def train_config(self, seed=None):
        return TrainConfig(
            epochs=self.epochs, batch_size=self.batch_size,
            seed=self.seed if seed is None else seed,
            learning_rate=self.learning_rate, defense=self.defense,
            tap_window=tuple(self.tap_window) if self.tap_window else None,
        )

    def validate(self):
        """Reject anything that would fail a precondition mid-run."""
        ds = self.data
        if ds.kind not in ("synthetic", "csv", "idx"):
            raise ConfigError(f"unknown dataset kind {ds.kind!r}")
        if ds.kind == "synthetic":
            w = np.asarray(ds.weights(), dtype=float)
            if ds.k < 2 or w.shape != (ds.k,) or np.any(w < 0) or not np.isclose(w.sum(), 1.0):
                raise ConfigError("class_weights must be a probability vector of length k >= 2")
            if ds.n < 4 or ds.d < ds.k or ds.separation < 0:
                raise ConfigError("synthetic data needs n >= 4, d >= k, separation >= 0")
        elif ds.kind == "csv" and not (ds.path and os.path.exists(ds.path)):
            raise ConfigError(f"csv file not found: {ds.path}")
        elif ds.kind == "idx" and not (ds.images and ds.labels and os.path.exists(ds.images)
                                       and os.path.exists(ds.labels)):
            raise ConfigError("idx dataset needs existing images and labels files")
        if not 0 < ds.test_fraction < 1:
            raise ConfigError("test_fraction must lie in (0, 1)")
        if self.epochs < 1 or self.batch_size < 1 or not self.learning_rate > 0:
            raise ConfigError("epochs, batch_size and learning_rate must be positive")
        if self.tap_window is not None:
            a, b = self.tap_window
            if not 0 <= a <= b < self.epochs:
                raise ConfigError("tap_window must be an epoch range inside training")
        unknown = set(self.attacks.names) - set(ATTACKS)
        if unknown:
            raise ConfigError(f"unknown attacks {sorted(unknown)}")
        k = self.n_classes()
        if k != 2 and set(self.attacks.names) & set(BINARY_ONLY):
            raise ConfigError("norm/direction/spectral attacks need a binary task")
        if self.attacks.spectral_source not in ("embeddings", "gradients"):
            raise ConfigError("spectral_source must be embeddings or gradients")
        if self.attacks.majority_hint not in (0, 1):
            raise ConfigError("majority_hint must be 0 or 1")
        if self.defense is not None:
            try:
                self.defense.validate(k)
            except ValueError as exc:
                raise ConfigError(str(exc)) from None
        if "infer_k" in self.attacks.names and self.defense is None:
            raise ConfigError("infer_k needs the defense enabled")
        if "model_completion" in self.attacks.names and self.attacks.aux_per_class < 1:
            raise ConfigError("aux_per_class must be >= 1")
        return self

    def n_classes(self):
        if self.data.kind == "synthetic":
            return self.data.k
        return load_dataset(self.data).k


def load_dataset(spec: DataSpec):
    if spec.kind == "synthetic":
        return gen_synthetic(spec.n, spec.d, spec.k, spec.weights(), spec.separation, RngStream(spec.seed))
    if spec.kind == "csv":
        return load_csv(spec.path, spec.label_column)
    return load_idx(spec.images, spec.labels)


def split_dataset(spec: DataSpec):
    data = load_dataset(spec)
    return train_test_split(data, spec.test_fraction, RngStream(spec.seed).child("split"))


def _aux_subset(train, per_class, rng):
    picks = []
    for cls in range(train.k):
        members = np.flatnonzero(train.labels == cls)
        take = min(per_class, members.size)
        picks.append(np.sort(rng.choice(members, size=take, replace=False)))
    aux = np.concatenate(picks)
    rest = np.setdiff1d(np.arange(len(train)), aux)
    return train.subset(aux), train.subset(rest)


def run_experiment(cfg: ExperimentConfig, seed=None, data=None):
    """Train, attack and evaluate once.

    Returns ``(RunRecord, {attack: AttackReport}, TrainingResult, pools)``.
    ``data`` may pass a pre-split ``(train, test)`` pair to skip loading.
    """
    train, test = data if data is not None else split_dataset(cfg.data)
    tcfg = cfg.train_config(seed)
    result, pools = fit(train, tcfg, cfg.arch)
    utility = evaluate(result.model, test, pools).as_dict()

    spec = cfg.attacks
    rng = RngStream(tcfg.seed).child("attacks")
    reports = {}
    for name in spec.names:
        if name == "norm":
            rep = norm_attack(result.tap, spec.window)
        elif name == "direction":
            rep = direction_attack(result.tap, spec.majority_hint, spec.window,
                                   spec.reference_size, rng.child("direction"))
        elif name == "spectral":
            rep = spectral_attack(result.tap, spec.spectral_source, spec.majority_hint, spec.window)
        elif name == "model_completion":
            aux, rest = _aux_subset(train, spec.aux_per_class, rng.child("aux"))
            rep = model_completion_attack(result.model.bottom, aux, rest, train.k,
                                          epochs=spec.completion_epochs, rng=rng.child("mc"))
        else:
            K = pools.K
            guess, curve = infer_k_attack(result.tap, train.k, spec.k_max or 2 * K, rng.child("infer-k"),
                                          spec.window, spec.kmeans_restarts, spec.max_points)
            reports[name] = {"guess": guess, "true_K": K, "correct": guess == K,
                             "scores": {str(c): s for c, s in curve.items()}}
            continue
        reports[name] = rep.score_against(train.ids, train.labels, train.k)

    record = RunRecord(
        config=dict(cfg.to_dict(), seed=tcfg.seed),
        losses=[float(x) for x in result.losses],
        initial_loss=float(result.initial_loss),
        utility=utility,
        attacks={n: (r if isinstance(r, dict) else r.summary()) for n, r in reports.items()},
        timing=result.timing.as_dict(),
    )
    return record, reports, result, pools


def cmd_train(cfg: ExperimentConfig, write=True):
    """One run; writes the record JSON and per-attack CSV/JSON to ``output_dir``."""
    cfg.validate()
    record, reports, _, pools = run_experiment(cfg)
    if write:
        out = resolve_output_dir(cfg)
        path = record.save(out)
        stem = path[:-len(".json")]
        for name, rep in reports.items():
            if not isinstance(rep, dict):
                rep.write_csv(f"{stem}.{name}.csv")
                rep.write_json(f"{stem}.{name}.json")
        if pools is not None:
            atomic_write(f"{stem}.pools.txt", pools.to_text())
    return record


def resolve_output_dir(cfg):
    return cfg.output_dir or os.environ.get(OUTPUT_ENV) or "runs"


def sweep_configs(cfg: ExperimentConfig, axis, values):
    """One config per value; all values are checked before any is returned."""
    if axis not in SWEEP_AXES:
        raise ConfigError(f"unknown sweep axis {axis!r}")
    values = list(values)
    if not values:
        raise ConfigError("sweep needs at least one value")
    base = cfg.defense or DefenseConfig(K=None)
    k = cfg.n_classes()
    out = []
    for v in values:
        if axis == "dimension":
            v = int(v)
            if v < k or v % k:
                raise ConfigError(f"dimension {v} is not a multiple of k={k}")
            d = DefenseConfig(**dict(base.as_dict(), K=v))
        else:
            v = float(v)
            if not 0.0 <= v < 1.0:
                raise ConfigError(f"noise level {v} outside [0, 1)")
            d = DefenseConfig(**dict(base.as_dict(), mu=v))
        c = copy.deepcopy(cfg)
        c.defense = d
        out.append((v, c.validate()))
    return out


def _sweep_run(cfg, data):
    return run_experiment(cfg, data=data)[0]


def cmd_sweep(cfg: ExperimentConfig, axis, values, write=True, jobs=1):
    """Run one experiment per value with a shared seed; returns (records, summary rows).

    ``jobs > 1`` runs the values in worker processes; results do not depend
    on the worker count.
    """
    cfg.validate()
    plan = sweep_configs(cfg, axis, values)
    data = split_dataset(cfg.data)
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            done = list(pool.map(_sweep_run, [c for _, c in plan], [data] * len(plan)))
    else:
        done = [_sweep_run(c, data) for _, c in plan]
    records, rows = [], []
    for (value, c), record in zip(plan, done):
        records.append(record)
        row = {"axis": axis, "value": value, "test_utility": record.utility["utility"]}
        for name, summary in record.attacks.items():
            if "leak" in summary:
                row[f"{name}_leak"] = summary["leak"]
        rows.append(row)
        if write:
            record.save(resolve_output_dir(cfg))
    if write:
        _write_rows(os.path.join(resolve_output_dir(cfg), f"sweep-{axis}.csv"), rows)
    return records, rows


def cmd_infer_k(cfg: ExperimentConfig, trials, write=True):
    """Repeat training plus the K-guessing attack over ``trials`` seeds.

    Returns ``(histogram {guess: count}, per-trial rows)``.
    """
    if trials < 1:
        raise ConfigError("trials must be >= 1")
    if cfg.defense is None:
        raise ConfigError("infer-k needs the defense enabled")
    c = copy.deepcopy(cfg)
    c.attacks.names = ["infer_k"]
    c.validate()
    data = split_dataset(c.data)
    rows = []
    for t in range(trials):
        record, reports, _, _ = run_experiment(c, seed=cfg.seed + t, data=data)
        rows.append({"trial": t, "seed": cfg.seed + t, "guess": reports["infer_k"]["guess"],
                     "true_K": reports["infer_k"]["true_K"]})
    hist = Counter(r["guess"] for r in rows)
    if write:
        out = resolve_output_dir(cfg)
        os.makedirs(out, exist_ok=True)
        _write_rows(os.path.join(out, "infer-k-histogram.csv"),
                    [{"guess": g, "count": hist[g]} for g in sorted(hist)])
        _write_rows(os.path.join(out, "infer-k-trials.csv"), rows)
    return dict(hist), rows


REPORT_COLUMNS = ["run_id", "K", "norm_standard", "mu", "test_utility", "attack", "leak"]


def cmd_report(records_dir, out_path=None):
    """Flatten every record under ``records_dir`` into (run, defense, utility, attack, leak) rows.

    Malformed record files are skipped with a warning. Raises ``ConfigError``
    when no valid record is found.
    """
    rows, valid = [], 0
    names = sorted(f for f in os.listdir(records_dir) if f.endswith(".json") and f.count(".") == 1)
    for name in names:
        path = os.path.join(records_dir, name)
        try:
            record = RunRecord.load(path)
            defense = record.config.get("defense") or {}
            found = []
            for attack, summary in sorted(record.attacks.items()):
                if "leak" not in summary:
                    continue
                found.append({
                    "run_id": name[:-5], "K": defense.get("K"),
                    "norm_standard": defense.get("norm_standard", "off"),
                    "mu": defense.get("mu", 0.0),
                    "test_utility": record.utility["utility"],
                    "attack": attack, "leak": summary["leak"],
                })
        except (OSError, ValueError, KeyError, TypeError, AttributeError) as exc:
            log.warning("skipping %s: %s", path, exc)
            continue
        valid += 1
        rows.extend(found)
    if not valid:
        raise ConfigError(f"no valid run records in {records_dir}")
    if out_path:
        _write_rows(out_path, rows, list(REPORT_COLUMNS))
    return rows


def _write_rows(path, rows, columns=None):
    columns = columns or (list(rows[0]) if rows else [])
    for r in rows:
        for key in r:
            if key not in columns:
                columns.append(key)
    text_rows = [",".join(columns)]
    for r in rows:
        text_rows.append(",".join("" if r.get(c) is None else str(r.get(c)) for c in columns))
    atomic_write(path, "\n".join(text_rows) + "\n")


# -- config files ---------------------------------------------------------------

LIST_KEYS = {"names", "class_weights", "tap_window"}


def load_config(path) -> ExperimentConfig:
    """Read an INI-style config (sections data/arch/train/defense/attacks)."""
    parser = configparser.ConfigParser()
    parser.optionxform = str  # keys are case-sensitive (k vs K)
    if not parser.read(path):
        raise ConfigError(f"cannot read config {path}")
    d = {"data": {}, "arch": {}, "attacks": {}}
    for section in parser.sections():
        items = {k: _parse_value(v) for k, v in parser.items(section)}
        for key in LIST_KEYS.intersection(items):
            if not isinstance(items[key], list):
                items[key] = [items[key]]
        if section == "train":
            d.update(items)
        elif section == "defense":
            if items.pop("enabled", True):
                d["defense"] = items
        elif section in d:
            d[section] = items
        else:
            raise ConfigError(f"unknown config section [{section}]")
    try:
        return ExperimentConfig.from_dict(d)
    except TypeError as exc:
        raise ConfigError(str(exc)) from None


def _parse_value(text):
    text = text.strip()
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        pass
    if "," in text:
        return [_parse_value(t) for t in text.split(",")]
    return text
