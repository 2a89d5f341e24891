"""Evaluation protocols and the seeded method x seed experiment runner.

Run directory layout (one per method and seed)::

    <out>/<method>/seed<k>/history.csv    per-step telemetry
    <out>/<method>/seed<k>/model.ckpt     final parameters
    <out>/<method>/seed<k>/features.csv   optional, see dump_features
    <out>/runs.csv                        one row per run
    <out>/summary.csv                     mean and std per method, computed from runs.csv

Features CSV layout: ``protocol,index,label,domain_tag,f0,...,f{d-1}`` with
one row per test sample, floats written with ``repr`` so they read back
exactly.
"""

from __future__ import annotations

import csv
import hashlib
import json
import logging
import math
import os
import traceback
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import adaptation
from .data import DatasetBundle, MixtureSpec, make_bundle
from .engine import TrainConfig, train, write_history
from .model import ModelParams, features_numpy, forward_numpy, save_checkpoint

log = logging.getLogger(__name__)

PROTOCOLS = ("L", "UL", "US", "UU")
EVAL_STREAM = 6


def predict(params: ModelParams, pixels: np.ndarray, chunk: int = 1000) -> np.ndarray:
    out = [np.argmax(forward_numpy(pixels[i:i + chunk], params.encoder, params.main_head), axis=1)
           for i in range(0, len(pixels), chunk)]
    return np.concatenate(out) if out else np.empty(0, dtype=int)


@dataclass
class UUScore:
    accuracy: float | None
    mask_rate: float
    n_masked: int


def pool_pseudo_labels(params: ModelParams, bundle: DatasetBundle, config: TrainConfig | None = None):
    """Re-derive the mask decisions on the whole unlabeled pool.

    Un-augmented pool images go through the run's pipeline (feature
    adaptation when enabled) in consecutive batches of ``mu * B``.
    Returns (hard labels, mask).
    """
    config = config or TrainConfig(ssfa_enabled=False)
    pixels = bundle.unlabeled.pixels
    size = config.B * config.mu
    rng = np.random.default_rng([config.seed, EVAL_STREAM])
    hard, mask = [], []
    for start in range(0, len(pixels), size):
        u = pixels[start:start + size]
        if config.ssfa_enabled and len(u) > 1:
            out = adaptation.fam_pipeline(params, u, config, rng)
            hard.append(out.hard_labels)
            mask.append(out.mask)
        else:
            q, h = adaptation.baseline_pseudo(u, params)
            hard.append(h)
            mask.append(q.max(axis=1) > config.tau)
    return np.concatenate(hard), np.concatenate(mask)


def uu_score(params: ModelParams, bundle: DatasetBundle, config: TrainConfig | None = None) -> UUScore:
    hard, mask = pool_pseudo_labels(params, bundle, config)
    labels, _ = bundle.unlabeled.reveal("UU evaluation")
    n = int(mask.sum())
    acc = float(np.mean(hard[mask] == labels[mask])) if n else None
    return UUScore(acc, float(mask.mean()) if len(mask) else 0.0, n)


def evaluate(params: ModelParams, bundle: DatasetBundle, protocol: str,
             config: TrainConfig | None = None) -> float:
    """Top-1 accuracy on a test set, or UU pseudo-label accuracy.

    An empty masked-in set makes UU undefined; it comes back as nan, never 0.
    """
    if protocol == "UU":
        score = uu_score(params, bundle, config)
        return float("nan") if score.accuracy is None else score.accuracy
    if protocol not in PROTOCOLS:
        raise ValueError(f"unknown protocol {protocol!r}; expected one of {PROTOCOLS}")
    split = bundle.test_set(protocol)
    return float(np.mean(predict(params, split.pixels) == split.labels))


def per_domain(params: ModelParams, bundle: DatasetBundle, protocol: str = "UL") -> dict:
    """{domain name: (share of the test set, accuracy)}; shares times accuracies sum to the total."""
    split = bundle.test_set(protocol)
    correct = predict(params, split.pixels) == split.labels
    names = bundle.domain_names
    out = {}
    for tag in np.unique(split.domains):
        sel = split.domains == tag
        out[names[tag]] = (float(sel.mean()), float(correct[sel].mean()))
    return out


# ------------------------------------------------------------------ features

def dump_features(params: ModelParams, bundle: DatasetBundle, path) -> int:
    """Write encoder features of every test sample; returns the row count."""
    rows = 0
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        width = params.arch.widths[-1]
        w.writerow(["protocol", "index", "label", "domain_tag"] + [f"f{j}" for j in range(width)])
        for protocol in ("L", "UL", "US"):
            split = bundle.test_set(protocol)
            feats = features_numpy(split.pixels, params)
            for i, (f, y, t) in enumerate(zip(feats, split.labels, split.domains)):
                w.writerow([protocol, i, int(y), int(t)] + [repr(float(v)) for v in f])
                rows += 1
    return rows


def read_features(path) -> dict:
    """{protocol: (features, labels, domain tags)} from a dump_features file."""
    acc: dict = {}
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        next(reader)
        for row in reader:
            acc.setdefault(row[0], []).append(row)
    out = {}
    for protocol, rows in acc.items():
        feats = np.array([[float(v) for v in r[4:]] for r in rows])
        out[protocol] = (feats, np.array([int(r[2]) for r in rows]), np.array([int(r[3]) for r in rows]))
    return out


# ------------------------------------------------------------------ experiments

@dataclass(frozen=True)
class Method:
    name: str
    learner: str = "fixed_threshold"
    ssfa: bool = True
    aux_task: str = "rot"
    overrides: tuple = ()

    def config(self, base: TrainConfig, seed: int) -> TrainConfig:
        return base.replace(learner=self.learner, ssfa_enabled=self.ssfa, aux_task=self.aux_task,
                            seed=seed, **dict(self.overrides))


FIXMATCH = Method("fixmatch", ssfa=False, overrides=(("lambda_a", 0.0),))
SSFA_ROT = Method("ssfa_rot")


@dataclass
class ExperimentSpec:
    n_labeled: int = 400
    ratio: float = 1.0
    seeds: tuple = (0, 1, 2, 3, 4)
    methods: tuple = (FIXMATCH, SSFA_ROT)
    base: TrainConfig = field(default_factory=TrainConfig)
    out: str | None = None
    mixture: MixtureSpec | None = None
    n_classes: int | None = None
    n_unlabeled: int | None = None
    n_test: int | None = None
    features: bool = False

    def __post_init__(self):
        self.seeds = tuple(self.seeds)
        if not self.seeds:
            raise ValueError("an experiment needs at least one seed")
        names = [m.name for m in self.methods]
        if len(set(names)) != len(names):
            raise ValueError(f"method names must be unique, got {names}")
        for m in self.methods:
            m.config(self.base, self.seeds[0])

    def bundle(self, seed: int) -> DatasetBundle:
        kw = {}
        if self.n_classes is not None:
            kw["n_classes"] = self.n_classes
        if self.n_test is not None:
            kw["n_test"] = self.n_test
        return make_bundle(self.n_labeled, self.n_unlabeled,
                           mixture=self.mixture or MixtureSpec.from_ratio(self.ratio), seed=seed, **kw)


def config_hash(config: TrainConfig) -> str:
    blob = json.dumps(config.as_dict(), sort_keys=True, default=list).encode()
    return hashlib.sha256(blob).hexdigest()[:16]


RUN_FIELDS = ("method", "seed", "L", "UL", "US", "UU", "mask_rate", "config_hash", "bundle_hash", "error")


@dataclass
class RunResult:
    method: str
    seed: int
    metrics: dict
    config_hash: str
    bundle_hash: str
    error: str = ""
    params: ModelParams | None = None
    history: list | None = None

    def row(self) -> dict:
        row = {"method": self.method, "seed": self.seed, "config_hash": self.config_hash,
               "bundle_hash": self.bundle_hash, "error": self.error}
        for k in ("L", "UL", "US", "UU", "mask_rate"):
            v = self.metrics.get(k, float("nan"))
            row[k] = repr(float(v))
        return row


def run_single(method: Method, config: TrainConfig, bundle: DatasetBundle, run_dir: Path | None = None,
               features: bool = False, keep: bool = False) -> RunResult:
    """Train one configuration and evaluate every protocol; failures are captured, not raised."""
    chash, bhash = config_hash(config), bundle.digest()
    try:
        params, history = train(config, bundle)
        uu = uu_score(params, bundle, config)
        metrics = {p: evaluate(params, bundle, p) for p in ("L", "UL", "US")}
        metrics["UU"] = float("nan") if uu.accuracy is None else uu.accuracy
        metrics["mask_rate"] = uu.mask_rate
        if run_dir is not None:
            run_dir.mkdir(parents=True, exist_ok=True)
            write_history(history, run_dir / "history.csv")
            save_checkpoint(params, run_dir / "model.ckpt")
            if features:
                dump_features(params, bundle, run_dir / "features.csv")
        return RunResult(method.name, config.seed, metrics, chash, bhash,
                         params=params if keep else None, history=history if keep else None)
    except Exception as exc:  # recorded in the summary; other runs continue
        log.error("run %s seed %d failed: %s", method.name, config.seed, exc)
        log.debug("%s", traceback.format_exc())
        return RunResult(method.name, config.seed, {}, chash, bhash, error=f"{type(exc).__name__}: {exc}")


def _job(args):
    spec, method, seed, keep = args
    run_dir = Path(spec.out) / method.name / f"seed{seed}" if spec.out else None
    return run_single(method, method.config(spec.base, seed), spec.bundle(seed), run_dir,
                      spec.features, keep)


def thread_cap() -> int:
    raw = os.environ.get("SSFA_LAB_THREADS", "1")
    try:
        return max(1, int(raw))
    except ValueError:
        raise ValueError(f"SSFA_LAB_THREADS must be an integer, got {raw!r}") from None


def run_experiment(spec: ExperimentSpec, keep_params: bool = False) -> list[RunResult]:
    """All (method, seed) runs, then runs.csv and summary.csv if ``spec.out`` is set.

    Runs share one bundle per seed.  Up to ``SSFA_LAB_THREADS`` run in
    parallel processes; serial otherwise.
    """
    workers = thread_cap()
    results = []
    if workers == 1:
        for seed in spec.seeds:
            bundle = spec.bundle(seed)
            for method in spec.methods:
                run_dir = Path(spec.out) / method.name / f"seed{seed}" if spec.out else None
                results.append(run_single(method, method.config(spec.base, seed), bundle, run_dir,
                                          spec.features, keep_params))
    else:
        jobs = [(spec, m, s, keep_params) for s in spec.seeds for m in spec.methods]
        with ProcessPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(_job, jobs))
    if spec.out:
        out = Path(spec.out)
        out.mkdir(parents=True, exist_ok=True)
        write_runs(results, out / "runs.csv")
        write_summary(aggregate(read_runs(out / "runs.csv")), out / "summary.csv")
    return results


def write_runs(results, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=RUN_FIELDS)
        w.writeheader()
        for r in results:
            w.writerow(r.row())


def read_runs(path) -> list[dict]:
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


SUMMARY_METRICS = ("L", "UL", "US", "UU", "mask_rate")


def aggregate(rows) -> list[dict]:
    """Mean and std (population) per method over successful runs; UU ignores undefined seeds."""
    by_method: dict = {}
    for row in rows:
        by_method.setdefault(row["method"], []).append(row)
    table = []
    for method, group in by_method.items():
        ok = [r for r in group if not r["error"]]
        entry = {"method": method, "n_runs": len(group), "n_ok": len(ok),
                 "config_hashes": ";".join(sorted({r["config_hash"] for r in group})),
                 "bundle_hashes": ";".join(sorted({r["bundle_hash"] for r in group})),
                 "errors": " | ".join(f"seed{r['seed']}: {r['error']}" for r in group if r["error"])}
        for k in SUMMARY_METRICS:
            vals = np.array([float(r[k]) for r in ok], dtype=np.float64)
            vals = vals[np.isfinite(vals)]
            entry[f"{k}_mean"] = float(vals.mean()) if len(vals) else float("nan")
            entry[f"{k}_std"] = float(vals.std()) if len(vals) else float("nan")
        table.append(entry)
    return table


def write_summary(table, path) -> None:
    fields = (["method", "n_runs", "n_ok"] + [f"{k}_{s}" for k in SUMMARY_METRICS for s in ("mean", "std")]
              + ["config_hashes", "bundle_hashes", "errors"])
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=fields)
        w.writeheader()
        for entry in table:
            w.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in entry.items()})


def seed_mean(results, method: str, metric: str) -> float:
    vals = [r.metrics.get(metric, math.nan) for r in results if r.method == method and not r.error]
    vals = [v for v in vals if math.isfinite(v)]
    return float(np.mean(vals)) if vals else math.nan
