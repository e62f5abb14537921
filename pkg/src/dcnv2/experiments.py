"""Experiment runner behind the command-line interface.

Every command writes into ``out_dir``: the normalized config, one
``run<i>/`` directory per repeat and ``summary.csv`` with one row per run
plus a final mean/stddev row. Repeats differ only in their seed
(``seed + i``); the data seed stays fixed.
"""

from __future__ import annotations

import csv
import json
import logging
import math
import time
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from . import analysis, gradcheck, polyoracle
from .core import Rng
from .io import (
    CheckpointError,
    ConfigError,
    DataError,
    ExperimentConfig,
    build_embedding,
    load_checkpoint,
    load_tabular_csv,
    parse_columns,
    save_checkpoint,
    serialize_config,
    write_metrics,
)
from .layers import CrossLayer, DCNv1CrossLayer, LowRankCrossLayer
from .model import Model
from .optim import ArrayDataset, DivergenceError, TrainHistory, train
from .synth import make_combined, make_f1, make_f2, make_f3, make_homogeneous, sample_dataset

log = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_CHECK_FAILED = 1
EXIT_CONFIG = 3
EXIT_DIVERGENCE = 4
EXIT_IO = 5

SUMMARY_HEADER = ["run", "seed", "loss", "metric", "metric_std"]

# (train, test) sizes used when ``num_samples`` is 0
DEFAULT_SIZES = {"f3": (500_000, 50_000)}
SMALL_SIZES = (100_000, 20_000)


def synthetic_spec(name: str, seed: int = 0):
    if name == "f1":
        return make_f1()
    if name == "f2":
        return make_f2()
    if name == "f3":
        return make_f3(seed)
    if name in ("homogeneous3", "homogeneous4"):
        return make_homogeneous(int(name[-1]), seed=seed)
    if name == "combined":
        return make_combined(seed)
    raise ConfigError(f"unknown synthetic dataset {name!r}")


def synthetic_data(name: str, seed: int = 0, num_samples: int = 0, split: float = 0.8):
    spec = synthetic_spec(name, seed)
    if num_samples:
        return sample_dataset(spec, num_samples, seed=seed, split=split)
    n_train, n_test = DEFAULT_SIZES.get(name, SMALL_SIZES)
    return sample_dataset(spec, n_train + n_test, seed=seed, split=n_train / (n_train + n_test))


@dataclass
class FitResult:
    model: Model
    history: TrainHistory
    seed: int
    seconds: float

    @property
    def metric(self) -> float:
        """Final held-out metric with EMA weights (RMSE or AUC)."""
        return self.history.final.eval_metric if self.history.records else math.nan

    @property
    def loss(self) -> float:
        return self.history.final.eval_loss if self.history.records else math.nan

    @property
    def raw_metric(self) -> float:
        return self.history.final.raw_eval_metric if self.history.records else math.nan


def fit(cfg: ExperimentConfig, train_set, test_set, seed: int, input_dim: int | None = None, embedding=None) -> FitResult:
    """Build, initialize and train one model; evaluation uses the EMA weights."""
    model = Model(input_dim, cfg.architecture(), cfg.task, embedding=embedding)
    model.init_params(Rng(seed))
    t0 = time.perf_counter()
    history = train(model, train_set, cfg.train_config(seed), test_set)
    return FitResult(model, history, seed, time.perf_counter() - t0)


def fit_synthetic(cfg: ExperimentConfig, seed: int | None = None, data=None) -> FitResult:
    """Train ``cfg`` on its synthetic dataset; pass ``data`` to reuse a sampled split."""
    train_set, test_set = data or synthetic_data(cfg.dataset, cfg.data_seed, cfg.num_samples, cfg.split)
    return fit(cfg, train_set, test_set, cfg.seed if seed is None else seed, input_dim=train_set.inputs.shape[1])


# -- per-command runs ----------------------------------------------------------------


@dataclass
class RunOutcome:
    seed: int
    loss: float
    metric: float
    ok: bool = True
    extra: dict = field(default_factory=dict)


def _finish_training(cfg: ExperimentConfig, res: FitResult, run_dir: Path) -> RunOutcome:
    write_metrics(run_dir / "metrics.csv", res.history, wall_clock=cfg.wall_clock)
    save_checkpoint(res.model, run_dir / "model.ckpt")
    return RunOutcome(res.seed, res.loss, res.metric)


def _run_synth_fit(cfg, seed, run_dir, shared):
    if "data" not in shared:
        shared["data"] = synthetic_data(cfg.dataset, cfg.data_seed, cfg.num_samples, cfg.split)
    return _finish_training(cfg, fit_synthetic(cfg, seed, shared["data"]), run_dir)


def _split_rows(n: int, split: float, seed: int):
    perm = Rng(seed).permutation(n)
    n_train = min(max(int(round(split * n)), 1), n - 1)
    return np.sort(perm[:n_train]), np.sort(perm[n_train:])


def _run_train(cfg, seed, run_dir, shared):
    if "data" not in shared:
        schema = parse_columns(cfg.columns)
        dataset, vocabs = load_tabular_csv(cfg.data_path, schema, cfg.task)
        if len(dataset) < 2:
            raise DataError("need at least two rows to form a train/test split")
        tr, te = _split_rows(len(dataset), cfg.split, cfg.data_seed)
        shared["data"] = (
            ArrayDataset(dataset.inputs.take(tr), dataset.labels[tr]),
            ArrayDataset(dataset.inputs.take(te), dataset.labels[te]),
        )
        shared["embedding_args"] = (schema, vocabs)
        (Path(cfg.out_dir) / "vocab.json").write_text(
            json.dumps({k: v.index for k, v in vocabs.items()}, indent=1, sort_keys=True), encoding="utf-8"
        )
    train_set, test_set = shared["data"]
    embedding = build_embedding(*shared["embedding_args"], embed_size=cfg.embed_size)
    return _finish_training(cfg, fit(cfg, train_set, test_set, seed, embedding=embedding), run_dir)


def _run_gradcheck(cfg, seed, run_dir, shared):
    results = gradcheck.run_layer_suite(cfg.instances, seed) + gradcheck.run_model_suite(cfg.instances, seed)
    with (run_dir / "gradcheck.csv").open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["check", "max_rel_error", "passed"])
        for r in results:
            w.writerow([r.name, repr(r.max_error), int(r.passed)])
    worst = max(r.max_error for r in results)
    failed = [r.name for r in results if not r.passed]
    print(f"gradcheck: {len(results)} instances, worst rel. error {worst:.3e}, {len(failed)} failed")
    return RunOutcome(seed, math.nan, worst, ok=not failed)


def oracle_checks(d: int, depth: int, instances: int, seed: int):
    """Symbolic-vs-numeric, degree, coefficient-formula and interaction-sum checks.

    Yields ``(check, instance, error, passed, example_poly)`` rows.
    """
    flags = [(b, r) for b in (True, False) for r in (True, False)]
    for i in range(instances):
        gen = np.random.default_rng([seed, i])
        pts = gen.uniform(-1.0, 1.0, (50, d))
        for use_bias, use_res in flags:
            v = polyoracle.CrossNetVariant.random(gen, d, depth, use_bias, use_res)
            per, total = polyoracle.expand_crossnet(v)
            num = v.forward(pts)
            err = max(float(np.max(np.abs(p.evaluate(pts) - num[:, c]))) for c, p in enumerate(per))
            name = f"expand[bias={int(use_bias)},res={int(use_res)}]"
            yield name, i, err, err < 1e-10, total
            deg = polyoracle.max_degree(total)
            yield f"degree[bias={int(use_bias)},res={int(use_res)}]", i, float(deg), deg <= depth + 1, None
        v = polyoracle.CrossNetVariant.random(gen, d, depth, use_bias=False)
        _, total = polyoracle.expand_crossnet(v)
        err = max(
            abs(polyoracle.monomial_coefficient(a, v.weights) - total[a])
            for a in polyoracle.all_multi_indices(d, 2, depth + 1)
        )
        yield "coefficient_formula", i, err, err < 1e-10, None
        sizes = _random_partition(gen, d)
        part = polyoracle.FeaturePartition(sizes)
        x = gen.uniform(-1.0, 1.0, d)
        out = v.forward(x)
        err = max(
            float(np.max(np.abs(polyoracle.reconstruct_block(f, x, v.weights, part) - out[part.block(f)])))
            for f in range(1, part.k + 1)
        )
        yield "interaction_sum", i, err, err < 1e-10, None


def _random_partition(gen, d: int, max_k: int = 3) -> list[int]:
    k = int(gen.integers(1, min(d, max_k) + 1))
    cuts = sorted(gen.choice(np.arange(1, d), size=k - 1, replace=False).tolist()) if k > 1 else []
    bounds = [0, *cuts, d]
    return [b - a for a, b in zip(bounds, bounds[1:])]


def _run_oracle(cfg, seed, run_dir, shared):
    depth = cfg.num_cross
    if not 1 <= depth <= polyoracle.MAX_EXPAND_L:
        raise ConfigError(f"oracle needs 1 <= num_cross <= {polyoracle.MAX_EXPAND_L}")
    worst = 0.0
    ok = True
    example = None
    with (run_dir / "oracle.csv").open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["check", "instance", "value", "passed"])
        for name, i, err, passed, poly in oracle_checks(cfg.oracle_dim, depth, cfg.instances, seed):
            w.writerow([name, i, repr(err), int(passed)])
            ok &= passed
            if not name.startswith("degree"):
                worst = max(worst, err)
            if example is None and poly is not None:
                example = poly
    (run_dir / "polynomial.txt").write_text(example.dumps(), encoding="utf-8")
    print(f"oracle: worst abs. error {worst:.3e}, {'all passed' if ok else 'FAILURES'}")
    return RunOutcome(seed, math.nan, worst, ok=ok)


def cross_weight_matrix(layer) -> np.ndarray | None:
    """Effective ``W`` of a cross layer, or None for mixtures."""
    if isinstance(layer, CrossLayer):
        return layer.W.value
    if isinstance(layer, LowRankCrossLayer):
        return layer.U.value @ layer.V.value.T
    if isinstance(layer, DCNv1CrossLayer):
        return np.outer(np.ones(layer.dim), layer.w.value)
    return None


def _partition_for(cfg: ExperimentConfig, model: Model) -> polyoracle.FeaturePartition:
    d = model.input_dim
    if cfg.feature_sizes:
        if sum(cfg.feature_sizes) != d:
            raise ConfigError(f"feature_sizes sum to {sum(cfg.feature_sizes)}, model width is {d}")
        return polyoracle.FeaturePartition(cfg.feature_sizes)
    emb = model.embedding
    if emb is not None:
        sizes = list(emb.embed_sizes) + [1] * emb.num_dense
        names = list(emb.names) + [f"dense{i}" for i in range(emb.num_dense)]
        return polyoracle.FeaturePartition(sizes, names)
    return polyoracle.FeaturePartition([1] * d, [f"x{i + 1}" for i in range(d)])


def _run_analyze(cfg, seed, run_dir, shared):
    model = load_checkpoint(cfg.checkpoint)
    part = _partition_for(cfg, model)
    ranks = []
    for i, layer in enumerate(model.cross_layers):
        W = cross_weight_matrix(layer)
        if W is None:
            print(f"cross{i}: mixture layer, no single weight matrix to analyze")
            continue
        rep = analysis.spectrum(W)
        analysis.export_report(rep, run_dir / f"spectrum_cross{i}.csv")
        analysis.export_report(analysis.block_norms(W, part), run_dir / f"block_norms_cross{i}.csv")
        r = analysis.numerical_rank(rep, cfg.rank_tolerance)
        ranks.append(r)
        print(f"cross{i}: sigma_max={rep.sigma_max:.4g} R_T(T={cfg.rank_tolerance:g})={r} of {len(rep.normalized)}")
    return RunOutcome(seed, math.nan, float(np.mean(ranks)) if ranks else math.nan)


RUNNERS = {
    "synth-fit": _run_synth_fit,
    "train": _run_train,
    "gradcheck": _run_gradcheck,
    "oracle": _run_oracle,
    "analyze": _run_analyze,
}


def write_summary(path, outcomes: list[RunOutcome]) -> Path:
    metrics = np.array([o.metric for o in outcomes])
    losses = np.array([o.loss for o in outcomes])
    std = float(np.std(metrics, ddof=1)) if len(outcomes) > 1 else 0.0
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(SUMMARY_HEADER)
        for i, o in enumerate(outcomes):
            w.writerow([i, o.seed, repr(o.loss), repr(o.metric), ""])
        w.writerow(["mean", "", repr(float(np.mean(losses))), repr(float(np.mean(metrics))), repr(std)])
    return Path(path)


def run_experiment(cfg: ExperimentConfig) -> int:
    """Run ``cfg.repeats`` seeds of ``cfg.command``; return a process exit code."""
    out = Path(cfg.out_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
        (out / "config.cfg").write_text(serialize_config(cfg), encoding="utf-8")
        outcomes = []
        shared: dict = {}
        for i in range(cfg.repeats):
            seed = cfg.seed + i
            run_dir = out / f"run{i}"
            run_dir.mkdir(exist_ok=True)
            outcomes.append(RUNNERS[cfg.command](replace(cfg, seed=seed), seed, run_dir, shared))
        write_summary(out / "summary.csv", outcomes)
    except ConfigError as exc:
        log.error("invalid configuration: %s", exc)
        return EXIT_CONFIG
    except DivergenceError as exc:
        log.error("training diverged: %s", exc)
        return EXIT_DIVERGENCE
    except (OSError, DataError, CheckpointError) as exc:
        log.error("I/O error: %s", exc)
        return EXIT_IO
    return EXIT_OK if all(o.ok for o in outcomes) else EXIT_CHECK_FAILED
