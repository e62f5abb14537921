"""Acceptance criteria, each at its stated tolerance.

Every test records a single pass/fail line (see ``conftest.acceptance``). The
training scenarios use the shipped configs under ``configs/`` and take about
half an hour on one CPU core in total.
"""

import time
from collections import Counter
from dataclasses import replace
from pathlib import Path

import numpy as np
import pytest

from dcnv2 import polyoracle
from dcnv2.core import Rng
from dcnv2.experiments import fit_synthetic, synthetic_data
from dcnv2.gradcheck import CROSS_KINDS, LAYER_KINDS, STRUCTURES, TOLERANCE, run_layer_suite, run_model_suite
from dcnv2.io import load_config
from dcnv2.layers import CrossLayer, DCNv1CrossLayer, GateMode, LowRankCrossLayer, MixtureCrossLayer
from dcnv2.model import Architecture, Model

CONFIGS = Path(__file__).resolve().parent.parent / "configs"
DEPTHS = range(1, 6)
SEEDS = range(5)


def config(name):
    return load_config(CONFIGS / f"{name}.cfg")


def fmt(values):
    return "[" + ", ".join(f"{v:.2e}" for v in values) + "]"


@pytest.mark.slow
def test_c1_f1_exact_fit(acceptance):
    t0 = time.perf_counter()
    res = fit_synthetic(config("fit_f1"))
    seconds = time.perf_counter() - t0
    size = res.model.param_count()
    ok = res.metric < 1e-6 and size == 24 and seconds < 120
    acceptance("C1 f1 one cross layer", ok, f"RMSE={res.metric:.2e} (<1e-6), params={size} (==24), {seconds:.0f}s (<120s)")
    assert ok


@pytest.mark.slow
def test_c2_f2_full_rank_vs_rank_one(acceptance):
    t0 = time.perf_counter()
    cfg = config("fit_f2")
    data = synthetic_data(cfg.dataset, cfg.data_seed, cfg.num_samples, cfg.split)
    v2 = fit_synthetic(cfg, data=data).metric
    v1 = fit_synthetic(replace(cfg, cross_kind="dcn_v1"), data=data).metric
    seconds = time.perf_counter() - t0
    ok = v2 < 1e-6 and v1 > 1e-2 and v1 / v2 >= 1e4 and seconds < 120
    acceptance("C2 f2 DCN-V2 vs DCN-v1", ok, f"V2 RMSE={v2:.2e} (<1e-6), v1 RMSE={v1:.2e} (>1e-2), {seconds:.0f}s (<120s)")
    assert ok


@pytest.mark.slow
def test_c3_f3_ordering_over_seeds(acceptance):
    t0 = time.perf_counter()
    cfg = config("fit_f3")
    data = synthetic_data(cfg.dataset, cfg.data_seed, cfg.num_samples, cfg.split)
    variants = {
        "v2": cfg,
        "dnn": replace(cfg, structure="dnn_only", num_cross=0, deep_sizes=[100]),
        "v1": replace(cfg, cross_kind="dcn_v1"),
    }
    sizes = {}
    rmse = {k: [] for k in variants}
    for seed in SEEDS:
        for name, c in variants.items():
            res = fit_synthetic(c, seed, data)
            rmse[name].append(res.metric)
            sizes[name] = res.model.param_count()
    seconds = time.perf_counter() - t0
    v2, dnn, v1 = (np.array(rmse[k]) for k in ("v2", "dnn", "v1"))
    ordered = bool(np.all((v2 < dnn) & (dnn < v1)))
    ok = bool(np.all(v2 < 1e-3) and np.all(dnn > 1e-1) and np.all(v1 > 1.0)) and ordered and seconds < 900
    acceptance(
        "C3 f3 DCN-V2 < DNN < DCN-v1",
        ok,
        f"V2={fmt(v2)} (<1e-3), DNN={fmt(dnn)} (>1e-1), v1={fmt(v1)} (>1.0), "
        f"params V2/DNN/v1={sizes['v2']}/{sizes['dnn']}/{sizes['v1']}, {seconds:.0f}s (<900s)",
    )
    assert ok


@pytest.mark.slow
def test_c4_homogeneous_depth_ablation(acceptance):
    cfg = config("ablation_homogeneous3")
    data = synthetic_data(cfg.dataset, cfg.data_seed, cfg.num_samples, cfg.split)
    plain = np.zeros((len(SEEDS), len(DEPTHS)))
    full = np.zeros_like(plain)
    for i, seed in enumerate(SEEDS):
        for j, depth in enumerate(DEPTHS):
            plain[i, j] = fit_synthetic(replace(cfg, num_cross=depth), seed, data).metric
            full[i, j] = fit_synthetic(replace(cfg, num_cross=depth, use_bias=True, use_residual=True), seed, data).metric
    votes = Counter(int(np.argmin(row)) + 1 for row in plain)
    winner, count = votes.most_common(1)[0]
    full_mean = full.mean(axis=0)
    gap = float(np.max(full_mean[2:5]) / full_mean[1])
    ok = winner == 2 and count > len(SEEDS) // 2 and gap <= 10.0
    acceptance(
        "C4 order-3 ablation",
        ok,
        f"plain argmin votes={dict(sorted(votes.items()))} (majority at depth 2), plain mean={fmt(plain.mean(axis=0))}, "
        f"bias+residual mean={fmt(full_mean)}, max depth3-5 / depth2={gap:.2f} (<=10)",
    )
    assert ok


@pytest.mark.slow
def test_c5_combined_order_depths(acceptance):
    t0 = time.perf_counter()
    cfg = config("combined_order")
    data = synthetic_data(cfg.dataset, cfg.data_seed, cfg.num_samples, cfg.split)
    cross = [fit_synthetic(replace(cfg, num_cross=L), data=data).metric for L in DEPTHS]
    dnn = [
        fit_synthetic(replace(cfg, structure="dnn_only", num_cross=0, deep_sizes=[50] * L), data=data).metric
        for L in DEPTHS
    ]
    seconds = time.perf_counter() - t0
    drop = cross[2] / cross[0]
    plateau = max(abs(cross[3] - cross[2]), abs(cross[4] - cross[2])) / cross[2]
    ok = drop <= 0.2 and plateau <= 0.15 and min(dnn) > 5e-2 and seconds < 1200
    acceptance(
        "C5 combined-order depth sweep",
        ok,
        f"cross={fmt(cross)}, depth3/depth1={drop:.3f} (<=0.2), depth4-5 vs 3 {plateau:.1%} (<=15%), "
        f"DNN={fmt(dnn)} (all >5e-2), {seconds:.0f}s (<1200s)",
    )
    assert ok


def test_c6_gradient_suite(acceptance):
    layer = run_layer_suite(20, seed=0)
    model = run_model_suite(20, seed=0)
    per_kind = Counter(r.name for r in layer)
    per_arch = Counter("/".join(r.name.split("/")[:2]) for r in model)
    expected_arch = {f"{s}/{c}" for s in STRUCTURES for c in (CROSS_KINDS if s != "dnn_only" else ("full",))}
    worst = max(r.max_error for r in layer + model)
    ok = (
        set(per_kind) == set(LAYER_KINDS)
        and min(per_kind.values()) >= 20
        and set(per_arch) == expected_arch
        and min(per_arch.values()) >= 20
        and all(r.passed for r in layer + model)
    )
    acceptance(
        "C6 finite-difference gradients",
        ok,
        f"{len(layer)} layer + {len(model)} model instances, worst rel. error {worst:.2e} (<{TOLERANCE:g})",
    )
    assert ok


def test_c7_polynomial_oracle(acceptance):
    flags = [(b, r) for b in (True, False) for r in (True, False)]
    worst_expand = worst_coef = worst_recon = 0.0
    degree_ok = True
    for d in range(1, 5):
        for depth in range(1, 4):
            for seed in range(5):
                gen = np.random.default_rng([seed, d, depth])
                pts = gen.uniform(-1.0, 1.0, (50, d))
                for use_bias, use_res in flags:
                    v = polyoracle.CrossNetVariant.random(gen, d, depth, use_bias, use_res)
                    per, total = polyoracle.expand_crossnet(v)
                    num = v.forward(pts)
                    for c, p in enumerate(per):
                        worst_expand = max(worst_expand, float(np.max(np.abs(p.evaluate(pts) - num[:, c]))))
                    degree_ok &= polyoracle.max_degree(total) == depth + 1
                if d <= 3:
                    v = polyoracle.CrossNetVariant.random(gen, d, depth, use_bias=False)
                    _, total = polyoracle.expand_crossnet(v)
                    for alpha in polyoracle.all_multi_indices(d, 2, depth + 1):
                        worst_coef = max(worst_coef, abs(polyoracle.monomial_coefficient(alpha, v.weights) - total[alpha]))
    for sizes in ([1], [2], [1, 1], [2, 1], [1, 2, 1], [2, 2, 2]):
        part = polyoracle.FeaturePartition(sizes)
        for depth in range(0, 4):
            gen = np.random.default_rng([depth, len(sizes), sum(sizes)])
            weights = [gen.uniform(-1.0, 1.0, (part.d, part.d)) for _ in range(depth)]
            x = gen.uniform(-1.0, 1.0, part.d)
            out = polyoracle.CrossNetVariant(weights, use_bias=False).forward(x) if depth else x
            for i in range(1, part.k + 1):
                err = float(np.max(np.abs(polyoracle.reconstruct_block(i, x, weights, part) - out[part.block(i)])))
                worst_recon = max(worst_recon, err)
    ok = worst_expand < 1e-10 and worst_coef < 1e-10 and worst_recon < 1e-10 and degree_ok
    acceptance(
        "C7 polynomial oracle",
        ok,
        f"expansion {worst_expand:.1e}, coefficient formula {worst_coef:.1e}, "
        f"interaction sum {worst_recon:.1e} (all <1e-10), degree==l+1: {degree_ok}",
    )
    assert ok


def test_c8_equivalences(acceptance):
    worst_lowrank = worst_v1 = 0.0
    bit_identical = True
    for seed in range(10):
        rng = Rng(seed)
        d = int(rng.gen.integers(2, 9))
        r = int(rng.gen.integers(1, d + 1))
        x0 = rng.uniform(-1.0, 1.0, (6, d))
        xl = rng.uniform(-1.0, 1.0, (6, d))

        low = LowRankCrossLayer(d, r)
        low.init_params(rng)
        low.b.assign(rng.uniform(-1.0, 1.0, d))
        full = CrossLayer(d, W=low.U.value @ low.V.value.T, b=low.b.value.copy())
        worst_lowrank = max(worst_lowrank, float(np.max(np.abs(low.forward(x0, xl)[0] - full.forward(x0, xl)[0]))))

        mix = MixtureCrossLayer(d, [r], gate=GateMode.CONSTANT_ONE, activation="identity")
        e = mix.experts[0]
        e.U.assign(low.U.value)
        e.V.assign(low.V.value)
        e.b.assign(low.b.value)
        bit_identical &= np.array_equal(mix.forward(x0, xl)[0], low.forward(x0, xl)[0])

        # the two coincide when the bias is zero (DCN-v1 adds b outside the Hadamard product)
        v1 = DCNv1CrossLayer(d)
        v1.init_params(rng)
        w = rng.uniform(-1.0, 1.0, d)
        v1.w.assign(w)
        rank_one = CrossLayer(d, W=np.outer(np.ones(d), w), b=np.zeros(d))
        want = v1.forward(x0, xl)[0]
        got = rank_one.forward(x0, xl)[0]
        worst_v1 = max(worst_v1, float(np.max(np.abs(want - got))))
    ok = worst_lowrank < 1e-12 and bit_identical and worst_v1 < 1e-12
    acceptance(
        "C8 layer equivalences",
        ok,
        f"low-rank vs UV^T {worst_lowrank:.1e} (<1e-12), K=1 mixture bit-identical: {bit_identical}, "
        f"1 w^T vs DCN-v1 {worst_v1:.1e} (<1e-12)",
    )
    assert ok


@pytest.mark.slow
def test_c9_low_rank_preserves_accuracy(acceptance):
    cfg = config("lowrank_combined")
    data = synthetic_data(cfg.dataset, cfg.data_seed, cfg.num_samples, cfg.split)
    d = data[0].inputs.shape[1]
    assert cfg.rank == -(-d // 4)
    low = [fit_synthetic(cfg, seed, data).metric for seed in SEEDS]
    full = [fit_synthetic(replace(cfg, cross_kind="full"), seed, data).metric for seed in SEEDS]
    ratio = float(np.mean(low) / np.mean(full))
    ok = ratio <= 2.0
    acceptance(
        "C9 rank d/4 vs full rank",
        ok,
        f"rank {cfg.rank} RMSE={fmt(low)}, full RMSE={fmt(full)}, mean ratio {ratio:.2f} (<=2)",
    )
    assert ok


def test_c10_parameter_accounting(acceptance):
    mismatches = []
    cases = 0
    for d in (1, 3, 8, 50):
        for L in (1, 2, 4):
            full = Model(d, Architecture.uniform("cross_only", L), "regression_mse")
            weights = sum(c.W.value.size for c in full.cross_layers)
            total = sum(c.param_count() for c in full.cross_layers)
            cases += 1
            if weights != d * d * L or total != d * d * L + d * L:
                mismatches.append(("full", d, L))
            for r in (1, 2, 5):
                if r > d:
                    continue
                for K in (1, 2, 4):
                    for use_c in (False, True):
                        m = Model(d, Architecture.uniform("cross_only", L, kind="mixture", rank=r, num_experts=K, use_c=use_c))
                        layers = m.cross_layers
                        uv = sum(e.U.value.size + e.V.value.size for c in layers for e in c.experts)
                        want = 2 * d * r * K * L + (d * K + d * K) * L + (r * r * K * L if use_c else 0)
                        cases += 1
                        if uv != 2 * d * r * K * L or sum(c.param_count() for c in layers) != want:
                            mismatches.append(("mixture", d, r, K, L, use_c))
                    low = Model(d, Architecture.uniform("cross_only", L, kind="lowrank", rank=r))
                    cases += 1
                    if sum(c.param_count() for c in low.cross_layers) != (2 * d * r + d) * L:
                        mismatches.append(("lowrank", d, r, L))
    ok = not mismatches
    acceptance("C10 parameter accounting", ok, f"{cases} grid points, mismatches: {mismatches or 'none'}")
    assert ok
