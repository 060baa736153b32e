"""Acceptance criteria, one test each; every test prints a single PASS/FAIL line.

Criteria 4 to 7 share one synthetic benchmark (400/100/100 videos, default
generator, 2,000 epochs) and its trained models, built once per session.
"""
import time
from dataclasses import dataclass, replace
from fractions import Fraction

import numpy as np
import pytest

from conftest import make_record
from gada.cli import RunConfig
from gada.detections import load_dataset, save_dataset
from gada.experiments import (
    DELTA_VALUES, MAX_PERTURBATION, SINGLE_REMOVALS, Splits, baseline_scores, model_config_for,
    perturbation_levels, robustness_eval, score_dataset, sweep,
)
from gada.graph import GraphConfig, build_graph
from gada.metrics import auc, auc_score, mcnemar_exact, select_threshold_scores
from gada.model import ModelConfig, forward, init_params, load_checkpoint, save_checkpoint
from gada.synthetic import GeneratorConfig, generate_dataset
from gada.testing import random_grad_checks, random_graph
from gada.training import TrainConfig, train
from test_metrics import balanced_accuracy, pairwise_auc, random_instance
from test_model import _reference, constant_params, path_graph

EPOCHS = 2000
TIME_LIMIT_S = 15 * 60


@pytest.fixture
def verdict(capsys):
    def emit(number: int, passed: bool, detail: str):
        with capsys.disabled():
            print(f"\nACCEPTANCE {number}: {'PASS' if passed else 'FAIL'} - {detail}")
        return passed
    return emit


# --- criteria without a trained model ------------------------------------------------

def test_criterion_1_gradient_exactness(verdict):
    cfg = ModelConfig()
    start = time.perf_counter()
    results = random_grad_checks(seed=0, n_graphs=10, cfg=cfg, node_range=(3, 12), fd_step=1e-5,
                                 tolerance=1e-4, n_coords=200)
    elapsed = time.perf_counter() - start
    worst = max(r.max_rel_error for r in results)
    covered = all(set(r.tensors) == set(init_params(cfg, 0)) for r in results)
    enough = all(r.n_checked >= 200 for r in results)
    ok = all(r.passed for r in results) and worst <= 1e-4 and covered and enough and elapsed <= 60
    assert verdict(1, ok, f"max relative error {worst:.2e} over 10 graphs x 200 coordinates, "
                          f"every tensor covered={covered}, {elapsed:.1f}s")


def test_criterion_2_forward_oracle(verdict):
    cfg = ModelConfig()
    g = path_graph()
    params = constant_params(cfg, 0.1)
    err = abs(forward(g, params, cfg).graph_logit - _reference(g, params, cfg)[0])
    assert verdict(2, err <= 1e-12, f"|logit - reference| = {err:.2e} on the 3-node path graph")


def test_criterion_3_metric_oracles(verdict):
    rng = np.random.default_rng(2024)
    auc_ok = True
    for _ in range(100):
        labels, scores = random_instance(rng, 200)
        auc_ok &= auc_score(labels, scores) == float(pairwise_auc(labels, scores))
    oracle = float(2 * Fraction(sum(__import__("math").comb(20, k) for k in range(6)), 2 ** 20))
    p = mcnemar_exact(5, 15)
    mc_ok = abs(p - 0.041390) <= 1e-6 and abs(p - oracle) <= 1e-15
    thr_ok = True
    for _ in range(100):
        labels, scores = random_instance(rng, 200)
        t = select_threshold_scores(labels, scores)
        grid = np.concatenate([np.linspace(scores.min() - 1, scores.max() + 1, 2001), np.unique(scores)])
        best = max(balanced_accuracy(labels, scores, v) for v in grid)
        thr_ok &= abs(balanced_accuracy(labels, scores, t) - best) <= 1e-12
    ok = bool(auc_ok and mc_ok and thr_ok)
    assert verdict(3, ok, f"AUC exact on 100 instances={auc_ok}, McNemar(5,15)={p:.8f}, "
                          f"threshold matches dense grid on 100 instances={thr_ok}")


def test_criterion_8_invariants(verdict, tmp_path):
    cfg = ModelConfig()
    checks = {}
    rng = np.random.default_rng(8)
    softmax_err = simplex_err = perm_err = 0.0
    symmetric = True
    for seed in range(20):
        g = random_graph(rng, int(rng.integers(2, 15)))
        out = forward(g, init_params(cfg, seed), cfg)
        for layer in out.attention:
            for head in layer:
                sums = np.bincount(g.dst, head, minlength=g.n_nodes)[np.unique(g.dst)]
                softmax_err = max(softmax_err, float(np.max(np.abs(sums - 1.0), initial=0.0)))
        simplex_err = max(simplex_err, abs(float(np.sum(out.node_weights)) - 1.0))
        simplex_err = max(simplex_err, float(-np.min(out.node_weights)))
        perm = rng.permutation(g.n_nodes)
        perm_err = max(perm_err, abs(forward(g.permuted(perm), init_params(cfg, seed), cfg).graph_logit
                                     - out.graph_logit))
        symmetric &= set(zip(g.src.tolist(), g.dst.tolist())) == set(zip(g.dst.tolist(), g.src.tolist()))
    checks["softmax rows"] = softmax_err <= 1e-9
    checks["beta simplex"] = simplex_err <= 1e-9
    checks["permutation"] = perm_err <= 1e-9
    checks["edge symmetry"] = symmetric

    empty = build_graph(make_record({0: [], 1: []}, label=1))
    out = forward(empty, init_params(cfg, 0), cfg)
    checks["empty graph"] = (out.graph_logit == -1.0 and out.probability == 1 / (1 + np.e)
                             and int(out.probability >= 0.5) == 0)

    gen = GeneratorConfig(n_videos=12, frames_min=15, frames_max=25)
    a, b = generate_dataset(gen, 5), generate_dataset(gen, 5)
    tcfg = TrainConfig(epochs=4, batch_size=4, eval_interval=2, seed=3)
    (p1, h1), (p2, h2) = (train(a, b, GraphConfig(), cfg, tcfg) for _ in range(2))
    s1, s2 = (score_dataset(b, p, GraphConfig(), cfg) for p in (p1, p2))
    checks["determinism"] = (a.records == b.records and h1.as_dicts() == h2.as_dicts()
                             and all(np.array_equal(p1[k], p2[k]) for k in p1) and s1 == s2)

    save_dataset(a, tmp_path / "d.jsonl")
    back = load_dataset(tmp_path / "d.jsonl")
    checks["dataset round trip"] = back.records == a.records
    save_checkpoint(p1, cfg, tmp_path / "m.json")
    loaded, lcfg = load_checkpoint(tmp_path / "m.json")
    checks["checkpoint round trip"] = lcfg == cfg and all(np.array_equal(loaded[k], p1[k]) for k in p1)

    ok = all(checks.values())
    assert verdict(8, ok, ", ".join(f"{k}={'ok' if v else 'FAILED'}" for k, v in checks.items())
                   + f" (softmax {softmax_err:.1e}, simplex {simplex_err:.1e}, permutation {perm_err:.1e})")


# --- synthetic benchmark ---------------------------------------------------------

@dataclass
class Benchmark:
    splits: Splits
    gcfg: GraphConfig
    mcfg: ModelConfig
    tcfg: TrainConfig
    params: dict
    history: object
    seconds: float
    trained: dict


@pytest.fixture(scope="session")
def benchmark():
    run = RunConfig()
    seeds = run.component_seeds()
    gen = replace(GeneratorConfig(), positive_fraction=0.5)
    splits = Splits(*(generate_dataset(replace(gen, n_videos=n), seeds[f"{name}_data"], f"{name}-", name)
                      for name, n in (("train", 400), ("val", 100), ("test", 100))))
    gcfg, mcfg = GraphConfig(), model_config_for(GraphConfig(), ModelConfig())
    tcfg = replace(run.train_config(), epochs=EPOCHS)
    start = time.perf_counter()
    params, history = train(splits.train, splits.val, gcfg, mcfg, tcfg)
    return Benchmark(splits, gcfg, mcfg, tcfg, params, history, time.perf_counter() - start, {})


def trained_auc(bench: Benchmark, gcfg: GraphConfig, key: str) -> float:
    """Test AUC of a full training run under ``gcfg`` (cached per session)."""
    if key not in bench.trained:
        mcfg = model_config_for(gcfg, bench.mcfg)
        params, _ = train(bench.splits.train, bench.splits.val, gcfg, mcfg, bench.tcfg)
        bench.trained[key] = auc(score_dataset(bench.splits.test, params, gcfg, mcfg))
    return bench.trained[key]


def test_criterion_4_end_to_end_benchmark(verdict, benchmark):
    b = benchmark
    gada = auc(score_dataset(b.splits.test, b.params, b.gcfg, b.mcfg))
    base = auc(baseline_scores(b.splits.test))
    learned = b.history.best_val_auc > b.history.initial_val_auc
    ok = gada >= 0.90 and gada > base and learned and b.seconds <= TIME_LIMIT_S
    assert verdict(4, ok, f"GADA test AUC {gada:.4f} vs frame-average baseline {base:.4f}; "
                          f"val AUC {b.history.initial_val_auc:.4f} -> {b.history.best_val_auc:.4f}; "
                          f"{EPOCHS} epochs in {b.seconds:.0f}s")


def test_criterion_5_window_and_iou_sweeps(verdict, benchmark):
    b = benchmark
    auc5 = auc(score_dataset(b.splits.test, b.params, b.gcfg, b.mcfg))
    auc60 = trained_auc(b, replace(b.gcfg, frame_window=60), "epsilon=60")
    delta = sweep(b.splits, None, "delta", DELTA_VALUES, b.gcfg, b.mcfg, retrain=False, params=b.params)
    shaped = delta.columns == ("delta", "test_auc") and delta.column("delta") == list(DELTA_VALUES)
    ok = auc60 <= auc5 and shaped
    cells = ", ".join(f"{d}: {a:.4f}" for d, a in delta.rows)
    assert verdict(5, ok, f"test AUC eps=60 {auc60:.4f} <= eps=5 {auc5:.4f}; delta sweep {{{cells}}}")


def test_criterion_6_ablation_trend(verdict, benchmark):
    b = benchmark
    full = auc(score_dataset(b.splits.test, b.params, b.gcfg, b.mcfg))
    drops = {name: full - trained_auc(b, mask.apply(b.gcfg), f"without {name}")
             for name, mask in SINGLE_REMOVALS.items()}
    others = max(v for k, v in drops.items() if k != "confidence")
    ok = drops["confidence"] > others
    assert verdict(6, ok, "AUC drop when removing " + ", ".join(f"{k}: {v:+.4f}" for k, v in drops.items())
                   + f" (default {full:.4f})")


def test_criterion_7_robustness(verdict, benchmark):
    b = benchmark
    levels = perturbation_levels(MAX_PERTURBATION, 5)
    table = robustness_eval(b.splits.test, b.params, b.gcfg, b.mcfg, levels,
                            seed=RunConfig().component_seeds()["perturbation"])
    deltas = table.column("delta_auc")
    ok = deltas[0] == 0.0 and max(abs(d) for d in deltas) <= 0.05
    assert verdict(7, ok, "delta AUC per level " + ", ".join(f"{d:+.4f}" for d in deltas))
