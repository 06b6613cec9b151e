"""Acceptance gate: one test per criterion, each printing a PASS/FAIL line."""

import dataclasses
import itertools
import math
import time

import numpy as np
import pytest

from ltn_detect import autodiff as ad
from ltn_detect.cli import main
from ltn_detect.data import SyntheticSpec, generate_synthetic, write_dataset
from ltn_detect.detection import build_prior_theory
from ltn_detect.evaluation import average_precision
from ltn_detect.fuzzy import AggregatorConfig, class_weights, focal_log_product, luk_and, luk_not, luk_or
from ltn_detect.grounding import (
    Domain, GroundedPredicate, GroundingEnvironment, LiteralClause, PredicateParams, compile_theory,
    predicate_forward,
)
from ltn_detect.harness import VARIANTS, evaluate, format_metrics, run_preset, train
from ltn_detect.logic import PredicateSymbol, parse_axioms

from _oracle import small_theory_loss
from test_evaluation import FIXTURES

PRESET = SyntheticSpec(n_classes=4, dim=16, n_images=200)
PRESET_SEED = 7


@pytest.fixture
def report(capsys):
    def emit(n, ok, detail=""):
        with capsys.disabled():
            print(f"\ncriterion {n}: {'PASS' if ok else 'FAIL'} {detail}".rstrip())
        assert ok, f"criterion {n} failed: {detail}"
    return emit


def _random_params(rng, d, k=6):
    return PredicateParams(rng.uniform(-0.5, 0.5, (k, d, d)), rng.uniform(-0.5, 0.5, (k, d)),
                           rng.uniform(-0.5, 0.5, k), np.asarray(rng.uniform(-0.5, 0.5)))


def test_criterion_1_gradient_check(report):
    start = time.perf_counter()
    worst = 0.0
    A, B, R = PredicateSymbol("A", 1), PredicateSymbol("B", 1), PredicateSymbol("R", 2)
    kb = parse_axioms("pred A/1\npred B/1\npred R/2\n"
                      "axiom forall x: A(x) -> ~B(x)\naxiom forall x, y: A(x) & R(y, x) -> B(y)")
    for seed in range(20):
        rng = np.random.default_rng(seed)
        # (a) one predicate over a handful of inputs
        gp = GroundedPredicate(A, _random_params(rng, 3))
        tape = ad.Tape()
        out = ad.sum(predicate_forward(gp, rng.standard_normal((5, 3)), tape))
        worst = max(worst, ad.grad_check(tape, 1e-6, out))
        # (b) a compiled theory: focal aggregation, example clause and L2 term
        preds = {"A": GroundedPredicate(A, _random_params(rng, 2)),
                 "B": GroundedPredicate(B, _random_params(rng, 2)),
                 "R": GroundedPredicate(R, _random_params(rng, 4))}
        env = GroundingEnvironment(preds, Domain(rng.standard_normal((3, 2))))
        clause = LiteralClause("A", "A", (np.arange(3),), np.array([True, False, True]))
        theory = compile_theory(kb, env, AggregatorConfig(gamma=2.0), 5e-4, [clause])
        worst = max(worst, ad.grad_check(env.tape, 1e-6, theory.total))
    elapsed = time.perf_counter() - start
    report(1, worst < 1e-4 and elapsed < 10.0, f"max rel err {worst:.2e}, {elapsed:.1f}s")


def test_criterion_2_fuzzy_algebra(report, rng):
    # exact laws on dyadic rationals, where every intermediate is representable
    grid = np.arange(0, 33) / 32.0
    a, b, c = (g.ravel() for g in np.meshgrid(grid, grid, grid, indexing="ij"))
    exact = (
        np.array_equal(luk_not(luk_not(a)), a)
        and np.array_equal(luk_or(a, 0.0), a)
        and np.array_equal(luk_or(a, 1.0), np.ones_like(a))
        and np.array_equal(luk_or(a, b), luk_or(b, a))
        and np.array_equal(luk_or(luk_or(a, b), c), luk_or(a, luk_or(b, c)))
    )
    x, y = rng.uniform(size=10_000), rng.uniform(size=10_000)
    dm1 = np.max(np.abs(luk_not(luk_and(x, y)) - luk_or(luk_not(x), luk_not(y))))
    dm2 = np.max(np.abs(luk_not(luk_or(x, y)) - luk_and(luk_not(x), luk_not(y))))
    report(2, exact and max(dm1, dm2) <= 1e-12, f"exact laws {exact}, De Morgan max dev {max(dm1, dm2):.1e}")


def test_criterion_3_cross_entropy(report, rng):
    worst = 0.0
    for shape in [(10,), (7, 9), (3, 4, 5)]:
        x = rng.uniform(1e-3, 1.0, shape)
        worst = max(worst, abs(focal_log_product(x, 1.0, gamma=0.0) + np.sum(np.log(x))))
    report(3, worst <= 1e-12, f"max dev {worst:.1e}")


def test_criterion_4_oracle(report, rng):
    A, B = PredicateSymbol("A", 1), PredicateSymbol("B", 1)
    kb = parse_axioms("pred A/1\npred B/1\naxiom A(C1) & B(C2) -> A(C3)\naxiom forall x: A(x) -> ~B(x)")
    worst = 0.0
    for gamma in (0.0, 2.0):
        pa, pb = _random_params(rng, 2), _random_params(rng, 2)
        c = rng.standard_normal((3, 2))
        env = GroundingEnvironment({"A": GroundedPredicate(A, pa), "B": GroundedPredicate(B, pb)},
                                   Domain(c), {"C1": c[0], "C2": c[1], "C3": c[2]})
        got = compile_theory(kb, env, AggregatorConfig(gamma=gamma), 5e-4).total.value
        lists = [{n: v.tolist() for n, v in p.items()} for p in (pa, pb)]
        expected = small_theory_loss(*lists, *c.tolist(), gamma, 5e-4)
        worst = max(worst, abs(float(got) - expected))
    report(4, worst < 1e-10, f"max dev {worst:.1e}")


def test_criterion_5_mutual_exclusion_count(report):
    counts = {k: len(build_prior_theory([f"c{i}" for i in range(k)]).axioms) for k in (2, 5, 20)}
    report(5, counts == {2: 1, 5: 10, 20: 190}, str(counts))


def test_criterion_6_class_weights(report):
    N = 128
    worst = 0.0
    for p, beta in itertools.product((0.0, 0.05, 0.25, 1.0), (0.9, 0.999)):
        pos = N * 0.5 * p
        neg = N * 0.5 + N * 0.5 * (1.0 - p)
        want_pos = 0.0 if pos == 0 else (1.0 - beta) / (1.0 - beta ** pos)
        want_neg = (1.0 - beta) / (1.0 - beta ** neg)
        got_pos, got_neg = class_weights(p, N, beta)
        worst = max(worst, abs(got_pos - want_pos), abs(got_neg - want_neg))
    unit = [class_weights(1 / 64, N, beta)[0] for beta in (0.9, 0.999)]
    ok = worst <= 1e-12 and unit == [1.0, 1.0]
    report(6, ok, f"max dev {worst:.1e}, alpha_pos at one positive {unit}")


def test_criterion_9_average_precision(report):
    results = [(f.__name__, average_precision(*f()[:2], 0.5), f()[2]) for f in FIXTURES]
    ok = all(got == want for _, got, want in results)
    report(9, ok, ", ".join(f"{n}={got}" for n, got, _ in results))


def test_criterion_10_determinism(report, tmp_path):
    spec = SyntheticSpec(n_classes=3, dim=8, n_images=20)
    write_dataset(tmp_path / "data.tsv", generate_synthetic(spec, 1))
    outputs = []
    for run in ("a", "b"):
        cfg = dataclasses.replace(run_preset("bg_alpha", "desk"), epochs=5, lr_drop_epoch=3, seed=9,
                                  dataset="data.tsv", checkpoint=f"{run}.ltnw")
        (tmp_path / f"{run}.cfg").write_text(cfg.to_text())
        assert main(["train", "--config", str(tmp_path / f"{run}.cfg")]) == 0
        outputs.append(((tmp_path / f"{run}.ltnw").read_bytes(),
                        (tmp_path / f"{run}.ltnw.metrics.tsv").read_bytes()))
    same = outputs[0] == outputs[1]
    report(10, same, "checkpoints and metrics logs identical" if same else "runs differ")


@pytest.fixture(scope="module")
def preset_runs():
    """The four ablation variants trained on the separable preset."""
    ds = generate_synthetic(PRESET, PRESET_SEED)
    runs = {}
    for variant in VARIANTS:
        cfg = dataclasses.replace(run_preset(variant, "desk"), seed=PRESET_SEED)
        start = time.perf_counter()
        est = train(cfg, ds, write=False)
        runs[variant] = (est, time.perf_counter() - start)
    return ds, runs


def test_criterion_7_convergence(report, preset_runs):
    ds, runs = preset_runs
    est, elapsed = runs["plain"]
    X, y, groups, boxes = ds.arrays()
    sat = est.satisfaction(X, y, groups, boxes, ds.image_sizes())
    expl = {k: v for k, v in sat.items() if k.startswith("expl/")}
    held_out = evaluate(est, generate_synthetic(PRESET, PRESET_SEED + 1)).mAP
    train_map = evaluate(est, ds).mAP
    ok = len(expl) == 4 and min(expl.values()) >= 0.95 and min(held_out, train_map) >= 0.90 and elapsed < 300
    report(7, ok, f"min clause truth {min(expl.values()):.4f}, mAP {train_map:.4f} "
                  f"(held-out {held_out:.4f}), {elapsed:.0f}s")


def test_criterion_8_axiom_effect(report):
    spec = SyntheticSpec(part_layout=True, n_images=60, objects_per_image=2, bg_per_image=8)
    ds = generate_synthetic(spec, PRESET_SEED)
    X, y, groups, boxes = ds.arrays()
    kb = build_prior_theory(ds.classes, ds.ontology, True)
    means = {}
    for use_prior in (True, False):
        cfg = dataclasses.replace(run_preset("plain", "desk"), epochs=20, lr_drop_epoch=15,
                                  prior_gamma=0.0, use_prior=use_prior, seed=PRESET_SEED)
        est = train(cfg, ds, write=False)
        sat = est.satisfaction(X, y, groups, boxes, ds.image_sizes(), kb=kb)
        means[use_prior] = float(np.mean([v for k, v in sat.items() if k.startswith("prior/")]))
    ok = means[True] >= 0.90 and means[True] > means[False]
    report(8, ok, f"with prior {means[True]:.6f}, without {means[False]:.6f}")


def test_criterion_11_ablation_variants(report, preset_runs):
    _, runs = preset_runs
    logs = {v: format_metrics(est.history_) for v, (est, _) in runs.items()}
    distinct = len(set(logs.values())) == 4
    alpha_active = all((runs[v][0].class_stats_ is not None) == VARIANTS[v][0] for v in runs)
    bg_active = all(("bg" in runs[v][0].predicates_) == VARIANTS[v][1] for v in runs)
    finite = all(math.isfinite(r.total) and len(est.history_) == 50
                 for est, _ in runs.values() for r in est.history_)
    ok = distinct and alpha_active and bg_active and finite
    report(11, ok, f"distinct logs {distinct}, alpha path {alpha_active}, bg path {bg_active}")
