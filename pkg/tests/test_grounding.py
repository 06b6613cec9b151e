import numpy as np
import pytest
from hypothesis import given, strategies as st

from ltn_detect import autodiff as ad
from ltn_detect.fuzzy import AggregatorConfig
from ltn_detect.grounding import (
    Domain, GroundedPredicate, GroundingEnvironment, LiteralClause, PredicateParams,
    UnboundVariableError, compile_theory, ground_formula, l2_penalty, predicate_forward,
    predicate_truth,
)
from ltn_detect.logic import KnowledgeBase, PredicateSymbol, parse_axioms, parse_formula

from _oracle import ntn_truth, small_theory_loss

A = PredicateSymbol("A", 1)
B = PredicateSymbol("B", 1)
R = PredicateSymbol("R", 2)


def _params(rng, d, k=3, scale=0.5):
    return PredicateParams(rng.normal(0, scale, (k, d, d)), rng.normal(0, scale, (k, d)),
                           rng.normal(0, scale, k), np.asarray(rng.normal(0, scale)))


def _as_lists(p):
    return {name: value.tolist() for name, value in p.items()}


def test_zero_parameters_give_one_half():
    gp = GroundedPredicate(A, PredicateParams.zeros(4))
    assert predicate_forward(gp, np.ones(4)) == 0.5
    np.testing.assert_array_equal(predicate_forward(gp, np.zeros((3, 4))), [0.5] * 3)


def test_parameter_validation():
    with pytest.raises(ValueError):
        PredicateParams(np.zeros((2, 3, 3)), np.zeros((2, 4)), np.zeros(2), np.zeros(()))
    with pytest.raises(ad.NonFiniteError):
        PredicateParams(np.full((1, 2, 2), np.nan), np.zeros((1, 2)), np.zeros(1), np.zeros(()))


def test_initialisation_is_small_uniform(rng):
    p = PredicateParams.initialize(5, 6, rng)
    assert p.k == 6 and p.d == 5
    for _, v in p.items():
        assert np.all(np.abs(v) <= 0.05)


def test_predicate_matches_reference(rng):
    p = _params(rng, 3)
    X = rng.standard_normal((7, 3))
    ref = [ntn_truth(_as_lists(p), row.tolist()) for row in X]
    np.testing.assert_allclose(predicate_truth(p, X), ref, rtol=1e-13)
    gp = GroundedPredicate(A, p)
    node = predicate_forward(gp, X, ad.Tape())
    np.testing.assert_allclose(node.value, ref, rtol=1e-13)


def test_input_dimension_checked(rng):
    gp = GroundedPredicate(A, _params(rng, 3))
    with pytest.raises(ad.ShapeError):
        predicate_forward(gp, np.ones(4))


def _env(rng, n=3, d=2, **kw):
    preds = {"A": GroundedPredicate(A, _params(rng, d)), "B": GroundedPredicate(B, _params(rng, d)),
             "R": GroundedPredicate(R, _params(rng, 2 * d))}
    dom = Domain(rng.standard_normal((n, d)))
    return GroundingEnvironment(preds, dom, **kw), dom


def test_ground_atom_and_negation(rng):
    env, dom = _env(rng)
    x = ground_formula(parse_formula("forall x: A(x)", [A]), env)
    expected = predicate_truth(env.predicates["A"].params, dom.vectors)
    np.testing.assert_allclose(x.value, expected)
    nx = ground_formula(parse_formula("forall x: ~A(x)", [A]), env)
    np.testing.assert_allclose(nx.value, 1.0 - expected)


def test_two_variable_forall_skips_repeated_individuals(rng):
    env, dom = _env(rng, n=3)
    node = ground_formula(parse_formula("forall x, y: R(x, y)", [R]), env)
    assert node.value.shape == (6,)
    params = env.predicates["R"].params
    pairs = [(i, j) for i in range(3) for j in range(3) if i != j]
    expected = [predicate_truth(params, np.concatenate([dom.vectors[i], dom.vectors[j]])) for i, j in pairs]
    np.testing.assert_allclose(node.value, expected, rtol=1e-13)


def test_constants_and_unbound_names(rng):
    env, dom = _env(rng, constants={"K": np.array([0.5, -1.0])})
    node = ground_formula(parse_formula("A(K)", [A]), env)
    assert node.value == pytest.approx(predicate_truth(env.predicates["A"].params, [0.5, -1.0]))
    with pytest.raises(UnboundVariableError):
        ground_formula(parse_formula("A(Q)", [A]), env)


def test_nested_quantifier_rejected(rng):
    env, _ = _env(rng)
    f = parse_formula("A(K) -> (forall x: B(x))", [A, B])
    env.constants["K"] = Domain(np.zeros((1, 2)))
    with pytest.raises(NotImplementedError):
        ground_formula(f, env)


def test_empty_theory_is_l2_only(rng):
    env, _ = _env(rng)
    theory = compile_theory(KnowledgeBase(), env, AggregatorConfig(), 5e-4)
    params = [v for name in sorted(env.predicates) for _, v in env.predicates[name].params.items()]
    assert theory.total.value == pytest.approx(l2_penalty(params, 5e-4), rel=1e-14)
    assert theory.clause_losses == {}


def test_l2_examples():
    assert l2_penalty([np.array([3.0, 4.0])], 0.1) == pytest.approx(2.5)
    assert l2_penalty([np.ones((2, 2)), np.ones(3)], 1.0) == 7.0
    assert l2_penalty([np.ones(3)], 0.0) == 0.0
    with pytest.raises(ValueError):
        l2_penalty([np.ones(3)], -1.0)


@pytest.mark.parametrize("gamma", [0.0, 2.0])
def test_compiled_theory_matches_oracle(rng, gamma):
    pa, pb = _params(rng, 2), _params(rng, 2)
    c = rng.standard_normal((3, 2))
    kb = parse_axioms("pred A/1\npred B/1\naxiom A(C1) & B(C2) -> A(C3)\naxiom forall x: A(x) -> ~B(x)")
    env = GroundingEnvironment({"A": GroundedPredicate(A, pa), "B": GroundedPredicate(B, pb)},
                               Domain(c), {"C1": c[0], "C2": c[1], "C3": c[2]})
    theory = compile_theory(kb, env, AggregatorConfig(gamma=gamma), 5e-4)
    expected = small_theory_loss(_as_lists(pa), _as_lists(pb), *c.tolist(), gamma, 5e-4)
    assert abs(theory.total.value - expected) < 1e-10


def test_example_clauses_and_weights(rng):
    env, dom = _env(rng, n=4)
    pos = np.array([True, False, True, False])
    w = np.array([2.0, 1.0, 1.0, 0.5])
    clause = LiteralClause("A", "A", (np.arange(4),), pos, w)
    theory = compile_theory(None, env, AggregatorConfig(gamma=0.0), 0.0, [clause])
    t = predicate_truth(env.predicates["A"].params, dom.vectors)
    x = np.where(pos, t, 1.0 - t)
    assert theory.clause_losses["expl/A"].value == pytest.approx(-np.sum(w * np.log(x)), rel=1e-13)
    np.testing.assert_allclose(theory.clause_truths["expl/A"].value, x)


def test_clause_losses_are_summed_in_name_order(rng):
    env, _ = _env(rng)
    kb = parse_axioms("pred A/1\npred B/1\naxiom forall x: B(x) | A(x)\naxiom forall x: A(x) -> B(x)")
    theory = compile_theory(kb, env, AggregatorConfig(), 0.0)
    names = list(theory.clause_losses)
    assert all(n.startswith("prior/") for n in names)
    total = 0.0
    for n in sorted(names):
        total = total + theory.clause_losses[n].value
    assert theory.total.value == total


@given(seed=st.integers(0, 10_000))
def test_forall_loss_is_permutation_invariant(seed):
    rng = np.random.default_rng(seed)
    env, dom = _env(rng, n=5)
    perm = rng.permutation(5)
    env2 = GroundingEnvironment(env.predicates, Domain(dom.vectors[perm]))
    kb = parse_axioms("pred A/1\npred B/1\npred R/2\naxiom forall x, y: A(x) & R(x, y) -> B(y)")
    l1 = compile_theory(kb, env, AggregatorConfig(), 0.0).total.value
    l2 = compile_theory(kb, env2, AggregatorConfig(), 0.0).total.value
    assert l1 == pytest.approx(l2, rel=1e-12)


def test_full_theory_gradient(rng):
    env, _ = _env(rng, n=4, d=3)
    kb = parse_axioms("pred A/1\npred B/1\npred R/2\n"
                      "axiom forall x: A(x) -> ~B(x)\naxiom forall x, y: A(x) & R(y, x) -> B(y)")
    clause = LiteralClause("B", "B", (np.arange(4),), np.array([True, False, False, True]))
    theory = compile_theory(kb, env, AggregatorConfig(gamma=2.0), 5e-4, [clause])
    assert ad.grad_check(env.tape, output=theory.total) < 1e-4
