"""Tensor-network predicates and the compiler from a grounded theory to a loss graph."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Mapping, Sequence

import numpy as np

from . import autodiff as ad
from .fuzzy import AggregatorConfig, focal_log_product, luk_and, luk_implies, luk_not, luk_or
from .logic import (
    And, Atom, Constant, ForAll, Formula, Implies, KnowledgeBase, Not, Or,
    PredicateSymbol, Variable, format_formula,
)

__all__ = [
    "PredicateParams", "GroundedPredicate", "Domain", "GroundingEnvironment",
    "LiteralClause", "TheoryLoss", "UnboundVariableError", "predicate_forward",
    "predicate_truth", "ground_formula", "compile_theory", "l2_penalty",
]

PARAM_NAMES = ("W", "V", "u", "b")


class UnboundVariableError(KeyError):
    pass


@dataclass
class PredicateParams:
    """Trainable tensors of one predicate: ``sigmoid(u . tanh(v^T W v + V v + b))``."""

    W: np.ndarray  # (k, d, d)
    V: np.ndarray  # (k, d)
    u: np.ndarray  # (k,)
    b: np.ndarray  # ()

    def __post_init__(self):
        k, d, d2 = self.W.shape
        if d != d2 or self.V.shape != (k, d) or self.u.shape != (k,) or np.shape(self.b) != ():
            raise ad.ShapeError(
                f"inconsistent predicate shapes W{self.W.shape} V{self.V.shape} "
                f"u{self.u.shape} b{np.shape(self.b)}")
        for name in PARAM_NAMES:
            if not np.all(np.isfinite(getattr(self, name))):
                raise ad.NonFiniteError("init", f"non-finite entries in {name}")

    @property
    def k(self) -> int:
        return self.W.shape[0]

    @property
    def d(self) -> int:
        return self.W.shape[1]

    @classmethod
    def initialize(cls, d: int, k: int = 6, rng=None, scale: float = 0.05) -> "PredicateParams":
        rng = np.random.default_rng(rng)
        return cls(
            W=ad.init_uniform(rng, (k, d, d), scale),
            V=ad.init_uniform(rng, (k, d), scale),
            u=ad.init_uniform(rng, (k,), scale),
            b=np.asarray(ad.init_uniform(rng, (), scale), dtype=np.float64),
        )

    @classmethod
    def zeros(cls, d: int, k: int = 6) -> "PredicateParams":
        return cls(np.zeros((k, d, d)), np.zeros((k, d)), np.zeros(k), np.zeros(()))

    def items(self):
        return [(name, getattr(self, name)) for name in PARAM_NAMES]


def predicate_truth(params: PredicateParams, X) -> np.ndarray:
    """Numpy evaluation of the predicate on a vector or a stack of row vectors."""
    X = np.asarray(X, dtype=np.float64)
    q = ad.bilinear_value(X, params.W)
    h = np.tanh(q + X @ params.V.T + params.b)
    return np.exp(-np.logaddexp(0.0, -(h @ params.u)))


def _predicate_graph(nodes: Mapping[str, ad.Node], x) -> ad.Node:
    q = ad.bilinear(x, nodes["W"]) + ad.matvec(nodes["V"], x) + nodes["b"]
    return ad.sigmoid(ad.matvec(nodes["u"], ad.tanh(q)))


def _default_featurizer(args):
    return np.hstack([dom.vectors[idx] for dom, idx in args])


@dataclass
class GroundedPredicate:
    """A predicate symbol bound to trainable parameters.

    ``featurizer`` maps the argument groundings, a list of ``(Domain, index
    array)`` pairs, to the predicate's input rows. The default concatenates
    the argument vectors.
    """

    symbol: PredicateSymbol
    params: PredicateParams
    featurizer: Callable | None = None

    @property
    def input_dim(self) -> int:
        return self.params.d

    def featurize(self, args) -> np.ndarray:
        fn = self.featurizer or _default_featurizer
        return np.asarray(fn(args), dtype=np.float64)


@dataclass
class Domain:
    """Individuals a variable ranges over; ``items`` carries optional side data."""

    vectors: np.ndarray
    items: Sequence | None = None

    def __len__(self):
        return len(self.vectors)


def predicate_forward(gp: GroundedPredicate, v, tape: ad.Tape | None = None):
    """Truth value of ``gp`` at ``v`` (a vector or rows of vectors).

    Without a tape the result is a numpy value; with one, a graph node whose
    leaves are fresh parameter nodes named ``<predicate>.<tensor>``.
    """
    v = np.asarray(v, dtype=np.float64)
    if v.shape[-1] != gp.input_dim:
        raise ad.ShapeError(
            f"{gp.symbol.name}: input dimension {v.shape[-1]} != predicate dimension {gp.input_dim}")
    if tape is None:
        return predicate_truth(gp.params, v)
    nodes = {name: tape.parameter(val, f"{gp.symbol.name}.{name}") for name, val in gp.params.items()}
    return _predicate_graph(nodes, tape.constant(v))


class GroundingEnvironment:
    """Variable domains, constants and grounded predicates for one tape.

    ``domains`` maps variable names to :class:`Domain`; the key ``"*"`` is the
    fallback for any variable. Predicate evaluations are cached per tape so
    that a predicate applied to the same domain in many clauses is computed
    once.
    """

    def __init__(self, predicates: Mapping[str, GroundedPredicate], domains=None,
                 constants: Mapping[str, np.ndarray] | None = None, tape: ad.Tape | None = None):
        self.predicates = dict(predicates)
        if isinstance(domains, Domain):
            domains = {"*": domains}
        self.domains = dict(domains or {})
        self.constants = {name: Domain(np.asarray(v, dtype=np.float64)[None, :])
                          for name, v in (constants or {}).items()}
        self.tape = tape if tape is not None else ad.Tape()
        self._param_nodes: dict[str, dict[str, ad.Node]] = {}
        self._cache: dict = {}

    def domain(self, var: str) -> Domain:
        dom = self.domains.get(var, self.domains.get("*"))
        if dom is None:
            raise UnboundVariableError(f"variable {var!r} has no domain")
        if len(dom) == 0:
            raise ValueError(f"empty domain for variable {var!r}")
        return dom

    def constant(self, name: str) -> Domain:
        try:
            return self.constants[name]
        except KeyError:
            raise UnboundVariableError(f"constant {name!r} has no grounding") from None

    def grounded(self, name: str) -> GroundedPredicate:
        try:
            return self.predicates[name]
        except KeyError:
            raise KeyError(f"predicate {name!r} is not grounded") from None

    def param_nodes(self, name: str) -> dict[str, ad.Node]:
        nodes = self._param_nodes.get(name)
        if nodes is None:
            gp = self.grounded(name)
            nodes = {p: self.tape.parameter(val, f"{name}.{p}") for p, val in gp.params.items()}
            self._param_nodes[name] = nodes
        return nodes

    def all_param_nodes(self) -> list[ad.Node]:
        return [node for name in sorted(self.predicates) for node in self.param_nodes(name).values()]

    def truth(self, pred: str, args) -> ad.Node:
        """Truth node of ``pred`` over argument groundings ``[(Domain, idx), ...]``."""
        gp = self.grounded(pred)
        if gp.symbol.arity == 1:
            dom, idx = args[0]
            key = (pred, id(dom))
            full = self._cache.get(key)
            if full is None:
                full = self._evaluate(gp, [(dom, np.arange(len(dom)))])
                self._cache[key] = full
            if len(idx) == len(dom) and np.array_equal(idx, np.arange(len(dom))):
                return full
            key = (pred, id(dom), idx.tobytes())
            node = self._cache.get(key)
            if node is None:
                node = self._cache[key] = ad.take(full, idx)
            return node
        key = (pred,) + tuple((id(dom), idx.tobytes()) for dom, idx in args)
        node = self._cache.get(key)
        if node is None:
            node = self._cache[key] = self._evaluate(gp, args)
        return node

    def _evaluate(self, gp: GroundedPredicate, args) -> ad.Node:
        X = gp.featurize(args)
        if X.shape[-1] != gp.input_dim:
            raise ad.ShapeError(
                f"{gp.symbol.name}: grounding dimension {X.shape[-1]} != predicate dimension {gp.input_dim}")
        return _predicate_graph(self.param_nodes(gp.symbol.name), self.tape.constant(X))


def _instantiations(variables, env: GroundingEnvironment):
    """Cartesian product of the variables' domains without repeated individuals."""
    doms = [env.domain(v) for v in variables]
    grids = np.meshgrid(*[np.arange(len(d)) for d in doms], indexing="ij")
    idx = [g.reshape(-1) for g in grids]
    keep = np.ones(idx[0].shape, dtype=bool)
    for i in range(len(variables)):
        for j in range(i + 1, len(variables)):
            if doms[i] is doms[j]:
                keep &= idx[i] != idx[j]
    return {v: (d, ix[keep]) for v, d, ix in zip(variables, doms, idx)}, int(keep.sum())


def _ground(f: Formula, env: GroundingEnvironment, binding, m: int):
    if isinstance(f, Atom):
        args = []
        for t in f.args:
            if isinstance(t, Variable):
                if t.name not in binding:
                    raise UnboundVariableError(f"unbound variable {t.name!r} in {format_formula(f)}")
                args.append(binding[t.name])
            else:
                args.append((env.constant(t.id), np.zeros(m, dtype=np.intp)))
        return env.truth(f.pred.name, args)
    if isinstance(f, Not):
        return luk_not(_ground(f.body, env, binding, m))
    if isinstance(f, And):
        return luk_and(_ground(f.left, env, binding, m), _ground(f.right, env, binding, m))
    if isinstance(f, Or):
        return luk_or(_ground(f.left, env, binding, m), _ground(f.right, env, binding, m))
    if isinstance(f, Implies):
        return luk_implies(_ground(f.left, env, binding, m), _ground(f.right, env, binding, m))
    if isinstance(f, ForAll):
        raise NotImplementedError("quantifiers are only supported at the top of an axiom")
    raise TypeError(f"not a formula: {f!r}")


def ground_formula(f: Formula, env: GroundingEnvironment) -> ad.Node:
    """Truth values of ``f``, one per instantiation of its leading quantifier block.

    Nested leading quantifiers (``forall x: forall y: ...``) are merged. A
    formula without quantifiers yields a single value.
    """
    variables: list[str] = []
    while isinstance(f, ForAll):
        variables.extend(v for v in f.vars if v not in variables)
        f = f.body
    if variables:
        binding, m = _instantiations(variables, env)
        if m == 0:
            raise ValueError("quantifier has no instantiations over the given domains")
    else:
        binding, m = {}, 1
    return _ground(f, env, binding, m)


@dataclass
class LiteralClause:
    """Labelled examples of one predicate: positive or negated literals over domain indices."""

    name: str
    predicate: str
    args: tuple  # one index array into the default domain per predicate argument
    positive: np.ndarray
    weights: object = 1.0

    def __len__(self):
        return len(self.positive)

    def truths(self, env: GroundingEnvironment) -> ad.Node:
        dom = env.domain("*")
        t = env.truth(self.predicate, [(dom, np.asarray(a, dtype=np.intp)) for a in self.args])
        pos = np.asarray(self.positive, dtype=bool)
        if pos.all():
            return t
        # x = t for positive literals, 1 - t for negated ones
        return (~pos).astype(np.float64) + np.where(pos, 1.0, -1.0) * t


@dataclass
class TheoryLoss:
    clause_losses: dict[str, ad.Node]
    l2_term: ad.Node
    total: ad.Node
    clause_truths: dict[str, ad.Node] = field(default_factory=dict)

    def group(self, prefix: str) -> float:
        return float(np.sum([n.value for name, n in sorted(self.clause_losses.items())
                             if name.startswith(prefix)]))


def l2_penalty(params, lambda_l2: float, tape: ad.Tape | None = None):
    """``lambda_l2`` times the sum of squares of every parameter.

    ``params`` holds graph nodes (returns a node on their tape) or arrays
    (returns a float).
    """
    if lambda_l2 < 0:
        raise ValueError("lambda_l2 must be non-negative")
    params = list(params)
    if not params or not isinstance(params[0], ad.Node):
        return float(lambda_l2 * np.sum([np.sum(np.square(p)) for p in params]))
    total = None
    for p in params:
        sq = ad.sum(p * p)
        total = sq if total is None else total + sq
    return ad.scale(total, lambda_l2)


def _sum_nodes(nodes, tape):
    total = None
    for n in nodes:
        total = n if total is None else total + n
    return total if total is not None else tape.constant(0.0)


def compile_theory(kb: KnowledgeBase | None, env: GroundingEnvironment, agg: AggregatorConfig,
                   lambda_l2: float, examples: Sequence[LiteralClause] = (),
                   prior_gamma: float | None = None, prior_weight: float = 1.0,
                   expl_weight: float = 1.0) -> TheoryLoss:
    """Lower axioms plus labelled clauses to one scalar loss on ``env.tape``.

    Each clause is aggregated with the focal log-product; the conjunction of
    clauses is the sum of their losses, taken in order of clause name.
    Axiom clauses are named ``prior/<formula>`` and example clauses
    ``expl/<name>``. ``prior_gamma`` overrides the focusing exponent used for
    axioms.
    """
    tape = env.tape
    gamma = agg.effective_gamma
    losses: dict[str, ad.Node] = {}
    truths: dict[str, ad.Node] = {}

    def add(name, fn):
        base, n = name, 1
        while name in losses:
            n += 1
            name = f"{base}#{n}"
        try:
            truths[name], losses[name] = fn()
        except ad.NonFiniteError as exc:
            raise ad.NonFiniteError(exc.op, f"clause {name!r}: {exc}") from exc

    for clause in examples:
        def expl(clause=clause):
            x = clause.truths(env)
            loss = focal_log_product(x, clause.weights, gamma)
            return x, (ad.scale(loss, expl_weight) if expl_weight != 1.0 else loss)
        add(f"expl/{clause.name}", expl)

    if kb is not None:
        for sym in kb.predicates:
            env.grounded(sym.name)
        g_prior = gamma if prior_gamma is None else prior_gamma
        for axiom in kb.axioms:
            def prior(axiom=axiom):
                x = ground_formula(axiom, env)
                loss = focal_log_product(x, 1.0, g_prior)
                return x, (ad.scale(loss, prior_weight) if prior_weight != 1.0 else loss)
            add(f"prior/{format_formula(axiom)}", prior)

    l2 = l2_penalty(env.all_param_nodes(), lambda_l2) if env.predicates else tape.constant(0.0)
    total = _sum_nodes([losses[k] for k in sorted(losses)] + [l2], tape)
    return TheoryLoss(losses, l2, total, truths)
