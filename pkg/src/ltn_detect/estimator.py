"""Scikit-learn compatible one-vs-all classifier trained by best satisfiability of a grounded theory."""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin
from sklearn.utils.validation import check_array, check_is_fitted, check_X_y

from . import autodiff as ad
from .detection import (
    BACKGROUND, PART_OF, Batch, BatchPolicy, BoundingBox, NoForegroundError, PartOntology,
    ProposalEmbedding, build_expl_theory, build_prior_theory, check_class_names, make_batch,
    pair_features, parse_ontology,
)
from .fuzzy import AggregatorConfig, ClassStats
from .grounding import (
    GroundedPredicate, GroundingEnvironment, PredicateParams, TheoryLoss, compile_theory,
    predicate_truth,
)
from .logic import KnowledgeBase, PredicateSymbol, parse_axioms, validate

__all__ = ["LTNDetector", "EpochRecord", "partof_featurizer"]

log = logging.getLogger(__name__)


def partof_featurizer(args):
    """Pair groundings for ``partOf(y, x)`` over a batch domain."""
    (dom_m, idx_m), (dom_l, idx_l) = args
    if dom_m is not dom_l:
        raise ValueError("partOf arguments must range over the same batch")
    batch = dom_m.items
    return pair_features(dom_m.vectors, batch.boxes, idx_m, idx_l, batch.image_size)


@dataclass(frozen=True)
class EpochRecord:
    epoch: int
    expl_loss: float
    prior_loss: float
    l2: float
    total: float
    lr: float
    skipped: int = 0


class LTNDetector(ClassifierMixin, BaseEstimator):
    """Logic tensor network classifier over proposal embeddings.

    Every class is an is-a predicate (a neural tensor network over the
    embedding). Training rebuilds the example theory for each image's batch,
    adds the prior axioms, and minimises the focal log-product loss plus an
    L2 penalty with Adam.

    Parameters
    ----------
    k : int
        Number of bilinear kernels per predicate.
    gamma : float
        Focusing exponent of the focal log-product.
    beta : float
        Effective-number base for the class weights (used when ``use_alpha``).
    use_alpha : bool
        Weight positive/negative literals by class frequency.
    include_bg : bool
        Add a ``bg`` predicate whose positives are the background proposals.
    lambda_l2, weight_decay : float
        L2 penalty in the loss, and the decay term added to the gradient.
    lr, lr_drop_epoch, lr_dropped : float, int, float
        Learning rate for epochs before ``lr_drop_epoch`` and after it.
    epochs : int
    batch_pos, batch_neg : int
        Foreground/background proposals drawn per image.
    fg_fraction : float
        Foreground share of a batch assumed by the class-weight formulas.
    mutual_exclusion, use_prior : bool
        Generate pairwise exclusion axioms; use any prior axioms at all.
    axioms : str or KnowledgeBase, optional
        Prior axioms replacing the generated ones.
    ontology : dict or PartOntology or str, optional
        Whole/part classes. Enables the ``partOf`` predicate, its example
        clause and (with ``use_prior``) the mereological axioms.
    prior_gamma : float, optional
        Focusing exponent for prior axioms; defaults to ``gamma``.
    random_state : int
    """

    def __init__(self, k=6, gamma=2.0, beta=0.999, use_alpha=False, include_bg=False,
                 lambda_l2=5e-4, weight_decay=5e-4, lr=1e-5, lr_drop_epoch=60, lr_dropped=1e-6,
                 epochs=150, batch_pos=32, batch_neg=96, fg_fraction=0.5,
                 mutual_exclusion=True, use_prior=True, axioms=None, ontology=None,
                 prior_gamma=None, prior_weight=1.0, expl_weight=1.0,
                 partof_pos_ir=0.7, partof_neg_ir=0.1, init_scale=0.05, random_state=0):
        self.k = k
        self.gamma = gamma
        self.beta = beta
        self.use_alpha = use_alpha
        self.include_bg = include_bg
        self.lambda_l2 = lambda_l2
        self.weight_decay = weight_decay
        self.lr = lr
        self.lr_drop_epoch = lr_drop_epoch
        self.lr_dropped = lr_dropped
        self.epochs = epochs
        self.batch_pos = batch_pos
        self.batch_neg = batch_neg
        self.fg_fraction = fg_fraction
        self.mutual_exclusion = mutual_exclusion
        self.use_prior = use_prior
        self.axioms = axioms
        self.ontology = ontology
        self.prior_gamma = prior_gamma
        self.prior_weight = prior_weight
        self.expl_weight = expl_weight
        self.partof_pos_ir = partof_pos_ir
        self.partof_neg_ir = partof_neg_ir
        self.init_scale = init_scale
        self.random_state = random_state

    # -- configuration helpers ------------------------------------------------

    def _ontology(self) -> PartOntology | None:
        ont = self.ontology
        if ont is None or isinstance(ont, PartOntology):
            return ont
        if isinstance(ont, str):
            return parse_ontology(ont)
        return PartOntology(dict(ont))

    def _aggregator(self) -> AggregatorConfig:
        return AggregatorConfig(gamma=self.gamma, use_alpha=self.use_alpha, beta=self.beta)

    def _prior_kb(self, classes, ontology) -> KnowledgeBase | None:
        if not self.use_prior:
            return None
        if self.axioms is None:
            kb = build_prior_theory(classes, ontology, self.mutual_exclusion, self.include_bg)
        elif isinstance(self.axioms, KnowledgeBase):
            kb = self.axioms
        else:
            kb = parse_axioms(self.axioms)
        problems = validate(kb)
        if problems:
            raise ValueError("invalid prior axioms: " + "; ".join(problems))
        return kb

    def _lr_at(self, epoch: int) -> float:
        return self.lr if epoch < self.lr_drop_epoch else self.lr_dropped

    # -- data plumbing ----------------------------------------------------------

    @staticmethod
    def _images(X, y, groups, boxes, image_sizes):
        n = X.shape[0]
        if groups is None:
            groups = np.zeros(n, dtype=object)
        groups = np.asarray(groups, dtype=object)
        if boxes is None:
            boxes = np.tile([0.0, 0.0, 1.0, 1.0], (n, 1))
        boxes = np.asarray(boxes, dtype=np.float64)
        if groups.shape != (n,) or boxes.shape != (n, 4):
            raise ValueError("groups must have shape (n,) and boxes shape (n, 4)")
        labels = [BACKGROUND] * n if y is None else list(y)
        order: dict = {}
        for i, g in enumerate(groups):
            order.setdefault(g, []).append(i)
        images = []
        for g, idx in order.items():
            props = [ProposalEmbedding(BoundingBox(*boxes[i]), X[i], labels[i]) for i in idx]
            size = None if image_sizes is None else tuple(image_sizes[g])
            images.append((g, props, size, np.asarray(idx)))
        return images

    def _grounded(self) -> dict[str, GroundedPredicate]:
        out = {}
        for name, params in self.predicates_.items():
            if name == PART_OF:
                out[name] = GroundedPredicate(PredicateSymbol(name, 2), params, partof_featurizer)
            else:
                out[name] = GroundedPredicate(PredicateSymbol(name, 1), params)
        return out

    def _flat_params(self) -> dict[str, np.ndarray]:
        return {f"{name}.{p}": v for name, params in self.predicates_.items() for p, v in params.items()}

    def _set_flat_params(self, flat: dict) -> None:
        self.predicates_ = {
            name: PredicateParams(*(flat[f"{name}.{p}"] for p in ("W", "V", "u", "b")))
            for name in self.predicates_
        }

    def build_theory(self, batch: Batch, kb: KnowledgeBase | None = None, stats=None,
                     lambda_l2: float | None = None) -> TheoryLoss:
        """Compile the loss graph of one batch on a fresh tape."""
        env = GroundingEnvironment(self._grounded(), batch.domain())
        ontology = self._ontology() if PART_OF in self.predicates_ else None
        clauses = build_expl_theory(batch, list(self.classes_), self.include_bg, stats, ontology,
                                    self.partof_pos_ir, self.partof_neg_ir)
        return compile_theory(kb, env, self._aggregator(),
                              self.lambda_l2 if lambda_l2 is None else lambda_l2,
                              clauses, self.prior_gamma, self.prior_weight, self.expl_weight)

    # -- estimator API ----------------------------------------------------------

    def fit(self, X, y, groups=None, boxes=None, image_sizes=None, classes=None):
        """Train on proposal embeddings ``X`` with labels ``y`` (``"bg"`` for background).

        ``groups`` assigns proposals to images (one batch per image and
        step), ``boxes`` gives their (x1, y1, x2, y2) corners and
        ``image_sizes`` maps image ids to (width, height).
        """
        X, y = check_X_y(X, y, dtype=np.float64, y_numeric=False)
        y = np.asarray([str(v) for v in y], dtype=object)
        if self.epochs < 0:
            raise ValueError("epochs must be non-negative")
        if classes is None:
            classes = sorted(set(y) - {BACKGROUND})
        classes = list(classes)
        check_class_names(classes)
        if len(classes) < 1:
            raise ValueError("need at least one foreground class")
        unknown = set(y) - set(classes) - {BACKGROUND}
        if unknown:
            raise ValueError(f"labels outside the class list: {', '.join(sorted(unknown))}")
        ontology = self._ontology()
        if ontology is not None:
            ontology.check(classes)

        self.classes_ = np.array(classes, dtype=object)
        self.n_features_in_ = X.shape[1]
        rng = np.random.default_rng(self.random_state)
        names = classes + ([BACKGROUND] if self.include_bg else [])
        self.predicates_ = {c: PredicateParams.initialize(X.shape[1], self.k, rng, self.init_scale)
                            for c in names}
        if ontology is not None:
            self.predicates_[PART_OF] = PredicateParams.initialize(
                2 * X.shape[1] + 9, self.k, rng, self.init_scale)

        kb = self._prior_kb(classes, ontology)
        if kb is not None:
            missing = [s.name for s in kb.predicates if s.name not in self.predicates_]
            if missing:
                raise ValueError(f"axioms use predicates without groundings: {', '.join(missing)}")
        self.prior_kb_ = kb
        policy = BatchPolicy(self.batch_pos, self.batch_neg)
        stats = None
        if self.use_alpha:
            stats = ClassStats.from_labels(list(y), classes, policy.size, self.beta, self.fg_fraction,
                                           BACKGROUND if self.include_bg else None)
        self.class_stats_ = stats

        images = self._images(X, y, groups, boxes, image_sizes)
        state = ad.AdamState()
        self.history_: list[EpochRecord] = []
        for epoch in range(self.epochs):
            lr = self._lr_at(epoch)
            order = np.random.default_rng([self.random_state, epoch]).permutation(len(images))
            sums = np.zeros(4)
            steps = skipped = 0
            for pos in order:
                image_id, props, size, _ = images[pos]
                try:
                    batch = make_batch(props, policy, [self.random_state, epoch, int(pos)],
                                       str(image_id), size)
                except NoForegroundError:
                    skipped += 1
                    continue
                theory = self.build_theory(batch, kb, stats)
                grads = theory.total.tape.backward(theory.total)
                flat, state = ad.adam_step(self._flat_params(), grads, state, lr, self.weight_decay)
                self._set_flat_params(flat)
                sums += (theory.group("expl/"), theory.group("prior/"),
                         float(theory.l2_term.value), float(theory.total.value))
                steps += 1
            means = sums / max(steps, 1)
            rec = EpochRecord(epoch + 1, *map(float, means), lr, skipped)
            self.history_.append(rec)
            log.info("epoch %d expl=%.5f prior=%.5f l2=%.5f total=%.5f lr=%g skipped=%d",
                     rec.epoch, rec.expl_loss, rec.prior_loss, rec.l2, rec.total, lr, skipped)
        return self

    def truth_values(self, X) -> dict[str, np.ndarray]:
        """Truth of every is-a predicate (``bg`` included) at each row of ``X``."""
        check_is_fitted(self, "predicates_")
        X = check_array(X, dtype=np.float64)
        if X.shape[1] != self.n_features_in_:
            raise ValueError(f"X has {X.shape[1]} features, model expects {self.n_features_in_}")
        return {name: predicate_truth(p, X) for name, p in self.predicates_.items() if name != PART_OF}

    def predict_proba(self, X) -> np.ndarray:
        """Per-class truth values; rows are not normalised (classes are one-vs-all)."""
        truths = self.truth_values(X)
        return np.column_stack([truths[c] for c in self.classes_])

    decision_function = predict_proba

    def predict(self, X) -> np.ndarray:
        return self.classes_[np.argmax(self.predict_proba(X), axis=1)]

    def satisfaction(self, X, y, groups=None, boxes=None, image_sizes=None,
                     kb: KnowledgeBase | None = None) -> dict[str, float]:
        """Mean truth of each clause's literals (or axiom instantiations) over whole images.

        Example clauses are keyed ``expl/<predicate>`` and axioms
        ``prior/<formula>``. ``kb`` defaults to the prior used in training.
        """
        check_is_fitted(self, "predicates_")
        X, y = check_X_y(X, y, dtype=np.float64, y_numeric=False)
        kb = self.prior_kb_ if kb is None else kb
        sums: dict[str, float] = {}
        counts: dict[str, int] = {}
        for image_id, props, size, idx in self._images(X, list(map(str, y)), groups, boxes, image_sizes):
            batch = Batch(props, str(image_id), size, idx)
            theory = self.build_theory(batch, kb, lambda_l2=0.0)
            for name, node in theory.clause_truths.items():
                sums[name] = sums.get(name, 0.0) + float(np.sum(node.value))
                counts[name] = counts.get(name, 0) + node.value.size
        return {name: sums[name] / counts[name] for name in sorted(sums)}

    # -- persistence ------------------------------------------------------------

    def checkpoint(self) -> dict[str, np.ndarray]:
        check_is_fitted(self, "predicates_")
        return self._flat_params()

    def save(self, path) -> None:
        ad.save_checkpoint(path, self.checkpoint())

    @classmethod
    def from_params(cls, flat: dict, **params) -> "LTNDetector":
        """Rebuild a fitted model from flat ``<predicate>.<tensor>`` arrays."""
        names = list(dict.fromkeys(key.rsplit(".", 1)[0] for key in flat))
        est = cls(**params)
        est.predicates_ = {}
        for name in names:
            est.predicates_[name] = PredicateParams(*(np.asarray(flat[f"{name}.{p}"], dtype=np.float64)
                                                      for p in ("W", "V", "u", "b")))
        est.classes_ = np.array([n for n in names if n not in (BACKGROUND, PART_OF)], dtype=object)
        if len(est.classes_) == 0:
            raise ValueError("checkpoint holds no class predicates")
        est.include_bg = BACKGROUND in est.predicates_
        est.n_features_in_ = est.predicates_[est.classes_[0]].d
        est.prior_kb_ = None
        est.history_ = []
        return est

    @classmethod
    def load(cls, path, **params) -> "LTNDetector":
        return cls.from_params(ad.load_checkpoint(path), **params)
