"""Łukasiewicz connectives and loss aggregators over truth-value nodes.

Connectives accept graph nodes or plain floats/arrays (then they evaluate
directly with numpy), so the algebra can be tested without a tape.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad

__all__ = [
    "luk_not", "luk_or", "luk_and", "luk_implies", "focal_log_product",
    "log_product", "AggregatorConfig", "ClassStats", "class_weights",
    "literal_counts",
]


def _is_node(*xs) -> bool:
    return any(isinstance(x, ad.Node) for x in xs)


def luk_not(a):
    return 1.0 - a


def luk_or(a, b):
    """min(1, a + b)"""
    if _is_node(a, b):
        return ad.clamp_max(ad.add(a, b), 1.0)
    return np.minimum(1.0, np.add(a, b))


def luk_and(a, b):
    """Strong conjunction max(0, a + b - 1)."""
    if _is_node(a, b):
        return ad.clamp_min(ad.add(a, b) - 1.0, 0.0)
    return np.maximum(0.0, np.add(a, b) - 1.0)


def luk_implies(a, b):
    """min(1, 1 - a + b)"""
    if _is_node(a, b):
        return ad.clamp_max(ad.add(1.0 - a, b), 1.0)
    return np.minimum(1.0, 1.0 - np.asarray(a) + b)


@dataclass(frozen=True)
class AggregatorConfig:
    gamma: float = 2.0
    use_alpha: bool = False
    beta: float = 0.999
    variant: str = "focal_log_product"

    def __post_init__(self):
        if self.gamma < 0:
            raise ValueError(f"gamma must be >= 0, got {self.gamma}")
        if not 0.0 < self.beta < 1.0:
            raise ValueError(f"beta must lie in (0, 1), got {self.beta}")
        if self.variant not in ("log_product", "focal_log_product"):
            raise ValueError(f"unknown aggregator variant {self.variant!r}")

    @property
    def effective_gamma(self) -> float:
        return 0.0 if self.variant == "log_product" else self.gamma


def focal_log_product(truths, weights=1.0, gamma: float = 2.0, eps: float = ad.LOG_EPS):
    """Loss ``-sum(alpha * (1 - x)**gamma * log(x))`` over every literal truth ``x``.

    ``weights`` broadcasts against ``truths``. The logarithm is guarded at
    ``eps`` so fully falsified literals stay finite. Returns a scalar node
    when ``truths`` is a node, a float otherwise.
    """
    if not _is_node(truths):
        x = np.asarray(truths, dtype=np.float64)
        terms = -np.log(np.maximum(x, eps)) if eps > 0 else -np.log(x)
        if gamma != 0:
            terms = terms * (1.0 - x) ** gamma
        return float(np.sum(np.asarray(weights) * terms))
    nll = -ad.log(truths, eps)
    if gamma != 0:
        nll = ad.power(1.0 - truths, gamma) * nll
    if not (np.isscalar(weights) and weights == 1.0):
        nll = nll * np.asarray(weights, dtype=np.float64)
    return ad.sum(nll)


def log_product(truths, weights=1.0, eps: float = ad.LOG_EPS):
    return focal_log_product(truths, weights, 0.0, eps)


def class_weights(p_c: float, N: int, beta: float, fg_fraction: float = 0.5):
    """Effective-number weights for the positive and negative literals of one class.

    With ``f = fg_fraction``: ``pos = N*f*p_c`` and ``neg = N*(1-f) + N*f*(1-p_c)``;
    each weight is ``(1 - beta) / (1 - beta**count)``. A class with no
    positives gets a positive weight of 0.
    """
    if not 0.0 < beta < 1.0:
        raise ValueError(f"beta must lie in (0, 1), got {beta}")
    if not 0.0 <= p_c <= 1.0:
        raise ValueError(f"class frequency must lie in [0, 1], got {p_c}")
    pos, neg = literal_counts(p_c, N, fg_fraction)
    alpha_pos = 0.0 if pos == 0 else (1.0 - beta) / (1.0 - beta ** pos)
    alpha_neg = 0.0 if neg == 0 else (1.0 - beta) / (1.0 - beta ** neg)
    return alpha_pos, alpha_neg


def literal_counts(p_c: float, N: int, fg_fraction: float = 0.5) -> tuple[float, float]:
    pos = N * fg_fraction * p_c
    neg = N * (1.0 - fg_fraction) + N * fg_fraction * (1.0 - p_c)
    return pos, neg


@dataclass(frozen=True)
class ClassStats:
    """Per-class frequencies and the literal weights derived from them."""

    class_freq: dict
    batch_size: int
    pos_count: dict
    neg_count: dict
    alpha_pos: dict
    alpha_neg: dict

    @classmethod
    def from_labels(cls, labels, classes, batch_size: int, beta: float,
                    fg_fraction: float = 0.5, background: str | None = None):
        """Statistics from the labels of every training box.

        When ``background`` names a background predicate, it is weighted as a
        class whose positives are the background share of the batch.
        """
        labels = [lab for lab in labels if lab != (background or "bg")]
        total = len(labels)
        freq = {c: (labels.count(c) / total if total else 0.0) for c in classes}
        pos, neg, ap, an = {}, {}, {}, {}
        for c in classes:
            pos[c], neg[c] = literal_counts(freq[c], batch_size, fg_fraction)
            ap[c], an[c] = class_weights(freq[c], batch_size, beta, fg_fraction)
        if background:
            # background positives fill the non-foreground share; every foreground box is a negative
            pos[background] = batch_size * (1.0 - fg_fraction)
            neg[background] = batch_size * fg_fraction
            ap[background] = (1.0 - beta) / (1.0 - beta ** pos[background]) if pos[background] else 0.0
            an[background] = (1.0 - beta) / (1.0 - beta ** neg[background]) if neg[background] else 0.0
        return cls(freq, batch_size, pos, neg, ap, an)
