"""Detection groundings: boxes, proposal and pair vectors, batches, example and prior theories."""

from __future__ import annotations

import itertools
import re
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .fuzzy import ClassStats
from .grounding import Domain, LiteralClause
from .logic import (
    And, Atom, ForAll, Implies, KnowledgeBase, Not, Or, PredicateSymbol, Variable,
)

__all__ = [
    "BACKGROUND", "PART_OF", "BoundingBox", "ProposalEmbedding", "PartOntology",
    "Batch", "BatchPolicy", "NoForegroundError", "containment_ratio", "iou",
    "containment_matrix", "iou_matrix", "ground_object", "ground_pair",
    "pair_features", "build_expl_theory", "build_prior_theory", "make_batch",
    "parse_ontology", "format_ontology", "check_class_names",
]

BACKGROUND = "bg"
PART_OF = "partOf"
_NAME_RE = re.compile(r"^[A-Za-z_][A-Za-z0-9_]*$")
_RESERVED = {BACKGROUND, PART_OF, "pred", "axiom", "forall"}


class NoForegroundError(ValueError):
    """The proposals of an image contain no foreground box."""


@dataclass(frozen=True)
class BoundingBox:
    x1: float
    y1: float
    x2: float
    y2: float

    def __post_init__(self):
        if not (self.x2 > self.x1 and self.y2 > self.y1):
            raise ValueError(f"degenerate box {self.as_tuple()}")

    def as_tuple(self) -> tuple[float, float, float, float]:
        return (self.x1, self.y1, self.x2, self.y2)

    @property
    def area(self) -> float:
        return (self.x2 - self.x1) * (self.y2 - self.y1)


@dataclass
class ProposalEmbedding:
    box: BoundingBox
    z: np.ndarray
    label: str = BACKGROUND

    @property
    def is_foreground(self) -> bool:
        return self.label != BACKGROUND


def _intersection(a: BoundingBox, b: BoundingBox) -> float:
    w = min(a.x2, b.x2) - max(a.x1, b.x1)
    h = min(a.y2, b.y2) - max(a.y1, b.y1)
    return max(w, 0.0) * max(h, 0.0)


def containment_ratio(b_m: BoundingBox, b_l: BoundingBox) -> float:
    """Fraction of ``b_m``'s area lying inside ``b_l`` (not symmetric)."""
    return _intersection(b_m, b_l) / b_m.area


def iou(b1: BoundingBox, b2: BoundingBox) -> float:
    inter = _intersection(b1, b2)
    return inter / (b1.area + b2.area - inter)


def _pairwise_intersection(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    w = np.minimum(a[:, None, 2], b[None, :, 2]) - np.maximum(a[:, None, 0], b[None, :, 0])
    h = np.minimum(a[:, None, 3], b[None, :, 3]) - np.maximum(a[:, None, 1], b[None, :, 1])
    return np.clip(w, 0, None) * np.clip(h, 0, None)


def _areas(boxes: np.ndarray) -> np.ndarray:
    return (boxes[:, 2] - boxes[:, 0]) * (boxes[:, 3] - boxes[:, 1])


def containment_matrix(boxes_m, boxes_l) -> np.ndarray:
    """``out[i, j] = containment_ratio(boxes_m[i], boxes_l[j])`` for (n, 4) corner arrays."""
    a = np.asarray(boxes_m, dtype=np.float64).reshape(-1, 4)
    b = np.asarray(boxes_l, dtype=np.float64).reshape(-1, 4)
    return _pairwise_intersection(a, b) / _areas(a)[:, None]


def iou_matrix(boxes_a, boxes_b) -> np.ndarray:
    a = np.asarray(boxes_a, dtype=np.float64).reshape(-1, 4)
    b = np.asarray(boxes_b, dtype=np.float64).reshape(-1, 4)
    inter = _pairwise_intersection(a, b)
    return inter / (_areas(a)[:, None] + _areas(b)[None, :] - inter)


def ground_object(p: ProposalEmbedding) -> np.ndarray:
    # the box is deliberately left out: is-a truth must not depend on position
    return p.z


def _norm_box(box: BoundingBox, image_size) -> np.ndarray:
    b = np.asarray(box.as_tuple(), dtype=np.float64)
    if image_size is None:
        return b
    w, h = image_size
    return b / np.array([w, h, w, h], dtype=np.float64)


def ground_pair(p_m: ProposalEmbedding, p_l: ProposalEmbedding, image_size=None) -> np.ndarray:
    """``<z_m, b_m, z_l, b_l, ir_ml>`` with boxes scaled by the image width/height."""
    if p_m.z.shape != p_l.z.shape:
        raise ValueError(f"embedding dimensions differ: {p_m.z.shape} vs {p_l.z.shape}")
    ir = containment_ratio(p_m.box, p_l.box)
    return np.concatenate([p_m.z, _norm_box(p_m.box, image_size),
                           p_l.z, _norm_box(p_l.box, image_size), [ir]])


def pair_features(Z: np.ndarray, boxes: np.ndarray, idx_m, idx_l, image_size=None) -> np.ndarray:
    """Rows of :func:`ground_pair` for index arrays into stacked embeddings and boxes."""
    idx_m = np.asarray(idx_m, dtype=np.intp)
    idx_l = np.asarray(idx_l, dtype=np.intp)
    boxes = np.asarray(boxes, dtype=np.float64)
    nb = boxes if image_size is None else boxes / np.array(
        [image_size[0], image_size[1], image_size[0], image_size[1]], dtype=np.float64)
    bm, bl = boxes[idx_m], boxes[idx_l]
    w = np.minimum(bm[:, 2], bl[:, 2]) - np.maximum(bm[:, 0], bl[:, 0])
    h = np.minimum(bm[:, 3], bl[:, 3]) - np.maximum(bm[:, 1], bl[:, 1])
    ir = np.clip(w, 0, None) * np.clip(h, 0, None) / _areas(bm)
    return np.hstack([Z[idx_m], nb[idx_m], Z[idx_l], nb[idx_l], ir[:, None]])


# ---------------------------------------------------------------------------
# ontology

@dataclass
class PartOntology:
    parts: dict[str, tuple[str, ...]] = field(default_factory=dict)

    def __post_init__(self):
        self.parts = {w: tuple(ps) for w, ps in self.parts.items()}
        clash = set(self.wholes) & set(self.part_classes)
        if clash:
            raise ValueError(f"classes both whole and part: {', '.join(sorted(clash))}")

    @property
    def wholes(self) -> list[str]:
        return list(self.parts)

    @property
    def part_classes(self) -> list[str]:
        seen = {}
        for ps in self.parts.values():
            for p in ps:
                seen.setdefault(p, None)
        return list(seen)

    def is_part_of(self, part: str, whole: str) -> bool:
        return part in self.parts.get(whole, ())

    def check(self, classes: Sequence[str]) -> None:
        known = set(classes)
        missing = [c for c in self.wholes + self.part_classes if c not in known]
        if missing:
            raise ValueError(f"ontology references undeclared class(es): {', '.join(missing)}")


def parse_ontology(text: str) -> PartOntology:
    """Parse ``whole: part1, part2`` lines; ``#`` starts a comment."""
    parts: dict[str, tuple[str, ...]] = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if ":" not in line:
            raise ValueError(f"ontology line {lineno}: expected 'whole: part, ...'")
        whole, rest = line.split(":", 1)
        whole = whole.strip()
        names = tuple(p.strip() for p in rest.split(",") if p.strip())
        if not whole or not names:
            raise ValueError(f"ontology line {lineno}: empty whole or part list")
        if whole in parts:
            raise ValueError(f"ontology line {lineno}: whole {whole!r} listed twice")
        parts[whole] = names
    return PartOntology(parts)


def format_ontology(ontology: PartOntology) -> str:
    return "".join(f"{w}: {', '.join(ps)}\n" for w, ps in ontology.parts.items())


def check_class_names(classes: Sequence[str]) -> None:
    if len(set(classes)) != len(classes):
        raise ValueError("class names must be unique")
    for c in classes:
        if not _NAME_RE.match(c) or c in _RESERVED:
            raise ValueError(f"invalid class name {c!r}")


# ---------------------------------------------------------------------------
# batches and theories

@dataclass(frozen=True)
class BatchPolicy:
    n_pos: int = 32
    n_neg: int = 96

    @property
    def size(self) -> int:
        return self.n_pos + self.n_neg


@dataclass
class Batch:
    proposals: list[ProposalEmbedding]
    image_id: str = ""
    image_size: tuple[float, float] | None = None
    indices: np.ndarray | None = None  # positions in the source proposal list

    def __len__(self):
        return len(self.proposals)

    @property
    def labels(self) -> list[str]:
        return [p.label for p in self.proposals]

    @property
    def Z(self) -> np.ndarray:
        return np.vstack([ground_object(p) for p in self.proposals])

    @property
    def boxes(self) -> np.ndarray:
        return np.array([p.box.as_tuple() for p in self.proposals], dtype=np.float64)

    def domain(self) -> Domain:
        return Domain(self.Z, self)


def make_batch(proposals: Sequence[ProposalEmbedding], policy: BatchPolicy, seed,
               image_id: str = "", image_size=None) -> Batch:
    """Seeded selection of foreground and background proposals at the policy's ratio.

    If the image has fewer proposals than the policy asks for, both counts
    are scaled down by the same factor so the ratio is kept as nearly as
    possible.
    """
    fg = [i for i, p in enumerate(proposals) if p.is_foreground]
    bg = [i for i, p in enumerate(proposals) if not p.is_foreground]
    if not fg:
        raise NoForegroundError(f"image {image_id!r} has no foreground proposals")
    shrink = min(1.0, len(fg) / policy.n_pos if policy.n_pos else 1.0,
                 len(bg) / policy.n_neg if policy.n_neg else 1.0)
    n_fg = min(len(fg), max(1, int(round(shrink * policy.n_pos))))
    n_bg = min(len(bg), int(round(shrink * policy.n_neg)))
    rng = np.random.default_rng(seed)
    chosen = np.sort(np.concatenate([
        rng.choice(np.asarray(fg), size=n_fg, replace=False),
        rng.choice(np.asarray(bg, dtype=np.intp), size=n_bg, replace=False),
    ]).astype(np.intp))
    return Batch([proposals[i] for i in chosen], image_id, image_size, chosen)


def build_expl_theory(batch: Batch, classes: Sequence[str], include_bg: bool = False,
                      stats: ClassStats | None = None, ontology: PartOntology | None = None,
                      pos_ir: float = 0.7, neg_ir: float = 0.1) -> list[LiteralClause]:
    """One-vs-all example clauses for a batch.

    Each class gets one clause with a positive literal for every proposal of
    that class and a negated literal for every other proposal. With
    ``stats``, literals are weighted by the class's positive/negative alphas.
    With an ``ontology``, a ``partOf`` clause is added over ordered proposal
    pairs ``(y, x)``: positive when ``y``'s class is a part of ``x``'s and
    ``y`` lies at least ``pos_ir`` inside ``x``; negative when the labels are
    inconsistent or the containment is at most ``neg_ir``; other pairs are
    left out.
    """
    if len(batch) == 0:
        raise ValueError("empty batch")
    known = set(classes) | {BACKGROUND}
    labels = np.array(batch.labels, dtype=object)
    unknown = sorted(set(labels) - known)
    if unknown:
        raise ValueError(f"unknown label(s) in batch: {', '.join(unknown)}")
    everyone = np.arange(len(batch))
    predicates = list(classes) + ([BACKGROUND] if include_bg else [])
    clauses = []
    for c in predicates:
        pos = labels == c
        # unit weights are kept explicit so weighted and unweighted graphs share one structure
        weights = np.ones(len(batch))
        if stats is not None:
            weights = np.where(pos, stats.alpha_pos[c], stats.alpha_neg[c])
        clauses.append(LiteralClause(c, c, (everyone,), pos, weights))
    if ontology is not None:
        n = len(batch)
        y, x = np.nonzero(~np.eye(n, dtype=bool))
        ir = containment_matrix(batch.boxes, batch.boxes)[y, x]
        consistent = np.array([ontology.is_part_of(labels[i], labels[j]) for i, j in zip(y, x)], dtype=bool)
        pos = consistent & (ir >= pos_ir)
        neg = ~consistent | (ir <= neg_ir)
        keep = pos | neg
        if keep.any():
            clauses.append(LiteralClause(PART_OF, PART_OF, (y[keep], x[keep]), pos[keep]))
    return clauses


def _whole_part_axiom(whole: str, body) -> ForAll:
    x, y = Variable("x"), Variable("y")
    antecedent = And(Atom(PredicateSymbol(whole, 1), (x,)), Atom(PredicateSymbol(PART_OF, 2), (y, x)))
    return ForAll(("x", "y"), Implies(antecedent, body))


def build_prior_theory(classes: Sequence[str], ontology: PartOntology | None = None,
                       mutual_exclusion: bool = True, include_bg: bool = False) -> KnowledgeBase:
    """Mutual exclusion over class pairs, plus whole/part axioms from ``ontology``.

    For each whole ``W`` with parts ``S``:
    ``forall x,y: W(x) & partOf(y,x) -> S1(y) | S2(y) | ...``. Containment
    restrictions: for every ordered pair of wholes ``(W, W')`` and of parts
    ``(P, P')``, ``forall x,y: W(x) & partOf(y,x) -> ~W'(y)`` and likewise
    for parts.
    """
    check_class_names(classes)
    names = list(classes) + ([BACKGROUND] if include_bg else [])
    symbols = {c: PredicateSymbol(c, 1) for c in names}
    kb = KnowledgeBase(predicates=list(symbols.values()))
    if mutual_exclusion:
        for a, b in itertools.combinations(names, 2):
            x = Variable("x")
            kb.axioms.append(ForAll(("x",), Implies(Atom(symbols[a], (x,)), Not(Atom(symbols[b], (x,))))))
    if ontology is not None and ontology.parts:
        ontology.check(classes)
        kb.predicates.append(PredicateSymbol(PART_OF, 2))
        y = Variable("y")
        for whole, parts in ontology.parts.items():
            body = Atom(symbols[parts[0]], (y,))
            for p in parts[1:]:
                body = Or(body, Atom(symbols[p], (y,)))
            kb.axioms.append(_whole_part_axiom(whole, body))
        for group in (ontology.wholes, ontology.part_classes):
            for a, b in itertools.product(group, repeat=2):
                kb.axioms.append(_whole_part_axiom(a, Not(Atom(symbols[b], (y,)))))
    return kb
