"""Experiment configuration, presets, and the train/evaluate drivers behind the CLI."""

from __future__ import annotations

import dataclasses
import logging
import os
from dataclasses import dataclass

import numpy as np

from .data import Dataset, _field_types, parse_keyvalue, read_class_list, read_dataset
from .detection import parse_ontology
from .estimator import EpochRecord, LTNDetector
from .evaluation import EvalReport, score_report

__all__ = [
    "ExperimentConfig", "PRESETS", "run_preset", "train", "evaluate", "format_metrics",
    "parse_metrics", "VARIANTS",
]

log = logging.getLogger(__name__)

# variant -> (use_alpha, include_bg)
VARIANTS = {
    "plain": (False, False),
    "alpha": (True, False),
    "bg": (False, True),
    "bg_alpha": (True, True),
}


@dataclass
class ExperimentConfig:
    variant: str = "plain"
    gamma: float = 2.0
    beta: float = 0.999
    lambda_l2: float = 5e-4
    weight_decay: float = 5e-4
    lr: float = 1e-5
    lr_drop_epoch: int = 60
    lr_dropped: float = 1e-6
    epochs: int = 150
    batch_pos: int = 32
    batch_neg: int = 96
    fg_fraction: float = 0.5
    k: int = 6
    seed: int = 0
    mutual_exclusion: bool = True
    use_prior: bool = True
    prior_gamma: float | None = None
    prior_weight: float = 1.0
    expl_weight: float = 1.0
    partof_pos_ir: float = 0.7
    partof_neg_ir: float = 0.1
    init_scale: float = 0.05
    dataset: str = ""
    axioms: str = ""
    ontology: str = ""
    classes: str = ""
    checkpoint: str = "model.ltnw"
    metrics: str = ""

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        if self.variant not in VARIANTS:
            raise ValueError(f"unknown variant {self.variant!r}; expected one of {', '.join(VARIANTS)}")
        for name in ("lr", "lr_dropped", "k", "batch_pos"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        for name in ("weight_decay", "lambda_l2", "gamma", "batch_neg", "epochs", "lr_drop_epoch"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be non-negative")
        if self.epochs > 0 and self.lr_drop_epoch >= self.epochs:
            raise ValueError("lr_drop_epoch must be smaller than epochs")
        if not 0.0 < self.beta < 1.0:
            raise ValueError("beta must lie in (0, 1)")
        if not 0.0 < self.fg_fraction <= 1.0:
            raise ValueError("fg_fraction must lie in (0, 1]")

    @property
    def use_alpha(self) -> bool:
        return VARIANTS[self.variant][0]

    @property
    def include_bg(self) -> bool:
        return VARIANTS[self.variant][1]

    @classmethod
    def from_text(cls, text: str, base_dir: str | None = None) -> "ExperimentConfig":
        values = parse_keyvalue(text, _field_types(cls))
        if base_dir:
            for key in ("dataset", "axioms", "ontology", "classes", "checkpoint", "metrics"):
                if values.get(key) and not os.path.isabs(values[key]):
                    values[key] = os.path.join(base_dir, values[key])
        return cls(**values)

    @classmethod
    def read(cls, path) -> "ExperimentConfig":
        with open(path, encoding="utf-8") as fh:
            return cls.from_text(fh.read(), os.path.dirname(os.path.abspath(path)))

    def to_text(self) -> str:
        lines = []
        for f in dataclasses.fields(self):
            value = getattr(self, f.name)
            if value == "" or value is None:
                continue
            if isinstance(value, bool):
                value = str(value).lower()
            lines.append(f"{f.name} = {value}")
        return "\n".join(lines) + "\n"

    def estimator(self, **overrides) -> LTNDetector:
        params = dict(
            k=self.k, gamma=self.gamma, beta=self.beta, use_alpha=self.use_alpha,
            include_bg=self.include_bg, lambda_l2=self.lambda_l2, weight_decay=self.weight_decay,
            lr=self.lr, lr_drop_epoch=self.lr_drop_epoch, lr_dropped=self.lr_dropped,
            epochs=self.epochs, batch_pos=self.batch_pos, batch_neg=self.batch_neg,
            fg_fraction=self.fg_fraction, mutual_exclusion=self.mutual_exclusion,
            use_prior=self.use_prior, prior_gamma=self.prior_gamma, prior_weight=self.prior_weight,
            expl_weight=self.expl_weight, partof_pos_ir=self.partof_pos_ir,
            partof_neg_ir=self.partof_neg_ir, init_scale=self.init_scale, random_state=self.seed,
        )
        params.update(overrides)
        return LTNDetector(**params)


# desk-scale overrides: short runs on synthetic embeddings need a far larger step size
_DESK = dict(epochs=50, lr=1e-2, lr_drop_epoch=40, lr_dropped=1e-3)

PRESETS = tuple(VARIANTS)


def run_preset(name: str, scale: str = "full") -> ExperimentConfig:
    """Configuration of a named ablation; ``scale="desk"`` shortens the schedule for synthetic data."""
    if name not in VARIANTS:
        raise ValueError(f"unknown preset {name!r}; expected one of {', '.join(VARIANTS)}")
    if scale not in ("full", "desk"):
        raise ValueError(f"unknown scale {scale!r}")
    cfg = ExperimentConfig(variant=name)
    if scale == "desk":
        cfg = dataclasses.replace(cfg, **_DESK)
    return cfg


def format_metrics(history) -> str:
    lines = ["# epoch\texpl_loss\tprior_loss\tl2\ttotal\tlr"]
    for r in history:
        lines.append(f"{r.epoch}\t{r.expl_loss!r}\t{r.prior_loss!r}\t{r.l2!r}\t{r.total!r}\t{r.lr!r}")
    return "\n".join(lines) + "\n"


def parse_metrics(text: str) -> list[EpochRecord]:
    out = []
    for line in text.splitlines():
        if not line.strip() or line.startswith("#"):
            continue
        e, *vals = line.split("\t")
        out.append(EpochRecord(int(e), *(float(v) for v in vals)))
    return out


def _load_inputs(cfg: ExperimentConfig) -> tuple[Dataset, list[str]]:
    if not cfg.dataset:
        raise ValueError("config does not name a dataset")
    ds = read_dataset(cfg.dataset)
    classes = read_class_list(cfg.classes) if cfg.classes else ds.infer_classes()
    return ds, classes


def fit_dataset(est: LTNDetector, ds: Dataset, classes) -> LTNDetector:
    X, y, groups, boxes = ds.arrays()
    return est.fit(X, y, groups=groups, boxes=boxes, image_sizes=ds.image_sizes(), classes=classes)


def train(cfg: ExperimentConfig, dataset: Dataset | None = None, classes=None,
          write: bool = True) -> LTNDetector:
    """Fit a model for ``cfg`` and write its checkpoint and per-epoch metrics log."""
    if dataset is None:
        dataset, file_classes = _load_inputs(cfg)
        classes = classes or file_classes
    classes = list(classes or dataset.classes or dataset.infer_classes())
    overrides = {}
    if cfg.axioms:
        with open(cfg.axioms, encoding="utf-8") as fh:
            overrides["axioms"] = fh.read()
    if cfg.ontology:
        with open(cfg.ontology, encoding="utf-8") as fh:
            overrides["ontology"] = parse_ontology(fh.read())
    elif dataset.ontology is not None:
        overrides["ontology"] = dataset.ontology
    est = fit_dataset(cfg.estimator(**overrides), dataset, classes)
    if write:
        est.save(cfg.checkpoint)
        with open(cfg.metrics or cfg.checkpoint + ".metrics.tsv", "w", encoding="utf-8", newline="\n") as fh:
            fh.write(format_metrics(est.history_))
    return est


def evaluate(model, dataset, iou_threshold: float = 0.5) -> EvalReport:
    """Score every proposal with every is-a predicate and compute per-class AP and mAP.

    ``model`` is a fitted :class:`LTNDetector` or a checkpoint path;
    ``dataset`` a :class:`Dataset` or a dataset path.
    """
    if not isinstance(model, LTNDetector):
        model = LTNDetector.load(model)
    if not isinstance(dataset, Dataset):
        dataset = read_dataset(dataset)
    if dataset.dim != model.n_features_in_:
        raise ValueError(f"dataset embedding dimension {dataset.dim} != model dimension {model.n_features_in_}")
    classes = list(model.classes_)
    scores = {}
    for img in dataset.images:
        if img.proposals:
            scores[img.image_id] = model.predict_proba(np.vstack([p.z for p in img.proposals]))
        else:
            scores[img.image_id] = np.zeros((0, len(classes)))
    return score_report(dataset.images, scores, classes, iou_threshold)
