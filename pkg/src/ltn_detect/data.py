"""Proposal-embedding datasets: the text ingestion format and a synthetic generator.

Dataset file layout::

    @image img0 640 480
    img0<TAB>x1,y1,x2,y2<TAB>label<TAB>z1,z2,...,zd

Every proposal line must follow the ``@image`` header of its image. Floats
are written with ``repr`` so embeddings round-trip bit-exactly.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field

import numpy as np

from .detection import (
    BACKGROUND, BoundingBox, PartOntology, ProposalEmbedding, containment_ratio, iou,
)

__all__ = [
    "Image", "Dataset", "read_dataset", "write_dataset", "parse_dataset", "format_dataset",
    "SyntheticSpec", "generate_synthetic", "parse_keyvalue", "read_class_list",
]


@dataclass
class Image:
    image_id: str
    width: float
    height: float
    proposals: list[ProposalEmbedding] = field(default_factory=list)

    @property
    def size(self) -> tuple[float, float]:
        return (self.width, self.height)


@dataclass
class Dataset:
    images: list[Image] = field(default_factory=list)
    classes: list[str] = field(default_factory=list)
    ontology: PartOntology | None = None

    @property
    def dim(self) -> int:
        for img in self.images:
            if img.proposals:
                return int(img.proposals[0].z.shape[0])
        return 0

    def labels(self) -> list[str]:
        return [p.label for img in self.images for p in img.proposals]

    def infer_classes(self) -> list[str]:
        return sorted({lab for lab in self.labels() if lab != BACKGROUND})

    def arrays(self):
        """Stacked ``(X, labels, image_ids, boxes)`` over every proposal."""
        props = [(img.image_id, p) for img in self.images for p in img.proposals]
        X = np.vstack([p.z for _, p in props])
        y = np.array([p.label for _, p in props], dtype=object)
        groups = np.array([i for i, _ in props], dtype=object)
        boxes = np.array([p.box.as_tuple() for _, p in props], dtype=np.float64)
        return X, y, groups, boxes

    def image_sizes(self) -> dict[str, tuple[float, float]]:
        return {img.image_id: img.size for img in self.images}


def _fmt(v) -> str:
    return repr(float(v))


def format_dataset(ds: Dataset) -> str:
    out = []
    for img in ds.images:
        out.append(f"@image {img.image_id} {_fmt(img.width)} {_fmt(img.height)}\n")
        for p in img.proposals:
            box = ",".join(_fmt(v) for v in p.box.as_tuple())
            z = ",".join(_fmt(v) for v in p.z)
            out.append(f"{img.image_id}\t{box}\t{p.label}\t{z}\n")
    return "".join(out)


def parse_dataset(text: str) -> Dataset:
    images: dict[str, Image] = {}
    dim = None
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.rstrip("\r")
        if not line.strip() or line.startswith("#"):
            continue
        if line.startswith("@image"):
            parts = line.split()
            if len(parts) != 4:
                raise ValueError(f"line {lineno}: expected '@image <id> <W> <H>'")
            _, image_id, w, h = parts
            if image_id in images:
                raise ValueError(f"line {lineno}: duplicate image {image_id!r}")
            images[image_id] = Image(image_id, float(w), float(h))
            continue
        fields = line.split("\t")
        if len(fields) != 4:
            raise ValueError(f"line {lineno}: expected 4 tab-separated fields, got {len(fields)}")
        image_id, box_s, label, z_s = fields
        if image_id not in images:
            raise ValueError(f"line {lineno}: proposal for undeclared image {image_id!r}")
        coords = [float(v) for v in box_s.split(",")]
        if len(coords) != 4:
            raise ValueError(f"line {lineno}: box needs 4 coordinates")
        z = np.array([float(v) for v in z_s.split(",")], dtype=np.float64)
        if dim is None:
            dim = z.shape[0]
        elif z.shape[0] != dim:
            raise ValueError(f"line {lineno}: embedding dimension {z.shape[0]} != {dim}")
        if not np.all(np.isfinite(z)):
            raise ValueError(f"line {lineno}: non-finite embedding value")
        try:
            box = BoundingBox(*coords)
        except ValueError as exc:
            raise ValueError(f"line {lineno}: {exc}") from None
        images[image_id].proposals.append(ProposalEmbedding(box, z, label.strip()))
    return Dataset(list(images.values()))


def read_dataset(path) -> Dataset:
    with open(path, encoding="utf-8") as fh:
        return parse_dataset(fh.read())


def write_dataset(path, ds: Dataset) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(format_dataset(ds))


def read_class_list(path) -> list[str]:
    with open(path, encoding="utf-8") as fh:
        return [ln.split("#", 1)[0].strip() for ln in fh if ln.split("#", 1)[0].strip()]


# ---------------------------------------------------------------------------
# key = value files (shared by experiment configs and synthetic specs)

def parse_keyvalue(text: str, fields: dict[str, type]) -> dict:
    """Parse ``key = value`` lines, converting by ``fields``; unknown keys are errors."""
    out = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"line {lineno}: expected 'key = value'")
        key, value = (s.strip() for s in line.split("=", 1))
        if key not in fields:
            raise ValueError(f"line {lineno}: unknown key {key!r}")
        kind = fields[key]
        try:
            if kind is bool:
                low = value.lower()
                if low not in ("true", "false", "1", "0", "yes", "no"):
                    raise ValueError(value)
                out[key] = low in ("true", "1", "yes")
            elif value.lower() == "none" and kind is not str:
                out[key] = None
            else:
                out[key] = kind(value)
        except ValueError:
            raise ValueError(f"line {lineno}: invalid value {value!r} for {key}") from None
    return out


def _field_types(cls) -> dict[str, type]:
    hints = {"int": int, "float": float, "bool": bool, "str": str}
    types = {}
    for f in dataclasses.fields(cls):
        name = str(f.type).split("|")[0].strip()
        types[f.name] = hints.get(name, str)
    return types


# ---------------------------------------------------------------------------
# synthetic data

@dataclass
class SyntheticSpec:
    """Layout of a synthetic proposal dataset.

    Class embeddings are isotropic Gaussian clusters whose means sit on
    orthogonal axes, ``separation`` cluster-scales apart from one another;
    background embeddings come from a centred Gaussian of scale ``bg_scale``.
    With ``part_layout`` the classes are ``n_wholes`` whole classes with
    ``parts_per_whole`` part classes each, and every whole object carries
    its parts as boxes nested inside it. Cluster centres depend only on
    ``centroid_seed``, so datasets generated with different seeds share one
    feature space (train/test splits).
    """

    n_classes: int = 4
    dim: int = 16
    separation: float = 8.0
    cluster_scale: float = 1.0
    bg_scale: float = 1.0
    n_images: int = 200
    objects_per_image: int = 4
    bg_per_image: int = 12
    image_size: float = 100.0
    part_layout: bool = False
    n_wholes: int = 2
    parts_per_whole: int = 2
    centroid_seed: int = 0

    def __post_init__(self):
        if self.part_layout:
            if self.n_wholes < 1 or self.parts_per_whole < 1:
                raise ValueError("part layout needs at least one whole and one part per whole")
        elif self.n_classes < 2:
            raise ValueError("need at least 2 classes")
        if self.dim < 2:
            raise ValueError("embedding dimension must be at least 2")
        if self.separation <= 0 or self.cluster_scale <= 0 or self.bg_scale <= 0:
            raise ValueError("separation and scales must be positive")
        if self.n_images < 1 or self.objects_per_image < 1 or self.bg_per_image < 0:
            raise ValueError("invalid image/object counts")

    @property
    def classes(self) -> list[str]:
        if not self.part_layout:
            return [f"class{i}" for i in range(self.n_classes)]
        return [f"whole{i}" for i in range(self.n_wholes)] + [
            f"part{i}_{j}" for i in range(self.n_wholes) for j in range(self.parts_per_whole)]

    @property
    def ontology(self) -> PartOntology | None:
        if not self.part_layout:
            return None
        return PartOntology({f"whole{i}": tuple(f"part{i}_{j}" for j in range(self.parts_per_whole))
                             for i in range(self.n_wholes)})

    @classmethod
    def from_text(cls, text: str) -> "SyntheticSpec":
        return cls(**parse_keyvalue(text, _field_types(cls)))

    def to_text(self) -> str:
        return "".join(f"{f.name} = {getattr(self, f.name)}\n" for f in dataclasses.fields(self))


def _class_means(n: int, dim: int, distance: float, rng) -> np.ndarray:
    if n <= dim:
        q, _ = np.linalg.qr(rng.standard_normal((dim, dim)))
        axes = q.T[:n]
    else:
        axes = rng.standard_normal((n, dim))
        axes /= np.linalg.norm(axes, axis=1, keepdims=True)
    # orthonormal axes scaled by d/sqrt(2) are pairwise d apart
    return axes * distance / np.sqrt(2.0)


def _random_box(rng, size: float, lo: float, hi: float) -> BoundingBox:
    w, h = rng.uniform(lo, hi, size=2) * size
    x1 = rng.uniform(0, size - w)
    y1 = rng.uniform(0, size - h)
    return BoundingBox(float(x1), float(y1), float(x1 + w), float(y1 + h))


def _place(rng, size, lo, hi, avoid, max_iou, tries=200) -> BoundingBox:
    box = _random_box(rng, size, lo, hi)
    for _ in range(tries):
        if all(iou(box, other) <= max_iou for other in avoid):
            return box
        box = _random_box(rng, size, lo, hi)
    return box


def _nested_box(rng, whole: BoundingBox, lo=0.25, hi=0.45) -> BoundingBox:
    ww, wh = whole.x2 - whole.x1, whole.y2 - whole.y1
    w, h = rng.uniform(lo, hi) * ww, rng.uniform(lo, hi) * wh
    x1 = whole.x1 + rng.uniform(0, ww - w)
    y1 = whole.y1 + rng.uniform(0, wh - h)
    return BoundingBox(float(x1), float(y1), float(x1 + w), float(y1 + h))


def generate_synthetic(spec: SyntheticSpec, seed: int) -> Dataset:
    """Deterministic synthetic dataset for ``(spec, seed)``."""
    rng = np.random.default_rng(seed)
    classes = spec.classes
    means = _class_means(len(classes), spec.dim, spec.separation * spec.cluster_scale,
                         np.random.default_rng(spec.centroid_seed))
    ontology = spec.ontology
    wholes = ontology.wholes if ontology else classes
    size = spec.image_size

    def embed(label):
        if label == BACKGROUND:
            return rng.standard_normal(spec.dim) * spec.bg_scale
        return means[classes.index(label)] + rng.standard_normal(spec.dim) * spec.cluster_scale

    images = []
    for n in range(spec.n_images):
        objects: list[tuple[BoundingBox, str]] = []
        placed: list[BoundingBox] = []
        for _ in range(spec.objects_per_image):
            label = wholes[int(rng.integers(len(wholes)))]
            if ontology:
                box = _place(rng, size, 0.3, 0.5, placed, 0.0)
            else:
                box = _place(rng, size, 0.15, 0.4, placed, 0.3)
            placed.append(box)
            objects.append((box, label))
            if ontology:
                for part in ontology.parts[label]:
                    pbox = _nested_box(rng, box)
                    assert containment_ratio(pbox, box) >= 0.99
                    objects.append((pbox, part))
        all_boxes = [b for b, _ in objects]
        props = [ProposalEmbedding(b, embed(lab), lab) for b, lab in objects]
        for _ in range(spec.bg_per_image):
            box = _place(rng, size, 0.1, 0.4, all_boxes, 0.3)
            props.append(ProposalEmbedding(box, embed(BACKGROUND), BACKGROUND))
        order = rng.permutation(len(props))
        images.append(Image(f"img{n:05d}", size, size, [props[i] for i in order]))
    return Dataset(images, classes, ontology)
