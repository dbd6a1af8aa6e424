"""Annotation data model, file codecs, splits and dataset statistics."""

from __future__ import annotations

import json
import math
import warnings
import xml.etree.ElementTree as ET
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .geometry import Box

DEFAULT_CATEGORIES = ("crack", "pop-out", "spalling", "exposed rebar")

# Joint (relative area, aspect ratio) histogram grid.
SCALE_RANGE = (1e-4, 1.0)
ASPECT_RANGE = (1 / 16, 16.0)
N_BINS = 16


class DatasetError(ValueError):
    """Malformed annotation input; carries the offending file and line."""

    def __init__(self, message: str, path: str | Path | None = None, line: int | None = None):
        self.path = str(path) if path is not None else None
        self.line = line
        where = ""
        if self.path is not None:
            where = self.path if line is None else f"{self.path}:{line}"
            where += ": "
        super().__init__(where + message)

    def to_dict(self) -> dict:
        return {"error": str(self), "file": self.path, "line": self.line}


@dataclass(frozen=True)
class ObjectLabel:
    category: int
    box: Box


@dataclass
class ImageRecord:
    image: str
    width: int
    height: int
    labels: list[ObjectLabel] = field(default_factory=list)
    raster: np.ndarray | None = field(default=None, repr=False, compare=False)

    @property
    def boxes(self) -> np.ndarray:
        return np.array([lb.box for lb in self.labels], dtype=np.float64).reshape(-1, 4)

    @property
    def categories(self) -> np.ndarray:
        return np.array([lb.category for lb in self.labels], dtype=np.int64)

    def dominant_category(self) -> int:
        """Most frequent label category; ties go to the lower id, -1 if unlabeled."""
        if not self.labels:
            return -1
        counts = np.bincount(self.categories)
        return int(np.argmax(counts))


@dataclass
class Dataset:
    records: list[ImageRecord]
    categories: tuple[str, ...] = DEFAULT_CATEGORIES
    root: Path | None = field(default=None, compare=False)

    def __post_init__(self):
        self.categories = tuple(self.categories)
        n = len(self.categories)
        for rec in self.records:
            for lb in rec.labels:
                if not 0 <= lb.category < n:
                    raise DatasetError(
                        f"category id {lb.category} out of range for {n} categories",
                        rec.image,
                    )

    def __len__(self) -> int:
        return len(self.records)

    @property
    def num_labels(self) -> int:
        return sum(len(r.labels) for r in self.records)

    def subset(self, indices: Iterable[int]) -> "Dataset":
        return Dataset([self.records[i] for i in indices], self.categories, self.root)

    def category_id(self, name: str) -> int:
        try:
            return self.categories.index(name)
        except ValueError:
            raise DatasetError(
                f"unknown category {name!r}; known categories: {list(self.categories)}"
            ) from None

    def load_raster(self, index: int) -> np.ndarray:
        """RGB uint8 raster of record ``index``, read from disk when not inline."""
        rec = self.records[index]
        if rec.raster is not None:
            return rec.raster
        import cv2

        path = Path(rec.image)
        if not path.is_absolute() and self.root is not None:
            path = self.root / path
        bgr = cv2.imread(str(path), cv2.IMREAD_COLOR)
        if bgr is None:
            raise DatasetError("cannot read image", path)
        return np.ascontiguousarray(bgr[:, :, ::-1])


def _clamped_box(box: Box, width: int, height: int, where: str) -> Box:
    clipped = box.clip(width, height)
    if clipped != box:
        warnings.warn(f"{where}: box {tuple(box)} clamped to image {width}x{height}", stacklevel=3)
    return clipped


# ---------------------------------------------------------------------------
# JSONL codec


def record_to_json(rec: ImageRecord, categories: Sequence[str]) -> dict:
    return {
        "image": rec.image,
        "width": rec.width,
        "height": rec.height,
        "objects": [
            {"category": categories[lb.category], "bbox": [float(v) for v in lb.box]}
            for lb in rec.labels
        ],
    }


def save_jsonl(dataset: Dataset, path: str | Path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for rec in dataset.records:
            fh.write(json.dumps(record_to_json(rec, dataset.categories)) + "\n")


def load_jsonl(
    path: str | Path, categories: Sequence[str] = DEFAULT_CATEGORIES
) -> Dataset:
    path = Path(path)
    categories = tuple(categories)
    records = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise DatasetError(f"invalid JSON ({exc.msg})", path, lineno) from None
            records.append(_record_from_json(obj, categories, path, lineno))
    return Dataset(records, categories, root=path.parent)


def _record_from_json(obj, categories, path, lineno) -> ImageRecord:
    try:
        image = str(obj["image"])
        width, height = int(obj["width"]), int(obj["height"])
        objects = obj.get("objects", [])
    except (KeyError, TypeError, ValueError) as exc:
        raise DatasetError(f"malformed record ({exc})", path, lineno) from None
    if width <= 0 or height <= 0:
        raise DatasetError(f"non-positive image size {width}x{height}", path, lineno)
    labels = []
    for o in objects:
        name = o.get("category")
        if name not in categories:
            raise DatasetError(
                f"unknown category {name!r}; known categories: {list(categories)}", path, lineno
            )
        bbox = o.get("bbox")
        if not isinstance(bbox, list) or len(bbox) != 4:
            raise DatasetError("bbox must be [xmin, ymin, xmax, ymax]", path, lineno)
        box = Box(*(float(v) for v in bbox))
        if not box.is_valid():
            raise DatasetError(f"inverted box {bbox}", path, lineno)
        box = _clamped_box(box, width, height, f"{path}:{lineno}")
        labels.append(ObjectLabel(categories.index(name), box))
    return ImageRecord(image, width, height, labels)


# ---------------------------------------------------------------------------
# LabelImg VOC-XML


def _xml_text(node: ET.Element, tag: str, path: Path) -> str:
    child = node.find(tag)
    if child is None or child.text is None:
        raise DatasetError(f"missing <{tag}> in <{node.tag}>", path)
    return child.text.strip()


def load_voc_xml(
    path: str | Path, categories: Sequence[str] = DEFAULT_CATEGORIES
) -> ImageRecord:
    """Parse one LabelImg annotation file into an :class:`ImageRecord`."""
    path = Path(path)
    categories = tuple(categories)
    try:
        root = ET.parse(path).getroot()
    except ET.ParseError as exc:
        raise DatasetError(f"XML parse error: {exc.msg}", path, exc.position[0]) from None
    size = root.find("size")
    if size is None:
        raise DatasetError("missing <size> in <annotation>", path)
    try:
        width = int(_xml_text(size, "width", path))
        height = int(_xml_text(size, "height", path))
    except ValueError:
        raise DatasetError("non-integer <size> entries", path) from None
    image = root.findtext("filename") or path.with_suffix(".jpg").name
    labels = []
    for obj in root.iter("object"):
        name = _xml_text(obj, "name", path)
        if name not in categories:
            raise DatasetError(
                f"unknown category {name!r}; known categories: {list(categories)}", path
            )
        bnd = obj.find("bndbox")
        if bnd is None:
            raise DatasetError("missing <bndbox> in <object>", path)
        try:
            box = Box(*(float(_xml_text(bnd, t, path)) for t in ("xmin", "ymin", "xmax", "ymax")))
        except ValueError:
            raise DatasetError("non-numeric <bndbox> entries", path) from None
        if not box.is_valid():
            raise DatasetError(f"inverted box {tuple(box)}", path)
        labels.append(ObjectLabel(categories.index(name), _clamped_box(box, width, height, str(path))))
    return ImageRecord(image.strip(), width, height, labels)


def load_voc_dir(
    directory: str | Path, categories: Sequence[str] = DEFAULT_CATEGORIES
) -> Dataset:
    directory = Path(directory)
    files = sorted(directory.glob("*.xml"))
    return Dataset([load_voc_xml(f, categories) for f in files], categories, root=directory)


def save_voc_xml(rec: ImageRecord, categories: Sequence[str], path: str | Path) -> None:
    ann = ET.Element("annotation")
    ET.SubElement(ann, "filename").text = rec.image
    size = ET.SubElement(ann, "size")
    ET.SubElement(size, "width").text = str(rec.width)
    ET.SubElement(size, "height").text = str(rec.height)
    ET.SubElement(size, "depth").text = "3"
    for lb in rec.labels:
        obj = ET.SubElement(ann, "object")
        ET.SubElement(obj, "name").text = categories[lb.category]
        bnd = ET.SubElement(obj, "bndbox")
        for tag, v in zip(("xmin", "ymin", "xmax", "ymax"), lb.box):
            ET.SubElement(bnd, tag).text = str(int(round(v)))
    ET.ElementTree(ann).write(path, encoding="utf-8")


def load_dataset(path: str | Path, categories: Sequence[str] = DEFAULT_CATEGORIES) -> Dataset:
    """Load a ``.jsonl`` file, a single VOC ``.xml`` file or a directory of them."""
    path = Path(path)
    if path.is_dir():
        return load_voc_dir(path, categories)
    if path.suffix.lower() == ".xml":
        return Dataset([load_voc_xml(path, categories)], categories, root=path.parent)
    return load_jsonl(path, categories)


# ---------------------------------------------------------------------------
# Splits


def holdout_split(dataset: Dataset, ratio: float = 0.8, seed: int = 0) -> tuple[Dataset, Dataset]:
    """Uniform random image-level split into (train, test)."""
    if not 0.0 < ratio < 1.0:
        raise ValueError(f"holdout ratio must be in (0, 1), got {ratio}")
    n = len(dataset)
    perm = np.random.default_rng(seed).permutation(n)
    n_train = int(round(ratio * n))
    return dataset.subset(sorted(perm[:n_train])), dataset.subset(sorted(perm[n_train:]))


def kfold_split(dataset: Dataset, k: int = 5, seed: int = 0) -> list[list[int]]:
    """Folds stratified on each image's dominant category.

    Images of each stratum are shuffled and dealt round-robin, continuing the
    deal across strata so fold sizes differ by at most one.
    """
    if k < 2:
        raise ValueError(f"k must be >= 2, got {k}")
    if len(dataset) < k:
        raise ValueError(f"cannot make {k} folds from {len(dataset)} images")
    rng = np.random.default_rng(seed)
    keys = np.array([r.dominant_category() for r in dataset.records])
    folds: list[list[int]] = [[] for _ in range(k)]
    slot = 0
    for key in np.unique(keys):
        members = np.flatnonzero(keys == key)
        for idx in rng.permutation(members):
            folds[slot % k].append(int(idx))
            slot += 1
    return [sorted(f) for f in folds]


# ---------------------------------------------------------------------------
# Statistics


def histogram_edges() -> tuple[np.ndarray, np.ndarray]:
    scale_edges = np.geomspace(SCALE_RANGE[0], SCALE_RANGE[1], N_BINS + 1)
    aspect_edges = np.geomspace(ASPECT_RANGE[0], ASPECT_RANGE[1], N_BINS + 1)
    return scale_edges, aspect_edges


def _bin_index(values: np.ndarray, lo: float, hi: float) -> np.ndarray:
    v = np.clip(values, lo, hi)
    pos = (np.log(v) - math.log(lo)) / (math.log(hi) - math.log(lo)) * N_BINS
    return np.clip(pos.astype(np.int64), 0, N_BINS - 1)


def scale_aspect_histogram(rel_area: np.ndarray, aspect: np.ndarray) -> np.ndarray:
    """Normalised joint histogram over (log relative area, log aspect)."""
    rel_area = np.asarray(rel_area, dtype=np.float64)
    aspect = np.asarray(aspect, dtype=np.float64)
    tiny = np.finfo(np.float64).tiny
    i = _bin_index(np.maximum(rel_area, tiny), *SCALE_RANGE)
    j = _bin_index(np.maximum(aspect, tiny), *ASPECT_RANGE)
    hist = np.zeros((N_BINS, N_BINS), dtype=np.float64)
    np.add.at(hist, (i, j), 1.0)
    return hist / hist.sum()


QUANTILES = (0.0, 0.25, 0.5, 0.75, 1.0)


@dataclass
class DatasetStats:
    counts: np.ndarray
    fractions: np.ndarray
    area_quantiles: dict[float, float]
    histogram: np.ndarray
    scale_edges: np.ndarray
    aspect_edges: np.ndarray

    @property
    def median_relative_area(self) -> float:
        return self.area_quantiles[0.5]

    def to_json(self, categories: Sequence[str]) -> dict:
        return {
            "counts": {c: int(n) for c, n in zip(categories, self.counts)},
            "fractions": {c: float(f) for c, f in zip(categories, self.fractions)},
            "relative_area_quantiles": {str(q): v for q, v in self.area_quantiles.items()},
            "total_objects": int(self.counts.sum()),
        }


def object_geometry(dataset: Dataset, category: int | None = None):
    """Per-object (category, relative area, aspect ratio) arrays."""
    cats, rel, asp = [], [], []
    for rec in dataset.records:
        img_area = float(rec.width * rec.height)
        for lb in rec.labels:
            if category is not None and lb.category != category:
                continue
            w, h = lb.box.width, lb.box.height
            cats.append(lb.category)
            rel.append(w * h / img_area)
            asp.append(w / h if h > 0 else np.inf)
    return np.array(cats, dtype=np.int64), np.array(rel), np.array(asp)


def compute_stats(dataset: Dataset, category: int | None = None) -> DatasetStats:
    cats, rel, asp = object_geometry(dataset, category)
    if cats.size == 0:
        raise ValueError("dataset has no labels" + ("" if category is None else f" of category {category}"))
    counts = np.bincount(cats, minlength=len(dataset.categories))
    quantiles = {q: float(np.quantile(rel, q)) for q in QUANTILES}
    scale_edges, aspect_edges = histogram_edges()
    return DatasetStats(
        counts=counts,
        fractions=counts / counts.sum(),
        area_quantiles=quantiles,
        histogram=scale_aspect_histogram(rel, asp),
        scale_edges=scale_edges,
        aspect_edges=aspect_edges,
    )


def hellinger(p: np.ndarray, q: np.ndarray) -> float:
    p = np.asarray(p, dtype=np.float64)
    q = np.asarray(q, dtype=np.float64)
    d = math.sqrt(0.5 * float(np.sum((np.sqrt(p) - np.sqrt(q)) ** 2)))
    return min(d, 1.0)


def rank_source_classes(
    source: dict[int, DatasetStats] | Dataset, target: DatasetStats | Dataset
) -> list[tuple[int, float]]:
    """Order source categories by Hellinger distance of their (scale, aspect)
    histogram to the target's, closest first; ties go to the lower id."""
    if isinstance(target, Dataset):
        target = compute_stats(target)
    if isinstance(source, Dataset):
        present = np.flatnonzero(compute_stats(source).counts)
        source = {int(c): compute_stats(source, int(c)) for c in present}
    ranked = []
    for cat, stats in source.items():
        if not (
            np.array_equal(stats.scale_edges, target.scale_edges)
            and np.array_equal(stats.aspect_edges, target.aspect_edges)
        ):
            raise ValueError(f"histogram bin grid of source category {cat} differs from target")
        ranked.append((int(cat), hellinger(stats.histogram, target.histogram)))
    return sorted(ranked, key=lambda t: (t[1], t[0]))


def with_records(dataset: Dataset, records: list[ImageRecord]) -> Dataset:
    return replace(dataset, records=records)
