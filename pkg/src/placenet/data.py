"""Core data model: point sets, place-types, labels, and the expert distance matrix.

A sample is a multi-category point set: 2-D points, each carrying a categorical
attribute, tagged with a place-type and a class label. Coordinates are abstract
length units relative to the sample's lower-left corner. Samples are immutable
and canonicalized at construction: coordinates are shifted so the bounding
rectangle's min corner is the origin, and points are sorted by (x, y, category).
The canonical order makes every downstream computation independent of the order
points were supplied in, so set semantics hold bit-exactly.

File format (one dataset directory):

* ``manifest.txt``: header lines ``categories: <comma list>``,
  ``place_types: <comma list>``, ``distance_matrix: <path>``,
  ``threshold: <real>``, then one line per sample
  ``<sample_id>,<place_type_name>,<class_label>,<relative file path>``.
* one CSV per sample with header ``category,x,y``;
* a distance matrix file: size on line 1, then rows of reals.
"""

from __future__ import annotations

import csv
import math
import os
from dataclasses import dataclass, field

import numpy as np

from placenet.errors import DataValidationError

CategoryId = int
PlaceTypeId = int
ClassId = int

MANIFEST_NAME = "manifest.txt"


@dataclass(frozen=True)
class SpatialPoint:
    """One point: a category index plus a 2-D location."""

    category: CategoryId
    x: float
    y: float


@dataclass(frozen=True, eq=False)
class MultiCategoryPointSet:
    """One labeled sample: categories and locations in canonical order.

    ``categories`` is an int array of shape (n,), ``locations`` a float64
    array of shape (n, 2). Construction normalizes the min corner of the
    bounding rectangle to (0, 0) and sorts points lexicographically by
    (x, y, category); both operations are idempotent.
    """

    sample_id: str
    place_type: PlaceTypeId
    label: ClassId
    categories: np.ndarray
    locations: np.ndarray

    def __post_init__(self) -> None:
        cats = np.ascontiguousarray(np.asarray(self.categories, dtype=np.int64))
        locs = np.ascontiguousarray(np.asarray(self.locations, dtype=np.float64))
        if locs.ndim != 2 or locs.shape[1] != 2 or cats.shape != (locs.shape[0],):
            raise DataValidationError(
                f"sample {self.sample_id!r}: categories {cats.shape} and "
                f"locations {locs.shape} are inconsistent"
            )
        if locs.shape[0] < 2:
            raise DataValidationError(
                f"sample {self.sample_id!r}: needs at least 2 points, got {locs.shape[0]}"
            )
        if not np.all(np.isfinite(locs)):
            raise DataValidationError(
                f"sample {self.sample_id!r}: non-finite coordinate"
            )
        if np.any(cats < 0):
            raise DataValidationError(
                f"sample {self.sample_id!r}: negative category index"
            )
        locs = locs - locs.min(axis=0)
        order = np.lexsort((cats, locs[:, 1], locs[:, 0]))
        cats = cats[order]
        locs = locs[order]
        cats.setflags(write=False)
        locs.setflags(write=False)
        object.__setattr__(self, "categories", cats)
        object.__setattr__(self, "locations", locs)

    @classmethod
    def from_points(
        cls,
        sample_id: str,
        place_type: PlaceTypeId,
        label: ClassId,
        points: list[SpatialPoint],
    ) -> "MultiCategoryPointSet":
        cats = np.array([p.category for p in points], dtype=np.int64)
        locs = np.array([[p.x, p.y] for p in points], dtype=np.float64)
        return cls(sample_id, place_type, label, cats, locs)

    @property
    def num_points(self) -> int:
        return self.categories.shape[0]

    @property
    def points(self) -> list[SpatialPoint]:
        return [
            SpatialPoint(int(c), float(x), float(y))
            for c, (x, y) in zip(self.categories, self.locations)
        ]

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, MultiCategoryPointSet):
            return NotImplemented
        return (
            self.sample_id == other.sample_id
            and self.place_type == other.place_type
            and self.label == other.label
            and np.array_equal(self.categories, other.categories)
            and np.array_equal(self.locations, other.locations)
        )


@dataclass(frozen=True, eq=False)
class PlaceTypeDistanceMatrix:
    """Expert-supplied relative distances between place-types.

    Symmetric, diagonal fixed at 1 (a model's own place-type gets the base
    learning rate), all entries >= 1. ``threshold`` is the selection radius:
    samples whose place-type is farther than it from a target model are not
    used to train that model.
    """

    entries: np.ndarray
    threshold: float

    def __post_init__(self) -> None:
        entries = np.ascontiguousarray(np.asarray(self.entries, dtype=np.float64))
        if entries.ndim != 2 or entries.shape[0] != entries.shape[1]:
            raise DataValidationError(
                f"distance matrix must be square, got shape {entries.shape}"
            )
        if not np.all(np.isfinite(entries)):
            raise DataValidationError("distance matrix has non-finite entries")
        if not np.array_equal(entries, entries.T):
            raise DataValidationError("distance matrix is not symmetric")
        if not np.all(np.diagonal(entries) == 1.0):
            raise DataValidationError("distance matrix diagonal must equal 1")
        if np.any(entries < 1.0):
            raise DataValidationError("distance matrix entries must be >= 1")
        if not (isinstance(self.threshold, (int, float)) and self.threshold > 0):
            raise DataValidationError(f"threshold must be > 0, got {self.threshold!r}")
        entries.setflags(write=False)
        object.__setattr__(self, "entries", entries)
        object.__setattr__(self, "threshold", float(self.threshold))

    @property
    def num_place_types(self) -> int:
        return self.entries.shape[0]

    def distance(self, a: PlaceTypeId, b: PlaceTypeId) -> float:
        return float(self.entries[a, b])

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, PlaceTypeDistanceMatrix):
            return NotImplemented
        return (
            self.threshold == other.threshold
            and np.array_equal(self.entries, other.entries)
        )


def validate_distance_matrix(entries, threshold: float) -> PlaceTypeDistanceMatrix:
    """Validate and wrap a raw matrix; raises DataValidationError on any violation."""
    return PlaceTypeDistanceMatrix(np.asarray(entries, dtype=np.float64), threshold)


@dataclass(frozen=True)
class Dataset:
    """A full labeled corpus plus its vocabularies and place-type distances."""

    category_names: tuple[str, ...]
    place_type_names: tuple[str, ...]
    samples: tuple[MultiCategoryPointSet, ...]
    distance_matrix: PlaceTypeDistanceMatrix

    def __post_init__(self) -> None:
        object.__setattr__(self, "category_names", tuple(self.category_names))
        object.__setattr__(self, "place_type_names", tuple(self.place_type_names))
        object.__setattr__(self, "samples", tuple(self.samples))
        for name in (*self.category_names, *self.place_type_names):
            if "," in name or not name:
                raise DataValidationError(f"vocabulary name {name!r} is invalid")
        if self.distance_matrix.num_place_types != len(self.place_type_names):
            raise DataValidationError(
                "distance matrix size does not match place-type vocabulary"
            )
        labels = set()
        seen_ids = set()
        for s in self.samples:
            if s.sample_id in seen_ids:
                raise DataValidationError(f"duplicate sample id {s.sample_id!r}")
            seen_ids.add(s.sample_id)
            if not 0 <= s.place_type < len(self.place_type_names):
                raise DataValidationError(
                    f"sample {s.sample_id!r}: place-type {s.place_type} out of range"
                )
            if s.categories.size and int(s.categories.max()) >= len(self.category_names):
                raise DataValidationError(
                    f"sample {s.sample_id!r}: category index out of range"
                )
            if s.label < 0:
                raise DataValidationError(
                    f"sample {s.sample_id!r}: negative class label"
                )
            labels.add(int(s.label))
        if self.samples:
            missing = set(range(max(labels) + 1)) - labels
            if missing:
                raise DataValidationError(
                    f"class labels {sorted(missing)} have no samples"
                )

    @property
    def num_categories(self) -> int:
        return len(self.category_names)

    @property
    def num_place_types(self) -> int:
        return len(self.place_type_names)

    @property
    def num_classes(self) -> int:
        return max(int(s.label) for s in self.samples) + 1 if self.samples else 0


def _parse_real(token: str, what: str) -> float:
    try:
        value = float(token)
    except ValueError as exc:
        raise DataValidationError(f"{what}: cannot parse {token!r} as a real") from exc
    if not math.isfinite(value):
        raise DataValidationError(f"{what}: non-finite value {token!r}")
    return value


def _load_distance_file(path: str) -> np.ndarray:
    try:
        with open(path, "r", encoding="utf-8") as fh:
            lines = [ln.strip() for ln in fh if ln.strip()]
    except OSError as exc:
        raise DataValidationError(f"cannot read distance matrix {path!r}: {exc}") from exc
    if not lines:
        raise DataValidationError(f"distance matrix {path!r} is empty")
    try:
        size = int(lines[0])
    except ValueError as exc:
        raise DataValidationError(
            f"distance matrix {path!r}: first line must be the size"
        ) from exc
    if len(lines) != size + 1:
        raise DataValidationError(
            f"distance matrix {path!r}: expected {size} rows, got {len(lines) - 1}"
        )
    rows = []
    for ln in lines[1:]:
        row = [_parse_real(tok, f"distance matrix {path!r}") for tok in ln.split()]
        if len(row) != size:
            raise DataValidationError(
                f"distance matrix {path!r}: row has {len(row)} entries, expected {size}"
            )
        rows.append(row)
    return np.array(rows, dtype=np.float64)


def _load_sample_file(
    path: str, sample_id: str, category_index: dict[str, int]
) -> tuple[np.ndarray, np.ndarray]:
    try:
        with open(path, "r", encoding="utf-8", newline="") as fh:
            reader = csv.reader(fh)
            rows = list(reader)
    except OSError as exc:
        raise DataValidationError(
            f"sample {sample_id!r}: cannot read {path!r}: {exc}"
        ) from exc
    if not rows or [c.strip() for c in rows[0]] != ["category", "x", "y"]:
        raise DataValidationError(
            f"sample {sample_id!r}: {path!r} must start with header 'category,x,y'"
        )
    cats, locs = [], []
    for row in rows[1:]:
        if not row:
            continue
        if len(row) != 3:
            raise DataValidationError(
                f"sample {sample_id!r}: malformed row {row!r} in {path!r}"
            )
        name = row[0].strip()
        if name not in category_index:
            raise DataValidationError(
                f"sample {sample_id!r}: unknown category {name!r}"
            )
        cats.append(category_index[name])
        locs.append(
            (
                _parse_real(row[1], f"sample {sample_id!r}"),
                _parse_real(row[2], f"sample {sample_id!r}"),
            )
        )
    return np.array(cats, dtype=np.int64), np.array(locs, dtype=np.float64)


def load_dataset(manifest_path: str) -> Dataset:
    """Load and validate a dataset directory from its manifest file.

    Coordinates are normalized so each sample's bounding-rectangle min corner
    is (0, 0). Every validation failure names the offending sample.
    """
    try:
        with open(manifest_path, "r", encoding="utf-8") as fh:
            lines = [ln.rstrip("\n") for ln in fh]
    except OSError as exc:
        raise DataValidationError(f"cannot read manifest {manifest_path!r}: {exc}") from exc

    base = os.path.dirname(os.path.abspath(manifest_path))
    headers: dict[str, str] = {}
    sample_lines: list[str] = []
    for ln in lines:
        if not ln.strip():
            continue
        key, sep, value = ln.partition(":")
        if sep and key.strip() in ("categories", "place_types", "distance_matrix", "threshold"):
            headers[key.strip()] = value.strip()
        else:
            sample_lines.append(ln.strip())
    missing = {"categories", "place_types", "distance_matrix", "threshold"} - set(headers)
    if missing:
        raise DataValidationError(
            f"manifest {manifest_path!r}: missing header(s) {sorted(missing)}"
        )

    category_names = [c.strip() for c in headers["categories"].split(",")]
    place_type_names = [p.strip() for p in headers["place_types"].split(",")]
    category_index = {name: i for i, name in enumerate(category_names)}
    place_type_index = {name: i for i, name in enumerate(place_type_names)}
    threshold = _parse_real(headers["threshold"], "manifest threshold")
    entries = _load_distance_file(os.path.join(base, headers["distance_matrix"]))
    matrix = validate_distance_matrix(entries, threshold)

    samples = []
    for ln in sample_lines:
        parts = [p.strip() for p in ln.split(",")]
        if len(parts) != 4:
            raise DataValidationError(f"manifest sample line malformed: {ln!r}")
        sample_id, pt_name, label_str, rel_path = parts
        if pt_name not in place_type_index:
            raise DataValidationError(
                f"sample {sample_id!r}: unknown place-type {pt_name!r}"
            )
        try:
            label = int(label_str)
        except ValueError as exc:
            raise DataValidationError(
                f"sample {sample_id!r}: bad class label {label_str!r}"
            ) from exc
        cats, locs = _load_sample_file(os.path.join(base, rel_path), sample_id, category_index)
        samples.append(
            MultiCategoryPointSet(sample_id, place_type_index[pt_name], label, cats, locs)
        )
    return Dataset(tuple(category_names), tuple(place_type_names), tuple(samples), matrix)


def save_dataset(dataset: Dataset, out_dir: str) -> str:
    """Write a dataset directory in the manifest format; returns the manifest path.

    Floats are written with repr so a reload reproduces them to full precision.
    """
    os.makedirs(out_dir, exist_ok=True)
    samples_dir = os.path.join(out_dir, "samples")
    os.makedirs(samples_dir, exist_ok=True)

    matrix_name = "distance_matrix.txt"
    m = dataset.distance_matrix
    with open(os.path.join(out_dir, matrix_name), "w", encoding="utf-8") as fh:
        fh.write(f"{m.num_place_types}\n")
        for row in m.entries:
            fh.write(" ".join(repr(float(v)) for v in row) + "\n")

    manifest_path = os.path.join(out_dir, MANIFEST_NAME)
    with open(manifest_path, "w", encoding="utf-8") as fh:
        fh.write(f"categories: {','.join(dataset.category_names)}\n")
        fh.write(f"place_types: {','.join(dataset.place_type_names)}\n")
        fh.write(f"distance_matrix: {matrix_name}\n")
        fh.write(f"threshold: {repr(m.threshold)}\n")
        for s in dataset.samples:
            rel = os.path.join("samples", f"{s.sample_id}.csv")
            fh.write(
                f"{s.sample_id},{dataset.place_type_names[s.place_type]},{s.label},{rel}\n"
            )
            with open(os.path.join(out_dir, rel), "w", encoding="utf-8", newline="") as sf:
                writer = csv.writer(sf, lineterminator="\n")
                writer.writerow(["category", "x", "y"])
                for c, (x, y) in zip(s.categories, s.locations):
                    writer.writerow(
                        [dataset.category_names[int(c)], repr(float(x)), repr(float(y))]
                    )
    return manifest_path
