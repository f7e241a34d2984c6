"""Seeded synthetic benchmarks with planted, place-type-conflicting arrangements.

A plant spec places ``num_motifs`` motif instances in a box: one point per
arrangement category, all inside a disk of the given radius around a uniformly
placed center, so every motif's points lie within pairwise distance 2*radius.
Uniform background points with uniform random categories are added on top.

The default "fig1" benchmark plants arrangements that conflict across two
place-types: proximity of <A,B> marks class 1 in PT1, but marks class 0 in
PT2 where class 1 is the three-way <A,B,C>. No single arrangement separates
the classes globally, while per-place-type arrangements separate them cleanly,
which is exactly the regime where a one-size-fits-all model breaks down.

Also provides the augmentation ops for small corpora: MBR partition at a
fraction, clockwise rotation about the MBR center, and uniform point
subsampling to a fixed size.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np

from placenet.data import Dataset, MultiCategoryPointSet, validate_distance_matrix
from placenet.errors import DataValidationError

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class PlantSpec:
    """Recipe for one (place-type, class) cell of a benchmark.

    ``num_categories`` is the vocabulary width background categories are drawn
    from; it defaults to the arrangement's own categories so a spec is usable
    standalone, but benchmark cells set it to the full vocabulary to keep
    background statistics identical across cells.
    """

    place_type: int
    class_label: int
    arrangement: tuple[int, ...]   # co-located category subset, len >= 2
    radius: float
    num_motifs: int
    background_points: int
    box: tuple[float, float] = (100.0, 100.0)
    num_categories: int | None = None
    decoy_arrangements: tuple[tuple[int, ...], ...] = ()
    decoys_per_arrangement: int = 0
    mix_weight: float = 1.0  # share within this (place-type, class) cell group

    def __post_init__(self) -> None:
        object.__setattr__(self, "arrangement", tuple(self.arrangement))
        object.__setattr__(
            self, "decoy_arrangements",
            tuple(tuple(d) for d in self.decoy_arrangements),
        )
        object.__setattr__(self, "box", (float(self.box[0]), float(self.box[1])))
        if len(self.arrangement) < 2:
            raise DataValidationError("arrangement must have at least 2 categories")
        if self.num_categories is None:
            object.__setattr__(self, "num_categories", max(self.arrangement) + 1)
        if any(not 0 <= c < self.num_categories for c in self.arrangement):
            raise DataValidationError("arrangement category out of vocabulary range")
        for decoy in self.decoy_arrangements:
            if len(decoy) < 2:
                raise DataValidationError("decoy arrangement must have at least 2 categories")
            if any(not 0 <= c < self.num_categories for c in decoy):
                raise DataValidationError("decoy category out of vocabulary range")
        if not 0 < self.radius < min(self.box) / 4:
            raise DataValidationError(
                f"radius {self.radius} must be in (0, min(box)/4)"
            )
        if min(self.num_motifs, self.background_points, self.decoys_per_arrangement) < 0:
            raise DataValidationError("motif/background counts must be >= 0")
        if not self.mix_weight > 0:
            raise DataValidationError("mix_weight must be > 0")
        total = (
            self.num_motifs * len(self.arrangement)
            + self.decoys_per_arrangement * sum(len(d) for d in self.decoy_arrangements)
            + self.background_points
        )
        if total < 2:
            raise DataValidationError("spec would generate fewer than 2 points")


@dataclass(frozen=True)
class BenchmarkSpec:
    """A full benchmark: vocabularies, one PlantSpec per (place-type, class) cell."""

    category_names: tuple[str, ...]
    place_type_names: tuple[str, ...]
    cells: tuple[PlantSpec, ...]
    distance_entries: tuple[tuple[float, ...], ...]
    threshold: float

    def __post_init__(self) -> None:
        object.__setattr__(self, "category_names", tuple(self.category_names))
        object.__setattr__(self, "place_type_names", tuple(self.place_type_names))
        object.__setattr__(self, "cells", tuple(self.cells))
        object.__setattr__(
            self, "distance_entries", tuple(tuple(r) for r in self.distance_entries)
        )
        seen = set()
        labels = set()
        for cell in self.cells:
            if not 0 <= cell.place_type < len(self.place_type_names):
                raise DataValidationError(
                    f"cell place-type {cell.place_type} out of range"
                )
            if any(c >= len(self.category_names) for c in cell.arrangement):
                raise DataValidationError("cell arrangement category out of range")
            if cell.num_categories != len(self.category_names):
                raise DataValidationError(
                    "cell vocabulary width does not match benchmark categories"
                )
            # several cells may share a (place-type, class) slot: they are
            # mixture variants weighted by mix_weight
            seen.add((cell.place_type, cell.class_label))
            labels.add(cell.class_label)
        for pt in range(len(self.place_type_names)):
            for label in labels:
                if (pt, label) not in seen:
                    raise DataValidationError(
                        f"missing cell for place-type {pt}, class {label}"
                    )


def generate_sample(
    spec: PlantSpec, seed, sample_id: str | None = None
) -> MultiCategoryPointSet:
    """Generate one sample from a plant spec; identical seeds give identical samples."""
    rng = np.random.default_rng(seed)
    w, h = spec.box
    cats: list[int] = []
    pts: list[tuple[float, float]] = []
    motif_plan = [spec.arrangement] * spec.num_motifs
    for decoy in spec.decoy_arrangements:
        motif_plan.extend([decoy] * spec.decoys_per_arrangement)
    for arrangement in motif_plan:
        cx = rng.uniform(spec.radius, w - spec.radius)
        cy = rng.uniform(spec.radius, h - spec.radius)
        for cat in arrangement:
            r = spec.radius * np.sqrt(rng.uniform())
            theta = rng.uniform(0.0, 2.0 * np.pi)
            cats.append(cat)
            pts.append((cx + r * np.cos(theta), cy + r * np.sin(theta)))
    for _ in range(spec.background_points):
        cats.append(int(rng.integers(0, spec.num_categories)))
        pts.append((rng.uniform(0.0, w), rng.uniform(0.0, h)))
    if sample_id is None:
        sample_id = f"sample_pt{spec.place_type}_c{spec.class_label}"
    return MultiCategoryPointSet(
        sample_id,
        spec.place_type,
        spec.class_label,
        np.array(cats, dtype=np.int64),
        np.array(pts, dtype=np.float64),
    )


def fig1_benchmark(
    radius: float = 0.4,
    num_motifs: int = 12,
    num_decoys: int = 4,
    total_points: int = 60,
    confuser_share: float = 0.5,
    box: tuple[float, float] = (140.0, 140.0),
) -> BenchmarkSpec:
    """The default two-place-type benchmark with conflicting arrangements.

    PT1: class 1 plants <A,B> pairs; class 0 is a mixture of plain background
    samples and <A,B,C>-planted samples (the confuser share). PT2: class 1
    plants <A,B,C> triples, class 0 plants <A,B> pairs.

    So proximity of <A,B> marks class 1 in PT1 but class 0 in PT2, and the
    <A,B,C> triple that means class 1 in PT2 also appears under class 0 in
    PT1: no single arrangement separates the classes globally, while
    per-place-type rules are exact ("an A-B pair with no C beside it" is
    perfect inside PT1 and useless elsewhere). Nuisance controls keep shortcut
    features out: every cell carries the same total point count (background
    fills up to ``total_points``) and plants the same <A,C> and <B,C> decoy
    pairs, so density, motif presence, and single category-pair proximities
    carry no global class signal.
    """
    A, B, C = 0, 1, 2

    decoys = ((A, C), (B, C))

    def cell(pt, label, arrangement, motifs, weight=1.0):
        background = (
            total_points - motifs * len(arrangement)
            - num_decoys * sum(len(d) for d in decoys)
        )
        if background < 0:
            raise DataValidationError("total_points too small for the motif budget")
        return PlantSpec(
            pt, label, arrangement, radius, motifs, background, box,
            num_categories=3, decoy_arrangements=decoys,
            decoys_per_arrangement=num_decoys, mix_weight=weight,
        )

    if not 0.0 <= confuser_share < 1.0:
        raise DataValidationError("confuser_share must be in [0, 1)")
    pt1_class0 = [cell(0, 0, (A, B), 0, weight=1.0 - confuser_share)]
    if confuser_share > 0:
        pt1_class0.append(cell(0, 0, (A, B, C), num_motifs, weight=confuser_share))

    return BenchmarkSpec(
        category_names=("A", "B", "C"),
        place_type_names=("PT1", "PT2"),
        cells=(
            cell(0, 1, (A, B), num_motifs),
            *pt1_class0,
            cell(1, 1, (A, B, C), num_motifs),
            cell(1, 0, (A, B), num_motifs),
        ),
        distance_entries=((1.0, 2.0), (2.0, 1.0)),
        threshold=2.0,
    )


def _mixture_counts(weights: list[float], total: int) -> list[int]:
    # largest-remainder apportionment; remainder ties to the earlier variant
    scale = sum(weights)
    quotas = [total * w / scale for w in weights]
    base = [int(math.floor(q)) for q in quotas]
    order = sorted(range(len(weights)), key=lambda i: (-(quotas[i] - base[i]), i))
    for i in order[: total - sum(base)]:
        base[i] += 1
    return base


def generate_benchmark(bench: BenchmarkSpec, samples_per_cell: int, seed: int) -> Dataset:
    """Instantiate a benchmark spec into a Dataset; fully determined by the seed.

    ``samples_per_cell`` is the sample count per (place-type, class) slot; a
    slot with several mixture variants splits it by their mix_weight.
    """
    if samples_per_cell < 1:
        raise DataValidationError("samples_per_cell must be >= 1")

    groups: dict[tuple[int, int], list[PlantSpec]] = {}
    for cell in bench.cells:
        groups.setdefault((cell.place_type, cell.class_label), []).append(cell)

    plan: list[PlantSpec] = []
    for (pt, label), variants in groups.items():
        counts = _mixture_counts([v.mix_weight for v in variants], samples_per_cell)
        for variant, count in zip(variants, counts):
            plan.extend([variant] * count)

    children = np.random.SeedSequence(seed).spawn(len(plan))
    samples = []
    slot_index: dict[tuple[int, int], int] = {}
    for cell, child in zip(plan, children):
        key = (cell.place_type, cell.class_label)
        i = slot_index.get(key, 0)
        slot_index[key] = i + 1
        pt_name = bench.place_type_names[cell.place_type]
        sid = f"{pt_name}-c{cell.class_label}-{i:03d}"
        samples.append(generate_sample(cell, child, sid))
    matrix = validate_distance_matrix(
        np.array(bench.distance_entries, dtype=np.float64), bench.threshold
    )
    return Dataset(bench.category_names, bench.place_type_names, tuple(samples), matrix)


def partition_mbr(
    sample: MultiCategoryPointSet, fraction: float
) -> tuple[MultiCategoryPointSet | None, MultiCategoryPointSet | None]:
    """Split at the vertical line x = min_x + fraction * MBR width.

    Points with x < cut go left, x >= cut go right; each half is re-normalized
    to its own origin. A half with fewer than 2 points is unusable and comes
    back as None (with a warning) rather than an invalid sample.
    """
    if not 0.0 < fraction < 1.0:
        raise ValueError(f"fraction must be in (0, 1), got {fraction}")
    xs = sample.locations[:, 0]
    cut = xs.min() + fraction * (xs.max() - xs.min())
    left_mask = xs < cut

    halves = []
    for tag, mask in (("left", left_mask), ("right", ~left_mask)):
        if mask.sum() < 2:
            logger.warning(
                "partition of %r at %.3g: %s side has %d point(s), dropped",
                sample.sample_id, fraction, tag, int(mask.sum()),
            )
            halves.append(None)
            continue
        halves.append(
            MultiCategoryPointSet(
                f"{sample.sample_id}_{tag}",
                sample.place_type,
                sample.label,
                sample.categories[mask],
                sample.locations[mask],
            )
        )
    return halves[0], halves[1]


def rotate_sample(sample: MultiCategoryPointSet, degrees_clockwise: float) -> MultiCategoryPointSet:
    """Rotate all locations clockwise about the MBR center, then re-normalize."""
    theta = np.deg2rad(degrees_clockwise)
    rot = np.array(
        [[np.cos(theta), np.sin(theta)], [-np.sin(theta), np.cos(theta)]]
    )
    center = (sample.locations.min(axis=0) + sample.locations.max(axis=0)) / 2.0
    rotated = (sample.locations - center) @ rot.T + center
    return MultiCategoryPointSet(
        sample.sample_id, sample.place_type, sample.label, sample.categories, rotated
    )


def sample_points(sample: MultiCategoryPointSet, n: int, seed) -> MultiCategoryPointSet:
    """Uniformly sample n points: without replacement when possible, with otherwise."""
    if n < 2:
        raise ValueError(f"n must be >= 2, got {n}")
    rng = np.random.default_rng(seed)
    replace = sample.num_points < n
    idx = rng.choice(sample.num_points, size=n, replace=replace)
    return MultiCategoryPointSet(
        sample.sample_id,
        sample.place_type,
        sample.label,
        sample.categories[idx],
        sample.locations[idx],
    )


def augmentation_pipeline(
    sample: MultiCategoryPointSet,
    seed,
    n_points: int = 1024,
    fractions: tuple[float, ...] = (0.2, 0.8),
    angles: tuple[float, ...] = (16.0, 32.0, 48.0),
) -> list[MultiCategoryPointSet]:
    """Training-time augmentation: MBR partitions, rotated copies, fixed-size sampling.

    Each partition fraction yields two subsets; each subset contributes itself
    plus one copy per cumulative clockwise angle; every resulting set is
    uniformly sampled down (or up) to n_points. Applied to training data only.
    """
    subsets: list[MultiCategoryPointSet] = []
    for frac in fractions:
        left, right = partition_mbr(sample, frac)
        subsets.extend(s for s in (left, right) if s is not None)
    ss = np.random.SeedSequence(seed)
    out = []
    copies: list[MultiCategoryPointSet] = []
    for subset in subsets:
        copies.append(subset)
        copies.extend(rotate_sample(subset, angle) for angle in angles)
    for child, copy in zip(ss.spawn(len(copies)), copies):
        out.append(sample_points(copy, n_points, child))
    return out
