"""Permutation importance over spatial-relationship feature blocks.

The explanation surface is a fixed table of (center category, neighbor
multiset) blocks: for each block, pool (mean) the layer embeddings of nodes
whose category is the center and whose graph-neighbor categories include the
multiset. Concatenating blocks in fixed key order gives one feature vector per
sample; a multinomial logistic probe is fit on the training split, and each
block's importance is the probe's mean accuracy drop on the evaluation split
when that block's values are shuffled across samples.

Blocks that never vary shuffle to themselves, so their importance is exactly 0.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass

import numpy as np
from sklearn.linear_model import LogisticRegression

from placenet.data import MultiCategoryPointSet
from placenet.errors import DataValidationError
from placenet.graph import KnnGraph
from placenet.network import ModelParams, model_forward
from placenet.training import GraphCache, TrainedEnsemble, _route_member

DEFAULT_MAX_SUBSET = 3


@dataclass(frozen=True)
class RelationshipFeature:
    """One feature block: a center category with a neighbor-category multiset."""

    center_category: int
    neighbor_categories: tuple[int, ...]  # sorted ascending
    start: int
    stop: int

    @property
    def key(self) -> tuple:
        return (self.center_category, len(self.neighbor_categories), self.neighbor_categories)


@dataclass(frozen=True)
class ImportanceEntry:
    feature: RelationshipFeature
    importance: float  # mean accuracy drop when the block is shuffled
    std: float         # std of the drop over repeats


@dataclass(frozen=True)
class ImportanceReport:
    """Blocks ranked by importance descending, ties by lexicographic key."""

    baseline_accuracy: float
    entries: tuple[ImportanceEntry, ...]

    def top(self, n: int = 3) -> tuple[ImportanceEntry, ...]:
        return self.entries[:n]


def _neighbor_multisets(num_categories: int, max_subset: int) -> list[tuple[int, ...]]:
    out = []
    for size in range(1, max_subset + 1):
        out.extend(
            itertools.combinations_with_replacement(range(num_categories), size)
        )
    return out


def feature_blocks(
    num_categories: int, embed_dim: int, max_subset: int = DEFAULT_MAX_SUBSET
) -> list[RelationshipFeature]:
    """The fixed block table; slices tile the feature vector without overlap."""
    blocks = []
    offset = 0
    for center in range(num_categories):
        for multiset in _neighbor_multisets(num_categories, max_subset):
            blocks.append(
                RelationshipFeature(center, multiset, offset, offset + embed_dim)
            )
            offset += embed_dim
    return blocks


def relationship_features(
    sample: MultiCategoryPointSet,
    graph: KnnGraph,
    params: ModelParams,
    place_type: int,
    layer_index: int | None = None,
    max_subset: int = DEFAULT_MAX_SUBSET,
) -> tuple[np.ndarray, list[RelationshipFeature]]:
    """Pooled per-block embeddings for one sample.

    ``layer_index`` selects which embedding level to pool (0 = input embedding,
    N = final layer output, the default). A node with no neighbors contributes
    to no block; blocks with no matching nodes are zero.
    """
    if layer_index is None:
        layer_index = params.num_layers
    if not 0 <= layer_index <= params.num_layers:
        raise ValueError(
            f"layer_index must be in [0, {params.num_layers}], got {layer_index}"
        )
    trace = model_forward(sample, graph, params, place_type)
    h = trace.h[layer_index]
    C = params.num_categories
    blocks = feature_blocks(C, h.shape[1], max_subset)

    # per-node neighbor category counts
    counts = np.zeros((sample.num_points, C), dtype=np.int64)
    for s in range(sample.num_points):
        nbrs = graph.neighbors[s]
        if nbrs.size:
            counts[s] = np.bincount(sample.categories[nbrs], minlength=C)

    vector = np.zeros(len(blocks) * h.shape[1], dtype=np.float64)
    for block in blocks:
        need = np.bincount(np.array(block.neighbor_categories), minlength=C)
        mask = (sample.categories == block.center_category) & np.all(
            counts >= need, axis=1
        )
        if mask.any():
            vector[block.start : block.stop] = h[mask].mean(axis=0)
    return vector, blocks


def _features_matrix(ensemble, samples, graphs, layer_index, max_subset):
    rows = []
    blocks = None
    for s in samples:
        member = _route_member(ensemble, s.place_type)
        vec, blocks = relationship_features(
            s, graphs.get(s), member, member.forward_key(s.place_type),
            layer_index, max_subset,
        )
        rows.append(vec)
    return np.array(rows), blocks


def permutation_importance(
    ensemble: TrainedEnsemble,
    train_samples,
    eval_samples,
    repeats: int,
    seed: int,
    layer_index: int | None = None,
    max_subset: int = DEFAULT_MAX_SUBSET,
    graphs: GraphCache | None = None,
) -> ImportanceReport:
    """Rank feature blocks by the probe-accuracy drop under shuffling.

    A logistic probe is fit on the training-split features and scored on the
    evaluation split; for each block the evaluation rows of that block are
    shuffled across samples ``repeats`` times (seeded) and the importance is
    baseline accuracy minus the mean shuffled accuracy.
    """
    train_samples = list(train_samples)
    eval_samples = list(eval_samples)
    if repeats < 1:
        raise ValueError(f"repeats must be >= 1, got {repeats}")
    if not train_samples or not eval_samples:
        raise DataValidationError("empty split for permutation importance")
    if graphs is None:
        graphs = GraphCache(ensemble.config.k_neighbors, ensemble.config.cutoff)

    X_train, blocks = _features_matrix(
        ensemble, train_samples, graphs, layer_index, max_subset
    )
    X_eval, _ = _features_matrix(
        ensemble, eval_samples, graphs, layer_index, max_subset
    )
    y_train = np.array([int(s.label) for s in train_samples])
    y_eval = np.array([int(s.label) for s in eval_samples])
    if np.unique(y_train).size < 2:
        raise DataValidationError("probe needs at least two classes in training split")

    probe = LogisticRegression(max_iter=2000)
    probe.fit(X_train, y_train)
    baseline = float(probe.score(X_eval, y_eval))

    rng = np.random.default_rng(seed)
    entries = []
    for block in blocks:
        accs = []
        for _ in range(repeats):
            perm = rng.permutation(X_eval.shape[0])
            shuffled = X_eval.copy()
            shuffled[:, block.start : block.stop] = X_eval[perm, block.start : block.stop]
            accs.append(float(probe.score(shuffled, y_eval)))
        entries.append(
            ImportanceEntry(block, baseline - float(np.mean(accs)), float(np.std(accs)))
        )
    entries.sort(key=lambda e: (-e.importance, e.feature.key))
    return ImportanceReport(baseline, tuple(entries))
