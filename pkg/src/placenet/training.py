"""Training strategies, ensemble routing, evaluation metrics, and splits.

Four strategies over the same member-training core:

* ``osfa``: one model, shared place-type key, trained on everything.
* ``place_type``: one model per place-type, each trained on its own samples.
* ``wdlr``: one model per place-type, trained on every sample within the
  expert distance threshold, with per-sample learning rate base_lr / distance.
* ``sda``: pre-train a shared model on all place-types, then per place-type
  freeze the first k layers and fine-tune the rest plus the classifier,
  adding a representation-divergence penalty between source and target
  batches at the shared layer.

Every strategy is a pure function of (dataset, config.seed): splits, member
initialization, and epoch shuffles all derive from seeded generators, and
member seeds depend only on the member's position so ensembles with one
member coincide across strategies.
"""

from __future__ import annotations

import csv
import json
import logging
import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field

import numpy as np

from placenet import __version__
from placenet.data import Dataset, MultiCategoryPointSet, PlaceTypeDistanceMatrix
from placenet.errors import DataValidationError, NumericalError
from placenet.graph import KnnGraph, build_knn_graph
from placenet.network import (
    ALL_PLACE_TYPES,
    Gradients,
    LayerGrads,
    ModelParams,
    embedding_grad_for_rep,
    init_model,
    load_model,
    loss_and_gradients,
    model_forward,
    pooled_layer_rep,
    rekey_model,
    save_model,
    sgd_step,
)

logger = logging.getLogger(__name__)

OSFA = "osfa"
PLACE_TYPE = "place_type"
WDLR = "wdlr"
SDA = "sda"
STRATEGIES = (OSFA, PLACE_TYPE, WDLR, SDA)

WEIGHTED_AVERAGE = "weighted_average"
MAJORITY_VOTE = "majority_vote"
AGGREGATIONS = (WEIGHTED_AVERAGE, MAJORITY_VOTE)

THREADS_ENV = "PLACENET_THREADS"


@dataclass(frozen=True)
class StrategyConfig:
    """Which strategy governs training, with its hyperparameters."""

    kind: str
    base_lr: float = 1e-3
    epochs: int = 50
    seed: int = 0
    k_neighbors: int = 10
    cutoff: float | None = None
    num_layers: int = 4
    hidden_dim: int = 32
    leaky_slope: float = 0.01
    sda_frozen_layers: int = 0
    sda_lambda: float = 1.0
    sda_source_batch: int = 8
    sda_freeze_classifier: bool = False
    target_place_type: int | None = None
    aggregation: str = WEIGHTED_AVERAGE
    distance_threshold: float | None = None

    def __post_init__(self) -> None:
        if self.kind not in STRATEGIES:
            raise ValueError(f"unknown strategy {self.kind!r}, expected {STRATEGIES}")
        if not self.base_lr > 0:
            raise ValueError(f"base_lr must be > 0, got {self.base_lr}")
        if self.epochs < 1:
            raise ValueError(f"epochs must be >= 1, got {self.epochs}")
        if not isinstance(self.seed, int) or self.seed < 0:
            raise ValueError(f"seed must be a non-negative int, got {self.seed!r}")
        if self.k_neighbors < 1:
            raise ValueError(f"k_neighbors must be >= 1, got {self.k_neighbors}")
        if self.cutoff is not None and not self.cutoff > 0:
            raise ValueError(f"cutoff must be > 0, got {self.cutoff}")
        if self.num_layers < 1 or self.hidden_dim < 1:
            raise ValueError("num_layers and hidden_dim must be >= 1")
        if not 0 <= self.sda_frozen_layers <= self.num_layers:
            raise ValueError(
                f"sda_frozen_layers must be in [0, {self.num_layers}], "
                f"got {self.sda_frozen_layers}"
            )
        if self.sda_lambda < 0:
            raise ValueError(f"sda_lambda must be >= 0, got {self.sda_lambda}")
        if self.aggregation not in AGGREGATIONS:
            raise ValueError(f"unknown aggregation {self.aggregation!r}")
        if self.distance_threshold is not None and not self.distance_threshold > 0:
            raise ValueError("distance_threshold must be > 0")


@dataclass(frozen=True)
class EpochLog:
    member_key: int
    epoch: int
    mean_loss: float
    val_accuracy: float | None


@dataclass(frozen=True)
class TrainedEnsemble:
    """Per-place-type members (single sentinel member under OSFA) plus the log."""

    members: dict[int, ModelParams]
    config: StrategyConfig
    training_log: tuple[EpochLog, ...]
    member_rates: dict[int, tuple[float, ...]]
    pretrained: ModelParams | None = None


@dataclass(frozen=True)
class PerClassMetrics:
    label: int
    support: int
    precision: float
    recall: float
    f1: float


@dataclass(frozen=True, eq=False)
class EvalReport:
    """Support-weighted accuracy/precision/recall/F1 plus the confusion matrix."""

    accuracy: float
    precision: float
    recall: float
    f1: float
    per_class: tuple[PerClassMetrics, ...]
    confusion: np.ndarray  # rows: true class, cols: predicted class

    @classmethod
    def from_confusion(cls, confusion) -> "EvalReport":
        cm = np.asarray(confusion, dtype=np.int64)
        if cm.ndim != 2 or cm.shape[0] != cm.shape[1]:
            raise ValueError(f"confusion matrix must be square, got {cm.shape}")
        total = int(cm.sum())
        if total == 0:
            raise ValueError("empty confusion matrix")
        supports = cm.sum(axis=1)
        predicted = cm.sum(axis=0)
        tp = np.diagonal(cm)
        per_class = []
        for c in range(cm.shape[0]):
            prec = float(tp[c] / predicted[c]) if predicted[c] > 0 else 0.0
            rec = float(tp[c] / supports[c]) if supports[c] > 0 else 0.0
            f1 = 2.0 * prec * rec / (prec + rec) if prec + rec > 0 else 0.0
            per_class.append(PerClassMetrics(c, int(supports[c]), prec, rec, f1))
        weights = supports / total
        return cls(
            accuracy=float(tp.sum() / total),
            precision=float(sum(w * m.precision for w, m in zip(weights, per_class))),
            recall=float(sum(w * m.recall for w, m in zip(weights, per_class))),
            f1=float(sum(w * m.f1 for w, m in zip(weights, per_class))),
            per_class=tuple(per_class),
            confusion=cm,
        )

    def to_dict(self) -> dict:
        return {
            "accuracy": self.accuracy,
            "precision": self.precision,
            "recall": self.recall,
            "f1": self.f1,
            "per_class": [asdict(m) for m in self.per_class],
            "confusion": self.confusion.tolist(),
        }


@dataclass(frozen=True)
class Splits:
    train: tuple[MultiCategoryPointSet, ...]
    val: tuple[MultiCategoryPointSet, ...]
    test: tuple[MultiCategoryPointSet, ...]


class GraphCache:
    """Per-run cache of KNN graphs keyed by sample identity."""

    def __init__(self, k: int, cutoff: float | None):
        self.k = k
        self.cutoff = cutoff
        self._cache: dict[int, tuple[MultiCategoryPointSet, KnnGraph]] = {}

    def get(self, sample: MultiCategoryPointSet) -> KnnGraph:
        entry = self._cache.get(id(sample))
        if entry is not None and entry[0] is sample:
            return entry[1]
        graph = build_knn_graph(sample.locations, self.k, self.cutoff)
        self._cache[id(sample)] = (sample, graph)
        return graph


def effective_learning_rate(base_lr: float, distance: float) -> float:
    """Inverse-distance rate: base_lr / distance, the distance-1 case being the base."""
    if not base_lr > 0:
        raise ValueError(f"base_lr must be > 0, got {base_lr}")
    if distance < 1:
        raise ValueError(f"distance must be >= 1, got {distance}")
    return base_lr / distance


def select_training_samples(
    data,
    target: int,
    matrix: PlaceTypeDistanceMatrix,
    threshold: float | None = None,
) -> list[tuple[MultiCategoryPointSet, float]]:
    """Samples whose place-type distance to the target is within the threshold.

    ``data`` may be a Dataset or any sequence of samples. Returns (sample,
    distance) pairs in input order.
    """
    samples = data.samples if isinstance(data, Dataset) else data
    limit = matrix.threshold if threshold is None else float(threshold)
    out = []
    for s in samples:
        d = matrix.distance(target, s.place_type)
        if d <= limit:
            out.append((s, d))
    return out


def _largest_remainder(m: int, fracs: tuple[float, ...]) -> list[int]:
    # ties in remainder go to the earlier split
    quotas = [m * f for f in fracs]
    base = [int(math.floor(q)) for q in quotas]
    order = sorted(range(len(fracs)), key=lambda i: (-(quotas[i] - base[i]), i))
    for i in order[: m - sum(base)]:
        base[i] += 1
    return base


def split_dataset(data: Dataset, seed: int) -> Splits:
    """Stratified 60/20/20 split: 80/20 train/test, then 25% of train to val.

    Strata are (place-type, label) groups; counts are rounded per stratum by
    largest remainder at each stage. A stratum too small to populate all three
    splits logs a warning. Identical (data, seed) give identical splits, and
    the split is invariant to the order samples appear in the dataset.
    """
    strata: dict[tuple[int, int], list[MultiCategoryPointSet]] = {}
    for s in data.samples:
        strata.setdefault((s.place_type, int(s.label)), []).append(s)

    train, val, test = [], [], []
    for (pt, label), members in sorted(strata.items()):
        members = sorted(members, key=lambda s: s.sample_id)
        rng = np.random.default_rng(np.random.SeedSequence((seed, pt, label)))
        idx = rng.permutation(len(members))
        n_train0, n_test = _largest_remainder(len(members), (0.8, 0.2))
        n_train, n_val = _largest_remainder(n_train0, (0.75, 0.25))
        if min(n_train, n_val, n_test) == 0:
            logger.warning(
                "stratum (place-type %d, label %d) has %d sample(s); "
                "split %d/%d/%d leaves a split empty",
                pt, label, len(members), n_train, n_val, n_test,
            )
        picked = [members[i] for i in idx]
        train.extend(picked[:n_train])
        val.extend(picked[n_train : n_train + n_val])
        test.extend(picked[n_train + n_val :])
    return Splits(tuple(train), tuple(val), tuple(test))


def _member_seed(config_seed: int, index: int) -> np.random.SeedSequence:
    return np.random.SeedSequence((config_seed, index))


def _mask_grads(
    grads: Gradients,
    trainable_layers: set[int] | None,
    train_embedding: bool,
    train_classifier: bool,
) -> Gradients:
    if trainable_layers is None and train_embedding and train_classifier:
        return grads
    layers = tuple(
        lg
        if trainable_layers is None or i in trainable_layers
        else LayerGrads({}, {}, None)
        for i, lg in enumerate(grads.layers)
    )
    return Gradients(
        grads.embedding if train_embedding else None,
        layers,
        grads.classifier_w if train_classifier else None,
        grads.classifier_b if train_classifier else None,
    )


def _add_embedding_grad(grads: Gradients, extra: np.ndarray) -> Gradients:
    emb = extra if grads.embedding is None else grads.embedding + extra
    return Gradients(emb, grads.layers, grads.classifier_w, grads.classifier_b)


def _member_val_accuracy(
    params: ModelParams,
    key: int,
    val_samples,
    graphs: GraphCache,
) -> float | None:
    if not val_samples:
        return None
    correct = 0
    for s in val_samples:
        trace = model_forward(s, graphs.get(s), params, key)
        correct += int(np.argmax(trace.probs)) == int(s.label)
    return correct / len(val_samples)


class _DivergenceTerm:
    """Squared-distance penalty between batch-mean shared-layer representations.

    The source mean is recomputed each epoch from a seeded mini-batch of
    non-target samples pushed through the pre-trained model; the target side is
    the current member's pooled layer-k representation of the training sample.
    Only parameters feeding layer k can receive gradient from this term, so
    with k >= 1 frozen layers it contributes to the logged loss only.
    """

    def __init__(
        self,
        pretrained: ModelParams,
        source_samples,
        layer_index: int,
        lam: float,
        batch_size: int,
        graphs: GraphCache,
        seed_seq: np.random.SeedSequence,
    ):
        self.pretrained = pretrained
        self.source_samples = list(source_samples)
        self.layer_index = layer_index
        self.lam = lam
        self.batch_size = max(1, batch_size)
        self.graphs = graphs
        self.rng = np.random.default_rng(seed_seq)
        self.source_mean: np.ndarray | None = None

    def epoch_setup(self) -> None:
        if not self.source_samples:
            self.source_mean = None
            return
        size = min(self.batch_size, len(self.source_samples))
        idx = self.rng.choice(len(self.source_samples), size=size, replace=False)
        reps = []
        for i in idx:
            s = self.source_samples[int(i)]
            trace = model_forward(
                s, self.graphs.get(s), self.pretrained,
                self.pretrained.forward_key(s.place_type),
            )
            reps.append(pooled_layer_rep(trace, self.layer_index)[0])
        self.source_mean = np.mean(reps, axis=0)

    def penalty(self, trace) -> tuple[float, np.ndarray | None]:
        if self.source_mean is None:
            return 0.0, None
        rep, winners = pooled_layer_rep(trace, self.layer_index)
        diff = rep - self.source_mean
        div = float(diff @ diff)
        emb_grad = None
        if self.layer_index == 0:
            emb_grad = embedding_grad_for_rep(trace, winners, self.lam * 2.0 * diff)
        return self.lam * div, emb_grad


def _train_member(
    train_pairs: list[tuple[MultiCategoryPointSet, float]],
    val_samples,
    key: int,
    seed_seq: np.random.SeedSequence,
    config: StrategyConfig,
    graphs: GraphCache,
    num_categories: int,
    num_classes: int,
    init_params: ModelParams | None = None,
    trainable_layers: set[int] | None = None,
    train_embedding: bool = True,
    train_classifier: bool = True,
    divergence: _DivergenceTerm | None = None,
) -> tuple[ModelParams, list[EpochLog], tuple[float, ...]]:
    """Seeded SGD over the member's samples; returns the best-validation snapshot.

    One sample per step, shuffled each epoch. The model checkpoint with the
    highest validation accuracy (strictly better replaces) is returned; with no
    validation samples, the final parameters are.
    """
    rng = np.random.default_rng(seed_seq)
    if init_params is None:
        params = init_model(
            rng, num_categories, num_classes, config.num_layers,
            config.hidden_dim, (key,), config.leaky_slope,
        )
    else:
        params = init_params

    best_params = None
    best_acc = -1.0
    logs: list[EpochLog] = []
    rates: set[float] = set()
    for epoch in range(config.epochs):
        if divergence is not None:
            divergence.epoch_setup()
        order = rng.permutation(len(train_pairs))
        losses = []
        for i in order:
            sample, dist = train_pairs[int(i)]
            lr = effective_learning_rate(config.base_lr, dist)
            rates.add(lr)
            graph = graphs.get(sample)
            try:
                loss, grads, trace = loss_and_gradients(
                    sample, graph, params, key, int(sample.label), with_trace=True
                )
            except NumericalError as exc:
                raise NumericalError(
                    f"member {key} diverged at epoch {epoch}: {exc}"
                ) from exc
            if divergence is not None:
                div_loss, emb_grad = divergence.penalty(trace)
                loss += div_loss
                if emb_grad is not None and train_embedding:
                    grads = _add_embedding_grad(grads, emb_grad)
            grads = _mask_grads(grads, trainable_layers, train_embedding, train_classifier)
            params = sgd_step(params, grads, lr)
            losses.append(loss)
        mean_loss = float(np.mean(losses))
        if not np.isfinite(mean_loss):
            raise NumericalError(f"member {key} diverged at epoch {epoch}")
        val_acc = _member_val_accuracy(params, key, val_samples, graphs)
        logs.append(EpochLog(key, epoch, mean_loss, val_acc))
        if val_acc is not None and val_acc > best_acc:
            best_acc = val_acc
            best_params = params
    final = best_params if best_params is not None else params
    return final, logs, tuple(sorted(rates))


def _member_parallelism() -> int:
    try:
        return max(1, int(os.environ.get(THREADS_ENV, "1")))
    except ValueError:
        return 1


def _run_members(jobs: list[tuple[int, callable]]) -> dict[int, tuple]:
    """Run independent member-training jobs, optionally in a thread pool."""
    workers = min(_member_parallelism(), len(jobs)) if jobs else 1
    if workers <= 1:
        return {key: fn() for key, fn in jobs}
    with ThreadPoolExecutor(max_workers=workers) as pool:
        futures = {key: pool.submit(fn) for key, fn in jobs}
        return {key: fut.result() for key, fut in futures.items()}


def train_osfa(data: Dataset, config: StrategyConfig) -> TrainedEnsemble:
    """One model for all place-types, constant learning rate."""
    splits = split_dataset(data, config.seed)
    if not splits.train:
        raise DataValidationError("empty training split")
    graphs = GraphCache(config.k_neighbors, config.cutoff)
    pairs = [(s, 1.0) for s in splits.train]
    params, logs, rates = _train_member(
        pairs, splits.val, ALL_PLACE_TYPES, _member_seed(config.seed, 0),
        config, graphs, data.num_categories, data.num_classes,
    )
    return TrainedEnsemble(
        {ALL_PLACE_TYPES: params}, config, tuple(logs), {ALL_PLACE_TYPES: rates}
    )


def _target_keys(data: Dataset, config: StrategyConfig) -> list[int]:
    if config.target_place_type is not None:
        if not 0 <= config.target_place_type < data.num_place_types:
            raise DataValidationError(
                f"target place-type {config.target_place_type} out of range"
            )
        return [config.target_place_type]
    return sorted({s.place_type for s in data.samples})


def _train_routed(
    data: Dataset, config: StrategyConfig, threshold: float | None
) -> TrainedEnsemble:
    splits = split_dataset(data, config.seed)
    if not splits.train:
        raise DataValidationError("empty training split")
    graphs = GraphCache(config.k_neighbors, config.cutoff)
    keys = _target_keys(data, config)

    jobs = []
    for index, pt in enumerate(keys):
        pairs = select_training_samples(
            splits.train, pt, data.distance_matrix, threshold=threshold
        )
        if not pairs:
            raise DataValidationError(
                f"place-type {pt} has no training samples within threshold"
            )
        val = [s for s in splits.val if s.place_type == pt]
        seed_seq = _member_seed(config.seed, index)

        def job(pairs=pairs, val=val, pt=pt, seed_seq=seed_seq):
            return _train_member(
                pairs, val, pt, seed_seq, config, graphs,
                data.num_categories, data.num_classes,
            )

        jobs.append((pt, job))

    results = _run_members(jobs)
    members, logs, rates = {}, [], {}
    for pt in keys:
        params, member_logs, member_rates = results[pt]
        members[pt] = params
        logs.extend(member_logs)
        rates[pt] = member_rates
    return TrainedEnsemble(members, config, tuple(logs), rates)


def train_place_type(data: Dataset, config: StrategyConfig) -> TrainedEnsemble:
    """A separate model per place-type, trained only on its own samples."""
    return _train_routed(data, config, threshold=1.0)


def train_wdlr(data: Dataset, config: StrategyConfig) -> TrainedEnsemble:
    """Per-place-type models trained on all samples within the distance
    threshold, each SGD step scaled by the inverse place-type distance."""
    return _train_routed(data, config, threshold=config.distance_threshold)


def _sda_pretrain(
    data: Dataset, config: StrategyConfig, splits: Splits, graphs: GraphCache
) -> tuple[ModelParams, list[EpochLog]]:
    pretrain_pairs = [(s, 1.0) for s in splits.train]
    pretrained, pre_logs, _ = _train_member(
        pretrain_pairs, splits.val, ALL_PLACE_TYPES, _member_seed(config.seed, 0),
        config, graphs, data.num_categories, data.num_classes,
    )
    return pretrained, pre_logs


def _sda_finetune(
    data: Dataset,
    config: StrategyConfig,
    splits: Splits,
    graphs: GraphCache,
    pretrained: ModelParams,
) -> tuple[dict[int, ModelParams], list[EpochLog], dict[int, tuple[float, ...]]]:
    keys = _target_keys(data, config)
    frozen = config.sda_frozen_layers
    trainable = set(range(frozen, config.num_layers))
    jobs = []
    for index, pt in enumerate(keys):
        pairs = [(s, 1.0) for s in splits.train if s.place_type == pt]
        if not pairs:
            raise DataValidationError(f"place-type {pt} has no training samples")
        val = [s for s in splits.val if s.place_type == pt]
        member0 = rekey_model(pretrained, ALL_PLACE_TYPES, pt)
        divergence = None
        if config.sda_lambda > 0:
            source = [s for s in splits.train if s.place_type != pt]
            divergence = _DivergenceTerm(
                pretrained, source, frozen, config.sda_lambda,
                config.sda_source_batch, graphs,
                np.random.SeedSequence((config.seed, 1 + index, 0xD1F)),
            )
        seed_seq = _member_seed(config.seed, 1 + index)

        def job(pairs=pairs, val=val, pt=pt, seed_seq=seed_seq,
                member0=member0, divergence=divergence):
            return _train_member(
                pairs, val, pt, seed_seq, config, graphs,
                data.num_categories, data.num_classes,
                init_params=member0,
                trainable_layers=trainable,
                train_embedding=(frozen == 0),
                train_classifier=not config.sda_freeze_classifier,
                divergence=divergence,
            )

        jobs.append((pt, job))

    results = _run_members(jobs)
    members, logs, rates = {}, [], {}
    for pt in keys:
        params, member_logs, member_rates = results[pt]
        members[pt] = params
        logs.extend(member_logs)
        rates[pt] = member_rates
    return members, logs, rates


def train_sda(data: Dataset, config: StrategyConfig) -> TrainedEnsemble:
    """Pre-train shared, then per-place-type freeze-and-fine-tune with a
    divergence penalty tying target representations to the source domain."""
    splits = split_dataset(data, config.seed)
    if not splits.train:
        raise DataValidationError("empty training split")
    graphs = GraphCache(config.k_neighbors, config.cutoff)
    pretrained, pre_logs = _sda_pretrain(data, config, splits, graphs)
    members, logs, rates = _sda_finetune(data, config, splits, graphs, pretrained)
    return TrainedEnsemble(
        members, config, tuple(pre_logs) + tuple(logs), rates, pretrained=pretrained
    )


def sweep_frozen(
    data: Dataset, config: StrategyConfig
) -> tuple[list[tuple[int, EvalReport]], EvalReport]:
    """Fine-tune SDA members for every frozen-layer count k in 0..num_layers.

    The shared pre-training is done once and reused across the sweep. Returns
    one (k, test EvalReport) row per k, plus the pre-trained shared model's own
    test report for comparison (the diagnostic full-freeze row equals it).
    """
    from dataclasses import replace

    splits = split_dataset(data, config.seed)
    if not splits.train or not splits.test:
        raise DataValidationError("empty training or test split")
    graphs = GraphCache(config.k_neighbors, config.cutoff)
    pretrained, _ = _sda_pretrain(data, config, splits, graphs)

    rows = []
    for k in range(config.num_layers + 1):
        cfg_k = replace(config, sda_frozen_layers=k)
        members, _, rates = _sda_finetune(data, cfg_k, splits, graphs, pretrained)
        ensemble = TrainedEnsemble(members, cfg_k, (), rates, pretrained=pretrained)
        rows.append((k, evaluate(ensemble, splits.test, graphs)))

    shared = TrainedEnsemble(
        {ALL_PLACE_TYPES: pretrained}, config, (), {}, pretrained=pretrained
    )
    return rows, evaluate(shared, splits.test, graphs)


TRAINERS = {
    OSFA: train_osfa,
    PLACE_TYPE: train_place_type,
    WDLR: train_wdlr,
    SDA: train_sda,
}


def train(data: Dataset, config: StrategyConfig) -> TrainedEnsemble:
    """Dispatch to the strategy named by config.kind."""
    return TRAINERS[config.kind](data, config)


def _route_member(ensemble: TrainedEnsemble, place_type: int) -> ModelParams:
    if place_type in ensemble.members:
        return ensemble.members[place_type]
    if ALL_PLACE_TYPES in ensemble.members:
        return ensemble.members[ALL_PLACE_TYPES]
    raise DataValidationError(f"no ensemble member for place-type {place_type}")


def route_prediction(
    ensemble: TrainedEnsemble,
    sample: MultiCategoryPointSet,
    graph: KnnGraph,
) -> tuple[int, np.ndarray]:
    """Per-sample prediction by the member matching the sample's place-type."""
    member = _route_member(ensemble, sample.place_type)
    trace = model_forward(sample, graph, member, member.forward_key(sample.place_type))
    return int(np.argmax(trace.probs)), trace.probs


def aggregate_predictions(
    ensemble: TrainedEnsemble,
    samples,
    graphs: GraphCache | None = None,
    mode: str | None = None,
) -> tuple[int, np.ndarray]:
    """Combine routed per-sample predictions into one class call.

    weighted_average: mean of probability vectors, then argmax.
    majority_vote: per-sample argmax, then plurality; the returned vector holds
    vote shares. Ties resolve to the lower class id in both modes.
    """
    samples = list(samples)
    if not samples:
        raise ValueError("no samples to aggregate")
    mode = ensemble.config.aggregation if mode is None else mode
    if mode not in AGGREGATIONS:
        raise ValueError(f"unknown aggregation {mode!r}")
    if graphs is None:
        graphs = GraphCache(ensemble.config.k_neighbors, ensemble.config.cutoff)
    all_probs = np.array(
        [route_prediction(ensemble, s, graphs.get(s))[1] for s in samples]
    )
    if mode == WEIGHTED_AVERAGE:
        mean = all_probs.mean(axis=0)
        return int(np.argmax(mean)), mean
    votes = np.argmax(all_probs, axis=1)
    counts = np.bincount(votes, minlength=all_probs.shape[1])
    return int(np.argmax(counts)), counts / counts.sum()


def evaluate(
    ensemble: TrainedEnsemble,
    samples,
    graphs: GraphCache | None = None,
) -> EvalReport:
    """Support-weighted metrics over routed per-sample predictions."""
    samples = list(samples)
    if not samples:
        raise DataValidationError("empty evaluation split")
    if graphs is None:
        graphs = GraphCache(ensemble.config.k_neighbors, ensemble.config.cutoff)
    num_classes = next(iter(ensemble.members.values())).num_classes
    cm = np.zeros((num_classes, num_classes), dtype=np.int64)
    for s in samples:
        if not 0 <= int(s.label) < num_classes:
            raise DataValidationError(
                f"sample {s.sample_id!r}: label {s.label} outside model's classes"
            )
        pred, _ = route_prediction(ensemble, s, graphs.get(s))
        cm[int(s.label), pred] += 1
    return EvalReport.from_confusion(cm)


# --- ensemble checkpoint IO -------------------------------------------------

_INDEX_NAME = "ensemble.json"
_LOG_NAME = "training_log.csv"


def _member_filename(key: int) -> str:
    return "member_all.npz" if key == ALL_PLACE_TYPES else f"member_pt{key}.npz"


def save_ensemble(ensemble: TrainedEnsemble, out_dir: str) -> str:
    """One model file per member plus an index file; returns the index path."""
    os.makedirs(out_dir, exist_ok=True)
    index = {
        "version": __version__,
        "config": asdict(ensemble.config),
        "members": {},
        "member_rates": {
            str(k): list(v) for k, v in sorted(ensemble.member_rates.items())
        },
        "pretrained": None,
    }
    for key in sorted(ensemble.members):
        fname = _member_filename(key)
        save_model(
            ensemble.members[key],
            os.path.join(out_dir, fname),
            meta={"member_key": key, "seed": ensemble.config.seed,
                  "strategy": ensemble.config.kind},
        )
        index["members"][str(key)] = fname
    if ensemble.pretrained is not None:
        save_model(
            ensemble.pretrained, os.path.join(out_dir, "pretrained.npz"),
            meta={"member_key": ALL_PLACE_TYPES, "seed": ensemble.config.seed,
                  "strategy": ensemble.config.kind, "phase": "pretrain"},
        )
        index["pretrained"] = "pretrained.npz"

    with open(os.path.join(out_dir, _LOG_NAME), "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["epoch", "member", "mean_loss", "val_accuracy"])
        for entry in ensemble.training_log:
            writer.writerow(
                [entry.epoch, entry.member_key, repr(entry.mean_loss),
                 "" if entry.val_accuracy is None else repr(entry.val_accuracy)]
            )
    index_path = os.path.join(out_dir, _INDEX_NAME)
    with open(index_path, "w", encoding="utf-8") as fh:
        json.dump(index, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return index_path


def load_ensemble(checkpoint_dir: str) -> TrainedEnsemble:
    """Inverse of save_ensemble."""
    index_path = os.path.join(checkpoint_dir, _INDEX_NAME)
    try:
        with open(index_path, "r", encoding="utf-8") as fh:
            index = json.load(fh)
    except OSError as exc:
        raise DataValidationError(f"cannot read checkpoint {index_path!r}: {exc}") from exc
    cfg = index["config"]
    config = StrategyConfig(**cfg)
    members = {}
    for key_str, fname in index["members"].items():
        params, _ = load_model(os.path.join(checkpoint_dir, fname))
        members[int(key_str)] = params
    pretrained = None
    if index.get("pretrained"):
        pretrained, _ = load_model(os.path.join(checkpoint_dir, index["pretrained"]))
    log = []
    log_path = os.path.join(checkpoint_dir, _LOG_NAME)
    if os.path.exists(log_path):
        with open(log_path, "r", encoding="utf-8", newline="") as fh:
            for row in list(csv.reader(fh))[1:]:
                log.append(
                    EpochLog(int(row[1]), int(row[0]), float(row[2]),
                             float(row[3]) if row[3] else None)
                )
    rates = {
        int(k): tuple(v) for k, v in index.get("member_rates", {}).items()
    }
    return TrainedEnsemble(members, config, tuple(log), rates, pretrained=pretrained)
