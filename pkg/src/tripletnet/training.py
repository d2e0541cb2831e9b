"""Triplet and multi-task losses, offline mining, Adam and the epoch loop."""
from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field
from typing import NamedTuple, Sequence

import numpy as np

from . import tensor as T
from .data import AugmentationConfig, Dataset, GeneticDistanceMatrix, NormStats, apply_normalizer, \
    augment_batch, balanced_sampler, fit_normalizer
from .model import ExtractorSpec, ModelParams, NetworkConfig, PrecomputedFeatures, TinyConvNet, \
    forward, init_params, predict
from .rng import derive_seed, make_rng
from .tensor import Tensor

log = logging.getLogger(__name__)

HISTORY_COLUMNS = ("epoch", "lr", "loss_total", "loss_triplet", "loss_ce", "s1", "s2",
                   "train_acc", "fallback_negatives")


class Triplet(NamedTuple):
    anchor: int
    positive: int
    negative: int


@dataclass(frozen=True)
class TripletDistances:
    d_plus: float
    d_minus: float


# -------------------------------------------------------------------- margins


@dataclass(frozen=True)
class FixedMargin:
    margin: float = 0.5

    def __post_init__(self):
        if not 0 < self.margin <= 2:
            raise ValueError("fixed margin must lie in (0, 2]")


@dataclass(frozen=True)
class DynamicMargin:
    """Margin interpolated linearly in genetic distance between ``m_min`` and ``m_max``."""

    matrix: GeneticDistanceMatrix
    m_min: float = 0.1
    m_max: float = 0.5

    def __post_init__(self):
        if not 0 < self.m_min <= self.m_max <= 2:
            raise ValueError("dynamic margin needs 0 < m_min <= m_max <= 2")


MarginPolicy = FixedMargin | DynamicMargin


def _class_index(policy: DynamicMargin, c) -> int:
    if isinstance(c, str):
        return policy.matrix.index(c)
    c = int(c)
    if not 0 <= c < len(policy.matrix.species):
        raise KeyError(f"class index {c} not in genetic matrix")
    return c


def dynamic_margin(policy: MarginPolicy, class_pos, class_neg) -> float:
    """Margin for a triplet whose anchor/positive class is ``class_pos``.

    Classes are species names or row indices of the genetic matrix.
    """
    if isinstance(policy, FixedMargin):
        return policy.margin
    i, j = _class_index(policy, class_pos), _class_index(policy, class_neg)
    if i == j:
        raise ValueError("dynamic margin is defined between distinct classes")
    frac = policy.matrix.matrix[i, j] / policy.matrix.max_offdiag
    return policy.m_min + (policy.m_max - policy.m_min) * frac


def margin_table(policy: MarginPolicy, n_classes: int) -> np.ndarray:
    """``C×C`` margins for every (anchor class, negative class) pair."""
    if isinstance(policy, FixedMargin):
        return np.full((n_classes, n_classes), policy.margin)
    m = policy.matrix.matrix
    if m.shape[0] < n_classes:
        raise KeyError("genetic matrix covers fewer classes than the dataset")
    frac = m[:n_classes, :n_classes] / policy.matrix.max_offdiag
    return policy.m_min + (policy.m_max - policy.m_min) * frac


# --------------------------------------------------------------------- losses


def triplet_loss(d_plus, d_minus, margin) -> Tensor:
    """ReLU(d+ - d- + margin), elementwise over batched distances."""
    return T.relu(T.add(T.sub(d_plus, d_minus), margin))


def combined_loss(l_t, l_c, s1, s2) -> Tensor:
    """exp(-s1) * l_t + exp(-s2) * l_c + s1 + s2."""
    return T.exp(T.neg(s1)) * l_t + T.exp(T.neg(s2)) * l_c + s1 + s2


# --------------------------------------------------------------------- mining


@dataclass
class MiningStats:
    anchors: int = 0
    fallback_negatives: int = 0
    skipped_singletons: int = 0
    margins: list[float] = field(default_factory=list)

    @property
    def margin_mean(self) -> float:
        return float(np.mean(self.margins)) if self.margins else float("nan")


def mine_triplets(embeddings, labels, policy: MarginPolicy, rng: np.random.Generator,
                  indices: Sequence[int] | None = None, n_classes: int | None = None
                  ) -> tuple[list[Triplet], MiningStats]:
    """Hardest positive and a random semi-hard negative for every anchor.

    Semi-hard means ``d- < d+ + margin(anchor class, negative class)``.  When
    no negative qualifies the closest negative is used and counted as a
    fallback.  Row ``r`` maps to dataset index ``indices[r]``.
    """
    emb = np.asarray(embeddings.data if isinstance(embeddings, Tensor) else embeddings, dtype=np.float64)
    labels = np.asarray(labels)
    if len(np.unique(labels)) < 2:
        raise ValueError("mining needs at least two classes")
    idx = np.arange(len(labels)) if indices is None else np.asarray(indices)
    n_classes = int(labels.max()) + 1 if n_classes is None else n_classes
    margins = margin_table(policy, n_classes)
    dist = T.pairwise_cosine_distance(emb)
    stats = MiningStats()
    triplets: list[Triplet] = []
    for a in range(len(labels)):
        same = labels == labels[a]
        same[a] = False
        pos_rows = np.flatnonzero(same)
        if pos_rows.size == 0:
            stats.skipped_singletons += 1
            continue
        p = pos_rows[np.argmax(dist[a, pos_rows])]
        d_plus = dist[a, p]
        neg_rows = np.flatnonzero(labels != labels[a])
        thresh = d_plus + margins[labels[a], labels[neg_rows]]
        semi = neg_rows[dist[a, neg_rows] < thresh]
        if semi.size:
            n = semi[rng.integers(semi.size)]
        else:
            n = neg_rows[np.argmin(dist[a, neg_rows])]
            stats.fallback_negatives += 1
        stats.anchors += 1
        stats.margins.append(float(margins[labels[a], labels[n]]))
        triplets.append(Triplet(int(idx[a]), int(idx[p]), int(idx[n])))
    if stats.skipped_singletons:
        log.warning("skipped %d anchors from single-member classes", stats.skipped_singletons)
    return triplets, stats


# ------------------------------------------------------------------ optimizer


@dataclass
class OptimizerState:
    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def for_params(cls, params) -> "OptimizerState":
        named = _named(params)
        return cls({k: np.zeros_like(p.data) for k, p in named.items()},
                   {k: np.zeros_like(p.data) for k, p in named.items()})


def _named(params) -> dict:
    return params.tensors if isinstance(params, ModelParams) else dict(params)


def adam_step(params, state: OptimizerState, lr: float) -> None:
    """Bias-corrected Adam update in place; gradients are zeroed afterwards.

    ``params`` is a ModelParams or a mapping of name to Parameter.
    """
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** state.step
    c2 = 1.0 - b2 ** state.step
    for k, p in _named(params).items():
        g = p.grad
        m = state.m[k] = b1 * state.m[k] + (1 - b1) * g
        v = state.v[k] = b2 * state.v[k] + (1 - b2) * g * g
        p.data = (p.data - lr * (m / c1) / (np.sqrt(v / c2) + state.eps)).astype(p.data.dtype, copy=False)
        p.zero_grad()


def cosine_anneal(lr0: float, lr_min: float, t: float, total: float) -> float:
    """lr_min + (lr0 - lr_min) * (1 + cos(pi t / total)) / 2, without restarts."""
    if t < 0 or t > total:
        raise ValueError(f"schedule step {t} outside [0, {total}]")
    if total == 0:
        return lr0
    return lr_min + 0.5 * (lr0 - lr_min) * (1.0 + math.cos(math.pi * t / total))


def epoch_lr(cfg: "TrainConfig", epoch: int) -> float:
    # the final epoch runs at exactly lr_min
    return cosine_anneal(cfg.lr0, cfg.lr_min, epoch, max(cfg.epochs - 1, 0))


# --------------------------------------------------------------- configuration


@dataclass(frozen=True)
class TrainConfig:
    seed: int = 0
    batch_size: int = 16
    epochs: int = 100
    lr0: float = 1e-3
    lr_min: float = 1e-5
    use_measurements: bool = True
    use_triplet: bool = True
    use_dynamic_margin: bool = False
    margin: float = 0.5
    m_min: float = 0.1
    m_max: float = 0.5
    standardize_measurements: bool = False
    augmentation: AugmentationConfig = AugmentationConfig()
    embed_hidden: tuple[int, ...] = (64,)
    classifier_hidden: tuple[int, ...] = ()
    dtype: str = "float32"

    def __post_init__(self):
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.lr_min > self.lr0:
            raise ValueError("lr_min must not exceed lr0")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.use_dynamic_margin and not self.use_triplet:
            raise ValueError("dynamic margin requires the triplet loss")


def margin_policy(cfg: TrainConfig, genetic: GeneticDistanceMatrix | None) -> MarginPolicy:
    if cfg.use_dynamic_margin:
        if genetic is None:
            raise ValueError("dynamic margin requires a genetic distance matrix")
        return DynamicMargin(genetic, cfg.m_min, cfg.m_max)
    return FixedMargin(cfg.margin)


# -------------------------------------------------------------- preprocessing


@dataclass
class Preprocessing:
    """Statistics fitted on a training split and applied to every split."""

    image_stats: NormStats | None = None
    meas_mean: np.ndarray | None = None
    meas_std: np.ndarray | None = None

    def apply(self, data: Dataset) -> Dataset:
        images = data.images
        if images is not None and self.image_stats is not None:
            images = apply_normalizer(images, self.image_stats)
        meas = data.measurements
        if self.meas_mean is not None:
            meas = (meas - self.meas_mean) / self.meas_std
        return Dataset(ids=data.ids, labels=data.labels, species=data.species, measurements=meas,
                       schema=data.schema, images=images, features=data.features,
                       genetic=data.genetic, site_ids=data.site_ids)

    def to_dict(self) -> dict:
        d: dict = {}
        if self.image_stats is not None:
            d["image_mean"] = self.image_stats.mean.tolist()
            d["image_std"] = self.image_stats.std.tolist()
        if self.meas_mean is not None:
            d["meas_mean"] = self.meas_mean.tolist()
            d["meas_std"] = self.meas_std.tolist()
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "Preprocessing":
        stats = (NormStats(np.array(d["image_mean"]), np.array(d["image_std"]))
                 if "image_mean" in d else None)
        mm = np.array(d["meas_mean"]) if "meas_mean" in d else None
        ms = np.array(d["meas_std"]) if "meas_std" in d else None
        return cls(stats, mm, ms)


def fit_preprocessing(data: Dataset, train_idx, standardize_measurements: bool = False) -> Preprocessing:
    """Fit only on ``train_idx`` rows; test rows are never read."""
    train_idx = np.asarray(train_idx)
    stats = fit_normalizer(data.images[train_idx]) if data.images is not None else None
    if standardize_measurements and data.measurements.shape[1]:
        m = data.measurements[train_idx]
        return Preprocessing(stats, m.mean(axis=0), np.maximum(m.std(axis=0), 1e-6))
    return Preprocessing(stats)


# ------------------------------------------------------------------ the loop


@dataclass
class EpochMetrics:
    epoch: int
    lr: float
    loss_total: float
    loss_triplet: float | None
    loss_ce: float
    s1: float
    s2: float
    train_acc: float
    fallback_negatives: int
    margin_mean: float = float("nan")

    def row(self) -> list[str]:
        def fmt(v):
            return "" if v is None else repr(float(v))
        return [str(self.epoch), fmt(self.lr), fmt(self.loss_total), fmt(self.loss_triplet),
                fmt(self.loss_ce), fmt(self.s1), fmt(self.s2), fmt(self.train_acc),
                str(self.fallback_negatives)]


def write_history(path, history: Sequence[EpochMetrics]) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(HISTORY_COLUMNS)
        for m in history:
            w.writerow(m.row())


def network_config(data: Dataset, cfg: TrainConfig, image_side: int | None = None) -> NetworkConfig:
    side = image_side or (data.images.shape[-1] if data.images is not None else 32)
    return NetworkConfig(n_classes=data.n_classes,
                         n_measurements=data.measurements.shape[1] if cfg.use_measurements else 0,
                         image_side=side, embed_hidden=tuple(cfg.embed_hidden),
                         classifier_hidden=tuple(cfg.classifier_hidden))


def _inputs(params: ModelParams, data: Dataset, rows: np.ndarray):
    if isinstance(params.extractor, PrecomputedFeatures):
        return [data.ids[i] for i in rows]
    return data.images[rows].astype(params.dtype, copy=False)


def _measurements(params: ModelParams, data: Dataset, rows: np.ndarray):
    if params.config.n_measurements == 0:
        return None
    return data.measurements[rows].astype(params.dtype, copy=False)


def embed_dataset(params: ModelParams, data: Dataset, rows=None, chunk: int = 256
                  ) -> tuple[np.ndarray, np.ndarray]:
    """Un-augmented embeddings and logits for ``rows`` (default: all)."""
    rows = np.arange(len(data)) if rows is None else np.asarray(rows)
    embs, logits = [], []
    for start in range(0, len(rows), chunk):
        r = rows[start:start + chunk]
        e, lg = forward(params, _inputs(params, data, r), _measurements(params, data, r))
        embs.append(e.data)
        logits.append(lg.data)
    if not embs:
        return np.zeros((0, params.config.embed_dim)), np.zeros((0, params.config.n_classes))
    return np.concatenate(embs), np.concatenate(logits)


def batch_loss(params: ModelParams, data: Dataset, anchors: np.ndarray,
               triplets: dict[int, Triplet] | None, margins: np.ndarray | None,
               cfg: TrainConfig, aug_rng: np.random.Generator | None = None):
    """Forward one batch on the active tape; returns (total, l_t, l_c) tensors.

    ``triplets`` of None selects classification-only training.
    """
    anchors = np.asarray(anchors)
    use_triplet = triplets is not None
    if use_triplet:
        elig = np.array([i for i, a in enumerate(anchors) if int(a) in triplets], dtype=np.int64)
        pos = np.array([triplets[int(anchors[i])].positive for i in elig], dtype=np.int64)
        neg = np.array([triplets[int(anchors[i])].negative for i in elig], dtype=np.int64)
        rows = np.concatenate([anchors, pos, neg])
    else:
        rows = anchors
    inputs = _inputs(params, data, rows)
    if aug_rng is not None and not isinstance(params.extractor, PrecomputedFeatures):
        inputs = augment_batch(inputs, cfg.augmentation, aug_rng)
    emb, logits = forward(params, inputs, _measurements(params, data, rows))
    nA = len(anchors)
    l_c = T.softmax_cross_entropy(T.take(logits, slice(0, nA)), data.labels[anchors])
    if not use_triplet:
        return l_c, None, l_c
    if len(elig):
        ne = len(elig)
        e_a = T.take(emb, elig)
        e_p = T.take(emb, slice(nA, nA + ne))
        e_n = T.take(emb, slice(nA + ne, nA + 2 * ne))
        m = margins[data.labels[anchors[elig]], data.labels[neg]].astype(params.dtype)
        per = triplet_loss(T.cosine_distance(e_a, e_p), T.cosine_distance(e_a, e_n), Tensor(m))
        l_t = T.mean(per)
    else:
        l_t = Tensor(np.zeros((), dtype=params.dtype))
    return combined_loss(l_t, l_c, params.s1, params.s2), l_t, l_c


def train_epoch(params: ModelParams, state: OptimizerState, data: Dataset,
                triplets: dict[int, Triplet] | None, cfg: TrainConfig, epoch: int,
                train_idx, policy: MarginPolicy | None = None) -> dict:
    """One pass over the balanced anchor stream; returns mean losses and the lr used."""
    lr = epoch_lr(cfg, epoch)
    stream = balanced_sampler(train_idx, data.labels, make_rng(cfg.seed, "sampler", epoch))
    aug_rng = make_rng(cfg.seed, "augment", epoch)
    margins = margin_table(policy, data.n_classes) if (triplets is not None and policy) else None
    totals, lts, lcs = [], [], []
    for start in range(0, len(stream), cfg.batch_size):
        anchors = stream[start:start + cfg.batch_size]
        with T.Tape() as tape:
            total, l_t, l_c = batch_loss(params, data, anchors, triplets, margins, cfg, aug_rng)
        tape.backward(total)
        adam_step(params, state, lr)
        totals.append(total.item())
        lcs.append(l_c.item())
        if l_t is not None:
            lts.append(l_t.item())
    return {"lr": lr, "loss_total": float(np.mean(totals)),
            "loss_triplet": float(np.mean(lts)) if lts else None,
            "loss_ce": float(np.mean(lcs))}


def fit(cfg: TrainConfig, data: Dataset, train_idx=None, extractor: ExtractorSpec | None = None,
        params: ModelParams | None = None, callback=None) -> tuple[ModelParams, list[EpochMetrics]]:
    """Train end to end on ``train_idx`` of an already preprocessed dataset.

    Triplets are re-mined from un-augmented training-set embeddings after
    every epoch; epoch 0 uses the initial parameters.
    """
    train_idx = np.arange(len(data)) if train_idx is None else np.asarray(train_idx)
    if extractor is None:
        extractor = PrecomputedFeatures(dict(zip(data.ids, data.features))) \
            if data.images is None else TinyConvNet()
    if params is None:
        params = init_params(network_config(data, cfg), extractor, derive_seed(cfg.seed, "init"))
    params = params.astype(np.dtype(cfg.dtype))
    state = OptimizerState.for_params(params)
    policy = margin_policy(cfg, data.genetic) if cfg.use_triplet else None
    train_labels = data.labels[train_idx]
    history: list[EpochMetrics] = []

    emb, _ = embed_dataset(params, data, train_idx)
    for epoch in range(cfg.epochs):
        trip_map, stats = None, MiningStats()
        if cfg.use_triplet:
            trips, stats = mine_triplets(emb, train_labels, policy, make_rng(cfg.seed, "mine", epoch),
                                         indices=train_idx, n_classes=data.n_classes)
            trip_map = {t.anchor: t for t in trips}
        out = train_epoch(params, state, data, trip_map, cfg, epoch, train_idx, policy)
        emb, logits = embed_dataset(params, data, train_idx)
        acc = float(np.mean(predict(logits) == train_labels))
        m = EpochMetrics(epoch=epoch, lr=out["lr"], loss_total=out["loss_total"],
                         loss_triplet=out["loss_triplet"], loss_ce=out["loss_ce"],
                         s1=params.s1.item(), s2=params.s2.item(), train_acc=acc,
                         fallback_negatives=stats.fallback_negatives, margin_mean=stats.margin_mean)
        history.append(m)
        if callback is not None:
            callback(m)
        log.debug("epoch %d lr=%.6g loss=%.4f acc=%.3f", epoch, m.lr, m.loss_total, acc)
    return params, history
