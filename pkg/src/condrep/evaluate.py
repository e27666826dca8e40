"""N-way-K-shot meta-testing: episode sampling, the five K-shot inference
strategies, the online linear classifier, and evaluation reports.

Inference is inductive: every query is classified from its own pairings
with the supports only. The implementation batches all (query, support)
pairs of an episode through the pair pipeline for speed, which cannot mix
information between queries because every per-pair computation is
independent of the other pairs in the batch.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .autodiff import Tensor, no_grad
from .backbone import pooled_feature
from .data import SyntheticDataset
from .exceptions import ConfigError, DataError, StateError
from .model import Model
from .rerepresent import re_represent_pair

STRATEGIES = ("individual_similarity", "class_similarity", "classifier",
              "raw_query", "weighted_query")
BASELINE = "backbone_prototype_baseline"   # raw pooled features, no conditional path


@dataclass
class EpisodeTask:
    n_way: int
    k_shot: int
    q_per_class: int
    support_images: np.ndarray    # (N*K, 1, H, W), class-major order
    support_labels: np.ndarray    # (N*K,) values in 0..N-1
    query_images: np.ndarray      # (N*Q, 1, H, W)
    query_labels: np.ndarray      # (N*Q,) held-out truth
    class_ids: np.ndarray         # (N,) dataset class ids, ascending


@dataclass
class EvalReport:
    strategy: str
    n_episodes: int
    per_episode_accuracy: list[float]
    mean: float
    ci95: float
    config: dict = field(default_factory=dict)

    @classmethod
    def from_accuracies(cls, strategy, accs, config=None) -> "EvalReport":
        accs = [float(a) for a in accs]
        n = len(accs)
        mean = float(np.mean(accs)) if n else 0.0
        ci = float(1.96 * np.std(accs, ddof=1) / np.sqrt(n)) if n > 1 else 0.0
        return cls(strategy=strategy, n_episodes=n, per_episode_accuracy=accs,
                   mean=mean, ci95=ci, config=dict(config or {}))


def sample_episode(dataset: SyntheticDataset, n_way: int, k_shot: int,
                   q_per_class: int, seed) -> EpisodeTask:
    """Uniform class/sample selection without replacement; supports come from
    the easy pool and queries from the hard pool."""
    rng = seed if isinstance(seed, np.random.Generator) \
        else np.random.default_rng(np.random.SeedSequence([0x657, int(seed)]))
    sup_by_class = dataset.by_class("support")
    qry_by_class = dataset.by_class("query")
    classes = sorted(set(sup_by_class) & set(qry_by_class))
    if len(classes) < n_way:
        raise DataError(f"sample_episode: need {n_way} classes, dataset has {len(classes)}")
    chosen = np.sort(rng.choice(classes, size=n_way, replace=False))
    sup_imgs, sup_labels, qry_imgs, qry_labels = [], [], [], []
    for local, c in enumerate(chosen):
        pool_s, pool_q = sup_by_class[c], qry_by_class[c]
        if len(pool_s) < k_shot:
            raise DataError(f"sample_episode: class {c} has {len(pool_s)} support "
                            f"samples, needs {k_shot}")
        if len(pool_q) < q_per_class:
            raise DataError(f"sample_episode: class {c} has {len(pool_q)} query "
                            f"samples, needs {q_per_class}")
        for i in rng.choice(len(pool_s), size=k_shot, replace=False):
            sup_imgs.append(pool_s[i].image)
            sup_labels.append(local)
        for i in rng.choice(len(pool_q), size=q_per_class, replace=False):
            qry_imgs.append(pool_q[i].image)
            qry_labels.append(local)
    return EpisodeTask(n_way=n_way, k_shot=k_shot, q_per_class=q_per_class,
                       support_images=np.stack(sup_imgs),
                       support_labels=np.array(sup_labels),
                       query_images=np.stack(qry_imgs),
                       query_labels=np.array(qry_labels),
                       class_ids=np.asarray(chosen))


# ---------------------------------------------------------------------------
# online linear classifier
# ---------------------------------------------------------------------------

class LinearClassifier:
    """Multinomial logistic regression, full-batch gradient descent from a
    zero init. ``predict`` before ``fit`` is an error."""

    def __init__(self, n_classes: int, epochs: int = 100, lr: float = 0.1):
        self.n_classes = n_classes
        self.epochs = epochs
        self.lr = lr
        self.weights = None
        self.bias = None

    def fit(self, features: np.ndarray, labels: np.ndarray) -> "LinearClassifier":
        x = np.asarray(features, dtype=np.float64)
        y = np.asarray(labels)
        present = np.unique(y)
        missing = sorted(set(range(self.n_classes)) - set(present.tolist()))
        if missing:
            raise DataError(f"linear classifier: no training features for classes {missing}")
        w, b = _fit_logistic(x[None], y, self.n_classes, self.epochs, self.lr)
        self.weights, self.bias = w[0], b[0]
        return self

    def predict(self, features: np.ndarray) -> np.ndarray:
        if self.weights is None:
            raise StateError("linear classifier: predict called before fit")
        logits = np.atleast_2d(np.asarray(features, dtype=np.float64)) @ self.weights + self.bias
        return logits.argmax(axis=-1)

    def predict_proba(self, features: np.ndarray) -> np.ndarray:
        if self.weights is None:
            raise StateError("linear classifier: predict called before fit")
        logits = np.atleast_2d(np.asarray(features, dtype=np.float64)) @ self.weights + self.bias
        return _softmax(logits)


def online_linear_fit(features, labels, n_classes: int, epochs: int = 100,
                      lr: float = 0.1) -> LinearClassifier:
    """Fit the online classifier on (vector, label) pairs."""
    return LinearClassifier(n_classes, epochs=epochs, lr=lr).fit(
        np.asarray(features, dtype=np.float64), np.asarray(labels))


def _softmax(z: np.ndarray) -> np.ndarray:
    e = np.exp(z - z.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


def _fit_logistic(x: np.ndarray, labels: np.ndarray, n_classes: int,
                  epochs: int, lr: float):
    """Batched fit: x is (B, n, C) with one shared label vector; returns
    weights (B, C, n_classes) and bias (B, 1, n_classes)."""
    b, n, c = x.shape
    onehot = np.zeros((n, n_classes))
    onehot[np.arange(n), labels] = 1.0
    w = np.zeros((b, c, n_classes))
    bias = np.zeros((b, 1, n_classes))
    xt = x.swapaxes(1, 2)
    for _ in range(epochs):
        p = _softmax(x @ w + bias)
        g = (p - onehot) / n
        w -= lr * (xt @ g)
        bias -= lr * g.sum(axis=1, keepdims=True)
    return w, bias


# ---------------------------------------------------------------------------
# strategy scoring (separated from feature extraction so the decision rules
# can be tested on constructed embeddings)
# ---------------------------------------------------------------------------

def strategy_predictions(strategy: str, *, n_way: int, k_shot: int,
                         pair_dist: np.ndarray, proto_dist: np.ndarray,
                         support_vectors: np.ndarray, query_vectors: np.ndarray,
                         pooled_queries: np.ndarray) -> np.ndarray:
    """Decision rule of one inference strategy.

    pair_dist       (NQ, N*K) squared distances of each query's re-represented
                    pairs, support axis in class-major order
    proto_dist      (NQ, N) distances of the class-prototype pairings
    support_vectors (NQ, N*K, C) re-represented supports, conditioned per query
    query_vectors   (NQ, N*K, C) re-represented query vectors per pairing
    pooled_queries  (NQ, C) plain backbone-pooled query features

    Ties break toward the lowest class index (argmax keeps the first max).
    """
    if strategy not in STRATEGIES:
        raise ConfigError(f"classify_query: unknown strategy '{strategy}'")
    nq = pair_dist.shape[0]
    if strategy == "individual_similarity":
        scores = -pair_dist.reshape(nq, n_way, k_shot).sum(axis=2)
        return scores.argmax(axis=1)
    if strategy == "class_similarity":
        return (-proto_dist).argmax(axis=1)
    support_labels = np.repeat(np.arange(n_way), k_shot)
    w, b = _fit_logistic(support_vectors, support_labels, n_way, epochs=100, lr=0.1)
    if strategy == "classifier":
        target = query_vectors.mean(axis=1)
    elif strategy == "raw_query":
        target = pooled_queries
    else:  # weighted_query
        class_weights = _softmax(-proto_dist)                       # (NQ, N)
        class_means = query_vectors.reshape(nq, n_way, k_shot, -1).mean(axis=2)
        target = (class_weights[:, :, None] * class_means).sum(axis=1)
    logits = (target[:, None, :] @ w)[:, 0, :] + b[:, 0, :]
    return logits.argmax(axis=1)


# ---------------------------------------------------------------------------
# episode-level classification
# ---------------------------------------------------------------------------

def _pair_vectors(model: Model, own: np.ndarray, other: np.ndarray):
    with no_grad():
        f_own, f_other = re_represent_pair(Tensor(own), Tensor(other), model)
    return f_own.data, f_other.data


def _baseline_distances(task: EpisodeTask, model: Model) -> np.ndarray:
    """Raw backbone path only: pooled query features vs pooled class prototypes."""
    with no_grad():
        pooled_s = pooled_feature(model.features(task.support_images)).data
        pooled_q = pooled_feature(model.features(task.query_images)).data
    pooled_protos = pooled_s.reshape(task.n_way, task.k_shot, -1).mean(axis=1)
    return ((pooled_q[:, None, :] - pooled_protos[None, :, :]) ** 2).sum(axis=-1)


def episode_features(task: EpisodeTask, model: Model) -> dict:
    """All per-episode quantities the strategies consume."""
    nk = task.n_way * task.k_shot
    nq = len(task.query_images)
    with no_grad():
        sup_maps = model.features(task.support_images).data     # (NK, W, H, C)
        qry_maps = model.features(task.query_images).data       # (NQ, W, H, C)
        pooled_q = pooled_feature(Tensor(qry_maps)).data
        pooled_s = pooled_feature(Tensor(sup_maps)).data
    protos = sup_maps.reshape(task.n_way, task.k_shot, *sup_maps.shape[1:]).mean(axis=1)

    s_idx = np.tile(np.arange(nk), nq)
    q_idx = np.repeat(np.arange(nq), nk)
    sup_vec, qry_vec = _pair_vectors(model, sup_maps[s_idx], qry_maps[q_idx])
    c = sup_vec.shape[-1]
    support_vectors = sup_vec.reshape(nq, nk, c)
    query_vectors = qry_vec.reshape(nq, nk, c)
    pair_dist = ((support_vectors - query_vectors) ** 2).sum(axis=-1)

    p_idx = np.tile(np.arange(task.n_way), nq)
    pq_idx = np.repeat(np.arange(nq), task.n_way)
    proto_vec, proto_qvec = _pair_vectors(model, protos[p_idx], qry_maps[pq_idx])
    proto_dist = ((proto_vec - proto_qvec) ** 2).sum(axis=-1).reshape(nq, task.n_way)

    pooled_protos = pooled_s.reshape(task.n_way, task.k_shot, -1).mean(axis=1)
    baseline_dist = ((pooled_q[:, None, :] - pooled_protos[None, :, :]) ** 2).sum(axis=-1)
    return {
        "pair_dist": pair_dist, "proto_dist": proto_dist,
        "support_vectors": support_vectors, "query_vectors": query_vectors,
        "pooled_queries": pooled_q, "baseline_dist": baseline_dist,
    }


def classify_query(task: EpisodeTask, model: Model, strategy: str,
                   features: dict | None = None) -> np.ndarray:
    """Predicted local labels for every query of the episode."""
    if strategy == BASELINE:
        dist = features["baseline_dist"] if features else _baseline_distances(task, model)
        return (-dist).argmax(axis=1)
    if strategy not in STRATEGIES:
        raise ConfigError(f"classify_query: unknown strategy '{strategy}'")
    feats = features or episode_features(task, model)
    return strategy_predictions(
        strategy, n_way=task.n_way, k_shot=task.k_shot,
        pair_dist=feats["pair_dist"], proto_dist=feats["proto_dist"],
        support_vectors=feats["support_vectors"], query_vectors=feats["query_vectors"],
        pooled_queries=feats["pooled_queries"])


# ---------------------------------------------------------------------------
# evaluation runs
# ---------------------------------------------------------------------------

def run_evaluation_suite(dataset: SyntheticDataset, model: Model, *, n_way: int = 5,
                         k_shot: int = 1, q_per_class: int = 15, n_episodes: int = 600,
                         strategies=("weighted_query",), seed: int = 0,
                         baseline_model: Model | None = None) -> dict[str, EvalReport]:
    """Evaluate several strategies over the SAME episodes for paired
    comparison. ``baseline_model`` adds a raw backbone-prototype report
    computed with that (typically untrained) model's features."""
    strategies = list(strategies)
    for s in strategies:
        if s not in STRATEGIES:
            raise ConfigError(f"run_evaluation: unknown strategy '{s}'")
    accs: dict[str, list[float]] = {s: [] for s in strategies}
    if baseline_model is not None:
        accs[BASELINE] = []
    for ep in range(n_episodes):
        rng = np.random.default_rng(np.random.SeedSequence([0x657, seed, ep]))
        task = sample_episode(dataset, n_way, k_shot, q_per_class, rng)
        feats = episode_features(task, model) if strategies else None
        for s in strategies:
            preds = classify_query(task, model, s, features=feats)
            accs[s].append(float(np.mean(preds == task.query_labels)))
        if baseline_model is not None:
            preds = classify_query(task, baseline_model, BASELINE)
            accs[BASELINE].append(float(np.mean(preds == task.query_labels)))
    cfg = {"n_way": n_way, "k_shot": k_shot, "q_per_class": q_per_class,
           "n_episodes": n_episodes, "seed": seed, "structure": model.structure}
    return {s: EvalReport.from_accuracies(s, a, cfg) for s, a in accs.items()}


def run_evaluation(dataset: SyntheticDataset, model: Model, *, n_way: int = 5,
                   k_shot: int = 1, q_per_class: int = 15, n_episodes: int = 600,
                   strategy: str = "weighted_query", seed: int = 0) -> EvalReport:
    reports = run_evaluation_suite(dataset, model, n_way=n_way, k_shot=k_shot,
                                   q_per_class=q_per_class, n_episodes=n_episodes,
                                   strategies=[strategy], seed=seed)
    return reports[strategy]
