"""Label-recovery probes over frozen embeddings.

Three classifiers of increasing expressivity: nearest centroid, k-nearest
neighbors (exact brute force), and a single linear layer trained with
minibatch Adam on the cross-entropy loss. Two drivers wire them into the
source-site prediction experiment and the biased tumor/normal experiment.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import DivergenceError, ParameterError, SplitError, TaskError
from .seeding import derive_seed, rng_for
from .splits import GroupedSplit, build_bias_splits, patient_split, subsample_per_site
from .table import EmbeddingTable


@dataclass
class NccModel:
    centroids: np.ndarray  # C x D, float64
    class_ids: np.ndarray  # C, ascending

    def __post_init__(self):
        if not np.isfinite(self.centroids).all():
            raise TaskError("non-finite centroid")


@dataclass
class LpConfig:
    learning_rate: float = 1e-3
    batch_size: int = 128
    epochs: int = 20
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    standardize: bool = False


@dataclass
class LinearProbe:
    weights: np.ndarray  # C x D
    bias: np.ndarray  # C
    training_log: list[tuple[float, float]]  # (train loss, val loss) per epoch
    selected_epoch: int
    class_ids: np.ndarray
    feature_mean: np.ndarray | None = None  # set when standardize=True
    feature_std: np.ndarray | None = None


@dataclass
class ProbeReport:
    accuracy: float
    confusion_matrix: np.ndarray  # C x C, rows true, cols predicted
    per_class_recall: np.ndarray
    n_test: int
    classifier: str  # "ncc" | "knn" | "lp"
    seed: int
    class_ids: np.ndarray = field(default_factory=lambda: np.empty(0, dtype=np.int64))

    def __post_init__(self):
        total = int(self.confusion_matrix.sum())
        if total != self.n_test:
            raise TaskError(f"confusion matrix sums to {total}, expected {self.n_test}")
        trace = float(np.trace(self.confusion_matrix))
        if self.n_test and abs(self.accuracy - trace / self.n_test) > 1e-12:
            raise TaskError("accuracy does not equal confusion-matrix trace / n_test")


# -- nearest centroid ---------------------------------------------------------------


def ncc_fit(x: np.ndarray, y: np.ndarray) -> NccModel:
    """Per-class feature means. Every class must have at least one row."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y)
    class_ids = np.unique(y)
    if class_ids.size == 0:
        raise TaskError("empty training set")
    centroids = np.stack([x[y == c].mean(axis=0) for c in class_ids])
    return NccModel(centroids=centroids, class_ids=class_ids)


def ncc_predict(model: NccModel, x: np.ndarray) -> np.ndarray:
    """Class of the Euclidean-nearest centroid; ties go to the lowest class index."""
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    d2 = _sq_dists(x, model.centroids)
    return model.class_ids[np.argmin(d2, axis=1)]


# -- k nearest neighbors ------------------------------------------------------------


def _sq_dists(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Squared Euclidean distances between row sets, clipped at zero."""
    d2 = (
        np.sum(a * a, axis=1)[:, None]
        - 2.0 * (a @ b.T)
        + np.sum(b * b, axis=1)[None, :]
    )
    return np.maximum(d2, 0.0)


def knn_predict(
    train_x: np.ndarray,
    train_y: np.ndarray,
    queries: np.ndarray,
    k: int = 5,
    chunk: int = 256,
) -> np.ndarray:
    """Majority vote among the k Euclidean-nearest training rows.

    Vote ties go to the tied class whose nearest member is closest to the
    query; residual ties to the lowest class index. Exact brute force;
    queries are processed in chunks to bound memory.
    """
    if k <= 0:
        raise ParameterError(f"k must be positive, got {k}")
    train_x = np.asarray(train_x, dtype=np.float64)
    train_y = np.asarray(train_y)
    if len(train_x) < k:
        raise ParameterError(f"k={k} exceeds training size {len(train_x)}")
    queries = np.atleast_2d(np.asarray(queries, dtype=np.float64))

    classes = np.unique(train_y)
    dense_y = np.searchsorted(classes, train_y)
    n_train = len(train_x)
    out = np.empty(len(queries), dtype=train_y.dtype)

    def resolve_exact(row: np.ndarray, kth: float) -> object:
        # widen to all points tied with the k-th distance, then order by
        # (distance, training index) so ties resolve deterministically
        cand = np.flatnonzero(row <= kth)
        order = np.lexsort((cand, row[cand]))
        labels = train_y[cand[order[:k]]]
        votes: dict = {}
        best_rank: dict = {}
        for rank, lab in enumerate(labels):
            votes[lab] = votes.get(lab, 0) + 1
            best_rank.setdefault(lab, rank)
        top = max(votes.values())
        tied = [c for c in votes if votes[c] == top]
        if len(tied) == 1:
            return tied[0]
        # nearest member among tied classes, then lowest class index
        return min(tied, key=lambda c: (best_rank[c], c))

    for start in range(0, len(queries), chunk):
        q = queries[start : start + chunk]
        d2 = _sq_dists(q, train_x)
        n = len(q)
        if k < n_train:
            part = np.argpartition(d2, k - 1, axis=1)[:, :k]
        else:
            part = np.tile(np.arange(n_train), (n, 1))
        cand_d2 = np.take_along_axis(d2, part, axis=1)
        order = np.argsort(cand_d2, axis=1, kind="stable")
        sorted_d2 = np.take_along_axis(cand_d2, order, axis=1)
        kth = sorted_d2[:, -1]
        # rows with any equal distance inside the top k, or tied with it at
        # the boundary, need the exact (distance, index) resolution
        ambiguous = (np.diff(sorted_d2, axis=1) == 0).any(axis=1)
        ambiguous |= (d2 <= kth[:, None]).sum(axis=1) > k
        votes = (
            dense_y[np.take_along_axis(part, order, axis=1)][:, :, None]
            == np.arange(len(classes))
        ).sum(axis=1)
        top = votes.max(axis=1)
        ambiguous |= (votes == top[:, None]).sum(axis=1) > 1
        pred = classes[np.argmax(votes, axis=1)]
        for i in np.flatnonzero(ambiguous):
            pred[i] = resolve_exact(d2[i], kth[i])
        out[start : start + n] = pred
    return out


# -- linear probe -------------------------------------------------------------------


def softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def cross_entropy(logits: np.ndarray, y: np.ndarray) -> float:
    """Mean cross-entropy of integer labels under softmax(logits)."""
    z = logits - logits.max(axis=1, keepdims=True)
    log_norm = np.log(np.exp(z).sum(axis=1))
    return float(np.mean(log_norm - z[np.arange(len(y)), y]))


def lp_loss_and_grads(
    weights: np.ndarray, bias: np.ndarray, x: np.ndarray, y: np.ndarray
) -> tuple[float, np.ndarray, np.ndarray]:
    """Cross-entropy loss with analytic gradients, averaged over the batch."""
    logits = x @ weights.T + bias
    loss = cross_entropy(logits, y)
    p = softmax(logits)
    p[np.arange(len(y)), y] -= 1.0
    p /= len(y)
    return loss, p.T @ x, p.sum(axis=0)


def lp_train(
    train_x: np.ndarray,
    train_y: np.ndarray,
    val_x: np.ndarray,
    val_y: np.ndarray,
    config: LpConfig | None = None,
    seed: int = 0,
) -> LinearProbe:
    """Train a linear softmax classifier with minibatch Adam.

    Weights start at zero (the objective is convex, so repetitions measure
    only shuffle noise), the last partial minibatch is kept, and the
    returned weights are those of the epoch with the lowest full-validation
    cross-entropy.
    """
    config = config or LpConfig()
    if config.epochs < 1:
        raise ParameterError("training needs at least one epoch")
    if config.batch_size < 1:
        raise ParameterError("batch size must be positive")
    train_x = np.asarray(train_x, dtype=np.float64)
    val_x = np.asarray(val_x, dtype=np.float64)
    train_y = np.asarray(train_y)
    val_y = np.asarray(val_y)
    if len(train_x) == 0 or len(val_x) == 0:
        raise TaskError("train and validation sets must be non-empty")

    class_ids = np.unique(np.concatenate([train_y, val_y]))
    n_classes = class_ids.size
    if n_classes < 2:
        raise TaskError(f"need at least 2 classes, got {n_classes}")
    remap = {c: i for i, c in enumerate(class_ids)}
    ty = np.array([remap[c] for c in train_y])
    vy = np.array([remap[c] for c in val_y])

    mean = std = None
    if config.standardize:
        mean = train_x.mean(axis=0)
        std = train_x.std(axis=0)
        std[std < 1e-12] = 1.0
        train_x = (train_x - mean) / std
        val_x = (val_x - mean) / std

    d = train_x.shape[1]
    w = np.zeros((n_classes, d))
    b = np.zeros(n_classes)
    m_w = np.zeros_like(w)
    v_w = np.zeros_like(w)
    m_b = np.zeros_like(b)
    v_b = np.zeros_like(b)

    rng = rng_for(seed, "lp-shuffle")
    step = 0
    log: list[tuple[float, float]] = []
    best = None
    for epoch in range(config.epochs):
        order = rng.permutation(len(train_x))
        seen = 0
        loss_sum = 0.0
        for bstart in range(0, len(order), config.batch_size):
            batch = order[bstart : bstart + config.batch_size]
            loss, g_w, g_b = lp_loss_and_grads(w, b, train_x[batch], ty[batch])
            if not np.isfinite(loss):
                raise DivergenceError(
                    f"non-finite loss at epoch {epoch}, batch {bstart // config.batch_size}",
                    epoch=epoch,
                    batch=bstart // config.batch_size,
                )
            loss_sum += loss * len(batch)
            seen += len(batch)
            step += 1
            for g, mm, vv, param in ((g_w, m_w, v_w, w), (g_b, m_b, v_b, b)):
                mm *= config.beta1
                mm += (1 - config.beta1) * g
                vv *= config.beta2
                vv += (1 - config.beta2) * g * g
                m_hat = mm / (1 - config.beta1**step)
                v_hat = vv / (1 - config.beta2**step)
                param -= config.learning_rate * m_hat / (np.sqrt(v_hat) + config.eps)
        val_loss = cross_entropy(val_x @ w.T + b, vy)
        if not np.isfinite(val_loss):
            raise DivergenceError(f"non-finite validation loss at epoch {epoch}", epoch=epoch)
        log.append((loss_sum / seen, val_loss))
        if best is None or val_loss < best[0]:
            best = (val_loss, epoch, w.copy(), b.copy())

    _, best_epoch, best_w, best_b = best
    return LinearProbe(
        weights=best_w,
        bias=best_b,
        training_log=log,
        selected_epoch=best_epoch,
        class_ids=class_ids,
        feature_mean=mean,
        feature_std=std,
    )


def lp_logits(probe: LinearProbe, x: np.ndarray) -> np.ndarray:
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    if x.shape[1] != probe.weights.shape[1]:
        raise ParameterError(
            f"feature dimension {x.shape[1]} does not match probe ({probe.weights.shape[1]})"
        )
    if probe.feature_mean is not None:
        x = (x - probe.feature_mean) / probe.feature_std
    return x @ probe.weights.T + probe.bias


def lp_predict(probe: LinearProbe, x: np.ndarray) -> np.ndarray:
    """Argmax of the logits; ties go to the lowest class index."""
    return probe.class_ids[np.argmax(lp_logits(probe, x), axis=1)]


# -- evaluation ---------------------------------------------------------------------


def evaluate_predictions(
    y_true: np.ndarray, y_pred: np.ndarray, class_ids: np.ndarray, classifier: str, seed: int
) -> ProbeReport:
    class_ids = np.asarray(class_ids)
    index = {c: i for i, c in enumerate(class_ids)}
    n = len(y_true)
    cm = np.zeros((class_ids.size, class_ids.size), dtype=np.int64)
    for t, p in zip(y_true, y_pred):
        cm[index[t], index[p]] += 1
    row_sums = cm.sum(axis=1)
    with np.errstate(invalid="ignore", divide="ignore"):
        recall = np.where(row_sums > 0, np.diag(cm) / np.maximum(row_sums, 1), np.nan)
    acc = float(np.trace(cm)) / n if n else 0.0
    return ProbeReport(
        accuracy=acc,
        confusion_matrix=cm,
        per_class_recall=recall,
        n_test=n,
        classifier=classifier,
        seed=seed,
        class_ids=class_ids,
    )


def run_site_prediction(
    table: EmbeddingTable,
    seed: int = 0,
    budget_per_site: int = 50_000,
    fractions: tuple[float, float, float] = (0.6, 0.1, 0.3),
    k: int = 5,
    lp_config: LpConfig | None = None,
) -> dict[str, ProbeReport]:
    """Source-site prediction with NCC, KNN and LP on one patient-level split.

    Subsamples the per-site budget over slides, splits at patient level,
    fits on train (LP validated on val) and reports accuracy on test.
    """
    rows = subsample_per_site(table, budget_per_site, seed=derive_seed(seed, "subsample"))
    split = patient_split(table, fractions, seed=derive_seed(seed, "split"), rows=rows)
    return run_probes_on_split(table, split, seed=seed, k=k, lp_config=lp_config)


def run_probes_on_split(
    table: EmbeddingTable,
    split: GroupedSplit,
    seed: int = 0,
    k: int = 5,
    lp_config: LpConfig | None = None,
    label_column: str = "site",
) -> dict[str, ProbeReport]:
    labels = table.sites if label_column == "site" else table.classes
    x = table.features.astype(np.float64)
    tx, ty = x[split.train_idx], labels[split.train_idx]
    vx, vy = x[split.val_idx], labels[split.val_idx]
    sx, sy = x[split.test_idx], labels[split.test_idx]
    if len(sx) == 0 or len(tx) == 0:
        raise SplitError("site prediction needs non-empty train and test subsets")
    class_ids = np.unique(labels[np.concatenate([split.train_idx, split.val_idx, split.test_idx])])

    reports: dict[str, ProbeReport] = {}
    ncc = ncc_fit(tx, ty)
    reports["ncc"] = evaluate_predictions(sy, ncc_predict(ncc, sx), class_ids, "ncc", seed)
    reports["knn"] = evaluate_predictions(
        sy, knn_predict(tx, ty, sx, k=k), class_ids, "knn", seed
    )
    probe = lp_train(tx, ty, vx, vy, config=lp_config, seed=derive_seed(seed, "lp"))
    reports["lp"] = evaluate_predictions(sy, lp_predict(probe, sx), class_ids, "lp", seed)
    return reports


@dataclass
class BiasRunResult:
    ratio_label: str
    accuracies: list[float]
    mean_accuracy: float
    std_accuracy: float
    train_counts: dict
    val_counts: dict
    test_counts: dict


def run_bias_experiment(
    table: EmbeddingTable,
    repetitions: int = 5,
    seed: int = 0,
    lp_config: LpConfig | None = None,
) -> list[BiasRunResult]:
    """Tumor/normal LP accuracy under the four biased training compositions.

    Each composition is trained ``repetitions`` times on identical splits
    with derived seeds (base + repetition index); the report carries the
    mean and standard deviation of test accuracy per composition.
    """
    if repetitions < 1:
        raise ParameterError("repetitions must be >= 1")
    splits = build_bias_splits(table, seed=seed)
    x = table.features.astype(np.float64)
    y = table.classes
    results = []
    for spec, split in splits:
        tx, ty = x[split.train_idx], y[split.train_idx]
        vx, vy = x[split.val_idx], y[split.val_idx]
        sx, sy = x[split.test_idx], y[split.test_idx]
        accs = []
        for rep in range(repetitions):
            probe = lp_train(tx, ty, vx, vy, config=lp_config, seed=seed + rep)
            pred = lp_predict(probe, sx)
            accs.append(float(np.mean(pred == sy)))
        results.append(
            BiasRunResult(
                ratio_label=spec.ratio_label,
                accuracies=accs,
                mean_accuracy=float(np.mean(accs)),
                std_accuracy=float(np.std(accs)),
                train_counts=spec.train_counts,
                val_counts=spec.val_counts,
                test_counts=spec.test_counts,
            )
        )
    return results
