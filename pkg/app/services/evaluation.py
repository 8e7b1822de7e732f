# app/services/evaluation.py
"""
Linear-probe evaluation: stratified k-fold CV, linear SVM with inner-split C
selection, classification metrics, AUC, and Pearson feature correlation.
"""
import logging
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
from sklearn.metrics import balanced_accuracy_score, confusion_matrix, roc_auc_score
from sklearn.model_selection import StratifiedKFold
from sklearn.preprocessing import StandardScaler

from app.errors import ClassTooSmallError, DataError, ShapeError
from app.schemas import FeatureSet, FoldMetrics, MetricsReport
from app.services import seeding
from app.services.radiomics import SSL_PREFIX
from app.services.tensor_core import Array

logger = logging.getLogger(__name__)

C_GRID = (0.01, 0.1, 1.0, 10.0, 100.0)
SVM_ITERATIONS = 2000
INNER_FRACTION = 0.2
PEARSON_BINS = 40


# -------------------------------
# folds
# -------------------------------
@dataclass
class FoldPlan:
    folds: int
    seed: int
    train: List[Array]
    test: List[Array]
    inner_val: List[Array]
    inner_train: List[Array]


def stratified_holdout(indices: Array, labels: Array, fraction: float,
                       rng: np.random.Generator) -> Tuple[Array, Array]:
    """Per-class split of `indices` into (kept, held out); a class of >= 2 members
    always keeps at least one on each side."""
    kept, held = [], []
    for c in np.unique(labels[indices]):
        members = indices[labels[indices] == c]
        members = members[rng.permutation(len(members))]
        n_held = int(round(fraction * len(members)))
        if len(members) >= 2:
            n_held = min(max(n_held, 1), len(members) - 1)
        else:
            n_held = 0
        held.append(members[:n_held])
        kept.append(members[n_held:])
    return np.sort(np.concatenate(kept)), np.sort(np.concatenate(held))


def stratified_kfold(labels: Sequence[int], folds: int = 5, seed: int = 0,
                     class_names: Optional[Dict[int, str]] = None) -> FoldPlan:
    labels = np.asarray(labels)
    if folds < 2:
        raise DataError(f"need at least 2 folds, got {folds}")
    for c in np.unique(labels):
        size = int(np.sum(labels == c))
        if size < folds:
            name = class_names.get(int(c), c) if class_names else c
            raise ClassTooSmallError(name, size, folds)

    splitter = StratifiedKFold(n_splits=folds, shuffle=True, random_state=seeding.int_seed(seed, "folds", 0))
    train, test, inner_val, inner_train = [], [], [], []
    for f, (tr, te) in enumerate(splitter.split(np.zeros((len(labels), 1)), labels)):
        train.append(tr)
        test.append(te)
        kept, held = stratified_holdout(tr, labels, INNER_FRACTION, seeding.rng(seed, "folds", 1, f))
        inner_train.append(kept)
        inner_val.append(held)
    return FoldPlan(folds, seed, train, test, inner_val, inner_train)


def label_budget_subsample(indices: Array, labels: Array, budget: float,
                           rng: np.random.Generator) -> Array:
    """Keep round(budget * n_c) (at least 1) training labels per class."""
    if not 0.0 < budget <= 1.0:
        raise DataError(f"label budget {budget} outside (0, 1]")
    if budget == 1.0:
        return indices
    keep = []
    for c in np.unique(labels[indices]):
        members = indices[labels[indices] == c]
        n = max(1, int(round(budget * len(members))))
        keep.append(np.sort(members[rng.permutation(len(members))[:n]]))
    return np.sort(np.concatenate(keep))


# -------------------------------
# linear SVM
# -------------------------------
@dataclass
class LinearSVM:
    classes: Array
    weights: Array  # one row per one-vs-rest problem (a single row when binary)
    biases: Array
    C: float
    objectives: List[float] = field(default_factory=list)

    def decision_function(self, X: Array) -> Array:
        """N x K scores, one column per class."""
        raw = X @ self.weights.T + self.biases
        if len(self.classes) == 2:
            return np.column_stack([-raw[:, 0], raw[:, 0]])
        return raw

    def predict(self, X: Array) -> Array:
        # argmax takes the lowest class index on ties
        return self.classes[np.argmax(self.decision_function(X), axis=1)]


def svm_objective(w: Array, b: float, X: Array, y: Array, C: float) -> float:
    """1/2 |w|^2 + C * sum(hinge); the bias is not regularized."""
    margins = y * (X @ w + b)
    return float(0.5 * (w @ w) + C * np.maximum(0.0, 1.0 - margins).sum())


def best_bias(scores: Array, y: Array) -> float:
    """Exact minimizer over b of sum(max(0, 1 - y (s + b))) for fixed scores s.

    The hinge sum is piecewise linear in b with kinks at y_i - s_i; the smallest
    kink whose right slope is non-negative is returned.
    """
    pos = np.sort(1.0 - scores[y > 0])
    neg = np.sort(-1.0 - scores[y < 0])
    kinks = np.sort(np.concatenate([pos, neg]))
    slope = np.searchsorted(neg, kinks, side="right") - (len(pos) - np.searchsorted(pos, kinks, side="right"))
    return float(kinks[np.argmax(slope >= 0)])


def _fit_binary(X: Array, y: Array, C: float, iterations: int) -> Tuple[Array, float, float]:
    """Projected subgradient on w (Pegasos schedule), exact bias per iterate, best iterate kept."""
    n, d = X.shape
    lam = 1.0 / (C * n)
    # lam/2 |w*|^2 <= F(0, 0) = 1 bounds the optimum
    radius = np.sqrt(2.0 / lam)
    w, b = np.zeros(d), 0.0
    best_w, best_b, best_obj = w.copy(), b, svm_objective(w, b, X, y, C)
    for t in range(1, iterations + 1):
        eta = 1.0 / (lam * t)
        active = y * (X @ w + b) < 1.0
        grad = lam * w - (y[active, None] * X[active]).sum(axis=0) / n
        w = w - eta * grad
        norm = np.linalg.norm(w)
        if norm > radius:
            w *= radius / norm
        b = best_bias(X @ w, y)
        obj = svm_objective(w, b, X, y, C)
        if obj < best_obj:
            best_w, best_b, best_obj = w.copy(), b, obj
    return best_w, best_b, best_obj


def train_linear_svm(X: Array, y: Array, C: float = 1.0, iterations: int = SVM_ITERATIONS) -> LinearSVM:
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y)
    if X.ndim != 2 or len(X) != len(y):
        raise ShapeError(f"X {X.shape} and y {y.shape} are not aligned")
    classes = np.unique(y)
    if len(classes) < 2:
        raise DataError(f"training set has a single class {classes.tolist()}")
    problems = [classes[1]] if len(classes) == 2 else list(classes)
    ws, bs, objs = [], [], []
    for positive in problems:
        ys = np.where(y == positive, 1.0, -1.0)
        w, b, obj = _fit_binary(X, ys, C, iterations)
        ws.append(w)
        bs.append(b)
        objs.append(obj)
    return LinearSVM(classes, np.vstack(ws), np.asarray(bs), C, objs)


# -------------------------------
# metrics
# -------------------------------
def roc_auc(scores: Array, positive: Array) -> float:
    """Rank statistic; tied scores count half."""
    positive = np.asarray(positive, dtype=bool)
    if positive.all() or not positive.any():
        raise DataError("AUC undefined: truth contains a single class")
    return float(roc_auc_score(positive, scores))


@dataclass
class Metrics:
    confusion: Array
    overall_accuracy: float
    balanced_accuracy: float
    minor_class_accuracy: float
    auc: float
    sensitivity: Optional[float] = None
    specificity: Optional[float] = None


def _recall(cm: Array, i: int) -> float:
    support = cm[i].sum()
    return float(cm[i, i] / support) if support else 0.0


def compute_metrics(scores: Array, predictions: Array, truth: Array, classes: Sequence[int],
                    minor_class: int, positive_class: Optional[int] = None) -> Metrics:
    """`scores` is N x K (one column per entry of `classes`)."""
    truth = np.asarray(truth)
    predictions = np.asarray(predictions)
    scores = np.asarray(scores, dtype=np.float64)
    if not (len(truth) == len(predictions) == len(scores)):
        raise ShapeError("scores, predictions and truth are not aligned")
    classes = list(classes)
    cm = confusion_matrix(truth, predictions, labels=classes)
    if len(classes) == 2:
        pos = classes.index(classes[1] if positive_class is None else positive_class)
        auc = roc_auc(scores[:, pos], truth == classes[pos])
        sens, spec = _recall(cm, pos), _recall(cm, 1 - pos)
    else:
        auc = float(np.mean([roc_auc(scores[:, i], truth == c) for i, c in enumerate(classes)]))
        sens = spec = None
    return Metrics(
        confusion=cm,
        overall_accuracy=float(np.trace(cm) / cm.sum()),
        balanced_accuracy=float(balanced_accuracy_score(truth, predictions)),
        minor_class_accuracy=_recall(cm, classes.index(minor_class)),
        auc=auc,
        sensitivity=sens,
        specificity=spec,
    )


# -------------------------------
# Pearson analysis
# -------------------------------
@dataclass
class PearsonResult:
    matrix: Array
    names: List[str]
    dropped: List[str]
    histogram: pd.DataFrame


def coefficient_histogram(matrix: Array, bins: int = PEARSON_BINS) -> pd.DataFrame:
    upper = matrix[np.triu_indices(len(matrix), k=1)]
    counts, edges = np.histogram(upper, bins=bins, range=(-1.0, 1.0))
    density, _ = np.histogram(upper, bins=bins, range=(-1.0, 1.0), density=bool(len(upper)))
    return pd.DataFrame({"bin_left": edges[:-1], "bin_right": edges[1:],
                         "count": counts, "density": density if len(upper) else np.zeros(bins)})


def pearson_matrix(features: Array, names: Optional[Sequence[str]] = None,
                   bins: int = PEARSON_BINS) -> PearsonResult:
    X = np.asarray(features, dtype=np.float64)
    if X.ndim != 2 or X.shape[0] < 2:
        raise ShapeError(f"Pearson analysis needs N >= 2 rows, got shape {X.shape}")
    names = list(names) if names is not None else [f"f{i}" for i in range(X.shape[1])]
    constant = np.ptp(X, axis=0) == 0
    dropped = [n for n, c in zip(names, constant) if c]
    if dropped:
        logger.warning("[pearson] dropped %d constant columns: %s", len(dropped), dropped[:5])
    X = X[:, ~constant]
    kept = [n for n, c in zip(names, constant) if not c]
    if X.shape[1] == 0:
        r = np.zeros((0, 0))
    else:
        r = np.atleast_2d(np.corrcoef(X, rowvar=False))
        r = np.clip((r + r.T) / 2.0, -1.0, 1.0)
        np.fill_diagonal(r, 1.0)
    return PearsonResult(r, kept, dropped, coefficient_histogram(r, bins))


# -------------------------------
# protocol
# -------------------------------
def feature_columns(frame: pd.DataFrame, feature_set: FeatureSet) -> List[str]:
    cols = [c for c in frame.columns if c not in ("id", "label")]
    ssl = [c for c in cols if c.startswith(SSL_PREFIX)]
    trad = [c for c in cols if not c.startswith(SSL_PREFIX)]
    chosen = {"trad": trad, "ssl": ssl, "concat": trad + ssl}[feature_set]
    if not chosen:
        raise ShapeError(f"feature table has no columns for feature set {feature_set!r}")
    return chosen


def fit_fold(X: Array, y: Array, train_idx: Array, C: float,
             iterations: int = SVM_ITERATIONS) -> Tuple[StandardScaler, LinearSVM]:
    """Scaler and SVM fitted on the training rows only."""
    scaler = StandardScaler().fit(X[train_idx])
    return scaler, train_linear_svm(scaler.transform(X[train_idx]), y[train_idx], C, iterations)


def select_c(X: Array, y: Array, inner_train: Array, inner_val: Array,
             grid: Sequence[float] = C_GRID, iterations: int = SVM_ITERATIONS) -> float:
    """C with the best balanced accuracy on the inner split; the smallest C wins ties."""
    best_c, best_score = grid[0], -1.0
    for C in grid:
        scaler, model = fit_fold(X, y, inner_train, C, iterations)
        score = balanced_accuracy_score(y[inner_val], model.predict(scaler.transform(X[inner_val])))
        if score > best_score:
            best_c, best_score = C, score
    return float(best_c)


def _counts(labels: Array, names: Dict[int, str]) -> Dict[str, int]:
    return {names[c]: int(np.sum(labels == c)) for c in sorted(names)}


def run_protocol(frame: pd.DataFrame, feature_set: FeatureSet = "concat", folds: int = 5,
                 label_budget: float = 1.0, seed: int = 0, minor_class: Optional[int] = None,
                 positive_class: Optional[int] = None, class_names: Optional[Dict[int, str]] = None,
                 grid: Sequence[float] = C_GRID, iterations: int = SVM_ITERATIONS) -> MetricsReport:
    cols = feature_columns(frame, feature_set)
    X = frame[cols].to_numpy(dtype=np.float64)
    y = frame["label"].to_numpy(dtype=np.int64)
    classes = [int(c) for c in np.unique(y)]
    names = {c: (class_names or {}).get(c, str(c)) for c in classes}
    counts = {c: int(np.sum(y == c)) for c in classes}
    if minor_class is None:
        minor_class = min(classes, key=lambda c: (counts[c], c))
    if minor_class not in classes:
        raise DataError(f"minor class {minor_class} not among labels {classes}")
    if len(classes) == 2 and positive_class is None:
        positive_class = max(classes, key=lambda c: (counts[c], -c))

    plan = stratified_kfold(y, folds, seed, names)
    per_fold: List[FoldMetrics] = []
    for f in range(folds):
        train = label_budget_subsample(plan.train[f], y, label_budget, seeding.rng(seed, "folds", 2, f))
        inner_train, inner_val = stratified_holdout(train, y, INNER_FRACTION, seeding.rng(seed, "folds", 3, f))
        C = select_c(X, y, inner_train, inner_val, grid, iterations)
        scaler, model = fit_fold(X, y, train, C, iterations)
        test = plan.test[f]
        Xt = scaler.transform(X[test])
        m = compute_metrics(model.decision_function(Xt), model.predict(Xt), y[test], classes,
                            minor_class, positive_class)
        per_fold.append(FoldMetrics(
            fold=f, chosen_c=C, train_counts=_counts(y[train], names), test_counts=_counts(y[test], names),
            confusion=m.confusion.tolist(), overall_accuracy=m.overall_accuracy,
            balanced_accuracy=m.balanced_accuracy, minor_class_accuracy=m.minor_class_accuracy,
            sensitivity=m.sensitivity, specificity=m.specificity, auc=m.auc))
        logger.info("[evaluate] fold=%d C=%g acc=%.3f minor=%.3f auc=%.3f",
                    f, C, m.overall_accuracy, m.minor_class_accuracy, m.auc)

    def mean(attr: str) -> Optional[float]:
        vals = [getattr(fm, attr) for fm in per_fold]
        return None if vals[0] is None else float(np.mean(vals))

    return MetricsReport(
        feature_set=feature_set, n_features=len(cols), classes=[names[c] for c in classes],
        positive_class=names[positive_class] if positive_class is not None else None,
        minor_class=names[minor_class], folds=folds, label_budget=label_budget, seed=seed,
        per_fold=per_fold, overall_accuracy=mean("overall_accuracy"),
        balanced_accuracy=mean("balanced_accuracy"), minor_class_accuracy=mean("minor_class_accuracy"),
        sensitivity=mean("sensitivity"), specificity=mean("specificity"), auc=mean("auc"))


def report_frame(report: MetricsReport) -> pd.DataFrame:
    cols = ["overall_accuracy", "balanced_accuracy", "minor_class_accuracy", "sensitivity", "specificity", "auc"]
    rows = [dict(fold=str(fm.fold), chosen_c=fm.chosen_c, **{c: getattr(fm, c) for c in cols})
            for fm in report.per_fold]
    rows.append(dict(fold="mean", chosen_c=None, **{c: getattr(report, c) for c in cols}))
    return pd.DataFrame(rows)
