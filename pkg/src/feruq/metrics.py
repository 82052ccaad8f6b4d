"""Evaluation metrics for probabilistic classifiers.

All functions are pure. Logarithms are natural (nats); probabilities are
clamped below at 1e-12 inside logs. ``argmax`` ties go to the lowest class
index, entropy-ranking ties to the lowest sample id.
"""

from dataclasses import dataclass

import numpy as np

from .exceptions import DimensionError, ValidationError

LOG_EPS = 1e-12
SIMPLEX_TOL = 1e-6
DEFAULT_N_BINS = 15


def _check_predictions(predictions, labels=None):
    P = np.asarray(predictions, dtype=np.float64)
    if P.ndim == 1:
        P = P[None, :]
    if P.ndim != 2 or P.shape[0] == 0 or P.shape[1] == 0:
        raise ValidationError(f"predictions must be a non-empty (n, K) array, got shape {np.shape(predictions)}")
    if not np.all(np.isfinite(P)):
        raise ValidationError("predictions contain non-finite values")
    if labels is None:
        return P
    y = np.asarray(labels)
    if y.ndim == 0:
        y = y[None]
    if y.shape != (P.shape[0],):
        raise DimensionError(f"{P.shape[0]} predictions but labels of shape {y.shape}")
    if not np.issubdtype(y.dtype, np.integer):
        if not np.all(np.mod(y, 1) == 0):
            raise ValidationError("labels must be integer class indices")
        y = y.astype(np.int64)
    if np.any(y < 0) or np.any(y >= P.shape[1]):
        raise ValidationError(f"labels must lie in [0, {P.shape[1]})")
    return P, y


def _check_simplex(P, name="probabilities"):
    if np.any(P < -SIMPLEX_TOL) or np.any(np.abs(P.sum(axis=-1) - 1.0) > SIMPLEX_TOL):
        raise ValidationError(f"{name} are not on the probability simplex")


def classification_error(predictions, labels):
    """Fraction of rows whose argmax differs from the label."""
    P, y = _check_predictions(predictions, labels)
    return float(np.mean(np.argmax(P, axis=1) != y))


def nll(predictions, labels):
    """Mean negative log-probability of the true class."""
    P, y = _check_predictions(predictions, labels)
    return float(np.mean(-np.log(np.maximum(P[np.arange(len(y)), y], LOG_EPS))))


@dataclass(frozen=True)
class CalibrationBins:
    """Equal-width confidence histogram.

    ``confidence`` and ``accuracy`` are NaN for empty bins; check ``empty``.
    """

    lo: np.ndarray
    hi: np.ndarray
    count: np.ndarray
    confidence: np.ndarray
    accuracy: np.ndarray

    @property
    def n_bins(self):
        return len(self.count)

    @property
    def empty(self):
        return self.count == 0

    @property
    def total(self):
        return int(self.count.sum())

    def to_list(self):
        rows = []
        for lo, hi, c, conf, acc in zip(self.lo, self.hi, self.count, self.confidence, self.accuracy):
            rows.append({
                "lo": float(lo),
                "hi": float(hi),
                "count": int(c),
                "conf": None if c == 0 else float(conf),
                "acc": None if c == 0 else float(acc),
            })
        return rows


def bin_edges(n_bins):
    """``n_bins + 1`` edges ``m / n_bins``."""
    return np.arange(n_bins + 1, dtype=np.float64) / n_bins


def ece(predictions, labels, n_bins=DEFAULT_N_BINS):
    """Expected calibration error over equal-width confidence bins.

    Confidence is the largest entry of each prediction. Bin ``m`` covers
    ``[m/M, (m+1)/M)``; the top bin is closed on the right, so a confidence
    that lands exactly on an interior edge goes to the higher bin.

    Returns
    -------
    ece : float
        ``sum_m (n_m / n) * |acc_m - conf_m|`` over non-empty bins.
    bins : CalibrationBins
    """
    if int(n_bins) < 1:
        raise ValidationError(f"n_bins must be >= 1, got {n_bins}")
    n_bins = int(n_bins)
    P, y = _check_predictions(predictions, labels)
    conf = P.max(axis=1)
    correct = (np.argmax(P, axis=1) == y).astype(np.float64)
    edges = bin_edges(n_bins)
    idx = np.searchsorted(edges[1:-1], conf, side="right")

    count = np.bincount(idx, minlength=n_bins)
    # extended-precision sums, rounded once, so hand-checkable cases come out exact
    conf_sum = np.zeros(n_bins, dtype=np.longdouble)
    acc_sum = np.zeros(n_bins, dtype=np.longdouble)
    np.add.at(conf_sum, idx, conf.astype(np.longdouble))
    np.add.at(acc_sum, idx, correct.astype(np.longdouble))
    full = count > 0
    with np.errstate(invalid="ignore", divide="ignore"):
        mean_conf = np.where(full, conf_sum / count, np.nan).astype(np.float64)
        mean_acc = np.where(full, acc_sum / count, np.nan).astype(np.float64)
    bins = CalibrationBins(edges[:-1], edges[1:], count, mean_conf, mean_acc)

    value = float(np.sum(np.abs(acc_sum[full] - conf_sum[full])) / len(y))
    return value, bins


def reliability_curve(bins):
    """``(mean confidence, accuracy)`` of every non-empty bin, in bin order."""
    return [(float(c), float(a)) for c, a, k in zip(bins.confidence, bins.accuracy, bins.count) if k > 0]


def predictive_entropy(p):
    """Shannon entropy in nats along the last axis, with ``0 log 0 = 0``."""
    P = np.asarray(p, dtype=np.float64)
    if P.size == 0 or not np.all(np.isfinite(P)):
        raise ValidationError("entropy needs finite, non-empty probability vectors")
    _check_simplex(P)
    P = np.clip(P, 0.0, None)
    with np.errstate(divide="ignore", invalid="ignore"):
        terms = np.where(P > 0.0, P * np.log(P), 0.0)
    # summation rounding can dip a hair below zero for one-hot inputs
    return np.maximum(-terms.sum(axis=-1), 0.0) if P.ndim > 1 else max(float(-terms.sum()), 0.0)


def soft_label_divergence(prediction, labels):
    """``KL(labels || prediction)`` in nats."""
    q = np.asarray(prediction, dtype=np.float64)
    p = np.asarray(labels, dtype=np.float64)
    if q.shape != p.shape or q.size == 0:
        raise DimensionError(f"prediction {q.shape} and label distribution {p.shape} differ in shape")
    if not (np.all(np.isfinite(q)) and np.all(np.isfinite(p))):
        raise ValidationError("non-finite probabilities")
    _check_simplex(q, "predictions")
    _check_simplex(p, "label distributions")
    q = np.maximum(q, LOG_EPS)
    with np.errstate(divide="ignore", invalid="ignore"):
        terms = np.where(p > 0.0, p * np.log(np.where(p > 0.0, p, 1.0) / q), 0.0)
    out = terms.sum(axis=-1)
    return np.maximum(out, 0.0) if out.ndim else max(float(out), 0.0)


@dataclass(frozen=True)
class RankedSample:
    id: object
    entropy: float
    probs: np.ndarray
    predicted: int
    label_dist: np.ndarray = None


class UncertaintyRanking(list):
    """List of :class:`RankedSample` sorted by descending entropy."""

    @property
    def ids(self):
        return [r.id for r in self]

    @property
    def entropies(self):
        return [r.entropy for r in self]


def rank_by_entropy(predictions, k, ids=None, label_dists=None):
    """Top-``k`` most uncertain samples by entropy of the mean prediction.

    Parameters
    ----------
    predictions : PredictiveSamples, sequence of PredictiveSamples, or array of shape (n, K)
        Mean probability vectors, or objects carrying a ``mean`` attribute.
    k : int
        ``0`` yields an empty ranking.
    ids : sequence, optional
        Sample ids, ``0..n-1`` by default. Ties are broken by ascending id.
    label_dists : array of shape (n, K), optional
        Ground-truth label distributions carried into the result.
    """
    if hasattr(predictions, "mean") and not isinstance(predictions, np.ndarray):
        P = np.atleast_2d(predictions.mean)
    elif len(predictions) and hasattr(predictions[0], "mean") and not isinstance(predictions[0], np.ndarray):
        P = np.stack([np.asarray(s.mean) for s in predictions])
    else:
        P = np.asarray(predictions, dtype=np.float64)
    P = _check_predictions(P)
    n = P.shape[0]
    ids = np.arange(n) if ids is None else np.asarray(ids)
    if ids.shape != (n,):
        raise DimensionError(f"{n} predictions but {len(ids)} ids")
    if not 0 <= int(k) <= n:
        raise ValidationError(f"k must lie in [0, {n}], got {k}")

    H = predictive_entropy(P)
    order = np.lexsort((ids, -H))[: int(k)]
    preds = np.argmax(P, axis=1)
    return UncertaintyRanking(
        RankedSample(
            id=ids[i].item() if hasattr(ids[i], "item") else ids[i],
            entropy=float(H[i]),
            probs=P[i].copy(),
            predicted=int(preds[i]),
            label_dist=None if label_dists is None else np.asarray(label_dists[i], dtype=np.float64),
        )
        for i in order
    )


@dataclass(frozen=True)
class MetricsReport:
    classification_error: float
    nll: float
    ece: float
    mean_entropy: float
    bins: CalibrationBins = None

    def to_dict(self):
        return {
            "error": self.classification_error,
            "nll": self.nll,
            "ece": self.ece,
            "mean_entropy": self.mean_entropy,
            "bins": [] if self.bins is None else self.bins.to_list(),
        }


def evaluate(predictions, labels, n_bins=DEFAULT_N_BINS):
    """Error, NLL, ECE and mean predictive entropy in one report."""
    P, y = _check_predictions(predictions, labels)
    value, bins = ece(P, y, n_bins)
    return MetricsReport(
        classification_error=classification_error(P, y),
        nll=nll(P, y),
        ece=value,
        mean_entropy=float(np.mean(predictive_entropy(P))),
        bins=bins,
    )
