"""Crowd-labelled image datasets: FER+-style CSV and a synthetic generator.

Canonical CSV layout (UTF-8, comma separated, LF or CRLF)::

    usage,pixels,neutral,happiness,surprise,sadness,anger,disgust,fear,contempt,unknown,NF
    Training,0 12 255 ...,2,8,0,0,0,0,0,0,0,0

``pixels`` is a space-separated list of 0-255 grey levels forming a square
image. ``unknown`` and ``NF`` votes are dropped and the remaining eight vote
counts are renormalised into a label distribution. The upstream FER+
release ships images and votes as two files; join them on row order into
this layout before loading.
"""

import csv
import logging
import math
from dataclasses import dataclass

import numpy as np

from .exceptions import FormatError, ParseError, ValidationError
from .metrics import predictive_entropy

logger = logging.getLogger(__name__)

EMOTIONS = ("neutral", "happiness", "surprise", "sadness", "anger", "disgust", "fear", "contempt")
CSV_HEADER = ("usage", "pixels", *EMOTIONS, "unknown", "NF")
USAGE_FROM_CSV = {"Training": "train", "PublicTest": "validation", "PrivateTest": "test"}
USAGE_TO_CSV = {v: k for k, v in USAGE_FROM_CSV.items()}
USAGES = ("train", "validation", "test")


@dataclass(frozen=True)
class LabelDistribution:
    """Per-class vote counts and their normalisation."""

    counts: tuple

    def __post_init__(self):
        counts = tuple(int(c) for c in self.counts)
        if any(c < 0 for c in counts) or sum(counts) < 1:
            raise ValidationError(f"vote counts must be non-negative with at least one vote, got {counts}")
        object.__setattr__(self, "counts", counts)

    @property
    def probs(self):
        c = np.asarray(self.counts, dtype=np.float64)
        return c / c.sum()

    @property
    def hard_label(self):
        return derive_hard_label(self)


def derive_hard_label(dist):
    """Majority class, ties to the lowest index."""
    counts = dist.counts if isinstance(dist, LabelDistribution) else dist
    return int(np.argmax(np.asarray(counts)))


@dataclass(frozen=True)
class LabeledSample:
    id: int
    features: np.ndarray
    label_dist: LabelDistribution
    hard_label: int
    usage: str


def _is_square(n):
    r = math.isqrt(n)
    return r * r == n


def _readonly(a):
    a = np.array(a)
    a.setflags(write=False)
    return a


class Dataset:
    """Immutable collection of crowd-labelled samples.

    Parameters
    ----------
    ids : array_like of shape (n,)
        Unique sample ids.
    features : array_like of shape (n, d)
        Grey levels in ``[0, 1]``; ``d`` must be a perfect square.
    vote_counts : array_like of shape (n, K)
        Non-negative vote counts, at least one vote per row.
    usage : array_like of shape (n,)
        Each one of ``'train'``, ``'validation'``, ``'test'``.
    n_skipped : int, default=0
        Rows dropped while loading. Not part of equality.
    """

    def __init__(self, ids, features, vote_counts, usage, n_skipped=0):
        features = np.asarray(features, dtype=np.float64)
        votes = np.asarray(vote_counts)
        ids = np.asarray(ids)
        usage = np.asarray(usage, dtype=object)
        n = len(ids)
        if features.ndim != 2 or features.shape[0] != n or votes.ndim != 2 or votes.shape[0] != n or usage.shape != (n,):
            raise ValidationError("ids, features, vote counts and usage must describe the same number of samples")
        if len(np.unique(ids)) != n:
            raise ValidationError("sample ids must be unique")
        if n and not _is_square(features.shape[1]):
            raise ValidationError(f"feature length {features.shape[1]} is not a perfect square")
        if np.any(~np.isfinite(features)) or np.any(features < 0.0) or np.any(features > 1.0):
            raise ValidationError("features must lie in [0, 1]")
        if votes.shape[1] < 2 or np.any(votes < 0) or np.any(votes.sum(axis=1) < 1) or np.any(votes != np.round(votes)):
            raise ValidationError("vote counts must be non-negative integers with at least one vote per sample")
        bad = set(usage.tolist()) - set(USAGES)
        if bad:
            raise ValidationError(f"unknown usage values {sorted(bad)}")
        votes = votes.astype(np.int64)
        self.ids = _readonly(ids)
        self.features = _readonly(features)
        self.vote_counts = _readonly(votes)
        self.usage = _readonly(usage)
        self.label_dists = _readonly(votes / votes.sum(axis=1, keepdims=True))
        self.hard_labels = _readonly(np.argmax(votes, axis=1))
        self.n_skipped = int(n_skipped)

    def __len__(self):
        return len(self.ids)

    def __eq__(self, other):
        if not isinstance(other, Dataset):
            return NotImplemented
        return (
            np.array_equal(self.ids, other.ids)
            and self.features.shape == other.features.shape
            and np.array_equal(self.features, other.features)
            and np.array_equal(self.vote_counts, other.vote_counts)
            and np.array_equal(self.usage, other.usage)
        )

    def __repr__(self):
        counts = {u: int(np.sum(self.usage == u)) for u in USAGES}
        return f"Dataset(n={len(self)}, input_dim={self.input_dim}, num_classes={self.num_classes}, splits={counts})"

    @property
    def input_dim(self):
        return self.features.shape[1]

    @property
    def num_classes(self):
        return self.vote_counts.shape[1]

    @property
    def image_side(self):
        return math.isqrt(self.input_dim)

    @property
    def X(self):
        return self.features

    @property
    def y(self):
        return self.hard_labels

    def split(self, usage):
        if usage not in USAGES:
            raise ValidationError(f"usage must be one of {USAGES}, got {usage!r}")
        keep = self.usage == usage
        return Dataset(self.ids[keep], self.features[keep], self.vote_counts[keep], self.usage[keep])

    def sample(self, i):
        dist = LabelDistribution(tuple(self.vote_counts[i]))
        return LabeledSample(self.ids[i].item(), self.features[i], dist, int(self.hard_labels[i]), self.usage[i])

    def __iter__(self):
        return (self.sample(i) for i in range(len(self)))


# ---------------------------------------------------------------------------
# canonical CSV
# ---------------------------------------------------------------------------


def _parse_int(text, what, line):
    try:
        return int(text)
    except ValueError:
        raise ParseError(f"{what} {text!r} is not an integer", line) from None


def load_ferplus_csv(path):
    """Load a canonical FER+ CSV.

    Rows whose votes are all ``unknown``/``NF`` are skipped; the count is
    logged and stored in ``Dataset.n_skipped``. Pixels are scaled by 1/255.
    Sample ids are the 0-based positions of the retained rows.
    """
    ids, pixels, votes, usage = [], [], [], []
    skipped = 0
    width = None
    with open(path, encoding="utf-8-sig", newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or tuple(h.strip() for h in header) != CSV_HEADER:
            raise FormatError(f"{path}: missing or malformed header, expected {','.join(CSV_HEADER)}", 1)
        for row in reader:
            line = reader.line_num
            if not row or (len(row) == 1 and not row[0].strip()):
                continue
            if len(row) != len(CSV_HEADER):
                raise ParseError(f"expected {len(CSV_HEADER)} fields, found {len(row)}", line)
            use = row[0].strip()
            if use not in USAGE_FROM_CSV:
                raise ParseError(f"usage {use!r} not one of {sorted(USAGE_FROM_CSV)}", line)
            pix = [_parse_int(t, "pixel", line) for t in row[1].split()]
            if not pix:
                raise ParseError("empty pixel list", line)
            if min(pix) < 0 or max(pix) > 255:
                raise ParseError("pixel values must lie in 0..255", line)
            if not _is_square(len(pix)):
                raise ValidationError(f"line {line}: {len(pix)} pixels do not form a square image")
            if width is None:
                width = len(pix)
            elif len(pix) != width:
                raise ValidationError(f"line {line}: {len(pix)} pixels, earlier rows have {width}")
            counts = [_parse_int(t.strip(), "vote count", line) for t in row[2:]]
            if min(counts) < 0:
                raise ParseError("vote counts must be non-negative", line)
            kept = counts[: len(EMOTIONS)]
            if sum(kept) == 0:
                skipped += 1
                continue
            ids.append(len(ids))
            pixels.append(pix)
            votes.append(kept)
            usage.append(USAGE_FROM_CSV[use])
    if skipped:
        logger.info("%s: skipped %d rows without emotion votes", path, skipped)
    features = np.asarray(pixels, dtype=np.float64).reshape(len(ids), width or 0) / 255.0
    return Dataset(
        np.asarray(ids, dtype=np.int64),
        features,
        np.asarray(votes, dtype=np.int64).reshape(len(ids), len(EMOTIONS)),
        usage,
        n_skipped=skipped,
    )


def write_ferplus_csv(dataset, path):
    """Write ``dataset`` in the canonical layout; features must be multiples of 1/255."""
    if dataset.num_classes != len(EMOTIONS):
        raise ValidationError(f"canonical CSV holds {len(EMOTIONS)} classes, dataset has {dataset.num_classes}")
    pix = np.rint(dataset.features * 255.0).astype(np.int64)
    if not np.array_equal(pix / 255.0, dataset.features):
        raise ValidationError("features are not representable as 8-bit grey levels")
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(CSV_HEADER)
        for u, p, v in zip(dataset.usage, pix, dataset.vote_counts):
            writer.writerow([USAGE_TO_CSV[u], " ".join(map(str, p.tolist())), *v.tolist(), 0, 0])


# ---------------------------------------------------------------------------
# synthetic data
# ---------------------------------------------------------------------------


def synth_aleatoric(
    num_samples=2000,
    num_classes=8,
    input_dim=16,
    flip_rate=0.3,
    seed=0,
    separation=2.5,
    splits=(0.7, 0.1, 0.2),
):
    """Overlapping Gaussian classes with crowd-style vote distributions.

    Class ``k`` is a unit-variance Gaussian centred on ``separation * e_k``,
    the ``k``-th vertex of a scaled standard simplex (so ``input_dim`` must be
    at least ``num_classes``). Classes are drawn uniformly. With probability
    ``flip_rate`` a sample's ten votes are split 6/4 between its class and a
    uniformly chosen other class, otherwise all ten go to its class.

    Features are mapped affinely from ``[-4, separation + 4]`` onto ``[0, 1]``
    and quantised to 8-bit grey levels so the result round-trips through the
    canonical CSV. Rows are assigned to train/validation/test in order,
    by the fractions in ``splits``.
    """
    if int(num_classes) < 2:
        raise ValidationError(f"num_classes must be >= 2, got {num_classes}")
    if not 0.0 <= flip_rate < 1.0:
        raise ValidationError(f"flip_rate must lie in [0, 1), got {flip_rate}")
    if int(num_samples) < 1:
        raise ValidationError(f"num_samples must be >= 1, got {num_samples}")
    if int(input_dim) < int(num_classes) or not _is_square(int(input_dim)):
        raise ValidationError(f"input_dim must be a perfect square >= num_classes, got {input_dim}")
    if len(splits) != 3 or min(splits) < 0 or not math.isclose(sum(splits), 1.0):
        raise ValidationError(f"splits must be three non-negative fractions summing to 1, got {splits}")
    n, k, d = int(num_samples), int(num_classes), int(input_dim)

    rng = np.random.default_rng(seed)
    labels = rng.integers(k, size=n)
    noise = rng.standard_normal((n, d))
    flipped = rng.random(n) < flip_rate
    confuser = (labels + rng.integers(1, k, size=n)) % k

    x = noise
    x[np.arange(n), labels] += separation
    lo, hi = -4.0, separation + 4.0
    grey = np.clip(np.rint(255.0 * (x - lo) / (hi - lo)), 0, 255)
    features = grey / 255.0

    votes = np.zeros((n, k), dtype=np.int64)
    votes[np.arange(n), labels] = np.where(flipped, 6, 10)
    votes[np.flatnonzero(flipped), confuser[flipped]] = 4

    n_train = int(round(splits[0] * n))
    n_val = int(round(splits[1] * n))
    usage = np.array(["train"] * n_train + ["validation"] * n_val + ["test"] * (n - n_train - n_val), dtype=object)
    return Dataset(np.arange(n), features, votes, usage)


def label_entropy_report(dataset, n_bins=10):
    """Entropy of every label distribution plus mean, max and a histogram over ``[0, ln K]``."""
    H = np.atleast_1d(predictive_entropy(dataset.label_dists)) if len(dataset) else np.zeros(0)
    counts, edges = np.histogram(H, bins=n_bins, range=(0.0, math.log(dataset.num_classes)))
    return {
        "entropies": H,
        "mean": float(H.mean()) if len(H) else 0.0,
        "max": float(H.max()) if len(H) else 0.0,
        "histogram": {"edges": edges.tolist(), "counts": counts.tolist()},
    }
