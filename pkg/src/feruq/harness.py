"""Experiment orchestration: sample-count sweeps, operating points,
reliability curves, most-uncertain-sample reports and plot-data files.

Sweeps use one sampling budget per method. MC methods draw ``T_max``
stochastic passes once per test input and ensembles train ``N_max`` members
once; the row for ``T`` is then computed from the first ``T`` samples, so
curves are nested by construction.

Seeds are derived from one master seed:

* ensemble member ``i`` and the deterministic baseline (``i = 0``) use
  ``master + i``, which makes the ``N = 1`` ensemble row equal the baseline,
* every other stream uses ``SeedSequence(master, spawn_key=(tag,))`` with a
  fixed tag per purpose (see ``_SEED_TAGS``).
"""

import csv
import io
import json
import logging
import os
from dataclasses import asdict, dataclass, field, fields

import numpy as np

from . import metrics
from .data import EMOTIONS, Dataset, load_ferplus_csv, synth_aleatoric
from .estimators import DeepEnsembleClassifier, StochasticMLPClassifier
from .exceptions import TrainingError, ValidationError
from .uncertainty import METHODS, PredictiveSamples

logger = logging.getLogger(__name__)

CRITERIA = ("best_accuracy", "best_ece")
FORMAT_VERSION = 1
_SEED_TAGS = {"data": 0, "mc_dropout": 1, "mc_dropconnect": 2, "mc_dropout_sampling": 3, "mc_dropconnect_sampling": 4}
_DROP_MODE = {"mc_dropout": "dropout", "mc_dropconnect": "dropconnect"}


def derive_seed(master, tag):
    seq = np.random.SeedSequence(int(master), spawn_key=(_SEED_TAGS[tag],))
    return int(seq.generate_state(1, dtype=np.uint64)[0])


# ---------------------------------------------------------------------------
# configuration
# ---------------------------------------------------------------------------


@dataclass
class ExperimentConfig:
    """Everything one run needs. Loaded from a flat JSON object.

    ``data_path`` selects a canonical FER+ CSV; when it is ``None`` the
    ``synthetic`` keyword arguments are passed to
    :func:`feruq.data.synth_aleatoric` (seed derived from ``seed`` unless
    given). ``max_samples`` bounds both the MC pass count ``T`` and the
    ensemble size ``N``; sweeps cover ``1..max_samples``.
    """

    data_path: str = None
    synthetic: dict = field(default_factory=lambda: {"num_samples": 2000, "num_classes": 8, "input_dim": 16, "flip_rate": 0.3})
    hidden_dims: tuple = (64,)
    drop_rate: float = 0.2
    ensemble_drop_mode: str = "none"
    optimizer: str = "adam"
    learning_rate: float = None
    decay: float = 0.0
    epochs: int = 80
    batch_size: int = 32
    methods: tuple = METHODS
    max_samples: int = 15
    n_bins: int = 15
    top_k: int = 5
    report_sizes: tuple = (1, 5, 10, 15)
    out_dir: str = "out"
    seed: int = 0
    n_jobs: int = None

    def __post_init__(self):
        self.hidden_dims = tuple(int(h) for h in self.hidden_dims)
        self.methods = tuple(self.methods)
        self.report_sizes = tuple(int(s) for s in self.report_sizes)

    @classmethod
    def from_dict(cls, d):
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValidationError(f"unknown config keys: {sorted(unknown)}")
        return cls(**d)

    @classmethod
    def from_file(cls, path, **overrides):
        """Read a JSON config; keyword overrides that are not ``None`` win."""
        with open(path, encoding="utf-8") as fh:
            doc = json.load(fh)
        if not isinstance(doc, dict):
            raise ValidationError(f"{path}: config must be a JSON object")
        doc.update({k: v for k, v in overrides.items() if v is not None})
        return cls.from_dict(doc)

    def with_overrides(self, **overrides):
        d = asdict(self)
        d.update({k: v for k, v in overrides.items() if v is not None})
        return type(self).from_dict(d)

    def validate(self):
        if self.data_path is not None and not os.path.isfile(self.data_path):
            raise ValidationError(f"data file {self.data_path!r} does not exist")
        bad = [m for m in self.methods if m not in METHODS]
        if bad or not self.methods:
            raise ValidationError(f"methods must be a non-empty subset of {METHODS}, got {list(self.methods)}")
        for name in ("max_samples", "n_bins", "epochs", "batch_size"):
            if int(getattr(self, name)) < (0 if name == "epochs" else 1):
                raise ValidationError(f"{name} must be positive, got {getattr(self, name)}")
        if not self.hidden_dims or min(self.hidden_dims) < 1:
            raise ValidationError("hidden_dims must hold at least one positive width")
        if int(self.top_k) < 0:
            raise ValidationError(f"top_k must be >= 0, got {self.top_k}")
        if not self.report_sizes or min(self.report_sizes) < 1:
            raise ValidationError(f"report_sizes must be positive, got {list(self.report_sizes)}")
        return self

    def to_dict(self):
        d = asdict(self)
        d["hidden_dims"] = list(self.hidden_dims)
        d["methods"] = list(self.methods)
        d["report_sizes"] = list(self.report_sizes)
        return d


def load_dataset(config):
    if config.data_path is not None:
        return load_ferplus_csv(config.data_path)
    kwargs = dict(config.synthetic)
    kwargs.setdefault("seed", derive_seed(config.seed, "data"))
    return synth_aleatoric(**kwargs)


def train_eval_splits(dataset):
    train = dataset.split("train")
    if len(train) == 0:
        raise ValidationError("dataset has no training rows")
    for usage in ("test", "validation"):
        held_out = dataset.split(usage)
        if len(held_out):
            return train, held_out
    raise ValidationError("dataset has neither test nor validation rows to evaluate on")


# ---------------------------------------------------------------------------
# models
# ---------------------------------------------------------------------------


def _common_params(config, num_classes):
    return dict(
        hidden_dims=config.hidden_dims,
        num_classes=num_classes,
        optimizer=config.optimizer,
        learning_rate=config.learning_rate,
        decay=config.decay,
        epochs=config.epochs,
        batch_size=config.batch_size,
    )


def build_estimator(config, method, num_classes, n_members=None):
    """Unfitted estimator for ``method`` with seeds derived from ``config.seed``."""
    common = _common_params(config, num_classes)
    if method == "deep_ensemble":
        return DeepEnsembleClassifier(
            n_estimators=config.max_samples if n_members is None else n_members,
            drop_rate=config.drop_rate if config.ensemble_drop_mode != "none" else 0.0,
            drop_mode=config.ensemble_drop_mode,
            random_state=config.seed,
            n_jobs=config.n_jobs,
            **common,
        )
    if method == "deterministic":
        return StochasticMLPClassifier(
            drop_rate=config.drop_rate if config.ensemble_drop_mode != "none" else 0.0,
            drop_mode=config.ensemble_drop_mode,
            random_state=config.seed,
            **common,
        )
    if method in _DROP_MODE:
        return StochasticMLPClassifier(
            drop_rate=config.drop_rate,
            drop_mode=_DROP_MODE[method],
            random_state=derive_seed(config.seed, method),
            **common,
        )
    raise ValidationError(f"unknown method {method!r}")


def fit_models(config, dataset, methods=None):
    """Fit one estimator per method on the training split.

    The deterministic baseline is member 0 of the ensemble when both are
    requested (same seed, same settings), so it is not trained twice.
    """
    methods = config.methods if methods is None else methods
    train, _ = train_eval_splits(dataset)
    models = {}
    for method in methods:
        if method == "deterministic" and "deep_ensemble" in methods:
            continue
        try:
            models[method] = build_estimator(config, method, dataset.num_classes).fit(train.X, train.y)
        except TrainingError as exc:
            raise TrainingError(f"{method}: {exc}") from exc
    if "deterministic" in methods and "deterministic" not in models:
        ens = models["deep_ensemble"]
        base = build_estimator(config, "deterministic", dataset.num_classes)
        base.classes_, base.n_features_in_ = ens.classes_, ens.n_features_in_
        base.config_ = ens.ensemble_.config.replace(seed=ens.ensemble_.seeds[0])
        base.params_ = ens.ensemble_.members[0]
        base.loss_history_ = ens.ensemble_.histories[0] if ens.ensemble_.histories else []
        models["deterministic"] = base
    return {m: models[m] for m in methods}


def predictive_samples(config, model, method, X):
    """``max_samples`` predictive samples of ``model`` on ``X`` in draw order."""
    if method == "deep_ensemble":
        return model.sample_proba(X)
    if method == "deterministic":
        p = model.predict_proba(X)
        return PredictiveSamples(np.repeat(p[None], config.max_samples, axis=0), "deterministic")
    return model.sample_proba(X, n_samples=config.max_samples, random_state=derive_seed(config.seed, method + "_sampling"))


# ---------------------------------------------------------------------------
# sweeps
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class SweepRow:
    T: int
    classification_error: float
    nll: float
    ece: float


@dataclass
class SweepResult:
    """Error/NLL/ECE for ``T = 1..T_max`` of one method."""

    method: str
    model: str
    rows: list
    seed: int

    def __post_init__(self):
        ts = [r.T for r in self.rows]
        if not ts or any(b <= a for a, b in zip(ts, ts[1:])):
            raise ValidationError("sweep rows must be non-empty with strictly increasing T")

    @property
    def T(self):
        return [r.T for r in self.rows]

    def column(self, name):
        return [getattr(r, name) for r in self.rows]


@dataclass
class SweepRun:
    config: ExperimentConfig
    results: dict
    samples: dict
    eval_set: Dataset
    models: dict = field(default=None, repr=False)


def model_name(config):
    return "mlp" + "x".join(str(h) for h in config.hidden_dims)


def sweep_from_samples(samples, labels, method, model="", seed=0, n_bins=metrics.DEFAULT_N_BINS):
    """Evaluate every prefix ``samples[:T]`` for ``T = 1..samples.n_samples``."""
    rows = []
    for t in range(1, samples.n_samples + 1):
        mean = samples.prefix(t).mean
        value, _ = metrics.ece(mean, labels, n_bins)
        rows.append(SweepRow(t, metrics.classification_error(mean, labels), metrics.nll(mean, labels), value))
    return SweepResult(method, model, rows, seed)


def run_sweep(config, dataset=None):
    """Fit every configured method and sweep it over ``T = 1..max_samples``."""
    config.validate()
    dataset = load_dataset(config) if dataset is None else dataset
    _, held_out = train_eval_splits(dataset)
    models = fit_models(config, dataset)
    results, samples = {}, {}
    for method, model in models.items():
        s = predictive_samples(config, model, method, held_out.X)
        samples[method] = s
        results[method] = sweep_from_samples(s, held_out.y, method, model_name(config), config.seed, config.n_bins)
        logger.info("%s: error %.4f -> %.4f", method, results[method].rows[0].classification_error,
                    results[method].rows[-1].classification_error)
    return SweepRun(config, results, samples, held_out, models)


def select_operating_point(sweep, criterion):
    """``T`` with the lowest error (``best_accuracy``) or ECE (``best_ece``); ties to the smallest ``T``."""
    if criterion not in CRITERIA:
        raise ValidationError(f"criterion must be one of {CRITERIA}, got {criterion!r}")
    values = sweep.column("classification_error" if criterion == "best_accuracy" else "ece")
    return sweep.rows[int(np.argmin(values))].T


def calibration_points(run):
    """Calibration bins at both operating points of every method.

    Returns ``{method: {criterion: {"T": int, "ece": float, "bins": CalibrationBins}}}``.
    """
    out = {}
    for method, sweep in run.results.items():
        out[method] = {}
        for criterion in CRITERIA:
            t = select_operating_point(sweep, criterion)
            value, bins = metrics.ece(run.samples[method].prefix(t).mean, run.eval_set.y, run.config.n_bins)
            out[method][criterion] = {"T": t, "ece": value, "bins": bins}
    return out


# ---------------------------------------------------------------------------
# uncertain-sample reports
# ---------------------------------------------------------------------------


def class_names(num_classes):
    if num_classes == len(EMOTIONS):
        return list(EMOTIONS)
    return [f"class_{i}" for i in range(num_classes)]


def report_uncertain(samples, eval_set, sizes=(1, 5, 10, 15), k=5):
    """Top-``k`` most uncertain inputs with predictions at several sample counts.

    Ranking uses the entropy of the mean over ``max(sizes)`` samples; the
    prediction for each size ``s`` averages the first ``s`` samples.
    """
    sizes = sorted({int(s) for s in sizes})
    if not sizes or sizes[0] < 1:
        raise ValidationError(f"sizes must be positive, got {sizes}")
    if sizes[-1] > samples.n_samples:
        raise ValidationError(f"requested size {sizes[-1]} but only {samples.n_samples} samples/members are available")
    names = class_names(eval_set.num_classes)
    ranking = metrics.rank_by_entropy(
        samples.prefix(sizes[-1]).mean, k, ids=eval_set.ids, label_dists=eval_set.label_dists
    )
    position = {sid: i for i, sid in enumerate(eval_set.ids.tolist())}
    entries = []
    for r in ranking:
        i = position[r.id]
        preds = []
        for s in sizes:
            p = samples.prefix(s).mean[i]
            preds.append({"size": s, "probs": p.tolist(), "predicted": names[int(np.argmax(p))]})
        entries.append({
            "id": r.id,
            "entropy": r.entropy,
            "label_distribution": dict(zip(names, r.label_dist.tolist())),
            "true_label": names[int(eval_set.hard_labels[i])],
            "predictions": preds,
        })
    return {
        "format_version": FORMAT_VERSION,
        "method": samples.method,
        "sizes": sizes,
        "k": int(k),
        "class_names": names,
        "samples": entries,
    }


# ---------------------------------------------------------------------------
# emission
# ---------------------------------------------------------------------------

SWEEP_COLUMNS = ("method", "model", "T", "error", "nll", "ece")
RELIABILITY_COLUMNS = ("bin_lo", "bin_hi", "confidence", "accuracy", "count")


def _fmt(x):
    return "" if x is None or (isinstance(x, float) and np.isnan(x)) else repr(float(x))


def _write_text(path, text):
    with open(path, "w", encoding="utf-8", newline="") as fh:
        fh.write(text)


def write_json(path, doc):
    _write_text(path, json.dumps(doc, indent=2, sort_keys=True, allow_nan=False) + "\n")


def sweep_csv(results):
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(SWEEP_COLUMNS)
    for method in sorted(results, key=METHODS.index):
        r = results[method]
        for row in r.rows:
            w.writerow([r.method, r.model, row.T, _fmt(row.classification_error), _fmt(row.nll), _fmt(row.ece)])
    return buf.getvalue()


def reliability_csv(bins):
    """One line per bin; confidence and accuracy are blank for empty bins."""
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(RELIABILITY_COLUMNS)
    for lo, hi, c, conf, acc in zip(bins.lo, bins.hi, bins.count, bins.confidence, bins.accuracy):
        w.writerow([_fmt(lo), _fmt(hi), _fmt(conf), _fmt(acc), int(c)])
    return buf.getvalue()


def read_reliability_csv(path):
    """Inverse of :func:`reliability_csv`."""
    with open(path, encoding="utf-8", newline="") as fh:
        rows = list(csv.DictReader(fh))
    col = lambda k: np.array([float(r[k]) if r[k] != "" else np.nan for r in rows])
    return metrics.CalibrationBins(
        col("bin_lo"), col("bin_hi"), np.array([int(r["count"]) for r in rows]), col("confidence"), col("accuracy")
    )


def make_manifest(command, config, files):
    cfg = config.to_dict()
    cfg.pop("out_dir")
    return {"format_version": FORMAT_VERSION, "command": command, "config": cfg, "files": sorted(files)}


def emit_plot_data(run, out_dir, calibration=None, command="sweep"):
    """Write sweep curves, per-method metric reports and reliability curves.

    Files
    -----
    sweep.csv
        ``method,model,T,error,nll,ece`` for every method and ``T``.
    metrics_<method>.json
        Full metric report at ``T = max_samples``.
    samples_<method>.npy
        The stored predictive samples every number above derives from.
    calibration_<method>_<criterion>.csv, operating_points.json
        Only when ``calibration`` (from :func:`calibration_points`) is given.
    manifest.json

    Returns the sorted list of written file names.
    """
    os.makedirs(out_dir, exist_ok=True)
    files = ["sweep.csv"]
    _write_text(os.path.join(out_dir, "sweep.csv"), sweep_csv(run.results))
    for method, s in run.samples.items():
        report = metrics.evaluate(s.mean, run.eval_set.y, run.config.n_bins).to_dict()
        report.update(method=method, T=s.n_samples)
        write_json(os.path.join(out_dir, f"metrics_{method}.json"), report)
        np.save(os.path.join(out_dir, f"samples_{method}.npy"), s.samples)
        files += [f"metrics_{method}.json", f"samples_{method}.npy"]
    if calibration is not None:
        points = {}
        for method, by_criterion in calibration.items():
            points[method] = {}
            for criterion, info in by_criterion.items():
                name = f"calibration_{method}_{criterion}.csv"
                _write_text(os.path.join(out_dir, name), reliability_csv(info["bins"]))
                files.append(name)
                points[method][criterion] = {"T": info["T"], "ece": info["ece"], "file": name}
        write_json(os.path.join(out_dir, "operating_points.json"), points)
        files.append("operating_points.json")
    files.append("manifest.json")
    write_json(os.path.join(out_dir, "manifest.json"), make_manifest(command, run.config, files))
    return sorted(files)


def emit_report(report, config, out_dir, command="report"):
    os.makedirs(out_dir, exist_ok=True)
    write_json(os.path.join(out_dir, "report.json"), report)
    files = ["report.json", "manifest.json"]
    write_json(os.path.join(out_dir, "manifest.json"), make_manifest(command, config, files))
    return files


__all__ = [
    "CRITERIA",
    "ExperimentConfig",
    "PredictiveSamples",
    "SweepResult",
    "SweepRow",
    "SweepRun",
    "build_estimator",
    "calibration_points",
    "emit_plot_data",
    "emit_report",
    "fit_models",
    "load_dataset",
    "read_reliability_csv",
    "report_uncertain",
    "run_sweep",
    "select_operating_point",
    "sweep_from_samples",
]
