"""MC-Dropout, MC-DropConnect and deep-ensemble predictors.

All three produce a :class:`PredictiveSamples`: ``T`` softmax vectors per
input (stochastic passes or ensemble members) in draw order, plus their
unweighted arithmetic mean. Keeping the draw order lets a sweep over
``T = 1..T_max`` evaluate prefixes of one sampling run.
"""

import json
import os
from dataclasses import dataclass, field

import numpy as np
from joblib import Parallel, delayed

from .exceptions import TrainingError, ValidationError
from .nn import (
    FORMAT_VERSION,
    ModelConfig,
    OptimizerState,
    check_dataset,
    forward,
    load_model,
    sample_mask,
    save_model,
    softmax,
    train,
)

METHODS = ("deterministic", "mc_dropout", "mc_dropconnect", "deep_ensemble")
_U64 = 2**64


@dataclass(frozen=True)
class PredictiveSamples:
    """Stack of probability vectors and their mean.

    Attributes
    ----------
    samples : ndarray of shape (T, K) or (T, n, K)
    method : str
    mean : ndarray of shape (K,) or (n, K)
    """

    samples: np.ndarray
    method: str
    mean: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        s = np.asarray(self.samples, dtype=np.float64)
        if s.ndim not in (2, 3) or s.shape[0] < 1:
            raise ValidationError(f"need at least one sample of shape (K,) or (n, K), got {s.shape}")
        if self.method not in METHODS:
            raise ValidationError(f"unknown method {self.method!r}")
        object.__setattr__(self, "samples", s)
        # shifted by the first draw, so identical draws average to themselves exactly
        object.__setattr__(self, "mean", s[0] + (s - s[0]).mean(axis=0))

    @property
    def n_samples(self):
        return self.samples.shape[0]

    def prefix(self, k):
        """The first ``k`` samples, with their own mean."""
        if not 1 <= k <= self.n_samples:
            raise ValidationError(f"prefix length must lie in [1, {self.n_samples}], got {k}")
        return PredictiveSamples(self.samples[:k], self.method)

    def variance(self):
        """Per-entry population variance across samples."""
        d = self.samples - self.samples[0]
        return np.maximum((d * d).mean(axis=0) - d.mean(axis=0) ** 2, 0.0)


def deterministic_predict(params, X):
    """Mask-free prediction wrapped as a single-sample :class:`PredictiveSamples`."""
    return PredictiveSamples(softmax(forward(params, X))[None], "deterministic")


def _mc_predict(params, config, X, T, seed, mode, method):
    if int(T) < 1:
        raise ValidationError(f"number of stochastic passes must be >= 1, got {T}")
    if config.drop_mode != mode:
        raise ValidationError(f"{method} needs a model configured with drop_mode={mode!r}, got {config.drop_mode!r}")
    params.check_config(config)
    X = np.asarray(X, dtype=np.float64)
    n_rows = X.shape[0] if X.ndim == 2 else None
    rng = np.random.default_rng(seed)
    draws = []
    for _ in range(int(T)):
        mask = sample_mask(config, rng, n_rows=n_rows, mode=mode)
        draws.append(softmax(forward(params, X, mask=mask)))
    return PredictiveSamples(np.stack(draws), method)


def mc_dropout_predict(params, config, X, T, seed):
    """``T`` forward passes with fresh activation masks per pass and per row.

    Parameters
    ----------
    params : ModelParams
    config : ModelConfig
        Must have ``drop_mode='dropout'``; ``drop_rate`` should be the training rate.
    X : array_like of shape (input_dim,) or (n, input_dim)
    T : int
    seed : int
    """
    return _mc_predict(params, config, X, T, seed, "dropout", "mc_dropout")


def mc_dropconnect_predict(params, config, X, T, seed):
    """``T`` forward passes with fresh weight masks.

    One weight mask is drawn per pass and shared by all rows of ``X``, so a
    row's samples do not depend on what else is in the batch.
    """
    return _mc_predict(params, config, X, T, seed, "dropconnect", "mc_dropconnect")


# ---------------------------------------------------------------------------
# ensembles
# ---------------------------------------------------------------------------


def member_seed(base_seed, index):
    """Seed of ensemble member ``index``: ``(base_seed + index) mod 2**64``."""
    return (int(base_seed) + int(index)) % _U64


@dataclass
class Ensemble:
    """Independently trained members sharing one architecture."""

    config: object
    members: list
    seeds: list
    base_seed: int = None
    histories: list = field(default=None, repr=False, compare=False)

    def __post_init__(self):
        if len(self.members) < 1:
            raise ValidationError("an ensemble needs at least one member")
        if len(self.seeds) != len(self.members):
            raise ValidationError(f"{len(self.seeds)} seeds for {len(self.members)} members")
        if len(set(self.seeds)) != len(self.seeds):
            raise ValidationError(f"ensemble member seeds must be pairwise distinct, got {self.seeds}")
        for m in self.members:
            m.check_config(self.config)

    @property
    def n_members(self):
        return len(self.members)

    def prefix(self, k):
        if not 1 <= k <= self.n_members:
            raise ValidationError(f"ensemble has {self.n_members} members, cannot take {k}")
        return Ensemble(self.config, self.members[:k], self.seeds[:k], self.base_seed)


def _train_member(config, X, y, index, seed, epochs, batch_size, optimizer, learning_rate, decay):
    try:
        state = OptimizerState(kind=optimizer, learning_rate=learning_rate, decay=decay)
        return train(config.replace(seed=seed), X, y, epochs=epochs, batch_size=batch_size, optimizer=state)
    except TrainingError as exc:
        raise TrainingError(str(exc), member=index) from exc


def train_ensemble(
    config,
    X,
    y,
    n_members,
    *,
    epochs=80,
    batch_size=32,
    optimizer="adam",
    learning_rate=None,
    decay=0.0,
    base_seed=None,
    seeds=None,
    n_jobs=None,
):
    """Train ``n_members`` networks that differ only in their seed.

    Member ``i`` uses :func:`member_seed` ``(base_seed, i)`` unless explicit
    ``seeds`` are given. Members train with masks iff ``config`` asks for
    them; :func:`ensemble_predict` always evaluates them without masks.
    ``n_jobs`` trains members in parallel through joblib; the result is
    ordered by member index either way.
    """
    if int(n_members) < 1:
        raise ValidationError(f"n_members must be >= 1, got {n_members}")
    base_seed = config.seed if base_seed is None else int(base_seed)
    if seeds is None:
        seeds = [member_seed(base_seed, i) for i in range(int(n_members))]
    seeds = [int(s) for s in seeds]
    if len(seeds) != int(n_members):
        raise ValidationError(f"got {len(seeds)} seeds for {n_members} members")
    if len(set(seeds)) != len(seeds):
        raise ValidationError(f"ensemble member seeds must be pairwise distinct, got {seeds}")
    X, y = check_dataset(config, X, y)

    results = Parallel(n_jobs=n_jobs)(
        delayed(_train_member)(config, X, y, i, s, epochs, batch_size, optimizer, learning_rate, decay)
        for i, s in enumerate(seeds)
    )
    members = [p for p, _ in results]
    histories = [h for _, h in results]
    return Ensemble(config.replace(seed=base_seed), members, seeds, base_seed, histories)


def ensemble_predict(ensemble, X):
    """One mask-free softmax vector per member, stacked in member order."""
    return PredictiveSamples(np.stack([softmax(forward(m, X)) for m in ensemble.members]), "deep_ensemble")


def save_ensemble(directory, ensemble):
    """Write ``member_XXX.json`` files plus ``manifest.json`` into ``directory``."""
    os.makedirs(directory, exist_ok=True)
    files = []
    for i, (params, seed) in enumerate(zip(ensemble.members, ensemble.seeds)):
        name = f"member_{i:03d}.json"
        save_model(os.path.join(directory, name), ensemble.config.replace(seed=seed), params)
        files.append(name)
    manifest = {
        "format_version": FORMAT_VERSION,
        "N": ensemble.n_members,
        "base_seed": ensemble.base_seed,
        "seeds": list(ensemble.seeds),
        "config": ensemble.config.to_dict(),
        "members": files,
    }
    with open(os.path.join(directory, "manifest.json"), "w", encoding="utf-8", newline="\n") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")


def load_ensemble(directory):
    with open(os.path.join(directory, "manifest.json"), encoding="utf-8") as fh:
        manifest = json.load(fh)
    if manifest.get("format_version") != FORMAT_VERSION:
        raise ValidationError(f"unsupported ensemble format_version {manifest.get('format_version')!r}")
    config = ModelConfig.from_dict(manifest["config"])
    members = []
    for name in manifest["members"]:
        member_config, params = load_model(os.path.join(directory, name))
        if member_config.replace(seed=config.seed) != config:
            raise ValidationError(f"{name} was trained with a different architecture than the manifest")
        members.append(params)
    if len(members) != manifest["N"]:
        raise ValidationError(f"manifest declares N={manifest['N']} but lists {len(members)} members")
    return Ensemble(config, members, manifest["seeds"], manifest["base_seed"])


__all__ = [
    "METHODS",
    "Ensemble",
    "PredictiveSamples",
    "deterministic_predict",
    "ensemble_predict",
    "load_ensemble",
    "mc_dropconnect_predict",
    "mc_dropout_predict",
    "member_seed",
    "save_ensemble",
    "train_ensemble",
]
