"""scikit-learn compatible wrappers around the numpy network and ensembles.

Labels are integer class indices ``0..K-1``. ``K`` defaults to
``max(y) + 1`` and can be pinned with ``num_classes`` so that a training
split missing a rare class still yields ``K`` output columns.
"""

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin
from sklearn.utils.validation import check_array, check_is_fitted, check_X_y

from .exceptions import ValidationError
from .nn import ModelConfig, OptimizerState, forward, load_model, save_model, softmax, train
from .uncertainty import (
    PredictiveSamples,
    ensemble_predict,
    load_ensemble,
    mc_dropconnect_predict,
    mc_dropout_predict,
    save_ensemble,
    train_ensemble,
)

_U64 = 2**64


def _resolve_seed(random_state):
    if random_state is None:
        return int(np.random.default_rng().integers(2**63))
    if isinstance(random_state, (int, np.integer)):
        return int(random_state) % _U64
    raise ValidationError(f"random_state must be an int or None, got {random_state!r}")


class _MLPBase(ClassifierMixin, BaseEstimator):
    def _check_fit_data(self, X, y):
        X, y = check_X_y(X, y, dtype=np.float64)
        if not np.all(np.mod(y, 1) == 0) or np.any(y < 0):
            raise ValidationError("labels must be non-negative integer class indices")
        y = y.astype(np.int64)
        k = int(y.max()) + 1 if self.num_classes is None else int(self.num_classes)
        if k < 2:
            k = 2
        if np.any(y >= k):
            raise ValidationError(f"labels exceed num_classes={k}")
        self.classes_ = np.arange(k)
        self.n_features_in_ = X.shape[1]
        return X, y

    def _config(self, seed, drop_mode, drop_rate):
        return ModelConfig(
            input_dim=self.n_features_in_,
            hidden_dims=tuple(self.hidden_dims),
            num_classes=len(self.classes_),
            drop_rate=drop_rate,
            drop_mode=drop_mode,
            seed=seed,
        )

    def _check_X(self, X):
        check_is_fitted(self)
        X = check_array(X, dtype=np.float64)
        if X.shape[1] != self.n_features_in_:
            raise ValidationError(f"X has {X.shape[1]} features, estimator was fitted with {self.n_features_in_}")
        return X

    def predict(self, X):
        check_is_fitted(self)
        return self.classes_[np.argmax(self.predict_proba(X), axis=1)]


class StochasticMLPClassifier(_MLPBase):
    """Multilayer perceptron with optional dropout or dropconnect.

    ``predict_proba`` is the deterministic, mask-free prediction.
    ``sample_proba`` keeps masks active and returns ``T`` Monte Carlo samples
    (MC-Dropout or MC-DropConnect depending on ``drop_mode``).

    Parameters
    ----------
    hidden_dims : tuple of int, default=(64,)
    num_classes : int or None, default=None
    drop_rate : float, default=0.0
    drop_mode : {'none', 'dropout', 'dropconnect'}, default='none'
    optimizer : {'adam', 'sgd'}, default='adam'
    learning_rate : float or None, default=None
        1e-3 for Adam, 1e-2 for SGD when None.
    decay : float, default=0.0
        SGD learning-rate decay, ``lr0 / (1 + decay * step)``.
    epochs : int, default=80
    batch_size : int, default=32
    random_state : int or None, default=0

    Attributes
    ----------
    config_ : ModelConfig
    params_ : ModelParams
    loss_history_ : list of float
    classes_ : ndarray of shape (K,)
    """

    def __init__(
        self,
        hidden_dims=(64,),
        num_classes=None,
        drop_rate=0.0,
        drop_mode="none",
        optimizer="adam",
        learning_rate=None,
        decay=0.0,
        epochs=80,
        batch_size=32,
        random_state=0,
    ):
        self.hidden_dims = hidden_dims
        self.num_classes = num_classes
        self.drop_rate = drop_rate
        self.drop_mode = drop_mode
        self.optimizer = optimizer
        self.learning_rate = learning_rate
        self.decay = decay
        self.epochs = epochs
        self.batch_size = batch_size
        self.random_state = random_state

    def fit(self, X, y):
        X, y = self._check_fit_data(X, y)
        self.config_ = self._config(_resolve_seed(self.random_state), self.drop_mode, self.drop_rate)
        state = OptimizerState(kind=self.optimizer, learning_rate=self.learning_rate, decay=self.decay)
        self.params_, self.loss_history_ = train(
            self.config_, X, y, epochs=self.epochs, batch_size=self.batch_size, optimizer=state
        )
        return self

    def predict_proba(self, X):
        return softmax(forward(self.params_, self._check_X(X)))

    def sample_proba(self, X, n_samples=15, random_state=0):
        """Monte Carlo predictive samples of shape ``(n_samples, n, K)``.

        Without a drop mode every sample is the deterministic prediction.
        """
        X = self._check_X(X)
        seed = _resolve_seed(random_state)
        if self.config_.drop_mode == "dropout":
            return mc_dropout_predict(self.params_, self.config_, X, n_samples, seed)
        if self.config_.drop_mode == "dropconnect":
            return mc_dropconnect_predict(self.params_, self.config_, X, n_samples, seed)
        if int(n_samples) < 1:
            raise ValidationError(f"n_samples must be >= 1, got {n_samples}")
        p = self.predict_proba(X)
        return PredictiveSamples(np.repeat(p[None], int(n_samples), axis=0), "deterministic")

    def mc_predict_proba(self, X, n_samples=15, random_state=0):
        return self.sample_proba(X, n_samples, random_state).mean

    def save(self, path):
        check_is_fitted(self)
        save_model(path, self.config_, self.params_)

    @classmethod
    def load(cls, path):
        config, params = load_model(path)
        est = cls(
            hidden_dims=config.hidden_dims,
            num_classes=config.num_classes,
            drop_rate=config.drop_rate,
            drop_mode=config.drop_mode,
            random_state=config.seed,
        )
        est.config_, est.params_ = config, params
        est.classes_ = np.arange(config.num_classes)
        est.n_features_in_ = config.input_dim
        est.loss_history_ = []
        return est


class DeepEnsembleClassifier(_MLPBase):
    """Average of ``n_estimators`` independently seeded MLPs.

    Member ``i`` is trained with seed ``random_state + i``. Members may use
    dropout or dropconnect while training, but always predict without masks.
    ``n_estimators=1`` is an ordinary network.

    Parameters
    ----------
    n_estimators : int, default=5
    n_jobs : int or None, default=None
        Members trained in parallel via joblib.

    The remaining parameters match :class:`StochasticMLPClassifier`.
    """

    def __init__(
        self,
        n_estimators=5,
        hidden_dims=(64,),
        num_classes=None,
        drop_rate=0.0,
        drop_mode="none",
        optimizer="adam",
        learning_rate=None,
        decay=0.0,
        epochs=80,
        batch_size=32,
        random_state=0,
        n_jobs=None,
    ):
        self.n_estimators = n_estimators
        self.hidden_dims = hidden_dims
        self.num_classes = num_classes
        self.drop_rate = drop_rate
        self.drop_mode = drop_mode
        self.optimizer = optimizer
        self.learning_rate = learning_rate
        self.decay = decay
        self.epochs = epochs
        self.batch_size = batch_size
        self.random_state = random_state
        self.n_jobs = n_jobs

    def fit(self, X, y):
        X, y = self._check_fit_data(X, y)
        seed = _resolve_seed(self.random_state)
        config = self._config(seed, self.drop_mode, self.drop_rate)
        self.ensemble_ = train_ensemble(
            config,
            X,
            y,
            self.n_estimators,
            epochs=self.epochs,
            batch_size=self.batch_size,
            optimizer=self.optimizer,
            learning_rate=self.learning_rate,
            decay=self.decay,
            base_seed=seed,
            n_jobs=self.n_jobs,
        )
        self.loss_histories_ = self.ensemble_.histories
        return self

    def sample_proba(self, X, n_members=None):
        """Per-member probabilities ``(n_members, n, K)`` in member order."""
        X = self._check_X(X)
        ensemble = self.ensemble_ if n_members is None else self.ensemble_.prefix(int(n_members))
        return ensemble_predict(ensemble, X)

    def predict_proba(self, X):
        return self.sample_proba(X).mean

    def save(self, directory):
        check_is_fitted(self)
        save_ensemble(directory, self.ensemble_)

    @classmethod
    def load(cls, directory):
        ensemble = load_ensemble(directory)
        c = ensemble.config
        est = cls(
            n_estimators=ensemble.n_members,
            hidden_dims=c.hidden_dims,
            num_classes=c.num_classes,
            drop_rate=c.drop_rate,
            drop_mode=c.drop_mode,
            random_state=ensemble.base_seed,
        )
        est.ensemble_ = ensemble
        est.classes_ = np.arange(c.num_classes)
        est.n_features_in_ = c.input_dim
        est.loss_histories_ = []
        return est
