"""scikit-learn style wrappers.

Inputs are 3-D arrays ``(n_samples, T, n_features)`` of time-major
sequences. The depth switch of a fitted classifier is an ordinary
parameter, so ``clf.set_params(delta=2).predict(X)`` runs the thinner
network without refitting.
"""
import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin, TransformerMixin
from sklearn.utils.multiclass import check_classification_targets
from sklearn.utils.validation import check_array, check_is_fitted

from . import wavelet
from .binarize import sign
from .errors import ConfigError, DegenerateError
from .fsmn import count_flops, default_delta_set, forward_batch, init_model, softmax
from .trainer import ToyDataset, TrainConfig, fit, train_teacher


def check_sequences(X, n_features=None):
    """Validate a batch of sequences and return it as float32 ``(n, T, F)``."""
    X = check_array(X, allow_nd=True, ensure_2d=False, dtype=np.float32)
    if X.ndim == 2:
        X = X[None]
    if X.ndim != 3:
        raise ValueError(f"expected (n_samples, T, n_features), got shape {X.shape}")
    if n_features is not None and X.shape[2] != n_features:
        raise ValueError(f"X has {X.shape[2]} features, estimator was fitted with {n_features}")
    return X


class BiFSMNClassifier(ClassifierMixin, BaseEstimator):
    """Thinnable binarized FSMN classifier trained with wavelet distillation.

    With ``distill=True`` and ``gamma > 0`` a full-precision teacher of the
    same topology is trained first (``teacher_``) and used for
    high-frequency enhanced attention distillation.
    """

    def __init__(
        self,
        n_blocks=4,
        hidden_dim=32,
        proj_dim=32,
        n_back=2,
        n_ahead=1,
        stride_back=1,
        stride_ahead=1,
        delta_set=None,
        binarized=True,
        gamma=0.01,
        distill=True,
        learning_rate=0.05,
        max_iter=1500,
        teacher_iter=500,
        batch_size=32,
        delta=1,
        random_state=0,
    ):
        self.n_blocks = n_blocks
        self.hidden_dim = hidden_dim
        self.proj_dim = proj_dim
        self.n_back = n_back
        self.n_ahead = n_ahead
        self.stride_back = stride_back
        self.stride_ahead = stride_ahead
        self.delta_set = delta_set
        self.binarized = binarized
        self.gamma = gamma
        self.distill = distill
        self.learning_rate = learning_rate
        self.max_iter = max_iter
        self.teacher_iter = teacher_iter
        self.batch_size = batch_size
        self.delta = delta
        self.random_state = random_state

    def _arch(self):
        return dict(
            hidden_dim=self.hidden_dim, proj_dim=self.proj_dim, n_back=self.n_back,
            n_ahead=self.n_ahead, stride_back=self.stride_back, stride_ahead=self.stride_ahead,
        )

    def fit(self, X, y):
        X = check_sequences(X)
        check_classification_targets(y)
        self.classes_, y_enc = np.unique(y, return_inverse=True)
        if len(self.classes_) < 2:
            raise ValueError("need at least two classes")
        seed = 0 if self.random_state is None else int(self.random_state)
        data = ToyDataset(X, y_enc, X[:0], y_enc[:0], len(self.classes_))
        self.teacher_ = None
        if self.distill and self.gamma > 0:
            self.teacher_ = train_teacher(
                data, self.n_blocks, seed=seed, iterations=self.teacher_iter,
                learning_rate=self.learning_rate, **self._arch(),
            )
        delta_set = tuple(self.delta_set or default_delta_set(self.n_blocks))
        self.model_ = init_model(
            X.shape[2], len(self.classes_), n_blocks=self.n_blocks, delta_set=delta_set,
            binarized=self.binarized, frames=X.shape[1], seed=seed + 1, **self._arch(),
        )
        cfg = TrainConfig(
            iterations=self.max_iter, learning_rate=self.learning_rate,
            gamma=self.gamma if self.teacher_ is not None else 0.0,
            seed=seed, batch_size=self.batch_size, eval_every=max(1, self.max_iter),
        )
        self.log_ = fit(self.model_, data, cfg, teacher=self.teacher_)
        self.n_features_in_ = X.shape[2]
        return self

    def _delta(self):
        if self.delta not in self.model_.delta_set:
            raise ConfigError(f"delta={self.delta} not in {list(self.model_.delta_set)}")
        return self.delta

    def decision_function(self, X):
        check_is_fitted(self, "model_")
        X = check_sequences(X, self.n_features_in_)
        trace, _ = forward_batch(self.model_, X, self._delta())
        return trace.logits

    def predict_proba(self, X):
        return softmax(self.decision_function(X))

    def predict(self, X):
        check_is_fitted(self, "model_")
        return self.classes_[np.argmax(self.decision_function(X), axis=1)]

    def flops(self, frames=None):
        check_is_fitted(self, "model_")
        return count_flops(self.model_, self._delta(), frames=frames)


class HaarEnergyTransformer(TransformerMixin, BaseEstimator):
    """Map each ``T x d`` map to its relative wavelet energies ``(p_high, p_low)``.

    With ``binarize=True`` the sign of the map is analysed instead.
    All-zero maps yield NaN.
    """

    def __init__(self, binarize=False):
        self.binarize = binarize

    def fit(self, X, y=None):
        X = check_sequences(X)
        self.n_features_in_ = X.shape[2]
        return self

    def transform(self, X):
        check_is_fitted(self, "n_features_in_")
        X = check_sequences(X, self.n_features_in_)
        out = np.empty((len(X), 2))
        for i, m in enumerate(X):
            if self.binarize:
                m = sign(m)
            try:
                out[i] = wavelet.relative_energy(wavelet.haar_dwt2(m))
            except DegenerateError:
                out[i] = np.nan
        return out


class HighFrequencyEnhancer(TransformerMixin, BaseEstimator):
    """Stateless transformer returning high-frequency enhanced maps."""

    def fit(self, X, y=None):
        X = check_sequences(X)
        self.n_features_in_ = X.shape[2]
        return self

    def transform(self, X):
        check_is_fitted(self, "n_features_in_")
        X = check_sequences(X, self.n_features_in_)
        return wavelet.enhance_batch(X).astype(np.float32)
