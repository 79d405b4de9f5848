"""scikit-learn style wrappers around the training procedures."""

import numpy as np
from scipy.special import expit
from sklearn.base import BaseEstimator, ClassifierMixin
from sklearn.preprocessing import StandardScaler
from sklearn.utils.multiclass import unique_labels
from sklearn.utils.validation import check_array, check_is_fitted, check_X_y

from .optimize import TrainConfig, fit_meanfield, fit_rvrs, fit_vrs
from .rng import stream
from .sampler import AcceptanceConfig, estimate_Zr, rejection_sample
from .target import LogisticRegressionTarget


class RVRSLogisticRegression(ClassifierMixin, BaseEstimator):
    """Bayesian logistic regression fit with a rejection-sampled variational family.

    Parameters
    ----------
    Z_tgt : float
        Target acceptance rate; lower values buy a more flexible posterior
        approximation with more proposals per sample.
    method : {"rvrs", "vrs", "meanfield"}
        Proposal-gradient estimator; ``"meanfield"`` stops after the
        conventional ELBO fit.
    total_iters, meanfield_iters : int
        Iterations of the rejection-sampled and mean-field phases.
    base_lr, meanfield_lr : float
        Initial Adam learning rates of the two phases.
    S : int
        Accepted samples per gradient step.
    epsilon : float
        Floor of the acceptance probability.
    family : {"meanfield", "fullrank"}
        Proposal family.
    fit_intercept : bool
        Append a constant feature.
    n_predictive_samples : int
        Posterior samples averaged in :meth:`predict_proba`.
    random_state : int
    """

    def __init__(self, Z_tgt=0.3, method="rvrs", total_iters=3000, meanfield_iters=3000, base_lr=1e-3,
                 meanfield_lr=1e-2, S=2, epsilon=1e-4, family="meanfield", fit_intercept=True,
                 n_predictive_samples=1000, random_state=0):
        self.Z_tgt = Z_tgt
        self.method = method
        self.total_iters = total_iters
        self.meanfield_iters = meanfield_iters
        self.base_lr = base_lr
        self.meanfield_lr = meanfield_lr
        self.S = S
        self.epsilon = epsilon
        self.family = family
        self.fit_intercept = fit_intercept
        self.n_predictive_samples = n_predictive_samples
        self.random_state = random_state

    def _design(self, X):
        X = self.scaler_.transform(X)
        if self.fit_intercept:
            X = np.hstack([X, np.ones((X.shape[0], 1))])
        return X

    def fit(self, X, y):
        X, y = check_X_y(X, y)
        self.classes_ = unique_labels(y)
        if len(self.classes_) != 2:
            raise ValueError("RVRSLogisticRegression supports binary targets only")
        if self.method not in ("rvrs", "vrs", "meanfield"):
            raise ValueError(f"unknown method {self.method!r}")
        self.scaler_ = StandardScaler().fit(X)
        self.n_features_in_ = X.shape[1]
        labels = (y == self.classes_[1]).astype(float)
        self.target_ = LogisticRegressionTarget(self._design(X), labels, standardize=False)
        cfg = TrainConfig(total_iters=self.total_iters, S=self.S, Z_tgt=self.Z_tgt, epsilon=self.epsilon,
                          base_lr=self.base_lr, seed=self.random_state, meanfield_iters=self.meanfield_iters,
                          meanfield_lr=self.meanfield_lr, family=self.family)
        if self.method == "meanfield":
            self.proposal_, self.trace_ = fit_meanfield(self.target_, cfg=cfg)
            self.acceptance_ = AcceptanceConfig(float("inf"), 0.0)
        else:
            fit = fit_rvrs if self.method == "rvrs" else fit_vrs
            res = fit(self.target_, None, cfg)
            self.proposal_, self.acceptance_, self.trace_ = res.proposal, res.acceptance, res.trace
        return self

    def sample_posterior(self, n, random_state=None):
        """Draw ``n`` weight vectors from the fitted variational distribution."""
        check_is_fitted(self, "proposal_")
        seed = self.random_state if random_state is None else random_state
        return rejection_sample(self.target_, None, self.proposal_, self.acceptance_, stream(seed, 11), n).z

    def acceptance_rate(self, M=100_000):
        check_is_fitted(self, "proposal_")
        return estimate_Zr(self.target_, None, self.proposal_, self.acceptance_, stream(self.random_state, 12), M)[0]

    def predict_proba(self, X):
        check_is_fitted(self, "proposal_")
        X = check_array(X)
        if X.shape[1] != self.n_features_in_:
            raise ValueError(f"expected {self.n_features_in_} features, got {X.shape[1]}")
        w = self.sample_posterior(self.n_predictive_samples)
        p1 = np.mean(expit(self._design(X) @ w.T), axis=1)
        return np.column_stack([1.0 - p1, p1])

    def predict(self, X):
        check_is_fitted(self, "proposal_")
        return self.classes_[(self.predict_proba(X)[:, 1] > 0.5).astype(int)]
