"""scikit-learn style front ends.

``ZinbGroupRegressor`` fits one AE group from (vaccine label, count, offset)
triples. ``SignalMiner`` runs the full report-level analysis.
"""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, RegressorMixin
from sklearn.utils.validation import check_array, check_consistent_length, check_is_fitted

from .ingest import FilterPolicy
from .shrink import posterior_lambda_mean, posterior_zero_weight
from .signal import MiningResult, PermutationPlan, mine, prepare
from .zinb import FitConfig, GroupDesign, ZinbParams, fit_group


def _labels(X):
    X = np.asarray(X, dtype=object)
    if X.ndim == 2:
        if X.shape[1] != 1:
            raise ValueError("X must hold a single column of vaccine labels")
        X = X[:, 0]
    if X.ndim != 1:
        raise ValueError("X must be 1-D or a single column")
    return X


class ZinbGroupRegressor(RegressorMixin, BaseEstimator):
    """ZINB regression on vaccine indicators with a log offset.

    Parameters
    ----------
    grad_tol : float
        Projected-gradient infinity-norm tolerance.
    max_iter : int
        Maximum quasi-Newton iterations.
    alpha_clamp, phi_clamp : float
        Bounds on ``|logit p|`` and ``|log mu|``.
    log_r_bounds : tuple of float
        Bounds on ``log r``.

    Attributes
    ----------
    classes_ : ndarray
        Vaccine labels in parameter order.
    p_, mu_ : ndarray
        Zero-inflation probability and count-part mean per vaccine.
    r_ : float
        Shared dispersion.
    s_ : ndarray
        Group relative reporting rate per vaccine, ``(1 - p_) * mu_``.
    fit_ : GroupFit
        Optimizer diagnostics.
    """

    def __init__(self, grad_tol=1e-8, max_iter=500, alpha_clamp=10.0, phi_clamp=15.0, log_r_bounds=(-10.0, 20.0)):
        self.grad_tol = grad_tol
        self.max_iter = max_iter
        self.alpha_clamp = alpha_clamp
        self.phi_clamp = phi_clamp
        self.log_r_bounds = log_r_bounds

    def _config(self):
        return FitConfig(self.grad_tol, self.max_iter, self.alpha_clamp, self.phi_clamp, tuple(self.log_r_bounds))

    def _index(self, X):
        labels = _labels(X)
        pos = {c: i for i, c in enumerate(self.classes_)}
        try:
            return np.array([pos[v] for v in labels], dtype=np.intp)
        except KeyError as err:
            raise ValueError(f"unknown vaccine label {err.args[0]!r}") from None

    def _offset(self, offset, n):
        if offset is None:
            return np.ones(n)
        offset = check_array(np.asarray(offset, dtype=float).reshape(-1, 1), ensure_all_finite=True).ravel()
        check_consistent_length(offset, np.empty(n))
        return offset

    def fit(self, X, y, offset=None):
        labels = _labels(X)
        y = check_array(np.asarray(y, dtype=float).reshape(-1, 1)).ravel()
        check_consistent_length(labels, y)
        M = self._offset(offset, len(y))
        self.classes_ = np.array(sorted(set(labels.tolist())), dtype=object)
        design = GroupDesign(y, M, self._index(labels), len(self.classes_))
        self.fit_ = fit_group(design, self._config())
        self.p_ = np.asarray(self.fit_.params.p, dtype=float)
        self.mu_ = np.asarray(self.fit_.params.mu, dtype=float)
        self.r_ = float(self.fit_.params.r)
        self.s_ = self.fit_.s
        self.n_features_in_ = 1
        return self

    def _entry_params(self, X):
        idx = self._index(X)
        return ZinbParams(self.p_[idx], self.mu_[idx], self.r_)

    def predict(self, X, offset=None):
        """Expected count ``(1 - p) * mu * M``."""
        check_is_fitted(self)
        labels = _labels(X)
        M = self._offset(offset, len(labels))
        idx = self._index(labels)
        return self.s_[idx] * M

    def posterior_mean(self, X, y, offset=None):
        """Shrunken per-AE rate multipliers for observed counts."""
        check_is_fitted(self)
        labels = _labels(X)
        y = np.asarray(y, dtype=float)
        M = self._offset(offset, len(labels))
        return posterior_lambda_mean(y, self._entry_params(labels), M)

    def zero_weight(self, X, offset=None):
        check_is_fitted(self)
        labels = _labels(X)
        M = self._offset(offset, len(labels))
        return posterior_zero_weight(self._entry_params(labels), M)


class SignalMiner(BaseEstimator):
    """Group and AE-level signal mining over a list of reports.

    ``fit(reports, ontology)`` filters the data, fits every AE group,
    generates the permutation null and stores the flagged table in
    ``signal_table_``.
    """

    def __init__(
        self,
        min_ae_frequency=20,
        min_group_size=15,
        vaccine_whitelist=None,
        n_permutations=1000,
        seed=0,
        alpha=0.01,
        s_min=3.0,
        grad_tol=1e-8,
        max_iter=500,
        n_jobs=1,
    ):
        self.min_ae_frequency = min_ae_frequency
        self.min_group_size = min_group_size
        self.vaccine_whitelist = vaccine_whitelist
        self.n_permutations = n_permutations
        self.seed = seed
        self.alpha = alpha
        self.s_min = s_min
        self.grad_tol = grad_tol
        self.max_iter = max_iter
        self.n_jobs = n_jobs

    def fit(self, X, y=None):
        """``X`` is a sequence of reports, ``y`` the ontology."""
        if y is None:
            raise ValueError("an ontology is required")
        whitelist = None if self.vaccine_whitelist is None else frozenset(self.vaccine_whitelist)
        policy = FilterPolicy(self.min_ae_frequency, self.min_group_size, whitelist)
        self.data_ = prepare(list(X), y, policy)
        plan = PermutationPlan(self.n_permutations, self.seed)
        config = FitConfig(grad_tol=self.grad_tol, max_iter=self.max_iter)
        self.result_: MiningResult = mine(self.data_, plan, config, self.alpha, self.s_min, self.n_jobs)
        self.signal_table_ = self.result_.table
        self.vaccines_ = self.data_.vaccines
        self.groups_ = self.data_.groups
        self.s_ = self.result_.heatmap
        return self

    def signals(self):
        """Flagged group rows."""
        check_is_fitted(self)
        return self.signal_table_.flagged_groups
