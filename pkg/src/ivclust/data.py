"""Observed-data containers, configuration and in-sample validation.

The data model is a linear outcome equation with possibly invalid
instruments,

.. math:: y = D \\beta + Z \\alpha + u, \\qquad D = Z \\gamma + \\varepsilon,

where a candidate instrument is valid when its direct-effect entry in
``alpha`` is zero.  Optional exogenous controls ``W`` (and an intercept) are
residualized out up front so that every downstream regression works on the
control-free model.
"""

import itertools
import math
from dataclasses import dataclass

import numpy as np

from .clustering import MetricSpec

#: singular-value ratio under which a matrix counts as rank deficient
RANK_RTOL = 1e-10


class RankDeficientError(ValueError):
    """A design or control matrix has linearly dependent columns."""


def _as_matrix(arr, name):
    out = np.asarray(arr, dtype=float)
    if out.ndim == 1:
        out = out[:, None]
    if out.ndim != 2:
        raise ValueError(f"{name} must be 1- or 2-dimensional, got shape {out.shape}")
    return out


def _freeze(arr):
    out = np.array(arr, dtype=float)
    out.flags.writeable = False
    return out


@dataclass(frozen=True, eq=False)
class Dataset:
    """Outcome, endogenous regressors, candidate instruments and controls.

    Parameters
    ----------
    y: array of shape (n,)
        Observed outcome.
    D: array of shape (n, P)
        Endogenous regressors (a vector is accepted for P = 1).
    Z: array of shape (n, J)
        Candidate instruments.
    W: array of shape (n, m), optional
        Exogenous controls; omitted or empty means no controls.
    intercept: bool
        Whether a constant is appended to the controls when partialling.

    All arrays are copied and frozen, so a dataset can be shared across
    concurrent tasks.  Statistical requirements (row budget, J > P, full
    instrument rank) are checked by :func:`validate`, not the constructor.
    """

    y: np.ndarray
    D: np.ndarray
    Z: np.ndarray
    W: np.ndarray = None
    intercept: bool = False

    def __post_init__(self):
        y = np.asarray(self.y, dtype=float).reshape(-1)
        D = _as_matrix(self.D, "D")
        Z = _as_matrix(self.Z, "Z")
        W = np.zeros((y.shape[0], 0)) if self.W is None else _as_matrix(self.W, "W")
        n = y.shape[0]
        for name, arr in (("D", D), ("Z", Z), ("W", W)):
            if arr.shape[0] != n:
                raise ValueError(
                    f"{name} has {arr.shape[0]} rows, expected {n} to match y"
                )
        object.__setattr__(self, "y", _freeze(y))
        object.__setattr__(self, "D", _freeze(D))
        object.__setattr__(self, "Z", _freeze(Z))
        object.__setattr__(self, "W", _freeze(W))
        object.__setattr__(self, "intercept", bool(self.intercept))

    @property
    def n(self):
        return self.y.shape[0]

    @property
    def P(self):
        return self.D.shape[1]

    @property
    def J(self):
        return self.Z.shape[1]

    @property
    def m(self):
        return self.W.shape[1]


@dataclass(frozen=True, order=True)
class IVCombination:
    """A set of P instrument indices identifying one just-identified model.

    Indices are strictly increasing, which makes equality and ordering
    canonical.
    """

    indices: tuple

    def __post_init__(self):
        idx = tuple(int(i) for i in self.indices)
        if len(idx) == 0:
            raise ValueError("combination must contain at least one index")
        if any(b <= a for a, b in zip(idx, idx[1:])):
            raise ValueError(f"indices must be strictly increasing, got {idx}")
        if idx[0] < 0:
            raise ValueError(f"indices must be nonnegative, got {idx}")
        object.__setattr__(self, "indices", idx)

    @classmethod
    def of(cls, indices):
        """Build from any iterable, sorting and checking for duplicates."""
        return cls(tuple(sorted(int(i) for i in indices)))

    def __len__(self):
        return len(self.indices)

    def __iter__(self):
        return iter(self.indices)


def all_combinations(J, P):
    """All P-subsets of ``range(J)`` in lexicographic order."""
    return [IVCombination(c) for c in itertools.combinations(range(J), P)]


def n_combinations(J, P):
    return math.comb(J, P)


@dataclass(frozen=True)
class SelectionConfig:
    """Tuning knobs for the selection pipeline.

    Parameters
    ----------
    metric: {"euclidean", "manhattan", "minkowski"}
        Dissimilarity between point estimates.
    minkowski_p: float
        Exponent for the Minkowski metric; must be positive.  Values below
        1 give a non-metric dissimilarity (documented in the clustering
        module).
    linkage: {"ward", "complete", "median", "centroid"}
        Cluster linkage; Ward requires the Euclidean metric.
    alpha: float or None
        Significance level for the Sargan test.  ``None`` selects the
        default rule ``0.1 / log(n)`` (natural log).
    min_condition: float
        Reciprocal-condition-number floor below which a just-identified
        first-stage block is flagged as near-singular.  Flagged estimates
        are still computed and clustered.
    max_combinations: int
        Cap on the number of P-subsets of instruments; guards the O(L^2)
        clustering memory.
    seed: int
        Bookkeeping seed echoed into reports; the selection pipeline itself
        is deterministic.
    """

    metric: str = "euclidean"
    minkowski_p: float = 2.0
    linkage: str = "ward"
    alpha: float = None
    min_condition: float = 1e-10
    max_combinations: int = 5000
    seed: int = 0

    def __post_init__(self):
        # MetricSpec performs the metric/linkage validation, including the
        # ward-requires-euclidean rule.
        self.metric_spec()
        if self.alpha is not None and not 0.0 < self.alpha < 1.0:
            raise ValueError(f"alpha must lie in (0, 1), got {self.alpha}")
        if self.min_condition < 0:
            raise ValueError("min_condition must be nonnegative")
        if self.max_combinations < 1:
            raise ValueError("max_combinations must be positive")

    def metric_spec(self):
        return MetricSpec(metric=self.metric, p=self.minkowski_p, linkage=self.linkage)

    def significance_level(self, n):
        """Sargan test level: the configured alpha, or 0.1 / log(n)."""
        if self.alpha is not None:
            return float(self.alpha)
        return 0.1 / math.log(n)


@dataclass(frozen=True, eq=False)
class ModelFit:
    """Post-selection 2SLS fit.

    ``beta`` are the coefficients on the endogenous regressors, ``alpha``
    the coefficients on instruments included as controls, ``vcov_beta`` the
    homoskedastic 2SLS covariance of ``beta`` and ``sigma_u2`` the residual
    variance with divisor n.
    """

    beta: np.ndarray
    alpha: np.ndarray
    residuals: np.ndarray
    vcov_beta: np.ndarray
    sigma_u2: float

    def __post_init__(self):
        object.__setattr__(self, "beta", _freeze(np.atleast_1d(self.beta)))
        object.__setattr__(self, "alpha", _freeze(np.atleast_1d(self.alpha)))
        object.__setattr__(self, "residuals", _freeze(self.residuals))
        object.__setattr__(self, "vcov_beta", _freeze(np.atleast_2d(self.vcov_beta)))
        object.__setattr__(self, "sigma_u2", float(self.sigma_u2))

    @property
    def se(self):
        return np.sqrt(np.diag(self.vcov_beta))


def _control_matrix(dataset):
    cols = [dataset.W] if dataset.m else []
    if dataset.intercept:
        cols.append(np.ones((dataset.n, 1)))
    if not cols:
        return np.zeros((dataset.n, 0))
    return np.column_stack(cols)


def validate(dataset):
    """Check the in-sample invariants of a dataset.

    Returns an empty list when every invariant holds, otherwise one
    human-readable diagnostic per violation.  Pure: repeated calls return
    identical diagnostics.
    """
    diags = []
    n, J, P, m = dataset.n, dataset.J, dataset.P, dataset.m
    if not n > J + P + m:
        diags.append(
            f"too few rows: n={n} must exceed J+P+m={J + P + m} to run every regression"
        )
    if not J > P:
        diags.append(
            f"model must be overidentified: J={J} candidate instruments for P={P} regressors"
        )
    B = _control_matrix(dataset)
    Z = dataset.Z
    if B.shape[1]:
        coef, *_ = np.linalg.lstsq(B, Z, rcond=None)
        Z = Z - B @ coef
    if Z.shape[0] >= 1 and Z.shape[1] >= 1:
        s = np.linalg.svd(Z, compute_uv=False)
        if s[0] == 0.0 or s[-1] / s[0] < RANK_RTOL:
            cond = np.inf if s[-1] == 0.0 else s[0] / s[-1]
            diags.append(
                "instrument matrix is rank deficient after partialling controls "
                f"(condition number {cond:.6g})"
            )
    return diags


def partial_out_controls(dataset):
    """Residualize y, D and Z on the controls (and intercept).

    Returns a dataset with empty ``W`` whose downstream selection matches
    selection with the controls carried through every regression.  The
    operation is idempotent; with no controls and no intercept it is the
    identity.
    """
    B = _control_matrix(dataset)
    if B.shape[1] == 0:
        return dataset
    s = np.linalg.svd(B, compute_uv=False)
    if s[0] == 0.0 or s[-1] / s[0] < RANK_RTOL:
        from scipy.linalg import qr

        _, r, piv = qr(B, mode="economic", pivoting=True)
        d = np.abs(np.diag(r))
        thresh = d[0] * RANK_RTOL if d.size and d[0] > 0 else 0.0
        dependent = sorted(int(piv[k]) for k in range(len(d)) if d[k] <= thresh)
        names = [
            "intercept" if (dataset.intercept and i == dataset.m) else f"W[{i}]"
            for i in dependent
        ]
        raise RankDeficientError(
            f"control matrix is rank deficient; dependent columns: {', '.join(names)}"
        )
    coef, *_ = np.linalg.lstsq(B, np.column_stack([dataset.y[:, None], dataset.D, dataset.Z]), rcond=None)
    resid = np.column_stack([dataset.y[:, None], dataset.D, dataset.Z]) - B @ coef
    P = dataset.P
    return Dataset(
        y=resid[:, 0],
        D=resid[:, 1 : 1 + P],
        Z=resid[:, 1 + P :],
        W=None,
        intercept=False,
    )
