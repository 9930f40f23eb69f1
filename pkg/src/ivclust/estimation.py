"""Regression machinery for instrument selection.

Covers the first stage, the reduced form, every just-identified 2SLS
estimate, the post-selection 2SLS fit with its oracle-style covariance, the
Sargan overidentification statistic and first-stage strength diagnostics.

All least-squares solves run through orthogonal decompositions, never
explicit normal-equation inverses: the candidate instruments are typically
correlated and conditioning matters.  The instrument matrix is factored
once per dataset (QR) and cached; every split of the candidates into
instruments and controls is then evaluated in the J-dimensional coordinate
space of that factorization, which keeps repeated tests along a selection
path cheap without changing any estimate.
"""

import itertools
import math
from dataclasses import dataclass

import numpy as np
from scipy import stats
from scipy.linalg import solve_triangular

from .data import IVCombination, ModelFit, RankDeficientError, n_combinations

#: relative size of u'u under which a fit counts as exact (noiseless data)
_PERFECT_FIT_RTOL = 1e-20

#: relative diagonal threshold for detecting a rank-deficient QR factor
_QR_RANK_RTOL = 1e-13

_MOMENTS_ATTR = "_iv_moments"


class SingularSystemError(ValueError):
    """An exactly singular just-identified first-stage block."""


class SingularDesignError(ValueError):
    """The post-selection design has no full-rank projected first stage."""


class CombinationCapError(ValueError):
    """More instrument combinations than the configured cap allows."""


@dataclass(frozen=True, eq=False)
class JustIdentifiedEstimate:
    """A P-subset of instruments with its just-identified point estimate.

    ``rcond_gamma`` is the reciprocal condition number of the P x P
    first-stage block of the combination; values below the configured floor
    mark near-singular (weak) combinations whose estimates may be huge.
    ``alpha_controls`` holds the implied coefficients on the remaining J - P
    instruments treated as controls.
    """

    combo: IVCombination
    beta: np.ndarray
    rcond_gamma: float
    alpha_controls: np.ndarray

    def __post_init__(self):
        beta = np.array(np.atleast_1d(self.beta), dtype=float)
        beta.flags.writeable = False
        alpha = np.array(np.atleast_1d(self.alpha_controls), dtype=float)
        alpha.flags.writeable = False
        object.__setattr__(self, "beta", beta)
        object.__setattr__(self, "alpha_controls", alpha)
        object.__setattr__(self, "rcond_gamma", float(self.rcond_gamma))


@dataclass(frozen=True)
class SarganOutcome:
    """Sargan overidentification test result.

    ``df`` is the overidentifying degree (instruments used as instruments
    minus P); a just-identified model has df = 0, statistic 0 and passes
    vacuously.
    """

    statistic: float
    df: int
    p_value: float
    critical_value: float
    passed: bool


class _Moments:
    """Per-dataset QR factorization of Z and the cross moments.

    ``Q R = Z`` with Q of shape (n, J).  ``zt_y = Q'y`` and ``zt_D = Q'D``
    are the instrument-space coordinates of outcome and regressors; any
    instruments-versus-controls split works on columns of R.
    """

    def __init__(self, dataset):
        Z = dataset.Z
        self.Q, self.R = np.linalg.qr(Z)
        rdiag = np.abs(np.diag(self.R))
        self.rank_ok = bool(
            rdiag.size == 0 or (rdiag.min() > _QR_RANK_RTOL * max(rdiag.max(), 1e-300))
        )
        self.zt_y = self.Q.T @ dataset.y
        self.zt_D = self.Q.T @ dataset.D

    def control_basis(self, cidx):
        """Orthonormal coordinate basis of the control columns."""
        if not cidx:
            return np.zeros((self.R.shape[0], 0))
        q1, _ = np.linalg.qr(self.R[:, cidx])
        return q1


def _moments(dataset):
    cached = dataset.__dict__.get(_MOMENTS_ATTR)
    if cached is None:
        cached = _Moments(dataset)
        object.__setattr__(dataset, _MOMENTS_ATTR, cached)
    return cached


def _normalize_valid(valid, J, P):
    idx = tuple(sorted({int(i) for i in valid}))
    if any(i < 0 or i >= J for i in idx):
        raise ValueError(f"instrument indices out of range [0, {J}): {idx}")
    if len(idx) < P:
        raise ValueError(f"need at least P={P} valid instruments, got {len(idx)}")
    return idx


def _complement(vidx, J):
    vset = set(vidx)
    return tuple(j for j in range(J) if j not in vset)


def first_stage(dataset):
    """OLS first-stage coefficients of D on Z, a J x P matrix.

    Raises :class:`~ivclust.data.RankDeficientError` when Z is rank
    deficient.
    """
    mo = _moments(dataset)
    if not mo.rank_ok:
        raise RankDeficientError("instrument matrix is rank deficient")
    return solve_triangular(mo.R, mo.zt_D)


def _first_stage_and_reduced(dataset):
    mo = _moments(dataset)
    if not mo.rank_ok:
        raise RankDeficientError("instrument matrix is rank deficient")
    both = solve_triangular(mo.R, np.column_stack([mo.zt_D, mo.zt_y]))
    return both[:, : dataset.P], both[:, dataset.P]


def just_identified_all(dataset, config):
    """All just-identified 2SLS estimates, one per P-subset of instruments.

    Each combination uses its P instruments as instruments and the
    remaining J - P as included controls.  The estimates are obtained from
    the first-stage and reduced-form coefficients: with ``gamma_c`` the
    P x P block of first-stage rows for the combination and ``Gamma`` the
    reduced form, ``beta = gamma_c^{-1} Gamma_c`` and the control
    coefficients are ``Gamma_rest - gamma_rest beta``.  Combinations whose
    block is near-singular are kept, flagged through ``rcond_gamma``; only
    an exactly singular block raises.

    Output order is lexicographic in the combination indices.
    """
    J, P = dataset.J, dataset.P
    total = n_combinations(J, P)
    if total > config.max_combinations:
        raise CombinationCapError(
            f"binom(J={J}, P={P}) = {total} combinations exceed the cap "
            f"{config.max_combinations}; raise SelectionConfig.max_combinations "
            "to proceed"
        )
    gamma, Gamma = _first_stage_and_reduced(dataset)
    out = []
    if P == 1:
        g = gamma[:, 0]
        for j in range(J):
            if g[j] == 0.0:
                raise SingularSystemError(
                    f"first-stage coefficient of instrument {j} is exactly zero"
                )
            beta = Gamma[j] / g[j]
            rest = np.concatenate([np.arange(j), np.arange(j + 1, J)])
            alpha_c = Gamma[rest] - g[rest] * beta
            out.append(
                JustIdentifiedEstimate(IVCombination((j,)), np.array([beta]), 1.0, alpha_c)
            )
        return out
    all_idx = np.arange(J)
    for combo in itertools.combinations(range(J), P):
        rows = np.asarray(combo)
        block = gamma[rows, :]
        U, s, Vt = np.linalg.svd(block)
        if s[-1] == 0.0:
            raise SingularSystemError(
                f"first-stage block for combination {combo} is exactly singular"
            )
        rcond = float(s[-1] / s[0])
        beta = Vt.T @ ((U.T @ Gamma[rows]) / s)
        rest = np.setdiff1d(all_idx, rows, assume_unique=True)
        alpha_c = Gamma[rest] - gamma[rest, :] @ beta
        out.append(JustIdentifiedEstimate(IVCombination(combo), beta, rcond, alpha_c))
    return out


def _tsls_core(dataset, vidx):
    """2SLS with Z[vidx] as instruments, complement as controls.

    Works in instrument-space coordinates: with ``q1`` an orthonormal basis
    of the control columns, the coefficient on D solves the least-squares
    system ``F beta = f_y`` where F and f_y are the coordinates of D-hat
    and y residualized on the controls.  Returns the fit pieces plus the
    coordinate residual needed by the Sargan statistic.
    """
    J, P, n = dataset.J, dataset.P, dataset.n
    mo = _moments(dataset)
    cidx = _complement(vidx, J)
    q1 = mo.control_basis(cidx)
    if q1.shape[1]:
        F = mo.zt_D - q1 @ (q1.T @ mo.zt_D)
        f_y = mo.zt_y - q1 @ (q1.T @ mo.zt_y)
    else:
        F = mo.zt_D
        f_y = mo.zt_y
    beta, _, rank, _ = np.linalg.lstsq(F, f_y, rcond=None)
    if rank < P:
        raise SingularDesignError(
            f"projected first stage for the selected valid set has rank {rank} < P={P}"
        )
    if cidx:
        M1 = mo.R[:, cidx]
        alpha, *_ = np.linalg.lstsq(M1, mo.zt_y - mo.zt_D @ beta, rcond=None)
        u = dataset.y - dataset.D @ beta - dataset.Z[:, cidx] @ alpha
    else:
        alpha = np.zeros(0)
        u = dataset.y - dataset.D @ beta
    # covariance of beta: sigma^2 (F'F)^{-1} through the QR of F
    _, rf = np.linalg.qr(F)
    rdiag = np.abs(np.diag(rf))
    if np.any(rdiag == 0.0):
        raise SingularDesignError(
            f"projected first stage for the selected valid set is singular"
        )
    rinv = solve_triangular(rf, np.eye(P))
    uu = float(u @ u)
    sigma_u2 = uu / n
    vcov = sigma_u2 * (rinv @ rinv.T)
    vcov = 0.5 * (vcov + vcov.T)
    fit = ModelFit(beta=beta, alpha=alpha, residuals=u, vcov_beta=vcov, sigma_u2=sigma_u2)
    return fit, mo, q1, cidx, uu


def post_selection_tsls(dataset, valid):
    """2SLS treating ``valid`` instruments as instruments, the rest as controls.

    beta solves the projected system ``(Dhat' M_C Dhat) beta = Dhat' M_C y``
    with ``Dhat`` the first-stage fitted values on the full instrument set
    and ``C`` the instruments selected as invalid; ``vcov_beta`` is
    ``sigma_u^2 (Dhat' M_C Dhat)^{-1}`` with ``sigma_u^2 = u'u / n``.
    Residuals use the observed regressors: ``u = y - D beta - C alpha``.
    """
    vidx = _normalize_valid(valid, dataset.J, dataset.P)
    fit, *_ = _tsls_core(dataset, vidx)
    return fit


def sargan(dataset, valid, config):
    """Sargan overidentification test of the selected valid set.

    The statistic is ``u' P u / (u'u / n)`` where ``u`` is the
    post-selection 2SLS residual and ``P`` projects on the valid
    instruments residualized on the controls (equivalently, on the full
    instrument set, since the residual is orthogonal to the controls).  The
    critical value is the chi-square quantile with ``|valid| - P`` degrees
    of freedom at level ``1 - alpha``, with alpha from the configuration
    rule.  A just-identified set (df = 0) passes vacuously; an exact fit
    (zero residual, as on noiseless data) yields statistic 0.
    """
    J, P, n = dataset.J, dataset.P, dataset.n
    vidx = _normalize_valid(valid, J, P)
    df = len(vidx) - P
    if df == 0:
        return SarganOutcome(0.0, 0, 1.0, 0.0, True)
    level = config.significance_level(n)
    crit = float(stats.chi2.ppf(1.0 - level, df))
    fit, mo, q1, cidx, uu = _tsls_core(dataset, vidx)
    yy = float(dataset.y @ dataset.y)
    if uu <= _PERFECT_FIT_RTOL * max(yy, np.finfo(float).tiny):
        return SarganOutcome(0.0, df, 1.0, crit, True)
    # coordinates of the valid instruments residualized on the controls
    M2 = mo.R[:, vidx]
    if q1.shape[1]:
        M2 = M2 - q1 @ (q1.T @ M2)
    q2, _ = np.linalg.qr(M2)
    qu = mo.Q.T @ fit.residuals
    proj = q2.T @ qu
    statistic = float(proj @ proj) / (uu / n)
    p_value = float(stats.chi2.sf(statistic, df))
    return SarganOutcome(statistic, df, p_value, crit, bool(statistic < crit))


def first_stage_strength(dataset, valid):
    """First-stage strength of the valid set, controls included.

    For one endogenous regressor this is the F statistic of the excluded
    (valid) instruments in the first stage; for several it is the
    Cragg-Donald minimum-eigenvalue statistic.  Both divide the explained
    block by the number of valid instruments and the residual variance by
    ``n - J``.  Returns 0 when the valid instruments add nothing beyond the
    controls, and infinity when a nonzero first stage fits exactly.
    """
    J, P, n = dataset.J, dataset.P, dataset.n
    vidx = _normalize_valid(valid, J, P)
    cidx = _complement(vidx, J)
    mo = _moments(dataset)
    q1 = mo.control_basis(cidx)
    M2 = mo.R[:, vidx]
    zt_D = mo.zt_D
    if q1.shape[1]:
        M2 = M2 - q1 @ (q1.T @ M2)
        t1 = q1.T @ zt_D
    else:
        t1 = np.zeros((0, P))
    q2, _ = np.linalg.qr(M2)
    t2 = q2.T @ zt_D
    A = t2.T @ t2  # D' (P_[Zv,C] - P_C) D
    DD = dataset.D.T @ dataset.D
    scale = float(np.trace(DD))
    if float(np.trace(A)) <= 1e-20 * max(scale, np.finfo(float).tiny):
        return 0.0
    # residual moment of the full first stage: D'D - D'P_[Zv,C]D
    full = mo.zt_D.T @ mo.zt_D
    E = DD - full
    dof = n - J
    B = E / dof
    q = len(vidx)
    if P == 1:
        if B[0, 0] <= 1e-20 * max(scale, np.finfo(float).tiny) / dof:
            return math.inf
        return float(A[0, 0] / q / B[0, 0])
    eig_b = np.linalg.eigvalsh(B)
    if eig_b[0] <= 0 or eig_b[0] < 1e-14 * eig_b[-1]:
        return math.inf
    from scipy.linalg import eigh

    lam = eigh(A, B, eigvals_only=True)
    return float(lam[0] / q)
