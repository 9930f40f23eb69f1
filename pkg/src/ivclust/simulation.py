"""Monte Carlo harness: benchmark data-generating designs and method runners.

Candidate instruments are drawn from a multivariate normal with Toeplitz
correlation 0.5^|j-k|; the structural and first-stage errors are standard
normal with correlation 0.25.  The bundled designs cover a strong setting
with 21 candidates (12 invalid), its multi-regressor variants with uniform
first stages, and weak-instrument settings where some first-stage
coefficients are local to zero (C / sqrt(n) with C = 0.1).

Three methods are benchmarked per replication: ``oracle`` (2SLS on the true
strong-and-valid set), ``naive`` (all candidates treated as valid) and
``ahc`` (the clustering selection pipeline).  Replication r draws its RNG
stream from (seed, r), so reports are bit-identical across worker counts.
"""

import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np
from scipy import stats
from scipy.linalg import cholesky, toeplitz

from .data import Dataset, SelectionConfig
from .estimation import post_selection_tsls
from .selection import select_valid

METHODS = ("oracle", "naive", "ahc")

_RHO_Z = 0.5
_ERROR_CORR = 0.25
_C_ALPHA = 1.0
_C_GAMMA = 0.4
_C_WEAK = 0.1


def _frozen(arr):
    out = np.asarray(arr)
    out.flags.writeable = False
    return out


@dataclass(frozen=True, eq=False)
class SimulationDesign:
    """A fully specified data-generating process.

    ``gamma_base`` holds fixed first-stage entries, ``gamma_unif_lo/hi``
    bounds for entries redrawn uniformly each replication, and
    ``gamma_weak_mask`` marks entries equal to ``weak_scale / sqrt(n)``.
    ``weak_iv_mask`` flags instruments counted as weak for the selection
    metrics (weak in every first-stage column); the oracle model uses the
    valid instruments that are not weak.
    """

    name: str
    kind: str  # "strong" or "weak"; controls which metrics are defined
    n: int
    J: int
    P: int
    alpha: np.ndarray
    gamma_base: np.ndarray
    gamma_unif_lo: np.ndarray = None
    gamma_unif_hi: np.ndarray = None
    gamma_weak_mask: np.ndarray = None
    weak_scale: float = 0.0
    weak_iv_mask: np.ndarray = None
    beta: np.ndarray = None
    sigma_z_rho: float = _RHO_Z
    error_corr: float = _ERROR_CORR
    weak_C: float = _C_WEAK

    def __post_init__(self):
        J, P = self.J, self.P
        zero_mat = np.zeros((J, P))
        object.__setattr__(self, "alpha", _frozen(np.asarray(self.alpha, float)))
        object.__setattr__(self, "gamma_base", _frozen(np.asarray(self.gamma_base, float)))
        lo = zero_mat if self.gamma_unif_lo is None else np.asarray(self.gamma_unif_lo, float)
        hi = zero_mat if self.gamma_unif_hi is None else np.asarray(self.gamma_unif_hi, float)
        wm = (
            np.zeros((J, P), bool)
            if self.gamma_weak_mask is None
            else np.asarray(self.gamma_weak_mask, bool)
        )
        weak_iv = (
            np.zeros(J, bool)
            if self.weak_iv_mask is None
            else np.asarray(self.weak_iv_mask, bool)
        )
        beta = np.zeros(P) if self.beta is None else np.asarray(self.beta, float)
        object.__setattr__(self, "gamma_unif_lo", _frozen(lo))
        object.__setattr__(self, "gamma_unif_hi", _frozen(hi))
        object.__setattr__(self, "gamma_weak_mask", _frozen(wm))
        object.__setattr__(self, "weak_iv_mask", _frozen(weak_iv))
        object.__setattr__(self, "beta", _frozen(beta))
        if self.alpha.shape != (J,):
            raise ValueError(f"alpha must have shape ({J},)")
        for name in ("gamma_base", "gamma_unif_lo", "gamma_unif_hi", "gamma_weak_mask"):
            if getattr(self, name).shape != (J, P):
                raise ValueError(f"{name} must have shape ({J}, {P})")

    @property
    def valid_set(self):
        return frozenset(np.nonzero(self.alpha == 0.0)[0].tolist())

    @property
    def invalid_set(self):
        return frozenset(np.nonzero(self.alpha != 0.0)[0].tolist())

    @property
    def weak_set(self):
        return frozenset(np.nonzero(self.weak_iv_mask)[0].tolist())

    @property
    def oracle_valid_set(self):
        """Valid instruments that are not weak: the oracle model's set."""
        return frozenset(self.valid_set - self.weak_set)

    @property
    def oracle_invalid_set(self):
        return frozenset(range(self.J)) - self.oracle_valid_set


def _p1_alpha():
    return _C_ALPHA * np.r_[np.ones(6), 0.5 * np.ones(6), np.zeros(9)]


def _weak_p1(name, n, strong_rows):
    J = 21
    base = np.zeros((J, 1))
    weak = np.ones((J, 1), bool)
    for lo, hi in strong_rows:
        base[lo:hi, 0] = _C_GAMMA
        weak[lo:hi, 0] = False
    return SimulationDesign(
        name=name,
        kind="weak",
        n=n,
        J=J,
        P=1,
        alpha=_p1_alpha(),
        gamma_base=base,
        gamma_weak_mask=weak,
        weak_scale=_C_GAMMA * _C_WEAK,
        weak_iv_mask=weak[:, 0],
    )


def _weak_p2(name, n, base, lo, hi, weak):
    weak = np.asarray(weak, bool)
    alphas = {
        "weak_p2_d1": np.zeros(9),
        "weak_p2_d2": np.array([1, 1, 1, 0, 0, 0, 0, 1, 1.0]),
        "weak_p2_d3": np.array([0, 0, 1, 1, 1, 0, 1, 0, 0.0]),
    }
    return SimulationDesign(
        name=name,
        kind="weak",
        n=n,
        J=9,
        P=2,
        alpha=alphas[name],
        gamma_base=base,
        gamma_unif_lo=lo,
        gamma_unif_hi=hi,
        gamma_weak_mask=weak,
        weak_scale=_C_WEAK,
        weak_iv_mask=weak.all(axis=1),
    )


def design_by_name(name, n):
    """Instantiate a bundled design at sample size ``n``."""
    if name == "strong_p1":
        return SimulationDesign(
            name=name,
            kind="strong",
            n=n,
            J=21,
            P=1,
            alpha=_p1_alpha(),
            gamma_base=_C_GAMMA * np.ones((21, 1)),
        )
    if name in ("strong_p2", "strong_p3"):
        P = int(name[-1])
        bounds = [(1.0, 2.0), (3.0, 4.0), (5.0, 6.0)][:P]
        lo = np.column_stack([np.full(21, b[0]) for b in bounds])
        hi = np.column_stack([np.full(21, b[1]) for b in bounds])
        return SimulationDesign(
            name=name,
            kind="strong",
            n=n,
            J=21,
            P=P,
            alpha=_p1_alpha(),
            gamma_base=np.zeros((21, P)),
            gamma_unif_lo=lo,
            gamma_unif_hi=hi,
        )
    if name == "weak_p1_d1":
        return _weak_p1(name, n, [(12, 21)])
    if name == "weak_p1_d2":
        return _weak_p1(name, n, [(16, 21)])
    if name == "weak_p1_d3a":
        return _weak_p1(name, n, [(0, 6), (13, 21)])
    if name == "weak_p1_d3b":
        return _weak_p1(name, n, [(0, 6), (15, 21)])
    if name in ("weak_p2_d1", "weak_p2_d2"):
        base = np.zeros((9, 2))
        base[0:4, 0] = [1, 2, 3, 4]
        lo = np.zeros((9, 2))
        hi = np.zeros((9, 2))
        lo[4:9, 1] = 1.0
        hi[4:9, 1] = 2.0
        weak = np.zeros((9, 2), bool)
        weak[4:9, 0] = True
        weak[0:4, 1] = True
        return _weak_p2(name, n, base, lo, hi, weak)
    if name == "weak_p2_d3":
        base = np.zeros((9, 2))
        base[0:3, 0] = [1, 2, 3]
        lo = np.zeros((9, 2))
        hi = np.zeros((9, 2))
        lo[6:9, 1] = 3.0
        hi[6:9, 1] = 4.0
        weak = np.zeros((9, 2), bool)
        weak[3:9, 0] = True
        weak[0:6, 1] = True
        return _weak_p2(name, n, base, lo, hi, weak)
    raise ValueError(f"unknown design {name!r}; choose from {', '.join(DESIGN_NAMES)}")


DESIGN_NAMES = (
    "strong_p1",
    "strong_p2",
    "strong_p3",
    "weak_p1_d1",
    "weak_p1_d2",
    "weak_p1_d3a",
    "weak_p1_d3b",
    "weak_p2_d1",
    "weak_p2_d2",
    "weak_p2_d3",
)


def _chol_toeplitz(J, rho):
    return cholesky(toeplitz(rho ** np.arange(J)), lower=True)


def _chol_errors(P, corr):
    sigma = np.eye(P + 1)
    sigma[0, 1:] = corr
    sigma[1:, 0] = corr
    return cholesky(sigma, lower=True)


def resolve_gamma(design, n, rng):
    """First-stage matrix for one replication (uniform entries redrawn)."""
    gamma = design.gamma_base.copy()
    span = design.gamma_unif_hi - design.gamma_unif_lo
    if np.any(span != 0.0):
        u = rng.uniform(size=gamma.shape)
        gamma = gamma + np.where(span != 0.0, design.gamma_unif_lo + span * u, 0.0)
    if design.gamma_weak_mask.any():
        gamma = gamma + design.gamma_weak_mask * (design.weak_scale / math.sqrt(n))
    return gamma


def generate(design, rng):
    """Draw one dataset from the design, reproducibly from the generator.

    Draw order is fixed (instruments, first-stage uniforms, errors), so a
    given generator state always yields the same dataset.
    """
    n, J, P = design.n, design.J, design.P
    Z = rng.standard_normal((n, J)) @ _chol_toeplitz(J, design.sigma_z_rho).T
    gamma = resolve_gamma(design, n, rng)
    errs = rng.standard_normal((n, P + 1)) @ _chol_errors(P, design.error_corr).T
    u = errs[:, 0]
    eps = errs[:, 1:]
    D = Z @ gamma + eps
    y = D @ design.beta + Z @ design.alpha + u
    return Dataset(y=y, D=D, Z=Z)


_Z95 = float(stats.norm.ppf(0.975))


def _one_rep(design, config, seedseq, rep, methods):
    rng = np.random.default_rng(seedseq)
    records = []
    try:
        dataset = generate(design, rng)
    except Exception as exc:  # pragma: no cover - defensive
        return [
            {"rep": rep, "method": m, "ok": False, "error": f"generate: {exc}"}
            for m in methods
        ]
    for method in methods:
        rec = {"rep": rep, "method": method, "ok": True, "error": None}
        try:
            if method == "oracle":
                valid = sorted(design.oracle_valid_set)
                fit = post_selection_tsls(dataset, valid)
                rec["all_rejected"] = False
            elif method == "naive":
                valid = list(range(design.J))
                fit = post_selection_tsls(dataset, valid)
                rec["all_rejected"] = False
            elif method == "ahc":
                result = select_valid(dataset, config)
                valid = sorted(result.valid)
                fit = result.fit
                rec["all_rejected"] = bool(result.all_rejected)
            else:
                raise ValueError(f"unknown method {method!r}")
            rec["beta"] = [float(b) for b in fit.beta]
            rec["se"] = [float(s) for s in fit.se]
            rec["valid"] = [int(v) for v in valid]
            rec["invalid"] = [int(j) for j in range(design.J) if j not in set(valid)]
        except Exception as exc:
            rec["ok"] = False
            rec["error"] = f"{type(exc).__name__}: {exc}"
        records.append(rec)
    return records


_METRIC_KEYS = (
    "mae",
    "sd",
    "n_invalid",
    "p_allinv",
    "coverage",
    "p_oracle",
    "strongvalid",
    "weakin",
    "weakva",
)


def metric_suite(records, design, methods=METHODS):
    """Aggregate per-replication records into the report metrics.

    MAE is the median absolute error per coordinate averaged over
    coordinates, SD the per-coordinate sample standard deviation averaged
    likewise, coverage the per-coordinate 95% normal-interval coverage
    averaged over coordinates.  Selection frequencies compare against the
    design's ground truth; metrics that a design leaves undefined (no weak
    valid instruments, say) are ``None``.  Failed replications are excluded
    from every aggregate and counted separately.
    """
    true_invalid = design.invalid_set
    oracle_valid = design.oracle_valid_set
    weak_invalid = design.weak_set & design.invalid_set
    weak_valid = design.weak_set & design.valid_set
    beta_true = design.beta
    metrics = {}
    failures = {}
    for method in methods:
        recs = [r for r in records if r["method"] == method]
        ok = [r for r in recs if r["ok"]]
        failures[method] = len(recs) - len(ok)
        if not ok:
            metrics[method] = {k: None for k in _METRIC_KEYS}
            continue
        B = np.array([r["beta"] for r in ok])
        SE = np.array([r["se"] for r in ok])
        err = np.abs(B - beta_true)
        mae = float(np.mean(np.median(err, axis=0)))
        sd = float(np.mean(np.std(B, axis=0, ddof=1))) if len(ok) > 1 else 0.0
        covered = err <= _Z95 * SE
        coverage = float(np.mean(covered.mean(axis=0)))
        valid_sets = [frozenset(r["valid"]) for r in ok]
        invalid_sets = [frozenset(r["invalid"]) for r in ok]
        n_invalid = float(np.mean([len(s) for s in invalid_sets]))
        p_allinv = float(np.mean([true_invalid <= s for s in invalid_sets]))
        p_oracle = float(np.mean([s == oracle_valid for s in valid_sets]))
        out = {
            "mae": mae,
            "sd": sd,
            "n_invalid": n_invalid,
            "p_allinv": p_allinv,
            "coverage": coverage,
            "p_oracle": p_oracle,
            "strongvalid": None,
            "weakin": None,
            "weakva": None,
        }
        if design.kind == "weak":
            out["strongvalid"] = float(
                np.mean([oracle_valid <= s for s in valid_sets])
            )
            if weak_invalid:
                out["weakin"] = float(
                    np.mean([weak_invalid <= s for s in invalid_sets])
                )
            if weak_valid:
                out["weakva"] = float(
                    np.mean([weak_valid <= s for s in invalid_sets])
                )
        metrics[method] = out
    return metrics, failures


@dataclass(frozen=True)
class SimulationReport:
    """Aggregated Monte Carlo results for one design."""

    design: str
    kind: str
    n: int
    reps: int
    seed: int
    methods: tuple
    metrics: dict
    failures: dict

    def to_json_dict(self):
        doc = {
            "schema_version": 1,
            "design": self.design,
            "kind": self.kind,
            "n": self.n,
            "reps": self.reps,
            "seed": self.seed,
            "methods": list(self.methods),
            "metrics": {
                m: {k: self.metrics[m][k] for k in _METRIC_KEYS} for m in self.methods
            },
            "failures": {m: self.failures[m] for m in self.methods},
        }
        return doc

    def to_text(self):
        if self.kind == "weak":
            cols = ("mae", "n_invalid", "p_allinv", "strongvalid", "weakin", "weakva")
            headers = ("MAE", "# invalid", "p allinv", "strongvalid", "weakin", "weakva")
        else:
            cols = ("mae", "sd", "n_invalid", "p_allinv", "coverage", "p_oracle")
            headers = ("MAE", "SD", "# invalid", "p allinv", "Coverage", "p oracle")
        lines = [
            f"design {self.design}  n={self.n}  reps={self.reps}  seed={self.seed}"
        ]
        width = 12
        lines.append("method".ljust(8) + "".join(h.rjust(width) for h in headers))
        for m in self.methods:
            row = [m.ljust(8)]
            for c in cols:
                v = self.metrics[m][c]
                row.append(("-" if v is None else f"{v:.3f}").rjust(width))
            lines.append("".join(row))
        failed = {m: c for m, c in self.failures.items() if c}
        lines.append(f"failed replications: {failed if failed else 'none'}")
        return "\n".join(lines)


def _one_rep_star(args):
    return _one_rep(*args)


def run_monte_carlo(design, reps, seed, methods=METHODS, config=None, workers=1):
    """Run the design for ``reps`` replications and aggregate a report.

    Replication r uses the RNG stream spawned from (seed, r), so the report
    is identical for any worker count.  Replication failures are recorded
    per method and excluded from the aggregates.
    """
    if reps < 1:
        raise ValueError("reps must be at least 1")
    methods = tuple(methods)
    unknown = [m for m in methods if m not in METHODS]
    if unknown:
        raise ValueError(f"unknown methods {unknown}; choose from {METHODS}")
    if config is None:
        config = SelectionConfig(seed=seed)
    children = np.random.SeedSequence(seed).spawn(reps)
    args = [(design, config, children[r], r, methods) for r in range(reps)]
    if workers and workers > 1:
        with ProcessPoolExecutor(max_workers=min(workers, reps)) as pool:
            per_rep = list(pool.map(_one_rep_star, args, chunksize=8))
    else:
        per_rep = [_one_rep(*a) for a in args]
    records = [rec for group in per_rep for rec in group]
    metrics, failures = metric_suite(records, design, methods)
    return SimulationReport(
        design=design.name,
        kind=design.kind,
        n=design.n,
        reps=reps,
        seed=seed,
        methods=methods,
        metrics=metrics,
        failures=failures,
    )
