"""Evaluation of fitted effect models against known ground truth."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
from scipy import stats

from .dgp import CausalDataset, MissingGroundTruth, true_ate

CROSSING_GRID = np.linspace(0.1, 0.9, 9)


def nearest_rank_quantile(sample, u, axis: int = -1):
    """Smallest order statistic x_(k) with k = ceil(u * n), clipped to [1, n].

    Works along ``axis`` for batched samples.
    """
    a = np.sort(np.asarray(sample, dtype=np.float64), axis=axis)
    n = a.shape[axis]
    # the 1e-9 slack keeps u * n that should be an integer from rounding up
    k = np.clip(np.ceil(np.asarray(u, dtype=np.float64) * n - 1e-9).astype(np.int64), 1, n)
    return np.take(a, k - 1, axis=axis)


def lorenz_check(sample, grid_size: int = 99) -> tuple[float, float, float]:
    """Midpoint-grid integral of the empirical quantile function against the
    arithmetic mean. Returns (quadrature mean, sample mean, gap)."""
    sample = np.asarray(sample, dtype=np.float64).ravel()
    if sample.size < 2:
        raise ValueError("need at least two values")
    u = (np.arange(1, grid_size + 1) - 0.5) / grid_size
    quad = math.fsum(nearest_rank_quantile(sample, u)) / grid_size
    mean = math.fsum(sample) / sample.size
    return quad, mean, quad - mean


def baseline_linear_cate(ds: CausalDataset) -> np.ndarray:
    """Per-unit effects from OLS of y on [1, x, z, x*z]."""
    x = np.asarray(ds.x, float)
    z = np.asarray(ds.z, float)[:, None]
    X = np.hstack([np.ones((ds.n, 1)), x, z, x * z])
    if np.linalg.matrix_rank(X) < X.shape[1]:
        raise np.linalg.LinAlgError("baseline design is singular")
    coef, *_ = np.linalg.lstsq(X, np.asarray(ds.y, float), rcond=None)
    p = ds.p
    return coef[1 + p] + x @ coef[2 + p:]


def pit_values(draws: np.ndarray, realized: np.ndarray) -> np.ndarray:
    """Mid-rank PIT of each realised value among its own draws."""
    draws = np.atleast_2d(np.asarray(draws, dtype=np.float64))
    realized = np.asarray(realized, dtype=np.float64).reshape(-1, 1)
    below = (draws < realized).sum(axis=1)
    ties = (draws == realized).sum(axis=1)
    return (below + 0.5 * ties) / draws.shape[1]


def pit_calibration(draws: np.ndarray, realized: np.ndarray) -> float:
    """Kolmogorov-Smirnov distance between the PIT values and U(0, 1)."""
    draws = np.atleast_2d(np.asarray(draws, dtype=np.float64))
    if draws.shape[0] < 2:
        raise ValueError("PIT calibration needs more than one unit")
    if draws.shape[1] < 100:
        raise ValueError("PIT calibration needs at least 100 draws per unit")
    return float(stats.kstest(pit_values(draws, realized), "uniform").statistic)


def crossing_rate(model, X: np.ndarray, levels=CROSSING_GRID, gate=None) -> float:
    """Share of (unit, adjacent level pair) where the quantile output decreases.

    ``gate`` is the per-unit treatment fed to the effect branch, normally
    the observed z; None uses the learned propensity gate. An ensemble is
    scored on its averaged quantile output. Models without a quantile head
    report 0.
    """
    from .causal import CausalEnsemble, predict_outcomes

    if not (isinstance(model, CausalEnsemble) or hasattr(model, "blocks")):
        return 0.0
    X = np.atleast_2d(np.asarray(X, float))
    G = len(levels)
    q = np.tile(np.asarray(levels, float), X.shape[0])
    if gate is not None:
        gate = np.repeat(np.broadcast_to(np.asarray(gate, float), (X.shape[0],)), G)
    yq = predict_outcomes(model, np.repeat(X, G, axis=0), gate, q)[1].reshape(-1, G)
    return float(np.mean(np.diff(yq, axis=1) < 0))


def interval_coverage(draws: np.ndarray, truth: np.ndarray, level: float = 0.95) -> tuple[float, float]:
    """(share of units whose equal-tailed interval holds the truth, mean length)."""
    alpha = 1.0 - level
    lo = nearest_rank_quantile(draws, alpha / 2)
    hi = nearest_rank_quantile(draws, 1 - alpha / 2)
    truth = np.asarray(truth, float)
    return float(np.mean((lo <= truth) & (truth <= hi))), float(np.mean(hi - lo))


@dataclass
class OracleEffect:
    """Plug-in model that returns the true effect of each row at every level.

    Rows are matched to the dataset by covariate values, so it only answers
    for units it was built from.
    """

    ds: CausalDataset
    trained: bool = True

    def effect_at(self, X: np.ndarray, levels: np.ndarray) -> np.ndarray:
        index = {row.tobytes(): i for i, row in enumerate(np.asarray(self.ds.x, float))}
        X = np.atleast_2d(np.asarray(X, float))
        try:
            rows = [index[r.tobytes()] for r in X]
        except KeyError:
            raise ValueError("oracle asked about a unit outside its dataset") from None
        tau = np.asarray(self.ds.tau_true, float)[rows]
        return np.broadcast_to(tau[:, None], levels.shape).copy()


@dataclass
class MetricsReport:
    ate_true: float
    ate_est: float
    ate_sq_err: float
    ate_ci_lo: float
    ate_ci_hi: float
    ate_covered: float
    cate_rmse: float
    cate_corr: float
    coverage: float
    avg_interval_length: float
    crossing_rate: float
    pit_ks: float
    baseline_cate_rmse: float
    level: float
    n: int
    M: int
    seed: int

    def as_dict(self) -> dict:
        return asdict(self)

    def to_text(self) -> str:
        return "".join(f"{k} = {_fmt(v)}\n" for k, v in self.as_dict().items())

    def write(self, path: str | Path) -> None:
        Path(path).write_text(self.to_text())


def _fmt(v) -> str:
    if isinstance(v, (int, np.integer)) and not isinstance(v, bool):
        return str(int(v))
    return "%.17g" % float(v)


def read_report(path: str | Path) -> dict[str, float]:
    out = {}
    for line in Path(path).read_text().splitlines():
        if "=" in line:
            key, val = (s.strip() for s in line.split("=", 1))
            out[key] = float(val)
    return out


def _corr(a, b) -> float:
    if np.std(a) == 0 or np.std(b) == 0:
        return float("nan")
    return float(np.corrcoef(a, b)[0, 1])


def evaluate(ds: CausalDataset, model, M: int = 200, level: float = 0.95, seed: int = 0,
             grid_size: int = 99) -> MetricsReport:
    """Score a fitted effect model on a dataset with ground truth.

    Coverage is the share of units whose equal-tailed interval from their
    own effect draws contains the true effect. The ATE interval comes from
    averaging draws across units draw by draw.
    """
    from .causal import ate_lorenz, cate_draws

    if not ds.has_truth:
        raise MissingGroundTruth("evaluation needs mu_true, tau_true and pi_true")
    if M < 100:
        raise ValueError("M must be at least 100")
    draws = cate_draws(model, ds.x, M, seed)
    alpha = 1.0 - level
    cover, length = interval_coverage(draws, ds.tau_true, level)
    tau = np.asarray(ds.tau_true, float)
    cate_mean = draws.mean(axis=1)
    ate_t = true_ate(ds)
    ate_e = ate_lorenz(model, ds, grid_size)
    ate_draws = draws.mean(axis=0)
    a_lo = float(nearest_rank_quantile(ate_draws, alpha / 2))
    a_hi = float(nearest_rank_quantile(ate_draws, 1 - alpha / 2))
    base = baseline_linear_cate(ds)
    return MetricsReport(
        ate_true=ate_t, ate_est=ate_e, ate_sq_err=(ate_t - ate_e) ** 2,
        ate_ci_lo=a_lo, ate_ci_hi=a_hi, ate_covered=float(a_lo <= ate_t <= a_hi),
        cate_rmse=float(np.sqrt(np.mean((cate_mean - tau) ** 2))),
        cate_corr=_corr(cate_mean, tau),
        coverage=cover, avg_interval_length=length,
        crossing_rate=crossing_rate(model, ds.x, gate=ds.z),
        pit_ks=pit_calibration(draws, tau),
        baseline_cate_rmse=float(np.sqrt(np.mean((base - tau) ** 2))),
        level=level, n=ds.n, M=M, seed=seed,
    )
