"""Seeded synthetic data: the nonlinear causal benchmark and a normal-normal
conjugate model with a closed-form posterior."""

from __future__ import annotations

from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from .nn import make_rng, sigmoid

FLOAT_FMT = "%.17g"


class MissingGroundTruth(ValueError):
    pass


@dataclass
class CausalDataset:
    x: np.ndarray
    z: np.ndarray
    y: np.ndarray
    mu_true: np.ndarray | None = None
    tau_true: np.ndarray | None = None
    tau_raw: np.ndarray | None = None
    pi_true: np.ndarray | None = None
    sigma: float | None = None
    seed: int | None = None
    tau_mean: float | None = None
    tau_sd: float | None = None

    @property
    def n(self) -> int:
        return self.x.shape[0]

    @property
    def p(self) -> int:
        return self.x.shape[1]

    @property
    def has_truth(self) -> bool:
        return self.tau_true is not None and self.mu_true is not None and self.pi_true is not None

    def observational(self) -> "CausalDataset":
        """Copy with every ground-truth column dropped."""
        return CausalDataset(self.x, self.z, self.y, sigma=self.sigma, seed=self.seed)

    def subset(self, idx) -> "CausalDataset":
        cut = lambda a: None if a is None else a[idx]
        return replace(
            self, x=self.x[idx], z=self.z[idx], y=self.y[idx], mu_true=cut(self.mu_true),
            tau_true=cut(self.tau_true), tau_raw=cut(self.tau_raw), pi_true=cut(self.pi_true),
        )

    def to_csv(self, path: str | Path, truth: bool = True) -> None:
        xcols = [f"x{j + 1}" for j in range(self.p)]
        cols = ["unit_id", *xcols, "z", "y"]
        blocks = [np.arange(self.n)[:, None], self.x, self.z[:, None], self.y[:, None]]
        if truth:
            if not self.has_truth:
                raise MissingGroundTruth("dataset has no ground-truth columns to export")
            cols += ["mu_true", "tau_true", "pi_true"]
            blocks += [self.mu_true[:, None], self.tau_true[:, None], self.pi_true[:, None]]
        table = np.hstack(blocks)
        fmt = ["%d"] + [FLOAT_FMT] * self.p + ["%d"] + [FLOAT_FMT] * (len(cols) - self.p - 2)
        np.savetxt(path, table, delimiter=",", header=",".join(cols), comments="", fmt=fmt)

    @classmethod
    def from_csv(cls, path: str | Path) -> "CausalDataset":
        with open(path) as fh:
            header = fh.readline().strip().split(",")
        data = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
        col = {name: data[:, j] for j, name in enumerate(header)}
        xcols = sorted((c for c in header if c.startswith("x") and c[1:].isdigit()), key=lambda c: int(c[1:]))
        if not xcols or "z" not in col or "y" not in col:
            raise ValueError(f"{path}: expected columns x1.., z, y")
        ds = cls(np.column_stack([col[c] for c in xcols]), col["z"].astype(np.int64), col["y"])
        if {"mu_true", "tau_true", "pi_true"} <= col.keys():
            ds.mu_true, ds.tau_true, ds.pi_true = col["mu_true"], col["tau_true"], col["pi_true"]
        return ds


def causal_mean(x: np.ndarray) -> np.ndarray:
    """Baseline response: -6 + 1[x1 > x2] + 6 |x2 - 1|."""
    x = np.atleast_2d(x)
    return -6.0 + (x[:, 0] > x[:, 1]).astype(np.float64) + 6.0 * np.abs(x[:, 1] - 1.0)


def causal_effect_raw(x: np.ndarray) -> np.ndarray:
    """Unstandardised heterogeneous effect 1 - 2 x2 x3."""
    x = np.atleast_2d(x)
    return 1.0 - 2.0 * x[:, 1] * x[:, 2]


def standardize_tau(tau_raw: np.ndarray) -> tuple[np.ndarray, float, float]:
    """Centre and scale with the sample mean and the divide-by-n sd."""
    tau_raw = np.asarray(tau_raw, dtype=np.float64)
    if tau_raw.size < 2:
        raise ValueError("need at least two effects to standardise")
    mean = float(np.mean(tau_raw))
    sd = float(np.std(tau_raw))
    if not sd > 0:
        raise ValueError("effects have zero variance")
    return (tau_raw - mean) / sd, mean, sd


def gen_causal(n: int, sigma: float = 1.0, seed: int = 0, p: int = 3, raw_tau: bool = False) -> CausalDataset:
    """Nonlinear confounded benchmark with heterogeneous effects.

    Covariates beyond the third are pure noise. Treatment is drawn by
    comparing one uniform per unit with the true propensity, so the whole
    dataset comes from a single stream. The outcome uses the standardised
    effect unless ``raw_tau`` is set.
    """
    if n < 1:
        raise ValueError("n must be >= 1")
    if sigma < 0:
        raise ValueError("sigma must be >= 0")
    if p < 3:
        raise ValueError("p must be >= 3")
    rng = make_rng(seed)
    x = rng.standard_normal((n, p))
    u = rng.random(n)
    noise = rng.standard_normal(n)

    mu = causal_mean(x)
    pi = sigmoid(mu)
    z = (u < pi).astype(np.int64)
    tau_raw = causal_effect_raw(x)
    if n >= 2 and np.std(tau_raw) > 0:
        tau_std, t_mean, t_sd = standardize_tau(tau_raw)
    else:
        # a single unit cannot be standardised; keep it centred at zero
        tau_std, t_mean, t_sd = tau_raw - tau_raw.mean(), float(tau_raw.mean()), 1.0
    effect = tau_raw if raw_tau else tau_std
    y = mu + effect * z + sigma * noise
    return CausalDataset(
        x=x, z=z, y=y, mu_true=mu, tau_true=tau_std, tau_raw=tau_raw, pi_true=pi,
        sigma=sigma, seed=seed, tau_mean=t_mean, tau_sd=t_sd,
    )


def true_ate(ds: CausalDataset) -> float:
    if ds.tau_true is None:
        raise MissingGroundTruth("dataset has no tau_true column")
    return float(np.mean(ds.tau_true))


@dataclass
class ConjugateDataset:
    theta: np.ndarray
    y: np.ndarray
    prior_mean: float
    prior_sd: float
    like_sd: float

    def posterior(self, y_obs) -> tuple[np.ndarray, np.ndarray]:
        """Closed-form posterior mean and sd of theta given observation rows."""
        return conjugate_posterior(y_obs, self.prior_mean, self.prior_sd, self.like_sd)


def conjugate_posterior(y_obs, prior_mean: float, prior_sd: float, like_sd: float):
    y_obs = np.asarray(y_obs, dtype=np.float64)
    y2 = y_obs.reshape(y_obs.shape[0], -1) if y_obs.ndim else y_obs.reshape(1, 1)
    m = y2.shape[1]
    prec = 1.0 / prior_sd**2 + m / like_sd**2
    mean = (prior_mean / prior_sd**2 + y2.sum(axis=1) / like_sd**2) / prec
    return mean, np.full_like(mean, np.sqrt(1.0 / prec))


def gen_conjugate(
    N: int, prior_mean: float = 0.0, prior_sd: float = 1.0, like_sd: float = 1.0, seed: int = 0, m: int = 1
) -> ConjugateDataset:
    """theta ~ N(prior_mean, prior_sd^2), then m iid y | theta ~ N(theta, like_sd^2).

    ``y`` is a vector when m == 1 and an (N, m) matrix otherwise.
    """
    if N < 1 or m < 1:
        raise ValueError("N and m must be >= 1")
    if not (prior_sd > 0 and like_sd > 0):
        raise ValueError("standard deviations must be positive")
    rng = make_rng(seed)
    theta = prior_mean + prior_sd * rng.standard_normal(N)
    y = theta[:, None] + like_sd * rng.standard_normal((N, m))
    return ConjugateDataset(theta, y[:, 0] if m == 1 else y, prior_mean, prior_sd, like_sd)
