"""Simulation-trained posterior samplers.

The workflow is: draw (theta, y) pairs from a prior and a forward model,
attach baseline noise tau to each pair, then fit a summary network S and a
head H so that H(S(y), tau) reproduces theta. With uniform tau and a pinball
objective H(S(y), .) becomes the conditional quantile function of theta, so
feeding fresh uniforms through it for an observed y yields posterior draws.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Protocol

import numpy as np
from scipy.special import ndtr

from . import nn
from .embedding import cosine_embed
from .nn import DimensionError, Mlp, TrainConfig

log = logging.getLogger(__name__)

CHUNK_ROWS = 65536


class SimulationError(RuntimeError):
    pass


class TrainingDiverged(FloatingPointError):
    """Raised when the loss or a gradient stops being finite.

    ``trace`` holds the per-epoch losses recorded before the failure.
    """

    def __init__(self, last_finite_epoch: int, trace=None):
        super().__init__(f"training diverged; last finite epoch was {last_finite_epoch}")
        self.last_finite_epoch = last_finite_epoch
        self.trace = trace


class LinAlgRankError(np.linalg.LinAlgError):
    pass


# ---------------------------------------------------------------------------
# simulators
# ---------------------------------------------------------------------------


class Simulator(Protocol):
    k: int  # parameter dimension
    n: int  # data dimension

    def __call__(self, rng: np.random.Generator, N: int) -> tuple[np.ndarray, np.ndarray]: ...


@dataclass
class ConjugateSimulator:
    """theta ~ N(prior_mean, prior_sd^2); m observations y_j | theta ~ N(theta, like_sd^2)."""

    prior_mean: float = 0.0
    prior_sd: float = 1.0
    like_sd: float = 1.0
    m: int = 1
    k: int = field(default=1, init=False)

    @property
    def n(self) -> int:
        return self.m

    def __call__(self, rng, N):
        theta = self.prior_mean + self.prior_sd * rng.standard_normal(N)
        y = theta[:, None] + self.like_sd * rng.standard_normal((N, self.m))
        return theta[:, None], y

    def posterior(self, y_obs):
        from .dgp import conjugate_posterior

        return conjugate_posterior(y_obs, self.prior_mean, self.prior_sd, self.like_sd)


@dataclass
class LinearGaussianSimulator:
    """theta ~ N(0, I_k), y = loadings @ theta + noise_sd * eps."""

    loadings: np.ndarray  # (n, k)
    noise_sd: float = 1.0

    def __post_init__(self):
        self.loadings = np.atleast_2d(np.asarray(self.loadings, dtype=np.float64))

    @property
    def k(self) -> int:
        return self.loadings.shape[1]

    @property
    def n(self) -> int:
        return self.loadings.shape[0]

    def regression_direction(self) -> np.ndarray:
        """Population coefficients of theta on y, shape (k, n)."""
        cov_y = self.loadings @ self.loadings.T + self.noise_sd**2 * np.eye(self.n)
        return np.linalg.solve(cov_y, self.loadings).T

    def __call__(self, rng, N):
        theta = rng.standard_normal((N, self.k))
        y = theta @ self.loadings.T + self.noise_sd * rng.standard_normal((N, self.n))
        return theta, y


@dataclass
class DeterministicSimulator:
    """Prior draws pushed through a deterministic forward map y = f(theta)."""

    prior: Callable[[np.random.Generator, int], np.ndarray]
    forward_map: Callable[[np.ndarray], np.ndarray]
    k: int = 1
    n: int = 1

    def __call__(self, rng, N):
        theta = np.asarray(self.prior(rng, N), dtype=np.float64).reshape(N, self.k)
        y = np.asarray(self.forward_map(theta), dtype=np.float64).reshape(N, self.n)
        return theta, y


# ---------------------------------------------------------------------------
# simulation tables
# ---------------------------------------------------------------------------


@dataclass
class SimTable:
    theta: np.ndarray  # (N, k)
    y: np.ndarray  # (N, n)
    tau: np.ndarray  # (N, d)
    tau_dist: str = "uniform"

    @property
    def N(self) -> int:
        return self.theta.shape[0]

    @property
    def k(self) -> int:
        return self.theta.shape[1]

    @property
    def n(self) -> int:
        return self.y.shape[1]

    @property
    def d(self) -> int:
        return self.tau.shape[1]

    def to_csv(self, path: str | Path) -> None:
        cols = (
            [f"theta_{j + 1}" for j in range(self.k)]
            + [f"y_{j + 1}" for j in range(self.n)]
            + [f"tau_{j + 1}" for j in range(self.d)]
        )
        np.savetxt(path, np.hstack([self.theta, self.y, self.tau]), delimiter=",",
                   header=",".join(cols), comments="", fmt="%.17g")

    @classmethod
    def from_csv(cls, path: str | Path, tau_dist: str = "uniform") -> "SimTable":
        with open(path) as fh:
            header = fh.readline().strip().split(",")
        data = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
        group = lambda p: data[:, [j for j, c in enumerate(header) if c.startswith(p)]]
        return cls(group("theta_"), group("y_"), group("tau_"), tau_dist)


def draw_tau(rng: np.random.Generator, N: int, d: int, tau_dist: str) -> np.ndarray:
    if tau_dist == "uniform":
        return rng.random((N, d))
    if tau_dist == "gaussian":
        return rng.standard_normal((N, d))
    raise ValueError(f"unknown tau distribution {tau_dist!r}")


def build_sim_table(simulator: Simulator, N: int, tau_dist: str = "uniform", seed: int = 0,
                    tau_dim: int | None = None) -> SimTable:
    """Draw N iid (theta, y, tau) triples.

    Rows are produced in fixed-size chunks, each with its own derived seed,
    so the table depends only on (simulator, N, tau_dist, seed).
    """
    if N < 1:
        raise ValueError("N must be >= 1")
    d = tau_dim or simulator.k
    thetas, ys, taus = [], [], []
    for c, start in enumerate(range(0, N, CHUNK_ROWS)):
        rows = min(CHUNK_ROWS, N - start)
        try:
            theta, y = simulator(nn.make_rng(nn.derive_seed(seed, c, 0)), rows)
        except Exception as exc:
            raise SimulationError(f"simulator failed in rows {start}..{start + rows - 1}: {exc}") from exc
        theta = np.asarray(theta, dtype=np.float64).reshape(rows, -1)
        y = np.asarray(y, dtype=np.float64).reshape(rows, -1)
        bad = ~(np.isfinite(theta).all(axis=1) & np.isfinite(y).all(axis=1))
        if bad.any():
            raise SimulationError(f"simulator produced non-finite values at row {start + int(np.argmax(bad))}")
        thetas.append(theta)
        ys.append(y)
        taus.append(draw_tau(nn.make_rng(nn.derive_seed(seed, c, 1)), rows, d, tau_dist))
    return SimTable(np.vstack(thetas), np.vstack(ys), np.vstack(taus), tau_dist)


# ---------------------------------------------------------------------------
# inverse map
# ---------------------------------------------------------------------------


@dataclass
class ArchConfig:
    summary_hidden: tuple[int, ...] = (64, 64)
    summary_activation: str = "tanh"
    head_hidden: tuple[int, ...] = (64, 64, 64)
    head_activation: str = "relu"
    embedding: str = "cosine"  # or "raw"
    n_cos: int = 8
    tau_dist: str = "uniform"
    mode: str = "quantile"  # or "l2"
    fixed_tau: bool = False

    def __post_init__(self):
        if self.embedding not in ("cosine", "raw"):
            raise ValueError(f"unknown embedding {self.embedding!r}")
        if self.mode not in ("quantile", "l2"):
            raise ValueError(f"unknown mode {self.mode!r}")
        if self.tau_dist not in ("uniform", "gaussian"):
            raise ValueError(f"unknown tau distribution {self.tau_dist!r}")


def make_summary_net(n: int, k: int, hidden=(64, 64), activation: str = "tanh",
                     rng: np.random.Generator | None = None) -> Mlp:
    """Stack of ``activation`` layers followed by an affine map to k outputs."""
    rng = rng or nn.make_rng(0)
    return Mlp.init([n, *hidden, k], activation, rng)


def summary_forward(net: Mlp, y: np.ndarray) -> np.ndarray:
    return nn.forward(net, y).output


@dataclass
class InverseMap:
    summary: Mlp
    head: Mlp
    tau_dist: str
    tau_dim: int
    embedding: str
    n_cos: int
    mode: str
    y_loc: np.ndarray
    y_scale: np.ndarray
    theta_loc: np.ndarray
    theta_scale: np.ndarray
    loss_trace: list[float] = field(default_factory=list)

    def __post_init__(self):
        if self.head.in_dim != self.summary.out_dim + self.embed_dim:
            raise DimensionError("head input must be summary width plus embedding width")

    @property
    def k(self) -> int:
        return self.head.out_dim

    @property
    def n(self) -> int:
        return self.summary.in_dim

    @property
    def embed_dim(self) -> int:
        return self.tau_dim * (self.n_cos if self.embedding == "cosine" else 1)

    def levels(self, tau: np.ndarray) -> np.ndarray:
        """Quantile level carried by each baseline draw."""
        return tau if self.tau_dist == "uniform" else ndtr(tau)

    def embed(self, tau: np.ndarray) -> np.ndarray:
        if self.embedding == "raw":
            return tau
        return cosine_embed(self.levels(tau), self.n_cos).reshape(tau.shape[0], -1)

    def _inputs(self, y, tau):
        return (y - self.y_loc) / self.y_scale, self.embed(tau)

    def __call__(self, y: np.ndarray, tau: np.ndarray) -> np.ndarray:
        y = np.atleast_2d(np.asarray(y, dtype=np.float64))
        tau = np.atleast_2d(np.asarray(tau, dtype=np.float64))
        ys, emb = self._inputs(y, tau)
        stat = nn.predict(self.summary, ys)
        out = nn.predict(self.head, np.hstack([stat, emb]))
        return self.theta_loc + self.theta_scale * out

    def to_arrays(self) -> tuple[dict[str, np.ndarray], dict]:
        arrays, s_act = nn.mlp_to_arrays(self.summary, "summary")
        head_arrays, h_act = nn.mlp_to_arrays(self.head, "head")
        arrays.update(head_arrays)
        arrays.update(y_loc=self.y_loc, y_scale=self.y_scale,
                      theta_loc=self.theta_loc, theta_scale=self.theta_scale,
                      loss_trace=np.asarray(self.loss_trace, dtype=np.float64))
        meta = {"kind": "inverse_map", "summary_activations": s_act, "head_activations": h_act,
                "tau_dist": self.tau_dist, "tau_dim": self.tau_dim, "embedding": self.embedding,
                "n_cos": self.n_cos, "mode": self.mode}
        return arrays, meta

    @classmethod
    def from_arrays(cls, arrays, meta) -> "InverseMap":
        return cls(
            summary=nn.mlp_from_arrays(arrays, "summary", meta["summary_activations"]),
            head=nn.mlp_from_arrays(arrays, "head", meta["head_activations"]),
            tau_dist=meta["tau_dist"], tau_dim=meta["tau_dim"], embedding=meta["embedding"],
            n_cos=meta["n_cos"], mode=meta["mode"],
            y_loc=arrays["y_loc"], y_scale=arrays["y_scale"],
            theta_loc=arrays["theta_loc"], theta_scale=arrays["theta_scale"],
            loss_trace=list(arrays["loss_trace"]),
        )


def _scale(a: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    loc = a.mean(axis=0)
    sd = a.std(axis=0)
    return loc, np.where(sd > 0, sd, 1.0)


def train_inverse_map(table: SimTable, arch: ArchConfig | None = None,
                      config: TrainConfig | None = None) -> InverseMap:
    """Fit H(S(y), tau) to theta by minibatch gradient descent.

    In quantile mode each parameter coordinate j is fitted with the pinball
    loss at the level carried by tau_j, so tau needs one column per
    parameter. In l2 mode the squared error is used. Unless ``fixed_tau``
    is set, tau is redrawn for every epoch.
    """
    arch = arch or ArchConfig(tau_dist=table.tau_dist)
    config = config or TrainConfig()
    if table.N < 1:
        raise ValueError("empty simulation table")
    if arch.mode == "quantile" and table.d != table.k:
        raise DimensionError("quantile mode needs one tau column per parameter")
    if arch.tau_dist != table.tau_dist:
        raise ValueError("architecture and table disagree on the tau distribution")

    rng = nn.make_rng(config.seed)
    y_loc, y_scale = _scale(table.y)
    theta_loc, theta_scale = _scale(table.theta)
    emb_dim = table.d * (arch.n_cos if arch.embedding == "cosine" else 1)
    summary = make_summary_net(table.n, table.k, arch.summary_hidden, arch.summary_activation, rng)
    head = Mlp.init([table.k + emb_dim, *arch.head_hidden, table.k], arch.head_activation, rng)
    imap = InverseMap(summary, head, arch.tau_dist, table.d, arch.embedding, arch.n_cos, arch.mode,
                      y_loc, y_scale, theta_loc, theta_scale)

    ys_all = (table.y - y_loc) / y_scale
    th_all = (table.theta - theta_loc) / theta_scale
    params = {**summary.parameters("summary."), **head.parameters("head.")}
    state = nn.OptState()
    k = table.k
    last_finite = 0
    for epoch in range(1, config.epochs + 1):
        tau_all = table.tau if arch.fixed_tau else draw_tau(rng, table.N, table.d, arch.tau_dist)
        total, count = 0.0, 0
        lr = config.lr_at(epoch)
        for idx in nn.minibatches(table.N, config.batch_size, rng):
            tau = tau_all[idx]
            s_trace = nn.forward(summary, ys_all[idx])
            h_trace = nn.forward(head, np.hstack([s_trace.output, imap.embed(tau)]))
            pred = h_trace.output
            if arch.mode == "quantile":
                loss, g = nn.pinball_loss(pred, th_all[idx], imap.levels(tau))
            else:
                loss, g = nn.mse_loss(pred, th_all[idx])
            h_grads = nn.backward(head, h_trace, g)
            s_grads = nn.backward(summary, s_trace, h_grads.input[:, :k])
            grads = {**s_grads.as_dict("summary."), **h_grads.as_dict("head.")}
            if not np.isfinite(loss) or not all(np.all(np.isfinite(v)) for v in grads.values()):
                raise TrainingDiverged(last_finite, list(imap.loss_trace))
            nn.optimizer_step(params, grads, config, state, lr)
            total += loss * len(idx)
            count += len(idx)
        epoch_loss = total / count
        if not np.isfinite(epoch_loss):
            raise TrainingDiverged(last_finite, list(imap.loss_trace))
        last_finite = epoch
        imap.loss_trace.append(epoch_loss)
        log.debug("epoch %d loss %.6f", epoch, epoch_loss)
    return imap


def posterior_sample(imap: InverseMap, y_obs, M: int, seed: int = 0) -> np.ndarray:
    """M posterior draws H(S(y_obs), tau_j) with fresh baseline draws tau_j."""
    if M < 1:
        raise ValueError("M must be >= 1")
    y_obs = np.asarray(y_obs, dtype=np.float64).reshape(-1)
    if y_obs.size != imap.n:
        raise DimensionError(f"observation has length {y_obs.size}, map expects {imap.n}")
    tau = draw_tau(nn.make_rng(seed), M, imap.tau_dim, imap.tau_dist)
    return imap(np.broadcast_to(y_obs, (M, imap.n)), tau)


def quantile_sweep(imap: InverseMap, y_obs, levels) -> np.ndarray:
    """Map output at given uniform levels (one row per level)."""
    levels = np.asarray(levels, dtype=np.float64)
    tau = np.repeat(levels[:, None], imap.tau_dim, axis=1)
    if imap.tau_dist == "gaussian":
        from scipy.special import ndtri

        tau = ndtri(tau)
    y_obs = np.asarray(y_obs, dtype=np.float64).reshape(1, -1)
    return imap(np.repeat(y_obs, len(levels), axis=0), tau)


def save_inverse_map(path, imap: InverseMap, extra_meta: dict | None = None) -> None:
    arrays, meta = imap.to_arrays()
    meta.update(extra_meta or {})
    nn.save_checkpoint(path, arrays, meta)


def load_inverse_map(path) -> InverseMap:
    arrays, meta = nn.load_checkpoint(path)
    if meta.get("kind") != "inverse_map":
        raise ValueError(f"{path} does not hold an inverse map")
    return InverseMap.from_arrays(arrays, meta)


# ---------------------------------------------------------------------------
# least-squares generative estimator
# ---------------------------------------------------------------------------


@dataclass
class LinearGenerative:
    W: np.ndarray  # (k, s) coefficients on the summary
    tau_coefs: np.ndarray  # (k, J) coefficients on the appended normals
    intercept: np.ndarray  # (k,)
    W_se: np.ndarray
    tau_se: np.ndarray
    residual_sd: np.ndarray

    @property
    def J(self) -> int:
        return self.tau_coefs.shape[1]


def estimate_linear_generative(table: SimTable, J: int, seed: int = 0,
                               summary: Callable[[np.ndarray], np.ndarray] | None = None) -> LinearGenerative:
    """Regress theta on [1, S(y), eps] by ordinary least squares.

    ``eps`` holds J fresh standard normals per row. With S the identity the
    coefficient block on S(y) estimates the linear projection of theta on y,
    which under a single-index model points along the true index.
    """
    stat = table.y if summary is None else np.asarray(summary(table.y), dtype=np.float64).reshape(table.N, -1)
    eps = nn.make_rng(seed).standard_normal((table.N, J))
    X = np.hstack([np.ones((table.N, 1)), stat, eps])
    if table.N <= X.shape[1]:
        raise ValueError(f"need more than {X.shape[1]} rows, got {table.N}")
    if np.linalg.matrix_rank(X) < X.shape[1]:
        raise LinAlgRankError("design [1, S(y), eps] is rank deficient")
    coef, *_ = np.linalg.lstsq(X, table.theta, rcond=None)  # (cols, k)
    resid = table.theta - X @ coef
    dof = table.N - X.shape[1]
    sigma2 = (resid * resid).sum(axis=0) / dof
    xtx_inv_diag = np.diag(np.linalg.inv(X.T @ X))
    se = np.sqrt(np.outer(xtx_inv_diag, sigma2))  # (cols, k)
    s = stat.shape[1]
    return LinearGenerative(
        W=coef[1:1 + s].T, tau_coefs=coef[1 + s:].T, intercept=coef[0],
        W_se=se[1:1 + s].T, tau_se=se[1 + s:].T, residual_sd=np.sqrt(sigma2),
    )
