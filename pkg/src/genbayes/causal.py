"""Quantile network for heterogeneous treatment effects.

Blocks (all dense, widths as in the reference architecture):

    s      = f(cos-embed(q); W1, 32)          quantile embedding
    pi~    = f(x; W2, 8)                      propensity features
    pi^    = f(pi~; W3, 32)
    zhat   = sigmoid(a . pi^ + c)             scalar propensity for l_z
    mu     = s * f([x, pi~]; W4, 32)
    tau    = s * f(x; W5, 32)
    y^     = W6 (mu + tau * gate)             (mean, quantile) outputs

``gate`` is the treatment switch on the effect branch. During training it
is the observed treatment z; for counterfactual readouts it is forced to
0 or 1; when neither is supplied it falls back to the 32-wide
sigmoid(pi^). Outcomes are modelled on an internally standardised scale
and mapped back on output.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace

import numpy as np

from . import nn
from .dgp import CausalDataset
from .embedding import cosine_embed
from .nn import DimensionError, Mlp, TrainConfig

log = logging.getLogger(__name__)

BLOCKS = ("embed", "prop1", "prop2", "prop_out", "mu", "tau", "out")


class UntrainedModelError(RuntimeError):
    pass


@dataclass
class LossWeights:
    w_z: float = 1.0
    w_q: float = 1.0
    w_mse: float = 1.0
    w_cross: float = 1.0
    w_eff: float = 0.0  # shrinkage: mean squared effect readout

    def __post_init__(self):
        vals = (self.w_z, self.w_q, self.w_mse, self.w_cross, self.w_eff)
        if min(vals) < 0 or max(vals) <= 0:
            raise ValueError("loss weights must be nonnegative with at least one positive")


@dataclass
class CausalArch:
    p: int = 3
    n_cos: int = 32
    width: int = 32
    prop_width: int = 8
    mu_hidden: tuple[int, ...] = ()
    tau_hidden: tuple[int, ...] = ()
    activation: str = "relu"
    quantile_product: str = "embedding"  # or "scalar": multiply by q itself


@dataclass
class CausalQuantileNet:
    blocks: dict[str, Mlp]
    arch: CausalArch
    y_loc: float = 0.0
    y_scale: float = 1.0
    trained: bool = False
    history: dict[str, list[float]] = field(default_factory=dict)
    clamp_count: int = 0

    @classmethod
    def init(cls, arch: CausalArch, rng: np.random.Generator) -> "CausalQuantileNet":
        a, w, p = arch.activation, arch.width, arch.p
        blocks = {
            "embed": Mlp.init([arch.n_cos, w], [a], rng),
            "prop1": Mlp.init([p, arch.prop_width], [a], rng),
            "prop2": Mlp.init([arch.prop_width, w], [a], rng),
            "prop_out": Mlp.init([w, 1], ["identity"], rng),
            "mu": Mlp.init([p + arch.prop_width, *arch.mu_hidden, w], a, rng)
            if arch.mu_hidden else Mlp.init([p + arch.prop_width, w], [a], rng),
            "tau": Mlp.init([p, *arch.tau_hidden, w], a, rng)
            if arch.tau_hidden else Mlp.init([p, w], [a], rng),
            "out": Mlp.init([w, 2], ["identity"], rng),
        }
        # hidden stacks made by Mlp.init end in identity; the block output is h(.)
        for name in ("mu", "tau"):
            blocks[name].layers[-1].activation = a
        return cls(blocks, arch)

    def parameters(self) -> dict[str, np.ndarray]:
        params = {}
        for name in BLOCKS:
            params.update(self.blocks[name].parameters(f"{name}."))
        return params

    def to_arrays(self) -> tuple[dict[str, np.ndarray], dict]:
        arrays = {}
        acts = {}
        for name in BLOCKS:
            block_arrays, acts[name] = nn.mlp_to_arrays(self.blocks[name], name)
            arrays.update(block_arrays)
        arrays["y_norm"] = np.array([self.y_loc, self.y_scale])
        for key, trace in self.history.items():
            arrays[f"history.{key}"] = np.asarray(trace, dtype=np.float64)
        meta = {
            "kind": "causal_quantile_net", "activations": acts, "trained": self.trained,
            "clamp_count": self.clamp_count,
            "arch": {**self.arch.__dict__, "mu_hidden": list(self.arch.mu_hidden),
                     "tau_hidden": list(self.arch.tau_hidden)},
        }
        return arrays, meta

    @classmethod
    def from_arrays(cls, arrays, meta) -> "CausalQuantileNet":
        arch_kw = dict(meta["arch"])
        arch_kw["mu_hidden"] = tuple(arch_kw["mu_hidden"])
        arch_kw["tau_hidden"] = tuple(arch_kw["tau_hidden"])
        blocks = {name: nn.mlp_from_arrays(arrays, name, meta["activations"][name]) for name in BLOCKS}
        history = {k[len("history."):]: list(v) for k, v in arrays.items() if k.startswith("history.")}
        y_loc, y_scale = arrays["y_norm"]
        return cls(blocks, CausalArch(**arch_kw), float(y_loc), float(y_scale), meta["trained"],
                   history, meta.get("clamp_count", 0))


@dataclass
class CausalForward:
    """Outputs of one batched forward pass plus the intermediate values
    needed by :func:`causal_backward`."""

    y_hat: np.ndarray  # (B, 2) on the standardised scale
    z_prob: np.ndarray  # (B,)
    mu: np.ndarray  # (B, W)
    tau: np.ndarray  # (B, W)
    gate: np.ndarray
    gate_learned: bool
    traces: dict
    s: np.ndarray
    f_mu: np.ndarray
    f_tau: np.ndarray
    prop_hat: np.ndarray
    h: np.ndarray


def _quantile_factor(net: CausalQuantileNet, q: np.ndarray):
    """The factor multiplying the mu and tau branches, plus the embed trace."""
    if net.arch.quantile_product == "scalar":
        return np.repeat(q[:, None], net.arch.width, axis=1), None
    trace = nn.forward(net.blocks["embed"], cosine_embed(q, net.arch.n_cos))
    return trace.output, trace


def causal_forward(net: CausalQuantileNet, x: np.ndarray, q, gate=None) -> CausalForward:
    """Batched forward pass.

    ``gate`` may be None (use the learned sigmoid(pi^)), a scalar, or one
    value per row.
    """
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    if x.shape[1] != net.arch.p:
        raise DimensionError(f"x has width {x.shape[1]}, network expects {net.arch.p}")
    B = x.shape[0]
    q = np.broadcast_to(np.asarray(q, dtype=np.float64), (B,))
    if np.any(q < 0) or np.any(q > 1):
        raise ValueError("quantile levels must lie in [0, 1]")
    b = net.blocks
    s, t_embed = _quantile_factor(net, q)
    t_p1 = nn.forward(b["prop1"], x)
    pt = t_p1.output
    t_p2 = nn.forward(b["prop2"], pt)
    ph = t_p2.output
    t_po = nn.forward(b["prop_out"], ph)
    z_prob = nn.sigmoid(t_po.output[:, 0])
    t_mu = nn.forward(b["mu"], np.hstack([x, pt]))
    t_tau = nn.forward(b["tau"], x)
    f_mu, f_tau = t_mu.output, t_tau.output
    mu = s * f_mu
    tau = s * f_tau
    if gate is None:
        g = nn.sigmoid(ph)
        learned = True
    else:
        g = np.asarray(gate, dtype=np.float64)
        g = np.full((B, 1), float(g)) if g.ndim == 0 else g.reshape(B, 1)
        learned = False
    h = mu + tau * g
    t_out = nn.forward(b["out"], h)
    traces = {"embed": t_embed, "prop1": t_p1, "prop2": t_p2, "prop_out": t_po,
              "mu": t_mu, "tau": t_tau, "out": t_out}
    return CausalForward(t_out.output, z_prob, mu, tau, g, learned, traces, s, f_mu, f_tau, ph, h)


def forward_causal(net: CausalQuantileNet, x, q, gate=None):
    """Single-unit readout on the outcome scale.

    Returns (y_mean, y_quantile, z_prob, mu_vec, tau_vec).
    """
    fw = causal_forward(net, np.reshape(x, (1, -1)), q, gate)
    y = net.y_loc + net.y_scale * fw.y_hat[0]
    return float(y[0]), float(y[1]), float(fw.z_prob[0]), fw.mu[0], fw.tau[0]


def causal_backward(net: CausalQuantileNet, fw: CausalForward, d_yhat: np.ndarray,
                    d_zprob: np.ndarray, d_effect: np.ndarray | None = None) -> dict[str, np.ndarray]:
    """Gradients of a loss with respect to every parameter, given its
    derivatives in the two outputs, in the scalar propensity and,
    optionally, in the per-row effect readout (see :func:`effect_std`)."""
    b, t = net.blocks, fw.traces
    grads = {}
    g_out = nn.backward(b["out"], t["out"], d_yhat)
    grads.update(g_out.as_dict("out."))
    dh = g_out.input
    d_mu = dh
    d_tau = dh * fw.gate
    if d_effect is not None:
        w_q = b["out"].layers[0].weights[1]
        grads["out.layer0.weights"] = grads["out.layer0.weights"].copy()
        grads["out.layer0.weights"][1] += d_effect @ fw.tau
        d_tau = d_tau + d_effect[:, None] * w_q
    d_s = d_mu * fw.f_mu + d_tau * fw.f_tau
    g_mu = nn.backward(b["mu"], t["mu"], d_mu * fw.s)
    grads.update(g_mu.as_dict("mu."))
    g_tau = nn.backward(b["tau"], t["tau"], d_tau * fw.s)
    grads.update(g_tau.as_dict("tau."))
    if t["embed"] is not None:
        grads.update(nn.backward(b["embed"], t["embed"], d_s).as_dict("embed."))
    else:
        grads.update({k: np.zeros_like(v) for k, v in b["embed"].parameters("embed.").items()})

    d_logit = (d_zprob * fw.z_prob * (1.0 - fw.z_prob))[:, None]
    g_po = nn.backward(b["prop_out"], t["prop_out"], d_logit)
    grads.update(g_po.as_dict("prop_out."))
    d_ph = g_po.input
    if fw.gate_learned:
        d_ph = d_ph + dh * fw.tau * fw.gate * (1.0 - fw.gate)
    g_p2 = nn.backward(b["prop2"], t["prop2"], d_ph)
    grads.update(g_p2.as_dict("prop2."))
    d_pt = g_p2.input + g_mu.input[:, net.arch.p:]
    grads.update(nn.backward(b["prop1"], t["prop1"], d_pt).as_dict("prop1."))
    return grads


# ---------------------------------------------------------------------------
# losses
# ---------------------------------------------------------------------------


def crossing_penalty(y, y_quantile, q) -> float:
    return nn.crossing_penalty(np.asarray(y, float), np.asarray(y_quantile, float), q)[0]


def effect_std(net: CausalQuantileNet, fw: CausalForward) -> np.ndarray:
    """Quantile-head difference between gate 1 and gate 0, standardised scale."""
    return fw.tau @ net.blocks["out"].layers[0].weights[1]


@dataclass
class LossParts:
    total: float
    l_z: float
    l_q: float
    l_mse: float
    l_cross: float
    l_eff: float = 0.0
    clamped: int = 0


def loss_terms(y_hat: np.ndarray, z_prob: np.ndarray, y: np.ndarray, z: np.ndarray, q: np.ndarray,
               weights: LossWeights, effect: np.ndarray | None = None):
    """Weighted joint loss and its derivatives in (y_hat, z_prob, effect).

    l_z is the negated Bernoulli log-likelihood so the total is minimised.
    The effect term is only evaluated when ``effect`` is given.
    """
    clamped = int(np.sum((z_prob <= nn.BCE_CLAMP) | (z_prob >= 1 - nn.BCE_CLAMP)))
    l_z, g_z = nn.bce_loss(z_prob, z)
    l_mse, g_mse = nn.mse_loss(y_hat[:, 0], y)
    l_q, g_q = nn.pinball_loss(y_hat[:, 1], y, q)
    l_c, g_c = nn.crossing_penalty(y, y_hat[:, 1], q)
    w = weights
    l_e, d_eff = 0.0, None
    if effect is not None:
        l_e, g_e = nn.mse_loss(effect, np.zeros_like(effect))
        d_eff = w.w_eff * g_e
    total = w.w_z * l_z + w.w_q * l_q + w.w_mse * l_mse + w.w_cross * l_c + w.w_eff * l_e
    d_yhat = np.column_stack([w.w_mse * g_mse, w.w_q * g_q + w.w_cross * g_c])
    return LossParts(total, l_z, l_q, l_mse, l_c, l_e, clamped), d_yhat, w.w_z * g_z, d_eff


def joint_loss(net: CausalQuantileNet, x, z, y, q, weights: LossWeights | None = None) -> LossParts:
    """Joint loss on a batch with observed treatments as the gate.

    ``y`` is on the outcome scale; the loss is computed on the network's
    internal standardised scale.
    """
    weights = weights or LossWeights()
    fw = causal_forward(net, x, q, gate=np.asarray(z, dtype=np.float64))
    ys = (np.asarray(y, float) - net.y_loc) / net.y_scale
    parts, *_ = loss_terms(fw.y_hat, fw.z_prob, ys, np.asarray(z, float), np.asarray(q, float), weights,
                           effect_std(net, fw))
    return parts


# ---------------------------------------------------------------------------
# training
# ---------------------------------------------------------------------------


def default_train_config(**overrides) -> TrainConfig:
    base = dict(learning_rate=3e-3, batch_size=100, epochs=400, seed=0, lr_final_frac=0.05)
    base.update(overrides)
    return TrainConfig(**base)


def train_causal(ds: CausalDataset, arch: CausalArch | None = None, config: TrainConfig | None = None,
                 weights: LossWeights | None = None) -> CausalQuantileNet:
    """Minimise the joint loss with one fresh quantile level per unit per epoch.

    Only x, z and y are read from ``ds``.
    """
    arch = arch or CausalArch(p=ds.p)
    config = config or default_train_config()
    weights = weights or LossWeights()
    if arch.p != ds.p:
        raise DimensionError(f"dataset has {ds.p} covariates, architecture expects {arch.p}")
    rng = nn.make_rng(config.seed)
    net = CausalQuantileNet.init(arch, rng)
    net.y_loc = float(np.mean(ds.y))
    net.y_scale = float(np.std(ds.y)) or 1.0
    x = np.asarray(ds.x, float)
    z = np.asarray(ds.z, float)
    ys = (np.asarray(ds.y, float) - net.y_loc) / net.y_scale

    params = net.parameters()
    state = nn.OptState()
    hist = {k: [] for k in ("total", "l_z", "l_q", "l_mse", "l_cross", "l_eff")}
    last_finite = 0
    for epoch in range(1, config.epochs + 1):
        q_all = rng.random(ds.n)
        lr = config.lr_at(epoch)
        sums = dict.fromkeys(hist, 0.0)
        for idx in nn.minibatches(ds.n, config.batch_size, rng):
            fw = causal_forward(net, x[idx], q_all[idx], gate=z[idx])
            parts, d_yhat, d_zprob, d_eff = loss_terms(fw.y_hat, fw.z_prob, ys[idx], z[idx], q_all[idx],
                                                       weights, effect_std(net, fw))
            net.clamp_count += parts.clamped
            grads = causal_backward(net, fw, d_yhat, d_zprob, d_eff)
            if not np.isfinite(parts.total) or not all(np.all(np.isfinite(g)) for g in grads.values()):
                from .engine import TrainingDiverged

                raise TrainingDiverged(last_finite, hist)
            nn.optimizer_step(params, grads, config, state, lr)
            for key in sums:
                sums[key] += getattr(parts, key) * len(idx)
        for key in hist:
            hist[key].append(sums[key] / ds.n)
        last_finite = epoch
    net.history = hist
    net.trained = True
    return net


@dataclass
class CausalEnsemble:
    """Bootstrap bag of causal quantile nets.

    Effect draw j is read from member j mod B at its own quantile level, so
    a unit's draws mix spread across quantile levels with disagreement
    between members fitted to different resamples.
    """

    members: list[CausalQuantileNet]

    @property
    def trained(self) -> bool:
        return bool(self.members) and all(m.trained for m in self.members)

    @property
    def arch(self) -> CausalArch:
        return self.members[0].arch

    def effect_at(self, X: np.ndarray, levels: np.ndarray) -> np.ndarray:
        n, M = levels.shape
        out = np.empty((n, M))
        B = len(self.members)
        for b, member in enumerate(self.members):
            cols = np.arange(b, M, B)
            if cols.size:
                lv = levels[:, cols]
                out[:, cols] = effect_readout(member, np.repeat(X, cols.size, axis=0),
                                              lv.reshape(-1)).reshape(n, cols.size)
        return out

    def to_arrays(self) -> tuple[dict[str, np.ndarray], dict]:
        arrays, metas = {}, []
        for b, member in enumerate(self.members):
            a, meta = member.to_arrays()
            arrays.update({f"m{b}.{k}": v for k, v in a.items()})
            metas.append(meta)
        return arrays, {"kind": "causal_ensemble", "members": metas}

    @classmethod
    def from_arrays(cls, arrays, meta) -> "CausalEnsemble":
        members = []
        for b, m_meta in enumerate(meta["members"]):
            prefix = f"m{b}."
            sub = {k[len(prefix):]: v for k, v in arrays.items() if k.startswith(prefix)}
            members.append(CausalQuantileNet.from_arrays(sub, m_meta))
        return cls(members)


def train_causal_ensemble(ds: CausalDataset, n_members: int = 1, arch: CausalArch | None = None,
                          config: TrainConfig | None = None,
                          weights: LossWeights | None = None) -> CausalEnsemble:
    """Fit ``n_members`` nets, each on its own bootstrap resample of the units.

    A single member is fitted to the full data, which is exactly
    :func:`train_causal`.
    """
    if n_members < 1:
        raise ValueError("n_members must be >= 1")
    config = config or default_train_config()
    if n_members == 1:
        return CausalEnsemble([train_causal(ds, arch, config, weights)])
    members = []
    for b in range(n_members):
        idx = nn.make_rng(nn.derive_seed(config.seed, b, 1)).integers(0, ds.n, ds.n)
        member_cfg = replace(config, seed=nn.derive_seed(config.seed, b, 2))
        members.append(train_causal(ds.subset(idx), arch, member_cfg, weights))
    return CausalEnsemble(members)


# ---------------------------------------------------------------------------
# readouts
# ---------------------------------------------------------------------------


def _require_trained(net):
    if not getattr(net, "trained", False):
        raise UntrainedModelError("model has not been trained")


def effect_readout(net: CausalQuantileNet, x: np.ndarray, q: np.ndarray) -> np.ndarray:
    """Quantile-output difference between forced treatment and forced control,
    one value per row of (x, q), on the outcome scale."""
    yt = causal_forward(net, x, q, gate=1.0).y_hat[:, 1]
    yc = causal_forward(net, x, q, gate=0.0).y_hat[:, 1]
    return net.y_scale * (yt - yc)


@dataclass
class CatePosterior:
    unit_id: int
    draws: np.ndarray
    levels: np.ndarray


def cate_draws(net, X: np.ndarray, M: int, seed: int = 0) -> np.ndarray:
    """(n_units, M) effect draws; unit i uses the stream derived from (seed, i)."""
    _require_trained(net)
    X = np.atleast_2d(np.asarray(X, float))
    levels = np.vstack([nn.make_rng(nn.derive_seed(seed, i)).random(M) for i in range(X.shape[0])])
    return _draws_at(net, X, levels)


def _draws_at(net, X, levels):
    if hasattr(net, "effect_at"):
        return net.effect_at(X, levels)
    n, M = levels.shape
    return effect_readout(net, np.repeat(X, M, axis=0), levels.reshape(-1)).reshape(n, M)


def cate_posterior(net, x, M: int, seed: int = 0, unit_id: int = 0) -> CatePosterior:
    """Effect draws for one unit at M uniform quantile levels."""
    _require_trained(net)
    levels = nn.make_rng(nn.derive_seed(seed, unit_id)).random(M)
    draws = _draws_at(net, np.reshape(x, (1, -1)), levels[None, :])[0]
    return CatePosterior(unit_id, draws, levels)


def ate_lorenz(net, ds: CausalDataset, grid_size: int = 99) -> float:
    """Average over units of the midpoint-rule integral of the effect
    quantile readout over (0, 1)."""
    _require_trained(net)
    if isinstance(net, CausalEnsemble):
        return float(np.mean([ate_lorenz(m, ds, grid_size) for m in net.members]))
    u = (np.arange(1, grid_size + 1) - 0.5) / grid_size
    levels = np.broadcast_to(u, (ds.n, grid_size))
    per_unit = _draws_at(net, np.asarray(ds.x, float), levels).mean(axis=1)
    return float(np.mean(per_unit))


def credible_interval(posterior: CatePosterior | np.ndarray, level: float = 0.95) -> tuple[float, float]:
    """Equal-tailed nearest-rank interval of the draws."""
    from .metrics import nearest_rank_quantile

    draws = posterior.draws if isinstance(posterior, CatePosterior) else np.asarray(posterior)
    if not 0 < level < 1:
        raise ValueError("level must be in (0, 1)")
    if draws.shape[-1] < 100:
        raise ValueError("credible intervals need at least 100 draws")
    alpha = 1.0 - level
    return (float(nearest_rank_quantile(draws, alpha / 2)), float(nearest_rank_quantile(draws, 1 - alpha / 2)))


def predict_outcomes(net: CausalQuantileNet | CausalEnsemble, x: np.ndarray, z=None, q=0.5):
    """(mean head, quantile head, scalar propensity) on the outcome scale.

    ``q`` is a level or one level per row. An ensemble returns the average
    of its members' outputs.
    """
    if isinstance(net, CausalEnsemble):
        outs = [predict_outcomes(m, x, z, q) for m in net.members]
        return tuple(np.mean([o[k] for o in outs], axis=0) for k in range(3))
    fw = causal_forward(net, x, q, gate=None if z is None else np.asarray(z, float))
    y = net.y_loc + net.y_scale * fw.y_hat
    return y[:, 0], y[:, 1], fw.z_prob


def save_causal(path, net: CausalQuantileNet | CausalEnsemble, extra_meta: dict | None = None) -> None:
    arrays, meta = net.to_arrays()
    meta.update(extra_meta or {})
    nn.save_checkpoint(path, arrays, meta)


def load_causal(path) -> CausalQuantileNet | CausalEnsemble:
    arrays, meta = nn.load_checkpoint(path)
    kind = meta.get("kind")
    if kind == "causal_quantile_net":
        return CausalQuantileNet.from_arrays(arrays, meta)
    if kind == "causal_ensemble":
        return CausalEnsemble.from_arrays(arrays, meta)
    raise ValueError(f"{path} does not hold a causal model")
