"""Thompson sampling with a functional variational posterior.

The reward model is a network with a stochastic noise input,
``f(x) = g_phi(x, xi)``; one draw of ``xi`` is one function sample. Training
maximises a function-space ELBO whose KL term is evaluated on bootstrapped
measurement sets and estimated with SSGE score differences between
posterior and prior function samples.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from . import ssge
from .core import ActionSet, HistoryBuffer
from .errors import ContractError, NumericError, ShapeError
from .tensor import DenseNet, Optimizer, as_matrix

STRATEGIES = ("history+action-perturb", "genomics-only", "action-only", "gaussian-random")
DEFAULT_STRATEGY = STRATEGIES[0]


@dataclass
class FbnnConfig:
    kl_weight: float = 0.1
    n_measurement: int = 64
    strategy: str = DEFAULT_STRATEGY
    n_posterior: int = 20
    n_prior: int = 20
    genomics_noise: float = 1.0
    noise_dim: int = 16
    noise_scale: float = 1.0
    hidden: tuple = (64, 64)
    activation: str = "relu"
    steps: int = 100
    batch_size: int = 32
    obs_var: float = 0.01
    optimizer: str = "rmsprop"
    lr: float = 1e-3
    drug_context: bool = True

    def __post_init__(self):
        self.hidden = tuple(int(h) for h in self.hidden)
        if self.strategy not in STRATEGIES:
            raise ContractError(f"unknown measurement strategy {self.strategy!r}; "
                                f"choose from {STRATEGIES}")
        if self.kl_weight < 0:
            raise ContractError("kl_weight must be nonnegative")
        for name in ("n_measurement", "n_posterior", "n_prior", "noise_dim", "steps", "batch_size"):
            if getattr(self, name) < 1:
                raise ContractError(f"{name} must be >= 1")
        if self.n_measurement < 2:
            raise ContractError("n_measurement must be >= 2")
        if self.n_posterior < 2 or self.n_prior < 2:
            raise ContractError("SSGE needs at least 2 posterior and 2 prior samples")
        for name in ("genomics_noise", "noise_scale", "obs_var", "lr"):
            if not getattr(self, name) > 0:
                raise ContractError(f"{name} must be positive")


class StochasticNet:
    """A DenseNet whose last ``noise_dim`` inputs are fed Gaussian noise."""

    def __init__(self, base: DenseNet, noise_dim: int, noise_scale: float = 1.0):
        if noise_dim < 1 or noise_dim >= base.input_dim:
            raise ContractError(f"noise_dim {noise_dim} incompatible with input width {base.input_dim}")
        if not noise_scale > 0:
            raise ContractError("noise_scale must be positive")
        self.base = base
        self.noise_dim = noise_dim
        self.noise_scale = noise_scale

    @classmethod
    def init(cls, input_dim: int, rng: np.random.Generator, hidden: Sequence[int] = (64, 64),
             noise_dim: int = 16, noise_scale: float = 1.0, activation: str = "relu"):
        base = DenseNet.init([input_dim + noise_dim, *hidden, 1], rng, activation)
        return cls(base, noise_dim, noise_scale)

    @property
    def input_dim(self) -> int:
        return self.base.input_dim - self.noise_dim

    def draw_noise(self, rng: np.random.Generator, count: int = 1) -> np.ndarray:
        return rng.normal(0.0, self.noise_scale, size=(count, self.noise_dim))

    def _first_layer(self, points: np.ndarray, noise: np.ndarray) -> np.ndarray:
        w, b = self.base.weights[0], self.base.biases[0]
        d = self.input_dim
        # the noise part of the pre-activation is shared by all rows of a draw
        z = (points @ w[:d])[None, :, :] + (noise @ w[d:])[:, None, :] + b
        return z.reshape(-1, w.shape[1])

    def _check(self, points, noise):
        points = as_matrix(points, "points")
        noise = as_matrix(noise, "noise")
        if points.shape[1] != self.input_dim:
            raise ShapeError(f"points have {points.shape[1]} columns, net expects {self.input_dim}")
        if noise.shape[1] != self.noise_dim:
            raise ShapeError(f"noise has {noise.shape[1]} columns, expected {self.noise_dim}")
        return points, noise

    def forward_cached(self, points, noise):
        """Function values (S, N) plus the cache needed by :meth:`backward_cached`."""
        points, noise = self._check(points, noise)
        out, cache = self.base._forward_from(self._first_layer(points, noise))
        out = out.reshape(noise.shape[0], points.shape[0])
        if not np.all(np.isfinite(out)):
            raise NumericError("non-finite function values")
        return out, (points, noise, cache)

    def backward_cached(self, cached, grad_values) -> np.ndarray:
        points, noise, cache = cached
        s, n = noise.shape[0], points.shape[0]
        grad_values = np.asarray(grad_values, dtype=np.float64)
        if grad_values.shape != (s, n):
            raise ShapeError(f"grad shape {grad_values.shape} != ({s}, {n})")
        grads, dz = self.base._backward_from(cache, grad_values.reshape(-1, 1))
        dz = dz.reshape(s, n, -1)
        g_w0 = np.vstack([points.T @ dz.sum(axis=0), noise.T @ dz.sum(axis=1)])
        grads.insert(0, (g_w0, dz.sum(axis=(0, 1))))
        flat = self.base._pack(grads)
        if not np.all(np.isfinite(flat)):
            raise NumericError("non-finite gradient")
        return flat

    def values(self, points, noise) -> np.ndarray:
        """Function values of every noise draw on every point, shape (S, N)."""
        return self.forward_cached(points, noise)[0]

    def backward_values(self, points, noise, grad_values) -> np.ndarray:
        """Flat parameter gradient given dLoss/dvalues of shape (S, N)."""
        return self.backward_cached(self.forward_cached(points, noise)[1], grad_values)

    def copy(self) -> "StochasticNet":
        return StochasticNet(self.base.copy(), self.noise_dim, self.noise_scale)


class PriorEnsemble:
    """P freshly initialised stochastic nets, evaluated in one batched pass."""

    def __init__(self, count: int, input_dim: int, rng: np.random.Generator,
                 hidden: Sequence[int] = (64, 64), noise_dim: int = 16,
                 noise_scale: float = 1.0, activation: str = "relu"):
        nets = [StochasticNet.init(input_dim, rng, hidden, noise_dim, noise_scale, activation)
                for _ in range(count)]
        self.noise_dim = noise_dim
        self.noise_scale = noise_scale
        self.input_dim = input_dim
        self.activation = activation
        self.weights = [np.stack([n.base.weights[i] for n in nets]) for i in range(len(hidden) + 1)]
        self.biases = [np.stack([n.base.biases[i] for n in nets]) for i in range(len(hidden) + 1)]

    def __len__(self) -> int:
        return self.weights[0].shape[0]

    def sample(self, points: np.ndarray, rng: np.random.Generator) -> np.ndarray:
        """One function draw per member on ``points``, shape (P, N)."""
        d = self.input_dim
        noise = rng.normal(0.0, self.noise_scale, size=(len(self), 1, self.noise_dim))
        w0 = self.weights[0]
        h = points[None] @ w0[:, :d] + noise @ w0[:, d:] + self.biases[0][:, None, :]
        for w, b in zip(self.weights[1:], self.biases[1:]):
            h = np.maximum(h, 0.0) if self.activation == "relu" else np.tanh(h)
            h = h @ w + b[:, None, :]
        return h[..., 0]


@dataclass
class FunctionSample:
    values: np.ndarray
    noise: np.ndarray


@dataclass
class MeasurementSet:
    points: np.ndarray
    from_history: np.ndarray = field(repr=False)

    def __len__(self) -> int:
        return self.points.shape[0]


def sample_function(net: StochasticNet, points, rng: np.random.Generator) -> FunctionSample:
    pts = points.points if isinstance(points, MeasurementSet) else points
    noise = net.draw_noise(rng)
    return FunctionSample(net.values(pts, noise)[0], noise[0])


def sample_measurement_set(history: HistoryBuffer, actions: ActionSet, cfg: FbnnConfig,
                           rng: np.random.Generator) -> MeasurementSet:
    """Bootstrap a measurement set from the history and its perturbations.

    Half the rows (rounded up) are history rows drawn with replacement; the
    rest are perturbed history rows whose form depends on ``cfg.strategy``.
    ``gaussian-random`` instead fills every row with N(0, I) genomics and a
    uniformly drawn drug.
    """
    n_hist = len(history)
    if n_hist == 0:
        raise ContractError("cannot build a measurement set from an empty history")
    n = cfg.n_measurement
    k = len(actions)
    ctx, acts = history.contexts, history.actions
    if cfg.strategy == "gaussian-random":
        x_g = rng.normal(size=(n, ctx.shape[1]))
        x_d = actions.features[rng.integers(0, k, size=n)]
        return MeasurementSet(np.hstack([x_g, x_d]), np.zeros(n, dtype=bool))

    n_keep = (n + 1) // 2
    n_pert = n - n_keep
    keep = rng.integers(0, n_hist, size=n_keep)
    src = rng.integers(0, n_hist, size=n_pert)
    x_g = ctx[src]
    if cfg.strategy == "history+action-perturb":
        drugs = rng.integers(0, k, size=n_pert)
    elif cfg.strategy == "action-only":
        if k > 1:
            # a different drug than the one actually played
            drugs = (acts[src] + rng.integers(1, k, size=n_pert)) % k
        else:
            drugs = acts[src]
    else:  # genomics-only
        drugs = acts[src]
        x_g = x_g + rng.normal(0.0, cfg.genomics_noise, size=x_g.shape)
    points = np.vstack([
        np.hstack([ctx[keep], actions.features[acts[keep]]]),
        np.hstack([x_g, actions.features[drugs]]),
    ])
    flags = np.r_[np.ones(n_keep, dtype=bool), np.zeros(n_pert, dtype=bool)]
    return MeasurementSet(points, flags)


def kl_score_gradient(post_values: np.ndarray, prior_values: np.ndarray) -> np.ndarray:
    """Per-sample ``grad_f [log q(f) - log p(f)]`` at the posterior samples."""
    q_score = ssge.score(ssge.fit(post_values), post_values)
    p_score = ssge.score(ssge.fit(prior_values), post_values)
    return q_score - p_score


def functional_update(net: StochasticNet, history: HistoryBuffer, actions: ActionSet,
                      cfg: FbnnConfig, opt: Optimizer, rng: np.random.Generator,
                      losses: Optional[list] = None) -> StochasticNet:
    """Run ``cfg.steps`` gradient steps on the measurement-set fELBO.

    Each step: bootstrap a measurement set H, draw S posterior functions on
    H plus a minibatch of history rows, take the Gaussian NLL gradient on the
    minibatch and the SSGE score-difference KL gradient on H, and descend on
    ``NLL + kl_weight * KL``. Prior functions come from ``n_prior`` fresh
    random nets drawn once per call. ``losses`` collects per-step NLL values.
    """
    n_hist = len(history)
    if n_hist == 0:
        raise ContractError("functional update needs a non-empty history")
    prior = PriorEnsemble(cfg.n_prior, net.input_dim, rng, cfg.hidden, net.noise_dim,
                          net.noise_scale, cfg.activation)
    rewards = history.rewards
    data = np.hstack([history.contexts, actions.features[history.actions]])
    bsz = min(cfg.batch_size, n_hist)
    s = cfg.n_posterior
    for _ in range(cfg.steps):
        m_set = sample_measurement_set(history, actions, cfg, rng)
        rows = rng.choice(n_hist, size=bsz, replace=False)
        points = np.vstack([m_set.points, data[rows]])
        noise = net.draw_noise(rng, s)
        values, cached = net.forward_cached(points, noise)
        n_meas = len(m_set)

        resid = values[:, n_meas:] - rewards[rows]
        nll = 0.5 * float(np.mean(resid ** 2)) / cfg.obs_var
        if not np.isfinite(nll):
            raise NumericError("non-finite reconstruction loss")
        if losses is not None:
            losses.append(nll)
        grad = np.zeros_like(values)
        grad[:, n_meas:] = resid / (cfg.obs_var * s * bsz)
        if cfg.kl_weight > 0:
            f_h = values[:, :n_meas]
            f_prior = prior.sample(m_set.points, rng)
            grad[:, :n_meas] = cfg.kl_weight * kl_score_gradient(f_h, f_prior) / s
        tape = net.backward_cached(cached, grad)
        net.base.set_flat(opt.update(net.base.flat(), tape))
    return net


def select_action(net: StochasticNet, x_g, actions: ActionSet, rng: np.random.Generator) -> int:
    """Argmax over actions under one shared noise draw; ties go to the lowest index."""
    if len(actions) == 0:
        raise ContractError("empty action set")
    noise = net.draw_noise(rng)
    return int(np.argmax(net.values(actions.inputs(x_g), noise)[0]))


def predictive_std(net: StochasticNet, points, rng: np.random.Generator,
                   n_samples: int = 200) -> np.ndarray:
    """Monte Carlo standard deviation of f at each point."""
    return net.values(points, net.draw_noise(rng, n_samples)).std(axis=0)


class FunctionalPosteriorAgent:
    """Thompson-sampling agent backed by a functional variational posterior.

    With ``cfg.drug_context=False`` the drug fingerprints are replaced by
    one-hot action codes, so the network cannot share strength between
    structurally similar drugs.
    """

    name = "functional-posterior"

    def __init__(self, actions: ActionSet, context_dim: int, cfg: Optional[FbnnConfig] = None,
                 rng: Optional[np.random.Generator] = None):
        self.cfg = cfg or FbnnConfig()
        self.rng = rng if rng is not None else np.random.default_rng()
        self.actions = actions if self.cfg.drug_context else ActionSet.one_hot(len(actions), actions.ids)
        self.net = StochasticNet.init(context_dim + self.actions.dim, self.rng, self.cfg.hidden,
                                      self.cfg.noise_dim, self.cfg.noise_scale, self.cfg.activation)
        self.opt = Optimizer(self.cfg.optimizer, self.cfg.lr)

    def choose(self, x_g) -> int:
        return select_action(self.net, x_g, self.actions, self.rng)

    def observe(self, x_g, action, reward) -> None:
        pass

    def update(self, history: HistoryBuffer) -> None:
        functional_update(self.net, history, self.actions, self.cfg, self.opt, self.rng)
