"""Benchmark policies: Uniform, NeuralGreedy, Bayes-by-Backprop, Dropout,
BootstrappedNN and ParameterNoise (direct noise injection).

All neural baselines use the same ``[x_g || x_d] -> 64 -> 64 -> 1`` network,
trained on a squared-error loss with minibatches of 32, 100 steps per update.
"""
from __future__ import annotations

from typing import Optional, Sequence

import numpy as np

from .core import ActionSet, HistoryBuffer
from .errors import ContractError
from .tensor import DenseNet, Optimizer

HIDDEN = (64, 64)
STEPS = 100
BATCH = 32


def _greedy(net: DenseNet, x_g, actions: ActionSet, masks=None) -> int:
    return int(np.argmax(net.forward(actions.inputs(x_g), masks)[:, 0]))


def _minibatch(n: int, size: int, rng: np.random.Generator) -> np.ndarray:
    return rng.choice(n, size=min(size, n), replace=False)


def regression_step(net: DenseNet, opt: Optimizer, x: np.ndarray, y: np.ndarray,
                    masks=None) -> float:
    """One squared-error step; returns the loss before the update."""
    resid = net.forward(x, masks)[:, 0] - y
    tape = net.backward(x, (resid / len(y))[:, None], masks)
    opt.step(net, tape)
    return 0.5 * float(np.mean(resid ** 2))


# -- Uniform ------------------------------------------------------------------

def uniform_choose(n_actions: int, rng: np.random.Generator) -> int:
    if n_actions < 1:
        raise ContractError("empty action set")
    return int(rng.integers(n_actions))


class UniformAgent:
    name = "uniform"

    def __init__(self, actions: ActionSet, context_dim: int, rng=None):
        self.k = len(actions)
        self.rng = rng if rng is not None else np.random.default_rng()

    def choose(self, x_g) -> int:
        return uniform_choose(self.k, self.rng)

    def observe(self, x_g, action, reward):
        pass

    def update(self, history):
        pass


class _NeuralAgent:
    """Shared plumbing: one regression net trained on the whole history."""

    def __init__(self, actions: ActionSet, context_dim: int, rng=None, hidden=HIDDEN,
                 lr: float = 1e-3, optimizer: str = "rmsprop", steps: int = STEPS,
                 batch_size: int = BATCH):
        self.actions = actions
        self.rng = rng if rng is not None else np.random.default_rng()
        self.sizes = [context_dim + actions.dim, *hidden, 1]
        self.net = DenseNet.init(self.sizes, self.rng)
        self.opt = Optimizer(optimizer, lr)
        self.optimizer, self.lr = optimizer, lr
        self.steps, self.batch_size = steps, batch_size

    def observe(self, x_g, action, reward):
        pass

    def update(self, history: HistoryBuffer) -> None:
        x, y = history.inputs(), history.rewards
        for _ in range(self.steps):
            rows = _minibatch(len(y), self.batch_size, self.rng)
            regression_step(self.net, self.opt, x[rows], y[rows])


# -- NeuralGreedy ---------------------------------------------------------------

def neural_greedy_choose(net: DenseNet, x_g, actions: ActionSet, epsilon: float,
                         rng: np.random.Generator) -> int:
    if not 0.0 <= epsilon <= 1.0:
        raise ContractError(f"epsilon must lie in [0, 1], got {epsilon}")
    if rng.random() < epsilon:
        return uniform_choose(len(actions), rng)
    return _greedy(net, x_g, actions)


class NeuralGreedyAgent(_NeuralAgent):
    name = "neural-greedy"

    def __init__(self, actions, context_dim, rng=None, epsilon: float = 0.1, **kw):
        super().__init__(actions, context_dim, rng, **kw)
        self.epsilon = epsilon

    def choose(self, x_g) -> int:
        return neural_greedy_choose(self.net, x_g, self.actions, self.epsilon, self.rng)


# -- Bayes by Backprop --------------------------------------------------------

def _softplus(x):
    return np.logaddexp(0.0, x)


def _sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


class BbbNet:
    """Mean-field Gaussian posterior over the flat weights of a DenseNet.

    The prior is ``pi_mix * N(prior_mean, sigma1^2) + (1 - pi_mix) *
    N(prior_mean, sigma2^2)`` independently per weight.
    """

    def __init__(self, template: DenseNet, mu: np.ndarray, rho: np.ndarray,
                 sigma1: float = 1.0, sigma2: float = float(np.exp(-6.0)),
                 pi_mix: float = 0.5, prior_mean: float = 0.0):
        if not (sigma1 > 0 and sigma2 > 0):
            raise ContractError("prior standard deviations must be positive")
        if not 0.0 <= pi_mix <= 1.0:
            raise ContractError("pi_mix must lie in [0, 1]")
        self.template = template.copy()
        self.mu = np.asarray(mu, dtype=np.float64).copy()
        self.rho = np.asarray(rho, dtype=np.float64).copy()
        self.sigma1, self.sigma2 = sigma1, sigma2
        self.pi_mix, self.prior_mean = pi_mix, prior_mean

    @classmethod
    def init(cls, sizes: Sequence[int], rng: np.random.Generator, rho0: float = -5.0, **prior):
        template = DenseNet.init(sizes, rng)
        return cls(template, template.flat(), np.full(template.param_count, rho0), **prior)

    @property
    def sigma(self) -> np.ndarray:
        return _softplus(self.rho)

    def sample(self, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
        eps = rng.normal(size=self.mu.shape)
        return self.mu + self.sigma * eps, eps

    def net_for(self, weights: np.ndarray) -> DenseNet:
        return self.template.with_flat(weights)

    def log_prior(self, w: np.ndarray) -> tuple[float, np.ndarray]:
        """Log prior density and its gradient at ``w``."""
        z = w - self.prior_mean
        comps = []
        for weight, s in ((self.pi_mix, self.sigma1), (1.0 - self.pi_mix, self.sigma2)):
            if weight > 0:
                comps.append((np.log(weight) - 0.5 * np.log(2 * np.pi) - np.log(s)
                              - 0.5 * (z / s) ** 2, s))
        logs = np.stack([c for c, _ in comps])
        total = np.logaddexp.reduce(logs, axis=0)
        resp = np.exp(logs - total)
        grad = -sum(r * z / s ** 2 for r, (_, s) in zip(resp, comps))
        return float(total.sum()), grad

    def log_posterior(self, w: np.ndarray) -> float:
        s = self.sigma
        return float(np.sum(-0.5 * np.log(2 * np.pi) - np.log(s) - 0.5 * ((w - self.mu) / s) ** 2))

    def kl_sample(self, rng: np.random.Generator) -> float:
        """Single-draw Monte Carlo estimate of KL[q || prior]."""
        w, _ = self.sample(rng)
        return self.log_posterior(w) - self.log_prior(w)[0]


def bbb_update(net: BbbNet, batch: tuple[np.ndarray, np.ndarray], opt: Optimizer,
               rng: np.random.Generator, n_data: int, kl_weight: float = 1.0,
               obs_var: float = 0.01) -> float:
    """One reparameterised step on ``NLL + kl_weight / n_data * KL``.

    ``opt`` acts on the concatenated ``[mu, rho]`` vector. Returns the loss.
    """
    x, y = batch
    if len(y) == 0:
        raise ContractError("empty batch")
    w, eps = net.sample(rng)
    model = net.net_for(w)
    resid = model.forward(x)[:, 0] - y
    nll = 0.5 * float(np.mean(resid ** 2)) / obs_var
    g_w = model.backward(x, (resid / (obs_var * len(y)))[:, None])
    scale = kl_weight / n_data
    lp, g_lp = net.log_prior(w)
    sigma = net.sigma
    # log q at the reparameterised draw depends on sigma only through -log sigma
    g_w = g_w - scale * g_lp
    g_mu = g_w
    g_sigma = g_w * eps - scale / sigma
    g_rho = g_sigma * _sigmoid(net.rho)
    params = opt.update(np.concatenate([net.mu, net.rho]), np.concatenate([g_mu, g_rho]))
    net.mu, net.rho = params[: net.mu.size].copy(), params[net.mu.size:].copy()
    return nll + scale * (net.log_posterior(w) - lp)


class BbbAgent:
    name = "bbb"

    def __init__(self, actions: ActionSet, context_dim: int, rng=None, hidden=HIDDEN,
                 lr: float = 1e-3, optimizer: str = "rmsprop", steps: int = STEPS,
                 batch_size: int = BATCH, sigma1: float = 1.0,
                 sigma2: float = float(np.exp(-6.0)), pi_mix: float = 0.5,
                 prior_mean: float = 0.0, kl_weight: float = 1.0):
        self.actions = actions
        self.rng = rng if rng is not None else np.random.default_rng()
        self.net = BbbNet.init([context_dim + actions.dim, *hidden, 1], self.rng,
                               sigma1=sigma1, sigma2=sigma2, pi_mix=pi_mix, prior_mean=prior_mean)
        self.opt = Optimizer(optimizer, lr)
        self.steps, self.batch_size, self.kl_weight = steps, batch_size, kl_weight

    def choose(self, x_g) -> int:
        w, _ = self.net.sample(self.rng)
        return _greedy(self.net.net_for(w), x_g, self.actions)

    def observe(self, x_g, action, reward):
        pass

    def update(self, history: HistoryBuffer) -> None:
        x, y = history.inputs(), history.rewards
        for _ in range(self.steps):
            rows = _minibatch(len(y), self.batch_size, self.rng)
            bbb_update(self.net, (x[rows], y[rows]), self.opt, self.rng, len(y), self.kl_weight)


# -- Dropout ------------------------------------------------------------------

def dropout_masks(net: DenseNet, p: float, rng: np.random.Generator, rows: int = 1) -> list:
    """Inverted-dropout masks for each hidden layer, shape (rows, width)."""
    if not 0.0 <= p < 1.0:
        raise ContractError(f"dropout probability must lie in [0, 1), got {p}")
    return [(rng.random((rows, w)) >= p) / (1.0 - p) for w in net.sizes[1:-1]]


def dropout_choose(net: DenseNet, x_g, actions: ActionSet, p: float,
                   rng: np.random.Generator) -> int:
    """Greedy under one dropout mask shared by every action row."""
    return _greedy(net, x_g, actions, dropout_masks(net, p, rng))


class DropoutAgent(_NeuralAgent):
    name = "dropout"

    def __init__(self, actions, context_dim, rng=None, p: float = 0.2, **kw):
        super().__init__(actions, context_dim, rng, **kw)
        if not 0.0 <= p < 1.0:
            raise ContractError(f"dropout probability must lie in [0, 1), got {p}")
        self.p = p

    def choose(self, x_g) -> int:
        return dropout_choose(self.net, x_g, self.actions, self.p, self.rng)

    def update(self, history: HistoryBuffer) -> None:
        x, y = history.inputs(), history.rewards
        for _ in range(self.steps):
            rows = _minibatch(len(y), self.batch_size, self.rng)
            masks = dropout_masks(self.net, self.p, self.rng, len(rows))
            regression_step(self.net, self.opt, x[rows], y[rows], masks)


# -- BootstrappedNN -----------------------------------------------------------

def bootstrapped_choose(nets: Sequence[DenseNet], x_g, actions: ActionSet,
                        rng: np.random.Generator) -> int:
    if len(nets) < 1:
        raise ContractError("need at least one bootstrap model")
    return _greedy(nets[int(rng.integers(len(nets)))], x_g, actions)


def bootstrap_resample(n: int, rng: np.random.Generator) -> np.ndarray:
    """Row indices of a with-replacement resample of the same size."""
    return rng.integers(0, n, size=n)


def bootstrapped_update(nets: Sequence[DenseNet], history: HistoryBuffer,
                        opts: Sequence[Optimizer], rng: np.random.Generator,
                        steps: int = STEPS, batch_size: int = BATCH) -> Sequence[DenseNet]:
    x, y = history.inputs(), history.rewards
    for net, opt in zip(nets, opts):
        idx = bootstrap_resample(len(y), rng)
        xb, yb = x[idx], y[idx]
        for _ in range(steps):
            rows = _minibatch(len(yb), batch_size, rng)
            regression_step(net, opt, xb[rows], yb[rows])
    return nets


class BootstrappedAgent:
    name = "bootstrapped"

    def __init__(self, actions: ActionSet, context_dim: int, rng=None, q: int = 5,
                 hidden=HIDDEN, lr: float = 1e-3, optimizer: str = "rmsprop",
                 steps: int = STEPS, batch_size: int = BATCH):
        if q < 1:
            raise ContractError("q must be >= 1")
        self.actions = actions
        self.rng = rng if rng is not None else np.random.default_rng()
        sizes = [context_dim + actions.dim, *hidden, 1]
        self.nets = [DenseNet.init(sizes, self.rng) for _ in range(q)]
        self.opts = [Optimizer(optimizer, lr) for _ in range(q)]
        self.steps, self.batch_size = steps, batch_size

    def choose(self, x_g) -> int:
        return bootstrapped_choose(self.nets, x_g, self.actions, self.rng)

    def observe(self, x_g, action, reward):
        pass

    def update(self, history: HistoryBuffer) -> None:
        bootstrapped_update(self.nets, history, self.opts, self.rng, self.steps, self.batch_size)


# -- ParameterNoise -------------------------------------------------------------

def perturb(net: DenseNet, sigma: float, rng: np.random.Generator) -> DenseNet:
    return net.with_flat(net.flat() + rng.normal(0.0, sigma, size=net.param_count))


def parameter_noise_choose(net: DenseNet, sigma: float, x_g, actions: ActionSet,
                           rng: np.random.Generator) -> int:
    """Greedy under ``theta + N(0, sigma^2 I)``; the stored net is untouched."""
    if sigma < 0:
        raise ContractError("sigma must be nonnegative")
    return _greedy(perturb(net, sigma, rng), x_g, actions)


def adapt_noise(sigma: float, distance: float, threshold: float = 0.1,
                factor: float = 1.01) -> float:
    """Grow sigma when perturbed and clean policies agree, shrink it otherwise."""
    return sigma * factor if distance < threshold else sigma / factor


def policy_distance(net: DenseNet, noisy: DenseNet, contexts: np.ndarray,
                    actions: ActionSet) -> float:
    """Fraction of contexts on which the two greedy policies disagree."""
    if len(contexts) == 0:
        return 0.0
    differ = [_greedy(net, c, actions) != _greedy(noisy, c, actions) for c in contexts]
    return float(np.mean(differ))


class ParameterNoiseAgent(_NeuralAgent):
    name = "parameter-noise"

    def __init__(self, actions, context_dim, rng=None, sigma: float = 0.01,
                 threshold: float = 0.1, **kw):
        super().__init__(actions, context_dim, rng, **kw)
        self.sigma = sigma
        self.threshold = threshold
        self._recent: list[np.ndarray] = []

    def choose(self, x_g) -> int:
        return parameter_noise_choose(self.net, self.sigma, x_g, self.actions, self.rng)

    def observe(self, x_g, action, reward):
        self._recent.append(np.array(x_g, dtype=np.float64))

    def update(self, history: HistoryBuffer) -> None:
        super().update(history)
        noisy = perturb(self.net, self.sigma, self.rng)
        dist = policy_distance(self.net, noisy, np.array(self._recent), self.actions)
        self.sigma = adapt_noise(self.sigma, dist, self.threshold)
        self._recent = []
