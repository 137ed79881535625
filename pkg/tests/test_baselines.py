import numpy as np
import pytest

from fpbandit.baselines import (BbbNet, BootstrappedAgent, DropoutAgent, NeuralGreedyAgent,
                                ParameterNoiseAgent, UniformAgent, BbbAgent, adapt_noise,
                                bbb_update, bootstrap_resample, bootstrapped_choose,
                                bootstrapped_update, dropout_choose, neural_greedy_choose,
                                parameter_noise_choose, policy_distance, uniform_choose)
from fpbandit.core import ActionSet, HistoryBuffer, make_synthetic_nonlinear, run_trial
from fpbandit.errors import ContractError
from fpbandit.tensor import DenseNet, Optimizer

from conftest import RecordingRng, finite_difference, rel_err

K = 4
ACTIONS = ActionSet(np.eye(K))
X_G = np.array([0.3, 0.7])


def preferring(action, d1=2, k=K):
    """Linear net whose output is the one-hot code of ``action``."""
    w = np.zeros((d1 + k, 1))
    w[d1 + action, 0] = 1.0
    return DenseNet([w], [[0.0]])


def freqs(draws, k=K):
    return np.bincount(draws, minlength=k) / len(draws)


def test_uniform_single_action():
    assert uniform_choose(1, np.random.default_rng(0)) == 0


def test_uniform_frequencies():
    rng = np.random.default_rng(1)
    f = freqs([uniform_choose(K, rng) for _ in range(10_000)])
    assert np.all((f >= 0.23) & (f <= 0.27))


def test_uniform_reproducible():
    a = [uniform_choose(5, np.random.default_rng(3)) for _ in range(3)]
    assert len(set(a)) == 1


def test_greedy_epsilon_one_is_uniform():
    rng = np.random.default_rng(2)
    f = freqs([neural_greedy_choose(preferring(2), X_G, ACTIONS, 1.0, rng) for _ in range(10_000)])
    assert np.all((f >= 0.23) & (f <= 0.27))


def test_greedy_zero_net_ties_to_first():
    net = DenseNet.zeros([2 + K, 8, 1])
    assert neural_greedy_choose(net, X_G, ACTIONS, 0.0, np.random.default_rng(0)) == 0


def test_greedy_epsilon_mixture():
    rng = np.random.default_rng(4)
    f = freqs([neural_greedy_choose(preferring(3), X_G, ACTIONS, 0.2, rng) for _ in range(10_000)])
    assert f[3] == pytest.approx(0.8 + 0.2 / K, abs=0.02)


def test_greedy_rejects_bad_epsilon():
    with pytest.raises(ContractError):
        neural_greedy_choose(preferring(0), X_G, ACTIONS, 1.5, np.random.default_rng(0))


def matched_bbb(n, mu_q, prior_mean, sigma=1.0):
    template = DenseNet.zeros([n, 1])
    rho = np.log(np.expm1(sigma))
    return BbbNet(template, np.full(template.param_count, mu_q),
                  np.full(template.param_count, rho), sigma1=sigma, pi_mix=1.0,
                  prior_mean=prior_mean)


def test_bbb_kl_self_identity():
    net = matched_bbb(3, 0.0, 0.0)
    rng = np.random.default_rng(0)
    kl = np.mean([net.kl_sample(rng) for _ in range(10_000)])
    assert abs(kl) < 0.05


def test_bbb_kl_shifted_gaussian():
    # KL[N(0,1) || N(1,1)] = 1/2 per weight
    net = matched_bbb(1, 0.0, 1.0)
    rng = np.random.default_rng(1)
    kl = np.mean([net.kl_sample(rng) for _ in range(10_000)]) / net.mu.size
    assert kl == pytest.approx(0.5, abs=0.05)


@pytest.mark.parametrize("seed", range(3))
def test_bbb_kl_nonnegative_in_expectation(seed):
    rng = np.random.default_rng(seed)
    net = BbbNet.init([3, 4, 1], rng, rho0=-1.0)
    kl = np.mean([net.kl_sample(rng) for _ in range(10_000)])
    assert kl > -0.05


def test_bbb_mixture_log_prior_gradient(rng):
    net = BbbNet.init([3, 4, 1], rng)
    w = rng.normal(scale=0.3, size=net.mu.size)
    _, grad = net.log_prior(w)
    fd = finite_difference(lambda v: net.log_prior(v)[0], w, h=1e-6)
    assert rel_err(grad, fd) < 1e-4


def test_bbb_update_gradient_matches_finite_differences(rng):
    net = BbbNet.init([3, 5, 1], rng, rho0=-2.0, sigma2=0.3)
    net.mu = net.mu + 0.1 * rng.normal(size=net.mu.size)
    x, y = rng.random((6, 3)), rng.random(6)
    n_data, lr = 40, 1e-3
    eps = np.random.default_rng(99).normal(size=net.mu.shape)

    def loss(params):
        probe = BbbNet(net.template, params[: net.mu.size], params[net.mu.size:],
                       net.sigma1, net.sigma2, net.pi_mix, net.prior_mean)
        w = probe.mu + probe.sigma * eps
        resid = probe.net_for(w).forward(x)[:, 0] - y
        nll = 0.5 * np.mean(resid ** 2) / 0.01
        return nll + (probe.log_posterior(w) - probe.log_prior(w)[0]) / n_data

    start = np.concatenate([net.mu, net.rho])
    bbb_update(net, (x, y), Optimizer("sgd", lr), np.random.default_rng(99), n_data)
    analytic = (start - np.concatenate([net.mu, net.rho])) / lr
    assert rel_err(analytic, finite_difference(loss, start)) < 1e-4


def test_bbb_nll_only_decreases(rng):
    net = BbbNet.init([3, 8, 1], rng, rho0=-8.0)
    x, y = rng.random((32, 3)), rng.random(32)
    opt = Optimizer("adam", 1e-2)
    losses = [bbb_update(net, (x, y), opt, rng, 32, kl_weight=0.0) for _ in range(200)]
    assert np.mean(losses[-20:]) < np.mean(losses[:20])


def test_bbb_rejects_empty_batch(rng):
    net = BbbNet.init([3, 4, 1], rng)
    with pytest.raises(ContractError):
        bbb_update(net, (np.zeros((0, 3)), np.zeros(0)), Optimizer(), rng, 1)


def test_dropout_zero_equals_greedy(rng):
    net = DenseNet.init([2 + K, 16, 16, 1], rng)
    for _ in range(20):
        x = rng.random(2)
        assert dropout_choose(net, x, ACTIONS, 0.0, rng) == \
            neural_greedy_choose(net, x, ACTIONS, 0.0, rng)


def test_dropout_near_one_is_near_uniform():
    # wide net, symmetric in the actions: the surviving units pick the winner
    rng = np.random.default_rng(0)
    net = DenseNet.init([K, 2000, 1], rng)
    net.biases[0] = rng.normal(size=2000)
    acts = ActionSet(np.eye(K))
    f = freqs([dropout_choose(net, np.zeros(0), acts, 0.99, rng) for _ in range(1000)])
    assert np.all(np.abs(f - 1 / K) <= 0.1)


def test_dropout_mask_shared_within_call():
    net = DenseNet.init([2 + K, 8, 8, 1], np.random.default_rng(0))
    rec = RecordingRng(5)
    a = dropout_choose(net, X_G, ACTIONS, 0.5, rec)
    assert rec.calls == ["random", "random"]
    replay = np.random.default_rng(5)
    masks = [(replay.random((1, 8)) >= 0.5) / 0.5 for _ in range(2)]
    assert a == int(np.argmax(net.forward(ACTIONS.inputs(X_G), masks)))


def test_bootstrap_single_model_is_greedy():
    rng = np.random.default_rng(0)
    assert {bootstrapped_choose([preferring(2)], X_G, ACTIONS, rng) for _ in range(50)} == {2}


def test_bootstrap_two_models_split_evenly():
    rng = np.random.default_rng(1)
    f = freqs([bootstrapped_choose([preferring(0), preferring(1)], X_G, ACTIONS, rng)
               for _ in range(10_000)])
    assert f[0] == pytest.approx(0.5, abs=0.02) and f[1] == pytest.approx(0.5, abs=0.02)


def test_bootstrap_model_pick_is_multinomial():
    rng = np.random.default_rng(2)
    acts = ActionSet(np.eye(5))
    nets = [preferring(i, k=5) for i in range(5)]
    counts = np.bincount([bootstrapped_choose(nets, X_G, acts, rng) for _ in range(10_000)],
                         minlength=5)
    assert np.all(np.abs(counts - 2000) <= 150)


def test_bootstrap_resample_same_size_and_rows(rng):
    idx = bootstrap_resample(37, rng)
    assert idx.shape == (37,) and idx.min() >= 0 and idx.max() < 37


def test_bootstrapped_update_changes_each_net(rng):
    hist = HistoryBuffer(2, K)
    for t in range(40):
        a = t % K
        hist.append(rng.random(2), a, ACTIONS.features[a], float(rng.random()), t + 1)
    nets = [DenseNet.init([2 + K, 8, 1], rng) for _ in range(3)]
    before = [n.flat().copy() for n in nets]
    bootstrapped_update(nets, hist, [Optimizer("sgd", 0.1) for _ in nets], rng, steps=5)
    assert all(not np.array_equal(b, n.flat()) for b, n in zip(before, nets))


def test_parameter_noise_zero_sigma_is_greedy(rng):
    net = DenseNet.init([2 + K, 8, 1], rng)
    greedy = neural_greedy_choose(net, X_G, ACTIONS, 0.0, rng)
    assert parameter_noise_choose(net, 0.0, X_G, ACTIONS, rng) == greedy


def test_parameter_noise_huge_sigma_near_uniform(rng):
    net = DenseNet.init([2 + K, 8, 1], rng)
    f = freqs([parameter_noise_choose(net, 1e3, X_G, ACTIONS, rng) for _ in range(4000)])
    assert np.all(np.abs(f - 1 / K) <= 0.05)


def test_parameter_noise_leaves_net_untouched(rng):
    net = DenseNet.init([2 + K, 8, 1], rng)
    before = net.flat().copy()
    parameter_noise_choose(net, 0.5, X_G, ACTIONS, rng)
    assert np.array_equal(before, net.flat())


def test_adapt_noise_rules():
    assert adapt_noise(0.1, 0.0, 0.1) == pytest.approx(0.101)
    assert adapt_noise(0.1, 1.0, 0.1) == pytest.approx(0.1 / 1.01)
    s = 0.37
    for i in range(100):
        s = adapt_noise(s, float(i % 2), 0.1)
    assert abs(s - 0.37) < 1e-12


def test_policy_distance(rng):
    net = preferring(1)
    assert policy_distance(net, net, rng.random((5, 2)), ACTIONS) == 0.0
    assert policy_distance(net, preferring(2), rng.random((5, 2)), ACTIONS) == 1.0


AGENTS = [
    lambda a, r: UniformAgent(a, 3, r),
    lambda a, r: NeuralGreedyAgent(a, 3, r, steps=5),
    lambda a, r: BbbAgent(a, 3, r, steps=5),
    lambda a, r: DropoutAgent(a, 3, r, p=0.4, steps=5),
    lambda a, r: BootstrappedAgent(a, 3, r, q=2, steps=5),
    lambda a, r: ParameterNoiseAgent(a, 3, r, sigma=0.1, steps=5),
]


@pytest.mark.parametrize("make", AGENTS)
def test_agents_valid_and_deterministic(make):
    env = make_synthetic_nonlinear(3, 5, 4, seed=0, n_contexts=50)
    runs = [run_trial(env, make(env.actions, np.random.default_rng(9)), 100, seed=1)[0]
            for _ in range(2)]
    assert np.all((runs[0].chosen >= 0) & (runs[0].chosen < 4))
    assert runs[0].chosen.tobytes() == runs[1].chosen.tobytes()


def test_parameter_noise_agent_adapts_sigma():
    env = make_synthetic_nonlinear(3, 5, 4, seed=0, n_contexts=50)
    agent = ParameterNoiseAgent(env.actions, 3, np.random.default_rng(0), sigma=1e-5, steps=2)
    run_trial(env, agent, 90, seed=0)
    # tiny noise never flips the greedy action, so sigma grows by 1% per update
    assert agent.sigma == pytest.approx(1e-5 * 1.01 ** 3)
