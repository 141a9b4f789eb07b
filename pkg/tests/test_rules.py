import itertools

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from fastweights.errors import ConfigError, DimensionError, DivergedState, NearZeroSum, NormalizerUnderflow
from fastweights.grads import legal_configs
from fastweights.rules import (FastWeightState, RuleConfig, RuleKind, RuleParams, compute_gate_matrix,
                               gate_override_hook, init_state, random_params, scan, step)


def positive_problem(config, seed, T, dtype=np.float64):
    """Random parameters and inputs that keep every divisor well away from zero."""
    r = np.random.default_rng(seed)
    p = random_params(config, r, dtype, scale=0.5)
    if p.W_phi is not None:
        p.W_phi = (np.abs(p.W_phi) + 0.05).astype(dtype)
    if p.b_phi is not None:
        p.b_phi = np.abs(p.b_phi).astype(dtype)
    X, V = (r.standard_normal((T, config.d)).astype(dtype) for _ in range(2))
    Q, K = (r.uniform(0.2, 1.0, (T, config.d)).astype(dtype) for _ in range(2))
    if config.rule is RuleKind.DELTA and not config.sum_norm:
        K = (K / (2 * np.sqrt(config.d))).astype(dtype)
    return p, X, Q, K, V


def run_steps(config, params, X, Q, K, V):
    state = init_state(config, dtype=X.dtype)
    ys = []
    for t in range(X.shape[0]):
        state, y = step(config, params, state, X[t], Q[t], K[t], V[t])
        ys.append(y)
    return np.stack(ys), state


# ---------------------------------------------------------------- configuration

def test_square_maps_force_m_equal_d():
    with pytest.raises(ConfigError):
        RuleConfig("add", d=4, m=3, feature_map="identity")
    with pytest.raises(ConfigError):
        RuleConfig("add", d=4, m=3, feature_map="elu1")
    RuleConfig("add", d=4, m=3, feature_map="relu")


def test_decay_with_attention_norm_is_rejected():
    with pytest.raises(ConfigError):
        RuleConfig("decay", d=4, m=4, attention_norm=True)


def test_sum_norm_outside_delta_needs_experimental_flag():
    with pytest.raises(ConfigError):
        RuleConfig("add", d=4, m=4, sum_norm=True)
    assert RuleConfig("add", d=4, m=4, sum_norm=True, experimental=True).sum_norm


def test_param_shapes_per_rule():
    assert set(RuleConfig("decay", d=4, m=3, feature_map="linear").param_shapes()) == \
        {"W_phi", "W_z", "b_z", "W_f", "b_f"}
    assert RuleConfig("delta", d=4, m=4).param_shapes() == {"w_g": (4,), "b_g": ()}
    assert RuleConfig("add", d=4, m=3, feature_map="relu").param_shapes() == {"W_phi": (3, 4), "b_phi": (3,)}


def test_params_for_wrong_rule_rejected():
    cfg = RuleConfig("add", d=2, m=2)
    with pytest.raises(DimensionError):
        RuleParams(w_g=np.zeros(2), b_g=np.zeros(())).check(cfg)
    with pytest.raises(DimensionError):
        RuleParams().check(RuleConfig("gated", d=2, m=2))


# ---------------------------------------------------------------- init_state

def test_init_state_examples():
    s = init_state(RuleConfig("add", d=2, m=2, attention_norm=True))
    np.testing.assert_array_equal(s.S, np.zeros((2, 2)))
    np.testing.assert_array_equal(s.z, np.zeros(2))
    s = init_state(RuleConfig("add", d=1, m=4, feature_map="linear"))
    assert s.S.shape == (1, 4) and s.z is None


@pytest.mark.parametrize("config", legal_configs(3, 2), ids=str)
def test_init_state_all_zero(config):
    s = init_state(config)
    assert not s.S.any() and (s.z is None or not s.z.any())


# ---------------------------------------------------------------- gates

def test_gate_matrix_zero_params_is_quarter():
    p = RuleParams(W_z=np.zeros((3, 3)), b_z=np.zeros(3), W_f=np.zeros((2, 3)), b_f=np.zeros(2))
    np.testing.assert_array_equal(compute_gate_matrix(p, np.ones(3)), np.full((3, 2), 0.25))


def test_gate_matrix_saturates():
    p = RuleParams(W_z=np.zeros((3, 3)), b_z=np.full(3, 30.0), W_f=np.zeros((2, 3)), b_f=np.full(2, 30.0))
    np.testing.assert_allclose(compute_gate_matrix(p, np.ones(3)), 1.0, atol=1e-9)


@given(st.integers(0, 10_000), st.floats(1e-3, 1e3))
def test_gate_matrix_rank_one_and_open_interval(seed, scale):
    r = np.random.default_rng(seed)
    p = RuleParams(W_z=r.standard_normal((4, 4)), b_z=r.standard_normal(4),
                   W_f=r.standard_normal((3, 4)), b_f=r.standard_normal(3))
    G = compute_gate_matrix(p, scale * r.standard_normal(4) / 100)
    assert np.all((G > 0) & (G < 1))
    for i, j in itertools.combinations(range(4), 2):
        for a, b in itertools.combinations(range(3), 2):
            assert abs(G[i, a] * G[j, b] - G[i, b] * G[j, a]) < 1e-12


# ---------------------------------------------------------------- step examples

def test_add_first_step_example():
    cfg = RuleConfig("add", d=2, m=2, attention_norm=True)
    s, y = step(cfg, RuleParams(), init_state(cfg), np.zeros(2), np.array([1.0, 0]), np.array([1.0, 0]),
                np.array([2.0, 3]))
    np.testing.assert_array_equal(s.S, [[2, 0], [3, 0]])
    np.testing.assert_array_equal(s.z, [1, 0])
    np.testing.assert_array_equal(y, [2, 3])


def _decay_params(d=2, m=2):
    return RuleParams(W_z=np.zeros((d, d)), b_z=np.zeros(d), W_f=np.zeros((m, d)), b_f=np.zeros(m))


def test_decay_forced_half_halves_state():
    cfg = RuleConfig("decay", d=2, m=2)
    state = FastWeightState(np.array([[2.0, 0], [0, 2]]))
    q = np.array([0.3, 0.7])
    s, y = gate_override_hook(cfg, _decay_params(), state, np.zeros(2), q, np.ones(2), np.zeros(2),
                              np.full((2, 2), 0.5))
    np.testing.assert_array_equal(s.S, np.eye(2))
    np.testing.assert_array_equal(y, q)


def test_gated_forced_endpoints():
    cfg = RuleConfig("gated", d=2, m=2)
    p = RuleParams(w_g=np.zeros(2), b_g=np.zeros(()))
    S0 = FastWeightState(np.array([[1.0, 2], [3, 4]]))
    k, v = np.array([0.5, -1.0]), np.array([2.0, 1.0])
    s, _ = gate_override_hook(cfg, p, S0, np.zeros(2), np.ones(2), k, v, 0.0)
    np.testing.assert_array_equal(s.S, np.outer(v, k))
    s, _ = gate_override_hook(cfg, p, S0, np.zeros(2), np.ones(2), k, v, 1.0)
    np.testing.assert_array_equal(s.S, S0.S)
    s, _ = gate_override_hook(cfg, p, init_state(cfg), np.zeros(2), np.ones(2), np.array([1.0, 0]),
                              np.array([2.0, 0]), 0.5)
    np.testing.assert_array_equal(s.S, [[1, 0], [0, 0]])


def test_delta_forced_zero_keeps_state():
    cfg = RuleConfig("delta", d=2, m=2)
    p = RuleParams(w_g=np.zeros(2), b_g=np.zeros(()))
    S0 = FastWeightState(np.array([[1.0, 2], [3, 4]]))
    s, _ = gate_override_hook(cfg, p, S0, np.zeros(2), np.ones(2), np.array([0.3, 0.4]), np.ones(2), 0.0)
    np.testing.assert_array_equal(s.S, S0.S)


@given(st.integers(0, 10_000))
def test_delta_unit_key_retrieves_value(seed):
    r = np.random.default_rng(seed)
    d = 5
    cfg = RuleConfig("delta", d=d, m=d)  # identity map, no sum norm: the key is used as given
    p = RuleParams(w_g=np.zeros(d), b_g=np.zeros(()))
    k = r.standard_normal(d)
    k /= np.linalg.norm(k)
    v = r.standard_normal(d)
    S0 = FastWeightState(r.standard_normal((d, d)))
    s, _ = gate_override_hook(cfg, p, S0, np.zeros(d), k, k, v, 1.0)
    np.testing.assert_allclose(s.S @ k, v, atol=1e-12)


def test_override_errors():
    cfg = RuleConfig("gated", d=2, m=2)
    p = RuleParams(w_g=np.zeros(2), b_g=np.zeros(()))
    with pytest.raises(ValueError):
        gate_override_hook(cfg, p, init_state(cfg), *(np.ones(2),) * 4, 1.5)
    with pytest.raises(ConfigError):
        gate_override_hook(RuleConfig("add", d=2, m=2), RuleParams(), init_state(RuleConfig("add", d=2, m=2)),
                           *(np.ones(2),) * 4, 0.5)


def test_decay_forced_one_equals_add(rng):
    d, m = 3, 2
    add = RuleConfig("add", d=d, m=m, feature_map="linear")
    dec = RuleConfig("decay", d=d, m=m, feature_map="linear")
    W = rng.standard_normal((m, d))
    p = random_params(dec, rng)
    p.W_phi = W
    sa = init_state(add)
    sd = init_state(dec)
    for _ in range(5):
        x, q, k, v = rng.standard_normal((4, d))
        sa, ya = step(add, RuleParams(W_phi=W), sa, x, q, k, v)
        sd, yd = gate_override_hook(dec, p, sd, x, q, k, v, np.ones((d, m)))
        assert np.array_equal(sa.S, sd.S) and np.array_equal(ya, yd)


def test_normalizer_underflow():
    cfg = RuleConfig("add", d=2, m=2, attention_norm=True)
    with pytest.raises(NormalizerUnderflow):
        step(cfg, RuleParams(), init_state(cfg), np.zeros(2), np.array([0.0, 1]), np.array([1.0, 0]), np.ones(2))


def test_near_zero_sum_in_step():
    cfg = RuleConfig("delta", d=2, m=2, sum_norm=True)
    p = RuleParams(w_g=np.zeros(2), b_g=np.zeros(()))
    with pytest.raises(NearZeroSum):
        step(cfg, p, init_state(cfg), np.zeros(2), np.ones(2), np.array([1.0, -1.0]), np.ones(2))


def test_diverged_state():
    cfg = RuleConfig("add", d=2, m=2)
    with pytest.raises(DivergedState):
        step(cfg, RuleParams(), init_state(cfg), np.zeros(2), np.ones(2), np.array([1e200, 1]),
             np.array([1e200, 0]))


def test_scan_reports_failing_timestep():
    cfg = RuleConfig("add", d=2, m=2, attention_norm=True)
    Q = np.array([[1.0, 0], [1.0, 1], [0.0, 1]])
    K = np.array([[1.0, 0], [1.0, 0], [1.0, 0]])
    with pytest.raises(NormalizerUnderflow) as info:
        scan(cfg, RuleParams(), np.zeros((3, 2)), Q, K, np.ones((3, 2)))
    assert info.value.t == 2


# ---------------------------------------------------------------- scan

@pytest.mark.parametrize("config", legal_configs(4, 3), ids=str)
@pytest.mark.parametrize("T", [1, 7, 64])
def test_scan_matches_steps_double(config, T):
    p, X, Q, K, V = positive_problem(config, T, T)
    Y, cache = scan(config, p, X, Q, K, V)
    Ys, state = run_steps(config, p, X, Q, K, V)
    assert np.max(np.abs(Y - Ys)) <= 1e-12
    np.testing.assert_allclose(cache.S[-1], state.S, rtol=0, atol=1e-12)


@pytest.mark.parametrize("config", legal_configs(4, 3), ids=str)
def test_scan_matches_steps_single(config):
    p, X, Q, K, V = positive_problem(config, 3, 7, np.float32)
    Y, _ = scan(config, p, X, Q, K, V)
    Ys, _ = run_steps(config, p, X, Q, K, V)
    assert Y.dtype == np.float32
    assert np.max(np.abs(Y - Ys)) <= 1e-5


def test_scan_t1_is_single_step(rng):
    cfg = RuleConfig("decay", d=3, m=2, feature_map="linear")
    p = random_params(cfg, rng)
    X, Q, K, V = rng.standard_normal((4, 1, 3))
    Y, _ = scan(cfg, p, X, Q, K, V)
    _, y = step(cfg, p, init_state(cfg), X[0], Q[0], K[0], V[0])
    np.testing.assert_array_equal(Y[0], y)


@given(st.integers(0, 10_000), st.integers(1, 20))
def test_add_final_state_is_sum_of_outer_products(seed, T):
    r = np.random.default_rng(seed)
    cfg = RuleConfig("add", d=3, m=2, feature_map="linear")
    W = r.standard_normal((2, 3))
    X, Q, K, V = r.standard_normal((4, T, 3))
    _, cache = scan(cfg, RuleParams(W_phi=W), X, Q, K, V)
    expected = np.zeros((3, 2))
    for t in range(T):
        expected += np.outer(V[t], W @ K[t])
    np.testing.assert_allclose(cache.S[-1], expected, atol=1e-10)


@given(st.integers(0, 10_000))
def test_add_final_state_permutation_invariant(seed):
    r = np.random.default_rng(seed)
    cfg = RuleConfig("add", d=3, m=3)
    X, Q, K, V = r.standard_normal((4, 12, 3))
    perm = r.permutation(12)
    _, c1 = scan(cfg, RuleParams(), X, Q, K, V)
    _, c2 = scan(cfg, RuleParams(), X, Q, K[perm], V[perm])
    np.testing.assert_allclose(c1.S[-1], c2.S[-1], atol=1e-10)


@given(st.integers(0, 10_000))
def test_decay_contracts_without_writes(seed):
    r = np.random.default_rng(seed)
    cfg = RuleConfig("decay", d=3, m=2, feature_map="linear")
    p = random_params(cfg, r)
    state = FastWeightState(r.standard_normal((3, 2)))
    prev = np.abs(state.S).max()
    for _ in range(10):
        x, q, k = r.standard_normal((3, 3))
        state, _ = step(cfg, p, state, x, q, k, np.zeros(3))
        cur = np.abs(state.S).max()
        assert cur <= prev
        prev = cur


@pytest.mark.parametrize("rule", ["add", "gated"])
@pytest.mark.parametrize("kind", ["elu1", "relu"])
def test_first_output_equals_first_value(rule, kind):
    d = 4
    m = d if kind == "elu1" else 3
    cfg = RuleConfig(rule, d=d, m=m, feature_map=kind, attention_norm=True)
    p, X, Q, K, V = positive_problem(cfg, 7, 5)
    Y, _ = scan(cfg, p, X, Q, K, V)
    np.testing.assert_allclose(Y[0], V[0], rtol=0, atol=1e-9 * np.abs(V[0]).max())


@pytest.mark.parametrize("kind", ["elu1", "relu"])
def test_delta_first_output_is_gated_value(kind):
    # the state write is scaled by g but z is not, so y_1 = g_1 v_1
    d = 4
    m = d if kind == "elu1" else 3
    cfg = RuleConfig("delta", d=d, m=m, feature_map=kind, attention_norm=True, sum_norm=True)
    p, X, Q, K, V = positive_problem(cfg, 7, 5)
    Y, cache = scan(cfg, p, X, Q, K, V)
    np.testing.assert_allclose(Y[0], cache.g[0] * V[0], rtol=0, atol=1e-12)


def test_scan_batched_heads_match_loop(rng):
    cfg = RuleConfig("decay", d=3, m=2, feature_map="linear")
    p = random_params(cfg, rng, lead=(2,))
    X, Q, K, V = rng.standard_normal((4, 5, 2, 6, 3))  # (B, H, T, d)
    Y, _ = scan(cfg, p, X, Q, K, V)
    for b in range(5):
        for h in range(2):
            ph = RuleParams(**{k: v[h] for k, v in p.as_dict().items()})
            Yh, _ = scan(cfg, ph, X[b, h], Q[b, h], K[b, h], V[b, h])
            np.testing.assert_allclose(Y[b, h], Yh, atol=1e-12)


def test_scan_dimension_errors():
    cfg = RuleConfig("add", d=2, m=2)
    with pytest.raises(DimensionError):
        scan(cfg, RuleParams(), np.zeros((3, 2)), np.zeros((3, 2)), np.zeros((4, 2)), np.zeros((3, 2)))
    with pytest.raises(DimensionError):
        scan(cfg, RuleParams(), np.zeros((3, 2)), np.zeros((3, 3)), np.zeros((3, 3)), np.zeros((3, 3)))
