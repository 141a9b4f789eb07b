import math

import numpy as np
import pytest
import torch
from scipy import stats

from fastweights.errors import ConfigError
from fastweights.model import (ADD_VALUE_SCALE, DELTA_INIT_GATE, ModelConfig, build_model, convert_mixer,
                               count_parameters, forward_lm, generate, gradcheck_lm, load_checkpoint,
                               save_checkpoint)
from fastweights.rules import RuleConfig

MIXERS = ["softmax", "local", "add", "gated", "delta", "decay"]


def tiny_config(mixer, d_model=32, n_heads=2, n_layers=2, max_T=64, m=4):
    d = d_model // n_heads
    if mixer in ("softmax", "local"):
        return ModelConfig(d_model=d_model, n_heads=n_heads, n_layers=n_layers, max_T=max_T, mixer=mixer,
                           window=8)
    if mixer == "delta":
        rule = RuleConfig("delta", d=d, m=d, feature_map="elu1", sum_norm=True)
    else:
        rule = RuleConfig(mixer, d=d, m=m, feature_map="linear")
    return ModelConfig(d_model=d_model, n_heads=n_heads, n_layers=n_layers, max_T=max_T, mixer="rule",
                       rule=rule)


def softmax_param_formula(V, D, L, T, f=4):
    per_layer = 2 * D + 4 * D * D + 2 * D + (D * f * D + f * D) + (f * D * D + D)
    return V * D + T * D + L * per_layer + 2 * D


def test_param_count_formula():
    cfg = ModelConfig(d_model=64, n_heads=4, n_layers=2, max_T=128)
    assert count_parameters(build_model(cfg)) == softmax_param_formula(256, 64, 2, 128)
    rc = RuleConfig("decay", d=16, m=4, feature_map="linear")
    extra = 2 * 4 * (4 * 16 + 16 * 16 + 16 + 4 * 16 + 4)
    assert count_parameters(build_model(cfg.replace(mixer="rule", rule=rc))) == \
        softmax_param_formula(256, 64, 2, 128) + extra


def test_same_seed_bit_identical():
    cfg = tiny_config("decay")
    a, b = build_model(cfg, 3), build_model(cfg, 3)
    for (na, pa), (nb, pb) in zip(a.state_dict().items(), b.state_dict().items()):
        assert na == nb and torch.equal(pa, pb)
    c = build_model(cfg, 4)
    assert not torch.equal(a.tok_emb.weight, c.tok_emb.weight)


def test_single_head_builds_and_runs():
    cfg = ModelConfig(d_model=16, n_heads=1, n_layers=1, max_T=8, mixer="rule",
                      rule=RuleConfig("decay", d=16, m=4, feature_map="linear"))
    logits = build_model(cfg)(torch.randint(0, 256, (2, 8)))
    assert logits.shape == (2, 8, 256)


def test_config_validation():
    with pytest.raises(ConfigError):
        ModelConfig(d_model=30, n_heads=4)
    with pytest.raises(ConfigError):
        ModelConfig(d_model=32, n_heads=2, mixer="rule", rule=RuleConfig("add", d=8, m=8))
    with pytest.raises(ConfigError):
        ModelConfig(mixer="rule")


# ---------------------------------------------------------------- conversion

@pytest.fixture(scope="module")
def softmax_double():
    cfg = ModelConfig(d_model=128, n_heads=4, n_layers=4, max_T=64)
    return build_model(cfg, 0).double()


def test_ugi_biases_are_uniform(softmax_double):
    model = convert_mixer(softmax_double, RuleConfig("decay", d=32, m=4, feature_map="linear"), seed=0)
    u = torch.cat([torch.sigmoid(b.mixer.rule_params["b_z"]).flatten() for b in model.blocks]).detach().numpy()
    assert u.size == 512
    assert np.all((u > 0) & (u < 1))
    critical = 1.628 / math.sqrt(u.size)  # Kolmogorov-Smirnov, alpha = 0.01
    assert stats.kstest(u, "uniform").statistic < critical


def test_delta_gate_starts_at_0007(softmax_double):
    model = convert_mixer(softmax_double, RuleConfig("delta", d=32, m=32, feature_map="elu1", sum_norm=True))
    for block in model.blocks:
        g = torch.sigmoid(block.mixer.rule_params["b_g"])
        assert torch.all((g - DELTA_INIT_GATE).abs() <= 1e-9)
        assert not block.mixer.rule_params["w_g"].any()


def test_delta_gate_single_precision_within_tolerance():
    model = convert_mixer(build_model(ModelConfig(d_model=32, n_heads=2, n_layers=1), 0),
                          RuleConfig("delta", d=16, m=16, feature_map="elu1", sum_norm=True))
    g = torch.sigmoid(model.blocks[0].mixer.rule_params["b_g"].double())
    assert torch.all((g - DELTA_INIT_GATE).abs() <= 1e-9)


@pytest.mark.parametrize("rule", [RuleConfig("decay", d=32, m=4, feature_map="linear"),
                                  RuleConfig("add", d=32, m=4, feature_map="linear"),
                                  RuleConfig("add", d=32, m=32, feature_map="identity"),
                                  RuleConfig("add", d=32, m=4, feature_map="relu", attention_norm=True),
                                  RuleConfig("gated", d=32, m=4, feature_map="linear"),
                                  RuleConfig("delta", d=32, m=32, feature_map="elu1", sum_norm=True)],
                         ids=lambda r: f"{r.rule.value}-{r.feature_map.value}")
def test_conversion_copies_and_rescales(softmax_double, rule):
    model = convert_mixer(softmax_double, rule, seed=5)
    for src, dst in zip(softmax_double.blocks, model.blocks):
        for name in ("q_proj", "k_proj", "o_proj"):
            assert torch.equal(getattr(src.mixer, name).weight, getattr(dst.mixer, name).weight)
        Wv0, Wv = src.mixer.v_proj.weight, dst.mixer.v_proj.weight
        if rule.rule.value == "decay":
            scale = 1 - torch.sigmoid(dst.mixer.rule_params["b_z"]).reshape(-1)
            for i in range(Wv.shape[0]):
                assert torch.equal(Wv[i], Wv0[i] * scale[i])
        elif rule.rule.value == "add" and rule.feature_map.value in ("linear", "identity"):
            assert torch.equal(Wv, Wv0 * ADD_VALUE_SCALE)
        else:
            assert torch.equal(Wv, Wv0)
        assert torch.equal(src.ffn[0].weight, dst.ffn[0].weight)
    if rule.feature_map.needs_bias:
        assert not model.blocks[0].mixer.rule_params["b_phi"].any()


def test_convert_rejects_bad_targets(softmax_double):
    with pytest.raises(ConfigError):
        convert_mixer(softmax_double, RuleConfig("decay", d=32, m=4, attention_norm=True))
    rule_model = convert_mixer(softmax_double, RuleConfig("add", d=32, m=32))
    with pytest.raises(ConfigError):
        convert_mixer(rule_model, RuleConfig("add", d=32, m=32))


@pytest.mark.parametrize("mixer", ["add", "gated", "delta", "decay"])
def test_converted_forward_is_finite(mixer):
    cfg = tiny_config(mixer, d_model=128, n_heads=4, n_layers=2, max_T=64)
    model = build_model(cfg, 0)
    with torch.no_grad():
        logits = model(torch.randint(0, 256, (1, 64), generator=torch.Generator().manual_seed(0)))
    assert torch.isfinite(logits).all()
    assert logits.abs().max() < 1e4


# ---------------------------------------------------------------- forward_lm

def test_uniform_logits_loss_is_log_vocab():
    model = build_model(tiny_config("softmax"), 0)
    with torch.no_grad():
        model.tok_emb.weight.zero_()
    _, loss = forward_lm(model, torch.randint(0, 256, (2, 17)))
    assert abs(loss.item() - math.log(256)) <= 1e-6


def test_single_prediction_loss():
    model = build_model(tiny_config("decay"), 0)
    logits, loss = forward_lm(model, torch.tensor([[5, 9]]))
    assert logits.shape == (1, 1, 256)
    expected = -torch.log_softmax(logits[0, 0], -1)[9]
    assert torch.allclose(loss, expected)


def test_token_range_checked():
    model = build_model(tiny_config("softmax"), 0)
    with pytest.raises(ValueError):
        forward_lm(model, torch.tensor([[1, 256]]))
    with pytest.raises(ValueError):
        forward_lm(model, torch.zeros(1, 70, dtype=torch.long))


@pytest.mark.parametrize("mixer", ["add", "gated", "delta", "decay"])
def test_rule_forward_equals_manual_steps(mixer):
    model = build_model(tiny_config(mixer), 1)
    tokens = torch.randint(0, 256, (24,), generator=torch.Generator().manual_seed(2))
    with torch.no_grad():
        full = model(tokens[None])[0]
    state = model.init_generation_state()
    stepped = torch.stack([model.step(int(t), state) for t in tokens])
    assert (full - stepped).abs().max() <= 1e-5


# ---------------------------------------------------------------- generation

def test_greedy_generation_is_deterministic():
    model = build_model(tiny_config("decay"), 0)
    assert generate(model, [1, 2, 3], 20) == generate(model, [1, 2, 3], 20)


def test_temperature_sampling_seeded():
    model = build_model(tiny_config("decay"), 0)
    a = generate(model, [1, 2, 3], 20, temperature=1.0, seed=7)
    assert a == generate(model, [1, 2, 3], 20, temperature=1.0, seed=7)
    assert len(a) == 23
    with pytest.raises(ValueError):
        generate(model, [], 5)


def _generation_gap(model, n=32, prompt_len=8):
    prompt = torch.randint(0, 256, (prompt_len,), generator=torch.Generator().manual_seed(3)).tolist()
    out, logits = generate(model, prompt, n, return_logits=True)
    with torch.no_grad():
        full = model(torch.tensor(out[:-1])[None])[0, prompt_len - 1:]
    return (full - logits).abs().max().item()


@pytest.mark.parametrize("mixer", MIXERS)
def test_step_logits_match_teacher_forcing_single(mixer):
    assert _generation_gap(build_model(tiny_config(mixer), 0)) <= 1e-4


@pytest.mark.parametrize("mixer", MIXERS)
def test_step_logits_match_teacher_forcing_double(mixer):
    assert _generation_gap(build_model(tiny_config(mixer), 0).double()) <= 1e-10


def test_kv_cache_matches_recompute_double():
    model = build_model(tiny_config("softmax"), 0).double()
    tokens = torch.randint(0, 256, (40,), generator=torch.Generator().manual_seed(4))
    state = model.init_generation_state()
    for i, t in enumerate(tokens):
        cached = model.step(int(t), state)
        with torch.no_grad():
            fresh = model(tokens[None, :i + 1])[0, -1]
        assert (cached - fresh).abs().max() <= 1e-10


def _state_bytes(model, n):
    state = model.init_generation_state()
    for t in range(n):
        model.step(t % 256, state)
    return state.nbytes


@pytest.mark.parametrize("mixer", ["add", "gated", "delta", "decay"])
def test_rule_state_size_constant(mixer):
    model = build_model(tiny_config(mixer, max_T=1000), 0)
    assert _state_bytes(model, 10) == _state_bytes(model, 1000)


def test_softmax_state_grows_linearly():
    model = build_model(tiny_config("softmax", max_T=1000), 0)
    ratio = _state_bytes(model, 1000) / _state_bytes(model, 10)
    assert 90 <= ratio <= 110


def test_local_state_is_bounded():
    model = build_model(tiny_config("local", max_T=1000), 0)
    assert _state_bytes(model, 100) == _state_bytes(model, 1000)


# ---------------------------------------------------------------- checkpoints

@pytest.mark.parametrize("mixer", ["softmax", "local", "decay", "delta"])
def test_checkpoint_round_trip_bit_exact(tmp_path, mixer):
    model = build_model(tiny_config(mixer), 9)
    save_checkpoint(model, tmp_path / "ck")
    loaded = load_checkpoint(tmp_path / "ck")
    assert loaded.config == model.config
    for (na, pa), (nb, pb) in zip(model.state_dict().items(), loaded.state_dict().items()):
        assert na == nb and torch.equal(pa, pb)
    manifest = (tmp_path / "ck" / "manifest.txt").read_text()
    assert manifest.startswith("format=")
    size = (tmp_path / "ck" / "weights.bin").stat().st_size
    assert size == 4 * count_parameters(model)


def test_checkpoint_rejects_unknown_format(tmp_path):
    save_checkpoint(build_model(tiny_config("softmax"), 0), tmp_path)
    text = (tmp_path / "manifest.txt").read_text().splitlines()
    text[0] = "format=other"
    (tmp_path / "manifest.txt").write_text("\n".join(text))
    with pytest.raises(ValueError):
        load_checkpoint(tmp_path)


# ---------------------------------------------------------------- whole-model gradients

@pytest.mark.parametrize("seed", [0, 1, 2])
def test_decay_lm_microbatch_gradcheck(seed):
    rep = gradcheck_lm(RuleConfig("decay", d=8, m=3, feature_map="linear"), seed=seed, T=8)
    assert rep.max_rel_err <= 1e-5, rep
