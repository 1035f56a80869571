import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from hgts.errors import ConfigError, DataError, ShapeError
from hgts.model import (
    ABLATIONS,
    HGTSFormer,
    ModelConfig,
    ablation_variant,
    count_parameters,
    impute,
    mse_loss,
    rolling_forecast,
    training_targets,
)
from hgts.tensor import Tensor
from hgts.verify import MICRO, random_config

SMALL = ModelConfig(n_layers=1, d_model=16, d_ff=32, n_heads=2, patch_len=8, lookback=32, edge_num=4, seed=3)


def test_etth1_config_head_shape():
    cfg = ModelConfig()  # defaults are the ETTh1 row: L=672, P=48, D=1024, 2 blocks, E=7
    model = HGTSFormer(cfg)
    res = model.forward(np.random.default_rng(0).standard_normal((1, 7, 672)), return_structures=True)
    assert res.head.shape == (1, 7, 672)
    assert res.tokens.shape == (1, 7 * 14, 1024)
    assert res.structures[0]["intra"].confidence.shape == (7, 7, 14)
    assert res.structures[0]["inter"].confidence.shape == (1, 7, 49)


def test_degenerate_single_token_single_channel():
    cfg = ModelConfig(n_layers=1, d_model=8, d_ff=8, n_heads=2, patch_len=8, lookback=8, edge_num=4)
    out = HGTSFormer(cfg).forward(np.random.default_rng(0).standard_normal((1, 1, 8))).output.data
    assert out.shape == (1, 1, 8) and np.all(np.isfinite(out))


def test_forward_is_deterministic():
    x = np.random.default_rng(0).standard_normal((2, 3, 32)).astype(np.float32)
    a = HGTSFormer(SMALL).forward(x).output.data
    b = HGTSFormer(SMALL).forward(x).output.data
    np.testing.assert_array_equal(a, b)


def test_forward_shape_check():
    with pytest.raises(ShapeError):
        HGTSFormer(SMALL).forward(np.zeros((1, 2, 31)))


def test_training_targets():
    w = np.arange(144.0).reshape(1, 1, 144)
    inp, tgt = training_targets(w, 96, 48)
    np.testing.assert_array_equal(inp[0, 0], np.arange(96))
    # token 0 predicts [48, 96), token 1 predicts [96, 144)
    np.testing.assert_array_equal(tgt[0, 0, :48], np.arange(48, 96))
    np.testing.assert_array_equal(tgt[0, 0, 48:], np.arange(96, 144))
    r = np.random.default_rng(0).standard_normal((2, 3, 60))
    inp, tgt = training_targets(r, 48, 12)
    np.testing.assert_array_equal(tgt[..., :-12], inp[..., 12:])
    with pytest.raises(DataError):
        training_targets(np.zeros((1, 1, 50)), 48, 12)


def test_mse_loss_examples():
    p = Tensor(np.array([1.0, 2.0, 3.0, 4.0]))
    assert mse_loss(p, p.data).item() == 0.0
    assert mse_loss(p, p.data - 2).item() == 4.0
    # hand computation: errors (1, 2, 3, 4) against zero, mask keeps entries 1 and 3 -> (4 + 16) / 2
    assert mse_loss(p, np.zeros(4), np.array([False, True, False, True])).item() == 10.0
    with pytest.raises(ValueError):
        mse_loss(p, np.zeros(4), np.zeros(4, dtype=bool))


def test_rolling_forecast_step_counts():
    calls = []

    def stub(ctx, p):
        calls.append(ctx.copy())
        return np.full(ctx.shape[:-1] + (p,), float(len(calls)))

    for lookback, p, horizon, steps in ((96, 48, 96, 2), (672, 96, 720, 8)):
        cfg = ModelConfig(n_layers=0, d_model=8, d_ff=8, n_heads=2, patch_len=p, lookback=lookback, edge_num=4)
        model = HGTSFormer(cfg)
        calls.clear()
        ctx = np.random.default_rng(0).standard_normal((1, 2, lookback)).astype(np.float32)
        out = rolling_forecast(model, ctx, horizon, step_fn=lambda c: stub(c, p))
        assert len(calls) == steps
        assert out.predictions.shape == (1, 2, horizon)
        # the window slides: step 2 sees the tail of the context plus step 1's prediction
        np.testing.assert_array_equal(calls[1][..., : lookback - p], ctx[..., p:])
        np.testing.assert_array_equal(calls[1][..., -p:], 1.0)
    assert out.predictions[0, 0, -1] == 8.0  # 768 generated, truncated to 720


def test_rolling_forecast_single_step_equals_last_token():
    model = HGTSFormer(SMALL)
    ctx = np.random.default_rng(1).standard_normal((2, 3, 32)).astype(np.float32)
    out = rolling_forecast(model, ctx, SMALL.patch_len)
    np.testing.assert_array_equal(out.predictions, model.forward(ctx).output.data[..., -8:])
    with pytest.raises(ConfigError):
        rolling_forecast(HGTSFormer(SMALL.replace(causal=False)), ctx, 8)


def test_impute_keeps_observed_values():
    cfg = SMALL.replace(causal=False, task="impute")
    model = HGTSFormer(cfg)
    x = np.random.default_rng(0).standard_normal((1, 2, 32)).astype(np.float32)
    np.testing.assert_array_equal(impute(model, x, np.ones_like(x, dtype=bool)), x)
    obs = np.ones_like(x, dtype=bool)
    obs[..., ::2] = False
    out = impute(model, np.where(obs, x, 0), obs)
    np.testing.assert_array_equal(out[obs], x[obs])
    assert np.all(np.isfinite(out))
    with pytest.raises(ConfigError):
        impute(HGTSFormer(SMALL), x, obs)


def test_ablations_shrink_and_run():
    full = count_parameters(SMALL)
    for which in ABLATIONS[1:]:
        model = ablation_variant(SMALL, which)
        assert model.num_parameters() < full
        x = np.random.default_rng(0).standard_normal((2, 2, 40)).astype(np.float32)
        inp, tgt = training_targets(x, 32, 8)
        res = model.forward(inp)
        loss = mse_loss(res.head, tgt)
        loss.backward()
        assert np.isfinite(loss.item())
    with pytest.raises(ValueError):
        ablation_variant(SMALL, "no_head")


def test_no_mhsa_rope_stage_is_identity():
    model = ablation_variant(SMALL, "no_mhsa_rope")
    assert model.blocks[0].mhsa is None and model.rope is None


def test_parameter_count_reference_10m():
    cfg = ModelConfig(n_layers=1, d_model=512, d_ff=2048, n_heads=8, patch_len=96, lookback=672, edge_num=4)
    assert count_parameters(cfg) == 10_428_000
    assert abs(count_parameters(cfg) - 10.38e6) / 10.38e6 < 0.05


def test_parameter_count_zero_layers():
    cfg = ModelConfig(n_layers=0, d_model=8, d_ff=8, n_heads=2, patch_len=4, lookback=16, edge_num=4)
    assert count_parameters(cfg) == (4 * 8 + 8) + (8 * 4 + 4) + (16 * 8 + 8)
    assert HGTSFormer(cfg).num_parameters() == count_parameters(cfg)


@given(seed=st.integers(0, 2**31))
def test_parameter_count_matches_enumeration(seed):
    cfg = random_config(np.random.default_rng(seed))
    assert count_parameters(cfg) == HGTSFormer(cfg).num_parameters()


def test_config_validation():
    for bad in (
        dict(edge_num=3),
        dict(d_model=30, n_heads=4),
        dict(lookback=100, patch_len=48),
        dict(task="classify"),
        dict(ablation="no_head"),
        dict(lr=0.0),
        dict(mask_ratios=(0.0, 0.5)),
    ):
        with pytest.raises(ConfigError):
            ModelConfig(**bad).validate()


def test_config_text_round_trip():
    cfg = MICRO.replace(mask_ratios=(0.25,), causal=False, task="impute", loss_tokens="last")
    assert ModelConfig.from_text(cfg.to_text()) == cfg
    with pytest.raises(ConfigError):
        ModelConfig.from_text("[model]\nmystery = 1\n")
    with pytest.raises(ConfigError):
        ModelConfig.from_text("[model]\nd_model = wide\n")
