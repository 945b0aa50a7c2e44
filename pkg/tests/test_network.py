"""Network component tests: adapters, RFB, EAM, encoder/decoder, predict."""

import numpy as np
import pytest

from elnet import tensor as T
from elnet.masks import GrayImage
from elnet.network import (
    RFB_BRANCH,
    ModelConfig,
    ParamStore,
    adapter_forward,
    decoder_forward,
    eam_forward,
    encoder_forward,
    init_model,
    model_forward,
    predict,
    rfb_forward,
)

MCFG = ModelConfig()


def test_model_config_validation():
    with pytest.raises(ValueError):
        ModelConfig(in_channels=2)
    with pytest.raises(ValueError):
        ModelConfig(rfb_out=32)
    with pytest.raises(ValueError):
        ModelConfig(stage_channels=(16, 32, 64))
    with pytest.raises(ValueError):
        ModelConfig(adapter_bottleneck=0)


def test_param_store_partition():
    store = init_model(MCFG, seed=0)
    store.freeze_prefix("backbone.")
    names = set(store.names())
    frozen = store.frozen
    trainable = set(store.trainable_names())
    assert frozen.isdisjoint(trainable)
    buffers = {n for n in names if n.endswith(("running_mean", "running_var"))}
    assert frozen | trainable | buffers == names
    assert all(n.startswith("backbone.") for n in frozen)


def test_param_store_duplicate_and_missing():
    store = ParamStore()
    store.add("a", np.zeros(1))
    with pytest.raises(ValueError):
        store.add("a", np.zeros(1))
    with pytest.raises(KeyError):
        store["missing"]
    with pytest.raises(ValueError):
        store.freeze_prefix("nothing.")


# -- adapter ----------------------------------------------------------------


def test_adapter_residual_identity_at_init():
    store = init_model(MCFG, seed=1, parts=("adapter",))
    x = T.Tensor(np.random.default_rng(0).normal(size=(1, 1, 4, 4)).astype(np.float32))
    out = adapter_forward(x, store, "adapter.stage1", residual=True)
    assert np.array_equal(out.data, x.data)  # w_up is zero-initialized


def test_adapter_nonresidual_zero_up_gives_zero():
    store = init_model(MCFG, seed=1, parts=("adapter",))
    x = T.Tensor(np.random.default_rng(0).normal(size=(1, 1, 4, 4)).astype(np.float32))
    out = adapter_forward(x, store, "adapter.stage1", residual=False)
    assert np.all(out.data == 0.0)


def test_adapter_channel_mismatch():
    store = init_model(MCFG, seed=1, parts=("adapter",))
    x = T.Tensor(np.zeros((1, 7, 4, 4), dtype=np.float32))
    with pytest.raises(ValueError):
        adapter_forward(x, store, "adapter.stage1")


def test_adapter_grad_check_w_down():
    store = init_model(MCFG, seed=2, dtype=np.float64, parts=("adapter",))
    # make the up-projection nonzero so w_down actually receives gradient
    store.tensors["adapter.stage2.w_up"].data[...] = np.random.default_rng(1).normal(
        size=store["adapter.stage2.w_up"].shape
    )
    x = T.Tensor(np.random.default_rng(2).normal(size=(1, 16, 4, 4)))
    shape = store["adapter.stage2.w_down"].shape

    def f(wt):
        store.tensors["adapter.stage2.w_down"] = T.reshape(wt, shape)
        out = adapter_forward(x, store, "adapter.stage2", residual=True)
        return T.tsum(T.mul(out, out))

    rep = T.grad_check(f, T.Tensor(store["adapter.stage2.w_down"].data.reshape(-1).copy()), tol=1e-5)
    assert rep.passed


# -- RFB ----------------------------------------------------------------------


def test_rfb_zero_input_zero_output():
    store = init_model(MCFG, seed=3, parts=("rfb",))
    x = T.Tensor(np.zeros((1, 16, 8, 8), dtype=np.float32))
    out = rfb_forward(x, store, "rfb.stage1")
    assert np.all(out.data == 0.0)


def test_rfb_output_channels():
    store = init_model(MCFG, seed=3, parts=("rfb",))
    for k, c in enumerate(MCFG.stage_channels, start=1):
        x = T.Tensor(np.random.default_rng(k).normal(size=(1, c, 8, 8)).astype(np.float32))
        out = rfb_forward(x, store, f"rfb.stage{k}")
        assert out.shape == (1, 64, 8, 8)


def test_rfb_grad_check_branches():
    store = init_model(MCFG, seed=4, dtype=np.float64, parts=("rfb",))
    x = T.Tensor(np.random.default_rng(5).normal(size=(1, 16, 4, 4)))
    for bi in (1, 2, 3):
        name = f"rfb.stage1.branch{bi}.w"
        shape = store[name].shape
        orig = store[name]

        def f(wt):
            store.tensors[name] = T.reshape(wt, shape)
            out = rfb_forward(x, store, "rfb.stage1")
            return T.tsum(T.mul(out, out))

        rep = T.grad_check(f, T.Tensor(orig.data.reshape(-1).copy()), tol=1e-5, sample=40, seed=bi)
        store.tensors[name] = orig
        assert rep.passed, f"branch {bi}: {rep.max_rel_err}"


# -- EAM ---------------------------------------------------------------------------


def eam_store(c=64, dtype=np.float32, zero_conv=False, seed=6):
    store = ParamStore()
    rng = np.random.default_rng(seed)
    w = np.zeros((c, c, 3, 3), dtype=dtype) if zero_conv else (rng.standard_normal((c, c, 3, 3)) * 0.05).astype(dtype)
    store.add("eam.conv.w", w)
    store.add("eam.bn.gamma", np.ones(c, dtype=dtype))
    store.add("eam.bn.beta", np.zeros(c, dtype=dtype))
    store.add("eam.bn.running_mean", np.zeros(c, dtype=dtype), requires_grad=False)
    store.add("eam.bn.running_var", np.ones(c, dtype=dtype), requires_grad=False)
    return store


def test_eam_zero_weights_half_gate():
    store = eam_store(c=4, zero_conv=True)
    x = T.Tensor(np.random.default_rng(7).normal(size=(1, 4, 6, 6)).astype(np.float32))
    out, a_e = eam_forward(x, store, "eam", bn_train=False)
    assert np.allclose(a_e.data, 0.5)
    assert np.allclose(out.data, 0.5 * x.data)


def test_eam_zero_input_zero_output():
    store = eam_store(c=4)
    x = T.Tensor(np.zeros((1, 4, 6, 6), dtype=np.float32))
    out, _ = eam_forward(x, store, "eam", bn_train=False)
    assert np.all(out.data == 0.0)


def test_eam_attenuates():
    store = eam_store(c=8)
    x = T.Tensor(np.random.default_rng(8).normal(size=(2, 8, 8, 8)).astype(np.float32))
    out, a_e = eam_forward(x, store, "eam", bn_train=False)
    assert np.all(a_e.data > 0.0) and np.all(a_e.data < 1.0)
    assert np.all(np.abs(out.data) <= np.abs(x.data) + 1e-7)


def test_eam_grad_check():
    store = eam_store(c=3, dtype=np.float64)

    def f(x):
        out, _ = eam_forward(x, store, "eam", bn_train=True)
        return T.tsum(T.mul(out, out))

    rep = T.grad_check(f, T.Tensor(np.random.default_rng(9).normal(size=(2, 3, 4, 4))), tol=1e-5)
    assert rep.passed


# -- encoder/decoder ------------------------------------------------------------------


def test_encoder_shape_contract():
    store = init_model(MCFG, seed=10)
    x = T.Tensor(np.random.default_rng(0).uniform(size=(1, 1, 64, 64)).astype(np.float32))
    feats = encoder_forward(x, store, MCFG)
    assert [f.shape for f in feats] == [
        (1, 16, 32, 32),
        (1, 32, 16, 16),
        (1, 64, 8, 8),
        (1, 128, 4, 4),
    ]


def test_encoder_rejects_indivisible():
    store = init_model(MCFG, seed=10)
    x = T.Tensor(np.zeros((1, 1, 40, 40), dtype=np.float32))
    with pytest.raises(ValueError, match="divisible"):
        encoder_forward(x, store, MCFG)


def test_encoder_zeroed_adapters_match_bare_backbone():
    store = init_model(MCFG, seed=11)
    x = T.Tensor(np.random.default_rng(1).uniform(size=(1, 1, 32, 32)).astype(np.float32))
    with_adapters = encoder_forward(x, store, MCFG, use_adapters=True)
    without = encoder_forward(x, store, MCFG, use_adapters=False)
    for a, b in zip(with_adapters, without):
        assert np.array_equal(a.data, b.data)


def test_encoder_deterministic():
    store = init_model(MCFG, seed=12)
    x = T.Tensor(np.random.default_rng(2).uniform(size=(1, 1, 32, 32)).astype(np.float32))
    f1 = encoder_forward(x, store, MCFG)
    f2 = encoder_forward(x, store, MCFG)
    for a, b in zip(f1, f2):
        assert np.array_equal(a.data, b.data)


def rfb_features(seed, n=1, hw=32):
    rng = np.random.default_rng(seed)
    sizes = [hw // 2, hw // 4, hw // 8, hw // 16]
    return [T.Tensor(rng.normal(size=(n, 64, s, s)).astype(np.float32)) for s in sizes]


def test_decoder_output_contract():
    store = init_model(MCFG, seed=13)
    outs = decoder_forward(rfb_features(0), store, MCFG)
    assert len(outs) == 3
    for o in outs:
        assert o.shape == (1, 1, 32, 32)


def test_decoder_eam_disabled_path():
    cfg = ModelConfig(eam_enabled=False)
    store = init_model(cfg, seed=14)
    assert not any("eam" in n for n in store.names())
    outs = decoder_forward(rfb_features(1), store, cfg)
    assert len(outs) == 3


def test_decoder_zeroed_eam_equals_disabled_with_halved_gate_columns():
    """With EAM zeroed the gate is exactly 0.5; halving the conv columns that
    read the gated channels in the EAM-free model reproduces the outputs
    bit-exactly (multiplication by powers of two is exact)."""
    cfg_on = ModelConfig(eam_enabled=True)
    cfg_off = ModelConfig(eam_enabled=False)
    store_on = init_model(cfg_on, seed=15)
    store_off = init_model(cfg_off, seed=15)
    for k in range(1, 4):
        store_on.tensors[f"decoder.block{k}.eam.conv.w"].data[...] = 0.0
        shared = store_on[f"decoder.block{k}.conv1.w"].data
        halved = shared.copy()
        halved[:, :64] *= 0.5  # first 64 input channels are the gated ones
        store_off.tensors[f"decoder.block{k}.conv1.w"].data[...] = halved
        store_off.tensors[f"decoder.block{k}.conv2.w"].data[...] = store_on[f"decoder.block{k}.conv2.w"].data
    for k in range(1, 4):
        store_off.tensors[f"head{k}.w"].data[...] = store_on[f"head{k}.w"].data
        store_off.tensors[f"head{k}.b"].data[...] = store_on[f"head{k}.b"].data
    feats = rfb_features(2)
    outs_on = decoder_forward([T.Tensor(f.data) for f in feats], store_on, cfg_on, bn_train=False)
    outs_off = decoder_forward([T.Tensor(f.data) for f in feats], store_off, cfg_off, bn_train=False)
    for a, b in zip(outs_on, outs_off):
        assert np.array_equal(a.data, b.data)


def test_decoder_grad_check_16x16():
    cfg = ModelConfig()
    store = init_model(cfg, seed=16, dtype=np.float64)
    feats = [T.Tensor(f.data.astype(np.float64)) for f in rfb_features(3, hw=16)]
    name = "decoder.block2.conv1.w"
    shape = store[name].shape

    def f(wt):
        store.tensors[name] = T.reshape(wt, shape)
        outs = decoder_forward(feats, store, cfg, bn_train=False)
        return T.tmean(T.mul(outs[2], outs[2]))

    rep = T.grad_check(f, T.Tensor(store[name].data.reshape(-1).copy()), tol=1e-4, sample=30, seed=0)
    assert rep.passed, rep.max_rel_err


def test_decoder_skip_shape_mismatch():
    store = init_model(MCFG, seed=17)
    feats = rfb_features(4)
    feats[0] = T.Tensor(np.zeros((1, 64, 5, 5), dtype=np.float32))
    with pytest.raises(ValueError):
        decoder_forward(feats, store, MCFG)


# -- predict -----------------------------------------------------------------------


def zeroed_head_store(seed=18, head_bias=0.0):
    store = init_model(MCFG, seed=seed)
    for k in range(1, 4):
        store.tensors[f"head{k}.w"].data[...] = 0.0
        store.tensors[f"head{k}.b"].data[...] = head_bias
    return store


def test_predict_extreme_logits():
    img = GrayImage(np.random.default_rng(3).uniform(size=(32, 32)).astype(np.float32))
    low = zeroed_head_store(head_bias=-10.0)
    assert predict(img, low, MCFG).count() == 0
    high = zeroed_head_store(head_bias=10.0)
    assert predict(img, high, MCFG).count() == 32 * 32


def test_predict_threshold_strict():
    img = GrayImage(np.random.default_rng(4).uniform(size=(32, 32)).astype(np.float32))
    store = zeroed_head_store(head_bias=0.0)  # sigmoid(0) = 0.5 exactly
    assert predict(img, store, MCFG, threshold=0.5).count() == 0


def test_model_forward_full_shapes():
    store = init_model(MCFG, seed=19)
    x = T.Tensor(np.random.default_rng(5).uniform(size=(2, 1, 32, 32)).astype(np.float32))
    outs = model_forward(x, store, MCFG)
    for o in outs:
        assert o.shape == (2, 1, 32, 32)
