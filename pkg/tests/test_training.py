"""Loss, optimizer, checkpoint, and training-loop tests."""

import numpy as np
import pytest

from elnet import tensor as T
from elnet.manifest import DatasetManifest, ManifestRecord
from elnet.masks import GrayImage, Mask, save_image, save_mask
from elnet.network import ModelConfig, ParamStore, init_model, model_forward
from elnet.training import (
    AdamState,
    Checkpoint,
    LossConfig,
    TrainConfig,
    adam_step,
    boundary_weight,
    checkpoint_to_store,
    combined_loss,
    finetune,
    load_checkpoint,
    pretrain_backbone,
    save_checkpoint,
    total_loss,
    wbce_loss,
    wiou_loss,
)

MCFG = ModelConfig()


def test_loss_config_validation():
    with pytest.raises(ValueError):
        LossConfig(lam=1.5)
    with pytest.raises(ValueError):
        LossConfig(alpha=(0.5, 0.6, 0.1))
    with pytest.raises(ValueError):
        LossConfig(boundary_window=4)
    LossConfig()


def test_train_config_validation():
    with pytest.raises(ValueError):
        TrainConfig(epochs=0)
    with pytest.raises(ValueError):
        TrainConfig(epochs=10, checkpoint_epochs=(11,))
    t = TrainConfig(epochs=10)
    assert t.checkpoint_epochs == (10,)  # defaults to final epoch
    assert TrainConfig().batch_size == 12
    assert TrainConfig().learning_rate == 0.001
    assert TrainConfig().weight_decay == 5e-4
    assert TrainConfig().epochs == 200


# -- boundary weights ------------------------------------------------------------


def test_boundary_weight_constant_labels():
    cfg = LossConfig()
    for const in (0.0, 1.0):
        g = np.full((20, 20), const, dtype=np.float32)
        w = boundary_weight(g, cfg)
        assert np.allclose(w, 1.0)


def test_boundary_weight_single_pixel():
    g = np.zeros((31, 31), dtype=np.float32)
    g[15, 15] = 1.0
    w = boundary_weight(g, LossConfig())
    assert abs(w[15, 15] - (1 + 5 * (1 - 1 / 225))) < 1e-5
    assert w.min() >= 1.0


def test_boundary_weight_batched():
    g = np.zeros((2, 1, 16, 16), dtype=np.float32)
    g[0, 0, 8, 8] = 1.0
    w = boundary_weight(g, LossConfig())
    assert w.shape == (2, 1, 16, 16)
    assert np.allclose(w[1], 1.0)
    assert w[0, 0, 8, 8] > 1.0


def test_boundary_weight_even_window_rejected():
    cfg = LossConfig()
    object.__setattr__(cfg, "boundary_window", 4)  # bypass config validation
    with pytest.raises(ValueError):
        boundary_weight(np.zeros((4, 4)), cfg)


# -- losses -------------------------------------------------------------------------


def rand_instance(seed, shape=(1, 1, 8, 8)):
    rng = np.random.default_rng(seed)
    logits = T.Tensor(rng.normal(size=shape))
    g = rng.integers(0, 2, size=shape).astype(np.float64)
    return logits, g


def test_wbce_half_probability():
    logits = T.Tensor(np.zeros((1, 1, 4, 4), dtype=np.float64))
    for seed in range(3):
        g = np.random.default_rng(seed).integers(0, 2, size=(1, 1, 4, 4)).astype(np.float64)
        om = boundary_weight(g, LossConfig())
        assert wbce_loss(logits, g, om, LossConfig()).item() == pytest.approx(np.log(2), abs=1e-12)


def test_wbce_perfect_prediction_near_zero():
    g = np.array([[[[1.0, 0.0], [0.0, 1.0]]]])
    logits = T.Tensor(np.where(g > 0, 30.0, -30.0))
    val = wbce_loss(logits, g, np.ones_like(g), LossConfig()).item()
    assert val < 1e-6


def test_wiou_all_wrong():
    g = np.ones((1, 1, 4, 4))
    logits = T.Tensor(np.full(g.shape, -30.0))
    assert wiou_loss(logits, g, np.ones_like(g)).item() > 0.999


def test_wiou_range():
    for seed in range(10):
        logits, g = rand_instance(seed)
        v = wiou_loss(logits, g, boundary_weight(g, LossConfig())).item()
        assert 0.0 <= v <= 1.0


def test_combined_endpoints_and_mix():
    lcfg0 = LossConfig(lam=0.0)
    lcfg1 = LossConfig(lam=1.0)
    lcfgm = LossConfig(lam=0.5)
    logits, g = rand_instance(5)
    om = boundary_weight(g, lcfgm)
    bce = wbce_loss(T.Tensor(logits.data), g, om, lcfgm).item()
    iou = wiou_loss(T.Tensor(logits.data), g, om, eps=lcfgm.prob_clip).item()
    assert combined_loss(T.Tensor(logits.data), g, lcfg0).item() == pytest.approx(bce, abs=1e-12)
    assert combined_loss(T.Tensor(logits.data), g, lcfg1).item() == pytest.approx(iou, abs=1e-12)
    assert combined_loss(T.Tensor(logits.data), g, lcfgm).item() == pytest.approx((bce + iou) / 2, abs=1e-12)


def test_total_loss_composition():
    rng = np.random.default_rng(9)
    outs = [T.Tensor(rng.normal(size=(1, 1, 8, 8))) for _ in range(3)]
    g = rng.integers(0, 2, size=(1, 1, 8, 8)).astype(np.float64)
    cfg = LossConfig(alpha=(0.2, 0.3, 0.5))
    got = total_loss(outs, g, cfg).item()
    parts = [combined_loss(T.Tensor(o.data), g, cfg).item() for o in outs]
    assert got == pytest.approx(0.2 * parts[0] + 0.3 * parts[1] + 0.5 * parts[2], abs=1e-12)


def test_total_loss_single_head_alpha():
    rng = np.random.default_rng(10)
    outs = [T.Tensor(rng.normal(size=(1, 1, 4, 4))) for _ in range(3)]
    g = rng.integers(0, 2, size=(1, 1, 4, 4)).astype(np.float64)
    cfg = LossConfig(alpha=(1.0, 0.0, 0.0))
    got = total_loss(outs, g, cfg).item()
    outs2 = [outs[0], T.Tensor(rng.normal(size=(1, 1, 4, 4))), outs[2]]
    got2 = total_loss(outs2, g, cfg).item()
    assert got == pytest.approx(got2, abs=1e-12)


def test_total_loss_alpha_permutation_equivariant():
    rng = np.random.default_rng(11)
    outs = [T.Tensor(rng.normal(size=(1, 1, 4, 4))) for _ in range(3)]
    g = rng.integers(0, 2, size=(1, 1, 4, 4)).astype(np.float64)
    a = total_loss(outs, g, LossConfig(alpha=(0.2, 0.3, 0.5))).item()
    b = total_loss(
        [outs[2], outs[0], outs[1]], g, LossConfig(alpha=(0.5, 0.2, 0.3))
    ).item()
    assert a == pytest.approx(b, abs=1e-12)


def test_total_loss_identical_heads_equals_combined():
    rng = np.random.default_rng(12)
    o = T.Tensor(rng.normal(size=(1, 1, 4, 4)))
    g = rng.integers(0, 2, size=(1, 1, 4, 4)).astype(np.float64)
    tot = total_loss([T.Tensor(o.data) for _ in range(3)], g, LossConfig()).item()
    assert tot == pytest.approx(combined_loss(o, g, LossConfig()).item(), abs=1e-12)


def test_loss_gradients_match_finite_differences():
    rng = np.random.default_rng(13)
    g = rng.integers(0, 2, size=(1, 1, 6, 6)).astype(np.float64)
    cfg = LossConfig()
    om = boundary_weight(g, cfg)
    r1 = T.grad_check(lambda x: wbce_loss(x, g, om, cfg), T.Tensor(rng.normal(size=(1, 1, 6, 6))), tol=1e-5)
    assert r1.passed
    r2 = T.grad_check(lambda x: wiou_loss(x, g, om), T.Tensor(rng.normal(size=(1, 1, 6, 6))), tol=1e-5)
    assert r2.passed


# -- Adam ---------------------------------------------------------------------------


def test_adam_first_step_hand_case():
    store = ParamStore()
    w = store.add("w", np.array([1.0], dtype=np.float32))
    w.grad = np.array([1.0], dtype=np.float32)
    adam_step(store, AdamState(), lr=0.001)
    assert abs(w.data[0] - 0.999) < 1e-6


def test_adam_zero_grad_no_move():
    store = ParamStore()
    w = store.add("w", np.array([2.0], dtype=np.float32))
    w.grad = np.zeros(1, dtype=np.float32)
    adam_step(store, AdamState(), lr=0.1, weight_decay=0.0)
    assert w.data[0] == 2.0


def test_adam_frozen_untouched():
    store = ParamStore()
    store.add("backbone.w", np.array([3.0], dtype=np.float32))
    store.freeze_prefix("backbone.")
    store.tensors["backbone.w"].grad = np.array([5.0], dtype=np.float32)
    adam_step(store, AdamState(), lr=0.1)
    assert store.tensors["backbone.w"].data[0] == 3.0


def test_adam_missing_grad_raises():
    store = ParamStore()
    store.add("w", np.array([1.0], dtype=np.float32))
    with pytest.raises(ValueError, match="no gradient"):
        adam_step(store, AdamState(), lr=0.1)


def test_adam_weight_decay_pulls_to_zero():
    store = ParamStore()
    w = store.add("w", np.array([1.0], dtype=np.float32))
    st = AdamState()
    for _ in range(200):
        w.grad = np.zeros(1, dtype=np.float32)
        adam_step(store, st, lr=0.01, weight_decay=0.1)
    assert abs(w.data[0]) < 1.0


# -- checkpoints ----------------------------------------------------------------------


def test_checkpoint_roundtrip_forward_identical(tmp_path):
    store = init_model(MCFG, seed=3)
    store.freeze_prefix("backbone.")
    ck = Checkpoint.from_store(store, MCFG, epoch=5)
    p = str(tmp_path / "m.ckpt")
    save_checkpoint(ck, p)
    store2 = checkpoint_to_store(load_checkpoint(p))
    x = T.Tensor(np.random.default_rng(0).uniform(size=(1, 1, 32, 32)).astype(np.float32))
    o1 = model_forward(x, store, MCFG)
    o2 = model_forward(x, store2, MCFG)
    for a, b in zip(o1, o2):
        assert np.array_equal(a.data, b.data)
    assert store2.frozen == store.frozen


def test_checkpoint_bad_magic(tmp_path):
    p = tmp_path / "bad.ckpt"
    p.write_bytes(b"NOPE" + b"\x00" * 64)
    with pytest.raises(ValueError, match="magic"):
        load_checkpoint(str(p))


def test_checkpoint_truncated(tmp_path):
    store = init_model(MCFG, seed=1)
    ck = Checkpoint.from_store(store, MCFG)
    p = str(tmp_path / "t.ckpt")
    save_checkpoint(ck, p)
    data = open(p, "rb").read()
    open(p, "wb").write(data[: len(data) // 2])
    with pytest.raises(ValueError, match="truncated"):
        load_checkpoint(p)


def test_checkpoint_config_mismatch(tmp_path):
    store = init_model(MCFG, seed=1)
    ck = Checkpoint.from_store(store, MCFG)
    other = ModelConfig(stage_channels=(8, 16, 32, 64))
    with pytest.raises(ValueError, match="does not match"):
        checkpoint_to_store(ck, expect_config=other)


def test_checkpoint_saves_are_byte_deterministic(tmp_path):
    store = init_model(MCFG, seed=2)
    ck = Checkpoint.from_store(store, MCFG, epoch=1)
    p1, p2 = str(tmp_path / "a.ckpt"), str(tmp_path / "b.ckpt")
    save_checkpoint(ck, p1)
    save_checkpoint(ck, p2)
    assert open(p1, "rb").read() == open(p2, "rb").read()


# -- training loops --------------------------------------------------------------------


def tiny_dataset(tmp_path, n=4, size=32, seed=0):
    """Blobby images with their threshold masks, written to disk."""
    rng = np.random.default_rng(seed)
    records = []
    for i in range(n):
        yy, xx = np.mgrid[0:size, 0:size]
        cy, cx = rng.integers(8, size - 8, size=2)
        r = rng.integers(4, 9)
        mask = ((yy - cy) ** 2 + (xx - cx) ** 2 <= r * r).astype(np.uint8)
        img = np.where(mask, 0.25, 0.75) + rng.normal(0, 0.05, size=(size, size))
        ip = str(tmp_path / f"img_{i}.png")
        lp = str(tmp_path / f"lab_{i}.png")
        save_image(GrayImage(np.clip(img, 0, 1).astype(np.float32)), ip)
        save_mask(Mask(mask), lp)
        records.append(ManifestRecord(ip, "train", label_path=lp, provenance="coarse"))
    return DatasetManifest(records)


@pytest.fixture(scope="module")
def pretrained(tmp_path_factory):
    root = tmp_path_factory.mktemp("pre")
    man = tiny_dataset(root, n=4, size=32, seed=7)
    from elnet.masks import load_image

    images = [load_image(r.image_path) for r in man]
    ck, losses = pretrain_backbone(images, TrainConfig(epochs=6, batch_size=4, seed=1), MCFG)
    return ck, losses


def test_pretrain_loss_decreases(pretrained):
    ck, losses = pretrained
    assert losses[-1] < losses[0]


def test_pretrain_checkpoint_backbone_only(pretrained):
    ck, _ = pretrained
    assert all(n.startswith("backbone.") for n in ck.tensors)
    assert not any("recon" in n for n in ck.tensors)


def test_finetune_smoke_and_frozen_contract(tmp_path, pretrained):
    backbone, _ = pretrained
    man = tiny_dataset(tmp_path, n=4, size=32, seed=3)
    tcfg = TrainConfig(epochs=3, batch_size=4, seed=5, checkpoint_epochs=(2, 3))
    res = finetune(man, backbone, tcfg, LossConfig(), MCFG)
    assert len(res.checkpoints) == 2
    assert len(res.epoch_losses) == 3
    # frozen backbone bit-identical to the pretrained values
    for name, arr in backbone.tensors.items():
        assert np.array_equal(res.store.tensors[name].data, arr), name
    assert res.store.frozen == {n for n in res.store.tensors if n.startswith("backbone.")}


def test_finetune_deterministic(tmp_path, pretrained):
    backbone, _ = pretrained
    man = tiny_dataset(tmp_path, n=4, size=32, seed=3)
    tcfg = TrainConfig(epochs=2, batch_size=4, seed=5)
    r1 = finetune(man, backbone, tcfg, LossConfig(), MCFG)
    r2 = finetune(man, backbone, tcfg, LossConfig(), MCFG)
    assert r1.epoch_losses == r2.epoch_losses
    p1, p2 = str(tmp_path / "d1.ckpt"), str(tmp_path / "d2.ckpt")
    save_checkpoint(r1.checkpoints[-1], p1)
    save_checkpoint(r2.checkpoints[-1], p2)
    assert open(p1, "rb").read() == open(p2, "rb").read()


def test_finetune_warm_start(tmp_path, pretrained):
    backbone, _ = pretrained
    man = tiny_dataset(tmp_path, n=4, size=32, seed=3)
    r1 = finetune(man, backbone, TrainConfig(epochs=1, batch_size=4, seed=5), LossConfig(), MCFG)
    r2 = finetune(man, None, TrainConfig(epochs=1, batch_size=4, seed=6), LossConfig(), MCFG, init_from=r1.checkpoints[-1])
    assert len(r2.checkpoints) == 1
    for name in backbone.tensors:
        assert np.array_equal(r2.store.tensors[name].data, backbone.tensors[name])


def test_finetune_empty_training_set(pretrained):
    backbone, _ = pretrained
    with pytest.raises(ValueError):
        finetune(DatasetManifest([]), backbone, TrainConfig(epochs=1), LossConfig(), MCFG)


def test_finetune_max_steps(tmp_path, pretrained):
    backbone, _ = pretrained
    man = tiny_dataset(tmp_path, n=4, size=32, seed=3)
    res = finetune(man, backbone, TrainConfig(epochs=50, batch_size=2, seed=1), LossConfig(), MCFG, max_steps=3)
    total_batches = sum(1 for _ in res.log)
    assert total_batches <= 2  # stopped inside epoch 2
    assert len(res.checkpoints) >= 1
