"""Numerical gradient verification for every trainable component.

Each check rebuilds a small float64 instance of one component, runs the
reverse-mode gradient against central differences, and reports the maximum
relative error. The suite backs the `gradcheck` subcommand and doubles as
the machine-checkable statement that backpropagation through the attention
gate, adapters, receptive field blocks, decoder, and losses is correct.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .network import ModelConfig, decoder_forward, adapter_forward, eam_forward, init_model, rfb_forward
from .training import LossConfig, combined_loss, total_loss, wbce_loss, wiou_loss

__all__ = ["CheckResult", "run_gradcheck_suite", "GRADCHECK_TOL"]

GRADCHECK_TOL = 1e-4


@dataclass(frozen=True)
class CheckResult:
    name: str
    max_rel_err: float
    passed: bool
    n_checked: int

    def to_json(self) -> dict:
        return {
            "name": self.name,
            "max_rel_err": self.max_rel_err,
            "passed": self.passed,
            "n_checked": self.n_checked,
        }


def _param_check(store, name: str, f_of_store, sample: int, seed: int, tol: float) -> T.GradCheckReport:
    """Gradient wrt one named parameter: swap it for the probed tensor."""
    original = store.tensors[name]
    shape = original.shape

    def f(wt: T.Tensor) -> T.Tensor:
        store.tensors[name] = T.reshape(wt, shape) if wt.shape != shape else wt
        try:
            return f_of_store()
        finally:
            store.tensors[name] = original

    probe = T.Tensor(original.data.copy())
    return T.grad_check(f, probe, tol=tol, sample=sample, seed=seed)


def run_gradcheck_suite(batch: int = 8, hw: int = 16, tol: float = GRADCHECK_TOL, seed: int = 0) -> list[CheckResult]:
    """Check every trainable component at the given instance size.

    Returns one result per check; the suite passes iff all entries do.
    """
    rng = np.random.default_rng(seed)
    cfg = ModelConfig()
    store = init_model(cfg, seed=seed, dtype=np.float64)
    # break the exact-identity adapter init so its gradient is generic
    for k in range(1, 5):
        wu = store[f"adapter.stage{k}.w_up"]
        wu.data = rng.standard_normal(wu.shape) * 0.3
    lcfg = LossConfig()
    results: list[CheckResult] = []

    def record(name: str, rep: T.GradCheckReport):
        results.append(CheckResult(name, float(rep.max_rel_err), bool(rep.passed), int(rep.n_checked)))

    # -- EAM: gradient wrt input, conv weight, and bn scale -----------------
    c = cfg.rfb_out
    x_eam = rng.standard_normal((2, c, hw // 2, hw // 2))

    def eam_of_input(xt: T.Tensor) -> T.Tensor:
        gated, _ = eam_forward(xt, store, "decoder.block1.eam", bn_train=True)
        return T.tsum(T.mul(gated, gated))

    record("eam.input", T.grad_check(eam_of_input, T.Tensor(x_eam), tol=tol, sample=48, seed=1))
    fixed_eam_in = T.Tensor(x_eam)
    record(
        "eam.conv.w",
        _param_check(store, "decoder.block1.eam.conv.w", lambda: eam_of_input(fixed_eam_in), sample=32, seed=2, tol=tol),
    )
    record(
        "eam.bn.gamma",
        _param_check(store, "decoder.block1.eam.bn.gamma", lambda: eam_of_input(fixed_eam_in), sample=16, seed=3, tol=tol),
    )

    # -- adapter: input and both projections (stage-2 adapter sees 16ch) ----
    c1 = cfg.stage_channels[0]
    x_ad = rng.standard_normal((batch, c1, hw, hw))

    def ad_of_input(xt: T.Tensor) -> T.Tensor:
        return T.tsum(T.mul(adapter_forward(xt, store, "adapter.stage2", residual=True), T.Tensor(ad_mix)))

    ad_mix = rng.standard_normal((batch, c1, hw, hw))
    record("adapter.input", T.grad_check(ad_of_input, T.Tensor(x_ad), tol=tol, sample=48, seed=4))
    fixed_ad_in = T.Tensor(x_ad)
    for pname, n_s in (("w_down", 32), ("w_up", 32)):
        record(
            f"adapter.{pname}",
            _param_check(store, f"adapter.stage2.{pname}", lambda: ad_of_input(fixed_ad_in), sample=n_s, seed=5, tol=tol),
        )

    # -- RFB: input, one dilated branch, projection --------------------------
    x_rfb = rng.standard_normal((2, c1, hw, hw))
    rfb_mix = rng.standard_normal((2, cfg.rfb_out, hw, hw))

    def rfb_of_input(xt: T.Tensor) -> T.Tensor:
        return T.tsum(T.mul(rfb_forward(xt, store, "rfb.stage1"), T.Tensor(rfb_mix)))

    record("rfb.input", T.grad_check(rfb_of_input, T.Tensor(x_rfb), tol=tol, sample=48, seed=6))
    fixed_rfb_in = T.Tensor(x_rfb)
    for pname, n_s in (("branch2.w", 32), ("proj.w", 32)):
        record(
            f"rfb.{pname}",
            _param_check(store, f"rfb.stage1.{pname}", lambda: rfb_of_input(fixed_rfb_in), sample=n_s, seed=7, tol=tol),
        )

    # -- decoder: full three-block path from random pyramid features --------
    r = cfg.rfb_out
    pyramid = [
        rng.standard_normal((2, r, hw // 2, hw // 2)),
        rng.standard_normal((2, r, hw // 4, hw // 4)),
        rng.standard_normal((2, r, hw // 8, hw // 8)),
        rng.standard_normal((2, r, hw // 16, hw // 16)),
    ]

    def dec_of_r4(xt: T.Tensor) -> T.Tensor:
        rfbs = [T.Tensor(pyramid[0]), T.Tensor(pyramid[1]), T.Tensor(pyramid[2]), xt]
        outs = decoder_forward(rfbs, store, cfg, bn_train=True)
        acc = None
        for s in outs:
            term = T.tsum(T.mul(s, s))
            acc = term if acc is None else T.add(acc, term)
        return acc

    record("decoder.input", T.grad_check(dec_of_r4, T.Tensor(pyramid[3]), tol=tol, sample=40, seed=8))
    fixed_r4 = T.Tensor(pyramid[3])
    record(
        "decoder.block2.conv1.w",
        _param_check(store, "decoder.block2.conv1.w", lambda: dec_of_r4(fixed_r4), sample=24, seed=9, tol=tol),
    )

    # -- losses ---------------------------------------------------------------
    labels = (rng.random((batch, 1, hw, hw)) > 0.6).astype(np.float64)
    logits = rng.standard_normal((batch, 1, hw, hw))
    from .training import boundary_weight

    omega = boundary_weight(labels, lcfg)
    record(
        "loss.wbce",
        T.grad_check(lambda s: wbce_loss(s, labels, omega, lcfg), T.Tensor(logits), tol=tol, sample=64, seed=10),
    )
    record(
        "loss.wiou",
        T.grad_check(lambda s: wiou_loss(s, labels, omega, eps=lcfg.prob_clip), T.Tensor(logits), tol=tol, sample=64, seed=11),
    )
    record(
        "loss.combined",
        T.grad_check(lambda s: combined_loss(s, labels, lcfg), T.Tensor(logits), tol=tol, sample=64, seed=12),
    )

    others = [T.Tensor(rng.standard_normal((batch, 1, hw, hw))) for _ in range(2)]
    record(
        "loss.total",
        T.grad_check(
            lambda s: total_loss([s, others[0], others[1]], labels, lcfg),
            T.Tensor(rng.standard_normal((batch, 1, hw, hw))),
            tol=tol,
            sample=64,
            seed=13,
        ),
    )
    return results
