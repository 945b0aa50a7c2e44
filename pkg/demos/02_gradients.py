"""Verify reverse-mode gradients against central differences, component by
component, and show the autodiff kernel on a tiny standalone expression.

Usage: python3 demos/02_gradients.py
"""

import time

import numpy as np

from elnet import tensor as T
from elnet.checks import run_gradcheck_suite


def tiny_expression_demo():
    # d/dx sum(sigmoid(x * w)) by hand vs by tape
    x = T.Tensor(np.linspace(-2, 2, 5), requires_grad=True)
    w = T.Tensor(np.full(5, 0.7), requires_grad=True)
    y = T.tsum(T.sigmoid(T.mul(x, w)))
    T.backward(y)
    s = 1.0 / (1.0 + np.exp(-x.data * w.data))
    manual = s * (1 - s) * w.data
    print("tiny expression  max |grad - manual| =", np.abs(x.grad - manual).max())


def main():
    tiny_expression_demo()
    print("\nfull component suite (float64, central differences):")
    t0 = time.time()
    results = run_gradcheck_suite()
    for r in results:
        mark = "ok " if r.passed else "BAD"
        print(f"  [{mark}] {r.name:24s} max_rel_err={r.max_rel_err:.2e}  ({r.n_checked} coords)")
    print(f"all passed: {all(r.passed for r in results)}  ({time.time() - t0:.1f}s)")


if __name__ == "__main__":
    main()
