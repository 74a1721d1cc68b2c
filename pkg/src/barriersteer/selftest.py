"""Quick oracle and invariant checks runnable without pytest.

Each check returns ``None`` on success or raises ``AssertionError`` with a
reason. The full property suite lives in the test directory; this is the
subset that finishes in a few seconds.
"""

from __future__ import annotations

import math
import traceback
from typing import Callable

import numpy as np

from . import barrier, numeric
from .analysis import wilson_interval
from .decoder import ModelConfig, generate, init_model, prefill
from .numeric import Rng
from .steering import SteeringConfig, qp_oracle, solve_correction

CHECKS: list[tuple[str, Callable[[], None]]] = []


def check(name: str):
    def wrap(fn):
        CHECKS.append((name, fn))
        return fn

    return wrap


def _rel(a, b) -> float:
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    return float(np.max(np.abs(a - b)) / max(np.max(np.abs(b)), 1e-300))


@check("matvec matches a naive loop")
def _matvec():
    rng = Rng(1)
    m = rng.gaussian(64).reshape(8, 8)
    x = rng.gaussian(8)
    ref = [sum(m[i, j] * x[j] for j in range(8)) for i in range(8)]
    assert _rel(numeric.matvec(m, x), ref) <= 1e-12


@check("dot matches exactly rounded summation")
def _dot():
    rng = Rng(2)
    a, b = rng.gaussian(64), rng.gaussian(64)
    ref = math.fsum(float(u) * float(v) for u, v in zip(a, b))
    assert abs(numeric.dot(a, b) - ref) <= 1e-13 * max(abs(ref), 1.0)


@check("softmax is a simplex point")
def _softmax():
    p = numeric.softmax(Rng(3).gaussian(16) * 50)
    assert abs(p.sum() - 1.0) <= 1e-12 and (p >= 0).all()


@check("closed-form correction matches halfspace projection")
def _kkt():
    rng = Rng(4)
    for _ in range(50):
        g = barrier.BarrierGradient.from_vector(rng.gaussian(64))
        h, tau = rng.gaussian(2)
        theta = solve_correction(h, g, tau, 0.0).theta
        ref = qp_oracle(h, g, tau)
        assert np.allclose(theta, ref, rtol=1e-8, atol=0.0) or (h >= tau and not theta.any())


def _tiny():
    cfg = ModelConfig(n_layers=3, n_heads=4, d_model=32, vocab_size=16, max_seq=40, seed=5)
    model = init_model(cfg)
    image = Rng(6).gaussian(4 * 32).reshape(4, 32)
    return model, image


@check("barrier gradient matches central differences")
def _fd():
    model, image = _tiny()
    cache, ctx, _ = prefill(model, [0, 1], image, steered_layers=[1], image_at=1)
    g = ctx.gradients[1].vector
    x = Rng(7).gaussian(32)
    f = lambda v: barrier.barrier_direct(v, model.layers[1], cache, ctx.image_positions, 1)  # noqa: E731
    step = 1e-6
    fd = np.array([(f(x + step * e) - f(x - step * e)) / (2 * step) for e in np.eye(32)])
    assert _rel(g, fd) <= 1e-6


@check("steered step restores the barrier to tau exactly")
def _restore():
    model, image = _tiny()
    cfg = SteeringConfig(tau=0.5, alpha=1.0, epsilon=0.0, steered_layers=(0, 1, 2))
    gen = generate(model, [0, 1], image, cfg, max_new=10, record_states=True)
    fired = [e for e in gen.trace.entries if e.fired]
    assert fired, "no steered steps to check"
    for e in fired:
        h_new = float(gen.context.gradients[e.layer].vector @ e.x_steered)
        assert abs(h_new - cfg.tau) <= 1e-9 * abs(cfg.tau)


@check("mode off is bit-identical to the hook-free engine")
def _off():
    model, image = _tiny()
    a = generate(model, [0, 1], image, None, max_new=10)
    b = generate(model, [0, 1], image, SteeringConfig(mode="off", steered_layers=(0, 1, 2)), max_new=10)
    assert a.tokens == b.tokens
    n = a.cache.length
    assert np.array_equal(a.cache._keys[:, :, :n], b.cache._keys[:, :, :n])


@check("wilson interval matches the closed form")
def _wilson():
    lo, hi = wilson_interval(0, 10)
    z2 = 1.96**2
    assert lo == 0.0 and abs(hi - z2 / (10 + z2)) <= 1e-12  # k = 0 reduces to z^2 / (n + z^2)


def run_selftest(verbose: bool = True) -> bool:
    ok = True
    for name, fn in CHECKS:
        try:
            fn()
            status = "PASS"
        except Exception:  # a failing check reports and the rest still run
            ok = False
            status = "FAIL"
            if verbose:
                traceback.print_exc()
        if verbose:
            print(f"{status}  {name}")
    return ok
