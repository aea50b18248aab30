"""Central finite-difference oracles for the recorded backward passes.

The oracle only ever calls forward evaluations, so it stays independent of
the tape it is checking. ``run_suite`` drives the CLI ``gradcheck`` command:
one named check per primitive plus block-level and end-to-end model checks,
each reporting its worst relative error.
"""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from fewgraph import tensor as T


def relative_error(analytic: float, numeric: float) -> float:
    return abs(analytic - numeric) / max(1.0, abs(analytic), abs(numeric))


def numeric_grad(f: Callable[[], float], arr: np.ndarray, flat_index: int, step: float) -> float:
    """Central difference of f with respect to one entry of arr."""
    flat = arr.reshape(-1)
    saved = flat[flat_index]
    flat[flat_index] = saved + step
    up = f()
    flat[flat_index] = saved - step
    down = f()
    flat[flat_index] = saved
    return (up - down) / (2.0 * step)


def check_grads(
    make_loss: Callable[[], T.Tensor],
    params: Sequence[T.Tensor],
    step: float = 1e-4,
    probes_per_param: int | None = None,
    rng: np.random.Generator | None = None,
) -> float:
    """Worst relative error between recorded and finite-difference gradients.

    ``make_loss`` must rebuild the scalar loss from scratch on every call
    (deterministically: fresh traces, frozen rng draws). Probes default to
    every entry of every parameter; pass ``probes_per_param`` to subsample.
    """
    for p in params:
        p.zero_grad()
    with T.Trace():
        loss = make_loss()
    T.backward(loss)
    analytic = [p.grad.copy() for p in params]

    def value() -> float:
        with T.no_grad():
            return make_loss().item()

    worst = 0.0
    for p, a in zip(params, analytic):
        n = p.data.size
        if probes_per_param is None or probes_per_param >= n:
            probe_idx = range(n)
        else:
            if rng is None:
                rng = np.random.default_rng(0)
            probe_idx = rng.choice(n, size=probes_per_param, replace=False)
        for i in probe_idx:
            num = numeric_grad(value, p.data, int(i), step)
            worst = max(worst, relative_error(float(a.reshape(-1)[int(i)]), num))
    return worst


def count_probes(params: Sequence[T.Tensor], probes_per_param: int | None) -> int:
    if probes_per_param is None:
        return sum(p.data.size for p in params)
    return sum(min(p.data.size, probes_per_param) for p in params)


# -- the CLI suite ------------------------------------------------------------------


def _primitive_checks(rng: np.random.Generator) -> list[tuple[str, float, float]]:
    results = []

    def run(name, build, params, step=1e-4, tol=1e-4):
        err = check_grads(build, params, step=step)
        results.append((name, err, tol))

    a = T.Tensor(rng.normal(size=(3, 4)), requires_grad=True)
    b = T.Tensor(rng.normal(size=(3, 4)), requires_grad=True)
    v = T.Tensor(rng.normal(size=(3, 4)))
    run("add", lambda: ((a + b) * v).sum(), [a, b])
    run("sub", lambda: ((a - b) * v).sum(), [a, b])
    run("mul", lambda: (a * b * v).sum(), [a, b])

    c = T.Tensor(rng.normal(size=(4, 3)) + np.sign(rng.normal(size=(4, 3))), requires_grad=True)
    cw = T.Tensor(rng.normal(size=(4, 3)))
    run("abs", lambda: (c.abs() * cw).sum(), [c])

    d = T.Tensor(rng.uniform(0.5, 2.0, size=(3, 3)), requires_grad=True)
    run("log", lambda: d.log().sum(), [d])
    run("sqrt", lambda: d.sqrt().sum(), [d])

    m1 = T.Tensor(rng.normal(size=(3, 5)), requires_grad=True)
    m2 = T.Tensor(rng.normal(size=(5, 2)), requires_grad=True)
    run("matmul", lambda: T.matmul(m1, m2).sum(), [m1, m2])

    e = T.Tensor(rng.normal(size=(4, 3)), requires_grad=True)
    f = T.Tensor(rng.normal(size=(4, 2)), requires_grad=True)
    w = T.Tensor(rng.normal(size=(4, 5)))
    run("concat", lambda: (T.concat([e, f], axis=1) * w).sum(), [e, f])

    g = T.Tensor(rng.normal(size=(5, 3)), requires_grad=True)
    rw = T.Tensor(rng.normal(size=(3, 5)))
    gw = T.Tensor(rng.normal(size=(4, 3)))
    run("sum-axis", lambda: (g.sum(axis=0) * T.Tensor(np.arange(3.0))).sum(), [g])
    run("mean", lambda: (g.mean(axis=1) * T.Tensor(np.arange(5.0))).sum(), [g])
    run("reshape", lambda: (g.reshape(3, 5) * rw).sum(), [g])
    run("gather-rows", lambda: (T.gather_rows(g, [0, 2, 2, 4]) * gw).sum(), [g])

    sc = T.Tensor(rng.normal(size=6), requires_grad=True)
    rows = [0, 1, 2, 0, 1, 2]
    cols = [1, 2, 0, 1, 0, 2]
    wsc = T.Tensor(rng.normal(size=(3, 3)))
    run(
        "scatter-add",
        lambda: (T.scatter_add_2d(sc, rows, cols, (3, 3)) * wsc).sum(),
        [sc],
    )

    lr = T.Tensor(rng.normal(size=(4, 4)) + 0.05, requires_grad=True)
    run("leaky-relu", lambda: T.leaky_relu(lr, 0.2).sum(), [lr])

    sm = T.Tensor(rng.normal(size=(3, 5)), requires_grad=True)
    vv = T.Tensor(rng.normal(size=(3, 5)))
    run("softmax-rows", lambda: (T.softmax_rows(sm) * vv).sum(), [sm], step=1e-5, tol=1e-6)
    run("log-softmax", lambda: (T.log_softmax_rows(sm) * vv).sum(), [sm])

    cx = T.Tensor(rng.normal(size=(2, 3, 5, 5)), requires_grad=True)
    ck = T.Tensor(rng.normal(size=(4, 3, 3, 3)) * 0.5, requires_grad=True)
    cw = T.Tensor(rng.normal(size=(2, 4, 5, 5)))
    run("conv2d", lambda: (T.conv2d(cx, ck) * cw).sum(), [cx, ck])

    px = T.Tensor(rng.normal(size=(1, 1, 4, 4)), requires_grad=True)
    run("maxpool2", lambda: T.maxpool2(px).sum(), [px], tol=1e-6)

    bx = T.Tensor(rng.normal(size=(4, 2, 2, 2)), requires_grad=True)
    bgamma = T.Tensor(rng.uniform(0.5, 1.5, size=2), requires_grad=True)
    bbeta = T.Tensor(rng.normal(size=2), requires_grad=True)
    bw = T.Tensor(rng.normal(size=(4, 2, 2, 2)))

    def bn_loss():
        state = T.RunningMoments(2)
        return (T.batchnorm(bx, bgamma, bbeta, state, train=True) * bw).sum()

    run("batchnorm", bn_loss, [bx, bgamma, bbeta])

    dx = T.Tensor(rng.normal(size=(4, 6)), requires_grad=True)

    def drop_loss():
        return T.dropout(dx, 0.5, train=True, rng=np.random.default_rng(7)).sum()

    run("dropout", drop_loss, [dx])

    fx = T.Tensor(rng.normal(size=(3, 4)), requires_grad=True)
    fw = T.Tensor(rng.normal(size=(4, 2)), requires_grad=True)
    fb = T.Tensor(rng.normal(size=2), requires_grad=True)
    run("linear", lambda: T.linear(fx, fw, fb).sum(), [fx, fw, fb])

    return results


def _model_checks(rng: np.random.Generator) -> list[tuple[str, float, float]]:
    from fewgraph import models

    results = []
    for name, err, tol in models.gradcheck_cases(rng):
        results.append((name, err, tol))
    return results


def run_suite(module: str | None = None, seed: int = 0) -> list[tuple[str, float, float, bool]]:
    """Run the named check group(s); returns (name, err, tol, passed) rows."""
    rng = np.random.default_rng(seed)
    checks: list[tuple[str, float, float]] = []
    if module in (None, "tensor"):
        checks.extend(_primitive_checks(rng))
    if module in (None, "model"):
        checks.extend(_model_checks(rng))
    if not checks:
        raise ValueError(f"unknown gradcheck module {module!r} (use tensor or model)")
    return [(name, err, tol, err < tol) for name, err, tol in checks]
