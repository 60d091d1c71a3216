"""Built-in verification battery: gradient checks plus numeric oracles.

The gradient suite runs central finite differences against every
differentiable operation over randomized small shapes, plus composite graphs
up to the full per-sample loss.  Input generators keep draws away from relu
and max-pool kinks so the finite-difference probes stay on one linear piece.
The oracle suite re-derives a handful of closed-form fixtures independently.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from . import guidance as G
from .tensor import Tensor, grad_check
from .attention import AttentionParams, attention_forward
from .model import ModelConfig, build
from .trainer import cosine_lr

__all__ = ["CheckResult", "gradient_suite", "oracle_suite", "run_all"]


@dataclass
class CheckResult:
    name: str
    passed: bool
    detail: str


def _away_from_zero(rng, shape, low=0.2, high=2.0):
    """Values with |x| in [low, high]; keeps relu probes off the kink."""
    mag = rng.uniform(low, high, size=shape)
    sign = np.where(rng.random(shape) < 0.5, -1.0, 1.0)
    return mag * sign


def _pool_safe(rng, shape, size, min_gap=1e-2):
    """Random maps whose per-window top-2 values differ by at least min_gap."""
    c, w, h = shape
    while True:
        x = rng.uniform(-1.0, 1.0, size=shape)
        win = (
            x.reshape(c, w // size, size, h // size, size)
            .transpose(0, 1, 3, 2, 4)
            .reshape(c, -1, size * size)
        )
        top2 = np.sort(win, axis=-1)[:, :, -2:]
        if np.all(top2[:, :, 1] - top2[:, :, 0] > min_gap):
            return x


def _unary_cases(rng):
    cases = []
    for fn, name, gen in (
        (T.relu, "relu", lambda s: _away_from_zero(rng, s)),
        (T.sigmoid, "sigmoid", lambda s: rng.normal(size=s)),
        (T.exp, "exp", lambda s: rng.uniform(-1.5, 1.5, size=s)),
        (T.log, "log", lambda s: rng.uniform(0.3, 3.0, size=s)),
        (T.neg, "neg", lambda s: rng.normal(size=s)),
    ):
        for shape in ((5,), (3, 4), (2, 3, 2)):
            x = Tensor(gen(shape), requires_grad=True)
            w = Tensor(rng.normal(size=shape))
            cases.append((f"{name}{shape}", lambda t, fn=fn, w=w: T.reduce_sum(T.hadamard(fn(t), w)), [x]))
    return cases


def _binary_cases(rng):
    cases = []
    shapes = (((4, 3), (4, 3)), ((3, 4), (1, 4)), ((2, 3, 2), (3, 2)), ((5,), ()))
    for fn, name in ((T.add, "add"), (T.sub, "sub"), (T.hadamard, "hadamard"), (T.div, "div")):
        for sx, sy in shapes:
            x = Tensor(rng.normal(size=sx), requires_grad=True)
            ydata = rng.normal(size=sy)
            if name == "div":
                ydata = _away_from_zero(rng, sy, low=0.5, high=2.0)
            y = Tensor(ydata, requires_grad=True)
            w = Tensor(rng.normal(size=np.broadcast_shapes(sx, sy)))
            cases.append(
                (f"{name}{sx}x{sy}", lambda a, b, fn=fn, w=w: T.reduce_sum(T.hadamard(fn(a, b), w)), [x, y])
            )
    return cases


def _structural_cases(rng):
    cases = []
    for m, n, p in ((2, 3, 2), (3, 4, 2), (1, 5, 3)):
        x = Tensor(rng.normal(size=(m, n)), requires_grad=True)
        y = Tensor(rng.normal(size=(n, p)), requires_grad=True)
        w = Tensor(rng.normal(size=(m, p)))
        cases.append((f"matmul{m}x{n}x{p}", lambda a, b, w=w: T.reduce_sum(T.hadamard(T.matmul(a, b), w)), [x, y]))
    for axes, keep in (((0,), False), ((1,), True), (None, False), ((0, 2), False)):
        x = Tensor(rng.normal(size=(2, 3, 2)), requires_grad=True)
        cases.append((f"sum_axes{axes}", lambda t, axes=axes, keep=keep: T.reduce_sum(T.reduce_mean(t, axes, keep) * 2.0), [x]))
    x = Tensor(rng.normal(size=(3, 4)), requires_grad=True)
    w = Tensor(rng.normal(size=(12,)))
    cases.append(("reshape", lambda t, w=w: T.reduce_sum(T.hadamard(T.reshape(t, (12,)), w)), [x]))
    x = Tensor(rng.normal(size=(6,)), requires_grad=True)
    cases.append(("select", lambda t: T.hadamard(T.select(t, 2), 1.5), [x]))
    for axis, shape in ((0, (5,)), (1, (2, 4))):
        x = Tensor(rng.normal(size=shape), requires_grad=True)
        w = Tensor(rng.normal(size=shape))
        cases.append((f"softmax_ax{axis}", lambda t, axis=axis, w=w: T.reduce_sum(T.hadamard(T.softmax(t, axis), w)), [x]))
    return cases


def _conv_pool_cases(rng):
    cases = []
    for cin, cout, w, h, kw, kh, stride, pad in (
        (1, 2, 4, 4, 3, 3, 1, 0),
        (2, 3, 5, 4, 3, 2, 1, 1),
        (2, 2, 6, 6, 3, 3, 2, 1),
        (1, 1, 4, 5, 2, 2, 2, 0),
    ):
        x = Tensor(rng.normal(size=(cin, w, h)), requires_grad=True)
        k = Tensor(rng.normal(size=(cout, cin, kw, kh)), requires_grad=True)
        cases.append(
            (
                f"conv2d_{cin}x{w}x{h}_k{kw}x{kh}s{stride}p{pad}",
                lambda a, b, stride=stride, pad=pad: T.reduce_sum(
                    T.hadamard(T.conv2d(a, b, stride, pad), 0.5)
                ),
                [x, k],
            )
        )
    for c, w, h, size in ((2, 4, 4, 2), (1, 6, 6, 3), (3, 4, 6, 2)):
        x = Tensor(_pool_safe(rng, (c, w, h), size), requires_grad=True)
        wt = Tensor(rng.normal(size=(c, w // size, h // size)))
        cases.append(
            (f"maxpool_{c}x{w}x{h}s{size}", lambda t, size=size, wt=wt: T.reduce_sum(T.hadamard(T.maxpool2d(t, size), wt)), [x])
        )
    return cases


def _composite_cases(rng):
    cases = []
    # conv -> relu -> pool -> matmul chain
    x = Tensor(rng.normal(size=(2, 6, 6)), requires_grad=True)
    k = Tensor(rng.normal(size=(2, 2, 3, 3)), requires_grad=True)
    wmat = Tensor(rng.normal(size=(2, 3)), requires_grad=True)

    def chain(xi, ki, wi):
        conv = T.relu(T.conv2d(xi, ki, stride=1, pad=1))
        pooled = T.maxpool2d(conv, 3)
        flat = T.reshape(pooled, (2, 2 * 2 // 2))
        return T.reduce_sum(T.matmul(flat, wi))

    cases.append(("composite_conv_chain", chain, [x, k, wmat]))

    # attention forward + guidance loss over the channel weights
    c, r = 4, 2
    feats = Tensor(rng.uniform(0.1, 1.0, size=(c, 3, 3)), requires_grad=True)
    fc1 = Tensor(rng.normal(size=(c, c // r)) * 0.7, requires_grad=True)
    fc2 = Tensor(rng.normal(size=(c // r, c)) * 0.7, requires_grad=True)
    target = G.GuidanceTarget.from_beta(rng.normal(size=c), 0)

    def attn_ggam(a, w1, w2):
        params = AttentionParams(fc1=w1, fc2=w2, reduction=r)
        weights, _, _, attended = attention_forward(a, params)
        pooled = T.reduce_sum(attended)
        return T.add(G.ggam_loss(weights, target), T.hadamard(pooled, 0.01))

    cases.append(("attention_ggam", attn_ggam, [feats, fc1, fc2]))

    # cross-entropy gradient
    logits = Tensor(rng.normal(size=(5,)), requires_grad=True)
    cases.append(("cross_entropy", lambda lg: G.cross_entropy(lg, 3), [logits]))
    return cases


def _model_loss_case(seed):
    """Full per-sample objective (CE + lam * guidance) w.r.t. every parameter."""
    config = ModelConfig(
        in_channels=2, width=8, height=8, channels=(4,), reduction=2,
        num_classes=3, seed=seed,
    )
    model = build(config)
    rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence(seed, spawn_key=(7,))))
    image = rng.random((2, 8, 8))
    label = int(rng.integers(0, 3))

    trace0 = model.forward(image, retain_graph=True)
    target = G.gradcam_weights(trace0)

    params = [p for _, p in model.parameters()]

    def objective(*_params):
        trace = model.forward(image, retain_graph=True)
        ce = G.cross_entropy(trace.logits, label)
        ggam = G.ggam_loss(trace.channel_weights, target)
        return T.add(ce, T.hadamard(1.0, ggam))

    return "model_loss", objective, params


def gradient_suite(seed=0, tol=1e-4, eps=1e-5, rounds=2):
    """Run every gradient check case over ``rounds`` randomized redraws."""
    rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence(seed)))
    cases = []
    for rnd in range(rounds):
        for block in (_unary_cases, _binary_cases, _structural_cases, _conv_pool_cases, _composite_cases):
            cases.extend(block(rng))
        cases.append(_model_loss_case(seed + rnd))

    results = []
    for name, builder, inputs in cases:
        report = grad_check(builder, inputs, eps=eps, tol=tol)
        worst = max(report.max_rel_error) if report.max_rel_error else 0.0
        results.append(
            CheckResult(
                name=f"grad:{name}",
                passed=report.passed,
                detail=f"max rel err {worst:.2e}",
            )
        )
    return results


def oracle_suite():
    """Closed-form fixtures checked against independent evaluations."""
    results = []

    def check(name, got, want, tol=1e-9):
        ok = abs(got - want) <= tol
        results.append(CheckResult(f"oracle:{name}", ok, f"got {got!r}, want {want!r}"))

    check("sigmoid_zero", T.sigmoid(Tensor(0.0)).item(), 0.5, 0.0)
    check("exp_one", T.exp(Tensor(1.0)).item(), math.exp(1.0), 1e-12)
    sm = T.softmax(Tensor([0.0, math.log(3.0)]), axis=0)
    check("softmax_closed_form", float(sm.data[1]), 0.75, 1e-12)
    check("kl_identity", G.kl([0.5, 0.5], [0.5, 0.5]), 0.0, 1e-12)
    check(
        "kl_half_vs_eighty",
        G.kl([0.5, 0.5], [0.8, 0.2]),
        0.5 * math.log(0.5 / 0.8) + 0.5 * math.log(0.5 / 0.2),
        1e-9,
    )
    target = G.GuidanceTarget(
        beta=np.zeros(2), beta_squashed=np.array([0.8, 0.2]),
        beta_normalized=np.array([0.8, 0.2]), class_index=0,
    )
    check(
        "ggam_fixture",
        G.ggam_loss(Tensor([0.5, 0.5]), target).item(),
        0.2079441541679836,
        1e-6,
    )
    check(
        "cross_entropy_uniform",
        G.cross_entropy(Tensor(np.zeros(7)), 2).item(),
        math.log(7.0),
        1e-12,
    )
    check("cosine_endpoint", cosine_lr(0, 10, 0.1), 0.1, 0.0)
    up = G.bilinear_upsample(np.array([[0.0, 1.0], [2.0, 3.0]]), 4, 4)
    check("bilinear_center", float(up[1, 2]), 4.0 / 3.0, 1e-12)
    return results


def run_all(seed=0):
    results = gradient_suite(seed=seed) + oracle_suite()
    return results, all(r.passed for r in results)
