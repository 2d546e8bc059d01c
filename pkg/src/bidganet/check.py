"""Invariant and oracle checks, shared by the ``check`` command and the tests.

Each check returns a :class:`CheckResult`; ``value`` is the measured error
or ratio and ``tol`` the bound it was held to.
"""

from __future__ import annotations

import time
from dataclasses import asdict, dataclass
from typing import Callable, Sequence

import numpy as np

from . import oracles
from .attention import DualGuidedAttention, GuidedAttention, dga_fuse, double_norm, ga_forward
from .model import NetworkConfig, build_model
from .nn import (batchnorm, conv2d, dropout, init_parameters, maxpool2, resize_bilinear,
                 upsample_bilinear2)
from .rsu import RSU, RsuConfig
from .tensor import (BranchLog, GradTape, Tensor, concat_channels, l1_normalize_axis, matmul, mean_axes,
                     mul, relu, slice_channels, softmax_axis, sum_all)
from .train import cross_entropy, ohem_ce

GRAD_TOL = 1e-4
EPS = 1e-4


@dataclass
class CheckResult:
    name: str
    passed: bool
    value: float
    tol: float
    seconds: float = 0.0

    def to_dict(self) -> dict:
        return asdict(self)


def _timed(name: str, fn: Callable[[], tuple[bool, float, float]]) -> CheckResult:
    t0 = time.perf_counter()
    ok, value, tol = fn()
    return CheckResult(name, bool(ok), float(value), float(tol), time.perf_counter() - t0)


# gradient checking -------------------------------------------------------------

def grad_check(fn: Callable[..., Tensor], inputs: Sequence[np.ndarray], seed: int = 0,
               indices: int | None = None, eps: float = EPS) -> float:
    """Max relative error between tape gradients and central differences of
    ``sum(fn(*inputs) * r)`` for a fixed random projection ``r``.

    ``indices`` (if given) probes that many random coordinates per input
    instead of all of them.
    """
    arrs = [np.array(a, dtype=np.float64) for a in inputs]
    rng = np.random.default_rng(seed)
    probe = {}

    def scalar(out: Tensor) -> Tensor:
        if "r" not in probe:
            probe["r"] = rng.standard_normal(out.shape)
        return sum_all(mul(out, probe["r"])) if out.size > 1 else out

    leaves = [Tensor(a, requires_grad=True) for a in arrs]
    with GradTape() as tape:
        loss = scalar(fn(*leaves))
    tape.backward(loss)
    worst = 0.0
    for a, leaf in zip(arrs, leaves):
        analytic = leaf.grad if leaf.grad is not None else np.zeros_like(a)
        pick = None
        if indices is not None and a.size > indices:
            pick = rng.choice(a.size, size=indices, replace=False)

        def f():
            return float(scalar(fn(*[Tensor(b) for b in arrs])).data)

        numeric = oracles.central_diff(f, a, eps, pick)
        if pick is not None:
            analytic, numeric = analytic.reshape(-1)[pick], numeric.reshape(-1)[pick]
        worst = max(worst, oracles.rel_error(analytic, numeric))
    return worst


def _module_grad_check(module, forward: Callable[[], Tensor], loss_fn: Callable[[Tensor], Tensor],
                       per_tensor: int, seed: int, eps: float = EPS, pinned: bool = False) -> float:
    """Same comparison for a module's parameters (a sample of coordinates
    in each tensor).

    ``pinned`` evaluates the perturbed passes with the ReLU masks and pool
    winners of the unperturbed one, so the difference quotient measures the
    linear piece backprop differentiates rather than straddling kinks.
    """
    rng = np.random.default_rng(seed)
    params = module.parameters()
    module.zero_grad()
    with GradTape() as tape, BranchLog() as base:
        loss = loss_fn(forward())
    tape.backward(loss)

    def f():
        if not pinned:
            return float(loss_fn(forward()).data)
        with BranchLog(replay=base.choices):
            return float(loss_fn(forward()).data)

    analytic, numeric = [], []
    for p in params:
        k = min(per_tensor, p.size)
        pick = rng.choice(p.size, size=k, replace=False)
        num = oracles.central_diff(f, p.data, eps, pick)
        analytic.append(p.grad.reshape(-1)[pick])
        numeric.append(num.reshape(-1)[pick])
    return oracles.rel_error(np.concatenate(analytic), np.concatenate(numeric))


def op_gradient_checks(seed: int = 0) -> list[CheckResult]:
    """One finite-difference check per differentiable primitive."""
    rng = np.random.default_rng(seed)
    r = lambda *s: rng.standard_normal(s)
    # maxpool inputs get distinct values so no window has a tie
    pool_in = rng.permutation(2 * 3 * 6 * 6).reshape(2, 3, 6, 6) * 0.01
    pool_odd = rng.permutation(1 * 2 * 5 * 7).reshape(1, 2, 5, 7) * 0.01
    gamma, beta = r(3), r(3)
    kinked = r(3, 4)
    kinked[np.abs(kinked) < 0.05] = 0.5
    cases = {
        "conv2d": (lambda x, w, b: conv2d(x, w, b, padding=1), [r(2, 3, 5, 6), r(4, 3, 3, 3), r(4)]),
        "conv2d_stride_dilation": (lambda x, w: conv2d(x, w, None, stride=2, padding=2, dilation=2),
                                   [r(1, 2, 7, 8), r(3, 2, 3, 3)]),
        "conv2d_1x1": (lambda x, w, b: conv2d(x, w, b), [r(2, 4, 3, 3), r(2, 4, 1, 1), r(2)]),
        "maxpool2": (lambda x: maxpool2(x), [pool_in]),
        "maxpool2_ceil": (lambda x: maxpool2(x, ceil_mode=True), [pool_odd]),
        "upsample_bilinear2": (upsample_bilinear2, [r(2, 2, 3, 4)]),
        "resize_bilinear": (lambda x: resize_bilinear(x, 5, 3), [r(1, 2, 3, 4)]),
        "batchnorm_train": (lambda x, g, b: batchnorm(x, g, b, Tensor(np.zeros(3)), Tensor(np.ones(3)),
                                                      training=True), [r(2, 3, 4, 4), gamma, beta]),
        "batchnorm_eval": (lambda x, g, b: batchnorm(x, g, b, Tensor(np.full(3, 0.2)),
                                                     Tensor(np.full(3, 1.5)), training=False),
                           [r(2, 3, 4, 4), gamma, beta]),
        "dropout": (lambda x: dropout(x, 0.3, True, seed=7), [r(2, 3, 4, 4)]),
        "relu": (relu, [kinked]),
        "matmul": (matmul, [r(2, 5, 4), r(4, 3)]),
        "softmax": (lambda x: softmax_axis(x, -2), [r(6, 4)]),
        "l1_normalize": (lambda x: l1_normalize_axis(x, -1), [np.abs(r(5, 4)) + 0.1]),
        "mean_axes": (lambda x: mean_axes(x, (2, 3)), [r(2, 3, 4, 5)]),
        "concat_slice": (lambda a, b: slice_channels(concat_channels([a, b]), 1, 4),
                         [r(1, 2, 3, 3), r(1, 3, 3, 3)]),
    }
    out = []
    for name, (fn, inputs) in cases.items():
        out.append(_timed(f"grad:{name}", lambda: _bound(grad_check(fn, inputs, seed))))
    return out


def _bound(err: float, tol: float = GRAD_TOL):
    return err < tol, err, tol


def attention_gradient_check(seed: int = 0) -> CheckResult:
    rng = np.random.default_rng(seed)

    def fn(f, mk, mv):
        ga = GuidedAttention(5, 3, 4, dropout_rate=0.0)
        ga.m_k, ga.m_v = mk, mv
        return ga_forward(f, ga)

    def dn(a):
        return double_norm(a)

    def run():
        e1 = grad_check(fn, [rng.standard_normal((9, 5)), rng.standard_normal((4, 5)),
                             rng.standard_normal((4, 3))], seed)
        e2 = grad_check(dn, [rng.standard_normal((7, 4))], seed)
        return _bound(max(e1, e2))

    return _timed("grad:double_norm+ga_forward", run)


def rsu_gradient_check(seed: int = 0) -> CheckResult:
    block = RSU(RsuConfig(4, 2, 2, 3), dtype=np.float64)
    init_parameters(block, seed)
    x = np.random.default_rng(seed).standard_normal((2, 2, 8, 8))

    def run():
        e_x = grad_check(lambda t: block(t), [x], seed)
        r = np.random.default_rng(seed + 1).standard_normal((2, 3, 8, 8))
        e_p = _module_grad_check(block, lambda: block(Tensor(x)),
                                 lambda y: sum_all(mul(y, r)), 4, seed)
        return _bound(max(e_x, e_p))

    return _timed("grad:rsu4_toy", run)


def dga_gradient_check(seed: int = 0) -> CheckResult:
    block = DualGuidedAttention(2, 3, s=4, dropout_rate=0.1, dtype=np.float64)
    init_parameters(block, seed)
    rng = np.random.default_rng(seed)
    for p in (block.ga_hi, block.ga_lo):
        p.m_k.data = rng.standard_normal(p.m_k.shape)
        p.m_v.data = rng.standard_normal(p.m_v.shape)
    f_h, f_l = rng.standard_normal((2, 2, 4, 4)), rng.standard_normal((2, 3, 2, 2))

    def run():
        e_in = grad_check(lambda a, b: dga_fuse(a, b, block, training=True, seed=3), [f_h, f_l], seed)
        r = rng.standard_normal((2, 5, 4, 4))
        e_p = _module_grad_check(block, lambda: dga_fuse(Tensor(f_h), Tensor(f_l), block, True, 3),
                                 lambda y: sum_all(mul(y, r)), 6, seed)
        return _bound(max(e_in, e_p))

    return _timed("grad:dga_fuse_toy", run)


def ohem_gradient_check(seed: int = 0) -> CheckResult:
    rng = np.random.default_rng(seed)
    logits = rng.standard_normal((2, 4, 5, 5)) * 2
    labels = rng.integers(0, 4, size=(2, 5, 5))
    labels[0, 0, :2] = 255

    def run():
        e1 = grad_check(lambda z: ohem_ce(z, labels, ohem=True, thresh=0.7, min_kept=0.25),
                        [logits], seed)
        e2 = grad_check(lambda z: cross_entropy(z, labels), [logits], seed)
        return _bound(max(e1, e2))

    return _timed("grad:ohem_ce", run)


def end_to_end_gradient_check(seed: int = 0, per_tensor: int = 1, size: int = 64,
                              pinned: bool = True, batch: int = 2,
                              training: bool = False) -> CheckResult:
    """Light network in 64-bit, plain CE on a 2-image batch, a sample of
    coordinates from every parameter tensor.

    At this size almost every eps-step in an early layer flips some ReLU or
    pool winner, so by default the perturbed passes are pinned to the base
    pass's branch choices (``pinned=False`` gives the raw stencil). BN runs
    on running statistics by default: in training mode the deepest RSU maps
    are 1x1, BN then normalizes a handful of numbers and is nearly a step,
    which swamps an eps of 1e-4. Batch-statistic BN and dropout have their
    own op checks.
    """
    model = build_model(NetworkConfig(version="light", num_classes=3, seed=seed)).astype(np.float64)
    model.train(training)
    rng = np.random.default_rng(seed)
    x = Tensor(rng.standard_normal((batch, 3, size, size)))
    y = rng.integers(0, 3, size=(batch, size, size))

    def run():
        err = _module_grad_check(model, lambda: model(x, seed=5),
                                 lambda z: cross_entropy(z, y), per_tensor, seed, pinned=pinned)
        return _bound(err)

    name = "grad:end_to_end_light" + ("" if pinned else "_unpinned")
    return _timed(name, run)


# forward oracles ----------------------------------------------------------------

def conv_oracle_check(cases: int = 100, seed: int = 0, tol: float = 1e-5) -> CheckResult:
    def run():
        rng = np.random.default_rng(seed)
        worst = 0.0
        for _ in range(cases):
            n, ci, co = rng.integers(1, 3), rng.integers(1, 5), rng.integers(1, 5)
            k = int(rng.choice([1, 3]))
            stride, dil = int(rng.integers(1, 3)), int(rng.integers(1, 3))
            pad = int(rng.integers(0, 3))
            h, w = rng.integers(dil * (k - 1) + 1, 10, size=2)
            x = rng.standard_normal((n, ci, h, w)).astype(np.float32)
            wt = rng.standard_normal((co, ci, k, k)).astype(np.float32)
            b = rng.standard_normal(co).astype(np.float32) if rng.random() < 0.5 else None
            got = conv2d(Tensor(x), Tensor(wt), None if b is None else Tensor(b),
                         stride=stride, padding=pad, dilation=dil).data
            ref = oracles.conv2d_direct(x, wt, b, stride, pad, dil)
            scale = max(np.abs(ref).max(), 1e-12)
            worst = max(worst, float(np.abs(got - ref).max() / scale))
        return worst < tol, worst, tol

    return _timed("oracle:conv2d", run)


def attention_oracle_check(instances: int = 100, seed: int = 0) -> list[CheckResult]:
    rng = np.random.default_rng(seed)
    row_err, formula_err = 0.0, 0.0
    t0 = time.perf_counter()
    for _ in range(instances):
        n, d, s = int(rng.integers(1, 65)), int(rng.integers(1, 17)), int(rng.integers(1, 9))
        ga = GuidedAttention(d, d, s, dropout_rate=0.1, dtype=np.float64)
        ga.m_k.data = rng.standard_normal((s, d))
        ga.m_v.data = rng.standard_normal((s, d))
        f = rng.standard_normal((n, d))
        a = ga.attention_map(Tensor(f)).data
        row_err = max(row_err, float(np.abs(a.sum(axis=-1) - 1).max()))
        got = ga_forward(Tensor(f), ga).data
        ref = oracles.guided_attention_direct(f, ga.m_k.data, ga.m_v.data)
        formula_err = max(formula_err, float(np.abs(got - ref).max()))
    dt = time.perf_counter() - t0
    return [CheckResult("attention:row_sums", row_err <= 1e-5, row_err, 1e-5, dt),
            CheckResult("attention:formula_oracle", formula_err <= 1e-10, formula_err, 1e-10, dt)]


def rsu_shape_check(sizes=(64, 40, 33)) -> CheckResult:
    def run():
        bad = 0
        for l in (4, 5, 6, 7):
            block = RSU(RsuConfig(l, 3, 4, 5))
            init_parameters(block, l)
            for s in sizes:
                x = Tensor(np.random.default_rng(s).standard_normal((1, 3, s, s + 8)))
                if block(x).shape != (1, 5, s, s + 8):
                    bad += 1
        return bad == 0, bad, 0

    return _timed("shape:rsu_preserves_size", run)


def ga_scaling_check(runs: int = 20) -> list[CheckResult]:
    from .bench import ga_scaling_ratio, naive_scaling_ratio

    t0 = time.perf_counter()
    ga = ga_scaling_ratio(runs=runs)
    t1 = time.perf_counter()
    naive = naive_scaling_ratio(runs=runs)
    t2 = time.perf_counter()
    return [CheckResult("scaling:ga_linear", 2.5 <= ga["ratio"] <= 6.0, ga["ratio"], 6.0, t1 - t0),
            CheckResult("scaling:naive_quadratic", naive["ratio"] >= 10, naive["ratio"], 10.0, t2 - t1)]


def run_all(seed: int = 0, quick: bool = False) -> list[CheckResult]:
    """The whole suite; ``quick`` skips the end-to-end gradient and the
    timing probes."""
    results = op_gradient_checks(seed)
    results += [attention_gradient_check(seed), rsu_gradient_check(seed),
                dga_gradient_check(seed), ohem_gradient_check(seed)]
    if not quick:
        results.append(end_to_end_gradient_check(seed))
    results.append(conv_oracle_check(seed=seed))
    results += attention_oracle_check(seed=seed)
    results.append(rsu_shape_check())
    if not quick:
        results += ga_scaling_check()
    return results
