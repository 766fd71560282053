"""Finite-difference verification of every differentiable path.

Each check draws a random 64-bit test point away from the non-smooth spots
of its function (relu at 0, min ties, integer sample coordinates of the
bilinear warp, zero end-point error) and compares backprop against central
differences.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import losses as L
from . import tensor as T
from .matte import composite_tensor
from .network import coarse_forward, init_coarse

OP_EPS = 1e-3
OP_TOL = 1e-4
NET_TOL = 1e-3


@dataclass
class CheckResult:
    name: str
    seed: int
    max_rel_error: float
    tol: float

    @property
    def passed(self) -> bool:
        return self.max_rel_error <= self.tol


def away_from_zero(x: np.ndarray, margin: float = 0.05) -> np.ndarray:
    return np.where(np.abs(x) < margin, np.sign(x + 1e-12) * margin + x, x)


def interior_flow(rng: np.random.Generator, h: int, w: int) -> np.ndarray:
    """Flow whose sample points stay inside the image with fractional parts in [0.1, 0.9]."""
    ys, xs = np.mgrid[0:h, 0:w].astype(np.float64)
    tx = rng.integers(0, w - 1, size=(h, w)) + rng.uniform(0.1, 0.9, size=(h, w))
    ty = rng.integers(0, h - 1, size=(h, w)) + rng.uniform(0.1, 0.9, size=(h, w))
    return np.stack([tx - xs, ty - ys])


def _sum_weighted(weights: np.ndarray) -> Callable[[T.Tensor], T.Tensor]:
    # a random linear read-out makes every output element matter
    return lambda out: T.mul(out, weights).sum()


def op_checks(seed: int) -> list[CheckResult]:
    rng = np.random.default_rng(seed)
    res: list[CheckResult] = []

    def add(name, f, x, tol=OP_TOL):
        rep = T.grad_check(f, x, OP_EPS, tol)
        res.append(CheckResult(name, seed, rep.max_rel_error, tol))

    x = rng.uniform(-1, 1, size=(2, 5, 6))
    kern = rng.uniform(-1, 1, size=(3, 2, 3, 3))
    wr = rng.uniform(-1, 1, size=(3, 5, 6))
    wr2 = rng.uniform(-1, 1, size=(3, 3, 3))
    add("conv2d/input", lambda t: _sum_weighted(wr)(T.conv2d(t, T.Tensor(kern))), x)
    add("conv2d/kernel", lambda t: _sum_weighted(wr)(T.conv2d(T.Tensor(x), t)), kern)
    add("conv2d/stride2", lambda t: _sum_weighted(wr2)(T.conv2d(t, T.Tensor(kern), stride=2)), x)
    b = rng.uniform(-1, 1, size=3)
    add("conv2d/bias", lambda t: _sum_weighted(wr)(T.conv2d(T.Tensor(x), T.Tensor(kern), t)), b)

    u = rng.uniform(-1, 1, size=(2, 3, 4))
    wu = rng.uniform(-1, 1, size=(2, 6, 8))
    add("upsample_nearest2x", lambda t: _sum_weighted(wu)(T.upsample_nearest2x(t)), u)

    s = rng.uniform(-1, 1, size=(3, 4, 4))
    ws = rng.uniform(-1, 1, size=s.shape)
    add("channel_softmax", lambda t: _sum_weighted(ws)(T.channel_softmax(t)), s)
    for kind in ("tanh", "sigmoid", "relu"):
        pt = away_from_zero(rng.uniform(-1, 1, size=(2, 3, 3))) if kind == "relu" else rng.uniform(-1, 1, (2, 3, 3))
        wk = rng.uniform(-1, 1, size=pt.shape)
        add(f"activation/{kind}", lambda t, kind=kind, wk=wk: _sum_weighted(wk)(T.activation(t, kind)), pt)

    src = rng.uniform(-1, 1, size=(2, 5, 6))
    flow = interior_flow(rng, 5, 6)
    wb = rng.uniform(-1, 1, size=src.shape)
    add("bilinear_warp/flow", lambda t: _sum_weighted(wb)(T.bilinear_warp(T.Tensor(src), t)), flow)
    add("bilinear_warp/source", lambda t: _sum_weighted(wb)(T.bilinear_warp(t, T.Tensor(flow))), src)

    a = rng.uniform(-1, 1, size=(3, 4))
    bb = a + away_from_zero(rng.uniform(-1, 1, size=a.shape), 0.05)
    add("minimum", lambda t: _sum_weighted(wr[0, :3, :4])(T.minimum(t, T.Tensor(bb))), a)
    return res


def loss_checks(seed: int) -> list[CheckResult]:
    rng = np.random.default_rng(seed + 10_000)
    res: list[CheckResult] = []

    def add(name, f, x):
        rep = T.grad_check(f, x, OP_EPS, OP_TOL)
        res.append(CheckResult(name, seed, rep.max_rel_error, OP_TOL))

    h, w = 6, 5
    # far from 0 and 1, where log curvature would dominate the difference error
    prob = rng.uniform(0.1, 0.9, size=(1, h, w))
    gt_mask = (rng.uniform(size=(1, h, w)) > 0.5).astype(np.float64)
    add("loss/mask", lambda t: L.mask_loss(t, gt_mask), prob)
    c_gt = rng.uniform(0, 1, size=(3, h, w))
    add("loss/filter", lambda t: L.filter_loss(t, c_gt), rng.uniform(0, 1, size=(3, h, w)))
    r_gt = rng.uniform(-3, 3, size=(2, h, w))
    r = r_gt + away_from_zero(rng.uniform(-1, 1, size=(2, h, w)), 0.1)
    add("loss/flow", lambda t: L.flow_loss(t, r_gt), r)
    i_gt = rng.uniform(0, 1, size=(3, h, w))
    add("loss/reconstruction", lambda t: L.reconstruction_loss(t, i_gt), rng.uniform(0, 1, size=(3, h, w)))
    weights = L.CoarseLossWeights()
    add(
        "loss/coarse_total",
        lambda t: L.coarse_total(
            L.mask_loss(t[0:1], gt_mask), L.filter_loss(t[1:4], c_gt), L.flow_loss(t[4:6], r_gt), L.filter_loss(t[1:4], i_gt), weights
        ),
        np.concatenate([prob, rng.uniform(0, 1, size=(3, h, w)), r]),
    )
    return res


def composite_checks(seed: int) -> list[CheckResult]:
    """Compositor and reconstruction loss with respect to filter and flow."""
    rng = np.random.default_rng(seed + 20_000)
    h, w = 6, 7
    bg = rng.uniform(0.1, 0.9, size=(3, h, w))
    mask = rng.uniform(0.2, 0.8, size=(1, h, w))
    flow = interior_flow(rng, h, w)
    warped = T.bilinear_warp(T.Tensor(bg), T.Tensor(flow)).data
    filt = rng.uniform(0.05, 0.95, size=(3, h, w))
    # keep min(C, warp) away from its switching point
    close = np.abs(filt - warped) < 0.05
    filt = np.where(close, np.where(warped > 0.5, warped - 0.1, warped + 0.1), filt)
    target = rng.uniform(0, 1, size=(3, h, w))
    wr = rng.uniform(-1, 1, size=(3, h, w))
    res = []
    for name, f, x, tol in (
        ("composite/filter", lambda t: _sum_weighted(wr)(composite_tensor(T.Tensor(mask), t, T.Tensor(flow), bg)), filt, OP_TOL),
        ("composite/flow", lambda t: _sum_weighted(wr)(composite_tensor(T.Tensor(mask), T.Tensor(filt), t, bg)), flow, OP_TOL),
        ("composite/mask", lambda t: _sum_weighted(wr)(composite_tensor(t, T.Tensor(filt), T.Tensor(flow), bg)), mask, OP_TOL),
        (
            "loss/reconstruction_wrt_flow",
            lambda t: L.reconstruction_loss(composite_tensor(T.Tensor(mask), T.Tensor(filt), t, bg), target),
            flow,
            NET_TOL,
        ),
    ):
        rep = T.grad_check(f, x, OP_EPS, tol)
        res.append(CheckResult(name, seed, rep.max_rel_error, tol))
    return res


def network_check(seed: int, size: int = 16, eps: float = 1e-5) -> CheckResult:
    """Directional check of the full coarse loss through every network weight."""
    rng = np.random.default_rng(seed + 30_000)
    params = init_coarse(seed, depth=4, base_features=4, dtype=np.float64)
    # heads start at zero; give them weight so every branch carries gradient
    for k, v in params.weights.items():
        if ".out." in k:
            v.data = rng.normal(0, 0.1, size=v.shape)
    img = rng.uniform(0, 1, size=(3, size, size))
    bg = rng.uniform(0, 1, size=(3, size, size))
    gt_mask = (rng.uniform(size=(1, size, size)) > 0.5).astype(np.float64)
    gt_filter = rng.uniform(0, 1, size=(3, size, size))
    gt_flow = rng.uniform(-3, 3, size=(2, size, size))
    weights = L.CoarseLossWeights()

    def f():
        pred = coarse_forward(params, img)
        prob = pred.mask_prob()
        recon = composite_tensor(prob, pred.filter, pred.flow, bg)
        return L.coarse_total(
            L.mask_loss(prob, gt_mask),
            L.filter_loss(pred.filter, gt_filter),
            L.flow_loss(pred.flow, gt_flow),
            L.reconstruction_loss(recon, img),
            weights,
        )

    rep = T.directional_grad_check(f, params.tensors(), eps=eps, tol=NET_TOL, n_directions=3, seed=seed)
    return CheckResult("coarse_forward/total_loss", seed, rep.max_rel_error, NET_TOL)


def run_suite(seeds: int = 20, network: bool = True) -> list[CheckResult]:
    results: list[CheckResult] = []
    for seed in range(seeds):
        results += op_checks(seed)
        results += loss_checks(seed)
        results += composite_checks(seed)
        if network:
            results.append(network_check(seed))
    return results


def summarize(results: list[CheckResult]) -> dict[str, dict]:
    out: dict[str, dict] = {}
    for r in results:
        entry = out.setdefault(r.name, {"max_rel_error": 0.0, "tol": r.tol, "seeds": 0, "passed": True})
        entry["max_rel_error"] = max(entry["max_rel_error"], r.max_rel_error)
        entry["seeds"] += 1
        entry["passed"] = entry["passed"] and r.passed
    return out
