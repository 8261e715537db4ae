"""Finite-difference verification of the analytic BPTT gradients.

The reference forward pass is an independent re-implementation evaluated in
``np.longdouble``.  Central differences of a float64 loss with ``eps = 1e-6``
carry round-off near ``1e-16 / 1e-6``, which is too coarse for deep stacks
whose gradient entries are small; extended precision removes that floor.

Biases are switched on and drawn away from zero so that ReLU units rarely sit
on their kink, and probes whose two perturbed passes disagree on any ReLU
sign pattern are skipped (the loss is not differentiable there).
"""

from __future__ import annotations

import itertools
import time
from dataclasses import dataclass
from typing import Callable

import numpy as np

from .cells import StackedNetwork
from .mathkit import Rng

LD = np.longdouble

CELLS = (("vanilla", "tanh"), ("vanilla", "relu"), ("lstm", "tanh"), ("gru", "tanh"))
LAYERS = (1, 2, 6)
HIDDEN = (1, 5, 20, 30)
STEPS = (1, 4, 10)


@dataclass
class CheckResult:
    cell: str
    activation: str
    layers: int
    hidden: int
    K: int
    worst: float
    probes: int
    skipped: int
    tolerance: float

    @property
    def passed(self) -> bool:
        return self.worst < self.tolerance and self.probes > 0

    @property
    def label(self) -> str:
        name = self.cell if self.cell != "vanilla" else f"vanilla-{self.activation}"
        return f"{name} L={self.layers} H={self.hidden} K={self.K}"


def _sig(v):
    return 1.0 / (1.0 + np.exp(-v))


def reference_forward(net: StackedNetwork, xs, masks, params: dict):
    """Extended-precision forward pass; returns outputs and ReLU sign patterns."""
    K, B, _ = xs.shape
    hs = [np.zeros((B, c.n_hidden), LD) for c in net.cells]
    cs = [np.zeros((B, c.n_hidden), LD) for c in net.cells]
    ys, signs = [], []
    for t in range(K):
        inp = xs[t].astype(LD)
        for l, cell in enumerate(net.cells):
            H = cell.n_hidden
            b = params.get(f"layer{l}.b")
            px = inp @ params[f"layer{l}.W_x"].T + (0 if b is None else b)
            ph = hs[l] @ params[f"layer{l}.W_h"].T
            if cell.kind == "vanilla":
                pre = px + ph
                if cell.activation.value == "relu":
                    h = np.maximum(pre, 0)
                    signs.append(pre > 0)
                else:
                    h = np.tanh(pre)
            elif cell.kind == "lstm":
                pre = px + ph
                i, f = _sig(pre[:, :H]), _sig(pre[:, H:2 * H])
                g, o = np.tanh(pre[:, 2 * H:3 * H]), _sig(pre[:, 3 * H:])
                cs[l] = f * cs[l] + i * g
                h = o * np.tanh(cs[l])
            else:
                r = _sig(px[:, :H] + ph[:, :H])
                z = _sig(px[:, H:2 * H] + ph[:, H:2 * H])
                n = np.tanh(px[:, 2 * H:] + r * ph[:, 2 * H:])
                h = (1 - z) * n + z * hs[l]
            hs[l] = h
            inp = h if masks[l] is None else h * masks[l]
        y = inp @ params["head.W"].T
        if "head.b" in params:
            y = y + params["head.b"]
        ys.append(y)
    return np.stack(ys), signs


def check_network(cell: str, activation: str, layers: int, hidden: int, K: int, *,
                  seed: int = 0, eps: float = 1e-6, tolerance: float = 1e-5,
                  probes_per_tensor: int = 4, batch: int = 2,
                  corrupt: Callable[[dict], dict] | None = None) -> CheckResult:
    """Compare ``StackedNetwork.backward`` with central differences.

    ``corrupt`` receives the analytic gradients and may return altered ones;
    it exists so tests can confirm that a broken backward is caught.
    """
    rng = Rng(seed)
    n_in, n_out = 3, 2
    net = StackedNetwork.build(cell, n_in, hidden, layers, n_out, rng, activation=activation,
                               bias=True, dropout=0.3 if layers > 1 else 0.0)
    for name, p in net.params().items():
        if name.endswith(".b"):
            p[:] = rng.uniform(-0.5, 0.5, p.shape)
    xs = rng.uniform(-1.0, 1.0, (K, batch, n_in))
    target = rng.uniform(-1.0, 1.0, (K, batch, n_out))
    ys, trace = net.forward(xs, train_rng=rng)
    grads = net.backward(trace, 2.0 * (ys - target) / ys.size)
    if corrupt is not None:
        grads = corrupt(grads)

    base = {k: v.astype(LD) for k, v in net.params().items()}
    target_ld = target.astype(LD)
    worst, probes, skipped = 0.0, 0, 0
    for name, p in net.params().items():
        picks = np.arange(p.size) if p.size <= probes_per_tensor else \
            rng.permutation(p.size)[:probes_per_tensor]
        for k in picks:
            losses, signs = [], []
            for s in (1, -1):
                q = base[name].reshape(-1).copy()
                q[k] += s * LD(eps)
                y, sg = reference_forward(net, xs, trace.masks, {**base, name: q.reshape(p.shape)})
                losses.append(np.mean((y - target_ld) ** 2))
                signs.append(sg)
            if any(not np.array_equal(a, b) for a, b in zip(*signs)):
                skipped += 1
                continue
            fd = (losses[0] - losses[1]) / (2 * LD(eps))
            a = LD(grads[name].reshape(-1)[k])
            rel = float(abs(a - fd) / max(abs(a), abs(fd), LD(1e-8)))
            worst = max(worst, rel)
            probes += 1
    return CheckResult(cell, activation, layers, hidden, K, worst, probes, skipped, tolerance)


def default_matrix():
    for (cell, act), L, H, K in itertools.product(CELLS, LAYERS, HIDDEN, STEPS):
        yield cell, act, L, H, K


def run_matrix(matrix=None, *, seed: int = 0, tolerance: float = 1e-5,
               corrupt=None, on_result=None) -> list[CheckResult]:
    results = []
    for cell, act, L, H, K in (default_matrix() if matrix is None else matrix):
        res = check_network(cell, act, L, H, K, seed=seed, tolerance=tolerance, corrupt=corrupt)
        results.append(res)
        if on_result is not None:
            on_result(res)
    return results


def format_report(results: list[CheckResult], seconds: float | None = None) -> str:
    lines = [f"{'configuration':<32} {'worst_rel_err':>14} {'probes':>6} {'skipped':>7}  status"]
    for r in results:
        lines.append(f"{r.label:<32} {r.worst:>14.3e} {r.probes:>6} {r.skipped:>7}  "
                     f"{'PASS' if r.passed else 'FAIL'}")
    failed = sum(not r.passed for r in results)
    tail = f"{len(results)} configurations, {failed} failed"
    if seconds is not None:
        tail += f", {seconds:.1f} s"
    lines.append(tail)
    return "\n".join(lines)


def timed_matrix(**kw) -> tuple[list[CheckResult], float]:
    t0 = time.perf_counter()
    results = run_matrix(**kw)
    return results, time.perf_counter() - t0
