"""Central finite-difference gradient checks for every layer kind.

The scalar probe loss is L = 0.5 * sum(y^2); its exact output gradient is y,
so analytic gradients come straight from one backward pass. Finite
differences re-run the same train-mode forward, with batch-norm running
statistics pinned so the probed function is pure.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from coopsim.nn.layers import BatchNorm
from coopsim.nn.network import Network
from coopsim.rng import substream

__all__ = ["GradCheckEntry", "GradCheckReport", "check_gradients"]

GRAD_FLOOR = 1e-6  # relative-error denominator floor for near-zero gradients


@dataclass
class GradCheckEntry:
    layer: int
    name: str
    checked: int
    rel_error: float


@dataclass
class GradCheckReport:
    tolerance: float
    entries: list[GradCheckEntry] = field(default_factory=list)

    @property
    def max_rel_error(self) -> float:
        return max((e.rel_error for e in self.entries), default=0.0)

    @property
    def passed(self) -> bool:
        return self.max_rel_error < self.tolerance

    def summary(self) -> str:
        lines = [
            f"  layer {e.layer:>2} {e.name:<12} n={e.checked:<4} rel={e.rel_error:.3e}"
            for e in self.entries
        ]
        verdict = "PASS" if self.passed else "FAIL"
        lines.append(f"  max rel error {self.max_rel_error:.3e} ({verdict})")
        return "\n".join(lines)


def _loss_and_grad(net: Network, x: np.ndarray):
    y, caches = net.forward(x, train=True)
    loss = 0.5 * float((y * y).sum())
    return loss, y, caches


def check_gradients(
    net: Network,
    x: np.ndarray,
    *,
    step: float = 1e-3,
    tolerance: float = 1e-4,
    samples_per_param: int = 24,
    seed: int = 0,
) -> GradCheckReport:
    """Compare analytic to central-difference gradients.

    Every parameter array and the input are probed; arrays larger than
    `samples_per_param` get a deterministic random subset of entries.
    Relative error per array = max|analytic - fd| / max(max|fd|, floor).
    """
    bn_layers = [l for l in net.encoder + net.head if isinstance(l, BatchNorm)]
    saved_stats = [(l.running_mean.copy(), l.running_var.copy()) for l in bn_layers]

    def pin_stats():
        for layer, (mean, var) in zip(bn_layers, saved_stats):
            layer.running_mean[...] = mean
            layer.running_var[...] = var

    def loss_at() -> float:
        pin_stats()
        loss, _y, _caches = _loss_and_grad(net, x)
        return loss

    # analytic pass
    pin_stats()
    net.zero_grads()
    _loss, y, caches = _loss_and_grad(net, x)
    dx = net.backward(y, caches)

    report = GradCheckReport(tolerance=tolerance)
    rng = substream(seed, "gradcheck")

    def probe(array: np.ndarray, analytic: np.ndarray, layer_idx: int, name: str):
        flat = array.reshape(-1)
        n = flat.size
        if n > samples_per_param:
            idxs = rng.choice(n, size=samples_per_param, replace=False)
        else:
            idxs = np.arange(n)
        fd = np.empty(len(idxs))
        for j, idx in enumerate(idxs):
            orig = flat[idx]
            flat[idx] = orig + step
            hi = loss_at()
            flat[idx] = orig - step
            lo = loss_at()
            flat[idx] = orig
            fd[j] = (hi - lo) / (2.0 * step)
        ana = analytic.reshape(-1)[idxs]
        denom = max(float(np.abs(fd).max(initial=0.0)), GRAD_FLOOR)
        rel = float(np.abs(ana - fd).max(initial=0.0)) / denom
        report.entries.append(GradCheckEntry(layer_idx, name, len(idxs), rel))

    for layer_idx, name, value, grad in net.params():
        probe(value, grad.copy(), layer_idx, name)
    probe(x, dx, -1, "input")
    pin_stats()
    return report
