"""Finite-difference verification of backpropagated gradients.

The scalar objective is a fixed random linear functional of the graph output,
so the check exercises every layer's backward including the softmax Jacobian.
Forward passes recreate the same `Rng` each time, which freezes dropout masks
across the central-difference evaluations; batchnorm buffer updates do not
affect train-mode outputs and are restored afterwards.
"""

from __future__ import annotations

import numpy as np

from .graph import ModelGraph
from .rng import Rng


def grad_check(graph: ModelGraph, x: np.ndarray, eps: float = 1e-5,
               max_coords: int = 2000, seed: int = 0, mode: str = "train") -> float:
    """Max relative error between backprop and central finite differences.

    Runs the graph in float64 (cast in place).  Checks every parameter and
    input coordinate, subsampled to `max_coords` for large graphs.  Relative
    error per coordinate is |g_bp - g_fd| / max(|g_bp|, |g_fd|, 1e-8).
    """
    graph.set_dtype(np.float64)
    x = np.array(x, dtype=np.float64)

    rng = Rng(seed)
    saved_buffers = {name: arr.copy() for name, arr in graph.buffers()}

    def run() -> np.ndarray:
        return graph.forward(x, mode=mode, rng=rng.child(1), check_finite=True)

    try:
        y = run()
        # Small scale keeps finite-difference cancellation noise at
        # analytically-zero-gradient coordinates (e.g. a conv bias feeding
        # batchnorm, which the mean subtraction annihilates) below the 1e-8
        # relative-error floor; errors at nonzero gradients are scale-free.
        weights = rng.child(2).normal(size=y.shape) * 1e-3

        gx = graph.backward(weights.astype(np.float64))
        if gx is None:
            gx = np.zeros_like(x)
        arrays = [(arr, grad.copy() if grad is not None else np.zeros_like(arr))
                  for (_, arr), (_, grad) in zip(graph.parameters(), graph.gradients())]
        arrays.append((x, gx.copy()))

        sizes = np.array([a.size for a, _ in arrays])
        total = int(sizes.sum())
        if total > max_coords:
            picks = np.sort(rng.child(3).permutation(total)[:max_coords])
        else:
            picks = np.arange(total)
        offsets = np.concatenate([[0], np.cumsum(sizes)])

        def objective() -> float:
            return float((run() * weights).sum())

        max_err = 0.0
        for flat in picks:
            which = int(np.searchsorted(offsets, flat, side="right") - 1)
            arr, grad = arrays[which]
            idx = int(flat - offsets[which])
            orig = arr.flat[idx]
            arr.flat[idx] = orig + eps
            f_plus = objective()
            arr.flat[idx] = orig - eps
            f_minus = objective()
            arr.flat[idx] = orig
            g_fd = (f_plus - f_minus) / (2.0 * eps)
            g_bp = float(grad.flat[idx])
            err = abs(g_bp - g_fd) / max(abs(g_bp), abs(g_fd), 1e-8)
            max_err = max(max_err, err)
        return max_err
    finally:
        for name, arr in graph.buffers():
            np.copyto(arr, saved_buffers[name])
