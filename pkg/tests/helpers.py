"""Shared test utilities: gradient-error metrics and naive oracles."""

from __future__ import annotations

import numpy as np

from bevadapt.numerics import GradientSet, ParameterSet, TensorRecord


def rel_err(a: np.ndarray, b: np.ndarray, floor: float = 1e-3) -> float:
    """Max elementwise relative error with an absolute floor for tiny values."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    denom = np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)
    return float(np.max(np.abs(a - b) / denom)) if a.size else 0.0


def grad_rel_err(got: GradientSet, want: GradientSet, floor: float = 1e-3) -> float:
    worst = 0.0
    for name in want.names():
        worst = max(worst, rel_err(got[name].array, want[name].array, floor))
    return worst


def params_of(**arrays) -> ParameterSet:
    ps = ParameterSet()
    for name, arr in arrays.items():
        ps.add(name, TensorRecord.of(arr))
    return ps


def naive_avg_pool3d(x: np.ndarray, kernel, stride) -> np.ndarray:
    """Triple-loop average pooling oracle."""
    c, d, h, w = x.shape
    kd, kh, kw = kernel
    sd, sh, sw = stride
    od = (d - kd) // sd + 1
    oh = (h - kh) // sh + 1
    ow = (w - kw) // sw + 1
    out = np.zeros((c, od, oh, ow))
    for a in range(od):
        for b in range(oh):
            for e in range(ow):
                block = x[:, a * sd : a * sd + kd, b * sh : b * sh + kh, e * sw : e * sw + kw]
                out[:, a, b, e] = block.mean(axis=(1, 2, 3))
    return out


def naive_uncertainty(samples: list[np.ndarray]) -> np.ndarray:
    """Two-pass per-entry mean/std loop over an ensemble of equal-shape arrays."""
    m = len(samples)
    shape = samples[0].shape
    flat = [s.reshape(-1) for s in samples]
    n = flat[0].size
    out = np.zeros(n)
    for i in range(n):
        mu = sum(f[i] for f in flat) / m
        var = sum((f[i] - mu) ** 2 for f in flat) / m
        out[i] = var ** 0.5
    return out.reshape(shape)


def naive_js(p: np.ndarray, q: np.ndarray) -> float:
    """Direct-summation Jensen-Shannon divergence in nats."""
    m = (p + q) / 2.0
    total = 0.0
    for pi, mi in zip(p, m):
        if pi > 0:
            total += 0.5 * pi * np.log(pi / mi)
    for qi, mi in zip(q, m):
        if qi > 0:
            total += 0.5 * qi * np.log(qi / mi)
    return float(total)


def naive_transfer(teacher: list[np.ndarray], student: list[np.ndarray]) -> float:
    """Per-space explicit-loop squared-difference transfer penalty."""
    total = 0.0
    for t, s in zip(teacher, student):
        hh, ww = t.shape[-2], t.shape[-1]
        tc = t.reshape(-1, hh, ww)
        sc = s.reshape(-1, hh, ww)
        acc = 0.0
        for y in range(hh):
            for x in range(ww):
                for ch in range(tc.shape[0]):
                    acc += (sc[ch, y, x] - tc[ch, y, x]) ** 2
        total += acc / (hh * ww)
    return float(total)
