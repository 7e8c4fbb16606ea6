"""MC-dropout depth ensembles, uncertainty maps, and lidar-guided fusion.

Nothing here needs gradients: the teacher consumes the fused depth as a
constant, so every operation works on plain arrays. The m stochastic
passes are independent and could run concurrently against the shared
read-only parameter set.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import numerics as N
from .geometry import CameraConfig, DepthDistribution, ImageFeature, estimate_depth, value_array
from .numerics import ParameterSet, ShapeError, TensorRecord, UsageError
from .numerics.graph import bind_params


@dataclass(frozen=True)
class FusionConfig:
    """Parameters of the reliable-depth fusion rule."""

    theta: float | None = None  # None -> per-batch quantile threshold
    m: int = 5
    dropout_rate: float = 0.3
    quantile: float = 0.7
    criterion: str = "uncertainty"  # or "confidence"

    def __post_init__(self):
        if self.m < 2:
            raise UsageError(f"MC pass count must be >= 2, got {self.m}")
        if not 0.0 < self.dropout_rate < 1.0:
            raise UsageError(f"dropout rate must be in (0, 1), got {self.dropout_rate}")
        if self.theta is not None and self.theta < 0:
            raise UsageError(f"threshold must be >= 0, got {self.theta}")
        if self.criterion not in ("uncertainty", "confidence"):
            raise UsageError(f"unknown fusion criterion {self.criterion!r}")


@dataclass
class UncertaintyMap:
    """Per-pixel-per-bin standard deviation of the MC depth probabilities."""

    tensor: TensorRecord  # (C_D, H, W), entries in [0, 0.5]
    scalar_mean: float

    def pixel_scores(self) -> np.ndarray:
        """Per-pixel reliability score: mean uncertainty over bins."""
        return self.tensor.array.mean(axis=0)


@dataclass
class LidarDepthMap:
    """Sparse one-hot depth observations on the feature grid."""

    tensor: TensorRecord  # (C_D, H, W) one-hot at observed pixels
    mask: np.ndarray  # (H, W) booleans

    def __post_init__(self):
        arr = self.tensor.array
        if arr.shape[1:] != self.mask.shape:
            raise ShapeError(f"lidar grid {arr.shape[1:]} != mask grid {self.mask.shape}")
        sums = arr.sum(axis=0)
        if not np.array_equal(sums[self.mask], np.ones(int(self.mask.sum()))):
            raise ValueError("observed lidar pixels must be exactly one-hot")
        if np.any(sums[~self.mask] != 0):
            raise ValueError("unobserved lidar pixels must be all-zero")


def mc_depth_samples(
    feat: ImageFeature,
    cam: CameraConfig,
    params: ParameterSet | dict,
    cfg: FusionConfig,
    seed: int,
    bin_edges: np.ndarray,
) -> list[DepthDistribution]:
    """m stochastic depth passes with independent hidden-layer dropout masks."""
    leaves = bind_params(params, trainable=False) if isinstance(params, ParameterSet) else params
    samples = []
    for i in range(cfg.m):
        pass_seed = N.derive_seed(seed, "mc", i)
        samples.append(
            estimate_depth(
                feat,
                cam,
                leaves,
                bin_edges,
                dropout_rate=cfg.dropout_rate,
                dropout_seed=pass_seed,
            )
        )
    return samples


def uncertainty_map(samples: list[DepthDistribution]) -> UncertaintyMap:
    """Population standard deviation of the ensemble around its mean."""
    if len(samples) < 2:
        raise UsageError("uncertainty needs at least two samples")
    arrays = [value_array(s.tensor) for s in samples]
    shape = arrays[0].shape
    if any(a.shape != shape for a in arrays):
        raise ShapeError("MC samples disagree in shape")
    stack = np.stack(arrays)
    mu = stack.mean(axis=0)
    std = np.sqrt(((stack - mu) ** 2).mean(axis=0))
    return UncertaintyMap(TensorRecord(std), float(std.mean()))


def ensemble_mean(samples: list[DepthDistribution]) -> DepthDistribution:
    """The predictive distribution: average of the stochastic passes."""
    arrays = [value_array(s.tensor) for s in samples]
    return DepthDistribution(TensorRecord(np.mean(arrays, axis=0)), samples[0].bin_edges)


def confidence_map(pred: DepthDistribution) -> TensorRecord:
    """Per-pixel maximum bin probability."""
    return TensorRecord(pred.probabilities().max(axis=0))


def resolve_theta(cfg: FusionConfig, pixel_scores: np.ndarray) -> float:
    """The fusion threshold: fixed when configured, else a batch quantile."""
    if cfg.theta is not None:
        return float(cfg.theta)
    return float(np.quantile(pixel_scores, cfg.quantile))


def fuse_depth(
    pred: DepthDistribution,
    lidar: LidarDepthMap,
    u: UncertaintyMap,
    theta: float,
) -> DepthDistribution:
    """Keep reliable predictions; replace unreliable observed pixels by lidar.

    A pixel is unreliable when its mean bin uncertainty exceeds ``theta``.
    Unreliable pixels without a lidar return keep the prediction (the
    sparse map cannot supply a substitute there).
    """
    p = pred.probabilities()
    l = lidar.tensor.array
    if p.shape != l.shape:
        raise ShapeError(f"prediction grid {p.shape} != lidar grid {l.shape}")
    if p.shape[1:] != u.tensor.shape[1:]:
        raise ShapeError(f"prediction grid {p.shape} != uncertainty grid {u.tensor.shape}")
    replace = (u.pixel_scores() > theta) & lidar.mask
    fused = np.where(replace[None, :, :], l, p)
    return DepthDistribution(TensorRecord(fused), pred.bin_edges)


def fuse_depth_by_confidence(
    pred: DepthDistribution,
    lidar: LidarDepthMap,
    confidence: TensorRecord,
    threshold: float,
) -> DepthDistribution:
    """Ablation baseline: replace low-confidence pixels instead of uncertain ones."""
    p = pred.probabilities()
    replace = (confidence.array < threshold) & lidar.mask
    fused = np.where(replace[None, :, :], lidar.tensor.array, p)
    return DepthDistribution(TensorRecord(fused), pred.bin_edges)
