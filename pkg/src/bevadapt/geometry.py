"""Multi-view BEV detection pipeline.

Per view: encode the image to features, predict a per-pixel categorical
depth distribution conditioned on the camera intrinsics, lift features
into a (channel, depth-bin, H, W) voxel grid via the pixelwise outer
product, sum the views into a shared grid, average-pool to a BEV feature,
decode it with learnable queries through scaled dot-product attention,
and score detections with a dense per-cell head (occupancy, center
offset, class).

All operations compose autodiff nodes, so the supervised loss is
differentiable end to end; passing frozen parameters instead yields a
pure numpy forward for teacher-side evaluation.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from . import numerics as N
from .numerics import Node, ParameterSet, ShapeError, TensorRecord
from .numerics.graph import bind_params

Value = Node | TensorRecord | np.ndarray


def as_node(value: Value, name: str | None = None) -> Node:
    if isinstance(value, Node):
        return value
    return N.constant(value, name=name)


def value_array(value: Value) -> np.ndarray:
    if isinstance(value, Node):
        return value.data
    if isinstance(value, TensorRecord):
        return value.array
    return np.asarray(value, dtype=np.float64)


@dataclass(frozen=True)
class CameraConfig:
    """Pinhole intrinsics for one view."""

    intrinsics: np.ndarray  # (3, 3)
    view_index: int = 0

    def __post_init__(self):
        k = np.asarray(self.intrinsics, dtype=np.float64)
        if k.shape != (3, 3):
            raise ShapeError(f"intrinsics must be 3x3, got {k.shape}")
        if k[0, 0] <= 0 or k[1, 1] <= 0:
            raise ValueError("focal entries must be positive")
        if abs(np.linalg.det(k)) < 1e-12:
            raise ValueError("intrinsics must be invertible")
        object.__setattr__(self, "intrinsics", k)

    def conditioning(self) -> np.ndarray:
        """Flattened intrinsics normalised by fx, the depth-net conditioning vector."""
        return (self.intrinsics / self.intrinsics[0, 0]).reshape(9)


@dataclass(frozen=True)
class ModelDims:
    """Architecture hyperparameters shared by every model instance."""

    c_i: int = 16
    c_d: int = 8
    depth_hidden: int = 32
    grid_h: int = 3
    grid_w: int = 6
    n_classes: int = 4
    image_hw: tuple[int, int] = (16, 32)
    pool_kernel: tuple[int, int, int] = (2, 2, 2)
    pool_stride: tuple[int, int, int] = (2, 2, 2)
    depth_min: float = 2.0
    depth_max: float = 20.0
    embed_dim: int = 256
    disc_hidden: int = 32

    @property
    def n_queries(self) -> int:
        return self.grid_h * self.grid_w

    @property
    def feature_hw(self) -> tuple[int, int]:
        return self.image_hw[0] // 2, self.image_hw[1] // 2

    @property
    def bev_shape(self) -> tuple[int, int, int]:
        h, w = self.feature_hw
        return tuple(
            N.pooled_extent(e, k, s)
            for e, k, s in zip((self.c_d, h, w), self.pool_kernel, self.pool_stride)
        )

    @property
    def n_bev_cells(self) -> int:
        d, h, w = self.bev_shape
        return d * h * w

    @property
    def bin_edges(self) -> np.ndarray:
        return np.linspace(self.depth_min, self.depth_max, self.c_d + 1)

    def depth_to_bin(self, depth: np.ndarray) -> np.ndarray:
        """Bucket metric depths into [0, c_d); values are clipped to range."""
        idx = np.searchsorted(self.bin_edges, depth, side="right") - 1
        return np.clip(idx, 0, self.c_d - 1)


@dataclass
class ImageFeature:
    tensor: Value  # (C_I, H, W)

    @property
    def shape(self):
        return value_array(self.tensor).shape


@dataclass
class DepthDistribution:
    """Per-pixel categorical distribution over depth bins."""

    tensor: Value  # (C_D, H, W)
    bin_edges: np.ndarray

    def __post_init__(self):
        arr = value_array(self.tensor)
        if arr.ndim != 3:
            raise ShapeError(f"depth distribution must be (C_D,H,W), got {arr.shape}")
        if len(self.bin_edges) != arr.shape[0] + 1:
            raise ShapeError("bin_edges must have C_D + 1 entries")
        if np.any(np.diff(self.bin_edges) <= 0):
            raise ValueError("bin_edges must be strictly increasing")

    def probabilities(self) -> np.ndarray:
        return value_array(self.tensor)


@dataclass
class VoxelFeature:
    tensor: Value  # (C_I, C_D, H, W)


@dataclass
class BEVFeature:
    tensor: Value  # (C_I, C'_D, H', W')


@dataclass
class DetectionSet:
    """Dense per-cell detection scores on the (grid_h, grid_w) BEV grid.

    The raw logits ride along when the set came out of the detection
    head; the loss prefers them because their gradients stay alive where
    the probabilities saturate in float64.
    """

    occupancy: Value  # (n_q,) in [0, 1]
    offsets: Value  # (n_q, 2) cell units
    class_scores: Value  # (n_q, n_classes), rows sum to 1
    grid: tuple[int, int]
    occ_logits: Value | None = None
    cls_logits: Value | None = None

    def to_arrays(self) -> "DetectionSet":
        return DetectionSet(
            occupancy=TensorRecord(value_array(self.occupancy).copy()),
            offsets=TensorRecord(value_array(self.offsets).copy()),
            class_scores=TensorRecord(value_array(self.class_scores).copy()),
            grid=self.grid,
        )


@dataclass
class CellLabels:
    """Rasterised ground truth (or pseudo labels) on the BEV grid."""

    occupancy: np.ndarray  # (n_q,) of {0, 1}
    offsets: np.ndarray  # (n_q, 2)
    class_onehot: np.ndarray  # (n_q, n_classes)
    grid: tuple[int, int]

    @classmethod
    def from_objects(
        cls,
        cells: np.ndarray,
        offsets: np.ndarray,
        classes: np.ndarray,
        grid: tuple[int, int],
        n_classes: int,
    ) -> "CellLabels":
        gh, gw = grid
        n_q = gh * gw
        occ = np.zeros(n_q)
        off = np.zeros((n_q, 2))
        onehot = np.zeros((n_q, n_classes))
        for (row, col), delta, cat in zip(
            np.asarray(cells, dtype=int).reshape(-1, 2), np.asarray(offsets).reshape(-1, 2), classes
        ):
            if not (0 <= row < gh and 0 <= col < gw):
                raise ValueError(f"label cell ({row}, {col}) outside grid {grid}")
            idx = row * gw + col
            occ[idx] = 1.0
            off[idx] = delta
            onehot[idx] = 0.0
            onehot[idx, int(cat)] = 1.0
        return cls(occ, off, onehot, grid)

    def occupied_count(self) -> int:
        return int(self.occupancy.sum())

    def categories_present(self) -> np.ndarray:
        """Boolean (n_classes,) flags of categories with at least one cell."""
        return (self.class_onehot * self.occupancy[:, None]).sum(axis=0) > 0


def init_model_params(dims: ModelDims, seed: int) -> ParameterSet:
    """Gaussian-initialised parameter set covering the full pipeline.

    Includes the detection pipeline, the three per-space embedding MLPs,
    and the shared prototype MLP so teacher and student share one key set.
    """
    ps = ParameterSet()

    def dense(name: str, fan_in: int, fan_out: int, scale: float | None = None):
        rng = N.make_rng(seed, "init", name)
        std = scale if scale is not None else (1.0 / np.sqrt(fan_in))
        ps.add(f"{name}.w", TensorRecord(std * rng.standard_normal((fan_in, fan_out))))
        ps.add(f"{name}.b", TensorRecord.zeros((fan_out,)))

    dense("enc.patch", 12, dims.c_i)
    # Wider than 1/sqrt(fan_in): lifted voxel features shrink by the depth
    # softmax (1/C_D per bin), and attention scores need O(1) spread to
    # break the uniform-attention cold start.
    dense("enc.out", dims.c_i, dims.c_i, scale=4.0 / np.sqrt(dims.c_i))
    dense("dep.hidden", dims.c_i + 9, dims.depth_hidden)
    dense("dep.out", dims.depth_hidden, dims.c_d)
    rng_q = N.make_rng(seed, "init", "dec.queries")
    ps.add("dec.queries", TensorRecord(rng_q.standard_normal((dims.n_queries, dims.c_i))))
    rng_pos = N.make_rng(seed, "init", "dec.pos")
    ps.add("dec.pos", TensorRecord(rng_pos.standard_normal((dims.n_bev_cells, dims.c_i))))
    dense("dec.proj", dims.c_i, dims.c_i)
    # Detection heads start almost silent with a low-occupancy prior bias:
    # early gradients then shape the heads before they can slam the
    # encoder into the dead-relu regime.
    dense("head.occ", dims.c_i, 1, scale=0.01)
    dense("head.off", dims.c_i, 2, scale=0.01)
    dense("head.cls", dims.c_i, dims.n_classes, scale=0.01)
    ps.entries["head.occ.b"] = TensorRecord.full((1,), -2.5)
    for space in ("image", "voxel", "bev"):
        dense(f"emb.{space}.l1", dims.c_i, dims.embed_dim)
        dense(f"emb.{space}.l2", dims.embed_dim, dims.embed_dim)
    dense("emb.shared", 3 * dims.embed_dim, dims.embed_dim)
    return ps


def init_discriminator_params(dims: ModelDims, seed: int) -> ParameterSet:
    ps = ParameterSet()
    rng1 = N.make_rng(seed, "disc", "hidden")
    rng2 = N.make_rng(seed, "disc", "out")
    ps.add(
        "disc.hidden.w",
        TensorRecord(rng1.standard_normal((dims.embed_dim, dims.disc_hidden)) / np.sqrt(dims.embed_dim)),
    )
    ps.add("disc.hidden.b", TensorRecord.zeros((dims.disc_hidden,)))
    ps.add(
        "disc.out.w",
        TensorRecord(rng2.standard_normal((dims.disc_hidden, 1)) / np.sqrt(dims.disc_hidden)),
    )
    ps.add("disc.out.b", TensorRecord.zeros((1,)))
    return ps


def _pixels_first(x: Node) -> Node:
    """(C, H, W) -> (H*W, C)."""
    c, h, w = x.shape
    return N.reshape(N.moveaxis(x, 0, 2), (h * w, c))


def _channels_first(x: Node, h: int, w: int) -> Node:
    """(H*W, C) -> (C, H, W)."""
    c = x.shape[1]
    return N.moveaxis(N.reshape(x, (h, w, c)), 2, 0)


def encode_image(image: Value, params: Mapping[str, Node], view: CameraConfig) -> ImageFeature:
    """Stride-2 patch embedding followed by relu and a pointwise linear layer."""
    img = as_node(image, name=f"image{view.view_index}")
    if img.data.ndim != 3 or img.shape[0] != 3:
        raise ShapeError(f"image must be (3, H, W), got {img.shape}")
    _, h0, w0 = img.shape
    if h0 % 2 or w0 % 2:
        raise ShapeError(f"image extents must be even for the stride-2 encoder, got {img.shape}")
    h, w = h0 // 2, w0 // 2
    patches = N.reshape(img, (3, h, 2, w, 2))
    patches = N.moveaxis(patches, (0, 1, 2, 3, 4), (2, 0, 3, 1, 4))
    patches = N.reshape(patches, (h * w, 12))
    hidden = N.relu(N.linear(patches, params["enc.patch.w"], params["enc.patch.b"]))
    out = N.linear(hidden, params["enc.out.w"], params["enc.out.b"])
    return ImageFeature(_channels_first(out, h, w))


def estimate_depth(
    feat: ImageFeature,
    cam: CameraConfig,
    params: Mapping[str, Node],
    bin_edges: np.ndarray,
    dropout_rate: float = 0.0,
    dropout_seed: int | None = None,
) -> DepthDistribution:
    """Per-pixel softmax over depth bins, conditioned on camera intrinsics.

    The intrinsics enter as a 9-entry vector concatenated to each pixel's
    channel vector. An optional dropout mask on the hidden layer is the
    stochastic injection point for MC sampling.
    """
    x = as_node(feat.tensor)
    c, h, w = x.shape
    pixels = _pixels_first(x)
    cond = np.tile(cam.conditioning(), (h * w, 1))
    joined = N.concat([pixels, N.constant(cond, name="intrinsics")], axis=1)
    hidden = N.relu(N.linear(joined, params["dep.hidden.w"], params["dep.hidden.b"]))
    if dropout_rate > 0.0:
        if dropout_seed is None:
            raise N.UsageError("dropout on the depth net needs an explicit seed")
        hidden = N.dropout(hidden, dropout_rate, dropout_seed)
    logits = N.linear(hidden, params["dep.out.w"], params["dep.out.b"])
    probs = N.softmax(logits, axis=1)
    return DepthDistribution(_channels_first(probs, h, w), np.asarray(bin_edges, dtype=np.float64))


def lift_to_voxel(feat: ImageFeature, depth: DepthDistribution) -> VoxelFeature:
    """voxel[c, d, h, w] = feat[c, h, w] * depth[d, h, w]."""
    f = as_node(feat.tensor)
    d = as_node(depth.tensor)
    if f.shape[1:] != d.shape[1:]:
        raise ShapeError(f"feature grid {f.shape[1:]} != depth grid {d.shape[1:]}")
    return VoxelFeature(N.pixel_outer(f, d))


def pool_to_bev(
    vox: VoxelFeature, kernel: Sequence[int], stride: Sequence[int]
) -> BEVFeature:
    """Strided 3D average pooling; extents follow floor((e - k) / s) + 1."""
    return BEVFeature(N.avg_pool3d(as_node(vox.tensor), kernel, stride))


def decode_bev(
    bev: BEVFeature,
    queries: Value,
    params: Mapping[str, Node],
    with_attention: bool = False,
):
    """Scaled dot-product attention of queries over flattened BEV cells.

    The pooled depth axis is flattened into the cell axis here; each cell
    contributes one C_I-dim vector. When the parameter set carries
    ``dec.pos``, a learned per-cell positional tag is added to the
    attention keys (values stay the raw cells, so uniform attention still
    averages the cells themselves). A final linear projection mixes the
    attended vector per query.
    """
    b = as_node(bev.tensor)
    q = as_node(queries)
    c_i = b.shape[0]
    if q.data.ndim != 2 or q.shape[1] != c_i:
        raise ShapeError(f"queries must be (n_q, {c_i}), got {q.shape}")
    n_cells = int(np.prod(b.shape[1:], dtype=int))
    cells_t = N.reshape(b, (c_i, n_cells))
    keys_t = cells_t
    if "dec.pos" in params:
        pos = params["dec.pos"]
        if pos.shape != (n_cells, c_i):
            raise ShapeError(
                f"positional table {pos.shape} does not match {n_cells} BEV cells "
                f"of width {c_i}; model dims disagree with the input geometry"
            )
        keys_t = N.add(cells_t, N.moveaxis(pos, 0, 1))
    scores = N.mul(N.linear(q, keys_t), 1.0 / np.sqrt(c_i))
    attn = N.softmax(scores, axis=1)
    cells = N.moveaxis(cells_t, 0, 1)  # values: (n_cells, c_i)
    attended = N.linear(attn, cells)
    decoded = N.linear(attended, params["dec.proj.w"], params["dec.proj.b"])
    if with_attention:
        return decoded, attn
    return decoded


def detect(decoded: Value, params: Mapping[str, Node], grid: tuple[int, int]) -> DetectionSet:
    """Per-cell occupancy (sigmoid), center offsets, and class softmax."""
    x = as_node(decoded)
    n_q = x.shape[0]
    if n_q != grid[0] * grid[1]:
        raise ShapeError(f"{n_q} decoded cells do not tile grid {grid}")
    occ_logits = N.reshape(N.linear(x, params["head.occ.w"], params["head.occ.b"]), (n_q,))
    cls_logits = N.linear(x, params["head.cls.w"], params["head.cls.b"])
    occ = N.sigmoid(occ_logits)
    off = N.linear(x, params["head.off.w"], params["head.off.b"])
    cls = N.softmax(cls_logits, axis=1)
    return DetectionSet(
        occupancy=occ,
        offsets=off,
        class_scores=cls,
        grid=grid,
        occ_logits=occ_logits,
        cls_logits=cls_logits,
    )


def supervised_loss(pred: DetectionSet, truth: CellLabels) -> Node:
    """Occupancy BCE over all cells + offset SSE and class NLL on occupied cells.

    Uses the logits carried by the detection set when present (gradients
    survive probability saturation); falls back to the probabilities for
    detection sets assembled from raw scores.
    """
    if pred.grid != truth.grid:
        raise ShapeError(f"prediction grid {pred.grid} != label grid {truth.grid}")
    if pred.occ_logits is not None:
        occ_term = N.bce_logits(as_node(pred.occ_logits), truth.occupancy, reduction="sum")
    else:
        occ_term = N.bce(as_node(pred.occupancy), truth.occupancy, reduction="sum")
    off = as_node(pred.offsets)
    mask2 = np.repeat(truth.occupancy[:, None], 2, axis=1)
    diff = N.add(off, N.constant(-truth.offsets))
    off_term = N.tsum(N.mul(N.mul(diff, diff), N.constant(mask2)))
    weights = truth.class_onehot * truth.occupancy[:, None]
    if pred.cls_logits is not None:
        logp = N.log_softmax(as_node(pred.cls_logits), axis=1)
    else:
        logp = N.log(as_node(pred.class_scores), eps=1e-7)
    cls_term = N.mul(N.tsum(N.mul(logp, N.constant(weights))), -1.0)
    return N.add(N.add(occ_term, off_term), cls_term, name="supervised_loss")


def substitute_lidar_depth(depth: DepthDistribution, lidar) -> DepthDistribution:
    """Replace the predicted distribution with lidar one-hots where observed.

    Differentiable in the prediction at unobserved pixels. Used both as a
    training-time augmentation (so substituted columns are native to the
    detector) and by the lidar fusion rule's replacement branch.
    """
    mask = lidar.mask.astype(np.float64)[None, :, :]
    d = as_node(depth.tensor)
    if mask.shape[1:] != d.shape[1:]:
        raise ShapeError(f"lidar grid {mask.shape[1:]} != depth grid {d.shape[1:]}")
    keep = N.mul(d, N.constant(np.repeat(1.0 - mask, d.shape[0], axis=0)))
    mixed = N.add(keep, N.constant(lidar.tensor.array))
    return DepthDistribution(mixed, depth.bin_edges)


def depth_supervision_loss(depths: Sequence[DepthDistribution], lidars: Sequence) -> Node:
    """Negative log-likelihood of lidar depth bins under the predicted bins.

    Averaged over observed pixels across views. Anchors the depth head to
    metric bins the way the underlying detector's training does; without
    it the depth convention is arbitrary and lidar-guided fusion would
    fight the model instead of helping it.
    """
    total: Node | None = None
    observed = 0
    for depth, lidar in zip(depths, lidars):
        onehot = lidar.tensor.array
        observed += int(lidar.mask.sum())
        logp = N.log(as_node(depth.tensor), eps=1e-12)
        term = N.tsum(N.mul(logp, N.constant(onehot)))
        total = term if total is None else N.add(total, term)
    if total is None or observed == 0:
        return N.constant(0.0)
    return N.mul(total, -1.0 / observed)


@dataclass
class ForwardOutputs:
    """Everything a single multi-view pass produces, for losses and pooling."""

    image_feats: list[Node]
    depths: list[DepthDistribution]
    voxel: Node  # view-summed (C_I, C_D, H, W)
    bev: Node  # (C_I, C'_D, H', W')
    decoded: Node  # (n_q, C_I)
    det: DetectionSet
    feature_hw: tuple[int, int] = field(default=(0, 0))


def detection_forward(
    params: ParameterSet | Mapping[str, Node],
    images: Sequence[Value],
    cams: Sequence[CameraConfig],
    dims: ModelDims,
    depth_override: Sequence[DepthDistribution] | None = None,
    depth_transform=None,
    dropout_rate: float = 0.0,
    dropout_seed: int | None = None,
    trainable: bool = True,
) -> ForwardOutputs:
    """Full multi-view pass; views are lifted independently then summed.

    ``depth_transform(depth, view_index)`` post-processes each predicted
    depth distribution before lifting (lidar substitution augmentation);
    ``depth_override`` replaces the prediction outright.
    """
    if len(images) != len(cams):
        raise ShapeError("one camera config per image is required")
    leaves = bind_params(params, trainable) if isinstance(params, ParameterSet) else params
    feats: list[Node] = []
    depths: list[DepthDistribution] = []
    voxel_sum: Node | None = None
    for i, (image, cam) in enumerate(zip(images, cams)):
        feat = encode_image(image, leaves, cam)
        if depth_override is not None:
            depth = depth_override[i]
        else:
            seed = None if dropout_seed is None else N.derive_seed(dropout_seed, "view", i)
            depth = estimate_depth(
                feat, cam, leaves, dims.bin_edges, dropout_rate=dropout_rate, dropout_seed=seed
            )
            if depth_transform is not None:
                depth = depth_transform(depth, i)
        vox = lift_to_voxel(feat, depth)
        voxel_sum = vox.tensor if voxel_sum is None else N.add(voxel_sum, vox.tensor)
        feats.append(as_node(feat.tensor))
        depths.append(depth)
    assert voxel_sum is not None
    bev = pool_to_bev(VoxelFeature(voxel_sum), dims.pool_kernel, dims.pool_stride)
    decoded = decode_bev(bev, leaves["dec.queries"], leaves)
    det = detect(decoded, leaves, (dims.grid_h, dims.grid_w))
    h, w = feats[0].shape[1], feats[0].shape[2]
    return ForwardOutputs(
        image_feats=feats,
        depths=depths,
        voxel=voxel_sum,
        bev=as_node(bev.tensor),
        decoded=decoded,
        det=det,
        feature_hw=(h, w),
    )
