"""Teacher-student adaptation machinery.

One adapt step runs: the teacher on the target batch (MC-dropout depth
ensembles, lidar fusion, pseudo labels), the student on both domains,
prototype construction in a shared embedding space with an adversarial
discriminator, the combined objective, one student gradient step, and the
uncertainty-guided EMA teacher update. The teacher is never differentiated;
its outputs enter the student's loss as constants.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Mapping, Sequence

import numpy as np

from . import numerics as N
from .geometry import (
    CameraConfig,
    CellLabels,
    DetectionSet,
    ForwardOutputs,
    ImageFeature,
    ModelDims,
    detection_forward,
    init_model_params,
    supervised_loss,
    value_array,
)
from .numerics import Node, ParameterSet, ShapeError, TensorRecord, UsageError
from .numerics.graph import AdamState, adam_step, bind_params, differentiate, sgd_step
from .uncertainty import (
    FusionConfig,
    LidarDepthMap,
    confidence_map,
    ensemble_mean,
    fuse_depth,
    fuse_depth_by_confidence,
    mc_depth_samples,
    resolve_theta,
    uncertainty_map,
)


class AdaptError(RuntimeError):
    """An adapt step could not complete; model state is unchanged."""


@dataclass
class ModelState:
    """One model instance: the complete named-parameter set."""

    params: ParameterSet

    @classmethod
    def initialized(cls, dims: ModelDims, seed: int) -> "ModelState":
        return cls(init_model_params(dims, seed))

    def clone(self) -> "ModelState":
        return ModelState(self.params.copy())


@dataclass
class DiscriminatorState:
    """Binary source/target classifier over prototype columns."""

    params: ParameterSet


@dataclass
class Prototype:
    """Per-category shared-space embedding, one column per category."""

    tensor: Node | TensorRecord  # (embed_dim, n)

    @property
    def n_categories(self) -> int:
        return value_array(self.tensor).shape[1]


@dataclass(frozen=True)
class LossWeights:
    lambda1: float = 1.0
    lambda2: float = 1.0
    lambda3: float = 0.1
    lambda4: float = 0.1

    def __post_init__(self):
        for name in ("lambda1", "lambda2", "lambda3", "lambda4"):
            if getattr(self, name) < 0:
                raise UsageError(f"{name} must be nonnegative")


@dataclass(frozen=True)
class UemaConfig:
    alpha: float = 0.999
    sigma: float = 0.001

    def __post_init__(self):
        if not 0.0 < self.alpha < 1.0:
            raise UsageError(f"alpha must be in (0, 1), got {self.alpha}")
        if self.sigma < 0:
            raise UsageError(f"sigma must be >= 0, got {self.sigma}")
        if self.alpha + 0.5 * self.sigma > 1.0:
            raise UsageError("alpha + sigma/2 must stay <= 1 so the blend is convex")


@dataclass(frozen=True)
class AblationSwitches:
    """Pathway toggles: depth-aware teacher, uncertainty-guided EMA,
    knowledge transfer, and the three embedding spaces."""

    da: bool = True
    uema: bool = True
    kt: bool = True
    ba: bool = True
    ia: bool = True
    va: bool = True

    def any_embedding(self) -> bool:
        return self.ba or self.ia or self.va


@dataclass(frozen=True)
class AdaptConfig:
    dims: ModelDims
    fusion: FusionConfig = field(default_factory=FusionConfig)
    uema: UemaConfig = field(default_factory=UemaConfig)
    weights: LossWeights = field(default_factory=LossWeights)
    switches: AblationSwitches = field(default_factory=AblationSwitches)
    lr: float = 0.01
    disc_lr: float = 0.05
    conf_threshold: float = 0.5
    seed: int = 0


@dataclass
class SourceItem:
    images: Sequence[np.ndarray]
    cams: Sequence[CameraConfig]
    labels: CellLabels
    lidar: Sequence[LidarDepthMap] = ()


@dataclass
class TargetItem:
    images: Sequence[np.ndarray]
    cams: Sequence[CameraConfig]
    lidar: Sequence[LidarDepthMap]


@dataclass(frozen=True)
class LossReport:
    step: int
    l_unc: float
    l_sup: float
    l_mkt: float
    l_ali: float
    total: float
    u_mean: float

    CSV_HEADER = "step,l_unc,l_sup,l_mkt,l_ali,total,u_mean"

    def csv_row(self) -> str:
        return ",".join(
            [str(self.step)]
            + [repr(v) for v in (self.l_unc, self.l_sup, self.l_mkt, self.l_ali, self.total, self.u_mean)]
        )


def block_pool_matrix(
    spatial: tuple[int, int], labels: CellLabels, n_classes: int
) -> np.ndarray:
    """(n_classes, H*W) averaging weights mapping grid cells to pixel blocks.

    Pixel (h, w) belongs to grid cell (floor(h*gh/H), floor(w*gw/W)); a
    category's row averages the pixels of all cells it occupies. Absent
    categories get zero rows.
    """
    h, w = spatial
    gh, gw = labels.grid
    rows = (np.arange(h) * gh) // h
    cols = (np.arange(w) * gw) // w
    cell_of_pixel = (rows[:, None] * gw + cols[None, :]).reshape(-1)
    weights = np.zeros((n_classes, h * w))
    occupied = labels.occupancy > 0
    classes = labels.class_onehot.argmax(axis=1)
    for cell_idx in np.nonzero(occupied)[0]:
        cat = int(classes[cell_idx])
        weights[cat, cell_of_pixel == cell_idx] = 1.0
    norms = weights.sum(axis=1, keepdims=True)
    norms[norms == 0] = 1.0
    return weights / norms


def category_pool(
    fwd: ForwardOutputs, labels: CellLabels, dims: ModelDims
) -> tuple[Node, Node, Node]:
    """Category-pooled (n, C_I) features for the image, voxel, and BEV spaces."""
    n_views = len(fwd.image_feats)
    img = fwd.image_feats[0]
    for extra in fwd.image_feats[1:]:
        img = N.add(img, extra)
    img = N.mul(img, 1.0 / n_views)  # (C_I, H, W)
    vox = N.mean(fwd.voxel, axis=1)  # (C_I, H, W)
    bev = N.mean(fwd.bev, axis=1)  # (C_I, H', W')

    def pool(feat: Node) -> Node:
        c, h, w = feat.shape
        pixels = N.reshape(N.moveaxis(feat, 0, 2), (h * w, c))
        matrix = block_pool_matrix((h, w), labels, dims.n_classes)
        return N.linear(N.constant(matrix, name="category_pool"), pixels)

    return pool(img), pool(vox), pool(bev)


def build_prototype(
    img_pooled: Node,
    vox_pooled: Node,
    bev_pooled: Node,
    params: Mapping[str, Node],
    space_mask: tuple[bool, bool, bool] = (True, True, True),
) -> Prototype:
    """Embed each space to (n, 256), concatenate to (n, 768), merge to (256, n).

    Disabled spaces contribute zero blocks so the shared layer keeps its
    shape under ablations. Every op is row-wise, so permuting categories
    permutes the prototype columns identically.
    """
    pooled = {"image": img_pooled, "voxel": vox_pooled, "bev": bev_pooled}
    n = img_pooled.shape[0]
    if vox_pooled.shape[0] != n or bev_pooled.shape[0] != n:
        raise ShapeError("category counts disagree across spaces")
    embed_dim = params["emb.shared.w"].shape[1]
    parts: list[Node] = []
    enabled = dict(zip(("image", "voxel", "bev"), space_mask))
    for space in ("image", "voxel", "bev"):
        if enabled[space]:
            h = N.relu(N.linear(pooled[space], params[f"emb.{space}.l1.w"], params[f"emb.{space}.l1.b"]))
            parts.append(N.linear(h, params[f"emb.{space}.l2.w"], params[f"emb.{space}.l2.b"]))
        else:
            parts.append(N.constant(np.zeros((n, embed_dim))))
    joined = N.concat(parts, axis=1)
    merged = N.linear(joined, params["emb.shared.w"], params["emb.shared.b"])
    return Prototype(N.moveaxis(merged, 0, 1))


def discriminator_scores(proto: Prototype, disc: Mapping[str, Node]) -> Node:
    """Per-category probability that a prototype column is source-domain."""
    cols = N.moveaxis(proto.tensor if isinstance(proto.tensor, Node) else N.constant(proto.tensor), 0, 1)
    h = N.relu(N.linear(cols, disc["disc.hidden.w"], disc["disc.hidden.b"]))
    out = N.sigmoid(N.linear(h, disc["disc.out.w"], disc["disc.out.b"]))
    return N.reshape(out, (cols.shape[0],))


def alignment_loss(
    proto_s: Prototype,
    proto_t: Prototype,
    disc: Mapping[str, Node],
    valid_s: np.ndarray | None = None,
    valid_t: np.ndarray | None = None,
    eps: float = 1e-7,
) -> Node:
    """log D(source) + log(1 - D(target)), each averaged over valid categories."""
    p_s = discriminator_scores(proto_s, disc)
    p_t = discriminator_scores(proto_t, disc)

    def masked_mean(log_node: Node, valid: np.ndarray | None, n: int) -> Node:
        if valid is None:
            valid = np.ones(n, dtype=bool)
        count = int(valid.sum())
        if count == 0:
            return N.constant(0.0)
        return N.tsum(N.mul(log_node, N.constant(valid.astype(float) / count)))

    term_s = masked_mean(N.log(p_s, eps=eps), valid_s, p_s.shape[0])
    one_minus = N.add(N.mul(p_t, -1.0), 1.0)
    term_t = masked_mean(N.log(one_minus, eps=eps), valid_t, p_t.shape[0])
    return N.add(term_s, term_t, name="alignment_loss")


def transfer_loss(teacher_feats: Sequence, student_feats: Sequence) -> Node:
    """Sum over spaces of squared feature gaps, each scaled by 1/(H*W).

    The channel dimensions are summed inside the norm; the trailing two
    axes of each feature are its spatial extent.
    """
    if len(teacher_feats) != len(student_feats):
        raise ShapeError("teacher and student feature lists differ in length")
    total: Node | None = None
    for t, s in zip(teacher_feats, student_feats):
        t_arr = value_array(t)
        s_node = s if isinstance(s, Node) else N.constant(s)
        if t_arr.shape != s_node.shape:
            raise ShapeError(f"transfer shapes disagree: {t_arr.shape} vs {s_node.shape}")
        h, w = t_arr.shape[-2], t_arr.shape[-1]
        diff = N.add(s_node, N.constant(-t_arr))
        term = N.mul(N.tsum(N.mul(diff, diff)), 1.0 / (h * w))
        total = term if total is None else N.add(total, term)
    if total is None:
        return N.constant(0.0)
    return total


def uema_update(
    teacher: ParameterSet, student: ParameterSet, u_mean: float, cfg: UemaConfig
) -> ParameterSet:
    """T <- (alpha + sigma*u)*T + (1 - alpha - sigma*u)*S, per parameter.

    Computed as S + c*(T - S), which keeps every updated entry exactly
    inside the closed interval between the old teacher and the student.
    """
    if not 0.0 <= u_mean <= 0.5:
        raise UsageError(f"u_mean must be in [0, 0.5], got {u_mean}")
    if teacher.names() != student.names():
        raise UsageError("teacher and student parameter names must match")
    c = cfg.alpha + cfg.sigma * u_mean
    updates = {}
    for name in teacher.names():
        t = teacher[name].array
        s = student[name].array
        if t.shape != s.shape:
            raise UsageError(f"shape mismatch for {name!r}: {t.shape} vs {s.shape}")
        updates[name] = TensorRecord(s + c * (t - s))
    return teacher.replaced(updates)


def pseudo_labels(pred: DetectionSet, conf_threshold: float) -> CellLabels:
    """Teacher detections at or above the confidence threshold become labels."""
    occ = value_array(pred.occupancy)
    off = value_array(pred.offsets)
    cls = value_array(pred.class_scores)
    keep = occ >= conf_threshold
    onehot = np.zeros_like(cls)
    winners = cls.argmax(axis=1)
    onehot[np.arange(len(winners)), winners] = 1.0
    return CellLabels(
        occupancy=keep.astype(float),
        offsets=off * keep[:, None],
        class_onehot=onehot * keep[:, None],
        grid=pred.grid,
    )


def total_da_loss(l_unc, l_sup, l_mkt, l_ali, w: LossWeights):
    """Weighted combination; grouped so the defaults sum exactly."""
    if any(isinstance(v, Node) for v in (l_unc, l_sup, l_mkt, l_ali)):
        as_n = lambda v: v if isinstance(v, Node) else N.constant(float(v))
        left = N.add(N.mul(as_n(l_unc), w.lambda1), N.mul(as_n(l_sup), w.lambda2))
        right = N.add(N.mul(as_n(l_mkt), w.lambda3), N.mul(as_n(l_ali), w.lambda4))
        return N.add(left, right, name="total_da_loss")
    return (w.lambda1 * l_unc + w.lambda2 * l_sup) + (w.lambda3 * l_mkt + w.lambda4 * l_ali)


@dataclass
class _PoolAccumulator:
    """Running per-category feature average across the scenes of a batch."""

    sums: list[Node] | None = None
    counts: np.ndarray | None = None

    def add(self, pooled: tuple[Node, Node, Node], present: np.ndarray) -> None:
        width = pooled[0].shape[1]
        mask = N.constant(np.repeat(present.astype(float)[:, None], width, axis=1))
        masked = [N.mul(p, mask) for p in pooled]
        if self.sums is None:
            self.sums = list(masked)
            self.counts = present.astype(float)
        else:
            self.sums = [N.add(a, b) for a, b in zip(self.sums, masked)]
            self.counts = self.counts + present.astype(float)

    def averages(self) -> tuple[list[Node], np.ndarray] | None:
        if self.sums is None or self.counts is None or not np.any(self.counts > 0):
            return None
        inv = np.where(self.counts > 0, 1.0 / np.maximum(self.counts, 1.0), 0.0)
        width = self.sums[0].shape[1]
        inv_mask = N.constant(np.repeat(inv[:, None], width, axis=1))
        scaled = [N.mul(s, inv_mask) for s in self.sums]
        return scaled, self.counts > 0


def _mean_node(terms: list[Node]) -> Node:
    total = terms[0]
    for t in terms[1:]:
        total = N.add(total, t)
    return N.mul(total, 1.0 / len(terms))


def _view_mean_image(feats: list[Node]) -> Node:
    total = feats[0]
    for f in feats[1:]:
        total = N.add(total, f)
    return N.mul(total, 1.0 / len(feats))


@dataclass
class TeacherArtifacts:
    """Everything the teacher contributes to one student step, as constants."""

    pseudo: list[CellLabels]
    transfer_targets: list[list[np.ndarray]]  # per target item: image/voxel/bev
    u_mean: float


def teacher_artifacts(
    teacher: ModelState,
    target_batch: Sequence[TargetItem],
    cfg: AdaptConfig,
    step: int,
) -> TeacherArtifacts:
    """Run the teacher over the target batch; no gradients are recorded."""
    pseudo: list[CellLabels] = []
    transfer: list[list[np.ndarray]] = []
    u_values: list[float] = []
    for t_idx, item in enumerate(target_batch):
        fwd, u_scene, _ = teacher_target_pass(
            teacher, item, cfg, scene_tag=N.derive_seed(cfg.seed, "scene", step, t_idx)
        )
        if u_scene is not None:
            u_values.append(u_scene)
        pseudo.append(pseudo_labels(fwd.det.to_arrays(), cfg.conf_threshold))
        transfer.append(
            [
                _view_mean_image(fwd.image_feats).data,
                fwd.voxel.data,
                fwd.bev.data,
            ]
        )
    u_mean = float(np.mean(u_values)) if u_values else 0.0
    return TeacherArtifacts(pseudo=pseudo, transfer_targets=transfer, u_mean=u_mean)


@dataclass
class PrototypePack:
    """Source/target prototypes plus their valid-category masks."""

    proto_s: Prototype
    proto_t: Prototype
    valid_s: np.ndarray
    valid_t: np.ndarray


def student_objective(
    student_leaves: Mapping[str, Node],
    source_batch: Sequence[SourceItem],
    target_batch: Sequence[TargetItem],
    art: TeacherArtifacts,
    cfg: AdaptConfig,
) -> tuple[Node, Node, Node, PrototypePack | None]:
    """The student-side loss components as a pure function of its leaves.

    Returns (l_unc, l_sup, l_mkt, prototypes); the alignment term is
    built separately against whichever discriminator should judge it.
    """
    dims = cfg.dims
    sw = cfg.switches
    unc_terms: list[Node] = []
    mkt_terms: list[Node] = []
    sup_terms: list[Node] = []
    source_pool = _PoolAccumulator()
    target_pool = _PoolAccumulator()

    for t_idx, item in enumerate(target_batch):
        pseudo = art.pseudo[t_idx]
        student_fwd = detection_forward(student_leaves, item.images, item.cams, dims)
        if sw.da and pseudo.occupied_count() > 0:
            # An empty pseudo set carries no positives, only the blanket
            # "everything is background" signal that collapses the
            # student when the teacher is merely unconfident; skip it.
            unc_terms.append(supervised_loss(student_fwd.det, pseudo))
        if sw.kt:
            student_list = [
                _view_mean_image(student_fwd.image_feats),
                student_fwd.voxel,
                student_fwd.bev,
            ]
            mkt_terms.append(transfer_loss(art.transfer_targets[t_idx], student_list))
        if sw.any_embedding() and pseudo.occupied_count() > 0:
            target_pool.add(
                category_pool(student_fwd, pseudo, dims), pseudo.categories_present()
            )

    for item in source_batch:
        student_fwd = detection_forward(student_leaves, item.images, item.cams, dims)
        sup_terms.append(supervised_loss(student_fwd.det, item.labels))
        if sw.any_embedding() and item.labels.occupied_count() > 0:
            source_pool.add(
                category_pool(student_fwd, item.labels, dims), item.labels.categories_present()
            )

    l_sup = _mean_node(sup_terms)
    l_unc = _mean_node(unc_terms) if unc_terms else N.constant(0.0)
    l_mkt = _mean_node(mkt_terms) if mkt_terms else N.constant(0.0)

    protos: PrototypePack | None = None
    src_avg = source_pool.averages()
    tgt_avg = target_pool.averages()
    if sw.any_embedding() and src_avg is not None and tgt_avg is not None:
        space_mask = (sw.ia, sw.va, sw.ba)
        (src_feats, valid_s) = src_avg
        (tgt_feats, valid_t) = tgt_avg
        protos = PrototypePack(
            proto_s=build_prototype(*src_feats, student_leaves, space_mask),
            proto_t=build_prototype(*tgt_feats, student_leaves, space_mask),
            valid_s=valid_s,
            valid_t=valid_t,
        )
    return l_unc, l_sup, l_mkt, protos


def alignment_term(protos: PrototypePack | None, disc: Mapping[str, Node]) -> Node:
    if protos is None:
        return N.constant(0.0)
    return alignment_loss(protos.proto_s, protos.proto_t, disc, protos.valid_s, protos.valid_t)


def teacher_target_pass(
    teacher: ModelState,
    item: TargetItem,
    cfg: AdaptConfig,
    scene_tag: int,
) -> tuple[ForwardOutputs, float | None, list]:
    """Run the teacher on one target scene.

    Returns the forward outputs (with fused depth when the depth-aware
    switch is on), the scene-mean uncertainty (None when MC sampling was
    skipped), and the per-view uncertainty maps.
    """
    dims = cfg.dims
    leaves = bind_params(teacher.params, trainable=False)
    plain = detection_forward(leaves, item.images, item.cams, dims, trainable=False)
    need_mc = cfg.switches.da or cfg.switches.uema
    if not need_mc:
        return plain, None, []
    u_maps = []
    means = []
    for v, cam in enumerate(item.cams):
        seed = N.derive_seed(cfg.seed, "teacher_mc", scene_tag, v)
        samples = mc_depth_samples(
            ImageFeature(plain.image_feats[v]), cam, leaves, cfg.fusion, seed, dims.bin_edges
        )
        u_maps.append((uncertainty_map(samples), ensemble_mean(samples)))
        means.append(u_maps[-1][0].scalar_mean)
    u_scene = float(np.mean(means))
    if not cfg.switches.da:
        return plain, u_scene, [u for u, _ in u_maps]
    if cfg.fusion.criterion == "uncertainty":
        scores = np.concatenate([u.pixel_scores().reshape(-1) for u, _ in u_maps])
        theta = resolve_theta(cfg.fusion, scores)
        fused = [
            fuse_depth(mean_pred, item.lidar[v], u, theta)
            for v, (u, mean_pred) in enumerate(u_maps)
        ]
    else:
        confs = [confidence_map(mean_pred) for _, mean_pred in u_maps]
        pooled = np.concatenate([c.array.reshape(-1) for c in confs])
        threshold = float(np.quantile(pooled, 1.0 - cfg.fusion.quantile))
        fused = [
            fuse_depth_by_confidence(mean_pred, item.lidar[v], confs[v], threshold)
            for v, (_, mean_pred) in enumerate(u_maps)
        ]
    fused_fwd = detection_forward(
        leaves, item.images, item.cams, dims, depth_override=fused, trainable=False
    )
    return fused_fwd, u_scene, [u for u, _ in u_maps]


def adapt_step(
    student: ModelState,
    teacher: ModelState,
    disc: DiscriminatorState,
    source_batch: Sequence[SourceItem],
    target_batch: Sequence[TargetItem],
    cfg: AdaptConfig,
    step: int = 0,
    opt_state: AdamState | None = None,
) -> tuple[ModelState, ModelState, DiscriminatorState, LossReport]:
    """One full adaptation step; raises AdaptError leaving state unchanged.

    The student takes one step on the combined objective: Adam when an
    optimizer state is threaded through the loop, plain descent otherwise.
    """
    if not source_batch or not target_batch:
        raise AdaptError("both batches must be non-empty")
    if student.params.names() != teacher.params.names():
        raise AdaptError("student and teacher parameter sets must share one key set")
    sw = cfg.switches
    try:
        art = teacher_artifacts(teacher, target_batch, cfg, step)
        student_leaves = bind_params(student.params, trainable=True)
        l_unc, l_sup, l_mkt, protos = student_objective(
            student_leaves, source_batch, target_batch, art, cfg
        )

        disc_after = disc
        l_ali: Node = N.constant(0.0)
        if protos is not None:
            # Discriminator first: one minimising step on -alignment with
            # detached prototypes, then the student plays against the
            # refreshed discriminator through its own embedding path.
            disc_leaves = bind_params(disc.params, trainable=True)
            detached = PrototypePack(
                proto_s=Prototype(N.constant(value_array(protos.proto_s.tensor))),
                proto_t=Prototype(N.constant(value_array(protos.proto_t.tensor))),
                valid_s=protos.valid_s,
                valid_t=protos.valid_t,
            )
            disc_obj = N.mul(alignment_term(detached, disc_leaves), -1.0)
            disc_grads = differentiate(disc_obj, disc.params)
            disc_after = DiscriminatorState(sgd_step(disc.params, disc_grads, cfg.disc_lr))
            l_ali = alignment_term(protos, bind_params(disc_after.params, trainable=False))

        total = total_da_loss(l_unc, l_sup, l_mkt, l_ali, cfg.weights)
        grads = differentiate(total, student.params)
    except N.NumericsError as err:
        raise AdaptError(f"non-finite loss at step {step}: {err}") from err

    if opt_state is not None:
        new_student = ModelState(adam_step(student.params, grads, cfg.lr, opt_state))
    else:
        new_student = ModelState(sgd_step(student.params, grads, cfg.lr))
    uema_cfg = cfg.uema if sw.uema else replace(cfg.uema, sigma=0.0)
    new_teacher = ModelState(
        uema_update(teacher.params, new_student.params, art.u_mean, uema_cfg)
    )
    report = LossReport(
        step=step,
        l_unc=l_unc.item(),
        l_sup=l_sup.item(),
        l_mkt=l_mkt.item(),
        l_ali=l_ali.item(),
        total=total.item(),
        u_mean=art.u_mean,
    )
    return new_student, new_teacher, disc_after, report
