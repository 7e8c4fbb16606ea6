"""Training loops: source pretraining and the adaptation loop."""

from __future__ import annotations

import math
import os
from dataclasses import dataclass

import numpy as np

from ..adaptation import (
    AdaptConfig,
    AdaptError,
    DiscriminatorState,
    LossReport,
    ModelState,
    SourceItem,
    TargetItem,
    adapt_step,
)
from ..geometry import (
    ModelDims,
    depth_supervision_loss,
    detection_forward,
    init_discriminator_params,
    init_model_params,
    supervised_loss,
)
from ..numerics import NumericsError, ParameterSet, derive_seed, make_rng
from ..numerics.graph import AdamState, adam_step, bind_params, differentiate, sgd_step
from ..synth import Corpus, load_corpus

LOSS_DIVERGENCE_LIMIT = 1e6


class TrainingDiverged(RuntimeError):
    """Loss exploded or went non-finite; the last good checkpoint survives."""

    def __init__(self, message: str, checkpoint: ParameterSet, logs: list[str]):
        super().__init__(message)
        self.checkpoint = checkpoint
        self.logs = logs


def _source_items(corpus: Corpus) -> list[SourceItem]:
    items = []
    for scene in corpus.scenes:
        if scene.labels is None:
            raise AdaptError(f"corpus {corpus.path} has no open labels; not a source corpus")
        items.append(
            SourceItem(
                images=scene.images, cams=scene.cams, labels=scene.labels, lidar=scene.lidar
            )
        )
    return items


def _target_items(corpus: Corpus) -> list[TargetItem]:
    return [
        TargetItem(images=s.images, cams=s.cams, lidar=s.lidar) for s in corpus.scenes
    ]


def _batch_loss(
    params: ParameterSet,
    items: list[SourceItem],
    dims: ModelDims,
    depth_weight: float,
    sub_fractions: dict[int, tuple[float, int]] | None = None,
):
    """Mean loss over a scene batch.

    ``sub_fractions`` maps item index to (fraction, seed): that scene's
    forward substitutes lidar one-hots into the predicted depth at a
    seeded random subset of observed pixels. Training across random
    fractions makes every prediction/lidar mixture level native to the
    detector, so fusion at adaptation time stays in-distribution.
    """
    import bevadapt.numerics as N
    from ..numerics import make_rng
    from ..geometry import substitute_lidar_depth
    from ..uncertainty import LidarDepthMap
    from ..numerics import TensorRecord

    leaves = bind_params(params, trainable=True)
    total = None
    for idx, item in enumerate(items):
        transform = None
        if sub_fractions and idx in sub_fractions and item.lidar:
            fraction, sub_seed = sub_fractions[idx]
            sub_maps = []
            for v, lidar in enumerate(item.lidar):
                rng = make_rng(sub_seed, "subpixels", v)
                keep = lidar.mask & (rng.random(lidar.mask.shape) < fraction)
                onehot = lidar.tensor.array * keep[None, :, :]
                sub_maps.append(LidarDepthMap(TensorRecord(onehot), keep))
            transform = lambda depth, view: substitute_lidar_depth(depth, sub_maps[view])
        fwd = detection_forward(leaves, item.images, item.cams, dims, depth_transform=transform)
        loss = supervised_loss(fwd.det, item.labels)
        if depth_weight > 0 and item.lidar:
            aux = depth_supervision_loss(fwd.depths, item.lidar)
            loss = N.add(loss, N.mul(aux, depth_weight))
        total = loss if total is None else N.add(total, loss)
    return N.mul(total, 1.0 / len(items))


def train_source(
    corpus: Corpus | str,
    dims: ModelDims,
    epochs: int,
    lr: float,
    seed: int,
    batch_size: int = 8,
    depth_weight: float = 1.0,
    lidar_sub_prob: float = 0.5,
) -> tuple[ParameterSet, list[str]]:
    """Minimise the supervised detection loss over a labeled corpus.

    Minibatch Adam over shuffled scenes; returns the final parameters and
    CSV log rows (epoch,step,loss). With probability ``lidar_sub_prob`` a
    scene's forward substitutes lidar one-hots into its predicted depth,
    so both pure-prediction and lidar-fused voxel statistics are native
    to the trained detector. Divergence (non-finite or loss above 1e6)
    aborts with the last good checkpoint attached to the raised
    TrainingDiverged.
    """
    if isinstance(corpus, str):
        corpus = load_corpus(corpus)
    items = _source_items(corpus)
    params = init_model_params(dims, derive_seed(seed, "source_init"))
    opt = AdamState()
    logs = ["epoch,step,loss"]
    step = 0
    for epoch in range(epochs):
        order = make_rng(seed, "epoch_order", epoch).permutation(len(items))
        sub_rng = make_rng(seed, "lidar_sub", epoch)
        for start in range(0, len(items), batch_size):
            batch = [items[int(i)] for i in order[start : start + batch_size]]
            sub_fractions: dict[int, tuple[float, int]] = {}
            for i in range(len(batch)):
                gate, fraction = sub_rng.random(), sub_rng.random()
                if gate < lidar_sub_prob:
                    sub_fractions[i] = (fraction, derive_seed(seed, "subseed", epoch, step, i))
            last_good = params
            try:
                loss = _batch_loss(params, batch, dims, depth_weight, sub_fractions)
                value = loss.item()
                if not math.isfinite(value) or value > LOSS_DIVERGENCE_LIMIT:
                    raise TrainingDiverged(
                        f"loss {value} at epoch {epoch} step {step}", last_good, logs
                    )
                params = adam_step(params, differentiate(loss, params), lr, opt)
            except NumericsError as err:
                raise TrainingDiverged(str(err), last_good, logs) from err
            logs.append(f"{epoch},{step},{value!r}")
            step += 1
    return params, logs


@dataclass
class AdaptationResult:
    student: ParameterSet
    teacher: ParameterSet
    discriminator: ParameterSet
    logs: list[str]  # LossReport CSV rows


def run_adaptation(
    source_corpus: Corpus | str,
    target_corpus: Corpus | str,
    source_checkpoint: ParameterSet,
    cfg: AdaptConfig,
    epochs: int,
    batch_size: int = 4,
) -> AdaptationResult:
    """Adapt a source-pretrained model to an unlabeled target corpus.

    Teacher and student both start from the source checkpoint; each step
    pairs a batch of target scenes with an equal batch of cycled source
    scenes. Ablation switches in ``cfg`` zero their pathways inside
    ``adapt_step``.
    """
    if isinstance(source_corpus, str):
        source_corpus = load_corpus(source_corpus)
    if isinstance(target_corpus, str):
        target_corpus = load_corpus(target_corpus)
    source_items = _source_items(source_corpus)
    target_items = _target_items(target_corpus)
    student = ModelState(source_checkpoint.copy())
    teacher = ModelState(source_checkpoint.copy())
    disc = DiscriminatorState(
        init_discriminator_params(cfg.dims, derive_seed(cfg.seed, "disc_init"))
    )
    logs = [LossReport.CSV_HEADER]
    opt = AdamState()
    step = 0
    source_cursor = 0
    for epoch in range(epochs):
        order = make_rng(cfg.seed, "adapt_order", epoch).permutation(len(target_items))
        for start in range(0, len(target_items), batch_size):
            targets = [target_items[int(i)] for i in order[start : start + batch_size]]
            sources = []
            for _ in range(len(targets)):
                sources.append(source_items[source_cursor % len(source_items)])
                source_cursor += 1
            student, teacher, disc, report = adapt_step(
                student, teacher, disc, sources, targets, cfg, step=step, opt_state=opt
            )
            logs.append(report.csv_row())
            step += 1
    return AdaptationResult(
        student=student.params,
        teacher=teacher.params,
        discriminator=disc.params,
        logs=logs,
    )


def write_lines(lines: list[str], path: str | os.PathLike) -> None:
    path = os.fspath(path)
    tmp = path + ".tmp"
    with open(tmp, "w", encoding="utf-8", newline="\n") as fh:
        fh.write("\n".join(lines) + "\n")
    os.replace(tmp, path)
