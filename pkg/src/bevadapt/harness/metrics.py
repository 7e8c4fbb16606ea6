"""Simplified detection metrics: cell-level AP and translation error.

Predictions are BEV cells above an occupancy floor, positioned at cell
center plus the predicted offset. Matching is greedy per class within a
radius, and AP integrates the precision/recall curve over the occupancy
ranking. Deliberately simpler than a full detection suite: the harness
targets ordering and trend reproduction, not absolute scores.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from ..geometry import CellLabels, ModelDims, detection_forward
from ..numerics import ParameterSet, UsageError
from ..numerics.graph import bind_params
from ..synth import Corpus, load_corpus, read_sealed_labels


@dataclass(frozen=True)
class Detection:
    scene: int
    score: float
    position: tuple[float, float]  # (row, col) in cell units, offsets included
    category: int


@dataclass(frozen=True)
class TruthObject:
    scene: int
    position: tuple[float, float]
    category: int


@dataclass
class MetricsReport:
    simplified_map: float
    mean_translation_error: float
    per_class_ap: list[float]
    n_eval_scenes: int
    n_matches: int = 0

    CSV_HEADER = "simplified_map,mean_translation_error,n_eval_scenes,n_matches,per_class_ap"

    def csv_row(self) -> str:
        aps = ";".join(repr(a) for a in self.per_class_ap)
        return ",".join(
            [
                repr(self.simplified_map),
                repr(self.mean_translation_error),
                str(self.n_eval_scenes),
                str(self.n_matches),
                aps,
            ]
        )


def labels_to_truths(labels: CellLabels, scene: int) -> list[TruthObject]:
    out = []
    gh, gw = labels.grid
    for idx in np.nonzero(labels.occupancy > 0)[0]:
        row, col = divmod(int(idx), gw)
        dr, dc = labels.offsets[idx]
        cat = int(labels.class_onehot[idx].argmax())
        out.append(TruthObject(scene, (row + 0.5 + dr, col + 0.5 + dc), cat))
    return out


def detections_from_arrays(
    occupancy: np.ndarray,
    offsets: np.ndarray,
    class_scores: np.ndarray,
    grid: tuple[int, int],
    scene: int,
    occ_floor: float,
) -> list[Detection]:
    out = []
    gh, gw = grid
    for idx in range(len(occupancy)):
        score = float(occupancy[idx])
        if score < occ_floor:
            continue
        row, col = divmod(idx, gw)
        dr, dc = offsets[idx]
        out.append(
            Detection(
                scene,
                score,
                (row + 0.5 + float(dr), col + 0.5 + float(dc)),
                int(class_scores[idx].argmax()),
            )
        )
    return out


def _greedy_match_flags(
    dets: Sequence[Detection], truths: Sequence[TruthObject], radius: float
) -> tuple[list[bool], list[tuple[int, int]]]:
    """Rank by score and greedily claim the nearest free truth per detection."""
    order = sorted(range(len(dets)), key=lambda i: (-dets[i].score, dets[i].position))
    claimed: set[int] = set()
    flags = [False] * len(dets)
    pairs: list[tuple[int, int]] = []
    for i in order:
        det = dets[i]
        best, best_dist = -1, radius
        for j, truth in enumerate(truths):
            if j in claimed or truth.scene != det.scene:
                continue
            dist = float(np.hypot(det.position[0] - truth.position[0], det.position[1] - truth.position[1]))
            if dist <= best_dist:
                best, best_dist = j, dist
        if best >= 0:
            claimed.add(best)
            flags[i] = True
            pairs.append((i, best))
    return flags, pairs


def average_precision(
    dets: Sequence[Detection], truths: Sequence[TruthObject], radius: float
) -> float:
    """Step-integrated AP over the score-ranked precision/recall sweep."""
    if not truths:
        return 0.0
    flags, _ = _greedy_match_flags(dets, truths, radius)
    order = sorted(range(len(dets)), key=lambda i: (-dets[i].score, dets[i].position))
    tp, fp = 0, 0
    ap = 0.0
    prev_recall = 0.0
    for i in order:
        if flags[i]:
            tp += 1
        else:
            fp += 1
        recall = tp / len(truths)
        precision = tp / (tp + fp)
        ap += (recall - prev_recall) * precision
        prev_recall = recall
    return ap


def evaluate_detections(
    per_scene_dets: Sequence[Sequence[Detection]],
    per_scene_truths: Sequence[Sequence[TruthObject]],
    n_classes: int,
    radius: float,
    occ_threshold: float,
) -> MetricsReport:
    dets = [d for scene in per_scene_dets for d in scene]
    truths = [t for scene in per_scene_truths for t in scene]
    per_class = []
    for cat in range(n_classes):
        class_truths = [t for t in truths if t.category == cat]
        if not class_truths:
            continue
        class_dets = [d for d in dets if d.category == cat]
        per_class.append(average_precision(class_dets, class_truths, radius))
    simplified_map = float(np.mean(per_class)) if per_class else 0.0
    operating = [d for d in dets if d.score >= occ_threshold]
    flags, pairs = _greedy_match_flags(operating, truths, radius)
    distances = []
    for det_idx, truth_idx in pairs:
        d, t = operating[det_idx], truths[truth_idx]
        distances.append(np.hypot(d.position[0] - t.position[0], d.position[1] - t.position[1]))
    translation = float(np.mean(distances)) if distances else 0.0
    return MetricsReport(
        simplified_map=simplified_map,
        mean_translation_error=translation,
        per_class_ap=per_class,
        n_eval_scenes=len(per_scene_truths),
        n_matches=len(pairs),
    )


def evaluate_checkpoint(
    params: ParameterSet,
    corpus: Corpus | str,
    dims: ModelDims,
    match_radius: float = 1.0,
    occ_threshold: float = 0.5,
    occ_floor: float = 0.05,
) -> MetricsReport:
    """Score a checkpoint against a corpus's sealed evaluation labels."""
    if isinstance(corpus, str):
        corpus = load_corpus(corpus)
    if not corpus.scenes:
        raise UsageError("evaluation corpus is empty")
    sealed = read_sealed_labels(corpus.path)
    leaves = bind_params(params, trainable=False)
    per_scene_dets, per_scene_truths = [], []
    for i, scene in enumerate(corpus.scenes):
        fwd = detection_forward(leaves, scene.images, scene.cams, dims, trainable=False)
        det = fwd.det.to_arrays()
        per_scene_dets.append(
            detections_from_arrays(
                det.occupancy.array,
                det.offsets.array,
                det.class_scores.array,
                det.grid,
                scene=i,
                occ_floor=occ_floor,
            )
        )
        per_scene_truths.append(labels_to_truths(sealed[i], scene=i))
    return evaluate_detections(
        per_scene_dets, per_scene_truths, dims.n_classes, match_radius, occ_threshold
    )
