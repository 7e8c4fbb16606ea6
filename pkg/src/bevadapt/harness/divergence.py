"""Inter-domain divergence diagnostics.

Two runnable measurements: per-channel histogram Jensen-Shannon
divergence between feature activations of the two domains, and a
discrepancy proxy 2*|Pr_s[D=1] - Pr_t[D=1]| with a freshly trained probe
discriminator standing in for the supremum over hypotheses.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .. import numerics as N
from ..adaptation import category_pool, build_prototype
from ..geometry import CellLabels, ModelDims, detection_forward, value_array
from ..numerics import ParameterSet, TensorRecord, UsageError
from ..numerics.graph import bind_params, differentiate, sgd_step
from ..synth import Corpus, load_corpus

SPACES = ("image", "voxel", "bev", "prototype")


@dataclass
class DivergenceReport:
    js: float  # nats, averaged over channels
    h_proxy: float  # in [0, 2]
    space: str
    degenerate: bool = False

    CSV_HEADER = "space,js,h_proxy,degenerate"

    def csv_row(self) -> str:
        return ",".join([self.space, repr(self.js), repr(self.h_proxy), str(self.degenerate)])


def js_divergence(p: np.ndarray, q: np.ndarray) -> float:
    """Jensen-Shannon divergence in nats; 0*ln(0) counts as zero."""
    p = np.asarray(p, dtype=np.float64)
    q = np.asarray(q, dtype=np.float64)
    if p.shape != q.shape or p.ndim != 1:
        raise UsageError(f"supports disagree: {p.shape} vs {q.shape}")
    if np.any(p < 0) or np.any(q < 0):
        raise UsageError("distributions must be nonnegative")
    if abs(p.sum() - 1.0) > 1e-9 or abs(q.sum() - 1.0) > 1e-9:
        raise UsageError("distributions must be normalised within 1e-9")
    m = 0.5 * (p + q)

    def kl(a: np.ndarray) -> float:
        mask = a > 0
        return float(np.sum(a[mask] * np.log(a[mask] / m[mask])))

    return 0.5 * kl(p) + 0.5 * kl(q)


def _space_features(
    params_leaves, scene, dims: ModelDims, space: str
) -> np.ndarray:
    """Per-scene feature block of shape (channels, anything)."""
    fwd = detection_forward(params_leaves, scene.images, scene.cams, dims, trainable=False)
    if space == "image":
        stack = np.stack([value_array(f) for f in fwd.image_feats])
        arr = stack.mean(axis=0)
    elif space == "voxel":
        arr = value_array(fwd.voxel)
    elif space == "bev":
        arr = value_array(fwd.bev)
    elif space == "prototype":
        blanket = CellLabels(
            occupancy=np.ones(dims.n_queries),
            offsets=np.zeros((dims.n_queries, 2)),
            class_onehot=np.tile(
                np.eye(dims.n_classes)[0], (dims.n_queries, 1)
            ),
            grid=(dims.grid_h, dims.grid_w),
        )
        pooled = category_pool(fwd, blanket, dims)
        proto = build_prototype(*pooled, params_leaves)
        arr = value_array(proto.tensor)[:, :1]
    else:
        raise UsageError(f"unknown feature space {space!r}; pick one of {SPACES}")
    return arr.reshape(arr.shape[0], -1)


def _per_channel_js(
    source: np.ndarray, target: np.ndarray, bins: int
) -> tuple[float, bool]:
    """Histogram each channel over the pooled range; average the JS values."""
    values = []
    degenerate_all = True
    for c in range(source.shape[0]):
        lo = min(source[c].min(), target[c].min())
        hi = max(source[c].max(), target[c].max())
        if hi - lo < 1e-12:
            values.append(0.0)
            continue
        degenerate_all = False
        edges = np.linspace(lo, hi, bins + 1)
        p, _ = np.histogram(source[c], bins=edges)
        q, _ = np.histogram(target[c], bins=edges)
        values.append(js_divergence(p / p.sum(), q / q.sum()))
    return float(np.mean(values)), degenerate_all


def _probe_h_proxy(
    source_vecs: np.ndarray,
    target_vecs: np.ndarray,
    steps: int,
    lr: float,
    seed: int,
    hidden: int = 16,
) -> float:
    """Train a fresh 2-layer probe on half the scenes; measure on the rest."""
    s_train, s_test = source_vecs[0::2], source_vecs[1::2]
    t_train, t_test = target_vecs[0::2], target_vecs[1::2]
    if len(s_test) == 0 or len(t_test) == 0:
        s_train = s_test = source_vecs
        t_train = t_test = target_vecs
    x = np.concatenate([s_train, t_train])
    y = np.concatenate([np.ones(len(s_train)), np.zeros(len(t_train))])
    dim = x.shape[1]
    rng = N.make_rng(seed, "probe")
    params = ParameterSet()
    params.add("w1", TensorRecord(rng.standard_normal((dim, hidden)) / np.sqrt(dim)))
    params.add("b1", TensorRecord.zeros((hidden,)))
    params.add("w2", TensorRecord(rng.standard_normal((hidden, 1)) / np.sqrt(hidden)))
    params.add("b2", TensorRecord.zeros((1,)))

    def forward(leaves, inputs):
        h = N.relu(N.linear(inputs, leaves["w1"], leaves["b1"]))
        return N.reshape(N.sigmoid(N.linear(h, leaves["w2"], leaves["b2"])), (inputs.shape[0],))

    x_node = N.constant(x)
    for _ in range(steps):
        leaves = bind_params(params, trainable=True)
        probs = forward(leaves, x_node)
        loss = N.bce(probs, y, reduction="mean")
        params = sgd_step(params, differentiate(loss, params), lr)

    frozen = bind_params(params, trainable=False)
    p_s = forward(frozen, N.constant(s_test)).data >= 0.5
    p_t = forward(frozen, N.constant(t_test)).data >= 0.5
    return float(2.0 * abs(p_s.mean() - p_t.mean()))


def divergence_report(
    params: ParameterSet,
    source_corpus: Corpus | str,
    target_corpus: Corpus | str,
    dims: ModelDims,
    space: str = "bev",
    bins: int = 32,
    probe_steps: int = 200,
    probe_lr: float = 0.2,
    seed: int = 0,
) -> DivergenceReport:
    """Histogram-JS plus probe-discriminator discrepancy for one feature space."""
    if isinstance(source_corpus, str):
        source_corpus = load_corpus(source_corpus)
    if isinstance(target_corpus, str):
        target_corpus = load_corpus(target_corpus)
    if not source_corpus.scenes or not target_corpus.scenes:
        raise UsageError("both corpora must be non-empty")
    leaves = bind_params(params, trainable=False)
    source_blocks = [_space_features(leaves, s, dims, space) for s in source_corpus.scenes]
    target_blocks = [_space_features(leaves, s, dims, space) for s in target_corpus.scenes]
    source_all = np.concatenate(source_blocks, axis=1)
    target_all = np.concatenate(target_blocks, axis=1)
    js, degenerate = _per_channel_js(source_all, target_all, bins)
    source_vecs = np.stack([b.mean(axis=1) for b in source_blocks])
    target_vecs = np.stack([b.mean(axis=1) for b in target_blocks])
    h_proxy = _probe_h_proxy(source_vecs, target_vecs, probe_steps, probe_lr, seed)
    return DivergenceReport(js=js, h_proxy=h_proxy, space=space, degenerate=degenerate)
