"""Deterministic synthetic multi-view scenes with parametric domain shifts.

Each scene renders M pinhole views of colored boxes standing on a striped
ground plane, with exact per-pixel depth. Labels live on a BEV grid over
the shared camera frame (rows are depth bands, columns lateral bands),
matching the view-agnostic voxel fusion of the detection pipeline. Fog,
night, and rain corruptions touch only the images; annotations, cameras,
depth, and lidar are preserved untouched.
"""

from __future__ import annotations

import io
import json
import os
import struct
from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np

from .geometry import CameraConfig, CellLabels
from .numerics import TensorRecord, derive_seed, make_rng
from .numerics.checkpoint import CheckpointError, dump_entries, parse_entries
from .uncertainty import LidarDepthMap

LAYOUTS = ("grid-city", "curved-city")
SHIFT_KINDS = ("none", "fog", "night", "rain")


class SceneError(ValueError):
    """Raised when a scene spec cannot be rendered."""


@dataclass(frozen=True)
class SceneSpec:
    seed: int = 0
    n_objects: int = 2
    layout_style: str = "grid-city"
    view_count: int = 2
    image_hw: tuple[int, int] = (16, 32)
    depth_range: tuple[float, float] = (2.0, 20.0)
    depth_bins: int = 16
    place_depth: tuple[float, float] = (4.0, 12.0)
    grid: tuple[int, int] = (3, 6)
    n_categories: int = 4
    lidar_density: float = 0.5

    def __post_init__(self):
        if self.view_count < 2:
            raise SceneError(f"need at least two views, got {self.view_count}")
        if self.n_objects < 0:
            raise SceneError("object count must be nonnegative")
        if self.layout_style not in LAYOUTS:
            raise SceneError(f"unknown layout {self.layout_style!r}")
        if self.image_hw[0] < 8 or self.image_hw[1] < 8:
            raise SceneError(
                f"image {self.image_hw} too small to place objects (need at least 8x8)"
            )
        if not 0.0 < self.lidar_density <= 1.0:
            raise SceneError("lidar density must be in (0, 1]")

    @property
    def bin_edges(self) -> np.ndarray:
        lo, hi = self.depth_range
        return np.linspace(lo, hi, self.depth_bins + 1)

    @property
    def lateral_extent(self) -> float:
        """Half-width of the BEV grid's lateral coverage in meters."""
        return 0.65 * self.place_depth[1]


@dataclass(frozen=True)
class DomainShift:
    kind: str = "none"
    level: int = 3  # fog ladder position, 1..5
    fog_beta0: float = 0.05  # extinction at ladder level 2, 1/m
    fog_airlight: float = 0.8
    night_gain: float = 0.4
    night_noise: float = 0.02
    rain_density: float = 0.015
    rain_noise: float = 0.02

    def __post_init__(self):
        if self.kind not in SHIFT_KINDS:
            raise SceneError(f"unknown shift kind {self.kind!r}")
        if self.kind == "fog" and not 1 <= self.level <= 5:
            raise SceneError(f"fog ladder level must be 1..5, got {self.level}")
        if self.fog_beta0 < 0 or self.rain_density < 0:
            raise SceneError("shift magnitudes must be nonnegative")
        if not 0.0 < self.night_gain <= 1.0:
            raise SceneError("night gain must be in (0, 1]")

    @property
    def fog_beta(self) -> float:
        """Ladder convention: levels 1/3/5 map to {0.5, 1.5, 2.5} * beta0."""
        return 0.5 * self.level * self.fog_beta0


@dataclass
class SceneObject:
    view: int
    category: int
    z: float  # camera-frame planar depth, meters
    x: float  # camera-frame lateral offset, meters
    size: float
    cell: tuple[int, int]
    offset: tuple[float, float]


@dataclass
class SceneSample:
    images: list[np.ndarray]  # M of (3, H0, W0) in [0, 1]
    cams: list[CameraConfig]
    depth_gt: list[np.ndarray]  # M of (H0, W0) meters
    lidar: list[LidarDepthMap]  # at feature (half) resolution
    label_cells: np.ndarray  # (n, 2)
    label_offsets: np.ndarray  # (n, 2)
    label_classes: np.ndarray  # (n,)
    grid: tuple[int, int]
    n_categories: int
    objects: list[SceneObject] = field(default_factory=list)

    def cell_labels(self) -> CellLabels:
        return CellLabels.from_objects(
            self.label_cells, self.label_offsets, self.label_classes, self.grid, self.n_categories
        )


_PALETTES = {
    "grid-city": [
        (0.85, 0.2, 0.2),
        (0.2, 0.75, 0.25),
        (0.2, 0.35, 0.9),
        (0.9, 0.8, 0.2),
        (0.8, 0.3, 0.8),
        (0.25, 0.8, 0.8),
    ],
    "curved-city": [
        (0.95, 0.45, 0.35),
        (0.45, 0.9, 0.5),
        (0.45, 0.55, 0.95),
        (0.95, 0.9, 0.5),
        (0.85, 0.5, 0.9),
        (0.5, 0.9, 0.95),
    ],
}

_GROUND = {"grid-city": (0.42, 0.42, 0.44), "curved-city": (0.5, 0.46, 0.4)}
_SKY = {"grid-city": (0.66, 0.78, 0.92), "curved-city": (0.72, 0.78, 0.85)}
_CAMERA_HEIGHT = 1.5


def _view_camera(spec: SceneSpec, view: int) -> CameraConfig:
    h0, w0 = spec.image_hw
    rng = make_rng(spec.seed, "camera", view)
    focal = 0.5 * w0 * (1.0 + 0.06 * (rng.random() - 0.5))
    k = np.array(
        [[focal, 0.0, (w0 - 1) / 2.0], [0.0, focal, (h0 - 1) / 2.0], [0.0, 0.0, 1.0]]
    )
    return CameraConfig(k, view)


def _render_background(
    spec: SceneSpec, cam: CameraConfig, view: int
) -> tuple[np.ndarray, np.ndarray]:
    h0, w0 = spec.image_hw
    f = cam.intrinsics[0, 0]
    cx, cy = cam.intrinsics[0, 2], cam.intrinsics[1, 2]
    d_min, d_max = spec.depth_range
    vs = np.arange(h0)[:, None]
    us = np.arange(w0)[None, :]
    below = np.repeat(vs > cy, w0, axis=1)
    with np.errstate(divide="ignore"):
        z_row = np.where(vs > cy, _CAMERA_HEIGHT * f / np.maximum(vs - cy, 1e-9), d_max)
    z = np.repeat(np.clip(z_row, d_min, d_max), w0, axis=1)
    x = z * (us - cx) / f
    yaw = 2.0 * np.pi * view / spec.view_count
    xw = np.cos(yaw) * x + np.sin(yaw) * z
    zw = -np.sin(yaw) * x + np.cos(yaw) * z
    image = np.empty((3, h0, w0))
    sky = np.array(_SKY[spec.layout_style])
    ground = np.array(_GROUND[spec.layout_style])
    if spec.layout_style == "grid-city":
        stripe = ((np.floor(xw / 2.0) + np.floor(zw / 2.0)) % 2.0) * 0.1
    else:
        radius = np.sqrt(xw * xw + zw * zw)
        stripe = (np.floor(radius / 2.0) % 2.0) * 0.1
    for c in range(3):
        image[c] = np.where(below, ground[c] + stripe, sky[c])
    depth = np.where(below, z, d_max)
    return image, depth


def _place_objects(spec: SceneSpec, cams: Sequence[CameraConfig]) -> list[SceneObject]:
    """Sample objects with near-uniform BEV cell coverage.

    The visible lateral range shrinks toward the camera, so sampling
    (depth, pixel column) uniformly would crowd the central columns.
    Instead draw the depth band first, then a lateral cell among those
    the camera can actually see at that depth.
    """
    rng = make_rng(spec.seed, "objects")
    h0, w0 = spec.image_hw
    gh, gw = spec.grid
    z_lo, z_hi = spec.place_depth
    x_ext = spec.lateral_extent
    taken: set[tuple[int, int]] = set()
    objects: list[SceneObject] = []
    for _ in range(spec.n_objects):
        for _attempt in range(40):
            view = int(rng.integers(0, spec.view_count))
            cat = int(rng.integers(0, spec.n_categories))
            f = cams[view].intrinsics[0, 0]
            cx = cams[view].intrinsics[0, 2]
            row = int(rng.integers(0, gh))
            z_band = (z_lo + row * (z_hi - z_lo) / gh, z_lo + (row + 1) * (z_hi - z_lo) / gh)
            z = float(rng.uniform(*z_band))
            x_vis = 0.3 * w0 * z / f  # keep the box center inside the frame
            reachable = []
            for col in range(gw):
                lo = -x_ext + col * (2 * x_ext) / gw
                hi = lo + (2 * x_ext) / gw
                lo, hi = max(lo, -x_vis), min(hi, x_vis)
                if hi > lo:
                    reachable.append((col, lo, hi))
            if not reachable:
                continue
            col, lo, hi = reachable[int(rng.integers(0, len(reachable)))]
            x = float(rng.uniform(lo, hi))
            if (row, col) in taken:
                continue
            taken.add((row, col))
            row_f = (z - z_lo) / (z_hi - z_lo) * gh
            col_f = (x + x_ext) / (2 * x_ext) * gw
            size = 1.6 + 0.4 * cat
            offset = (row_f - row - 0.5, col_f - col - 0.5)
            objects.append(SceneObject(view, cat, z, x, size, (row, col), offset))
            break
    return objects


def _paint_objects(
    spec: SceneSpec,
    cams: Sequence[CameraConfig],
    images: list[np.ndarray],
    depths: list[np.ndarray],
    objects: list[SceneObject],
) -> list[SceneObject]:
    """Far-to-near painting; objects that end up fully occluded are dropped."""
    h0, w0 = spec.image_hw
    palette = _PALETTES[spec.layout_style]
    shade_rng = make_rng(spec.seed, "shades")
    shades = {id(obj): 0.9 + 0.2 * shade_rng.random() for obj in objects}
    visible: list[SceneObject] = []
    for obj in sorted(objects, key=lambda o: -o.z):
        cam = cams[obj.view]
        f = cam.intrinsics[0, 0]
        cx, cy = cam.intrinsics[0, 2], cam.intrinsics[1, 2]
        u_c = cx + f * obj.x / obj.z
        v_c = cy + f * (_CAMERA_HEIGHT - obj.size / 2.0) / obj.z
        r = f * (obj.size / 2.0) / obj.z
        u0, u1 = int(np.floor(u_c - r)), int(np.ceil(u_c + r))
        v0, v1 = int(np.floor(v_c - r)), int(np.ceil(v_c + r))
        u0, u1 = max(u0, 0), min(u1, w0 - 1)
        v0, v1 = max(v0, 0), min(v1, h0 - 1)
        if u1 < u0 or v1 < v0:
            continue
        region_depth = depths[obj.view][v0 : v1 + 1, u0 : u1 + 1]
        front = obj.z < region_depth
        if not front.any():
            continue
        color = shades[id(obj)] * np.array(palette[obj.category % len(palette)])
        for c in range(3):
            region = images[obj.view][c, v0 : v1 + 1, u0 : u1 + 1]
            region[front] = np.clip(color[c], 0.0, 1.0)
        region_depth[front] = obj.z
        visible.append(obj)
    return visible


def generate_scene(spec: SceneSpec) -> SceneSample:
    """Render one deterministic multi-view sample with labels and lidar."""
    cams = [_view_camera(spec, v) for v in range(spec.view_count)]
    images, depths = [], []
    for v, cam in enumerate(cams):
        image, depth = _render_background(spec, cam, v)
        images.append(image)
        depths.append(depth)
    objects = _place_objects(spec, cams)
    visible = _paint_objects(spec, cams, images, depths, objects)
    visible.sort(key=lambda o: o.cell)
    lidar = []
    for v in range(spec.view_count):
        half = depths[v][::2, ::2]
        lidar_map, _ = sample_lidar(
            half, spec.lidar_density, spec.bin_edges, derive_seed(spec.seed, "lidar", v)
        )
        lidar.append(lidar_map)
    cells = np.array([[o.cell[0], o.cell[1]] for o in visible], dtype=float).reshape(-1, 2)
    offsets = np.array([[o.offset[0], o.offset[1]] for o in visible], dtype=float).reshape(-1, 2)
    classes = np.array([o.category for o in visible], dtype=float)
    return SceneSample(
        images=images,
        cams=cams,
        depth_gt=depths,
        lidar=lidar,
        label_cells=cells,
        label_offsets=offsets,
        label_classes=classes,
        grid=spec.grid,
        n_categories=spec.n_categories,
        objects=visible,
    )


def apply_fog(
    image: np.ndarray, depth_gt: np.ndarray, beta: float, airlight: float
) -> np.ndarray:
    """Exponential attenuation toward a constant airlight, clamped to [0, 1]."""
    if beta < 0:
        raise SceneError("extinction must be nonnegative")
    transmittance = np.exp(-beta * depth_gt)[None, :, :]
    out = image * transmittance + airlight * (1.0 - transmittance)
    return np.clip(out, 0.0, 1.0)


def apply_night(image: np.ndarray, gain: float, noise_sigma: float, seed: int) -> np.ndarray:
    """Dim by ``gain`` and add seeded gaussian sensor noise."""
    if not 0.0 < gain <= 1.0:
        raise SceneError("gain must be in (0, 1]")
    out = gain * image
    if noise_sigma > 0:
        rng = make_rng(seed, "night")
        out = out + rng.normal(0.0, noise_sigma, size=image.shape)
    return np.clip(out, 0.0, 1.0)


RAIN_STREAK_LEN = 5


def apply_rain(
    image: np.ndarray, streak_density: float, noise_sigma: float, seed: int
) -> np.ndarray:
    """Bright diagonal streaks covering about ``streak_density`` of pixels."""
    if streak_density < 0:
        raise SceneError("streak density must be nonnegative")
    out = image.copy()
    _, h, w = image.shape
    if streak_density > 0:
        rng = make_rng(seed, "rain")
        interior_h, interior_w = h - RAIN_STREAK_LEN, w - RAIN_STREAK_LEN
        if interior_h > 0 and interior_w > 0:
            seeds = rng.random((interior_h, interior_w)) < streak_density / RAIN_STREAK_LEN
            mask = np.zeros((h, w), dtype=bool)
            rows, cols = np.nonzero(seeds)
            for k in range(RAIN_STREAK_LEN):
                mask[rows + k, cols + k] = True
            out = np.where(mask[None, :, :], 0.2 * out + 0.8, out)
    if noise_sigma > 0:
        rng_noise = make_rng(seed, "rain_noise")
        out = out + rng_noise.normal(0.0, noise_sigma, size=image.shape)
    return np.clip(out, 0.0, 1.0)


def sample_lidar(
    depth_gt: np.ndarray, density: float, bin_edges: np.ndarray, seed: int
) -> tuple[LidarDepthMap, int]:
    """Seeded sparse one-hot returns; out-of-range depths are dropped and counted."""
    if not 0.0 < density <= 1.0:
        raise SceneError(f"density must be in (0, 1], got {density}")
    h, w = depth_gt.shape
    edges = np.asarray(bin_edges, dtype=np.float64)
    c_d = len(edges) - 1
    rng = make_rng(seed, "lidar")
    observed = rng.random((h, w)) < density
    in_range = (depth_gt >= edges[0]) & (depth_gt <= edges[-1])
    dropped = int((observed & ~in_range).sum())
    observed = observed & in_range
    bins = np.clip(np.searchsorted(edges, depth_gt, side="right") - 1, 0, c_d - 1)
    onehot = np.zeros((c_d, h, w))
    rows, cols = np.nonzero(observed)
    onehot[bins[rows, cols], rows, cols] = 1.0
    return LidarDepthMap(TensorRecord(onehot), observed), dropped


def apply_shift(sample: SceneSample, shift: DomainShift, seed: int) -> SceneSample:
    """Corrupt images only; everything else is carried through untouched."""
    if shift.kind == "none":
        return sample
    images = []
    for v, image in enumerate(sample.images):
        view_seed = derive_seed(seed, "shift", v)
        if shift.kind == "fog":
            images.append(apply_fog(image, sample.depth_gt[v], shift.fog_beta, shift.fog_airlight))
        elif shift.kind == "night":
            images.append(apply_night(image, shift.night_gain, shift.night_noise, view_seed))
        else:
            images.append(apply_rain(image, shift.rain_density, shift.rain_noise, view_seed))
    return replace(sample, images=images)


# ---------------------------------------------------------------------------
# Corpus files
# ---------------------------------------------------------------------------

CORPUS_MAGIC = b"BVCP"
CORPUS_VERSION = 1
SEAL_MARKER = b"SEAL"


@dataclass
class CorpusScene:
    images: list[np.ndarray]
    cams: list[CameraConfig]
    depth_gt: list[np.ndarray]
    lidar: list[LidarDepthMap]
    labels: CellLabels | None  # open labels; None for unlabeled corpora


@dataclass
class Corpus:
    header: dict
    scenes: list[CorpusScene]
    path: str

    @property
    def grid(self) -> tuple[int, int]:
        return tuple(self.header["grid"])

    @property
    def n_categories(self) -> int:
        return int(self.header["n_categories"])

    @property
    def bin_edges(self) -> np.ndarray:
        return np.asarray(self.header["bin_edges"], dtype=np.float64)


def _scene_entries(sample: SceneSample, labeled: bool) -> dict[str, TensorRecord]:
    entries: dict[str, TensorRecord] = {}
    for v in range(len(sample.images)):
        entries[f"image.{v}"] = TensorRecord(sample.images[v])
        entries[f"intrinsics.{v}"] = TensorRecord(sample.cams[v].intrinsics)
        entries[f"depth.{v}"] = TensorRecord(sample.depth_gt[v])
        entries[f"lidar_onehot.{v}"] = sample.lidar[v].tensor
        entries[f"lidar_mask.{v}"] = TensorRecord(sample.lidar[v].mask.astype(np.float64))
    if labeled:
        entries.update(_label_entries(sample))
    return entries


def _label_entries(sample: SceneSample) -> dict[str, TensorRecord]:
    return {
        "labels.cells": TensorRecord(sample.label_cells),
        "labels.offsets": TensorRecord(sample.label_offsets),
        "labels.classes": TensorRecord(sample.label_classes),
    }


def _write_block(stream, blob: bytes) -> None:
    stream.write(struct.pack("<I", len(blob)))
    stream.write(blob)


def _read_block(stream) -> bytes:
    raw = stream.read(4)
    if len(raw) != 4:
        raise CheckpointError("truncated corpus block")
    (n,) = struct.unpack("<I", raw)
    blob = stream.read(n)
    if len(blob) != n:
        raise CheckpointError("truncated corpus block body")
    return blob


def build_corpus(
    spec: SceneSpec,
    shift: DomainShift,
    n_scenes: int,
    seed: int,
    path: str | os.PathLike,
    labeled: bool = True,
) -> dict:
    """Generate, corrupt, and write a corpus; returns the header written.

    Labels always land in the sealed trailer; labeled corpora repeat them
    in the open records. Writing is atomic (temp file, then rename).
    """
    if n_scenes < 1:
        raise SceneError("need at least one scene")
    header = {
        "format": CORPUS_VERSION,
        "kind": "labeled" if labeled else "unlabeled",
        "n_scenes": n_scenes,
        "seed": seed,
        "spec": {
            "n_objects": spec.n_objects,
            "layout_style": spec.layout_style,
            "view_count": spec.view_count,
            "image_hw": list(spec.image_hw),
            "depth_range": list(spec.depth_range),
            "depth_bins": spec.depth_bins,
            "place_depth": list(spec.place_depth),
            "lidar_density": spec.lidar_density,
        },
        "grid": list(spec.grid),
        "n_categories": spec.n_categories,
        "bin_edges": [float(e) for e in spec.bin_edges],
        "shift": {
            "kind": shift.kind,
            "level": shift.level,
            "fog_beta0": shift.fog_beta0,
            "fog_airlight": shift.fog_airlight,
            "night_gain": shift.night_gain,
            "night_noise": shift.night_noise,
            "rain_density": shift.rain_density,
            "rain_noise": shift.rain_noise,
        },
    }
    out = io.BytesIO()
    out.write(CORPUS_MAGIC)
    out.write(struct.pack("<I", CORPUS_VERSION))
    header_blob = json.dumps(header, sort_keys=True).encode("utf-8")
    _write_block(out, header_blob)
    out.write(struct.pack("<I", n_scenes))
    sealed_blobs = []
    for i in range(n_scenes):
        scene_spec = replace(spec, seed=derive_seed(seed, "scene", i))
        sample = generate_scene(scene_spec)
        shifted = apply_shift(sample, shift, derive_seed(seed, "shift", i))
        _write_block(out, dump_entries(_scene_entries(shifted, labeled)))
        sealed_blobs.append(dump_entries(_label_entries(shifted)))
    out.write(SEAL_MARKER)
    for blob in sealed_blobs:
        _write_block(out, blob)
    path = os.fspath(path)
    tmp = path + ".tmp"
    with open(tmp, "wb") as fh:
        fh.write(out.getvalue())
    os.replace(tmp, path)
    return header


def _labels_from_entries(
    entries: dict[str, TensorRecord], grid: tuple[int, int], n_categories: int
) -> CellLabels:
    return CellLabels.from_objects(
        entries["labels.cells"].array,
        entries["labels.offsets"].array,
        entries["labels.classes"].array,
        grid,
        n_categories,
    )


def load_corpus(path: str | os.PathLike) -> Corpus:
    """Read the open section; sealed evaluation labels are not touched."""
    path = os.fspath(path)
    with open(path, "rb") as fh:
        if fh.read(4) != CORPUS_MAGIC:
            raise CheckpointError(f"{path} is not a corpus file")
        (version,) = struct.unpack("<I", fh.read(4))
        if version != CORPUS_VERSION:
            raise CheckpointError(f"unsupported corpus version {version}")
        header = json.loads(_read_block(fh).decode("utf-8"))
        (n_scenes,) = struct.unpack("<I", fh.read(4))
        grid = tuple(header["grid"])
        n_categories = int(header["n_categories"])
        labeled = header["kind"] == "labeled"
        scenes = []
        for _ in range(n_scenes):
            entries, _ = parse_entries(io.BytesIO(_read_block(fh)))
            views = sorted(
                int(k.split(".", 1)[1]) for k in entries if k.startswith("image.")
            )
            images = [entries[f"image.{v}"].array for v in views]
            cams = [CameraConfig(entries[f"intrinsics.{v}"].array, v) for v in views]
            depth = [entries[f"depth.{v}"].array for v in views]
            lidar = [
                LidarDepthMap(
                    entries[f"lidar_onehot.{v}"],
                    entries[f"lidar_mask.{v}"].array > 0.5,
                )
                for v in views
            ]
            labels = _labels_from_entries(entries, grid, n_categories) if labeled else None
            scenes.append(CorpusScene(images, cams, depth, lidar, labels))
    return Corpus(header=header, scenes=scenes, path=path)


def read_sealed_labels(path: str | os.PathLike) -> list[CellLabels]:
    """Evaluation-only access to the sealed label trailer."""
    path = os.fspath(path)
    with open(path, "rb") as fh:
        if fh.read(4) != CORPUS_MAGIC:
            raise CheckpointError(f"{path} is not a corpus file")
        fh.read(4)
        header = json.loads(_read_block(fh).decode("utf-8"))
        (n_scenes,) = struct.unpack("<I", fh.read(4))
        for _ in range(n_scenes):
            _read_block(fh)
        marker = fh.read(4)
        if marker != SEAL_MARKER:
            raise CheckpointError("corpus has no sealed label section")
        out = []
        grid = tuple(header["grid"])
        n_categories = int(header["n_categories"])
        for _ in range(n_scenes):
            entries, _ = parse_entries(io.BytesIO(_read_block(fh)))
            out.append(_labels_from_entries(entries, grid, n_categories))
    return out
