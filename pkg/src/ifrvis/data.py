"""Synthetic multi-instance videos with exact masks, clip sampling and the IFRD file format."""

from __future__ import annotations

import json
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

SHAPES = ("circle", "square", "triangle")
MAGIC = b"IFRD"
VERSION = 1


class DatasetFormatError(ValueError):
    """Malformed, truncated or unsupported dataset file."""


class InfeasibleSpecError(ValueError):
    pass


@dataclass
class GeneratorSpec:
    height: int = 64
    width: int = 64
    length: int = 8
    min_instances: int = 2
    max_instances: int = 4
    shapes: tuple = SHAPES
    size_range: tuple = (5.0, 8.0)  # shape radius in pixels
    speed_range: tuple = (0.5, 3.0)  # pixels per frame
    crossing_prob: float = 0.5
    same_category_prob: float = 0.5
    color_jitter: float = 0.08
    noise: float = 0.03

    def __post_init__(self):
        self.shapes = tuple(self.shapes)
        self.size_range = tuple(float(v) for v in self.size_range)
        self.speed_range = tuple(float(v) for v in self.speed_range)

    def validate(self) -> None:
        if self.height % 4 or self.width % 4 or self.height < 8 or self.width < 8:
            raise InfeasibleSpecError(f"frame size {self.height}x{self.width} must be >= 8 and divisible by 4")
        if self.length < 1:
            raise InfeasibleSpecError("video length must be >= 1")
        if not 1 <= self.min_instances <= self.max_instances:
            raise InfeasibleSpecError("instance counts must satisfy 1 <= min <= max")
        if not self.shapes or any(s not in SHAPES for s in self.shapes):
            raise InfeasibleSpecError(f"shapes must be drawn from {SHAPES}")
        lo, hi = self.size_range
        if not 0 < lo <= hi or 2 * hi >= min(self.height, self.width) / 2:
            raise InfeasibleSpecError(f"size range {self.size_range} does not fit a {self.height}x{self.width} frame")
        slo, shi = self.speed_range
        if not 0 <= slo <= shi:
            raise InfeasibleSpecError("speed range must satisfy 0 <= lo <= hi")
        span = min(self.height, self.width) - 2 * hi
        if slo * max(self.length - 1, 1) > span:
            raise InfeasibleSpecError("minimum speed moves every shape out of frame")
        for p in (self.crossing_prob, self.same_category_prob):
            if not 0.0 <= p <= 1.0:
                raise InfeasibleSpecError("probabilities must lie in [0, 1]")
        if self.color_jitter < 0 or self.noise < 0:
            raise InfeasibleSpecError("jitter and noise must be non-negative")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["shapes"] = list(self.shapes)
        d["size_range"] = list(self.size_range)
        d["speed_range"] = list(self.speed_range)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "GeneratorSpec":
        return cls(**d)


@dataclass
class VideoSample:
    frames: np.ndarray  # [T, H, W, 3] float32 in [0, 1]
    categories: np.ndarray  # [K] int64
    masks: np.ndarray  # [K, T, H, W] bool, visible pixels
    instance_ids: np.ndarray  # [K] int64
    metadata: dict = field(default_factory=dict)

    @property
    def length(self) -> int:
        return self.frames.shape[0]

    @property
    def num_instances(self) -> int:
        return len(self.categories)

    def equals(self, other: "VideoSample") -> bool:
        return (
            np.array_equal(self.frames, other.frames)
            and self.frames.dtype == other.frames.dtype
            and np.array_equal(self.categories, other.categories)
            and np.array_equal(self.masks, other.masks)
            and np.array_equal(self.instance_ids, other.instance_ids)
            and self.metadata == other.metadata
        )


# ---------------------------------------------------------------------------
# rendering


def _shape_mask(shape: str, cy: float, cx: float, r: float, H: int, W: int) -> np.ndarray:
    ys = np.arange(H)[:, None] + 0.5
    xs = np.arange(W)[None, :] + 0.5
    dy, dx = ys - cy, xs - cx
    if shape == "circle":
        return dy * dy + dx * dx <= r * r
    if shape == "square":
        h = 0.9 * r
        return (np.abs(dy) <= h) & (np.abs(dx) <= h)
    # upward triangle with circumradius 1.15 r
    R = 1.15 * r
    angles = np.deg2rad([-90.0, 30.0, 150.0])
    vy, vx = cy + R * np.sin(angles), cx + R * np.cos(angles)
    inside = np.ones((H, W), dtype=bool)
    for k in range(3):
        ay, ax = vy[k], vx[k]
        by, bx = vy[(k + 1) % 3], vx[(k + 1) % 3]
        inside &= (bx - ax) * (ys - ay) - (by - ay) * (xs - ax) >= 0
    return inside


def _start_interval(v: float, lo: float, hi: float, steps: int) -> tuple[float, float]:
    travel = v * steps
    return lo - min(0.0, travel), hi - max(0.0, travel)


def _free_trajectory(rng, spec: GeneratorSpec, r: float):
    steps = spec.length - 1
    for _ in range(100):
        speed = rng.uniform(*spec.speed_range)
        ang = rng.uniform(0, 2 * np.pi)
        vy, vx = speed * np.sin(ang), speed * np.cos(ang)
        y0, y1 = _start_interval(vy, r, spec.height - r, steps)
        x0, x1 = _start_interval(vx, r, spec.width - r, steps)
        if y0 <= y1 and x0 <= x1:
            return (rng.uniform(y0, y1), rng.uniform(x0, x1)), (vy, vx)
    raise InfeasibleSpecError("could not place a trajectory inside the frame")


def _crossing_pair(rng, spec: GeneratorSpec, ra: float, rb: float):
    """Two trajectories that meet at a common point at a common (fractional) time."""
    steps = spec.length - 1
    rmax = max(ra, rb)
    for _ in range(200):
        tc = rng.uniform(0.25 * steps, 0.75 * steps) if steps else 0.0
        py = rng.uniform(0.3 * spec.height, 0.7 * spec.height)
        px = rng.uniform(0.3 * spec.width, 0.7 * spec.width)
        ang_a = rng.uniform(0, 2 * np.pi)
        ang_b = ang_a + rng.uniform(np.pi / 3, np.pi) * rng.choice([-1.0, 1.0])
        out = []
        for ang in (ang_a, ang_b):
            speed = rng.uniform(max(spec.speed_range[0], 0.5 * spec.speed_range[1]), spec.speed_range[1])
            v = (speed * np.sin(ang), speed * np.cos(ang))
            c0 = (py - v[0] * tc, px - v[1] * tc)
            ends = [(c0[0] + v[0] * t, c0[1] + v[1] * t) for t in (0, steps)]
            if not all(rmax <= y <= spec.height - rmax and rmax <= x <= spec.width - rmax for y, x in ends):
                break
            out.append((c0, v))
        if len(out) == 2:
            return out, tc
    raise InfeasibleSpecError("could not place a crossing inside the frame")


def generate_video(spec: GeneratorSpec, seed: int) -> VideoSample:
    """Render one video; the result is a pure function of ``(spec, seed)``."""
    spec.validate()
    rng = np.random.default_rng(seed)
    H, W, n = spec.height, spec.width, spec.length
    for _ in range(50):
        K = int(rng.integers(spec.min_instances, spec.max_instances + 1))
        vocab = np.array([SHAPES.index(s) for s in spec.shapes])
        if rng.random() < spec.same_category_prob:
            cats = np.full(K, vocab[rng.integers(len(vocab))])
        else:
            cats = vocab[rng.integers(len(vocab), size=K)]
        radii = rng.uniform(*spec.size_range, size=K)
        tracks: list = [None] * K
        crossings = []
        for a in range(0, K - 1, 2):
            if rng.random() < spec.crossing_prob:
                pair, tc = _crossing_pair(rng, spec, radii[a], radii[a + 1])
                tracks[a], tracks[a + 1] = pair
                crossings.append([a, a + 1, float(tc)])
        for k in range(K):
            if tracks[k] is None:
                tracks[k] = _free_trajectory(rng, spec, radii[k])
        z_order = rng.permutation(K)  # drawn bottom to top
        base = rng.uniform(0.35, 0.95, size=3)
        colors = np.clip(base + rng.uniform(-spec.color_jitter, spec.color_jitter, size=(K, 3)), 0.0, 1.0)
        bg_level = rng.uniform(0.05, 0.25)

        full = np.zeros((K, n, H, W), dtype=bool)
        for k in range(K):
            (y0, x0), (vy, vx) = tracks[k]
            shape = SHAPES[cats[k]]
            for t in range(n):
                full[k, t] = _shape_mask(shape, y0 + vy * t, x0 + vx * t, radii[k], H, W)
        visible = np.zeros_like(full)
        frames = np.empty((n, H, W, 3))
        for t in range(n):
            img = np.full((H, W, 3), bg_level) + rng.normal(0.0, spec.noise, size=(H, W, 3))
            covered = np.zeros((H, W), dtype=bool)
            for k in z_order[::-1]:  # top first
                visible[k, t] = full[k, t] & ~covered
                covered |= full[k, t]
            for k in z_order:
                img[full[k, t]] = colors[k]
            frames[t] = np.clip(img, 0.0, 1.0)
        if visible.reshape(K, -1).any(axis=1).all():
            break
    else:
        raise InfeasibleSpecError("could not render a video where every instance is visible")

    order = np.arange(K)
    meta = {
        "seed": int(seed),
        "spec": spec.to_dict(),
        "categories": [int(c) for c in cats],
        "instance_ids": [int(i) for i in order],
        "tracks": [
            {
                "start": [float(tracks[k][0][0]), float(tracks[k][0][1])],
                "velocity": [float(tracks[k][1][0]), float(tracks[k][1][1])],
                "radius": float(radii[k]),
                "color": [float(c) for c in colors[k]],
            }
            for k in range(K)
        ],
        "z_order": [int(z) for z in z_order],
        "crossings": crossings,
    }
    return VideoSample(frames.astype(np.float32), cats.astype(np.int64), visible, order.astype(np.int64), meta)


def video_seed(base_seed: int, index: int) -> int:
    return int(np.random.SeedSequence([int(base_seed), int(index)]).generate_state(1, np.uint64)[0])


def generate_dataset(spec: GeneratorSpec, count: int, seed: int) -> list:
    return [generate_video(spec, video_seed(seed, i)) for i in range(count)]


def sample_training_clip(video: VideoSample, clip_len: int, rng: np.random.Generator) -> VideoSample:
    """Uniformly placed contiguous window; instances absent from the whole window are dropped."""
    n = video.length
    if not 1 <= clip_len <= n:
        raise ValueError(f"clip length {clip_len} is not in [1, {n}]")
    start = int(rng.integers(0, n - clip_len + 1))
    return slice_video(video, start, clip_len)


def slice_video(video: VideoSample, start: int, clip_len: int) -> VideoSample:
    sl = slice(start, start + clip_len)
    masks = video.masks[:, sl]
    keep = masks.reshape(len(masks), -1).any(axis=1)
    meta = dict(video.metadata)
    meta["clip_start"] = int(start)
    return VideoSample(
        video.frames[sl],
        video.categories[keep],
        masks[keep],
        video.instance_ids[keep],
        meta,
    )


def downsample_masks(masks: np.ndarray, factor: int = 4) -> np.ndarray:
    """Area-majority pooling of ``[..., H, W]`` binary masks (a cell is on when >= half its pixels are)."""
    H, W = masks.shape[-2:]
    blocks = masks.reshape(masks.shape[:-2] + (H // factor, factor, W // factor, factor))
    return blocks.mean(axis=(-3, -1)) >= 0.5


# ---------------------------------------------------------------------------
# run-length encoding


def rle_encode(mask: np.ndarray) -> np.ndarray:
    """Row-major run lengths alternating zeros/ones, starting with the (possibly empty) zero run."""
    flat = np.asarray(mask, dtype=bool).ravel()
    if flat.size == 0:
        return np.zeros(0, dtype=np.uint32)
    change = np.flatnonzero(flat[1:] != flat[:-1]) + 1
    bounds = np.concatenate([[0], change, [flat.size]])
    runs = np.diff(bounds)
    if flat[0]:
        runs = np.concatenate([[0], runs])
    return runs.astype(np.uint32)


def rle_decode(runs, shape) -> np.ndarray:
    runs = np.asarray(runs, dtype=np.int64)
    total = int(np.prod(shape))
    if runs.sum() != total:
        raise DatasetFormatError(f"run lengths sum to {runs.sum()}, expected {total}")
    values = np.arange(len(runs)) % 2 == 1
    return np.repeat(values, runs).reshape(shape)


# ---------------------------------------------------------------------------
# IFRD files


def dumps_dataset(samples: Sequence[VideoSample]) -> bytes:
    parts = [MAGIC, struct.pack("<IQ", VERSION, len(samples))]
    for s in samples:
        T_, H, W, _ = s.frames.shape
        block = {
            "seed": s.metadata.get("seed"),
            "categories": [int(c) for c in s.categories],
            "instance_ids": [int(i) for i in s.instance_ids],
            "frame_shape": [int(T_), int(H), int(W)],
            "metadata": s.metadata,
        }
        raw = json.dumps(block, sort_keys=True).encode("utf-8")
        parts.append(struct.pack("<Q", len(raw)))
        parts.append(raw)
        parts.append(np.ascontiguousarray(s.frames, dtype="<f4").tobytes())
        for k in range(s.num_instances):
            for t in range(T_):
                runs = rle_encode(s.masks[k, t])
                parts.append(struct.pack("<I", len(runs)))
                parts.append(runs.astype("<u4").tobytes())
    return b"".join(parts)


def loads_dataset(buf: bytes) -> list:
    view = memoryview(buf)
    pos = 0

    def read(n: int) -> memoryview:
        nonlocal pos
        if pos + n > len(view):
            raise DatasetFormatError("truncated dataset file")
        out = view[pos : pos + n]
        pos += n
        return out

    if bytes(read(4)) != MAGIC:
        raise DatasetFormatError("bad magic, not an IFRD dataset file")
    version, count = struct.unpack("<IQ", read(12))
    if version != VERSION:
        raise DatasetFormatError(f"unsupported dataset version {version} (expected {VERSION})")
    samples = []
    for _ in range(count):
        (mlen,) = struct.unpack("<Q", read(8))
        try:
            block = json.loads(bytes(read(mlen)).decode("utf-8"))
            T_, H, W = block["frame_shape"]
            cats = np.asarray(block["categories"], dtype=np.int64)
            ids = np.asarray(block["instance_ids"], dtype=np.int64)
            meta = block["metadata"]
        except (UnicodeDecodeError, json.JSONDecodeError, KeyError, ValueError) as err:
            raise DatasetFormatError(f"corrupt sample metadata: {err}") from None
        frames = np.frombuffer(read(4 * T_ * H * W * 3), dtype="<f4").reshape(T_, H, W, 3).astype(np.float32)
        masks = np.zeros((len(cats), T_, H, W), dtype=bool)
        for k in range(len(cats)):
            for t in range(T_):
                (nruns,) = struct.unpack("<I", read(4))
                runs = np.frombuffer(read(4 * nruns), dtype="<u4")
                masks[k, t] = rle_decode(runs, (H, W))
        samples.append(VideoSample(frames, cats, masks, ids, meta))
    if pos != len(view):
        raise DatasetFormatError("trailing bytes after last sample")
    return samples


def write_dataset(path, samples: Sequence[VideoSample]) -> None:
    Path(path).write_bytes(dumps_dataset(samples))


def read_dataset(path) -> list:
    return loads_dataset(Path(path).read_bytes())
