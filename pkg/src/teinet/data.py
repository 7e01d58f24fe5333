"""Seeded synthetic sprite videos and TSN-style segment sampling.

Three tasks are generated:

``direction4``
    An identical sprite moves left, right, up or down at constant speed. Any
    single frame says nothing about the class; only frame order does.
``appearance2``
    Square vs. disc sprite with a random motion direction. Class is visible in
    every frame.
``combined8``
    Shape x direction.
"""
from dataclasses import asdict, dataclass

import numpy as np

from .binio import DATASET_MAGIC, Reader, Writer
from .errors import ContractError, FormatError

TASKS = ("direction4", "appearance2", "combined8")
DIRECTIONS = ("left", "right", "up", "down")
SHAPES = ("square", "disc")
# unit (dx, dy) per direction, y grows downward
_DIR_VECTORS = {"left": (-1.0, 0.0), "right": (1.0, 0.0), "up": (0.0, -1.0), "down": (0.0, 1.0)}

_BACKGROUND = 0.3
_SPRITE_RGB = np.array([0.95, 0.85, 0.25])


@dataclass(frozen=True)
class SyntheticVideoConfig:
    task: str = "direction4"
    raw_frames: int = 32
    spatial: int = 32
    shape: str = "square"
    sprite_size: int = 5
    speed: float = 0.35
    noise_std: float = 0.05
    texture_amp: float = 0.1
    texture_seed: int = 0
    margin: float = 3.0
    seed: int = 0

    def validate(self):
        if self.task not in TASKS:
            raise ContractError(f"unknown task {self.task!r}; valid tasks: {', '.join(TASKS)}")
        if self.shape not in SHAPES:
            raise ContractError(f"unknown sprite shape {self.shape!r}; valid: {', '.join(SHAPES)}")
        if self.raw_frames < 1 or self.spatial < 2 or self.sprite_size < 1:
            raise ContractError("raw_frames, spatial and sprite_size must be positive")
        if min(self.speed, self.noise_std, self.texture_amp, self.margin) < 0:
            raise ContractError("speed, noise_std, texture_amp and margin must be nonnegative")
        # one extra pixel for the bilinear footprint
        need = self.speed * self.raw_frames + self.sprite_size + 1 + 2 * self.margin
        if need > self.spatial:
            raise ContractError(
                f"sprite leaves the frame: speed*raw_frames + size + 1 + 2*margin = "
                f"{need} > spatial {self.spatial}")
        return self

    @property
    def num_classes(self):
        return len(class_names(self.task))

    def to_dict(self):
        return asdict(self)


def class_names(task):
    if task == "direction4":
        return list(DIRECTIONS)
    if task == "appearance2":
        return list(SHAPES)
    if task == "combined8":
        return [f"{s}-{d}" for s in SHAPES for d in DIRECTIONS]
    raise ContractError(f"unknown task {task!r}; valid tasks: {', '.join(TASKS)}")


class ClipDataset:
    """Stacked videos ``[N, T_raw, 3, H, W]`` (float32) with integer labels."""

    def __init__(self, videos, labels, num_classes, task="", split=""):
        videos = np.ascontiguousarray(videos, dtype=np.float32)
        labels = np.asarray(labels, dtype=np.int64)
        if videos.ndim != 5 or videos.shape[2] != 3:
            raise ContractError(f"videos must be [N, T, 3, H, W], got {videos.shape}")
        if labels.shape != (videos.shape[0],):
            raise ContractError(f"{videos.shape[0]} videos but {labels.shape} labels")
        if labels.size and (labels.min() < 0 or labels.max() >= num_classes):
            raise ContractError(f"labels outside [0, {num_classes})")
        self.videos = videos
        self.labels = labels
        self.num_classes = num_classes
        self.task = task
        self.split = split

    def __len__(self):
        return len(self.labels)

    def __getitem__(self, i):
        return self.videos[i], int(self.labels[i])

    def class_counts(self):
        return np.bincount(self.labels, minlength=self.num_classes)

    def subset(self, indices):
        return ClipDataset(self.videos[indices], self.labels[indices], self.num_classes,
                           self.task, self.split)


def _sprite_mask(shape, size):
    if shape == "square":
        return np.ones((size, size))
    yy, xx = np.mgrid[0:size, 0:size] + 0.5
    r = size / 2
    return (((yy - r) ** 2 + (xx - r) ** 2) <= r * r).astype(float)


def _splat(canvas, mask, x, y):
    """Bilinearly splat ``mask`` with its top-left corner at sub-pixel (x, y)."""
    ix, iy = int(np.floor(x)), int(np.floor(y))
    fx, fy = x - ix, y - iy
    s = mask.shape[0]
    canvas[iy:iy + s, ix:ix + s] += (1 - fx) * (1 - fy) * mask
    canvas[iy:iy + s, ix + 1:ix + 1 + s] += fx * (1 - fy) * mask
    canvas[iy + 1:iy + 1 + s, ix:ix + s] += (1 - fx) * fy * mask
    canvas[iy + 1:iy + 1 + s, ix + 1:ix + 1 + s] += fx * fy * mask


def render_video(cfg, shape, velocity, center, rng, texture_rng=None):
    """Render one clip. ``center`` is the sprite's top-left corner at the middle frame.

    The background texture is static within the clip; pixel noise is i.i.d. per frame.
    """
    t_raw, hw = cfg.raw_frames, cfg.spatial
    mask = _sprite_mask(shape, cfg.sprite_size)
    texture_rng = texture_rng if texture_rng is not None else rng
    texture = cfg.texture_amp * (texture_rng.random((3, hw, hw)) - 0.5)
    frames = np.empty((t_raw, 3, hw, hw))
    mid = (t_raw - 1) / 2
    for t in range(t_raw):
        alpha = np.zeros((hw, hw))
        _splat(alpha, mask, center[0] + velocity[0] * (t - mid), center[1] + velocity[1] * (t - mid))
        alpha = np.minimum(alpha, 1.0)
        bg = _BACKGROUND + texture
        frames[t] = bg * (1 - alpha) + _SPRITE_RGB[:, None, None] * alpha
    frames += rng.normal(0.0, cfg.noise_std, size=frames.shape)
    return frames.astype(np.float32)


def _center_range(cfg):
    half_travel = cfg.speed * (cfg.raw_frames - 1) / 2
    return cfg.margin + half_travel, cfg.spatial - cfg.sprite_size - 1 - half_travel - cfg.margin


def _video_params(cfg, label, rng):
    if cfg.task == "direction4":
        shape, direction = cfg.shape, DIRECTIONS[label]
    elif cfg.task == "appearance2":
        shape, direction = SHAPES[label], None
    else:
        shape, direction = SHAPES[label // 4], DIRECTIONS[label % 4]
    if direction is None:
        angle = rng.uniform(0, 2 * np.pi)
        unit = (np.cos(angle), np.sin(angle))
    else:
        unit = _DIR_VECTORS[direction]
    velocity = (cfg.speed * unit[0], cfg.speed * unit[1])
    lo, hi = _center_range(cfg)
    # both axes drawn from the same range so horizontal and vertical classes are mirror images
    center = [rng.uniform(lo, hi), rng.uniform(lo, hi)]
    if direction is not None:
        # Over a clip the moving coordinate sweeps +-half_travel around its
        # centre. Jittering the static coordinate by the same uniform amount
        # gives both axes the same time-averaged distribution, so a frame's
        # position says nothing about the motion axis.
        half_travel = cfg.speed * (cfg.raw_frames - 1) / 2
        static = 1 if unit[1] == 0 else 0
        center[static] += rng.uniform(-half_travel, half_travel)
    return shape, velocity, tuple(center)


def generate_dataset(cfg, n_per_class, split_seed=0, split="train"):
    """Balanced dataset with exactly ``n_per_class`` clips per class.

    Clip ``i`` has label ``i % num_classes`` and draws its motion and noise from
    a generator seeded by ``(cfg.seed, split_seed, i)``; its background texture
    additionally depends on ``cfg.texture_seed``.
    """
    cfg.validate()
    if n_per_class < 1:
        raise ContractError(f"n_per_class must be >= 1, got {n_per_class}")
    k = cfg.num_classes
    n = n_per_class * k
    videos = np.empty((n, cfg.raw_frames, 3, cfg.spatial, cfg.spatial), dtype=np.float32)
    labels = np.arange(n) % k
    for i in range(n):
        rng = np.random.default_rng([cfg.seed, split_seed, i])
        shape, velocity, center = _video_params(cfg, int(labels[i]), rng)
        texture_rng = np.random.default_rng([cfg.texture_seed, cfg.seed, split_seed, i])
        videos[i] = render_video(cfg, shape, velocity, center, rng, texture_rng)
    return ClipDataset(videos, labels, k, task=cfg.task, split=split)


def sample_indices(t_raw, t, mode="eval", rng=None):
    """Segment-based frame indices: one per equal segment of ``[0, t_raw)``.

    Eval mode takes the floor of each segment's midpoint; train mode picks an
    index uniformly inside each segment.
    """
    if t < 1 or t > t_raw:
        raise ContractError(f"cannot sample {t} frames from a {t_raw}-frame video")
    k = np.arange(t)
    if mode == "eval":
        return (2 * k + 1) * t_raw // (2 * t)
    if mode == "train":
        if rng is None:
            raise ContractError("train-mode sampling needs a random generator")
        lo = -((-k * t_raw) // t)
        hi = -((-(k + 1) * t_raw) // t)
        return rng.integers(lo, hi)
    raise ContractError(f"unknown sampling mode {mode!r}; expected 'train' or 'eval'")


def uniform_sample_frames(video, t, mode="eval", seed=None):
    """Select ``t`` frames from ``video`` (first axis is time). ``seed`` may be a Generator."""
    rng = seed if isinstance(seed, np.random.Generator) else (
        np.random.default_rng(seed) if seed is not None else None)
    return video[sample_indices(len(video), t, mode, rng)]


# ---------------------------------------------------------------- file format
#
#   "TEID" | version u32 | count u32 | num_classes u32 | task str | split str
#   | rank u32 | extents u32 * rank | labels u8 * count | float32 * count * prod(extents)
#
# strings are (u32 byte length, utf-8 bytes); everything little-endian.

def header_size(ds):
    rank = ds.videos.ndim - 1
    return 4 + 4 + 4 + 4 + (4 + len(ds.task.encode())) + (4 + len(ds.split.encode())) + 4 + 4 * rank


def save_dataset(ds, path):
    if ds.num_classes > 256:
        raise ContractError("dataset format stores labels as single bytes (<= 256 classes)")
    with open(path, "wb") as fh:
        w = Writer(fh)
        w.header(DATASET_MAGIC)
        w.u32(len(ds))
        w.u32(ds.num_classes)
        w.text(ds.task)
        w.text(ds.split)
        w.shape(ds.videos.shape[1:])
        w.raw(ds.labels.astype(np.uint8).tobytes())
        w.f32(ds.videos)


def load_dataset(path):
    with open(path, "rb") as fh:
        r = Reader(fh.read())
    r.header(DATASET_MAGIC)
    count = r.u32("video count")
    num_classes = r.u32("class count")
    task = r.text("task")
    split = r.text("split")
    shape = r.shape("video")
    at = r.pos
    labels = np.frombuffer(r.take(count, "labels"), dtype=np.uint8).astype(np.int64)
    if count and labels.max() >= num_classes:
        raise FormatError(f"label {labels.max()} out of range for {num_classes} classes", at)
    per_video = int(np.prod(shape, dtype=np.int64))
    videos = r.f32(count * per_video, "video data").reshape((count,) + shape)
    r.expect_end()
    return ClipDataset(videos, labels, num_classes, task=task, split=split)
