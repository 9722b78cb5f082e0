import logging
import os
import re
import threading
from collections import OrderedDict
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Callable, Iterable, List, Optional, Sequence, Tuple

import numpy as np
from PIL import Image, UnidentifiedImageError

from models.clip_info import Clip, ManifestEntry, SamplingPolicy, VideoSource
from models.configs import DEFAULT_NORM_MEAN, DEFAULT_NORM_STD
from models.errors import FrameDecodeError, ValidationError
from services.tensor import Tensor, get_default_dtype

logger = logging.getLogger(__name__)

DEFAULT_CACHE_LIMIT = 8192

_PPM_HEADER = re.compile(rb"^P6\s+(?:#[^\n]*\n\s*)*(\d+)\s+(?:#[^\n]*\n\s*)*(\d+)\s+(?:#[^\n]*\n\s*)*(\d+)\s")


@dataclass(frozen=True)
class HFlip:
    """Clip-level horizontal flip with probability ``p``, one draw per clip."""
    p: float = 0.5
    seed: int = 0

    def __post_init__(self):
        if not 0.0 <= self.p <= 1.0:
            raise ValidationError(f"Flip probability must be within [0, 1], got {self.p}")

    def draw(self) -> bool:
        return bool(np.random.default_rng(self.seed).random() < self.p)


def sample_indices(total: int, policy: SamplingPolicy) -> List[int]:
    """Pick ``policy.count`` frame indices at ``policy.stride``; short videos loop modulo ``total``."""
    if total < 1:
        raise ValidationError(f"Video needs at least one frame, got {total}")
    span = policy.span
    if total < span:
        return [(i * policy.stride) % total for i in range(policy.count)]
    if policy.placement == "center":
        start = (total - span) // 2
    elif policy.placement == "random":
        start = int(np.random.default_rng(policy.seed).integers(0, total - span + 1))
    else:
        start = 0
    return [start + i * policy.stride for i in range(policy.count)]


def resize_bilinear(frame, out_h: int, out_w: int) -> np.ndarray:
    """
    Bilinear resize of an H x W x C image with half-pixel centers and edge clamping.

    Returns a float64 image; values stay inside the input range.
    """
    frame = np.asarray(frame)
    if frame.ndim == 2:
        frame = frame[:, :, None]
    if frame.ndim != 3 or frame.shape[0] < 1 or frame.shape[1] < 1:
        raise ValidationError(f"Cannot resize a frame of shape {frame.shape}")
    if out_h < 1 or out_w < 1:
        raise ValidationError(f"Target size must be positive, got {out_h}x{out_w}")
    in_h, in_w = frame.shape[:2]
    src = frame.astype(np.float64)

    def axis_weights(n_in, n_out):
        coords = (np.arange(n_out) + 0.5) * (n_in / n_out) - 0.5
        coords = np.clip(coords, 0, n_in - 1)
        lo = np.floor(coords).astype(np.int64)
        hi = np.minimum(lo + 1, n_in - 1)
        return lo, hi, coords - lo

    r0, r1, fr = axis_weights(in_h, out_h)
    c0, c1, fc = axis_weights(in_w, out_w)
    rows = src[r0] * (1.0 - fr)[:, None, None] + src[r1] * fr[:, None, None]
    return rows[:, c0] * (1.0 - fc)[None, :, None] + rows[:, c1] * fc[None, :, None]


def hflip(frame):
    """Reverse column order of every row; channels untouched."""
    return np.ascontiguousarray(np.asarray(frame)[:, ::-1])


def normalize(clip, mean=DEFAULT_NORM_MEAN, std=DEFAULT_NORM_STD) -> np.ndarray:
    """out[c, ...] = (in[c, ...] / 255 - mean[c]) / std[c] for a channel-first array."""
    clip = np.asarray(clip, dtype=np.float64)
    if len(mean) != clip.shape[0] or len(std) != clip.shape[0]:
        raise ValidationError(f"Need {clip.shape[0]} channel statistics, got {len(mean)}/{len(std)}")
    shape = (-1,) + (1,) * (clip.ndim - 1)
    mean = np.asarray(mean, dtype=np.float64).reshape(shape)
    std = np.asarray(std, dtype=np.float64).reshape(shape)
    return (clip / 255.0 - mean) / std


def write_ppm(path, frame):
    frame = np.asarray(frame)
    if frame.dtype != np.uint8 or frame.ndim != 3 or frame.shape[2] != 3:
        raise ValidationError(f"PPM frames must be uint8 H x W x 3, got {frame.dtype} {frame.shape}")
    Image.fromarray(np.ascontiguousarray(frame)).save(path, format="PPM")


def read_ppm(path) -> np.ndarray:
    """Decode a binary PPM (P6, maxval 255) into an H x W x 3 uint8 array."""
    if not os.path.isfile(path):
        raise FrameDecodeError(f"Missing frame file {path}")
    with open(path, "rb") as f:
        head = f.read(512)
    match = _PPM_HEADER.match(head)
    if match is None:
        raise FrameDecodeError(f"Malformed PPM header in {path}: expected P6")
    if int(match.group(3)) != 255:
        raise FrameDecodeError(f"Unsupported PPM maxval {int(match.group(3))} in {path}")
    try:
        with Image.open(path) as img:
            img.load()
            if img.mode != "RGB":
                raise FrameDecodeError(f"PPM {path} decoded as {img.mode}, expected RGB")
            return np.asarray(img, dtype=np.uint8).copy()
    except (UnidentifiedImageError, OSError, SyntaxError, ValueError) as e:
        raise FrameDecodeError(f"Could not decode {path}: {e}") from e


def load_clip(src: VideoSource, policy: SamplingPolicy, augment: Optional[HFlip] = None,
              target: Tuple[int, int] = (224, 224), stats=(DEFAULT_NORM_MEAN, DEFAULT_NORM_STD),
              label: int = 0, source_id: Optional[str] = None, tri_label: Optional[str] = None,
              reader: Callable = read_ppm) -> Clip:
    """
    Sample, decode, resize, optionally flip, normalize and stack one clip channel-first.

    The flip decision is drawn once per clip and applied to every frame or none.
    """
    indices = sample_indices(src.frame_count, policy)
    frames = []
    resolution = None
    for index in indices:
        frame = reader(src.frame_path(index))
        if resolution is None:
            resolution = frame.shape
        elif frame.shape != resolution:
            raise FrameDecodeError(
                f"Frame {index} of {src.frame_dir} has shape {frame.shape}, expected {resolution}")
        frames.append(resize_bilinear(frame, *target))

    flipped = augment.draw() if augment is not None else False
    if flipped:
        frames = [hflip(frame) for frame in frames]

    stacked = np.stack(frames).transpose(3, 0, 1, 2)  # C, T, H, W
    mean, std = stats
    data = Tensor(normalize(stacked, mean, std), dtype=get_default_dtype())
    return Clip(data=data, label=int(label), source_id=source_id or os.path.basename(src.frame_dir),
                tri_label=tri_label, flipped=flipped)


class ClipLoaderService:
    """
    Loads manifest entries into clips, caching decoded frames and prefetching on a thread pool.

    The cache holds at most ``cache_limit`` frames and evicts the least recently read first.
    """

    def __init__(self, target=(224, 224), stats=(DEFAULT_NORM_MEAN, DEFAULT_NORM_STD), workers=1, cache_frames=True,
                 cache_limit=DEFAULT_CACHE_LIMIT):
        if cache_limit < 1:
            raise ValidationError(f"cache_limit must be >= 1, got {cache_limit}")
        self.target = tuple(target)
        self.stats = stats
        self.workers = max(1, int(workers))
        self.cache_frames = cache_frames
        self.cache_limit = int(cache_limit)
        self._cache = OrderedDict()
        self._lock = threading.Lock()

    def read_frame(self, path):
        if not self.cache_frames:
            return read_ppm(path)
        with self._lock:
            frame = self._cache.get(path)
            if frame is not None:
                self._cache.move_to_end(path)
                return frame
        frame = read_ppm(path)
        with self._lock:
            self._cache[path] = frame
            while len(self._cache) > self.cache_limit:
                self._cache.popitem(last=False)
        return frame

    @property
    def cached_frames(self):
        return len(self._cache)

    def load_entry(self, entry: ManifestEntry, policy: SamplingPolicy, augment: Optional[HFlip] = None) -> Clip:
        return load_clip(entry.source(), policy, augment, self.target, self.stats,
                         label=entry.binary_label, source_id=entry.id, tri_label=entry.tri_label,
                         reader=self.read_frame)

    def load_entries(self, entries: Sequence[ManifestEntry],
                     policy_for: Callable[[int, ManifestEntry], SamplingPolicy],
                     augment_for: Callable[[int, ManifestEntry], Optional[HFlip]] = lambda i, e: None) -> List[Clip]:
        """Load clips in manifest order; ``policy_for``/``augment_for`` receive (position, entry)."""
        jobs = [(entry, policy_for(i, entry), augment_for(i, entry)) for i, entry in enumerate(entries)]
        if self.workers == 1:
            clips = [self.load_entry(*job) for job in jobs]
        else:
            with ThreadPoolExecutor(max_workers=self.workers) as pool:
                clips = list(pool.map(lambda job: self.load_entry(*job), jobs))
        logger.debug("Loaded %d clips at %s", len(clips), self.target)
        return clips

    def clear_cache(self):
        with self._lock:
            self._cache.clear()
