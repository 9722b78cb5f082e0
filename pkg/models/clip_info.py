import json
import os
from dataclasses import asdict, dataclass, field
from typing import Dict, Optional, Tuple

from models.configs import from_plain_dict
from models.errors import ValidationError
from services.tensor import Tensor

TRI_LABELS = ("normal", "benign", "malignant")
PLACEMENTS = ("center", "random", "start")
FRAME_PATTERN = "frame_{:06d}.ppm"


def binarize(tri_label: str, positive: str = "malignant") -> int:
    """malignant -> 1; normal and benign -> 0."""
    if tri_label not in TRI_LABELS:
        raise ValidationError(f"Unknown label {tri_label!r}; expected one of {', '.join(TRI_LABELS)}")
    return 1 if tri_label == positive else 0


@dataclass(frozen=True)
class VideoSource:
    frame_dir: str
    frame_count: int

    def __post_init__(self):
        if self.frame_count < 1:
            raise ValidationError(f"frame_count must be >= 1, got {self.frame_count}")

    def frame_path(self, index: int) -> str:
        return os.path.join(self.frame_dir, FRAME_PATTERN.format(index))


@dataclass(frozen=True)
class SamplingPolicy:
    count: int = 32
    stride: int = 2
    placement: str = "center"
    seed: Optional[int] = None
    short_video_mode: str = "loop"

    def __post_init__(self):
        if self.count < 1 or self.stride < 1:
            raise ValidationError(f"Sampling count and stride must be >= 1, got {self.count}/{self.stride}")
        if self.placement not in PLACEMENTS:
            raise ValidationError(f"Unknown placement {self.placement!r}")
        if self.placement == "random" and self.seed is None:
            raise ValidationError("Random placement needs a seed")
        if self.short_video_mode != "loop":
            raise ValidationError(f"Unknown short video mode {self.short_video_mode!r}")

    @property
    def span(self) -> int:
        return (self.count - 1) * self.stride + 1


@dataclass
class Clip:
    data: Tensor
    label: int
    source_id: str
    tri_label: Optional[str] = None
    flipped: bool = False


@dataclass
class ManifestEntry:
    id: str
    frame_dir: str
    frame_count: int
    tri_label: str
    fold: Optional[int] = None
    binary_label: int = field(init=False)

    def __post_init__(self):
        self.frame_count = int(self.frame_count)
        if self.frame_count < 1:
            raise ValidationError(f"Entry {self.id}: frame_count must be >= 1")
        self.binary_label = binarize(self.tri_label)

    def source(self) -> VideoSource:
        return VideoSource(self.frame_dir, self.frame_count)

    def to_record(self, base_dir: Optional[str] = None) -> Dict:
        frame_dir = self.frame_dir
        if base_dir is not None:
            frame_dir = os.path.relpath(frame_dir, base_dir)
        record = {"id": self.id, "frame_dir": frame_dir.replace(os.sep, "/"),
                  "frame_count": self.frame_count, "tri_label": self.tri_label}
        if self.fold is not None:
            record["fold"] = self.fold
        return record


@dataclass
class SynthSpec:
    n_per_class: Dict[str, int] = field(default_factory=lambda: {"normal": 15, "benign": 15, "malignant": 30})
    frames: int = 64
    resolution: Tuple[int, int] = (64, 64)
    seed: int = 0
    blob_radius: Tuple[float, float] = (0.18, 0.28)
    texture_roughness: float = 0.6
    motion_amplitude: float = 3.0

    def __post_init__(self):
        self.resolution = tuple(int(v) for v in self.resolution)
        self.blob_radius = tuple(float(v) for v in self.blob_radius)
        unknown = sorted(set(self.n_per_class) - set(TRI_LABELS))
        if unknown:
            raise ValidationError(f"Unknown labels in n_per_class: {', '.join(unknown)}")
        if any(int(c) < 0 for c in self.n_per_class.values()):
            raise ValidationError("Per-class counts must be >= 0")
        self.n_per_class = {label: int(self.n_per_class.get(label, 0)) for label in TRI_LABELS}
        if self.total == 0:
            raise ValidationError("SynthSpec asks for zero clips")
        if self.frames < 1:
            raise ValidationError(f"frames must be >= 1, got {self.frames}")
        if min(self.resolution) < 16:
            raise ValidationError(f"Resolution must be at least 16x16, got {self.resolution}")
        if not 0 < self.blob_radius[0] <= self.blob_radius[1] < 0.5:
            raise ValidationError(f"blob_radius must satisfy 0 < lo <= hi < 0.5, got {self.blob_radius}")

    @property
    def total(self) -> int:
        return sum(self.n_per_class.values())

    @classmethod
    def from_dict(cls, data):
        return from_plain_dict(cls, data)

    @classmethod
    def from_json_file(cls, path):
        try:
            with open(path, "r", encoding="utf-8") as f:
                data = json.load(f)
        except json.JSONDecodeError as e:
            raise ValidationError(f"Spec {path} is not valid JSON: {e}") from e
        if not isinstance(data, dict):
            raise ValidationError(f"Spec {path} must hold a JSON object")
        return cls.from_dict(data)

    def to_dict(self):
        return asdict(self)
