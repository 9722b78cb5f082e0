import hashlib
import json
from dataclasses import asdict, dataclass, field, fields
from typing import Any, Dict, List, Optional, Tuple, Union, get_args, get_origin

from models.errors import ValidationError

BACKBONES = ("c3d", "timesformer", "videoswin")
OPTIMIZERS = ("sgd_momentum", "adamw")
DEFAULT_NORM_MEAN = (0.485, 0.456, 0.406)
DEFAULT_NORM_STD = (0.229, 0.224, 0.225)


def canonical_json(data) -> str:
    return json.dumps(data, sort_keys=True, separators=(",", ":"))


def config_digest(data) -> str:
    return hashlib.sha256(canonical_json(data).encode("utf-8")).hexdigest()


def _tuple(value):
    return tuple(int(v) for v in value)


def _matches(value, annotation) -> bool:
    """True when a JSON-decoded value fits a field annotation (lists stand in for tuples)."""
    if annotation is Any:
        return True
    if annotation is bool:
        return isinstance(value, bool)
    if annotation is int:
        return isinstance(value, int) and not isinstance(value, bool)
    if annotation is float:
        return isinstance(value, (int, float)) and not isinstance(value, bool)
    if annotation is str:
        return isinstance(value, str)
    origin, args = get_origin(annotation), get_args(annotation)
    if origin is Union:
        return any(value is None if a is type(None) else _matches(value, a) for a in args)
    if origin in (list, tuple):
        if not isinstance(value, (list, tuple)):
            return False
        item = args[0] if args else Any
        return all(_matches(v, item) for v in value)
    if origin is dict:
        if not isinstance(value, dict):
            return False
        item = args[1] if args else Any
        return all(_matches(v, item) for v in value.values())
    return True


def type_name(annotation) -> str:
    return getattr(annotation, "__name__", None) or str(annotation).replace("typing.", "")


def from_plain_dict(cls, data: Dict[str, Any]):
    """Build dataclass ``cls`` from JSON data, rejecting unknown keys and values of the wrong type."""
    if not isinstance(data, dict):
        raise ValidationError(f"{cls.__name__} needs a JSON object, got {type(data).__name__}")
    known = {f.name: f for f in fields(cls) if f.init}
    unknown = sorted(set(data) - set(known))
    if unknown:
        raise ValidationError(f"Unknown {cls.__name__} keys: {', '.join(unknown)}")
    for name, value in data.items():
        annotation = known[name].type
        if not _matches(value, annotation):
            raise ValidationError(f"{cls.__name__}.{name} must be {type_name(annotation)}, got {value!r}")
    try:
        return cls(**data)
    except ValidationError:
        raise
    except (TypeError, ValueError) as e:
        raise ValidationError(f"Invalid {cls.__name__}: {e}") from e


@dataclass
class C3DConfig:
    conv_channels: List[int] = field(default_factory=lambda: [16, 32, 64])
    kernel: Tuple[int, int, int] = (3, 3, 3)
    # One entry per conv layer: the pooling window applied after it, or None.
    pool_schedule: List[Optional[Tuple[int, int, int]]] = field(
        default_factory=lambda: [(1, 2, 2), (2, 2, 2), (2, 2, 2)])
    fc_widths: List[int] = field(default_factory=lambda: [32])
    num_classes: int = 2
    in_channels: int = 3
    num_frames: int = 8
    input_size: Tuple[int, int] = (32, 32)

    def __post_init__(self):
        self.conv_channels = [int(c) for c in self.conv_channels]
        self.kernel = _tuple(self.kernel)
        self.pool_schedule = [None if p is None else _tuple(p) for p in self.pool_schedule]
        self.fc_widths = [int(w) for w in self.fc_widths]
        self.input_size = _tuple(self.input_size)
        if self.kernel != (3, 3, 3):
            raise ValidationError(f"C3D kernel must be 3x3x3, got {self.kernel}")
        if not self.conv_channels or min(self.conv_channels) < 1:
            raise ValidationError(f"C3D conv_channels must be positive, got {self.conv_channels}")
        if len(self.pool_schedule) != len(self.conv_channels):
            raise ValidationError("C3D pool_schedule needs one entry per conv layer")
        if self.num_classes != 2:
            raise ValidationError("Only binary classification heads are supported")
        t, h, w = self.num_frames, *self.input_size
        for window in self.pool_schedule:
            if window is None:
                continue
            t, h, w = t // window[0], h // window[1], w // window[2]
            if min(t, h, w) < 1:
                raise ValidationError(
                    f"C3D pooling collapses input {self.num_frames}x{self.input_size} to zero extent")

    @classmethod
    def full_scale(cls):
        return cls(conv_channels=[64, 128, 256, 256, 512, 512, 512, 512],
                   pool_schedule=[(1, 2, 2), (2, 2, 2), None, (2, 2, 2), None, (2, 2, 2), None, (2, 2, 2)],
                   fc_widths=[4096, 4096], num_frames=32, input_size=(224, 224))

    def feature_extents(self):
        t, h, w = self.num_frames, *self.input_size
        for window in self.pool_schedule:
            if window is not None:
                t, h, w = t // window[0], h // window[1], w // window[2]
        return t, h, w

    @classmethod
    def from_dict(cls, data):
        return from_plain_dict(cls, data)

    def to_dict(self):
        return asdict(self)


@dataclass
class TsfConfig:
    patch: int = 8
    embed_dim: int = 32
    depth: int = 2
    heads: int = 4
    mlp_ratio: int = 4
    num_classes: int = 2
    in_channels: int = 3
    num_frames: int = 8
    input_size: Tuple[int, int] = (32, 32)

    def __post_init__(self):
        self.input_size = _tuple(self.input_size)
        h, w = self.input_size
        if h % self.patch or w % self.patch:
            raise ValidationError(f"Input {h}x{w} is not divisible by patch {self.patch}")
        if self.embed_dim % self.heads:
            raise ValidationError(f"embed_dim {self.embed_dim} is not divisible by heads {self.heads}")
        if min(self.depth, self.heads, self.mlp_ratio, self.num_frames) < 1:
            raise ValidationError("depth, heads, mlp_ratio and num_frames must be positive")
        if self.num_classes != 2:
            raise ValidationError("Only binary classification heads are supported")

    @classmethod
    def full_scale(cls):
        return cls(patch=16, embed_dim=768, depth=12, heads=12, num_frames=32, input_size=(224, 224))

    @property
    def num_patches(self):
        return (self.input_size[0] // self.patch) * (self.input_size[1] // self.patch)

    @classmethod
    def from_dict(cls, data):
        return from_plain_dict(cls, data)

    def to_dict(self):
        return asdict(self)


@dataclass
class SwinConfig:
    patch_embed: Tuple[int, int, int] = (2, 4, 4)
    window: Tuple[int, int, int] = (2, 4, 4)
    embed_dim: int = 16
    depths: List[int] = field(default_factory=lambda: [2, 2])
    heads: List[int] = field(default_factory=lambda: [2, 4])
    mlp_ratio: int = 4
    num_classes: int = 2
    in_channels: int = 3
    num_frames: int = 8
    input_size: Tuple[int, int] = (32, 32)

    def __post_init__(self):
        self.patch_embed = _tuple(self.patch_embed)
        self.window = _tuple(self.window)
        self.depths = [int(d) for d in self.depths]
        self.heads = [int(h) for h in self.heads]
        self.input_size = _tuple(self.input_size)
        if len(self.depths) != len(self.heads) or not self.depths:
            raise ValidationError("depths and heads need one entry per stage")
        if min(self.window) < 1 or min(self.depths) < 1:
            raise ValidationError("window extents and depths must be positive")
        for stage, heads in enumerate(self.heads):
            if (self.embed_dim * 2 ** stage) % heads:
                raise ValidationError(f"Stage {stage} width {self.embed_dim * 2 ** stage} not divisible by {heads} heads")
        extents = (self.num_frames, *self.input_size)
        if any(e % p for e, p in zip(extents, self.patch_embed)):
            raise ValidationError(f"Input {extents} is not divisible by patch {self.patch_embed}")
        if self.num_classes != 2:
            raise ValidationError("Only binary classification heads are supported")

    @classmethod
    def full_scale(cls):
        return cls(window=(8, 7, 7), embed_dim=96, depths=[2, 2], heads=[3, 6],
                   num_frames=32, input_size=(224, 224))

    @property
    def num_stages(self):
        return len(self.depths)

    @property
    def shift(self):
        return tuple(w // 2 for w in self.window)

    @classmethod
    def from_dict(cls, data):
        return from_plain_dict(cls, data)

    def to_dict(self):
        return asdict(self)


CONFIG_CLASSES = {"c3d": C3DConfig, "timesformer": TsfConfig, "videoswin": SwinConfig}


def model_config_from_dict(backbone, data=None):
    if backbone not in CONFIG_CLASSES:
        raise ValidationError(f"Unknown backbone {backbone!r}; expected one of {', '.join(BACKBONES)}")
    return CONFIG_CLASSES[backbone].from_dict(data or {})


@dataclass
class SamplingConfig:
    count: int = 32
    stride: int = 2


@dataclass
class TrainConfig:
    backbone: str = "c3d"
    model: Dict[str, Any] = field(default_factory=dict)
    optimizer: Optional[str] = None
    lr: Optional[float] = None
    weight_decay: Optional[float] = None
    momentum: float = 0.9
    epochs: int = 10
    batch_size: int = 8
    seed: int = 0
    init: str = "scratch"
    positive_class: int = 1
    sampling: Dict[str, int] = field(default_factory=dict)
    clip_size: Optional[Tuple[int, int]] = None
    norm_mean: Tuple[float, float, float] = DEFAULT_NORM_MEAN
    norm_std: Tuple[float, float, float] = DEFAULT_NORM_STD
    hflip_p: float = 0.5

    def __post_init__(self):
        model = model_config_from_dict(self.backbone, self.model)
        self.model = model.to_dict()
        transformer = self.backbone != "c3d"
        if self.optimizer is None:
            self.optimizer = "adamw" if transformer else "sgd_momentum"
        if self.optimizer not in OPTIMIZERS:
            raise ValidationError(f"Unknown optimizer {self.optimizer!r}; expected one of {', '.join(OPTIMIZERS)}")
        if self.lr is None:
            self.lr = 3e-4 if self.optimizer == "adamw" else 1e-2
        if self.weight_decay is None:
            self.weight_decay = 0.05 if self.optimizer == "adamw" else 5e-4
        self.lr, self.weight_decay = float(self.lr), float(self.weight_decay)

        sampling = {"count": model.num_frames, "stride": 2}
        sampling.update(self.sampling)
        self.sampling = asdict(from_plain_dict(SamplingConfig, sampling))
        self.clip_size = _tuple(self.clip_size or model.input_size)
        self.norm_mean = tuple(float(v) for v in self.norm_mean)
        self.norm_std = tuple(float(v) for v in self.norm_std)

        if self.lr <= 0:
            raise ValidationError(f"lr must be > 0, got {self.lr}")
        if self.epochs < 1:
            raise ValidationError(f"epochs must be >= 1, got {self.epochs}")
        if self.batch_size < 1:
            raise ValidationError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.weight_decay < 0:
            raise ValidationError(f"weight_decay must be >= 0, got {self.weight_decay}")
        if self.positive_class not in (0, 1):
            raise ValidationError(f"positive_class must be 0 or 1, got {self.positive_class}")
        if self.sampling["count"] < 1 or self.sampling["stride"] < 1:
            raise ValidationError(f"Sampling count and stride must be >= 1, got {self.sampling}")
        if self.sampling["count"] != model.num_frames or self.clip_size != model.input_size:
            raise ValidationError(
                f"Clip geometry {self.sampling['count']}x{self.clip_size} does not match the "
                f"{self.backbone} input {model.num_frames}x{model.input_size}")
        if len(self.norm_mean) != 3 or len(self.norm_std) != 3 or min(self.norm_std) <= 0:
            raise ValidationError("norm_mean and norm_std need three values with positive std")
        if not 0.0 <= self.hflip_p <= 1.0:
            raise ValidationError(f"hflip_p must be within [0, 1], got {self.hflip_p}")

    @property
    def model_config(self):
        return model_config_from_dict(self.backbone, self.model)

    @classmethod
    def from_dict(cls, data):
        return from_plain_dict(cls, data)

    @classmethod
    def from_json_file(cls, path, **overrides):
        try:
            with open(path, "r", encoding="utf-8") as f:
                data = json.load(f)
        except json.JSONDecodeError as e:
            raise ValidationError(f"Config {path} is not valid JSON: {e}") from e
        if not isinstance(data, dict):
            raise ValidationError(f"Config {path} must hold a JSON object")
        data.update({k: v for k, v in overrides.items() if v is not None})
        return cls.from_dict(data)

    def to_dict(self):
        data = asdict(self)
        data["clip_size"] = list(self.clip_size)
        data["norm_mean"] = list(self.norm_mean)
        data["norm_std"] = list(self.norm_std)
        return json.loads(canonical_json(data))

    def digest(self):
        return config_digest(self.to_dict())
