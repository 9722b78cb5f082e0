from dataclasses import dataclass, field
from typing import Dict, List, Optional

from models.errors import ReportError, ValidationError

METRIC_NAMES = ("acc", "sen", "pre", "f1")


@dataclass(frozen=True)
class ConfusionMatrix2:
    """Binary confusion counts; "positive" is whichever class the run configured."""
    tp: int = 0
    fn: int = 0
    fp: int = 0
    tn: int = 0

    def __post_init__(self):
        for name in ("tp", "fn", "fp", "tn"):
            value = getattr(self, name)
            if int(value) != value or value < 0:
                raise ValidationError(f"Confusion count {name} must be a nonnegative integer, got {value}")
            object.__setattr__(self, name, int(value))

    @property
    def total(self) -> int:
        return self.tp + self.fn + self.fp + self.tn

    def __add__(self, other: "ConfusionMatrix2") -> "ConfusionMatrix2":
        return ConfusionMatrix2(self.tp + other.tp, self.fn + other.fn, self.fp + other.fp, self.tn + other.tn)

    def to_dict(self) -> Dict[str, int]:
        return {"tp": self.tp, "fn": self.fn, "fp": self.fp, "tn": self.tn}

    @classmethod
    def from_dict(cls, data) -> "ConfusionMatrix2":
        try:
            return cls(**{k: data[k] for k in ("tp", "fn", "fp", "tn")})
        except (KeyError, TypeError) as e:
            raise ReportError(f"Malformed confusion matrix {data!r}") from e


@dataclass
class FoldResult:
    fold: int
    confusion: ConfusionMatrix2
    metrics: Dict[str, Optional[float]]
    test_indices: List[int] = field(default_factory=list)
    loss_trace: List[float] = field(default_factory=list)

    def to_dict(self):
        return {"fold": self.fold, "confusion": self.confusion.to_dict(), "metrics": dict(self.metrics),
                "test_indices": list(self.test_indices), "loss_trace": list(self.loss_trace)}

    @classmethod
    def from_dict(cls, data):
        try:
            return cls(fold=int(data["fold"]), confusion=ConfusionMatrix2.from_dict(data["confusion"]),
                       metrics=dict(data["metrics"]), test_indices=list(data.get("test_indices", [])),
                       loss_trace=list(data.get("loss_trace", [])))
        except (KeyError, TypeError, ValueError) as e:
            raise ReportError(f"Malformed fold entry: {e}") from e


@dataclass
class EvalReport:
    """
    Cross-validation outcome of one backbone.

    ``pooled`` is the elementwise sum of the fold matrices and ``metrics`` are
    computed on it. ``per_class`` holds, for each tri-class label, the clip
    count and how many of those clips got the right binary prediction.
    """
    backbone: str
    display_name: str
    config_digest: str
    folds: List[FoldResult]
    pooled: ConfusionMatrix2
    metrics: Dict[str, Optional[float]]
    k: int = 10
    seed: int = 0
    positive_class: int = 1
    per_class: Dict[str, Dict] = field(default_factory=dict)

    def to_dict(self):
        return {
            "backbone": self.backbone,
            "display_name": self.display_name,
            "config_digest": self.config_digest,
            "k": self.k,
            "seed": self.seed,
            "positive_class": self.positive_class,
            "folds": [f.to_dict() for f in self.folds],
            "pooled": self.pooled.to_dict(),
            "metrics": dict(self.metrics),
            "per_class": {label: dict(v) for label, v in self.per_class.items()},
        }

    @classmethod
    def from_dict(cls, data):
        if not isinstance(data, dict):
            raise ReportError("Report JSON must hold an object")
        try:
            return cls(backbone=data["backbone"], display_name=data.get("display_name", data["backbone"]),
                       config_digest=data["config_digest"],
                       folds=[FoldResult.from_dict(f) for f in data["folds"]],
                       pooled=ConfusionMatrix2.from_dict(data["pooled"]), metrics=dict(data["metrics"]),
                       k=int(data.get("k", len(data["folds"]))), seed=int(data.get("seed", 0)),
                       positive_class=int(data.get("positive_class", 1)),
                       per_class=dict(data.get("per_class", {})))
        except (KeyError, TypeError, ValueError) as e:
            raise ReportError(f"Malformed report: missing or invalid {e}") from e
