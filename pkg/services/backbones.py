"""Registry of the three backbones: config class, parameter registry, init and forward by id."""
from dataclasses import dataclass
from typing import Callable, Dict, Type

from models.configs import BACKBONES, C3DConfig, SwinConfig, TsfConfig
from models.errors import ValidationError
from services import c3d, timesformer, videoswin


@dataclass(frozen=True)
class Backbone:
    id: str
    display_name: str
    config_class: Type
    param_shapes: Callable
    init: Callable
    forward: Callable


REGISTRY: Dict[str, Backbone] = {
    "c3d": Backbone("c3d", "C3D", C3DConfig, c3d.c3d_param_shapes, c3d.c3d_init, c3d.c3d_forward),
    "timesformer": Backbone("timesformer", "TimeSformer", TsfConfig,
                            timesformer.tsf_param_shapes, timesformer.tsf_init, timesformer.tsf_forward),
    "videoswin": Backbone("videoswin", "Video-Swin-Transformer", SwinConfig,
                          videoswin.swin_param_shapes, videoswin.swin_init, videoswin.swin_forward),
}


def get_backbone(backbone_id: str) -> Backbone:
    try:
        return REGISTRY[backbone_id]
    except KeyError:
        raise ValidationError(
            f"Unknown backbone {backbone_id!r}; expected one of {', '.join(BACKBONES)}") from None


def display_name(backbone_id: str) -> str:
    return get_backbone(backbone_id).display_name


def init_params(backbone_id: str, model_config: Dict, seed: int):
    """Fresh parameters for ``backbone_id`` built from a model config dict."""
    backbone = get_backbone(backbone_id)
    return backbone.init(backbone.config_class.from_dict(model_config), seed)


def expected_shapes(backbone_id: str, model_config: Dict):
    backbone = get_backbone(backbone_id)
    return backbone.param_shapes(backbone.config_class.from_dict(model_config))


def forward(params, batch):
    return get_backbone(params.backbone).forward(batch, params)
