"""
Checkpoint files.

Layout: the magic ``LSPTM1``, a little-endian uint32 header length, a UTF-8
JSON header (backbone id, model config, normalization stats, the full run
config with its digest, and a tensor index with shapes and byte offsets), then
the payload of little-endian float32 values in index order.
"""
import json
import logging
import os
import struct
from typing import Optional

import numpy as np

from models.configs import DEFAULT_NORM_MEAN, DEFAULT_NORM_STD, TrainConfig
from models.errors import (CheckpointBackboneError, CheckpointError, CheckpointMagicError,
                           CheckpointShapeError, CheckpointTruncatedError, ValidationError)
from models.params import ModelParams
from services import backbones
from services.tensor import Tensor

logger = logging.getLogger(__name__)

MAGIC = b"LSPTM1"
PAYLOAD_DTYPE = np.dtype("<f4")
_LENGTH = struct.Struct("<I")


def build_header(params: ModelParams, config: Optional[TrainConfig] = None):
    index = []
    offset = 0
    for name, tensor in params.items():
        nbytes = tensor.size * PAYLOAD_DTYPE.itemsize
        index.append({"name": name, "shape": list(tensor.shape), "offset": offset, "nbytes": nbytes})
        offset += nbytes
    return {
        "backbone": params.backbone,
        "config": params.config,
        "norm_mean": list(config.norm_mean) if config else list(DEFAULT_NORM_MEAN),
        "norm_std": list(config.norm_std) if config else list(DEFAULT_NORM_STD),
        "run_config": config.to_dict() if config else None,
        "run_digest": config.digest() if config else None,
        "tensors": index,
    }


def save_checkpoint(params: ModelParams, config: Optional[TrainConfig], path):
    header = json.dumps(build_header(params, config), sort_keys=True, separators=(",", ":")).encode("utf-8")
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(_LENGTH.pack(len(header)))
        f.write(header)
        for _, tensor in params.items():
            f.write(np.ascontiguousarray(tensor.data, dtype=PAYLOAD_DTYPE).tobytes())
    logger.info("Saved %s checkpoint (%d values) to %s", params.backbone, params.count(), path)
    return path


def read_header(blob: bytes, path=""):
    if blob[:len(MAGIC)] != MAGIC:
        raise CheckpointMagicError(f"{path} is not a checkpoint: bad magic {blob[:len(MAGIC)]!r}")
    start = len(MAGIC) + _LENGTH.size
    if len(blob) < start:
        raise CheckpointTruncatedError(f"{path}: truncated before the header length")
    (length,) = _LENGTH.unpack_from(blob, len(MAGIC))
    if len(blob) < start + length:
        raise CheckpointTruncatedError(f"{path}: header needs {length} bytes, file has {len(blob) - start}")
    try:
        header = json.loads(blob[start:start + length].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise CheckpointError(f"{path}: unreadable header: {e}") from e
    return header, start + length


def load_checkpoint(path, expected_backbone: Optional[str] = None) -> ModelParams:
    """
    Read a checkpoint back into float32 parameters.

    Raises a distinct error for bad magic, a backbone other than
    ``expected_backbone``, tensor shapes that disagree with the backbone's
    parameter registry, and a payload shorter than its index.
    """
    if not os.path.isfile(path):
        raise ValidationError(f"Checkpoint {path} does not exist")
    with open(path, "rb") as f:
        blob = f.read()
    header, payload_start = read_header(blob, path)

    backbone = header.get("backbone")
    if expected_backbone is not None and backbone != expected_backbone:
        logger.warning("Checkpoint %s holds %s, expected %s", path, backbone, expected_backbone)
        raise CheckpointBackboneError(f"Checkpoint {path} holds backbone {backbone!r}, expected {expected_backbone!r}")
    try:
        expected = backbones.expected_shapes(backbone, header["config"])
    except KeyError as e:
        raise CheckpointError(f"{path}: header is missing {e}") from e

    index = header.get("tensors", [])
    stored = {entry["name"]: tuple(entry["shape"]) for entry in index}
    if stored != {name: tuple(shape) for name, shape in expected.items()}:
        names = sorted(set(stored) ^ set(expected))
        mismatched = names or sorted(n for n in stored if stored[n] != tuple(expected[n]))
        logger.warning("Checkpoint %s does not match the %s registry", path, backbone)
        raise CheckpointShapeError(f"{path}: parameters disagree with the {backbone} registry at {', '.join(mismatched)}")

    payload = memoryview(blob)[payload_start:]
    tensors = {}
    for entry in index:
        count = int(np.prod(entry["shape"]))
        offset, nbytes = int(entry["offset"]), int(entry["nbytes"])
        if nbytes != count * PAYLOAD_DTYPE.itemsize or offset < 0:
            raise CheckpointError(f"{path}: bad byte span for {entry['name']}")
        if offset + nbytes > len(payload):
            raise CheckpointTruncatedError(
                f"{path}: payload ends at byte {len(payload)}, {entry['name']} needs {offset + nbytes}")
        values = np.frombuffer(payload[offset:offset + nbytes], dtype=PAYLOAD_DTYPE).reshape(entry["shape"])
        tensors[entry["name"]] = Tensor(values, dtype=np.float32)
    return ModelParams(backbone, header["config"], tensors)


def load_header(path):
    if not os.path.isfile(path):
        raise ValidationError(f"Checkpoint {path} does not exist")
    with open(path, "rb") as f:
        header, _ = read_header(f.read(), path)
    return header


def load_run_config(path, header=None) -> Optional[TrainConfig]:
    """The run config stored with a checkpoint, or None when it was saved without one."""
    header = header if header is not None else load_header(path)
    data = header.get("run_config")
    if data is None:
        return None
    try:
        return TrainConfig.from_dict(data)
    except ValidationError as e:
        raise CheckpointError(f"{path}: stored run config is invalid: {e}") from e

