"""Versioned checkpoint container for networks and teacher/student pairs.

Layout (JSON, keys in this order):

- `magic`: "GCMT-CKPT"
- `version`: format version integer
- `kind`: "network" or "pair"
- `manifest`: layer dims, class count, and for pairs the EMA decay and pair id
- `arrays`: per-parameter records in manifest order; `data` is base64 of
  little-endian float32 values
- `checksum`: 64-bit FNV-1a of all decoded array bytes, hex
"""

import base64
import binascii
import json
from pathlib import Path
from typing import Any, Dict, List, Tuple, Union

import numpy as np

from gcmt.core.errors import (
    CheckpointChecksumError,
    CheckpointDimensionError,
    CheckpointFormatError,
    CheckpointTruncatedError,
    CheckpointVersionError,
)
from gcmt.core.model import ClassifierHead, EncoderParams, Layer, Network, NetworkPair
from gcmt.typing import Matrix, ParamDict
from gcmt.utils.logging import get_logger

# Get the logger
logger = get_logger()

MAGIC = "GCMT-CKPT"
FORMAT_VERSION = 1

FNV_OFFSET = 0xCBF29CE484222325
FNV_PRIME = 0x100000001B3
_MASK64 = 0xFFFFFFFFFFFFFFFF

Model = Union[Network, NetworkPair]


def fnv1a_64(data: bytes) -> int:
    """64-bit FNV-1a hash."""
    value = FNV_OFFSET
    for byte in data:
        value ^= byte
        value = (value * FNV_PRIME) & _MASK64
    return value


def _network_arrays(prefix: str, network: Network) -> List[Tuple[str, Matrix]]:
    return [(f"{prefix}{name}", value) for name, value in network.parameters().items()]


def _encode(name: str, value: Matrix) -> Tuple[Dict[str, Any], bytes]:
    raw = np.ascontiguousarray(value, dtype="<f4").tobytes()
    record = {
        "name": name,
        "shape": list(value.shape),
        "count": int(value.size),
        "data": base64.b64encode(raw).decode("ascii"),
    }
    return record, raw


def save_checkpoint(model: Model, path: Union[str, Path]) -> None:
    """Write a network or a pair at 32-bit precision."""
    if isinstance(model, NetworkPair):
        kind = "pair"
        reference = model.student
        arrays = _network_arrays("student.", model.student) + _network_arrays("teacher.", model.teacher)
        manifest: Dict[str, Any] = {"ema_decay": model.ema_decay, "pair_id": model.pair_id}
    else:
        kind = "network"
        reference = model
        arrays = _network_arrays("", model)
        manifest = {}

    manifest = {"dims": reference.encoder.dims, "class_count": reference.head.class_count, **manifest}

    records = []
    payload = bytearray()
    for name, value in arrays:
        record, raw = _encode(name, value)
        records.append(record)
        payload.extend(raw)

    container = {
        "magic": MAGIC,
        "version": FORMAT_VERSION,
        "kind": kind,
        "manifest": manifest,
        "arrays": records,
        "checksum": f"{fnv1a_64(bytes(payload)):016x}",
    }

    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(container), encoding="utf-8")
    logger.info(f"checkpoint ({kind}) written to {path}")


def _expected_shapes(prefix: str, dims: List[int], class_count: int) -> List[Tuple[str, Tuple[int, int]]]:
    shapes: List[Tuple[str, Tuple[int, int]]] = []
    for position, (fan_in, fan_out) in enumerate(zip(dims[:-1], dims[1:])):
        shapes.append((f"{prefix}encoder.{position}.weight", (fan_in, fan_out)))
        shapes.append((f"{prefix}encoder.{position}.bias", (1, fan_out)))
    shapes.append((f"{prefix}head.weight", (dims[-1], class_count)))
    return shapes


def _decode(record: Dict[str, Any], name: str, shape: Tuple[int, int]) -> Tuple[Matrix, bytes]:
    if record.get("name") != name:
        raise CheckpointDimensionError(f"expected array `{name}`, found `{record.get('name')}`")
    if tuple(record.get("shape", ())) != shape:
        raise CheckpointDimensionError(f"`{name}` declares shape {record.get('shape')}, manifest implies {shape}")

    count = int(shape[0] * shape[1])
    if record.get("count") != count:
        raise CheckpointDimensionError(f"`{name}` declares {record.get('count')} values, shape implies {count}")

    try:
        raw = base64.b64decode(record["data"], validate=True)
    except (KeyError, binascii.Error) as e:
        raise CheckpointFormatError(f"`{name}` payload is not valid base64: {e}")

    if len(raw) != 4 * count:
        raise CheckpointDimensionError(f"`{name}` declares {count} values but holds {len(raw) // 4}")

    values = np.frombuffer(raw, dtype="<f4").astype(np.float64).reshape(shape)
    return values, raw


def _network_from(params: ParamDict, prefix: str, depth: int) -> Network:
    layers = tuple(
        Layer(params[f"{prefix}encoder.{position}.weight"], params[f"{prefix}encoder.{position}.bias"])
        for position in range(depth)
    )
    return Network(EncoderParams(layers), ClassifierHead(params[f"{prefix}head.weight"]))


def load_checkpoint(path: Union[str, Path]) -> Model:
    """Read a checkpoint written by `save_checkpoint`."""
    try:
        text = Path(path).read_text(encoding="utf-8")
    except UnicodeDecodeError as e:
        raise CheckpointFormatError(f"{path} is not a checkpoint: byte {e.start} is not UTF-8")
    if not text.strip():
        raise CheckpointTruncatedError(f"{path} is empty")

    try:
        container = json.loads(text)
    except json.JSONDecodeError as e:
        if f'"magic": "{MAGIC}"' in text[:64]:
            raise CheckpointTruncatedError(f"{path} ends prematurely: {e.msg}")
        raise CheckpointFormatError(f"{path} is not a checkpoint container: {e.msg}")

    if not isinstance(container, dict) or container.get("magic") != MAGIC:
        raise CheckpointFormatError(f"{path} has a bad magic string")
    if container.get("version") != FORMAT_VERSION:
        raise CheckpointVersionError(
            f"{path} has format version {container.get('version')}, expected {FORMAT_VERSION}"
        )
    if "checksum" not in container:
        raise CheckpointTruncatedError(f"{path} has no trailing checksum")

    kind = container.get("kind")
    manifest = container.get("manifest", {})
    dims = [int(d) for d in manifest.get("dims", [])]
    class_count = int(manifest.get("class_count", -1))
    if len(dims) < 2 or class_count < 0:
        raise CheckpointDimensionError(f"{path} has an incomplete manifest: {manifest}")

    prefixes = ["student.", "teacher."] if kind == "pair" else [""]
    if kind not in ("pair", "network"):
        raise CheckpointFormatError(f"{path} has unknown kind `{kind}`")

    expected = [item for prefix in prefixes for item in _expected_shapes(prefix, dims, class_count)]
    records = container.get("arrays", [])
    if len(records) != len(expected):
        raise CheckpointDimensionError(f"{path} holds {len(records)} arrays, manifest implies {len(expected)}")

    params: ParamDict = {}
    payload = bytearray()
    for record, (name, shape) in zip(records, expected):
        params[name], raw = _decode(record, name, shape)
        payload.extend(raw)

    if f"{fnv1a_64(bytes(payload)):016x}" != container["checksum"]:
        raise CheckpointChecksumError(f"{path} checksum mismatch")

    depth = len(dims) - 1
    logger.info(f"checkpoint ({kind}) loaded from {path}")
    if kind == "pair":
        return NetworkPair(
            _network_from(params, "student.", depth),
            _network_from(params, "teacher.", depth),
            float(manifest.get("ema_decay", 0.999)),
            str(manifest.get("pair_id", "pair-0")),
        )
    return _network_from(params, "", depth)


def load_network(path: Union[str, Path]) -> Network:
    """Load a checkpoint and return a single network (a pair yields its teacher)."""
    model = load_checkpoint(path)
    return model.teacher if isinstance(model, NetworkPair) else model
