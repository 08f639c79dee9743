"""Binary checkpoint container shared by models ("EDC1") and extractors ("EDX1").

Layout, little-endian, no padding::

    magic            4 bytes
    version          u32
    config block     u32 u32 u32 u8
    tensor count     u32
    per tensor       name_len u16, UTF-8 name, rank u8, dims u32 x rank, float32 data

For models the config block is (n_blocks, block_filters, sobel_filters, flags)
with flags bit 0 = edge module, bit 1 = dense connections.
"""

import logging
import os
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import BinaryIO, Dict, Optional, Tuple, Union

import numpy as np

from .errors import (
    BadMagicError,
    CheckpointError,
    CheckpointShapeError,
    ConfigError,
    TruncatedCheckpointError,
    VersionMismatchError,
)
from .models import ModelConfig
from .network import Model, param_shapes

MODEL_MAGIC = b"EDC1"
EXTRACTOR_MAGIC = b"EDX1"
FORMAT_VERSION = 1

FLAG_EDGE = 0x01
FLAG_DENSE = 0x02

_HEADER = struct.Struct("<4sI")
_CONFIG = struct.Struct("<IIIB")
_U32 = struct.Struct("<I")
_U16 = struct.Struct("<H")
_U8 = struct.Struct("<B")

PathLike = Union[str, Path]


@dataclass(frozen=True)
class ContainerHeader:
    a: int
    b: int
    c: int
    flags: int


def write_container(
    path: PathLike, magic: bytes, header: ContainerHeader, tensors: Dict[str, np.ndarray]
) -> None:
    """Writes atomically: a partial file never replaces an existing one."""
    path = Path(path)
    chunks = [
        _HEADER.pack(magic, FORMAT_VERSION),
        _CONFIG.pack(header.a, header.b, header.c, header.flags),
        _U32.pack(len(tensors)),
    ]
    for name, tensor in tensors.items():
        encoded = name.encode("utf-8")
        chunks.append(_U16.pack(len(encoded)))
        chunks.append(encoded)
        chunks.append(_U8.pack(tensor.ndim))
        chunks.extend(_U32.pack(d) for d in tensor.shape)
        chunks.append(np.ascontiguousarray(tensor, dtype="<f4").tobytes())

    tmp = path.with_name(path.name + ".tmp")
    try:
        with open(tmp, "wb") as f:
            f.write(b"".join(chunks))
        os.replace(tmp, path)
    except BaseException:
        tmp.unlink(missing_ok=True)
        raise


def _read_exact(f: BinaryIO, size: int, what: str) -> bytes:
    data = f.read(size)
    if len(data) != size:
        raise TruncatedCheckpointError(
            f"file ends while reading {what}: wanted {size} bytes, got {len(data)}"
        )
    return data


def read_container(
    path: PathLike, magic: bytes
) -> Tuple[ContainerHeader, Dict[str, np.ndarray]]:
    with open(path, "rb") as f:
        found, version = _HEADER.unpack(_read_exact(f, _HEADER.size, "header"))
        if found != magic:
            raise BadMagicError(f"bad magic in {path}: expected {magic!r}, got {found!r}")
        if version != FORMAT_VERSION:
            raise VersionMismatchError(
                f"{path} has format version {version}, expected {FORMAT_VERSION}"
            )
        header = ContainerHeader(*_CONFIG.unpack(_read_exact(f, _CONFIG.size, "config")))
        (count,) = _U32.unpack(_read_exact(f, _U32.size, "tensor count"))

        tensors: Dict[str, np.ndarray] = {}
        for i in range(count):
            (name_len,) = _U16.unpack(_read_exact(f, _U16.size, f"tensor {i} name length"))
            try:
                name = _read_exact(f, name_len, f"tensor {i} name").decode("utf-8")
            except UnicodeDecodeError as e:
                raise CheckpointError(f"tensor {i} name is not UTF-8: {e}") from e
            (rank,) = _U8.unpack(_read_exact(f, _U8.size, f"{name} rank"))
            dims = tuple(
                _U32.unpack(_read_exact(f, _U32.size, f"{name} dims"))[0]
                for _ in range(rank)
            )
            size = int(np.prod(dims, dtype=np.int64))
            raw = _read_exact(f, 4 * size, f"{name} data")
            tensors[name] = np.frombuffer(raw, dtype="<f4").astype(np.float32).reshape(dims)

        if f.read(1):
            raise CheckpointError(f"{path} has trailing bytes after {count} tensors")
    return header, tensors


def validate_shapes(
    tensors: Dict[str, np.ndarray], expected: Dict[str, Tuple[int, ...]], source: str
) -> None:
    missing = [name for name in expected if name not in tensors]
    extra = [name for name in tensors if name not in expected]
    if missing or extra:
        raise CheckpointShapeError(
            f"{source}: parameter names differ (missing {missing}, unexpected {extra})"
        )
    for name, shape in expected.items():
        if tensors[name].shape != tuple(shape):
            raise CheckpointShapeError(
                f"{source}: {name} has shape {tensors[name].shape}, expected {tuple(shape)}"
            )


def save_checkpoint(model: Model, path: PathLike) -> None:
    cfg = model.config
    flags = (FLAG_EDGE if cfg.use_edge_module else 0) | (
        FLAG_DENSE if cfg.use_dense_connections else 0
    )
    header = ContainerHeader(cfg.n_blocks, cfg.block_filters, cfg.sobel_filters, flags)
    write_container(path, MODEL_MAGIC, header, model.params)
    logging.debug(f"Saved {cfg.variant} checkpoint to {path}")


def load_checkpoint(path: PathLike, expect: Optional[ModelConfig] = None) -> Model:
    """Loads a model; with ``expect`` the stored shapes must match that config too."""
    header, tensors = read_container(path, MODEL_MAGIC)
    config = ModelConfig(
        n_blocks=header.a,
        block_filters=header.b,
        sobel_filters=header.c,
        use_edge_module=bool(header.flags & FLAG_EDGE),
        use_dense_connections=bool(header.flags & FLAG_DENSE),
    )
    try:
        config.validate()
    except ConfigError as e:
        raise CheckpointError(f"{path} has an invalid config block: {e}") from e
    validate_shapes(tensors, param_shapes(config), str(path))
    if expect is not None:
        validate_shapes(tensors, param_shapes(expect), f"{path} (expected {expect.variant})")
    ordered = {name: tensors[name] for name in param_shapes(config)}
    return Model(config, ordered)
