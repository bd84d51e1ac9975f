"""
Shared codec of the binary file formats.

Layout: 4-byte magic, little-endian u32 version, u64 header length, UTF-8
JSON header, then the payload blobs.
"""

import logging
import struct
from collections.abc import Sequence
from pathlib import Path

import numpy as np
import numpy.typing as npt
from pydantic import BaseModel, ValidationError

from dsm.constants import CONTAINER_VERSION
from dsm.errors import DataError

logger = logging.getLogger(__name__)

PREFIX = struct.Struct("<4sIQ")


def encode[HeaderT: BaseModel](magic: bytes, header: HeaderT, blobs: Sequence[bytes]) -> bytes:
    """Serialize a header and its blobs."""
    header_bytes = header.model_dump_json().encode("utf-8")
    prefix = PREFIX.pack(magic, CONTAINER_VERSION, len(header_bytes))
    return b"".join((prefix, header_bytes, *blobs))


def decode[HeaderT: BaseModel](
    raw: bytes,
    magic: bytes,
    header_type: type[HeaderT],
) -> tuple[HeaderT, memoryview]:
    """Parse a container into its validated header and raw payload."""
    try:
        found_magic, version, header_length = PREFIX.unpack_from(raw)
    except struct.error as exc:
        msg = "file is too short for a container prefix"
        raise DataError(msg) from exc
    if found_magic != magic:
        msg = f"bad magic {found_magic!r}, expected {magic!r}"
        raise DataError(msg)
    if version != CONTAINER_VERSION:
        msg = f"unsupported container version {version}"
        raise DataError(msg)
    header_end = PREFIX.size + header_length
    if header_end > len(raw):
        msg = "header length exceeds file size"
        raise DataError(msg)
    try:
        header = header_type.model_validate_json(raw[PREFIX.size : header_end])
    except ValidationError as exc:
        msg = f"malformed {header_type.__name__}: {exc.error_count()} errors"
        raise DataError(msg) from exc
    return header, memoryview(raw)[header_end:]


def write_container[HeaderT: BaseModel](
    path: Path,
    magic: bytes,
    header: HeaderT,
    blobs: Sequence[bytes],
) -> None:
    """Write a container file, replacing any existing one."""
    path.parent.mkdir(parents=True, exist_ok=True)
    staging = path.with_name(f"{path.name}.partial")
    staging.write_bytes(encode(magic, header, blobs))
    staging.replace(path)
    logger.debug("wrote %s", path)


def read_container[HeaderT: BaseModel](
    path: Path,
    magic: bytes,
    header_type: type[HeaderT],
) -> tuple[HeaderT, memoryview]:
    """Read and validate a container file."""
    try:
        raw = path.read_bytes()
    except OSError as exc:
        msg = f"cannot read {path}: {exc.strerror}"
        raise DataError(msg) from exc
    return decode(raw, magic, header_type)


def take_blob[ScalarT: np.generic](
    payload: memoryview,
    offset: int,
    shape: Sequence[int],
    dtype: type[ScalarT],
) -> npt.NDArray[ScalarT]:
    """Copy a little-endian row-major blob out of the payload."""
    little_endian = np.dtype(dtype).newbyteorder("<")
    count = int(np.prod(shape))
    end = offset + count * little_endian.itemsize
    if offset < 0 or end > len(payload):
        msg = f"blob [{offset}, {end}) lies outside a payload of {len(payload)} bytes"
        raise DataError(msg)
    values = np.frombuffer(payload, dtype=little_endian, count=count, offset=offset)
    return values.astype(dtype).reshape(tuple(shape))


def blob(array: npt.NDArray[np.generic]) -> bytes:
    """Little-endian row-major bytes of ``array``."""
    return np.ascontiguousarray(array, dtype=array.dtype.newbyteorder("<")).tobytes()
