"""
GLTENSR1 tensor files and attention-stack directories.

File layout: 8-byte magic ``GLTENSR1``, one JSON header line
``{"dtype", "shape", "name", "nbytes"}`` terminated by ``\\n``, then the raw
row-major little-endian payload.
"""

import json
import os
from pathlib import Path
from typing import Union

import numpy as np
import torch

from guided_slots.exceptions import (
    BadMagicError,
    HeaderError,
    ShapeSizeMismatchError,
    TensorFileIOError,
    TruncatedPayloadError,
)
from guided_slots.logger import get_logger
from guided_slots.models.diffusion import AttnStack, AttnStackMeta
from guided_slots.models.tensors import DTYPES, TensorFile, validate_shape

logger = get_logger(__name__)

MAGIC = b"GLTENSR1"
TENSOR_SUFFIX = ".gltensor"
STACK_INDEX = "stack.json"

PathLike = Union[str, os.PathLike]


def write_tensor(t: TensorFile, path: PathLike) -> None:
    """
    Write a tensor file.

    Args:
        t: Tensor to persist
        path: Destination file; parent directories are created

    Raises:
        ValueError: If the tensor has zero dimensions
        TensorFileIOError: If the file cannot be written
    """
    validate_shape(tuple(t.shape))
    header = {"dtype": t.dtype, "shape": list(t.shape), "name": t.name, "nbytes": len(t.data)}
    blob = MAGIC + json.dumps(header, sort_keys=True).encode("utf-8") + b"\n" + t.data

    path = Path(path)
    tmp_path = path.with_name(path.name + ".tmp")
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        tmp_path.write_bytes(blob)
        os.replace(tmp_path, path)
    except OSError as e:
        raise TensorFileIOError(str(path), f"cannot write tensor file ({e.strerror or e})") from e

    logger.debug(f"Wrote tensor '{t.name}' {t.dtype}{list(t.shape)} to {path}")


def read_tensor(path: PathLike) -> TensorFile:
    """
    Read a tensor file written by ``write_tensor`` (or any conforming tool).

    Args:
        path: Tensor file

    Returns:
        TensorFile equal bit-for-bit to what was written

    Raises:
        TensorFileIOError: If the file cannot be read
        BadMagicError: If the file does not start with ``GLTENSR1``
        HeaderError: If the header line is missing or malformed
        TruncatedPayloadError: If the payload is shorter than declared
        ShapeSizeMismatchError: If the payload length disagrees with dtype and shape
    """
    try:
        raw = Path(path).read_bytes()
    except OSError as e:
        raise TensorFileIOError(str(path), f"cannot read tensor file ({e.strerror or e})") from e

    if raw[: len(MAGIC)] != MAGIC:
        raise BadMagicError(f"bad magic in {path}: expected {MAGIC!r}, got {raw[:len(MAGIC)]!r}")

    newline = raw.find(b"\n", len(MAGIC))
    if newline < 0:
        raise HeaderError(f"missing header line in {path}")
    try:
        header = json.loads(raw[len(MAGIC) : newline].decode("utf-8"))
        dtype = header["dtype"]
        shape = tuple(int(s) for s in header["shape"])
        name = str(header.get("name", ""))
    except (ValueError, KeyError, TypeError) as e:
        raise HeaderError(f"malformed header in {path}: {e}") from e
    if dtype not in DTYPES:
        raise HeaderError(f"unsupported dtype '{dtype}' in {path}")
    try:
        validate_shape(shape)
    except ValueError as e:
        raise HeaderError(f"invalid shape in {path}: {e}") from e

    payload = raw[newline + 1 :]
    itemsize = DTYPES[dtype].itemsize
    expected = int(np.prod(shape, dtype=np.int64)) * itemsize
    declared = header.get("nbytes")

    if declared is not None:
        declared = int(declared)
        if len(payload) < declared:
            raise TruncatedPayloadError(f"truncated payload in {path}: {len(payload)} of {declared} bytes")
        if len(payload) > declared:
            raise HeaderError(f"{len(payload) - declared} trailing bytes after payload in {path}")
        if declared != expected:
            raise ShapeSizeMismatchError(
                f"shape-size mismatch in {path}: shape {shape} as {dtype} needs {expected} bytes, "
                f"payload has {declared}"
            )
    else:
        if len(payload) % itemsize:
            raise TruncatedPayloadError(f"truncated payload in {path}: {len(payload)} bytes is not a whole {dtype}")
        if len(payload) != expected:
            raise ShapeSizeMismatchError(
                f"shape-size mismatch in {path}: shape {shape} as {dtype} needs {expected} bytes, "
                f"payload has {len(payload)}"
            )

    return TensorFile(dtype=dtype, shape=shape, data=payload, name=name)


def write_attn_stack(stack: AttnStack, out_dir: PathLike) -> str:
    """
    Persist an unbatched attention stack as tensor files plus ``stack.json``.

    Args:
        stack: Stack with (h, w, U) cross entries and (hw, hw) self entries
        out_dir: Directory to create

    Returns:
        Path of the ``stack.json`` index
    """
    if stack.is_batched:
        raise ValueError("write_attn_stack expects an unbatched stack; use stack.select(i) first")

    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    cross_files, self_files = [], []
    for i, entry in enumerate(stack.cross):
        name = f"cross_{i:03d}{TENSOR_SUFFIX}"
        write_tensor(TensorFile.from_tensor(entry.float(), name=f"cross_{i}", dtype="float32"), out_dir / name)
        cross_files.append(name)
    for i, entry in enumerate(stack.self_):
        name = f"self_{i:03d}{TENSOR_SUFFIX}"
        write_tensor(TensorFile.from_tensor(entry.float(), name=f"self_{i}", dtype="float32"), out_dir / name)
        self_files.append(name)

    index = {
        "cross": cross_files,
        "self": self_files,
        "timesteps": [int(t) for t in stack.meta.timesteps],
        "resolutions": [list(r) for r in stack.meta.resolutions],
        "token_class_ids": [int(c) for c in stack.meta.token_class_ids],
    }
    index_path = out_dir / STACK_INDEX
    index_path.write_text(json.dumps(index, indent=2), encoding="utf-8")
    logger.info(f"Saved attention stack ({len(cross_files)} cross, {len(self_files)} self) to {out_dir}")
    return str(index_path)


def read_attn_stack(stack_dir: PathLike) -> AttnStack:
    """
    Load an attention stack directory, e.g. one exported by an external diffusion model.

    ``stack.json`` may omit ``timesteps``/``resolutions``; resolutions then come from the
    cross tensors' shapes. ``token_class_ids`` maps each token position to a class id (-1 = none).

    Raises:
        FileNotFoundError: If ``stack.json`` is missing
        ValueError: If entry ranks are wrong
    """
    stack_dir = Path(stack_dir)
    index_path = stack_dir / STACK_INDEX
    if not index_path.exists():
        raise FileNotFoundError(f"no {STACK_INDEX} in {stack_dir}")
    index = json.loads(index_path.read_text(encoding="utf-8"))

    cross = [torch.from_numpy(read_tensor(stack_dir / f).to_array()).float() for f in index.get("cross", [])]
    self_ = [torch.from_numpy(read_tensor(stack_dir / f).to_array()).float() for f in index.get("self", [])]
    for i, entry in enumerate(cross):
        if entry.dim() != 3:
            raise ValueError(f"cross entry {i} must be (h, w, U), got {tuple(entry.shape)}")
    for i, entry in enumerate(self_):
        if entry.dim() != 2 or entry.shape[0] != entry.shape[1]:
            raise ValueError(f"self entry {i} must be square (hw, hw), got {tuple(entry.shape)}")

    resolutions = [tuple(r) for r in index.get("resolutions") or [(c.shape[0], c.shape[1]) for c in cross]]
    meta = AttnStackMeta(
        timesteps=[int(t) for t in index.get("timesteps", [])],
        resolutions=resolutions,
        token_class_ids=tuple(int(c) for c in index.get("token_class_ids", [])),
    )
    return AttnStack(cross=cross, self_=self_, meta=meta)


__all__ = ["MAGIC", "TENSOR_SUFFIX", "write_tensor", "read_tensor", "write_attn_stack", "read_attn_stack"]
