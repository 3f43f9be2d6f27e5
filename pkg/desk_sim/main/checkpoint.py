from __future__ import annotations

import json
import os
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Any, BinaryIO, Dict, Mapping, Tuple

import numpy as np

from ..api import CheckpointError
from .log import LOG
from .model import SimModel
from .nn import state_arrays
from .optim import OptimizerState

MAGIC = b"SIMCKPT\0"
FORMAT_VERSION = 1

DTYPE_CODES = {
    np.dtype("<f4"): 1,
    np.dtype("<f8"): 2,
    np.dtype("<i8"): 3,
}
CODE_DTYPES = {code: dtype for dtype, code in DTYPE_CODES.items()}


@dataclass(frozen=True)
class TrainingState:
    step: int
    epoch: int
    optimizer: OptimizerState
    config_text: str
    meta: Dict[str, Any]


def _pack(fmt: str, *values) -> bytes:
    return struct.pack("<" + fmt, *values)


def write_container(path: Path, arrays: Mapping[str, np.ndarray], meta: Mapping[str, Any]):
    """
    Layout (little-endian): magic, u32 version, u32 meta length, meta JSON,
    u32 entry count, entry table, then the raw payloads. Each table entry
    is u16 name length, name, u8 dtype code, u8 rank, rank x u64 extents,
    u64 payload offset and u64 payload length; offsets count from the start
    of the payload region.
    """
    meta_bytes = json.dumps(dict(meta), sort_keys=True).encode("utf-8")

    table = []
    payloads = []
    offset = 0

    for name, arr in arrays.items():
        data = np.ascontiguousarray(arr)
        dtype = data.dtype.newbyteorder("<")
        if dtype not in DTYPE_CODES:
            raise CheckpointError(f"{path}: unsupported dtype {arr.dtype} for {name}")

        raw = data.astype(dtype, copy=False).tobytes()
        encoded = name.encode("utf-8")

        table.append(_pack("H", len(encoded)) + encoded)
        table.append(_pack("BB", DTYPE_CODES[dtype], data.ndim))
        table.append(_pack(f"{data.ndim}Q", *data.shape))
        table.append(_pack("QQ", offset, len(raw)))

        payloads.append(raw)
        offset += len(raw)

    tmp = path.with_name(path.name + ".tmp")
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(tmp, "wb") as f:
            f.write(MAGIC)
            f.write(_pack("II", FORMAT_VERSION, len(meta_bytes)))
            f.write(meta_bytes)
            f.write(_pack("I", len(arrays)))
            f.writelines(table)
            f.writelines(payloads)
        os.replace(tmp, path)
    except OSError as ex:
        raise CheckpointError(f"Cannot write checkpoint {path}: {ex}")


def _read(f: BinaryIO, fmt: str, path: Path) -> Tuple:
    size = struct.calcsize("<" + fmt)
    chunk = f.read(size)
    if len(chunk) != size:
        raise CheckpointError(f"Truncated checkpoint {path}")
    return struct.unpack("<" + fmt, chunk)


def read_container(path: Path) -> Tuple[Dict[str, np.ndarray], Dict[str, Any]]:
    try:
        with open(path, "rb") as f:
            if f.read(len(MAGIC)) != MAGIC:
                raise CheckpointError(f"{path} is not a checkpoint file")

            version, meta_len = _read(f, "II", path)
            if version != FORMAT_VERSION:
                raise CheckpointError(f"{path}: unsupported format version {version}")

            try:
                meta = json.loads(f.read(meta_len).decode("utf-8"))
            except (UnicodeDecodeError, json.JSONDecodeError) as ex:
                raise CheckpointError(f"{path}: corrupt metadata: {ex}")

            (count,) = _read(f, "I", path)
            entries = []
            for _ in range(count):
                (name_len,) = _read(f, "H", path)
                name = f.read(name_len).decode("utf-8")
                code, rank = _read(f, "BB", path)
                shape = _read(f, f"{rank}Q", path)
                offset, nbytes = _read(f, "QQ", path)
                if code not in CODE_DTYPES:
                    raise CheckpointError(f"{path}: unknown dtype code {code} for {name}")
                entries.append((name, CODE_DTYPES[code], shape, offset, nbytes))

            base = f.tell()
            arrays = {}  # type: Dict[str, np.ndarray]
            for name, dtype, shape, offset, nbytes in entries:
                f.seek(base + offset)
                raw = f.read(nbytes)
                if len(raw) != nbytes:
                    raise CheckpointError(f"Truncated payload for {name} in {path}")
                arrays[name] = np.frombuffer(raw, dtype=dtype).reshape(shape).copy()

    except OSError as ex:
        raise CheckpointError(f"Cannot read checkpoint {path}: {ex}")

    return arrays, meta


def save_training_state(
    path: Path,
    model: SimModel,
    optimizer: OptimizerState,
    step: int,
    epoch: int,
    config_text: str,
    **extra: Any,
):
    arrays = {f"model.{k}": v for k, v in state_arrays(model).items()}
    arrays.update({f"optim.{k}": v for k, v in optimizer.arrays().items()})

    meta = dict(extra)
    meta.update(
        step=step,
        epoch=epoch,
        optimizer_step=optimizer.step,
        config=config_text,
    )

    write_container(path, arrays, meta)

    LOG.info("Saved checkpoint at step %d to %s", step, path)


def load_model_state(path: Path, model: SimModel) -> Dict[str, Any]:
    arrays, meta = read_container(path)
    _restore_model(path, model, arrays)
    return meta


def _restore_model(path: Path, model: SimModel, arrays: Mapping[str, np.ndarray]):
    targets = state_arrays(model)
    stored = {k[len("model."):]: v for k, v in arrays.items() if k.startswith("model.")}

    if stored.keys() != targets.keys():
        missing = sorted(targets.keys() - stored.keys())
        unexpected = sorted(stored.keys() - targets.keys())
        raise CheckpointError(
            f"{path} does not match the model: missing {missing[:3]}, unexpected {unexpected[:3]}"
        )

    for name, dst in targets.items():
        if dst.shape != stored[name].shape:
            raise CheckpointError(
                f"{path}: {name} has shape {stored[name].shape}, model expects {dst.shape}"
            )
        dst[...] = stored[name]


def restore_training_state(path: Path, model: SimModel) -> TrainingState:
    arrays, meta = read_container(path)
    _restore_model(path, model, arrays)

    optim_arrays = {k[len("optim."):]: v for k, v in arrays.items() if k.startswith("optim.")}

    LOG.info("Restored checkpoint %s at step %d", path, meta.get("step", 0))

    return TrainingState(
        step=int(meta.get("step", 0)),
        epoch=int(meta.get("epoch", 0)),
        optimizer=OptimizerState.from_arrays(int(meta.get("optimizer_step", 0)), optim_arrays),
        config_text=str(meta.get("config", "")),
        meta=meta,
    )
