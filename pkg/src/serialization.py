"""PYDT tensor files and checkpoint directories.

A PYDT file is the 4 magic bytes b"PYDT", a little-endian u32 rank, `rank` little-endian u32
dimensions, then the little-endian float32 payload in C order. A checkpoint is a directory
holding one PYDT file per named tensor plus `manifest.json` (names, shapes, metadata).
Anything saved is rounded to float32; loaders cast back to the dtype of the receiving model.
"""
import json
import os
from typing import Any, Dict, Tuple

import numpy as np

from constants import PYDT_MAGIC, SCHEMA_VERSION
from errors import CheckpointError, TensorFormatError

MANIFEST: str = "manifest.json"

def encode_tensor(array: np.ndarray) -> bytes:
    array = np.asarray(array)
    header: np.ndarray = np.array([array.ndim, *array.shape], dtype="<u4")
    return PYDT_MAGIC + header.tobytes() + np.ascontiguousarray(array, dtype="<f4").tobytes()

def decode_tensor(payload: bytes) -> np.ndarray:
    if payload[:4] != PYDT_MAGIC:
        raise TensorFormatError(f"bad magic bytes: {payload[:4]!r}")
    if len(payload) < 8:
        raise TensorFormatError("truncated header")
    rank: int = int(np.frombuffer(payload, dtype="<u4", count=1, offset=4)[0])
    offset: int = 8 + 4 * rank
    if len(payload) < offset:
        raise TensorFormatError(f"truncated header for rank {rank}")
    shape: Tuple[int, ...] = tuple(int(d) for d in np.frombuffer(payload, dtype="<u4", count=rank, offset=8))
    count: int = int(np.prod(shape, dtype=np.int64))
    if len(payload) != offset + 4 * count:
        raise TensorFormatError(f"payload holds {len(payload) - offset} bytes, shape {shape} needs {4 * count}")
    return np.frombuffer(payload, dtype="<f4", count=count, offset=offset).reshape(shape).astype(np.float32)

def save_tensor(path: os.PathLike, array: np.ndarray) -> None:
    with open(path, "wb") as handle:
        handle.write(encode_tensor(array))

def load_tensor(path: os.PathLike) -> np.ndarray:
    with open(path, "rb") as handle:
        return decode_tensor(handle.read())

def save_checkpoint(directory: os.PathLike, namespaces: Dict[str, Dict[str, np.ndarray]], metadata: Dict[str, Any]) -> None:
    os.makedirs(directory, exist_ok=True)
    entries: list = []
    for namespace, tensors in namespaces.items():
        os.makedirs(os.path.join(directory, namespace), exist_ok=True)
        for name, array in tensors.items():
            relative: str = os.path.join(namespace, f"{name}.pydt")
            save_tensor(os.path.join(directory, relative), array)
            entries.append(dict(namespace=namespace, name=name, shape=list(np.shape(array)), file=relative))

    manifest: Dict[str, Any] = dict(format="PYDT", schema_version=SCHEMA_VERSION, tensors=entries, metadata=metadata)
    with open(os.path.join(directory, MANIFEST), "w") as handle:
        json.dump(manifest, handle, indent=2)

def load_checkpoint(directory: os.PathLike) -> Tuple[Dict[str, Dict[str, np.ndarray]], Dict[str, Any]]:
    manifest_path: os.PathLike = os.path.join(directory, MANIFEST)
    if not os.path.isfile(manifest_path):
        raise CheckpointError(f"no checkpoint manifest at: {manifest_path}")

    try:
        with open(manifest_path) as handle:
            manifest: Dict[str, Any] = json.load(handle)
        namespaces: Dict[str, Dict[str, np.ndarray]] = {}
        for entry in manifest["tensors"]:
            array: np.ndarray = load_tensor(os.path.join(directory, entry["file"]))
            if list(array.shape) != list(entry["shape"]):
                raise TensorFormatError(f"{entry['file']} has shape {array.shape}, manifest says {entry['shape']}")
            namespaces.setdefault(entry["namespace"], {})[entry["name"]] = array
    except (OSError, KeyError, ValueError) as error:
        raise CheckpointError(f"corrupt checkpoint at {directory}: {error}") from error

    return namespaces, manifest.get("metadata", {})
