"""NCAD1 model container: magic, JSON header, concatenated f32le tensors."""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from ..errors import CorruptModelError, ModeMismatchError
from .network import ModelParams, Network, NetworkSpec

MAGIC = b"NCAD1\x00"


def save_model(model: ModelParams, path: str | Path) -> None:
    names = sorted(model.tensors)
    table = []
    offset = 0
    for name in names:
        t = model.tensors[name]
        table.append({"name": name, "shape": list(t.shape), "offset": offset})
        offset += t.size * 4
    header = json.dumps({
        "spec": model.spec.to_json(),
        "mode": model.spec.mode,
        "tensors": table,
    }, sort_keys=True).encode()
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(np.array(len(header), dtype="<u4").tobytes())
        f.write(header)
        for name in names:
            f.write(np.ascontiguousarray(model.tensors[name], dtype="<f4").tobytes())


def load_model(path: str | Path, expect_mode: str | None = None) -> ModelParams:
    blob = Path(path).read_bytes()
    if blob[:len(MAGIC)] != MAGIC:
        raise CorruptModelError(f"{path}: bad magic bytes")
    if len(blob) < len(MAGIC) + 4:
        raise CorruptModelError(f"{path}: truncated header length")
    hlen = int(np.frombuffer(blob, dtype="<u4", count=1, offset=len(MAGIC))[0])
    hstart = len(MAGIC) + 4
    if len(blob) < hstart + hlen:
        raise CorruptModelError(f"{path}: truncated header")
    try:
        header = json.loads(blob[hstart:hstart + hlen].decode())
        spec = NetworkSpec.from_json(header["spec"])
    except (ValueError, KeyError) as e:
        raise CorruptModelError(f"{path}: unreadable header ({e})") from e
    if expect_mode is not None and spec.mode != expect_mode:
        raise ModeMismatchError(f"{path}: model mode is {spec.mode!r}, expected {expect_mode!r}")
    payload = hstart + hlen
    expected_shapes = Network(spec).param_shapes()
    tensors: dict[str, np.ndarray] = {}
    for entry in header["tensors"]:
        name, shape, offset = entry["name"], tuple(entry["shape"]), entry["offset"]
        size = int(np.prod(shape, dtype=np.int64)) if shape else 1
        start = payload + offset
        if start + size * 4 > len(blob):
            raise CorruptModelError(f"{path}: tensor {name} extends past end of file")
        tensors[name] = np.frombuffer(blob, dtype="<f4", count=size, offset=start).reshape(shape).copy()
    missing = set(expected_shapes) - set(tensors)
    if missing:
        raise CorruptModelError(f"{path}: missing tensors {sorted(missing)}")
    for name, shape in expected_shapes.items():
        if tensors[name].shape != shape:
            raise CorruptModelError(
                f"{path}: tensor {name} has shape {tensors[name].shape}, architecture wants {shape}")
    return ModelParams(spec, tensors)
