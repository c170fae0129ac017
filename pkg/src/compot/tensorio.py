"""Named-tensor container files and the compression manifest.

Container layout (all little-endian)::

    [0:8)        u64 header length H
    [8:8+H)      UTF-8 JSON header: name -> {"dtype", "shape", "data_offsets"}
                 plus an optional "__metadata__" object of string values
    [8+H:)       raw tensor payloads, offsets relative to 8+H
"""

from __future__ import annotations

import json
import math
import os
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Mapping

import numpy as np

DTYPES: dict[str, np.dtype] = {
    "F16": np.dtype("<f2"),
    "F32": np.dtype("<f4"),
    "F64": np.dtype("<f8"),
    "U8": np.dtype("u1"),
}
_CODES = {v.str if v.itemsize > 1 else "|u1": k for k, v in DTYPES.items()}

METADATA_KEY = "__metadata__"

IN_OUT = "in_out"
OUT_IN = "out_in"
ORIENTATIONS = (IN_OUT, OUT_IN)


class ContainerError(ValueError):
    pass


@dataclass(frozen=True)
class TensorInfo:
    dtype: str
    shape: tuple[int, ...]
    data_offsets: tuple[int, int]

    @property
    def nbytes(self) -> int:
        return self.data_offsets[1] - self.data_offsets[0]


def _dtype_code(arr: np.ndarray) -> str:
    dt = arr.dtype.newbyteorder("<") if arr.dtype.itemsize > 1 else arr.dtype
    key = dt.str if dt.itemsize > 1 else "|u1"
    try:
        return _CODES[key]
    except KeyError:
        raise ContainerError(f"unsupported dtype {arr.dtype}") from None


@dataclass
class TensorContainer:
    """Parsed header plus a path; payloads are read on demand."""

    path: Path
    entries: dict[str, TensorInfo]
    data_start: int
    metadata: dict[str, str] = field(default_factory=dict)

    def __contains__(self, name: str) -> bool:
        return name in self.entries

    def __len__(self) -> int:
        return len(self.entries)

    def keys(self) -> list[str]:
        return list(self.entries)

    def raw_bytes(self, name: str) -> bytes:
        info = self._info(name)
        begin, end = info.data_offsets
        with open(self.path, "rb") as fh:
            fh.seek(self.data_start + begin)
            return fh.read(end - begin)

    def get(self, name: str) -> np.ndarray:
        info = self._info(name)
        arr = np.frombuffer(self.raw_bytes(name), dtype=DTYPES[info.dtype])
        return arr.reshape(info.shape).copy()

    def _info(self, name: str) -> TensorInfo:
        try:
            return self.entries[name]
        except KeyError:
            raise ContainerError(f"missing tensor {name!r}") from None


def _no_duplicates(pairs):
    out = {}
    for k, v in pairs:
        if k in out:
            raise ContainerError(f"duplicate tensor name {k!r}")
        out[k] = v
    return out


def read_container(path: str | os.PathLike) -> TensorContainer:
    path = Path(path)
    size = path.stat().st_size
    with open(path, "rb") as fh:
        prefix = fh.read(8)
        if len(prefix) < 8:
            raise ContainerError("truncated header")
        (hlen,) = struct.unpack("<Q", prefix)
        if 8 + hlen > size:
            raise ContainerError("truncated header")
        raw = fh.read(hlen)
    try:
        header = json.loads(raw.decode("utf-8"), object_pairs_hook=_no_duplicates)
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise ContainerError(f"malformed header: {exc}") from None
    if not isinstance(header, dict):
        raise ContainerError("malformed header: not a JSON object")

    meta = header.pop(METADATA_KEY, None) or {}
    if not isinstance(meta, dict) or not all(isinstance(v, str) for v in meta.values()):
        raise ContainerError("malformed header: __metadata__ must map to strings")

    data_start = 8 + hlen
    data_len = size - data_start
    entries: dict[str, TensorInfo] = {}
    for name, spec in header.items():
        try:
            dtype = spec["dtype"]
            shape = tuple(int(d) for d in spec["shape"])
            begin, end = (int(o) for o in spec["data_offsets"])
        except (KeyError, TypeError, ValueError):
            raise ContainerError(f"malformed header entry {name!r}") from None
        if dtype not in DTYPES:
            raise ContainerError(f"malformed header: unknown dtype {dtype!r}")
        if any(d < 0 for d in shape) or begin < 0 or end < begin:
            raise ContainerError(f"malformed header entry {name!r}")
        if end - begin != math.prod(shape) * DTYPES[dtype].itemsize:
            raise ContainerError(f"byte range of {name!r} does not match its shape")
        if end > data_len:
            raise ContainerError(f"truncated data region for {name!r}")
        entries[name] = TensorInfo(dtype, shape, (begin, end))

    spans = sorted(e.data_offsets for e in entries.values() if e.nbytes)
    for (_, prev_end), (begin, _) in zip(spans, spans[1:]):
        if begin < prev_end:
            raise ContainerError("overlapping byte ranges")
    return TensorContainer(path, entries, data_start, dict(meta))


def encode_container(
    tensors: Mapping[str, np.ndarray], metadata: Mapping[str, str] | None = None
) -> bytes:
    """Serialize to the container byte layout. Tensors are laid out in sorted-name order."""
    header: dict[str, Any] = {}
    if metadata:
        header[METADATA_KEY] = {str(k): str(v) for k, v in sorted(metadata.items())}
    chunks = []
    offset = 0
    for name in sorted(tensors):
        if name == METADATA_KEY:
            raise ContainerError(f"reserved tensor name {name!r}")
        arr = np.asarray(tensors[name])
        code = _dtype_code(arr)
        payload = np.ascontiguousarray(arr, dtype=DTYPES[code]).tobytes()
        header[name] = {
            "dtype": code,
            "shape": list(arr.shape),
            "data_offsets": [offset, offset + len(payload)],
        }
        chunks.append(payload)
        offset += len(payload)
    blob = json.dumps(header, separators=(",", ":"), sort_keys=False).encode("utf-8")
    blob += b" " * (-len(blob) % 8)
    return struct.pack("<Q", len(blob)) + blob + b"".join(chunks)


def write_container(
    path: str | os.PathLike,
    tensors: Mapping[str, np.ndarray],
    metadata: Mapping[str, str] | None = None,
) -> None:
    """Write atomically: a temp file is renamed into place only after a full write."""
    if len(set(tensors)) != len(tensors):
        raise ContainerError("name collision")
    data = encode_container(tensors, metadata)
    path = Path(path)
    tmp = path.with_name(path.name + ".partial")
    try:
        with open(tmp, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    finally:
        if tmp.exists():
            tmp.unlink()


@dataclass
class WeightMatrix:
    """Dense f32 matrix in X @ W convention: m input rows, n output columns."""

    name: str
    data: np.ndarray
    orientation: str = IN_OUT

    @property
    def m(self) -> int:
        return self.data.shape[0]

    @property
    def n(self) -> int:
        return self.data.shape[1]

    def stored(self) -> np.ndarray:
        """The matrix in its on-disk orientation."""
        return self.data.T if self.orientation == OUT_IN else self.data


def load_weight(container: TensorContainer, name: str, orientation: str = IN_OUT) -> WeightMatrix:
    if orientation not in ORIENTATIONS:
        raise ContainerError(f"unknown orientation {orientation!r}")
    arr = container.get(name)
    if arr.ndim != 2:
        raise ContainerError(f"{name!r} is not a matrix (shape {arr.shape})")
    if arr.dtype == np.uint8:
        raise ContainerError(f"{name!r} has integer dtype")
    data = arr.astype(np.float32)
    if not np.isfinite(data).all():
        raise ContainerError(f"{name!r} has non-finite values")
    if orientation == OUT_IN:
        data = np.ascontiguousarray(data.T)
    return WeightMatrix(name, data, orientation)


@dataclass
class LayerEntry:
    weight: str
    gram: str | None = None
    group: str | None = None
    orientation: str = IN_OUT


@dataclass
class Manifest:
    layers: list[LayerEntry]
    config: dict[str, Any] = field(default_factory=dict)

    @classmethod
    def from_dict(cls, doc: Mapping[str, Any]) -> "Manifest":
        if "layers" not in doc or not isinstance(doc["layers"], list):
            raise ContainerError("manifest needs a 'layers' list")
        layers = []
        for item in doc["layers"]:
            if not isinstance(item, dict) or not isinstance(item.get("weight"), str):
                raise ContainerError(f"bad manifest layer {item!r}")
            orient = item.get("orientation") or IN_OUT
            if orient not in ORIENTATIONS:
                raise ContainerError(f"unknown orientation {orient!r}")
            layers.append(LayerEntry(item["weight"], item.get("gram"), item.get("group"), orient))
        names = [layer.weight for layer in layers]
        if len(set(names)) != len(names):
            raise ContainerError("duplicate layer in manifest")
        return cls(layers, dict(doc.get("config") or {}))

    def to_dict(self) -> dict[str, Any]:
        return {
            "layers": [
                {"weight": l.weight, "gram": l.gram, "group": l.group, "orientation": l.orientation}
                for l in self.layers
            ],
            "config": self.config,
        }

    def validate(
        self, weights: TensorContainer, grams: TensorContainer | None = None
    ) -> None:
        for layer in self.layers:
            if layer.weight not in weights:
                raise ContainerError(f"manifest weight {layer.weight!r} not in container")
            if layer.gram is not None and grams is not None and layer.gram not in grams:
                raise ContainerError(f"manifest gram {layer.gram!r} not in container")


def read_manifest(path: str | os.PathLike) -> Manifest:
    with open(path, encoding="utf-8") as fh:
        return Manifest.from_dict(json.load(fh))


def write_manifest(path: str | os.PathLike, manifest: Manifest) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(manifest.to_dict(), fh, indent=2, sort_keys=True)
        fh.write("\n")
