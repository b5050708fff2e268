"""Binary checkpoint format.

Layout: the 9-byte magic ``DIALCKPT1``, then records until end of file.
Each record is ``u32 name_len | name (utf-8) | u32 rows | u32 cols |
rows*cols float64``; integers and floats are little-endian, values row-major.
"""

from __future__ import annotations

import re
import struct
from pathlib import Path

import numpy as np

from .autodiff import Tensor
from .errors import FormatError
from .losses import CenterTable
from .models import ModelParams

MAGIC = b"DIALCKPT1"
_NAME = re.compile(r"^(encoder|classifier|discriminator)\.(\d+)\.(W|b)$")


def encode_tensors(tensors: dict[str, np.ndarray]) -> bytes:
    parts = [MAGIC]
    for name, arr in tensors.items():
        arr = np.ascontiguousarray(arr, dtype="<f8")
        if arr.ndim != 2:
            raise FormatError(f"tensor {name!r} is not 2-D")
        raw = name.encode("utf-8")
        parts.append(struct.pack("<I", len(raw)) + raw + struct.pack("<II", *arr.shape))
        parts.append(arr.tobytes())
    return b"".join(parts)


def decode_tensors(blob: bytes) -> dict[str, np.ndarray]:
    if blob[: len(MAGIC)] != MAGIC:
        raise FormatError(f"bad checkpoint magic {blob[:len(MAGIC)]!r}")
    out: dict[str, np.ndarray] = {}
    pos = len(MAGIC)

    def take(n: int, what: str) -> bytes:
        nonlocal pos
        if pos + n > len(blob):
            raise FormatError(f"truncated checkpoint at offset {pos}: need {n} bytes for {what}, "
                              f"{len(blob) - pos} left")
        chunk = blob[pos:pos + n]
        pos += n
        return chunk

    while pos < len(blob):
        start = pos
        (name_len,) = struct.unpack("<I", take(4, "name length"))
        try:
            name = take(name_len, "name").decode("utf-8")
        except UnicodeDecodeError as exc:
            raise FormatError(f"undecodable tensor name at offset {start + 4}") from exc
        rows, cols = struct.unpack("<II", take(8, f"shape of {name!r}"))
        if rows == 0 or cols == 0:
            raise FormatError(f"tensor {name!r} at offset {start} has empty shape {rows}x{cols}")
        if name in out:
            raise FormatError(f"duplicate tensor {name!r} at offset {start}")
        data = take(8 * rows * cols, f"values of {name!r}")
        out[name] = np.frombuffer(data, dtype="<f8").reshape(rows, cols).astype(np.float64)
    return out


def params_to_tensors(params: ModelParams, centers: CenterTable | None) -> dict[str, np.ndarray]:
    tensors = {name: t.value for name, t in params.named().items()}
    if centers is not None:
        tensors["centers"] = centers.centers
        tensors["centers.meta"] = np.array([[centers.gamma, 1.0 if centers.initialized else 0.0]])
    return tensors


def tensors_to_params(tensors: dict[str, np.ndarray]) -> tuple[ModelParams, CenterTable | None]:
    groups: dict[str, dict[int, dict[str, np.ndarray]]] = {}
    for name, arr in tensors.items():
        m = _NAME.match(name)
        if m is None:
            if name in ("centers", "centers.meta"):
                continue
            raise FormatError(f"unknown tensor name {name!r}")
        group, idx, kind = m.group(1), int(m.group(2)), m.group(3)
        groups.setdefault(group, {}).setdefault(idx, {})[kind] = arr

    def layers(group):
        found = groups.get(group)
        if not found:
            return None
        out = []
        for i in range(len(found)):
            entry = found.get(i)
            if entry is None or set(entry) != {"W", "b"}:
                raise FormatError(f"incomplete layer {group}.{i}")
            out.append((Tensor(entry["W"], requires_grad=True, name=f"{group}.{i}.W"),
                        Tensor(entry["b"], requires_grad=True, name=f"{group}.{i}.b")))
        return out

    enc = layers("encoder")
    clf = layers("classifier")
    if enc is None or clf is None or len(clf) != 1:
        raise FormatError("checkpoint lacks an encoder or a single-layer classifier")
    params = ModelParams(enc, clf[0], layers("discriminator"))
    try:
        params.spec().validate()
    except Exception as exc:
        raise FormatError(f"inconsistent layer shapes: {exc}") from exc

    centers = None
    if "centers" in tensors:
        meta = tensors.get("centers.meta")
        if meta is None or meta.shape != (1, 2):
            raise FormatError("centers present without a 1x2 centers.meta record")
        centers = CenterTable(tensors["centers"].copy(), float(meta[0, 0]), bool(meta[0, 1]))
    return params, centers


def save_checkpoint(params: ModelParams, centers: CenterTable | None, path) -> None:
    Path(path).write_bytes(encode_tensors(params_to_tensors(params, centers)))


def load_checkpoint(path) -> tuple[ModelParams, CenterTable | None]:
    return tensors_to_params(decode_tensors(Path(path).read_bytes()))
