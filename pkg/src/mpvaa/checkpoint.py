"""Named-array archive used for model checkpoints and embedding stores.

Layout (binary file):

    MPVAA-CKPT v1\\n
    <name> f32 <d0> <d1> ...\\n
    <row-major little-endian float32 payload>
    ... repeated per array ...

Arrays are written sorted by name, so saving is canonical: save(load(f))
reproduces f byte for byte. Array names may contain any printable
characters except whitespace.
"""

from __future__ import annotations

import re
from pathlib import Path
from typing import Mapping

import numpy as np

__all__ = ["MAGIC", "save_arrays", "load_arrays"]

MAGIC = "MPVAA-CKPT v1"

_NAME_RE = re.compile(r"^\S+$")


def save_arrays(path, arrays: Mapping[str, np.ndarray]) -> None:
    """Write float32 arrays to ``path`` in canonical (name-sorted) order."""
    path = Path(path)
    for name in arrays:
        if not _NAME_RE.match(name):
            raise ValueError(f"array name {name!r} contains whitespace")
    with open(path, "wb") as fh:
        fh.write((MAGIC + "\n").encode("ascii"))
        for name in sorted(arrays):
            arr = np.ascontiguousarray(arrays[name], dtype="<f4")
            dims = " ".join(str(d) for d in arr.shape)
            header = f"{name} f32 {dims}".rstrip() + "\n"
            fh.write(header.encode("ascii"))
            fh.write(arr.tobytes())


def _read_line(fh) -> str:
    chars = bytearray()
    while True:
        b = fh.read(1)
        if not b:
            if chars:
                raise ValueError("checkpoint truncated inside a header line")
            return ""
        if b == b"\n":
            return chars.decode("ascii")
        chars.extend(b)


def load_arrays(path) -> dict[str, np.ndarray]:
    """Read an archive back into {name: float32 array} (file order preserved)."""
    path = Path(path)
    out: dict[str, np.ndarray] = {}
    with open(path, "rb") as fh:
        magic = _read_line(fh)
        if magic != MAGIC:
            raise ValueError(f"{path}: bad magic line {magic!r}, expected {MAGIC!r}")
        while True:
            header = _read_line(fh)
            if not header:
                break
            fields = header.split(" ")
            if len(fields) < 2 or fields[1] != "f32":
                raise ValueError(f"{path}: malformed array header {header!r}")
            name = fields[0]
            try:
                shape = tuple(int(d) for d in fields[2:])
            except ValueError as err:
                raise ValueError(f"{path}: bad dimensions in header {header!r}") from err
            count = int(np.prod(shape, dtype=np.int64)) if shape else 1
            payload = fh.read(count * 4)
            if len(payload) != count * 4:
                raise ValueError(f"{path}: truncated payload for array {name!r}")
            arr = np.frombuffer(payload, dtype="<f4").reshape(shape).copy()
            if name in out:
                raise ValueError(f"{path}: duplicate array name {name!r}")
            out[name] = arr
    return out
