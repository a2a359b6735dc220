"""Flat little-endian float64 checkpoints with a plain-text manifest.

``<stem>.bin`` holds every array back to back; ``<stem>.manifest`` has one
line per array: ``name<TAB>shape<TAB>offset`` with the shape written as
comma-separated extents (empty for scalars) and the offset counted in
elements from the start of the binary file.
"""

from __future__ import annotations

from pathlib import Path
from typing import Iterable, Mapping

import numpy as np

_LE_F64 = np.dtype("<f8")


def _paths(stem: str | Path) -> tuple[Path, Path]:
    stem = Path(stem)
    return stem.with_suffix(".bin"), stem.with_suffix(".manifest")


def save_arrays(stem: str | Path, arrays: Iterable[tuple[str, np.ndarray]]) -> None:
    bin_path, man_path = _paths(stem)
    bin_path.parent.mkdir(parents=True, exist_ok=True)
    offset = 0
    lines = []
    with open(bin_path, "wb") as fh:
        for name, arr in arrays:
            if "\t" in name or "\n" in name:
                raise ValueError(f"illegal character in parameter name {name!r}")
            arr = np.ascontiguousarray(arr, dtype=_LE_F64)
            fh.write(arr.tobytes())
            shape = ",".join(str(s) for s in arr.shape)
            lines.append(f"{name}\t{shape}\t{offset}")
            offset += arr.size
    man_path.write_text("\n".join(lines) + "\n")


def load_arrays(stem: str | Path) -> dict[str, np.ndarray]:
    bin_path, man_path = _paths(stem)
    flat = np.fromfile(bin_path, dtype=_LE_F64)
    out: dict[str, np.ndarray] = {}
    for lineno, line in enumerate(man_path.read_text().splitlines(), 1):
        if not line.strip():
            continue
        try:
            name, shape_txt, off_txt = line.split("\t")
            shape = tuple(int(s) for s in shape_txt.split(",")) if shape_txt else ()
            offset = int(off_txt)
        except ValueError as exc:
            raise ValueError(f"{man_path}:{lineno}: malformed manifest line {line!r}") from exc
        size = int(np.prod(shape)) if shape else 1
        if offset + size > flat.size:
            raise ValueError(f"{man_path}:{lineno}: {name} runs past the end of {bin_path}")
        out[name] = flat[offset:offset + size].reshape(shape).astype(np.float64)
    return out


def save_parameters(stem: str | Path, named_params) -> None:
    save_arrays(stem, ((name, p.data) for name, p in named_params))


def load_into(stem: str | Path, named_params, strict: bool = True) -> list[str]:
    """Copy stored arrays into matching parameters; returns the names that were loaded."""
    stored: Mapping[str, np.ndarray] = load_arrays(stem)
    loaded = []
    for name, p in named_params:
        if name not in stored:
            if strict:
                raise KeyError(f"checkpoint {stem} has no entry for {name}")
            continue
        arr = stored[name]
        if arr.shape != p.shape:
            raise ValueError(f"{name}: checkpoint shape {arr.shape} != parameter shape {p.shape}")
        p.data[...] = arr
        loaded.append(name)
    return loaded
