"""Self-describing checkpoint container.

Layout (ASCII header lines, raw little-endian float64 blobs)::

    JCTNET-CHECKPOINT 1
    config <n>
    <n lines of key=value>
    meta <m>
    <m lines of key=value>
    tensors <t>
    then per tensor: "<name> <ndim> <d0> ... <dk>\\n" followed by prod(d)*8 bytes
"""

from __future__ import annotations

import io

import numpy as np

from .config import RunConfig

MAGIC = b"JCTNET-CHECKPOINT 1\n"


class CheckpointError(ValueError):
    pass


def save_checkpoint(path, cfg: RunConfig, state: dict[str, np.ndarray], meta: dict | None = None) -> None:
    meta = meta or {}
    out = io.BytesIO()
    out.write(MAGIC)
    cfg_lines = cfg.to_text().splitlines()
    out.write(b"config %d\n" % len(cfg_lines))
    for line in cfg_lines:
        out.write(line.encode("utf-8") + b"\n")
    out.write(b"meta %d\n" % len(meta))
    for k, v in meta.items():
        out.write(f"{k}={v}\n".encode("utf-8"))
    out.write(b"tensors %d\n" % len(state))
    for name, arr in state.items():
        arr = np.asarray(arr)
        dims = " ".join(str(d) for d in arr.shape)
        out.write(f"{name} {arr.ndim} {dims}".rstrip().encode("utf-8") + b"\n")
        out.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())
    with open(path, "wb") as fh:
        fh.write(out.getvalue())


def _readline(fh) -> str:
    line = fh.readline()
    if not line.endswith(b"\n"):
        raise CheckpointError("truncated checkpoint header")
    return line[:-1].decode("utf-8")


def _section(fh, name: str) -> int:
    head = _readline(fh).split()
    if len(head) != 2 or head[0] != name:
        raise CheckpointError(f"expected '{name} <n>' section, got {head}")
    return int(head[1])


def load_checkpoint(path) -> tuple[RunConfig, dict[str, np.ndarray], dict[str, str]]:
    with open(path, "rb") as fh:
        if fh.readline() != MAGIC:
            raise CheckpointError(f"{path}: not a checkpoint file")
        cfg_text = "\n".join(_readline(fh) for _ in range(_section(fh, "config")))
        meta = dict(_readline(fh).split("=", 1) for _ in range(_section(fh, "meta")))
        state = {}
        for _ in range(_section(fh, "tensors")):
            parts = _readline(fh).split()
            name, ndim = parts[0], int(parts[1])
            shape = tuple(int(d) for d in parts[2 : 2 + ndim])
            count = int(np.prod(shape, dtype=np.int64))
            raw = fh.read(count * 8)
            if len(raw) != count * 8:
                raise CheckpointError(f"{path}: tensor {name} truncated")
            state[name] = np.frombuffer(raw, dtype="<f8").reshape(shape).copy()
    return RunConfig.from_text(cfg_text), state, meta
