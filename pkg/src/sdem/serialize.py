"""Columnar binary dumps and CSV summaries for path ensembles.

Layout of the binary dump: magic bytes "SDEM", a little-endian u32 format
version, a u32 array count, then for each array a u32 name length, the
UTF-8 name, a u32 ndim, u64 dimensions, and the raw little-endian f64
data in C order.
"""

from __future__ import annotations

import io
import struct
from typing import Mapping

import numpy as np

from .flow import EnsembleResult

__all__ = ["MAGIC", "VERSION", "dump_arrays", "load_arrays",
           "save_ensemble", "load_ensemble", "ensemble_csv_summary"]

MAGIC = b"SDEM"
VERSION = 1


def dump_arrays(stream, arrays: Mapping[str, np.ndarray]):
    stream.write(MAGIC)
    stream.write(struct.pack("<I", VERSION))
    stream.write(struct.pack("<I", len(arrays)))
    for name, arr in arrays.items():
        arr = np.ascontiguousarray(np.asarray(arr, dtype="<f8"))
        encoded = name.encode("utf-8")
        stream.write(struct.pack("<I", len(encoded)))
        stream.write(encoded)
        stream.write(struct.pack("<I", arr.ndim))
        for d in arr.shape:
            stream.write(struct.pack("<Q", d))
        stream.write(arr.tobytes())


def load_arrays(stream) -> dict[str, np.ndarray]:
    magic = stream.read(4)
    if magic != MAGIC:
        raise ValueError(f"not an ensemble dump (magic {magic!r})")
    (version,) = struct.unpack("<I", stream.read(4))
    if version != VERSION:
        raise ValueError(f"unsupported dump version {version}")
    (count,) = struct.unpack("<I", stream.read(4))
    out = {}
    for _ in range(count):
        (nlen,) = struct.unpack("<I", stream.read(4))
        name = stream.read(nlen).decode("utf-8")
        (ndim,) = struct.unpack("<I", stream.read(4))
        shape = tuple(struct.unpack("<Q", stream.read(8))[0] for _ in range(ndim))
        n_items = int(np.prod(shape, dtype=np.int64)) if shape else 1
        data = np.frombuffer(stream.read(8 * n_items), dtype="<f8").reshape(shape)
        out[name] = data.copy()
    return out


def _ensemble_arrays(result: EnsembleResult) -> dict[str, np.ndarray]:
    arrays = {
        "grid": np.array([result.grid.T, float(result.grid.steps), float(result.paths)]),
        "state_T": result.state_T,
        "flag": result.flag.astype(float),
    }
    if result.jac_T is not None:
        arrays["jac_T"] = result.jac_T
    for key, val in result.extras.items():
        arrays["extra:" + key] = val
    return arrays


def save_ensemble(path, result: EnsembleResult):
    with open(path, "wb") as fh:
        dump_arrays(fh, _ensemble_arrays(result))


def load_ensemble(path) -> dict[str, np.ndarray]:
    with open(path, "rb") as fh:
        return load_arrays(fh)


def ensemble_csv_summary(result: EnsembleResult, config_hash: str = "") -> str:
    """One row per recorded statistic: name, mean, se, min, max."""
    buf = io.StringIO()
    buf.write(f"# config_fingerprint={config_hash}\n")
    buf.write("statistic,mean,se,min,max\n")

    def row(name, values):
        values = np.asarray(values, dtype=float).reshape(len(values), -1)
        flat = values[~result.flag]
        mean = flat.mean()
        se = flat.std(ddof=1) / np.sqrt(flat.shape[0]) if flat.shape[0] > 1 else float("nan")
        buf.write(f"{name},{mean!r},{float(se)!r},{flat.min()!r},{flat.max()!r}\n")

    for i in range(result.state_T.shape[1]):
        row(f"state_T[{i}]", result.state_T[:, i: i + 1])
    if result.jac_T is not None:
        norms = np.sqrt(np.sum(result.jac_T * result.jac_T, axis=(1, 2)))
        row("jac_T_fro", norms[:, None])
    for key, val in sorted(result.extras.items()):
        if val.ndim == 1:
            row(key, val[:, None])
    buf.write(f"flagged,{result.n_flagged},,,\n")
    return buf.getvalue()
