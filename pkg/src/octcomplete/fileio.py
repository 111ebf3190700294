"""File formats: point clouds, octree containers, checkpoints, label grids."""

import hashlib
import json
import os
import struct
import tempfile

import numpy as np

from .errors import DomainError
from .octree import Octree, PointSet, build_levels

OCTC_MAGIC = b"OCTC"
OCKP_MAGIC = b"OCKP"
FORMAT_VERSION = 1


class DataError(RuntimeError):
    """I/O or file-format failure attributable to the data, not the code."""


# -- point clouds -----------------------------------------------------------


def write_ply(path, points: PointSet):
    has_label = points.labels is not None
    with open(path, "w") as f:
        f.write("ply\nformat ascii 1.0\n")
        f.write(f"element vertex {len(points)}\n")
        for prop in ("x", "y", "z", "nx", "ny", "nz"):
            f.write(f"property float {prop}\n")
        if has_label:
            f.write("property int label\n")
        f.write("end_header\n")
        for i in range(len(points)):
            row = "%.7g %.7g %.7g %.7g %.7g %.7g" % (
                *points.positions[i],
                *points.normals[i],
            )
            if has_label:
                row += f" {int(points.labels[i])}"
            f.write(row + "\n")


def read_ply(path) -> PointSet:
    try:
        with open(path) as f:
            line = f.readline().strip()
            if line != "ply":
                raise DataError(f"{path}: not a PLY file")
            props = []
            count = 0
            while True:
                line = f.readline()
                if not line:
                    raise DataError(f"{path}: truncated header")
                line = line.strip()
                if line.startswith("element vertex"):
                    count = int(line.split()[-1])
                elif line.startswith("property"):
                    props.append(line.split()[-1])
                elif line == "end_header":
                    break
            data = np.loadtxt(f, max_rows=count, ndmin=2)
    except OSError as e:
        raise DataError(f"{path}: {e}") from e
    if data.shape[0] != count or data.shape[1] < 6:
        raise DataError(f"{path}: vertex data mismatch")
    labels = None
    if "label" in props:
        labels = data[:, props.index("label")].astype(np.int32)
    return PointSet(positions=data[:, :3], normals=data[:, 3:6], labels=labels)


def write_xyz(path, points: PointSet):
    cols = [points.positions, points.normals]
    if points.labels is not None:
        cols.append(points.labels[:, None].astype(np.float64))
    np.savetxt(path, np.hstack(cols), fmt="%.7g")


def read_xyz(path) -> PointSet:
    try:
        data = np.loadtxt(path, ndmin=2)
    except OSError as e:
        raise DataError(f"{path}: {e}") from e
    if data.shape[1] not in (6, 7):
        raise DataError(f"{path}: expected 'x y z nx ny nz [label]' columns")
    labels = data[:, 6].astype(np.int32) if data.shape[1] == 7 else None
    return PointSet(positions=data[:, :3], normals=data[:, 3:6], labels=labels)


def read_points(path) -> PointSet:
    if str(path).endswith(".ply"):
        return read_ply(path)
    return read_xyz(path)


# -- octree container -------------------------------------------------------


def save_octree(path, octree: Octree):
    with open(path, "wb") as f:
        f.write(OCTC_MAGIC)
        f.write(struct.pack("<II", FORMAT_VERSION, octree.depth))
        counts = octree.node_counts()
        f.write(struct.pack(f"<{len(counts)}I", *counts))
        for lv in octree.levels:
            f.write(lv.keys.astype("<u8").tobytes())
        for lv in octree.levels:
            f.write(lv.status.astype(np.uint8).tobytes())
        f.write(octree.signal.astype("<f4").tobytes())


def load_octree(path) -> Octree:
    try:
        with open(path, "rb") as f:
            if f.read(4) != OCTC_MAGIC:
                raise DataError(f"{path}: bad magic")
            version, depth = struct.unpack("<II", f.read(8))
            if version != FORMAT_VERSION:
                raise DataError(f"{path}: unsupported version {version}")
            counts = struct.unpack(f"<{depth + 1}I", f.read(4 * (depth + 1)))
            keys = [
                np.frombuffer(f.read(8 * c), dtype="<u8").astype(np.uint64)
                for c in counts
            ]
            status = [
                np.frombuffer(f.read(c), dtype=np.uint8).copy() for c in counts
            ]
            signal = np.frombuffer(f.read(4 * 4 * counts[-1]), dtype="<f4")
            signal = signal.reshape(counts[-1], 4).astype(np.float32)
    except OSError as e:
        raise DataError(f"{path}: {e}") from e
    finest = keys[depth][status[depth] == 1]
    levels = build_levels(finest, depth)
    for l, lv in enumerate(levels):
        if len(lv.keys) != counts[l] or not np.array_equal(lv.keys, keys[l]):
            raise DataError(f"{path}: inconsistent level {l} keys")
        lv.status = status[l]
    return Octree(depth=depth, levels=levels, signal=signal)


# -- checkpoints ------------------------------------------------------------


def config_hash(text):
    return hashlib.sha256(text.encode()).digest()


def save_checkpoint(path, named_arrays, config_text, epoch):
    """Atomic write of the named tensor table plus metadata."""
    tmp_fd, tmp_path = tempfile.mkstemp(dir=os.path.dirname(os.path.abspath(path)))
    try:
        with os.fdopen(tmp_fd, "wb") as f:
            f.write(OCKP_MAGIC)
            f.write(struct.pack("<I", FORMAT_VERSION))
            f.write(config_hash(config_text))
            f.write(struct.pack("<I", epoch))
            cfg = config_text.encode()
            f.write(struct.pack("<I", len(cfg)))
            f.write(cfg)
            f.write(struct.pack("<I", len(named_arrays)))
            for name, arr in named_arrays.items():
                nb = name.encode()
                f.write(struct.pack("<H", len(nb)))
                f.write(nb)
                arr = np.asarray(arr, dtype=np.float32)
                f.write(struct.pack("<I", arr.ndim))
                f.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
                f.write(arr.astype("<f4").tobytes())
        os.replace(tmp_path, path)
    except BaseException:
        if os.path.exists(tmp_path):
            os.unlink(tmp_path)
        raise


def load_checkpoint(path):
    try:
        with open(path, "rb") as f:
            if f.read(4) != OCKP_MAGIC:
                raise DataError(f"{path}: bad magic")
            (version,) = struct.unpack("<I", f.read(4))
            if version != FORMAT_VERSION:
                raise DataError(f"{path}: unsupported version {version}")
            chash = f.read(32)
            (epoch,) = struct.unpack("<I", f.read(4))
            (clen,) = struct.unpack("<I", f.read(4))
            config_text = f.read(clen).decode()
            (count,) = struct.unpack("<I", f.read(4))
            arrays = {}
            for _ in range(count):
                (nlen,) = struct.unpack("<H", f.read(2))
                name = f.read(nlen).decode()
                (ndim,) = struct.unpack("<I", f.read(4))
                shape = struct.unpack(f"<{ndim}I", f.read(4 * ndim))
                n = int(np.prod(shape)) if ndim else 1
                arrays[name] = (
                    np.frombuffer(f.read(4 * n), dtype="<f4")
                    .reshape(shape)
                    .astype(np.float32)
                )
    except OSError as e:
        raise DataError(f"{path}: {e}") from e
    if config_hash(config_text) != chash:
        raise DataError(f"{path}: config hash mismatch")
    return {"epoch": epoch, "config_text": config_text, "arrays": arrays}


# -- label grids ------------------------------------------------------------


def save_sgrid(path, grid):
    grid = np.asarray(grid, dtype=np.int32)
    with open(path, "w") as f:
        f.write("SGRID %d %d %d\n" % grid.shape)
        flat = grid.ravel()
        edges = np.flatnonzero(np.diff(flat)) + 1
        starts = np.concatenate([[0], edges])
        ends = np.concatenate([edges, [len(flat)]])
        for s, e in zip(starts, ends):
            f.write(f"{int(flat[s])} {int(e - s)}\n")


def load_sgrid(path):
    try:
        with open(path) as f:
            header = f.readline().split()
            if len(header) != 4 or header[0] != "SGRID":
                raise DataError(f"{path}: bad SGRID header")
            dims = tuple(int(v) for v in header[1:])
            runs = np.loadtxt(f, dtype=np.int64, ndmin=2)
    except OSError as e:
        raise DataError(f"{path}: {e}") from e
    flat = np.repeat(runs[:, 0], runs[:, 1]).astype(np.int32)
    if flat.size != int(np.prod(dims)):
        raise DataError(f"{path}: run lengths do not fill the grid")
    return flat.reshape(dims)


# -- dataset manifest -------------------------------------------------------


def write_manifest(path, entries):
    """One line per sample: partial complete grid(or -) seed."""
    with open(path, "w") as f:
        for e in entries:
            f.write(f"{e['partial']} {e['complete']} {e.get('grid') or '-'} {e['seed']}\n")


def read_manifest(path):
    entries = []
    try:
        with open(path) as f:
            for line in f:
                line = line.strip()
                if not line or line.startswith("#"):
                    continue
                parts = line.split()
                if len(parts) != 4:
                    raise DataError(f"{path}: malformed manifest line: {line}")
                entries.append(
                    {
                        "partial": parts[0],
                        "complete": parts[1],
                        "grid": None if parts[2] == "-" else parts[2],
                        "seed": int(parts[3]),
                    }
                )
    except OSError as e:
        raise DataError(f"{path}: {e}") from e
    return entries


# -- flat key=value config --------------------------------------------------


def write_config(path, values):
    with open(path, "w") as f:
        for k, v in values.items():
            f.write(f"{k}={v}\n")


def read_config(path):
    out = {}
    try:
        with open(path) as f:
            for line in f:
                line = line.strip()
                if not line or line.startswith("#"):
                    continue
                if "=" not in line:
                    raise DataError(f"{path}: malformed config line: {line}")
                k, v = line.split("=", 1)
                out[k.strip()] = v.strip()
    except OSError as e:
        raise DataError(f"{path}: {e}") from e
    return out


def config_to_text(values):
    return "".join(f"{k}={v}\n" for k, v in sorted(values.items()))


def write_metrics(path, metrics):
    with open(path, "w") as f:
        json.dump(metrics, f, indent=2, sort_keys=True)


def metrics_lines(metrics, prefix=""):
    lines = []
    for k, v in sorted(metrics.items()):
        if isinstance(v, dict):
            lines.extend(metrics_lines(v, prefix=f"{prefix}{k}."))
        else:
            lines.append(f"{prefix}{k}={v}")
    return lines
