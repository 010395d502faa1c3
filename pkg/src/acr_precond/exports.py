"""Readers and writers for fields, assembled systems and result tables."""

import csv
import json
import math
from pathlib import Path
from typing import Any, Dict, List, Mapping, Optional, Sequence

import numpy as np
import scipy.io
import scipy.sparse as sp
import structlog

from .core.acr import ACRPreconditioner
from .core.hmatrix import HMatrix
from .core.krylov import KrylovResult
from .core.lowrank import LowRankBlock
from .core.problems import BlockTridiagonalSystem, CoefficientField, Grid2D, Grid3D
from .exceptions import ExportError
from .utils import ensure_directory_exists, load_json_file, save_json_file

logger = structlog.get_logger()

FIELD_MAGIC = b"ACRFIELD"


def write_csv(path: Path, rows: Sequence[Mapping[str, Any]], columns: Optional[Sequence[str]] = None) -> Path:
    """Write dict rows with a fixed column order."""
    path = Path(path)
    if columns is None:
        columns = list(rows[0].keys()) if rows else []
    try:
        ensure_directory_exists(path.parent)
        with open(path, "w", newline="", encoding="utf-8") as f:
            writer = csv.DictWriter(f, fieldnames=list(columns), extrasaction="ignore")
            writer.writeheader()
            for row in rows:
                writer.writerow(row)
    except OSError as e:
        raise ExportError(f"cannot write {path}: {e}", file_path=str(path))
    logger.info("Wrote CSV", path=str(path), rows=len(rows))
    return path


def read_csv(path: Path) -> List[Dict[str, str]]:
    try:
        with open(path, newline="", encoding="utf-8") as f:
            return list(csv.DictReader(f))
    except OSError as e:
        raise ExportError(f"cannot read {path}: {e}", file_path=str(path))


BLOCK_COLUMNS = ["row_lo", "row_hi", "col_lo", "col_hi", "kind", "rank"]


def write_block_structure_csv(h: HMatrix, path: Path) -> Path:
    """One record per leaf: cluster-ordered row and column ranges, kind and rank."""
    rows = []
    for block, payload in h.leaves():
        rank = payload.rank if isinstance(payload, LowRankBlock) else min(block.shape)
        rows.append({
            "row_lo": block.row.lo, "row_hi": block.row.hi,
            "col_lo": block.col.lo, "col_hi": block.col.hi,
            "kind": block.kind, "rank": rank,
        })
    return write_csv(path, rows, BLOCK_COLUMNS)


LEVEL_COLUMNS = ["level", "rows", "eliminated", "max_rank", "avg_rank", "bytes", "seconds"]


def write_level_stats_csv(preconditioner: ACRPreconditioner, path: Path) -> Path:
    return write_csv(path, [s.as_row() for s in preconditioner.stats], LEVEL_COLUMNS)


def write_history_csv(result: KrylovResult, path: Path) -> Path:
    rows = [{"iter": i, "relres": r} for i, r in enumerate(result.history)]
    return write_csv(path, rows, ["iter", "relres"])


def write_field(field: CoefficientField, path: Path) -> Path:
    """Flat little-endian float64 samples after a one-line JSON header."""
    path = Path(path)
    header = {
        "n": field.grid.n,
        "dim": field.grid.dim,
        "kind": field.kind,
        "seed": field.seed,
        "contrast": field.contrast,
        "dtype": "<f8",
        "shape": list(field.values.shape),
    }
    try:
        ensure_directory_exists(path.parent)
        with open(path, "wb") as f:
            f.write(FIELD_MAGIC + b" " + json.dumps(header).encode("utf-8") + b"\n")
            f.write(np.ascontiguousarray(field.values, dtype="<f8").tobytes())
    except OSError as e:
        raise ExportError(f"cannot write field {path}: {e}", file_path=str(path))
    logger.info("Wrote field", path=str(path), kind=field.kind, n=field.grid.n)
    return path


def read_field(path: Path) -> CoefficientField:
    path = Path(path)
    try:
        with open(path, "rb") as f:
            line = f.readline()
            payload = f.read()
    except OSError as e:
        raise ExportError(f"cannot read field {path}: {e}", file_path=str(path))
    if not line.startswith(FIELD_MAGIC):
        raise ExportError(f"{path} is not a field file", file_path=str(path))
    try:
        header = json.loads(line[len(FIELD_MAGIC):].decode("utf-8"))
    except json.JSONDecodeError as e:
        raise ExportError(f"bad field header in {path}: {e}", file_path=str(path))
    shape = tuple(header["shape"])
    values = np.frombuffer(payload, dtype=header.get("dtype", "<f8"))
    if values.size != math.prod(shape):
        raise ExportError(f"{path} holds {values.size} samples, header says {shape}", file_path=str(path))
    grid = Grid3D(header["n"]) if header.get("dim", 3) == 3 else Grid2D(header["n"])
    return CoefficientField(grid, values.reshape(shape).astype(np.float64), kind=header["kind"],
                            seed=header.get("seed"), contrast=header.get("contrast", 0.0))


def _sidecar(path: Path) -> Path:
    return path.with_suffix(path.suffix + ".json")


def write_system(system: BlockTridiagonalSystem, path: Path) -> Path:
    """MatrixMarket matrix, a MatrixMarket right-hand side and a JSON sidecar with block metadata."""
    path = Path(path)
    rhs_path = path.with_name(path.stem + "_rhs.mtx")
    try:
        ensure_directory_exists(path.parent)
        scipy.io.mmwrite(str(path), system.to_sparse(), comment=f"acr-precond {system.kind}")
        scipy.io.mmwrite(str(rhs_path), system.rhs[:, None])
    except OSError as e:
        raise ExportError(f"cannot write system {path}: {e}", file_path=str(path))
    save_json_file(_sidecar(path), {
        "kind": system.kind,
        "block_size": system.block_size,
        "n_blocks": system.n_blocks,
        "symmetric": system.symmetric,
        "rhs": rhs_path.name,
    })
    logger.info("Wrote system", path=str(path), size=system.size)
    return path


def read_system(path: Path, block_size: Optional[int] = None) -> BlockTridiagonalSystem:
    path = Path(path)
    meta = load_json_file(_sidecar(path))
    block_size = block_size or meta.get("block_size")
    if not block_size:
        raise ExportError(f"block size of {path} is unknown", file_path=str(path))
    try:
        a = sp.csr_matrix(scipy.io.mmread(str(path)))
        rhs = None
        if meta.get("rhs"):
            rhs = np.asarray(scipy.io.mmread(str(path.with_name(meta["rhs"])))).ravel()
    except (OSError, ValueError) as e:
        raise ExportError(f"cannot read system {path}: {e}", file_path=str(path))
    side = math.isqrt(block_size)
    points = Grid2D(side).coordinates() if side * side == block_size and side >= 2 else None
    return BlockTridiagonalSystem.from_sparse(a, block_size, rhs=rhs, symmetric=meta.get("symmetric"),
                                              plane_points=points, kind=meta.get("kind", "custom"))
