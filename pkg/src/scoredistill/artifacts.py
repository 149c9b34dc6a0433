"""Reading and writing experiment outputs.

Record CSVs use the schema ``experiment,cell,seed,metric,value`` preceded by
one ``# config_hash=...`` comment line.  Grids are stored as a binary/CSV
pair that both carry the header (n, d, seed).
"""

from __future__ import annotations

import csv
import hashlib
import io
import json
from pathlib import Path

import numpy as np

from .bench import Record

CSV_HEADER = ("experiment", "cell", "seed", "metric", "value")
_BIN_MAGIC = b"SDGRID01"


def sha256_file(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def _fmt(v) -> str:
    return repr(float(v))


def records_to_csv(records, config_hash: str) -> bytes:
    buf = io.StringIO()
    buf.write(f"# config_hash={config_hash}\n")
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(CSV_HEADER)
    for r in records:
        w.writerow((r.experiment, r.cell, int(r.seed), r.metric, _fmt(r.value)))
    return buf.getvalue().encode("utf-8")


def write_records_csv(path, records, config_hash: str) -> str:
    """Write the CSV and return the sha256 of its bytes."""
    data = records_to_csv(records, config_hash)
    Path(path).write_bytes(data)
    return hashlib.sha256(data).hexdigest()


class CorruptArtifact(ValueError):
    pass


def read_records_csv(path) -> tuple[str | None, list]:
    text = Path(path).read_text(encoding="utf-8")
    lines = text.splitlines()
    chash = None
    if lines and lines[0].startswith("# config_hash="):
        chash = lines[0].split("=", 1)[1].strip()
        lines = lines[1:]
    reader = csv.reader(lines)
    try:
        header = tuple(next(reader))
    except StopIteration:
        raise CorruptArtifact(f"{path}: empty file") from None
    if header != CSV_HEADER:
        raise CorruptArtifact(f"{path}: unexpected header {header}")
    records = []
    for i, row in enumerate(reader, start=3):
        if len(row) != 5:
            raise CorruptArtifact(f"{path}:{i}: expected 5 fields, got {len(row)}")
        try:
            records.append(Record(row[0], row[1], int(row[2]), row[3], float(row[4])))
        except ValueError as e:
            raise CorruptArtifact(f"{path}:{i}: {e}") from None
    return chash, records


def write_json(path, obj) -> None:
    Path(path).write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n",
                          encoding="utf-8")


def trajectory_csv(run) -> bytes:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(("step", "t", "residual_norm", "psnr"))
    for s, t, r, p in run.trajectory_rows():
        w.writerow((s, t, _fmt(r), _fmt(p)))
    return buf.getvalue().encode("utf-8")


# ---------------------------------------------------------------------------
# grids

def save_grid(prefix, grid, n: int, d: int, seed: int) -> tuple[Path, Path]:
    grid = np.asarray(grid, dtype="<f8")
    if grid.shape != (n, n):
        raise ValueError(f"grid shape {grid.shape} does not match n={n}")
    prefix = Path(prefix)
    bin_path = prefix.with_suffix(".bin")
    csv_path = prefix.with_suffix(".csv")
    header = np.array([n, d, seed], dtype="<i8").tobytes()
    bin_path.write_bytes(_BIN_MAGIC + header + grid.tobytes())
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(("n", "d", "seed"))
    w.writerow((n, d, seed))
    for row in grid:
        w.writerow([_fmt(v) for v in row])
    csv_path.write_text(buf.getvalue(), encoding="utf-8")
    return bin_path, csv_path


def load_grid_bin(path) -> tuple[np.ndarray, dict]:
    data = Path(path).read_bytes()
    if not data.startswith(_BIN_MAGIC):
        raise CorruptArtifact(f"{path}: not a grid file")
    n, d, seed = np.frombuffer(data[8:32], dtype="<i8")
    values = np.frombuffer(data[32:], dtype="<f8")
    if values.size != n * n:
        raise CorruptArtifact(f"{path}: expected {n * n} values, found {values.size}")
    return values.reshape(int(n), int(n)).copy(), {"n": int(n), "d": int(d), "seed": int(seed)}


def load_grid_csv(path) -> tuple[np.ndarray, dict]:
    rows = list(csv.reader(Path(path).read_text(encoding="utf-8").splitlines()))
    if len(rows) < 2 or tuple(rows[0]) != ("n", "d", "seed"):
        raise CorruptArtifact(f"{path}: missing n,d,seed header")
    n, d, seed = (int(x) for x in rows[1])
    grid = np.array([[float(x) for x in r] for r in rows[2:]])
    if grid.shape != (n, n):
        raise CorruptArtifact(f"{path}: grid shape {grid.shape} != ({n}, {n})")
    return grid, {"n": n, "d": d, "seed": seed}
