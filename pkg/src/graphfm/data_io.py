"""Dataset ingestion and persistence.

Matrix container, text flavour::

    # optional comment lines
    matrix 2 3
    1 2 3
    4 5 6

Binary flavour: the 5 magic bytes ``FVMD1``, two little-endian uint64 (m, n),
then m*n little-endian float64 values in row-major order.
"""

from __future__ import annotations

import csv
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import (DataError, DisjointnessError, EmptyFileError, NonNumericError,
                     RaggedRowError)
from .graphs import DEFAULT_K, knn_graph
from .report import ExperimentReport
from .solver import MaskedMatrix

MAGIC = b"FVMD1"

ML100K_USERS = 943
ML100K_ITEMS = 1682


def save_matrix(M, path, binary: bool = False, comment: str | None = None) -> None:
    M = np.asarray(M, dtype=np.float64)
    if M.ndim != 2:
        raise ValueError(f"expected a 2-D matrix, got shape {M.shape}")
    m, n = M.shape
    if binary:
        with open(path, "wb") as fh:
            fh.write(MAGIC)
            fh.write(struct.pack("<QQ", m, n))
            fh.write(np.ascontiguousarray(M, dtype="<f8").tobytes())
        return
    with open(path, "w") as fh:
        if comment:
            for line in comment.splitlines():
                fh.write(f"# {line}\n")
        fh.write(f"matrix {m} {n}\n")
        for row in M:
            fh.write(" ".join(repr(float(x)) for x in row) + "\n")


def load_matrix(path) -> np.ndarray:
    path = Path(path)
    if not path.exists():
        raise DataError("matrix file not found", path=path)
    with open(path, "rb") as fh:
        head = fh.read(len(MAGIC))
        if head == MAGIC:
            dims = fh.read(16)
            if len(dims) != 16:
                raise DataError("truncated binary header", path=path)
            m, n = struct.unpack("<QQ", dims)
            body = fh.read()
            if len(body) != 8 * m * n:
                raise DataError(f"expected {8 * m * n} data bytes, found {len(body)}", path=path)
            return np.frombuffer(body, dtype="<f8").astype(np.float64).reshape(m, n)
    return _load_text_matrix(path)


def _load_text_matrix(path):
    shape = None
    rows = []
    with open(path) as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.strip()
            if not line or line.startswith("#"):
                continue
            if shape is None:
                parts = line.split()
                if len(parts) != 3 or parts[0] != "matrix":
                    raise DataError("expected header 'matrix m n'", path, lineno)
                try:
                    shape = (int(parts[1]), int(parts[2]))
                except ValueError:
                    raise DataError("non-integer matrix dimensions", path, lineno) from None
                continue
            try:
                row = [float(x) for x in line.split()]
            except ValueError:
                raise NonNumericError(f"non-numeric entry in {line!r}", path, lineno) from None
            if len(row) != shape[1]:
                raise RaggedRowError(f"expected {shape[1]} values, found {len(row)}", path, lineno)
            rows.append(row)
    if shape is None:
        raise EmptyFileError("no matrix header found", path)
    if len(rows) != shape[0]:
        raise DataError(f"header announces {shape[0]} rows, found {len(rows)}", path)
    return np.array(rows, dtype=np.float64).reshape(shape)


def load_dense_csv(path, has_header: bool = False, delimiter: str = ",") -> np.ndarray:
    """Read a rectangular numeric table. Blank lines are skipped."""
    path = Path(path)
    if not path.exists():
        raise DataError("CSV file not found", path=path)
    rows = []
    width = None
    with open(path, newline="") as fh:
        reader = csv.reader(fh, delimiter=delimiter)
        skipped_header = not has_header
        for fields in reader:
            lineno = reader.line_num
            if not fields or all(not f.strip() for f in fields):
                continue
            if not skipped_header:
                skipped_header = True
                continue
            try:
                row = [float(f) for f in fields]
            except ValueError:
                raise NonNumericError(f"non-numeric cell in {fields!r}", path, lineno) from None
            if width is None:
                width = len(row)
            elif len(row) != width:
                raise RaggedRowError(f"expected {width} columns, found {len(row)}", path, lineno)
            rows.append(row)
    if not rows:
        raise EmptyFileError("no data rows", path)
    return np.array(rows, dtype=np.float64)


def load_labels(path) -> np.ndarray:
    """One label per non-empty line; integer labels when every line parses as int."""
    path = Path(path)
    if not path.exists():
        raise DataError("labels file not found", path=path)
    with open(path) as fh:
        items = [line.strip() for line in fh if line.strip()]
    if not items:
        raise EmptyFileError("no labels", path)
    try:
        return np.array([int(x) for x in items])
    except ValueError:
        return np.array(items)


# ---------------------------------------------------------------------------
# MovieLens-100K
# ---------------------------------------------------------------------------

@dataclass(eq=False)
class RatingsDataset:
    """Ratings as a masked users x items matrix plus external-id maps.

    ``row_ids[i]`` is the external id of row ``i``; ``row_index`` inverts it.
    """

    masked: MaskedMatrix
    row_ids: np.ndarray
    col_ids: np.ndarray
    split_tag: str = "all"

    def __post_init__(self):
        if len(set(self.row_ids.tolist())) != len(self.row_ids):
            raise DataError("duplicate row ids")
        if len(set(self.col_ids.tolist())) != len(self.col_ids):
            raise DataError("duplicate column ids")
        if self.masked.shape != (len(self.row_ids), len(self.col_ids)):
            raise DataError("id maps do not match the matrix shape")
        self.row_index = {int(e): i for i, e in enumerate(self.row_ids)}
        self.col_index = {int(e): i for i, e in enumerate(self.col_ids)}


def _read_ratings(path, n_users, n_items):
    rows, cols, vals = [], [], []
    with open(path) as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.strip()
            if not line:
                continue
            parts = line.split("\t")
            if len(parts) != 4:
                raise DataError(f"expected 4 tab-separated fields, got {len(parts)}", path, lineno)
            try:
                u, i, r = int(parts[0]), int(parts[1]), float(parts[2])
                int(parts[3])
            except ValueError:
                raise DataError(f"malformed rating line {line!r}", path, lineno) from None
            if not 1 <= u <= n_users:
                raise DataError(f"user id {u} outside 1..{n_users}", path, lineno)
            if not 1 <= i <= n_items:
                raise DataError(f"item id {i} outside 1..{n_items}", path, lineno)
            if not 1 <= r <= 5:
                raise DataError(f"rating {r} outside 1..5", path, lineno)
            rows.append(u - 1)
            cols.append(i - 1)
            vals.append(r)
    return np.array(rows, dtype=np.int64), np.array(cols, dtype=np.int64), np.array(vals)


def _ratings_matrix(rows, cols, vals, shape, path):
    M = np.zeros(shape)
    S = np.zeros(shape, dtype=bool)
    flat = rows * shape[1] + cols
    if np.unique(flat).size != flat.size:
        raise DataError("duplicate (user, item) rating", path)
    M[rows, cols] = vals
    S[rows, cols] = True
    return MaskedMatrix(M, S)


def load_movielens_100k(directory, split: str = "u1"):
    """Load the canonical ML-100K train/test split ``<split>.base``/``<split>.test``.

    Returns ``(train, test)`` RatingsDatasets over the full 943 x 1682 grid.
    """
    d = Path(directory)
    base, test = d / f"{split}.base", d / f"{split}.test"
    for p in (base, test):
        if not p.is_file():
            raise DataError("missing MovieLens-100K file", path=p)
    shape = (ML100K_USERS, ML100K_ITEMS)
    tr = _read_ratings(base, *shape)
    te = _read_ratings(test, *shape)
    train = _ratings_matrix(*tr, shape, base)
    testm = _ratings_matrix(*te, shape, test)
    if np.any(train.mask & testm.mask):
        overlap = int(np.sum(train.mask & testm.mask))
        raise DisjointnessError(f"{overlap} entries appear in both train and test", path=d)
    users = np.arange(1, shape[0] + 1)
    items = np.arange(1, shape[1] + 1)
    return (RatingsDataset(train, users, items, "train"),
            RatingsDataset(testm, users.copy(), items.copy(), "test"))


def build_rating_graphs(train: RatingsDataset, K: int = DEFAULT_K, center: bool = False,
                        kernel_scale=None):
    """KNN graphs over users (rows) and items (columns) of the zero-filled ratings."""
    masked = train.masked
    if masked.n_observed == 0:
        raise ValueError("training ratings are empty")
    X = masked.values.copy()
    if center:
        X[masked.mask] -= X[masked.mask].mean()
    return knn_graph(X, K, kernel_scale), knn_graph(X.T, K, kernel_scale)


# ---------------------------------------------------------------------------
# reports
# ---------------------------------------------------------------------------

def save_report(report: ExperimentReport, path) -> None:
    Path(path).write_text(report.to_text())


def load_report(path) -> ExperimentReport:
    path = Path(path)
    if not path.exists():
        raise DataError("report file not found", path=path)
    return ExperimentReport.from_text(path.read_text(), path=path)

