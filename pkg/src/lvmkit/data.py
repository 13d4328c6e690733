"""CSV ingestion and the dataset containers shared by all models.

Files are UTF-8 CSV with a header row and '.' decimals; every cell of a
numeric column must parse as a 64-bit float.  An optional sequence column
groups rows into tagged sequences, preserving file order.
"""

import csv
import hashlib
import io
from dataclasses import dataclass, field

import numpy as np

from .exceptions import ParseError


@dataclass(frozen=True)
class Provenance:
    path: str
    sha256: str


@dataclass
class Dataset:
    """N x D matrix of i.i.d. rows plus column metadata."""

    rows: np.ndarray
    column_names: list = field(default_factory=list)
    provenance: Provenance = None

    def __post_init__(self):
        rows = np.atleast_2d(np.asarray(self.rows, dtype=float))
        if not np.all(np.isfinite(rows)):
            raise ParseError("dataset contains non-finite values")
        self.rows = rows
        if not self.column_names:
            self.column_names = [f"x{i}" for i in range(rows.shape[1])]

    @property
    def n(self):
        return self.rows.shape[0]

    @property
    def dim(self):
        return self.rows.shape[1]


@dataclass
class SequenceDataset:
    """Tagged sequences (seq_id, T_i x D matrix) with shared column metadata."""

    sequences: list
    column_names: list = field(default_factory=list)
    provenance: Provenance = None

    def __post_init__(self):
        cleaned = []
        dim = None
        for seq_id, mat in self.sequences:
            mat = np.atleast_2d(np.asarray(mat, dtype=float))
            if mat.shape[0] == 0:
                raise ParseError(f"sequence {seq_id!r} is empty")
            if dim is None:
                dim = mat.shape[1]
            elif mat.shape[1] != dim:
                raise ParseError(
                    f"sequence {seq_id!r} has {mat.shape[1]} columns, expected {dim}")
            if not np.all(np.isfinite(mat)):
                raise ParseError(f"sequence {seq_id!r} contains non-finite values")
            cleaned.append((seq_id, mat))
        self.sequences = cleaned
        if not self.column_names and dim is not None:
            self.column_names = [f"x{i}" for i in range(dim)]

    @property
    def n_sequences(self):
        return len(self.sequences)

    @property
    def dim(self):
        return self.sequences[0][1].shape[1]

    @property
    def total_steps(self):
        return sum(mat.shape[0] for _, mat in self.sequences)


def _sha256(raw):
    return hashlib.sha256(raw).hexdigest()


def load_dataset(path, format="csv", sequence_column=None):
    """Parse a CSV file into a Dataset, or a SequenceDataset when
    `sequence_column` names the grouping column.

    Raises ParseError(row, column) for non-numeric cells and for ragged rows.
    """
    if format != "csv":
        raise ParseError(f"unsupported format {format!r}")
    with open(path, "rb") as fh:
        raw = fh.read()
    provenance = Provenance(path=str(path), sha256=_sha256(raw))
    reader = csv.reader(io.StringIO(raw.decode("utf-8")))
    try:
        header = next(reader)
    except StopIteration:
        raise ParseError("file is empty; a header row is required") from None
    header = [h.strip() for h in header]

    seq_idx = None
    if sequence_column is not None:
        if sequence_column not in header:
            raise ParseError(f"sequence column {sequence_column!r} not in header")
        seq_idx = header.index(sequence_column)
    value_cols = [i for i in range(len(header)) if i != seq_idx]
    value_names = [header[i] for i in value_cols]

    rows = []
    tags = []
    for row_num, row in enumerate(reader, start=2):
        if not row:
            continue
        if len(row) != len(header):
            raise ParseError(
                f"row {row_num} has {len(row)} cells, expected {len(header)}",
                row=row_num)
        values = []
        for i in value_cols:
            cell = row[i].strip()
            try:
                values.append(float(cell))
            except ValueError:
                raise ParseError(
                    f"non-numeric cell {cell!r} at row {row_num}, column {header[i]!r}",
                    row=row_num, column=header[i]) from None
        rows.append(values)
        if seq_idx is not None:
            tags.append(row[seq_idx].strip())

    if not rows:
        raise ParseError("file has a header but no data rows")
    matrix = np.asarray(rows, dtype=float)

    if seq_idx is None:
        return Dataset(rows=matrix, column_names=value_names, provenance=provenance)

    sequences = []
    order = []
    groups = {}
    for tag, row in zip(tags, matrix):
        if tag not in groups:
            groups[tag] = []
            order.append(tag)
        groups[tag].append(row)
    for tag in order:
        sequences.append((tag, np.asarray(groups[tag], dtype=float)))
    return SequenceDataset(sequences=sequences, column_names=value_names,
                           provenance=provenance)


def save_dataset(dataset, path, float_format=repr):
    """Write a Dataset or SequenceDataset back to CSV.

    Floats use the shortest round-trip decimal representation so that a
    save/load cycle reproduces values exactly.
    """
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        if isinstance(dataset, SequenceDataset):
            writer.writerow(["seq_id"] + list(dataset.column_names))
            for seq_id, mat in dataset.sequences:
                for row in mat:
                    writer.writerow([seq_id] + [float_format(float(v)) for v in row])
        else:
            writer.writerow(list(dataset.column_names))
            for row in dataset.rows:
                writer.writerow([float_format(float(v)) for v in row])
