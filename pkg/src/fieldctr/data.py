"""Tabular ingestion for field-structured CTR data.

The pipeline is ``load_schema -> ingest_table -> temporal_split ->
build_vocab -> encode -> batch_iter``.  A :class:`Dataset` carries the raw
per-field strings; :func:`encode` attaches integer feature indices and
per-feature values so the model code only ever sees dense arrays.
"""

from __future__ import annotations

import csv
import hashlib
import logging
import os
import re
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Iterator, NamedTuple, Sequence

import numpy as np

logger = logging.getLogger(__name__)

OOV = 0
OOV_TOKEN = "<OOV>"
NUMERIC_TOKEN = "<NUM>"
MULTI_VALUE_SEP = "|"
KINDS = ("categorical", "numeric")


class SchemaError(ValueError):
    pass


class IngestionError(ValueError):
    pass


class SplitError(ValueError):
    pass


@dataclass(frozen=True)
class FieldSpec:
    name: str
    kind: str
    description: str


@dataclass(frozen=True)
class FieldSchema:
    fields: tuple[FieldSpec, ...]

    def __post_init__(self):
        names = [f.name for f in self.fields]
        if any(not n for n in names):
            raise SchemaError("field names must be non-empty")
        dupes = sorted({n for n in names if names.count(n) > 1})
        if dupes:
            raise SchemaError(f"duplicate field names: {dupes}")
        if len(self.fields) < 2:
            raise SchemaError(
                f"a schema needs at least 2 fields for pairwise interactions, got {len(self.fields)}"
            )
        for f in self.fields:
            if f.kind not in KINDS:
                raise SchemaError(f"field {f.name!r}: unknown kind {f.kind!r}")

    @property
    def K(self) -> int:
        return len(self.fields)

    @property
    def names(self) -> list[str]:
        return [f.name for f in self.fields]

    @property
    def descriptions(self) -> list[str]:
        return [f.description for f in self.fields]

    def index(self, name: str) -> int:
        try:
            return self.names.index(name)
        except ValueError:
            raise KeyError(f"unknown field {name!r}") from None

    def digest(self) -> str:
        """Stable hash of names, kinds and descriptions (stored in checkpoints)."""
        h = hashlib.sha256()
        for f in self.fields:
            h.update(f"{f.name}\t{f.kind}\t{f.description}\n".encode("utf-8"))
        return h.hexdigest()


def load_schema(path) -> FieldSchema:
    """Read a schema file: one ``name<TAB>kind<TAB>description`` per line.

    Blank lines and lines starting with ``#`` are skipped.
    """
    specs = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.rstrip("\r\n")
            if not line.strip() or line.lstrip().startswith("#"):
                continue
            parts = line.split("\t")
            if len(parts) != 3:
                raise SchemaError(
                    f"{path}:{lineno}: expected 'name<TAB>kind<TAB>description', got {len(parts)} column(s)"
                )
            name, kind, desc = (p.strip() for p in parts)
            if kind not in KINDS:
                raise SchemaError(f"{path}:{lineno}: unknown kind {kind!r} (expected one of {KINDS})")
            specs.append(FieldSpec(name, kind, desc))
    return FieldSchema(tuple(specs))


def write_schema(schema: FieldSchema, path) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for f in schema.fields:
            fh.write(f"{f.name}\t{f.kind}\t{f.description}\n")


@dataclass(frozen=True)
class Instance:
    """One labeled interaction; ``feature_refs`` holds (field, feature, value)."""

    feature_refs: tuple[tuple[int, int, float], ...]
    label: int
    timestamp: int


@dataclass(frozen=True, eq=False)
class Dataset:
    """Column-oriented container of instances sharing one schema.

    ``raw`` is an (N, K) object array of strings.  ``indices``/``values`` are
    ``None`` until the dataset has been passed through :func:`encode`.
    """

    schema: FieldSchema
    raw: np.ndarray
    labels: np.ndarray
    timestamps: np.ndarray
    split: str = "all"
    indices: np.ndarray | None = None
    values: np.ndarray | None = None

    def __len__(self) -> int:
        return len(self.labels)

    @property
    def encoded(self) -> bool:
        return self.indices is not None

    def subset(self, rows, split: str | None = None) -> "Dataset":
        rows = np.asarray(rows, dtype=np.int64)
        return Dataset(
            schema=self.schema,
            raw=self.raw[rows],
            labels=self.labels[rows],
            timestamps=self.timestamps[rows],
            split=self.split if split is None else split,
            indices=None if self.indices is None else self.indices[rows],
            values=None if self.values is None else self.values[rows],
        )

    def instance(self, i: int) -> Instance:
        if not self.encoded:
            raise ValueError("dataset is not encoded; call encode(dataset, vocab) first")
        refs = tuple(
            (k, int(self.indices[i, k]), float(self.values[i, k])) for k in range(self.schema.K)
        )
        return Instance(refs, int(self.labels[i]), int(self.timestamps[i]))


def _detect_delimiter(header: str) -> str:
    return "\t" if "\t" in header else ","


def _first_value(raw: str) -> str:
    # multi-valued fields keep only the first listed value
    return raw.split(MULTI_VALUE_SEP, 1)[0].strip()


def ingest_table(path, schema: FieldSchema, rating_threshold: float = 4.0,
                 drop_neutral: float | None = None) -> Dataset:
    """Read a delimited table and binarize ratings into click labels.

    ``label = 1`` iff ``rating >= rating_threshold``.  Rows whose rating equals
    ``drop_neutral`` are removed before labelling.
    """
    with open(path, encoding="utf-8", newline="") as fh:
        header = fh.readline()
        if not header:
            raise IngestionError(f"{path}: empty file (header row required)")
        delim = _detect_delimiter(header)
        cols = [c.strip() for c in next(csv.reader([header.rstrip("\r\n")], delimiter=delim))]
        required = schema.names + ["rating", "timestamp"]
        missing = [c for c in required if c not in cols]
        if missing:
            raise IngestionError(f"{path}: missing column(s) {missing}")
        pos = [cols.index(c) for c in schema.names]
        r_pos, t_pos = cols.index("rating"), cols.index("timestamp")

        raw, labels, stamps = [], [], []
        for rowno, row in enumerate(csv.reader(fh, delimiter=delim), start=1):
            if not row or (len(row) == 1 and not row[0].strip()):
                continue
            if len(row) < len(cols):
                raise IngestionError(f"{path}: row {rowno}: expected {len(cols)} columns, got {len(row)}")
            try:
                rating = float(row[r_pos])
            except ValueError:
                raise IngestionError(f"{path}: row {rowno}: non-numeric rating {row[r_pos]!r}") from None
            try:
                ts = int(float(row[t_pos]))
            except ValueError:
                raise IngestionError(f"{path}: row {rowno}: non-numeric timestamp {row[t_pos]!r}") from None
            if drop_neutral is not None and rating == drop_neutral:
                continue
            raw.append(tuple(_first_value(row[p]) for p in pos))
            labels.append(1 if rating >= rating_threshold else 0)
            stamps.append(ts)

    raw_arr = np.empty((len(raw), schema.K), dtype=object)
    if raw:
        raw_arr[:] = raw
    return Dataset(
        schema=schema,
        raw=raw_arr,
        labels=np.asarray(labels, dtype=np.int64),
        timestamps=np.asarray(stamps, dtype=np.int64),
    )


def k_core_filter(dataset: Dataset, fields: Sequence[str], k: int = 5) -> Dataset:
    """Iteratively drop rows until every value of ``fields`` occurs at least ``k`` times."""
    cols = [dataset.schema.index(f) for f in fields]
    keep = np.ones(len(dataset), dtype=bool)
    while True:
        changed = False
        for c in cols:
            vals = dataset.raw[keep, c]
            uniq, inv, counts = np.unique(vals.astype(str), return_inverse=True, return_counts=True)
            bad = counts[inv] < k
            if bad.any():
                rows = np.flatnonzero(keep)
                keep[rows[bad]] = False
                changed = True
        if not changed:
            break
    return dataset.subset(np.flatnonzero(keep))


@dataclass
class FeatureVocab:
    """Per-field map from raw string to contiguous index; 0 is OOV in every field."""

    schema: FieldSchema
    tables: list[dict[str, int]] = field(default_factory=list)

    @property
    def sizes(self) -> list[int]:
        return [len(t) + 1 for t in self.tables]

    def lookup(self, k: int, raw: str) -> int:
        return self.tables[k].get(raw, OOV)

    def decode(self, k: int, index: int) -> str | None:
        if index == OOV:
            return None
        inverse = getattr(self, "_inverse", None)
        if inverse is None:
            inverse = [{v: s for s, v in t.items()} for t in self.tables]
            self._inverse = inverse
        return inverse[k][index]

    def feature_description(self, k: int, index: int) -> str:
        """Text rendering of feature ``index`` of field ``k``: ``"<field>: <value>"``."""
        f = self.schema.fields[k]
        return f"{f.name}: {self.decode(k, index)}"

    def export(self, directory) -> list[str]:
        """Write one ``index<TAB>raw_value`` file per field; returns the paths."""
        os.makedirs(directory, exist_ok=True)
        paths = []
        for k, f in enumerate(self.schema.fields):
            path = os.path.join(directory, vocab_filename(k, f.name))
            with open(path, "w", encoding="utf-8", newline="\n") as fh:
                fh.write(f"{OOV}\t{OOV_TOKEN}\n")
                for raw, idx in sorted(self.tables[k].items(), key=lambda kv: kv[1]):
                    fh.write(f"{idx}\t{raw}\n")
            paths.append(path)
        return paths

    @classmethod
    def load(cls, directory, schema: FieldSchema) -> "FeatureVocab":
        tables = []
        for k, f in enumerate(schema.fields):
            path = os.path.join(directory, vocab_filename(k, f.name))
            table = {}
            with open(path, encoding="utf-8") as fh:
                for line in fh:
                    idx, raw = line.rstrip("\n").split("\t", 1)
                    if int(idx) != OOV:
                        table[raw] = int(idx)
            tables.append(table)
        return cls(schema, tables)


def vocab_filename(k: int, name: str) -> str:
    safe = re.sub(r"[^A-Za-z0-9_.-]", "_", name)
    return f"{k:02d}_{safe}.tsv"


def build_vocab(dataset: Dataset, schema: FieldSchema | None = None) -> FeatureVocab:
    """Assign indices in first-occurrence order; numeric fields get a single bucket."""
    schema = schema or dataset.schema
    tables = []
    for k, f in enumerate(schema.fields):
        table: dict[str, int] = {}
        if f.kind == "numeric":
            table[NUMERIC_TOKEN] = 1
        else:
            for raw in dataset.raw[:, k]:
                if raw and raw not in table:
                    table[raw] = len(table) + 1
        tables.append(table)
    return FeatureVocab(schema, tables)


def encode(dataset: Dataset, vocab: FeatureVocab) -> Dataset:
    """Attach ``indices`` (int64) and ``values`` (float64) arrays of shape (N, K)."""
    n, K = len(dataset), dataset.schema.K
    idx = np.zeros((n, K), dtype=np.int64)
    vals = np.ones((n, K), dtype=np.float64)
    for k, f in enumerate(dataset.schema.fields):
        col = dataset.raw[:, k]
        if f.kind == "numeric":
            for i, raw in enumerate(col):
                try:
                    vals[i, k] = float(raw)
                    idx[i, k] = 1
                except (TypeError, ValueError):
                    pass
        else:
            table = vocab.tables[k]
            idx[:, k] = [table.get(raw, OOV) for raw in col]
    return Dataset(dataset.schema, dataset.raw, dataset.labels, dataset.timestamps,
                   dataset.split, idx, vals)


def temporal_split(dataset: Dataset, ratios=(0.8, 0.1, 0.1)) -> tuple[Dataset, Dataset, Dataset]:
    """Sort by timestamp (stable) and cut at floor(r0*N) and floor((r0+r1)*N)."""
    n = len(dataset)
    if n < 3:
        raise SplitError(f"need at least 3 instances to split, got {n}")
    fr = [Fraction(repr(float(r))) for r in ratios]
    if len(fr) != 3 or any(r < 0 for r in fr) or sum(fr) != 1:
        raise SplitError(f"ratios must be three non-negative numbers summing to 1, got {ratios}")
    order = np.argsort(dataset.timestamps, kind="stable")
    b1 = int(fr[0] * n)
    b2 = int((fr[0] + fr[1]) * n)
    return (
        dataset.subset(order[:b1], "train"),
        dataset.subset(order[b1:b2], "val"),
        dataset.subset(order[b2:], "test"),
    )


def batch_indices(n: int, batch_size: int, shuffle: bool = False, seed: int = 0) -> Iterator[np.ndarray]:
    if batch_size < 1:
        raise ValueError(f"batch_size must be >= 1, got {batch_size}")
    order = np.random.default_rng(seed).permutation(n) if shuffle else np.arange(n)
    for start in range(0, n, batch_size):
        yield order[start:start + batch_size]


class Batch(NamedTuple):
    indices: np.ndarray
    values: np.ndarray
    labels: np.ndarray


def batch_iter(dataset: Dataset, batch_size: int, shuffle: bool = False, seed: int = 0) -> Iterator[Batch]:
    if not dataset.encoded:
        raise ValueError("batch_iter needs an encoded dataset")
    for rows in batch_indices(len(dataset), batch_size, shuffle, seed):
        yield Batch(dataset.indices[rows], dataset.values[rows], dataset.labels[rows])


# split files written by ``prepare``: encoded columns plus label and timestamp
def write_split(dataset: Dataset, path) -> None:
    if not dataset.encoded:
        raise ValueError("write_split needs an encoded dataset")
    names = dataset.schema.names
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write("\t".join([f"{n}:idx" for n in names] + [f"{n}:val" for n in names] + ["label", "timestamp"]) + "\n")
        for i in range(len(dataset)):
            cells = [str(int(v)) for v in dataset.indices[i]]
            cells += [repr(float(v)) for v in dataset.values[i]]
            cells += [str(int(dataset.labels[i])), str(int(dataset.timestamps[i]))]
            fh.write("\t".join(cells) + "\n")


def read_split(path, schema: FieldSchema, vocab: FeatureVocab | None = None, split: str = "all") -> Dataset:
    K = schema.K
    with open(path, encoding="utf-8") as fh:
        header = fh.readline().rstrip("\n").split("\t")
        if len(header) != 2 * K + 2:
            raise IngestionError(f"{path}: expected {2 * K + 2} columns, got {len(header)}")
        rows = [line.rstrip("\n").split("\t") for line in fh if line.strip()]
    arr = np.asarray(rows, dtype=object).reshape(len(rows), 2 * K + 2)
    idx = arr[:, :K].astype(np.int64)
    vals = arr[:, K:2 * K].astype(np.float64)
    raw = np.empty((len(rows), K), dtype=object)
    if vocab is not None:
        for k, f in enumerate(schema.fields):
            if f.kind == "numeric":
                raw[:, k] = [repr(v) for v in vals[:, k]]
            else:
                raw[:, k] = [vocab.decode(k, int(j)) for j in idx[:, k]]
    return Dataset(schema, raw, arr[:, 2 * K].astype(np.int64), arr[:, 2 * K + 1].astype(np.int64),
                   split, idx, vals)
