"""Annotation parsing, rater consensus, embedding files and fold splitting."""

from __future__ import annotations

import csv
import json
import math
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import (
    DimensionMismatch,
    DuplicateId,
    InputError,
    InvalidK,
    MalformedRow,
    MissingColumn,
    MissingEmbeddings,
    ScaleViolation,
)
from .schema import ConceptSchema, default_schema

ID_COLUMNS = ("nodule_id", "rater_id")
# column order of the annotations CSV, as in the LIDC reading sessions
ANNOTATION_COLUMNS = (
    "nodule_id",
    "rater_id",
    "subtlety",
    "internal_structure",
    "calcification",
    "sphericity",
    "margin",
    "lobulation",
    "spiculation",
    "texture",
    "malignancy",
)


@dataclass(frozen=True)
class NoduleRecord:
    """One radiologist's reading of one nodule."""

    nodule_id: str
    rater_id: str
    ordinal_ratings: dict[str, int]
    categorical_ratings: dict[str, int]
    malignancy: int


@dataclass
class ConceptVector:
    nodule_id: str
    ordinal_values: np.ndarray
    categorical_onehots: tuple[np.ndarray, ...]
    malignancy_target: float
    n_raters: int

    def features(self) -> np.ndarray:
        return np.concatenate([self.ordinal_values, *self.categorical_onehots])

    def to_dict(self, schema: ConceptSchema) -> dict:
        return {
            "nodule_id": self.nodule_id,
            "ordinal": {n: float(v) for n, v in zip(schema.ordinal_names, self.ordinal_values)},
            "categorical": {
                n: [float(x) for x in oh]
                for n, oh in zip(schema.categorical_names, self.categorical_onehots)
            },
            "malignancy": float(self.malignancy_target),
            "n_raters": int(self.n_raters),
        }

    @classmethod
    def from_dict(cls, data: dict, schema: ConceptSchema) -> "ConceptVector":
        try:
            ordinal = np.array([float(data["ordinal"][n]) for n in schema.ordinal_names])
            onehots = tuple(
                np.array([float(x) for x in data["categorical"][c.name]])
                for c in schema.categoricals
            )
            vec = cls(
                nodule_id=str(data["nodule_id"]),
                ordinal_values=ordinal,
                categorical_onehots=onehots,
                malignancy_target=float(data["malignancy"]),
                n_raters=int(data.get("n_raters", 1)),
            )
        except (KeyError, TypeError, ValueError) as exc:
            raise InputError(f"malformed concept vector: {exc!r}") from exc
        for c, oh in zip(schema.categoricals, onehots):
            if oh.shape != (c.n_classes,):
                raise DimensionMismatch(f"{vec.nodule_id}: {c.name} needs {c.n_classes} slots")
        return vec


@dataclass(frozen=True)
class EmbeddingRow:
    nodule_id: str
    values: np.ndarray


@dataclass
class Dataset:
    schema: ConceptSchema
    rows: list[ConceptVector]
    embeddings: dict[str, np.ndarray] | None = None
    _index: dict = field(init=False, repr=False)

    def __post_init__(self):
        self._index = {}
        for i, row in enumerate(self.rows):
            if row.nodule_id in self._index:
                raise DuplicateId(f"duplicate nodule_id {row.nodule_id!r}")
            self._index[row.nodule_id] = i
        if self.embeddings is not None:
            missing = [r.nodule_id for r in self.rows if r.nodule_id not in self.embeddings]
            if missing:
                raise MissingEmbeddings(missing)

    def __len__(self):
        return len(self.rows)

    @property
    def ids(self) -> list[str]:
        return [r.nodule_id for r in self.rows]

    def index_of(self, nodule_id: str) -> int | None:
        return self._index.get(nodule_id)

    def features(self) -> np.ndarray:
        """Normalized concept matrix of shape (n, schema.input_dim)."""
        if not self.rows:
            return np.zeros((0, self.schema.input_dim))
        return np.stack([r.features() for r in self.rows])

    def targets(self) -> np.ndarray:
        return np.array([r.malignancy_target for r in self.rows], dtype=float)

    @property
    def has_embeddings(self) -> bool:
        return self.embeddings is not None

    def embedding_matrix(self) -> np.ndarray:
        if self.embeddings is None:
            raise MissingEmbeddings(self.ids)
        return np.stack([self.embeddings[i] for i in self.ids])

    def subset(self, indices) -> "Dataset":
        rows = [self.rows[i] for i in indices]
        emb = None
        if self.embeddings is not None:
            emb = {r.nodule_id: self.embeddings[r.nodule_id] for r in rows}
        return Dataset(self.schema, rows, emb)

    def with_embeddings(self, rows: list[EmbeddingRow]) -> "Dataset":
        return Dataset(self.schema, list(self.rows), {r.nodule_id: r.values for r in rows})

    def to_jsonl(self, path) -> None:
        with open(path, "w") as fh:
            for line in self.iter_json_lines():
                fh.write(line + "\n")

    def iter_json_lines(self):
        for row in self.rows:
            obj = row.to_dict(self.schema)
            if self.embeddings is not None:
                obj["embedding"] = [float(x) for x in self.embeddings[row.nodule_id]]
            yield json.dumps(obj)

    @classmethod
    def from_jsonl(cls, path, schema: ConceptSchema | None = None) -> "Dataset":
        schema = schema or default_schema()
        rows, emb = [], {}
        with open(path) as fh:
            for lineno, line in enumerate(fh, start=1):
                if not line.strip():
                    continue
                try:
                    obj = json.loads(line)
                except json.JSONDecodeError as exc:
                    raise MalformedRow(f"invalid JSON ({exc.msg})", line=lineno) from exc
                rows.append(ConceptVector.from_dict(obj, schema))
                if "embedding" in obj:
                    emb[rows[-1].nodule_id] = np.array(obj["embedding"], dtype=float)
        if emb and len(emb) != len(rows):
            raise InputError(f"{path}: embeddings present on only some lines")
        if emb and len({v.shape for v in emb.values()}) > 1:
            raise DimensionMismatch(f"{path}: embeddings differ in length")
        return cls(schema, rows, emb or None)


def _parse_int(text: str, column: str, line: int) -> int:
    text = (text or "").strip()
    try:
        value = int(text)
    except ValueError:
        try:
            as_float = float(text)
        except ValueError:
            raise MalformedRow(f"{column}: not an integer: {text!r}", line, column) from None
        if not as_float.is_integer():
            raise MalformedRow(f"{column}: not an integer: {text!r}", line, column) from None
        value = int(as_float)
    return value


def parse_annotations(path, schema: ConceptSchema | None = None) -> list[NoduleRecord]:
    """Read a per-rater annotations CSV into validated records.

    Every failure carries the 1-based line number of the offending row.
    """
    schema = schema or default_schema()
    path = Path(path)
    required = [*ID_COLUMNS, *schema.ordinal_names, *schema.categorical_names, schema.target.name]
    records = []
    with path.open(newline="") as fh:
        reader = csv.DictReader(fh)
        header = reader.fieldnames
        if header is None:
            raise MissingColumn(f"{path}: empty file, expected header {','.join(required)}")
        missing = [c for c in required if c not in header]
        if missing:
            raise MissingColumn(f"{path}: missing column(s) {', '.join(missing)}")
        for row in reader:
            line = reader.line_num
            if None in row or any(row[c] is None for c in required):
                raise MalformedRow("wrong number of fields", line)
            nodule_id = row["nodule_id"].strip()
            rater_id = row["rater_id"].strip()
            if not nodule_id:
                raise MalformedRow("empty nodule_id", line, "nodule_id")
            ordinals = {}
            for c in schema.ordinals:
                value = _parse_int(row[c.name], c.name, line)
                if not c.in_scale(value):
                    raise ScaleViolation(
                        f"{c.name}={value} outside {c.scale_min}-{c.scale_max}", line, c.name
                    )
                ordinals[c.name] = value
            categoricals = {}
            for c in schema.categoricals:
                value = _parse_int(row[c.name], c.name, line)
                if value not in c.class_codes:
                    raise ScaleViolation(f"{c.name}={value} is not a known class code", line, c.name)
                categoricals[c.name] = value
            target = schema.target
            malignancy = _parse_int(row[target.name], target.name, line)
            if not target.in_scale(malignancy):
                raise ScaleViolation(
                    f"{target.name}={malignancy} outside {target.scale_min}-{target.scale_max}",
                    line,
                    target.name,
                )
            records.append(NoduleRecord(nodule_id, rater_id, ordinals, categoricals, malignancy))
    return records


def write_annotations(records, path, schema: ConceptSchema | None = None) -> None:
    schema = schema or default_schema()
    columns = [*ID_COLUMNS, *schema.ordinal_names, *schema.categorical_names, schema.target.name]
    if set(columns) == set(ANNOTATION_COLUMNS):
        columns = list(ANNOTATION_COLUMNS)
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(columns)
        for r in records:
            values = {"nodule_id": r.nodule_id, "rater_id": r.rater_id, schema.target.name: r.malignancy}
            values.update(r.ordinal_ratings)
            values.update(r.categorical_ratings)
            writer.writerow([values[c] for c in columns])


def majority_code(codes) -> int:
    """Most frequent code; ties go to the lowest code."""
    counts = Counter(int(c) for c in codes)
    top = max(counts.values())
    return min(c for c, n in counts.items() if n == top)


def consensus(records, schema: ConceptSchema | None = None) -> list[ConceptVector]:
    """Collapse per-rater records into one normalized vector per nodule.

    Ordinal ratings and malignancy are averaged across raters before
    normalization; categorical ratings go to the majority class.
    Nodules appear in order of first occurrence.
    """
    schema = schema or default_schema()
    groups: dict[str, list[NoduleRecord]] = {}
    for rec in records:
        groups.setdefault(rec.nodule_id, []).append(rec)
    out = []
    for nodule_id, group in groups.items():
        n = len(group)
        # integer sums keep the mean independent of rater order
        ordinal = np.array(
            [c.normalize(sum(r.ordinal_ratings[c.name] for r in group) / n) for c in schema.ordinals]
        )
        onehots = tuple(
            c.encode(majority_code(r.categorical_ratings[c.name] for r in group))
            for c in schema.categoricals
        )
        target = schema.target.normalize(sum(r.malignancy for r in group) / n)
        out.append(ConceptVector(nodule_id, ordinal, onehots, target, n))
    return out


def load_embeddings(path) -> list[EmbeddingRow]:
    rows: list[EmbeddingRow] = []
    seen = set()
    width = None
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or not header or header[0].strip() != "nodule_id":
            raise MissingColumn(f"{path}: first column must be 'nodule_id'")
        for row in reader:
            line = reader.line_num
            if not row:
                continue
            nodule_id = row[0].strip()
            try:
                values = np.array([float(x) for x in row[1:]])
            except ValueError as exc:
                raise MalformedRow(str(exc), line) from None
            if not np.all(np.isfinite(values)):
                raise MalformedRow("non-finite embedding value", line)
            if width is None:
                width = len(values)
                if width == 0:
                    raise MalformedRow("embedding row has no values", line)
            elif len(values) != width:
                raise DimensionMismatch(
                    f"{path}: line {line} has {len(values)} values, expected {width}"
                )
            if nodule_id in seen:
                raise DuplicateId(f"{path}: line {line}: duplicate nodule_id {nodule_id!r}")
            seen.add(nodule_id)
            rows.append(EmbeddingRow(nodule_id, values))
    return rows


def write_embeddings(rows, path) -> None:
    rows = list(rows)
    width = len(rows[0].values) if rows else 0
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["nodule_id", *[f"e{i}" for i in range(width)]])
        for r in rows:
            writer.writerow([r.nodule_id, *[repr(float(v)) for v in r.values]])


def build_dataset(records, schema: ConceptSchema | None = None, embeddings=None) -> Dataset:
    schema = schema or default_schema()
    ds = Dataset(schema, consensus(records, schema))
    if embeddings is not None:
        ds = ds.with_embeddings(embeddings)
    return ds


def kfold_split(n: int, k: int, seed: int) -> list[tuple[np.ndarray, np.ndarray]]:
    """Shuffled k-fold partition of ``range(n)``.

    The first ``n % k`` folds take one extra test index. Training indices
    keep the shuffled order.
    """
    if k < 2:
        raise InvalidK(f"k must be at least 2, got {k}")
    if n < k:
        raise InvalidK(f"cannot split {n} items into {k} folds")
    order = np.random.default_rng(seed).permutation(n)
    base, extra = divmod(n, k)
    folds, start = [], 0
    for i in range(k):
        size = base + (1 if i < extra else 0)
        test = order[start : start + size]
        train = np.concatenate([order[:start], order[start + size :]])
        folds.append((train, test))
        start += size
    return folds


def validation_tail(indices, fraction: float) -> tuple[np.ndarray, np.ndarray]:
    """Split off the last ``fraction`` of an (already shuffled) index list."""
    indices = np.asarray(indices)
    n_val = int(math.floor(len(indices) * fraction + 0.5)) if fraction > 0 else 0
    if n_val == 0 or n_val >= len(indices):
        return indices, indices[:0]
    return indices[:-n_val], indices[-n_val:]
