"""Synthesis record schema, morphology label taxonomy, dataset container and splits.

The dataset is a CSV with one row per synthesis: 10 continuous columns,
3 categorical reagent-name columns and a "Shapes" label column (optionally
"ShapeSizes" for the 9-way taxonomy). Absence of a reagent is encoded by
the explicit No_polymer / No_surfactant / No_solvent vocabulary entries.
"""

from __future__ import annotations

import csv
import enum
from dataclasses import dataclass, field, replace

import numpy as np


class DataError(Exception):
    """Base class for dataset/schema problems (CLI exit code 2)."""


class SchemaError(DataError):
    pass


class RowParseError(DataError):
    pass


class VocabularyError(DataError):
    pass


class DegenerateStratumError(DataError):
    pass


# Continuous columns, in canonical schema order. Names are used verbatim
# as CSV headers and as feature names, so they must not be reformatted.
CONTINUOUS_COLUMNS = (
    "Ca ion, mM",
    "CO3 ion, mM",
    "HCO3 ion, mM",
    "Polymer Mwt, kDa",
    "Polymer, % wt.",
    "Surfactant, % wt.",
    "Solvent, % vol.",
    "Stirring, rpm",
    "Temperature, C",
    "Synthesis time",
)

# Record attribute behind each continuous column, same order.
CONTINUOUS_FIELDS = (
    "ca_ion",
    "co3_ion",
    "hco3_ion",
    "polymer_mwt",
    "polymer_wt",
    "surfactant_wt",
    "solvent_vol",
    "stirring",
    "temperature",
    "synthesis_time",
)

POLYMERS = ("No_polymer", "PAA", "PEG", "PEI", "PSS", "PVP")
SURFACTANTS = (
    "No_surfactant",
    "Hexadecyltrimethylammonium bromide",
    "Myristyltrimethylammonium bromide",
    "Sodium dodecylsulfate",
    "Triton X-100",
)
SOLVENTS = (
    "No_solvent",
    "1-Hexanol",
    "Dimethylformamide",
    "Ethylene glycol",
    "Isopropyl alcohol",
    "Methyl alcohol",
    "Propylene glycol",
    "tert-Butanol",
)

CATEGORICAL_COLUMNS = ("Polymer", "Surfactant", "Solvent")

# One-hot blocks appear after the continuous block in this order, each
# sorted alphabetically (ASCII), matching the tabular rendering layout.
INDICATOR_COLUMNS = tuple(sorted(SURFACTANTS)) + tuple(sorted(SOLVENTS)) + tuple(sorted(POLYMERS))

DEFAULT_SCHEMA = CONTINUOUS_COLUMNS + CATEGORICAL_COLUMNS
LABEL_COLUMN = "Shapes"
SIZE_LABEL_COLUMN = "ShapeSizes"


class ShapeCategory(enum.Enum):
    CUBE = "Cube"
    STICK = "Stick"
    SPHERE = "Sphere"
    FLAT = "Flat"
    AMORPHOUS = "Amorphous"

    def __str__(self) -> str:
        return self.value


class ShapeSizeCategory(enum.Enum):
    CUBE_SMALL = "Cube_small"
    CUBE_MEDIUM = "Cube_medium"
    CUBE_LARGE = "Cube_large"
    STICK_SMALL = "Stick_small"
    STICK_MEDIUM = "Stick_medium"
    STICK_LARGE = "Stick_large"
    SPHERE_SMALL = "Sphere_small"
    SPHERE_MEDIUM = "Sphere_medium"
    SPHERE_LARGE = "Sphere_large"

    def __str__(self) -> str:
        return self.value

    @property
    def shape(self) -> ShapeCategory:
        return ShapeCategory(self.value.split("_")[0])


SHAPE_ORDER = tuple(ShapeCategory)
SHAPE_SIZE_ORDER = tuple(ShapeSizeCategory)


def parse_shape(name: str) -> ShapeCategory:
    try:
        return ShapeCategory(name.strip())
    except ValueError:
        raise VocabularyError(f"unknown shape category {name.strip()!r}") from None


def parse_shape_size(name: str) -> ShapeSizeCategory:
    try:
        return ShapeSizeCategory(name.strip())
    except ValueError:
        raise VocabularyError(f"unknown shape-size category {name.strip()!r}") from None


@dataclass(frozen=True)
class SynthesisRecord:
    """One documented synthesis: 10 continuous parameters + 3 reagent names."""

    ca_ion: float
    co3_ion: float
    hco3_ion: float
    polymer_mwt: float
    polymer_wt: float
    surfactant_wt: float
    solvent_vol: float
    stirring: float
    temperature: float
    synthesis_time: float
    polymer: str = "No_polymer"
    surfactant: str = "No_surfactant"
    solvent: str = "No_solvent"

    def __post_init__(self):
        for name in CONTINUOUS_FIELDS:
            v = getattr(self, name)
            if not np.isfinite(v) or v < 0:
                raise RowParseError(f"continuous field {name!r} must be finite and >= 0, got {v!r}")
        if self.polymer not in POLYMERS:
            raise VocabularyError(f"unknown polymer {self.polymer!r}")
        if self.surfactant not in SURFACTANTS:
            raise VocabularyError(f"unknown surfactant {self.surfactant!r}")
        if self.solvent not in SOLVENTS:
            raise VocabularyError(f"unknown solvent {self.solvent!r}")

    def continuous_values(self) -> tuple[float, ...]:
        return tuple(float(getattr(self, name)) for name in CONTINUOUS_FIELDS)


@dataclass(frozen=True)
class MorphologyLabel:
    """Shape categories (and optional shape-size categories) seen in one synthesis."""

    shapes: frozenset
    shape_sizes: frozenset = field(default_factory=frozenset)

    def __post_init__(self):
        object.__setattr__(self, "shapes", frozenset(self.shapes))
        object.__setattr__(self, "shape_sizes", frozenset(self.shape_sizes))
        if not self.shapes:
            raise VocabularyError("morphology label must contain at least one shape")
        for ss in self.shape_sizes:
            if ss.shape not in self.shapes:
                raise VocabularyError(
                    f"shape-size {ss.value!r} has no matching shape in {sorted(s.value for s in self.shapes)}"
                )

    def shapes_text(self) -> str:
        return ", ".join(s.value for s in SHAPE_ORDER if s in self.shapes)

    def shape_sizes_text(self) -> str:
        return ", ".join(s.value for s in SHAPE_SIZE_ORDER if s in self.shape_sizes)


def default_feature_names() -> tuple[str, ...]:
    return CONTINUOUS_COLUMNS + INDICATOR_COLUMNS


def _indicator_value(record: SynthesisRecord, column: str) -> float:
    if column in POLYMERS:
        return 1.0 if record.polymer == column else 0.0
    if column in SURFACTANTS:
        return 1.0 if record.surfactant == column else 0.0
    if column in SOLVENTS:
        return 1.0 if record.solvent == column else 0.0
    raise SchemaError(f"unknown feature column {column!r}")


def one_hot(record: SynthesisRecord, feature_names=None) -> np.ndarray:
    """Encode a record as a real vector following `feature_names` order."""
    if feature_names is None:
        feature_names = default_feature_names()
    out = np.empty(len(feature_names), dtype=float)
    continuous = dict(zip(CONTINUOUS_COLUMNS, record.continuous_values()))
    for i, name in enumerate(feature_names):
        if name in continuous:
            out[i] = continuous[name]
        else:
            out[i] = _indicator_value(record, name)
    return out


@dataclass(frozen=True)
class Dataset:
    """Aligned synthesis records and morphology labels, immutable after load."""

    records: tuple
    labels: tuple
    feature_names: tuple = field(default_factory=default_feature_names)

    def __post_init__(self):
        object.__setattr__(self, "records", tuple(self.records))
        object.__setattr__(self, "labels", tuple(self.labels))
        object.__setattr__(self, "feature_names", tuple(self.feature_names))
        if len(self.records) != len(self.labels):
            raise SchemaError(
                f"records/labels length mismatch: {len(self.records)} vs {len(self.labels)}"
            )

    def __len__(self) -> int:
        return len(self.records)

    def feature_matrix(self) -> np.ndarray:
        if not self.records:
            return np.empty((0, len(self.feature_names)), dtype=float)
        return np.stack([one_hot(r, self.feature_names) for r in self.records])

    def subset(self, indices) -> "Dataset":
        idx = list(indices)
        return Dataset(
            records=tuple(self.records[i] for i in idx),
            labels=tuple(self.labels[i] for i in idx),
            feature_names=self.feature_names,
        )

    def instance_count(self) -> int:
        """Number of (record, shape-size) training instances."""
        return sum(len(lab.shape_sizes) for lab in self.labels)


def _parse_label_cell(cell: str, row_index: int) -> frozenset:
    names = [tok for tok in (t.strip() for t in cell.split(",")) if tok]
    if not names:
        raise VocabularyError(f"row {row_index}: empty Shapes cell")
    return frozenset(parse_shape(n) for n in names)


def _parse_size_cell(cell: str) -> frozenset:
    names = [tok for tok in (t.strip() for t in cell.split(",")) if tok]
    return frozenset(parse_shape_size(n) for n in names)


def load_dataset(path, schema=None) -> Dataset:
    """Load a synthesis CSV.

    The header must carry every schema column byte-for-byte plus the
    "Shapes" label column; "ShapeSizes" is optional. Raises SchemaError,
    RowParseError or VocabularyError naming the offending column/row.
    """
    schema = tuple(schema) if schema is not None else DEFAULT_SCHEMA
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
            rows = list(reader)
        except StopIteration:
            raise SchemaError(f"{path}: empty file, no header row") from None
        except UnicodeDecodeError as exc:
            raise SchemaError(f"{path}: not a UTF-8 text file ({exc})") from None

    seen = set(header)
    for col in schema:
        if col not in seen:
            raise SchemaError(f"{path}: missing column {col!r}")
    if LABEL_COLUMN not in seen:
        raise SchemaError(f"{path}: missing column {LABEL_COLUMN!r}")
    allowed = set(schema) | {LABEL_COLUMN, SIZE_LABEL_COLUMN}
    for col in header:
        if col not in allowed:
            raise SchemaError(f"{path}: unexpected column {col!r}")
    if len(seen) != len(header):
        raise SchemaError(f"{path}: duplicate column in header")

    col_index = {name: header.index(name) for name in header}
    has_sizes = SIZE_LABEL_COLUMN in col_index

    records = []
    labels = []
    for i, row in enumerate(rows):
        if len(row) != len(header):
            raise RowParseError(f"row {i}: expected {len(header)} cells, got {len(row)}")
        values = {}
        for col, attr in zip(CONTINUOUS_COLUMNS, CONTINUOUS_FIELDS):
            cell = row[col_index[col]]
            try:
                values[attr] = float(cell)
            except ValueError:
                raise RowParseError(f"row {i}: non-numeric value {cell!r} in column {col!r}") from None
        try:
            record = SynthesisRecord(
                polymer=row[col_index["Polymer"]].strip(),
                surfactant=row[col_index["Surfactant"]].strip(),
                solvent=row[col_index["Solvent"]].strip(),
                **values,
            )
        except VocabularyError as exc:
            raise VocabularyError(f"row {i}: {exc}") from None
        except RowParseError as exc:
            raise RowParseError(f"row {i}: {exc}") from None
        shapes = _parse_label_cell(row[col_index[LABEL_COLUMN]], i)
        sizes = _parse_size_cell(row[col_index[SIZE_LABEL_COLUMN]]) if has_sizes else frozenset()
        labels.append(MorphologyLabel(shapes=shapes, shape_sizes=sizes))
        records.append(record)

    return Dataset(records=tuple(records), labels=tuple(labels))


def save_dataset(dataset: Dataset, path) -> None:
    """Write a dataset back to CSV; load_dataset(save_dataset(d)) round-trips."""
    header = list(DEFAULT_SCHEMA) + [LABEL_COLUMN, SIZE_LABEL_COLUMN]
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        for record, label in zip(dataset.records, dataset.labels):
            row = [repr(v) for v in record.continuous_values()]
            row += [record.polymer, record.surfactant, record.solvent]
            row += [label.shapes_text(), label.shape_sizes_text()]
            writer.writerow(row)


def binary_target(dataset: Dataset, category) -> np.ndarray:
    """True at index i iff labels[i] contains the category."""
    if isinstance(category, ShapeCategory):
        return np.array([category in lab.shapes for lab in dataset.labels], dtype=bool)
    if isinstance(category, ShapeSizeCategory):
        return np.array([category in lab.shape_sizes for lab in dataset.labels], dtype=bool)
    raise VocabularyError(f"category {category!r} is not in the taxonomy")


def _round_half_up(x: float) -> int:
    return int(np.floor(x + 0.5))


def split(dataset: Dataset, test_fraction: float, seed: int, stratify_on) -> tuple:
    """Deterministic stratified train/test partition.

    The test set holds round(test_fraction * n) records and the positive
    count of `stratify_on` in the test set is round(test_fraction * n_pos),
    i.e. within one sample of the global fraction.
    """
    if not 0.0 < test_fraction < 1.0:
        raise ValueError(f"test_fraction must be in (0, 1), got {test_fraction}")
    y = binary_target(dataset, stratify_on)
    n = len(dataset)
    n_pos = int(y.sum())
    if n_pos == 0 or n_pos == n:
        raise DegenerateStratumError(
            f"cannot stratify on {category_name(stratify_on)}: {n_pos} of {n} records positive"
        )
    n_test = _round_half_up(test_fraction * n)
    n_test_pos = min(_round_half_up(test_fraction * n_pos), n_test)
    n_test_neg = min(n_test - n_test_pos, n - n_pos)

    rng = np.random.default_rng(seed)
    pos_idx = np.flatnonzero(y)
    neg_idx = np.flatnonzero(~y)
    rng.shuffle(pos_idx)
    rng.shuffle(neg_idx)
    test = sorted(np.concatenate([pos_idx[:n_test_pos], neg_idx[:n_test_neg]]).tolist())
    test_set = set(test)
    train = [i for i in range(n) if i not in test_set]
    return dataset.subset(train), dataset.subset(test)


def exclude_features(dataset: Dataset, names) -> Dataset:
    """Drop the named feature columns; records and labels are untouched."""
    names = list(names)
    known = set(dataset.feature_names)
    for name in names:
        if name not in known:
            raise SchemaError(f"cannot exclude unknown feature {name!r}")
    drop = set(names)
    remaining = tuple(f for f in dataset.feature_names if f not in drop)
    if not remaining:
        raise SchemaError("cannot exclude every feature column")
    return replace(dataset, feature_names=remaining)


def category_name(category) -> str:
    return category.value if isinstance(category, (ShapeCategory, ShapeSizeCategory)) else str(category)


def category_from_name(name):
    """Resolve "Cube" or "Cube_small" to its taxonomy member."""
    if isinstance(name, (ShapeCategory, ShapeSizeCategory)):
        return name
    for shape in ShapeCategory:
        if shape.value == name:
            return shape
    for ss in ShapeSizeCategory:
        if ss.value == name:
            return ss
    raise VocabularyError(f"category {name!r} is not in the taxonomy")
