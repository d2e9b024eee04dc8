"""Shared dataset factories for the test suite.

All generators are deterministic under their seed arguments so every test
can be re-run bit-identically.
"""

import numpy as np

from morphoforge.data_model import (
    Dataset,
    MorphologyLabel,
    POLYMERS,
    SOLVENTS,
    SURFACTANTS,
    ShapeCategory,
    ShapeSizeCategory,
    SynthesisRecord,
)

# Feature bands that make each one-vs-rest task linearly separable with a
# wide margin: the category's driver sits in the high band only for rows
# carrying that category.
_DRIVERS = {
    ShapeCategory.CUBE: ("temperature", 70.0, 95.0, 20.0, 45.0),
    ShapeCategory.STICK: ("stirring", 800.0, 1200.0, 0.0, 400.0),
    ShapeCategory.SPHERE: ("surfactant_wt", 0.6, 1.0, 0.0, 0.3),
    ShapeCategory.FLAT: ("polymer_mwt", 300.0, 600.0, 0.0, 100.0),
    ShapeCategory.AMORPHOUS: ("synthesis_time", 100.0, 200.0, 1.0, 40.0),
}


def make_record(rng, shape=None, **overrides) -> SynthesisRecord:
    """Random plausible synthesis; if `shape` given, drive its band."""
    values = {
        "ca_ion": float(rng.uniform(10, 150)),
        "co3_ion": float(rng.uniform(0, 20)),
        "hco3_ion": float(rng.uniform(0, 110)),
        "polymer_mwt": 0.0,
        "polymer_wt": float(rng.uniform(0, 0.3)),
        "surfactant_wt": 0.0,
        "solvent_vol": float(rng.uniform(0, 30)),
        "stirring": 0.0,
        "temperature": 0.0,
        "synthesis_time": 0.0,
        "polymer": POLYMERS[rng.integers(len(POLYMERS))],
        "surfactant": SURFACTANTS[rng.integers(len(SURFACTANTS))],
        "solvent": SOLVENTS[rng.integers(len(SOLVENTS))],
    }
    for cat, (field_name, lo_hi, hi_hi, lo_lo, hi_lo) in _DRIVERS.items():
        if shape is cat:
            values[field_name] = float(rng.uniform(lo_hi, hi_hi))
        else:
            values[field_name] = float(rng.uniform(lo_lo, hi_lo))
    values.update(overrides)
    return SynthesisRecord(**values)


def separable_dataset(n=300, seed=0, with_sizes=False) -> Dataset:
    """n rows cycling through the 5 shapes, each one-vs-rest separable."""
    rng = np.random.default_rng(seed)
    shapes = tuple(ShapeCategory)
    records, labels = [], []
    for i in range(n):
        shape = shapes[i % len(shapes)]
        records.append(make_record(rng, shape=shape))
        sizes = frozenset()
        if with_sizes and shape in (ShapeCategory.CUBE, ShapeCategory.STICK, ShapeCategory.SPHERE):
            pick = ("small", "medium", "large")[int(rng.integers(3))]
            sizes = frozenset({ShapeSizeCategory(f"{shape.value}_{pick}")})
        labels.append(MorphologyLabel(shapes=frozenset({shape}), shape_sizes=sizes))
    return Dataset(records=tuple(records), labels=tuple(labels))


def small_dataset(n=40, seed=7) -> Dataset:
    """Small mixed dataset with occasional two-shape labels."""
    rng = np.random.default_rng(seed)
    shapes = tuple(ShapeCategory)
    records, labels = [], []
    for i in range(n):
        shape = shapes[i % len(shapes)]
        records.append(make_record(rng, shape=shape))
        members = {shape}
        if i % 7 == 0:
            members.add(shapes[(i + 1) % len(shapes)])
        labels.append(MorphologyLabel(shapes=frozenset(members)))
    return Dataset(records=tuple(records), labels=tuple(labels))


def random_matrix(rng, n, d):
    return rng.normal(size=(n, d))


def random_binary_problem(rng, n, d):
    """Feature matrix plus a noisy separable target for model tests."""
    X = rng.normal(size=(n, d))
    w = rng.normal(size=d)
    y = (X @ w + 0.1 * rng.normal(size=n)) > 0
    if y.all() or not y.any():
        y[0] = ~y[0]
    return X, y
