"""Nonparametric and parametric test battery plus the screening report.

Continuous features are compared between present/absent groups of each
shape (Mann-Whitney, Kolmogorov-Smirnov) and across all shape groups
(Kruskal-Wallis, one-way ANOVA); categorical indicator levels go through
Fisher's exact test and Pearson chi-squared on 2x2 contingency tables.
Decisions are Bonferroni-corrected within each test family.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from fractions import Fraction

import numpy as np
from scipy.stats import chi2 as _chi2_dist
from scipy.stats import f as _f_dist

from .data_model import (
    CONTINUOUS_COLUMNS,
    INDICATOR_COLUMNS,
    Dataset,
    ShapeCategory,
    binary_target,
    one_hot,
)


class StatsError(Exception):
    pass


class EmptySampleError(StatsError):
    pass


class UndefinedStatisticError(StatsError):
    pass


class DegenerateExpectationError(StatsError):
    pass


DEFAULT_ALPHA = 0.05

# Exact Mann-Whitney enumeration is used up to this combined sample size.
EXACT_MW_LIMIT = 16


@dataclass(frozen=True)
class TestResult:
    statistic: float
    p_value: float | None
    reject: bool
    alpha: float
    test_name: str


@dataclass(frozen=True)
class ContingencyTable:
    """2x2 counts: rows = shape present/other, columns = compound in/not in."""

    a: int
    b: int
    c: int
    d: int

    def __post_init__(self):
        for v in (self.a, self.b, self.c, self.d):
            if v < 0 or v != int(v):
                raise StatsError(f"contingency cells must be nonnegative integers, got {v!r}")
        if self.n == 0:
            raise StatsError("contingency table must contain at least one observation")

    @property
    def n(self) -> int:
        return self.a + self.b + self.c + self.d


def _normal_sf(z: float) -> float:
    return 0.5 * math.erfc(z / math.sqrt(2.0))


def _midranks(values: np.ndarray) -> np.ndarray:
    order = np.argsort(values, kind="stable")
    ranks = np.empty(len(values), dtype=float)
    sorted_vals = values[order]
    i = 0
    while i < len(values):
        j = i
        while j + 1 < len(values) and sorted_vals[j + 1] == sorted_vals[i]:
            j += 1
        ranks[order[i : j + 1]] = 0.5 * (i + j) + 1.0
        i = j + 1
    return ranks


def _tie_term(values: np.ndarray) -> float:
    """Sum of t^3 - t over tie groups."""
    _, counts = np.unique(values, return_counts=True)
    return float(np.sum(counts.astype(float) ** 3 - counts))


def _rank_sum_tail(n_total: int, k: int, u_max: int) -> Fraction:
    """P(U <= u_max) for the exact null distribution of the U statistic
    of a size-k sample among n_total tie-free observations."""
    top = n_total * k - k * (k - 1) // 2  # max rank sum
    dp = np.zeros((k + 1, top + 1), dtype=np.int64)
    dp[0, 0] = 1
    for v in range(1, n_total + 1):
        for j in range(min(k, v), 0, -1):
            dp[j, v:] += dp[j - 1, : top + 1 - v]
    counts = dp[k]
    offset = k * (k + 1) // 2  # U = rank_sum - k(k+1)/2
    total = int(counts.sum())
    favourable = int(counts[offset : offset + u_max + 1].sum())
    return Fraction(favourable, total)


def mann_whitney_u(x, y, alpha: float = DEFAULT_ALPHA) -> TestResult:
    """Two-sided Mann-Whitney U test, exact for small tie-free samples.

    Returns U = min(U_x, U_y). The exact two-sided p doubles the lower
    tail of the enumerated null distribution; larger or tied samples use
    the normal approximation with tie and continuity corrections.
    """
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    if x.size == 0 or y.size == 0:
        raise EmptySampleError("mann_whitney_u requires nonempty samples")
    n, m = x.size, y.size
    combined = np.concatenate([x, y])
    ranks = _midranks(combined)
    r_x = float(ranks[:n].sum())
    u_x = r_x - n * (n + 1) / 2.0
    u_y = n * m - u_x
    u = min(u_x, u_y)

    has_ties = len(np.unique(combined)) < n + m
    if n + m <= EXACT_MW_LIMIT and not has_ties:
        tail = _rank_sum_tail(n + m, n, int(round(u)))
        p = min(1.0, float(2 * tail))
    else:
        mean = n * m / 2.0
        tie = _tie_term(combined)
        var = n * m / 12.0 * ((n + m + 1) - tie / ((n + m) * (n + m - 1.0)))
        if var <= 0:
            p = 1.0
        else:
            z = (u - mean + 0.5) / math.sqrt(var)
            p = min(1.0, 2.0 * (1.0 - _normal_sf(z)))
    return TestResult(statistic=float(u), p_value=p, reject=p < alpha, alpha=alpha, test_name="mann_whitney_u")


def kruskal_wallis(groups, alpha: float = DEFAULT_ALPHA) -> TestResult:
    """Tie-corrected Kruskal-Wallis H with chi-squared p (k-1 df)."""
    groups = [np.asarray(g, dtype=float) for g in groups]
    if len(groups) < 2:
        raise EmptySampleError("kruskal_wallis requires at least 2 groups")
    for g in groups:
        if g.size == 0:
            raise EmptySampleError("kruskal_wallis groups must be nonempty")
    combined = np.concatenate(groups)
    n_total = combined.size
    ranks = _midranks(combined)
    h = 0.0
    start = 0
    for g in groups:
        r_mean = float(ranks[start : start + g.size].mean())
        h += g.size * (r_mean - (n_total + 1) / 2.0) ** 2
        start += g.size
    h *= 12.0 / (n_total * (n_total + 1))
    correction = 1.0 - _tie_term(combined) / (n_total**3 - n_total)
    h = h / correction if correction > 0 else 0.0
    p = float(_chi2_dist.sf(h, len(groups) - 1))
    return TestResult(statistic=h, p_value=p, reject=p < alpha, alpha=alpha, test_name="kruskal_wallis")


def _ecdf_gaps(x: np.ndarray, y: np.ndarray) -> float:
    support = np.concatenate([x, y])
    f_x = np.searchsorted(np.sort(x), support, side="right") / x.size
    f_y = np.searchsorted(np.sort(y), support, side="right") / y.size
    return float(np.max(np.abs(f_x - f_y)))


def ks_rejection_threshold(n: int, m: int, alpha: float) -> float:
    return math.sqrt(-math.log(alpha / 2.0) * (1.0 + m / n) / (2.0 * m))


def ks_two_sample(x, y, alpha: float = DEFAULT_ALPHA) -> TestResult:
    """Two-sample Kolmogorov-Smirnov in decision form.

    Emits the supremum gap D between the empirical CDFs and the reject
    decision D > sqrt(-ln(alpha/2) * (1 + m/n) / (2m)); no p-value.
    """
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    if x.size == 0 or y.size == 0:
        raise EmptySampleError("ks_two_sample requires nonempty samples")
    d = _ecdf_gaps(x, y)
    threshold = ks_rejection_threshold(x.size, y.size, alpha)
    return TestResult(statistic=d, p_value=None, reject=d > threshold, alpha=alpha, test_name="ks_two_sample")


def anova_f(groups, alpha: float = DEFAULT_ALPHA) -> TestResult:
    """One-way ANOVA F test across k groups."""
    groups = [np.asarray(g, dtype=float) for g in groups]
    if len(groups) < 2:
        raise EmptySampleError("anova_f requires at least 2 groups")
    for g in groups:
        if g.size == 0:
            raise EmptySampleError("anova_f groups must be nonempty")
    k = len(groups)
    n_total = sum(g.size for g in groups)
    if n_total <= k:
        raise EmptySampleError("anova_f requires more observations than groups")
    grand = float(np.concatenate(groups).mean())
    ss_between = sum(g.size * (float(g.mean()) - grand) ** 2 for g in groups)
    ss_within = sum(float(((g - g.mean()) ** 2).sum()) for g in groups)
    if ss_within == 0.0:
        if ss_between == 0.0:
            raise UndefinedStatisticError("anova_f undefined: zero variance everywhere")
        return TestResult(statistic=math.inf, p_value=0.0, reject=True, alpha=alpha, test_name="anova_f")
    f_stat = (ss_between / (k - 1)) / (ss_within / (n_total - k))
    p = float(_f_dist.sf(f_stat, k - 1, n_total - k))
    return TestResult(statistic=f_stat, p_value=p, reject=p < alpha, alpha=alpha, test_name="anova_f")


def _hypergeom_point(a: int, b: int, c: int, d: int) -> Fraction:
    n = a + b + c + d
    num = (
        math.factorial(a + b)
        * math.factorial(c + d)
        * math.factorial(a + c)
        * math.factorial(b + d)
    )
    den = (
        math.factorial(a)
        * math.factorial(b)
        * math.factorial(c)
        * math.factorial(d)
        * math.factorial(n)
    )
    return Fraction(num, den)


def fisher_exact(t: ContingencyTable, alpha: float = DEFAULT_ALPHA) -> TestResult:
    """Fisher's exact test on a 2x2 table.

    The statistic is the hypergeometric point probability of the observed
    table; the two-sided p sums point probabilities of all tables sharing
    the margins whose probability does not exceed the observed one.
    """
    row1, col1, n = t.a + t.b, t.a + t.c, t.n
    observed = _hypergeom_point(t.a, t.b, t.c, t.d)
    lo = max(0, row1 + col1 - n)
    hi = min(row1, col1)
    slack = Fraction(1, 10**12)
    p = Fraction(0)
    for a in range(lo, hi + 1):
        prob = _hypergeom_point(a, row1 - a, col1 - a, n - row1 - col1 + a)
        if prob <= observed * (1 + slack):
            p += prob
    p_value = min(1.0, float(p))
    return TestResult(
        statistic=float(observed), p_value=p_value, reject=p_value < alpha, alpha=alpha, test_name="fisher_exact"
    )


def chi_squared(t: ContingencyTable, alpha: float = DEFAULT_ALPHA) -> TestResult:
    """Pearson chi-squared for 2x2 independence, df=1, no continuity correction."""
    n = t.n
    observed = np.array([[t.a, t.b], [t.c, t.d]], dtype=float)
    rows = observed.sum(axis=1)
    cols = observed.sum(axis=0)
    expected = np.outer(rows, cols) / n
    if np.any(expected == 0.0):
        raise DegenerateExpectationError("chi_squared: expected count of zero (degenerate margin)")
    stat = float(((observed - expected) ** 2 / expected).sum())
    p = float(_chi2_dist.sf(stat, 1))
    return TestResult(statistic=stat, p_value=p, reject=p < alpha, alpha=alpha, test_name="chi_squared")


def bonferroni(p_values, alpha: float) -> list:
    """Element i is True iff p_values[i] < alpha / len(p_values)."""
    p_values = list(p_values)
    if not p_values:
        raise StatsError("bonferroni requires at least one p-value")
    for p in p_values:
        if not 0.0 <= p <= 1.0:
            raise StatsError(f"p-value out of range: {p!r}")
    threshold = alpha / len(p_values)
    return [p < threshold for p in p_values]


@dataclass(frozen=True)
class ScreeningRow:
    feature: str
    shape: str
    test: str
    statistic: float
    p_raw: float | None
    family_size: int
    adjusted_threshold: float
    reject: bool


@dataclass
class ScreeningReport:
    alpha: float
    rows: list = field(default_factory=list)
    family_sizes: dict = field(default_factory=dict)
    skipped_shapes: list = field(default_factory=list)
    verdicts: dict = field(default_factory=dict)

    def kept_features(self) -> list:
        return [f for f, keep in self.verdicts.items() if keep]

    def excluded_features(self) -> list:
        return [f for f, keep in self.verdicts.items() if not keep]

    def to_csv(self, path) -> None:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            writer = csv.writer(fh)
            writer.writerow(["feature", "shape", "test", "p_raw", "p_adjusted_threshold", "reject"])
            for row in self.rows:
                p_raw = "" if row.p_raw is None else repr(row.p_raw)
                writer.writerow(
                    [row.feature, row.shape, row.test, p_raw, repr(row.adjusted_threshold), int(row.reject)]
                )

    def to_text(self) -> str:
        lines = [f"Feature screening at alpha={self.alpha} (Bonferroni per test family)"]
        if self.skipped_shapes:
            lines.append("Skipped shapes (degenerate strata): " + ", ".join(self.skipped_shapes))
        lines.append("")
        width = max(len(r.feature) for r in self.rows) if self.rows else 8
        for row in self.rows:
            if not row.reject:
                continue
            p_txt = "-" if row.p_raw is None else f"{row.p_raw:.3g}"
            lines.append(
                f"{row.feature:<{width}}  {row.shape:<9}  {row.test:<15}  p={p_txt:<9}  significant"
            )
        lines.append("")
        keep = self.kept_features()
        drop = self.excluded_features()
        lines.append(f"Keep ({len(keep)}): " + ", ".join(keep))
        lines.append(f"Exclude ({len(drop)}): " + ", ".join(drop))
        return "\n".join(lines)


def _screen_candidates(dataset: Dataset):
    continuous = [f for f in dataset.feature_names if f in CONTINUOUS_COLUMNS]
    indicators = [f for f in dataset.feature_names if f in INDICATOR_COLUMNS]
    return continuous, indicators


def screen_features(dataset: Dataset, alpha: float = DEFAULT_ALPHA) -> ScreeningReport:
    """Run the full screening battery and return the corrected report.

    Shapes with fewer than 2 positive or 2 negative records are skipped
    and flagged. A feature's verdict is keep iff at least one corrected
    test over any shape rejects its null.
    """
    if len(dataset) == 0:
        raise EmptySampleError("screen_features requires a nonempty dataset")
    shapes_present = {s for lab in dataset.labels for s in lab.shapes}
    if len(shapes_present) < 2:
        raise EmptySampleError("screen_features requires at least 2 distinct shapes")

    continuous, indicators = _screen_candidates(dataset)
    matrix = dataset.feature_matrix()
    col = {name: i for i, name in enumerate(dataset.feature_names)}

    targets = {}
    skipped = []
    for shape in ShapeCategory:
        y = binary_target(dataset, shape)
        n_pos = int(y.sum())
        if n_pos < 2 or len(dataset) - n_pos < 2:
            skipped.append(shape.value)
        else:
            targets[shape] = y

    report = ScreeningReport(alpha=alpha, skipped_shapes=skipped)
    # (test family) -> list of (feature, shape, TestResult)
    raw: dict = {"mann_whitney_u": [], "ks_two_sample": [], "kruskal_wallis": [], "anova_f": [], "fisher_exact": [], "chi_squared": []}

    for feature in continuous:
        values = matrix[:, col[feature]]
        for shape, y in targets.items():
            x_in, x_out = values[y], values[~y]
            raw["mann_whitney_u"].append((feature, shape.value, mann_whitney_u(x_in, x_out, alpha)))
            raw["ks_two_sample"].append((feature, shape.value, ks_two_sample(x_in, x_out, alpha)))
        groups = [values[y] for y in targets.values()]
        if len(groups) >= 2:
            raw["kruskal_wallis"].append((feature, "all", kruskal_wallis(groups, alpha)))
            try:
                raw["anova_f"].append((feature, "all", anova_f(groups, alpha)))
            except UndefinedStatisticError:
                flat = TestResult(0.0, 1.0, False, alpha, "anova_f")
                raw["anova_f"].append((feature, "all", flat))

    for feature in indicators:
        present = matrix[:, col[feature]] > 0.5
        for shape, y in targets.items():
            table = ContingencyTable(
                a=int(np.sum(y & present)),
                b=int(np.sum(y & ~present)),
                c=int(np.sum(~y & present)),
                d=int(np.sum(~y & ~present)),
            )
            raw["fisher_exact"].append((feature, shape.value, fisher_exact(table, alpha)))
            try:
                raw["chi_squared"].append((feature, shape.value, chi_squared(table, alpha)))
            except DegenerateExpectationError:
                flat = TestResult(0.0, 1.0, False, alpha, "chi_squared")
                raw["chi_squared"].append((feature, shape.value, flat))

    verdicts = {f: False for f in continuous + indicators}
    for family, entries in raw.items():
        m = len(entries)
        if m == 0:
            continue
        report.family_sizes[family] = m
        corrected_alpha = alpha / m
        for feature, shape_name, result in entries:
            if result.p_value is None:
                n_in = int(targets[ShapeCategory(shape_name)].sum())
                n_out = len(dataset) - n_in
                threshold = ks_rejection_threshold(n_in, n_out, corrected_alpha)
                reject = result.statistic > threshold
            else:
                threshold = corrected_alpha
                reject = result.p_value < corrected_alpha
            report.rows.append(
                ScreeningRow(
                    feature=feature,
                    shape=shape_name,
                    test=family,
                    statistic=result.statistic,
                    p_raw=result.p_value,
                    family_size=m,
                    adjusted_threshold=threshold,
                    reject=reject,
                )
            )
            if reject:
                verdicts[feature] = True
    report.verdicts = verdicts
    return report
