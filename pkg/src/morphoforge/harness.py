"""Experiment orchestration: tree benchmarks and few-shot LLM sweeps.

Every experiment repeats over explicit seeds and aggregates each metric
to mean +/- sample standard deviation (ddof=1; a single repeat reports
std 0). Tree runs do, per category and seed: stratified split, k-fold
grid search on the training part, out-of-fold threshold tuning, test
evaluation. LLM runs score per-category binary presence on balanced
test subsets, with exact-set match reported alongside. With a replay
backend the whole pipeline is a pure function of its inputs.
"""

from __future__ import annotations

import csv
import itertools
import json
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .data_model import (
    Dataset,
    DegenerateStratumError,
    ShapeCategory,
    binary_target,
    category_from_name,
    split,
)
from .llm_client import (
    ENDPOINT_PRESETS,
    ChatClient,
    EndpointConfig,
    ServiceError,
    Transcript,
    replay_backend,
)
from .prompts import FewShotConfig, build_prompt, parse_answer
from .trees import (
    Metrics,
    binary_metrics,
    evaluate,
    fit_model,
    grid_search_cv,
    make_params,
    predict_proba,
    stratified_kfold,
    threshold_from_scores,
)


class HarnessError(Exception):
    pass


class ExperimentAborted(Exception):
    """Endpoint or replay failure mid-experiment; partial table attached."""

    def __init__(self, message: str, partial: "ReportTable"):
        super().__init__(message)
        self.partial = partial


# Compact default lattices keep CLI runs tractable; the *_WIDE variants
# carry 3 values per axis for full-scale searches.
DEFAULT_RF_GRID = {
    "n_estimators": [50, 150],
    "max_features": [0.4, 0.8],
    "max_depth": [6, None],
    "min_samples_leaf": [1, 3],
}
DEFAULT_XGB_GRID = {
    "gamma": [0.0, 0.5],
    "colsample_bytree": [0.6, 1.0],
    "max_depth": [2, 4],
    "n_estimators": [50, 150],
    "learning_rate": [0.1, 0.3],
}
RF_GRID_WIDE = {
    "n_estimators": [50, 100, 200],
    "max_features": [0.3, 0.6, 1.0],
    "max_depth": [4, 8, None],
    "min_samples_leaf": [1, 3, 5],
    "max_leaf_nodes": [None, 32, 128],
}
XGB_GRID_WIDE = {
    "gamma": [0.0, 0.2, 0.5],
    "colsample_bytree": [0.5, 0.75, 1.0],
    "max_depth": [2, 3, 4],
    "n_estimators": [50, 100, 200],
    "learning_rate": [0.05, 0.1, 0.3],
}

MODEL_KINDS = {"rf": "forest", "xgb": "boosted"}

# Endpoint config used when every completion comes from a replay/mock
# backend; limits are effectively unbounded so the limiter never sleeps.
OFFLINE_ENDPOINT = EndpointConfig(
    base_url="offline://replay",
    model_name="replay",
    api_key_env="MORPHOFORGE_OPENAI_KEY",
    requests_per_minute=10**9,
    tokens_per_minute=10**9,
)


@dataclass
class ExperimentSpec:
    tasks: tuple
    model: str
    split_fraction: object = 0.33
    repeats: int = 5
    seeds: tuple | None = None
    grid: dict | None = None
    folds: int = 5
    endpoint: str | None = None
    transcript_path: str | None = None
    n_examples: tuple = (8,)
    strategies: tuple = ("only_target_class",)
    formats: tuple = ("textual",)

    def __post_init__(self):
        self.tasks = tuple(self.tasks)
        if not self.tasks:
            raise HarnessError("spec needs at least one task category")
        if self.model not in ("rf", "xgb", "llm"):
            raise HarnessError(f"unknown model {self.model!r}")
        if self.repeats < 1:
            raise HarnessError("repeats must be >= 1")
        if self.seeds is None:
            self.seeds = tuple(range(self.repeats))
        else:
            self.seeds = tuple(int(s) for s in self.seeds)
        if len(self.seeds) != self.repeats:
            raise HarnessError(f"need exactly {self.repeats} seeds, got {len(self.seeds)}")
        if isinstance(self.split_fraction, (int, float)):
            self.split_fraction = (float(self.split_fraction),)
        else:
            self.split_fraction = tuple(float(f) for f in self.split_fraction)
        for f in self.split_fraction:
            if not 0.0 < f < 1.0:
                raise HarnessError(f"split fraction {f} outside (0, 1)")
        self.n_examples = tuple(int(n) for n in self.n_examples)
        self.strategies = tuple(self.strategies)
        self.formats = tuple(self.formats)

    def to_dict(self) -> dict:
        return {
            "tasks": list(self.tasks),
            "model": self.model,
            "split_fraction": list(self.split_fraction),
            "repeats": self.repeats,
            "seeds": list(self.seeds),
            "grid": self.grid,
            "folds": self.folds,
            "endpoint": self.endpoint,
            "transcript_path": self.transcript_path,
            "n_examples": list(self.n_examples),
            "strategies": list(self.strategies),
            "formats": list(self.formats),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentSpec":
        known = {f for f in cls.__dataclass_fields__}
        unknown = set(d) - known
        if unknown:
            raise HarnessError(f"unknown spec fields: {sorted(unknown)}")
        return cls(**d)

    @classmethod
    def from_json_file(cls, path) -> "ExperimentSpec":
        with open(path, encoding="utf-8") as fh:
            return cls.from_dict(json.load(fh))


@dataclass
class ReportRow:
    category: str
    config: dict
    n_samples: int
    metrics: dict
    runs: tuple = ()
    note: str = ""


@dataclass
class ReportTable:
    title: str
    rows: list = field(default_factory=list)
    metadata: dict = field(default_factory=dict)

    def to_csv(self, path) -> None:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            writer = csv.writer(fh)
            writer.writerow(["category", "n_samples", "config", "metric", "mean", "std", "note"])
            for row in self.rows:
                config = json.dumps(row.config, sort_keys=True)
                if not row.metrics:
                    writer.writerow([row.category, row.n_samples, config, "", "", "", row.note])
                for name, (mean, std) in sorted(row.metrics.items()):
                    writer.writerow([row.category, row.n_samples, config, name, repr(mean), repr(std), row.note])

    def to_text(self) -> str:
        lines = [self.title]
        convention = self.metadata.get("std", "sample (ddof=1)")
        lines.append(f"std convention: {convention}; repeats: {self.metadata.get('repeats', '?')}")
        lines.append("")
        cat_w = max([len(r.category) for r in self.rows] + [8])
        for row in self.rows:
            config = " ".join(f"{k}={v}" for k, v in sorted(row.config.items()))
            cells = "  ".join(
                f"{name} {mean:.2f}±{std:.2f}" for name, (mean, std) in sorted(row.metrics.items())
            )
            note = f"  [{row.note}]" if row.note else ""
            lines.append(f"{row.category:<{cat_w}}  n={row.n_samples:<4d} {config}  {cells}{note}")
        comparison = self.metadata.get("split_comparison")
        if comparison:
            lines.append("")
            lines.append("Split comparison (averages over categories):")
            for entry in comparison:
                lines.append(
                    "  test fraction {fraction:.2f}: accuracy {accuracy:.2f} (avg std {accuracy_std:.2f}), "
                    "f1 {f1:.2f} (avg std {f1_std:.2f})".format(**entry)
                )
        return "\n".join(lines)


def mean_std(values) -> tuple:
    arr = np.asarray(list(values), dtype=float)
    if arr.size == 0:
        raise HarnessError("cannot aggregate zero runs")
    mean = float(arr.mean())
    std = float(arr.std(ddof=1)) if arr.size > 1 else 0.0
    return mean, std


def aggregate(runs) -> dict:
    """Per-metric (mean, sample std) over a sequence of runs."""
    records = []
    for r in runs:
        if isinstance(r, Metrics):
            records.append({"accuracy": r.accuracy, "precision": r.precision, "recall": r.recall, "f1": r.f1})
        else:
            records.append(dict(r))
    if not records:
        raise HarnessError("cannot aggregate zero runs")
    keys = records[0].keys()
    return {k: mean_std([rec[k] for rec in records]) for k in keys}


def default_grid(model: str) -> dict:
    return {"rf": DEFAULT_RF_GRID, "xgb": DEFAULT_XGB_GRID}[model]


def _oof_threshold(X, y, model_kind: str, combo: dict, folds: int, seed) -> float:
    """Threshold tuned on out-of-fold predictions over the training set."""
    k = min(folds, int(y.sum()), int((~y).sum()), len(y))
    if k < 2:
        return 0.5
    probs = np.empty(len(y), dtype=float)
    all_idx = np.arange(len(y))
    for fi, val_idx in enumerate(stratified_kfold(y, k, seed)):
        train_idx = np.setdiff1d(all_idx, val_idx)
        params = make_params(model_kind, combo, seed=(seed, 2, fi))
        fitted = fit_model(model_kind, X[train_idx], y[train_idx], params)
        probs[val_idx] = predict_proba(fitted, X[val_idx])
    return threshold_from_scores(probs, y)


def _tree_cell(dataset: Dataset, spec: ExperimentSpec, fraction: float, task: str, grid: dict):
    model_kind = MODEL_KINDS[spec.model]
    category = category_from_name(task)
    n_samples = int(binary_target(dataset, category).sum())
    config = {"model": spec.model, "split_fraction": fraction}
    runs = []
    for seed in spec.seeds:
        try:
            train, test = split(dataset, fraction, seed, category)
        except DegenerateStratumError as exc:
            return ReportRow(task, config, n_samples, {}, (), f"skipped: {exc}")
        X_tr, y_tr = train.feature_matrix(), binary_target(train, category)
        X_te, y_te = test.feature_matrix(), binary_target(test, category)
        if not y_tr.any() or y_tr.all():
            return ReportRow(task, config, n_samples, {}, (), "skipped: single-class training split")
        search = grid_search_cv(X_tr, y_tr, grid, k=spec.folds, seed=seed, model_kind=model_kind)
        params = make_params(model_kind, search.best_params, seed=(seed, 1))
        model = fit_model(model_kind, X_tr, y_tr, params)
        try:
            model.threshold = _oof_threshold(X_tr, y_tr, model_kind, search.best_params, spec.folds, seed)
        except Exception:
            model.threshold = 0.5
        runs.append(evaluate(model, X_te, y_te))
    return ReportRow(
        category=task,
        config=config,
        n_samples=n_samples,
        metrics=aggregate(runs),
        runs=tuple(
            {"accuracy": m.accuracy, "precision": m.precision, "recall": m.recall, "f1": m.f1} for m in runs
        ),
    )


def _split_comparison(rows) -> list:
    fractions = []
    for row in rows:
        f = row.config.get("split_fraction")
        if f is not None and f not in fractions:
            fractions.append(f)
    out = []
    for f in fractions:
        group = [r for r in rows if r.config.get("split_fraction") == f and r.metrics]
        if not group:
            continue
        out.append(
            {
                "fraction": f,
                "accuracy": float(np.mean([r.metrics["accuracy"][0] for r in group])),
                "accuracy_std": float(np.mean([r.metrics["accuracy"][1] for r in group])),
                "f1": float(np.mean([r.metrics["f1"][0] for r in group])),
                "f1_std": float(np.mean([r.metrics["f1"][1] for r in group])),
            }
        )
    return out


def run_tree_experiment(dataset: Dataset, spec: ExperimentSpec, jobs: int = 1) -> ReportTable:
    """Benchmark rf/xgb over every (task, split fraction) cell of the spec."""
    if spec.model not in MODEL_KINDS:
        raise HarnessError(f"run_tree_experiment expects model rf or xgb, got {spec.model!r}")
    grid = spec.grid or default_grid(spec.model)
    cells = [(fraction, task) for fraction in spec.split_fraction for task in spec.tasks]
    if jobs > 1:
        with ThreadPoolExecutor(max_workers=jobs) as pool:
            futures = [pool.submit(_tree_cell, dataset, spec, f, t, grid) for f, t in cells]
            rows = [fut.result() for fut in futures]
    else:
        rows = [_tree_cell(dataset, spec, f, t, grid) for f, t in cells]
    metadata = {
        "std": "sample (ddof=1)",
        "repeats": spec.repeats,
        "seeds": list(spec.seeds),
        "folds": spec.folds,
        "grid": grid,
        "split_comparison": _split_comparison(rows),
    }
    return ReportTable(title=f"{spec.model} benchmark", rows=rows, metadata=metadata)


def _build_client(spec: ExperimentSpec, backend, client) -> ChatClient:
    if client is not None:
        return client
    if backend is None:
        if spec.transcript_path:
            backend = replay_backend(Transcript.load(spec.transcript_path))
        elif spec.endpoint is None:
            raise HarnessError("llm spec needs an endpoint, a transcript_path, or an explicit backend")
    if spec.endpoint is not None:
        cfg = ENDPOINT_PRESETS.get(spec.endpoint)
        if cfg is None:
            raise HarnessError(f"unknown endpoint preset {spec.endpoint!r}")
    else:
        cfg = OFFLINE_ENDPOINT
    return ChatClient(cfg, backend=backend)


def _balanced_eval_indices(test: Dataset, category, seed) -> tuple:
    y = binary_target(test, category)
    pos = np.flatnonzero(y)
    neg = np.flatnonzero(~y)
    n_bal = min(pos.size, neg.size)
    if n_bal < 1:
        return ()
    rng = np.random.default_rng((seed, 101))
    chosen_pos = sorted(int(i) for i in rng.choice(pos, size=n_bal, replace=False))
    chosen_neg = sorted(int(i) for i in rng.choice(neg, size=n_bal, replace=False))
    return tuple(chosen_pos + chosen_neg)


def run_llm_experiment(dataset: Dataset, spec: ExperimentSpec, backend=None, client=None) -> ReportTable:
    """Few-shot sweep over (task, N, strategy, format, split fraction).

    Correctness per query is binary target presence agreement on a
    balanced test subset; exact_match additionally requires the parsed
    set to equal the full true shape set. A ServiceError mid-sweep
    raises ExperimentAborted carrying the rows finished so far.
    """
    if spec.model != "llm":
        raise HarnessError(f"run_llm_experiment expects model llm, got {spec.model!r}")
    chat = _build_client(spec, backend, client)
    categories = {}
    for task in spec.tasks:
        cat = category_from_name(task)
        if not isinstance(cat, ShapeCategory):
            raise HarnessError(f"llm tasks must be shape categories, got {task!r}")
        categories[task] = cat

    rows = []
    metadata = {
        "std": "sample (ddof=1)",
        "repeats": spec.repeats,
        "seeds": list(spec.seeds),
        "model_name": chat.cfg.model_name,
        "correctness": "binary target presence on balanced subsets; exact_match = full set equality",
    }
    cells = list(
        itertools.product(spec.split_fraction, spec.tasks, spec.n_examples, spec.strategies, spec.formats)
    )
    try:
        for fraction, task, n_ex, strategy, fmt in cells:
            category = categories[task]
            n_samples = int(binary_target(dataset, category).sum())
            config = {
                "model": spec.endpoint or chat.cfg.model_name,
                "split_fraction": fraction,
                "n_examples": n_ex,
                "strategy": strategy,
                "format": fmt,
            }
            runs = []
            note = ""
            for seed in spec.seeds:
                try:
                    train, test = split(dataset, fraction, seed, category)
                except DegenerateStratumError as exc:
                    note = f"skipped: {exc}"
                    break
                eval_idx = _balanced_eval_indices(test, category, seed)
                if not eval_idx:
                    note = "skipped: balanced subset impossible (no positives or no negatives in test)"
                    break
                correct = []
                exact = []
                for qi in eval_idx:
                    cfg = FewShotConfig(
                        target=category,
                        n_examples=n_ex,
                        sampling=strategy,
                        format=fmt,
                        seed=(seed, 7, qi),
                    )
                    prompt = build_prompt(cfg, train, test.records[qi])
                    parsed = parse_answer(chat.chat_complete(prompt))
                    truth = test.labels[qi].shapes
                    correct.append((category in parsed) == (category in truth))
                    exact.append(parsed == truth)
                runs.append(
                    {
                        "accuracy": float(np.mean(correct)),
                        "exact_match": float(np.mean(exact)),
                        "n_eval": float(len(eval_idx)),
                    }
                )
            if runs:
                rows.append(ReportRow(task, config, n_samples, aggregate(runs), tuple(runs), note))
            else:
                rows.append(ReportRow(task, config, n_samples, {}, (), note or "skipped"))
    except ServiceError as exc:
        partial = ReportTable(title="llm benchmark (aborted)", rows=rows, metadata=metadata)
        raise ExperimentAborted(f"experiment aborted: {exc}", partial) from exc

    table = ReportTable(title="llm benchmark", rows=rows, metadata=metadata)
    table.metadata["transcript"] = chat.transcript
    return table
