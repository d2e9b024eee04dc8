"""Command-line interface.

Exit codes: 0 success, 1 usage error, 2 data/schema error, 3 external
service error. Diagnostics go to stderr; data goes to files or stdout.
Report-producing subcommands also render PNG figures next to their
delimited outputs unless --no-figures is given.
"""

from __future__ import annotations

import hashlib
import json
import os
import sys
import time
from pathlib import Path

import click
import numpy as np

from . import __version__, attribution, harness, img_metrics, stats as stats_mod, trees, viz
from .data_model import DataError, binary_target, category_from_name, load_dataset, one_hot
from .harness import ExperimentAborted, ExperimentSpec, HarnessError
from .img_metrics import ImageError
from .llm_client import ServiceError
from .prompts import SamplingError, TemplateError
from .stats import StatsError
from .trees import ModelError


@click.group(name="morphoforge")
@click.version_option(version=__version__, prog_name="morphoforge")
@click.option("--jobs", type=int, default=None, help="Worker budget for parallel stages (default: logical cores).")
@click.pass_context
def main(ctx, jobs):
    """Morphology prediction pipeline: screening, tree ensembles, attribution, few-shot LLM evaluation, image metrics."""
    ctx.ensure_object(dict)
    ctx.obj["jobs"] = jobs if jobs and jobs > 0 else (os.cpu_count() or 1)


def _parse_task(task: str):
    name = task.split(":", 1)[1] if ":" in task else task
    return category_from_name(name)


def _model_matrix(model, dataset) -> np.ndarray:
    known = set(dataset.feature_names)
    if set(model.feature_names) <= known:
        return np.stack([one_hot(r, model.feature_names) for r in dataset.records])
    if len(model.feature_names) != len(dataset.feature_names):
        raise ModelError(
            f"model expects {len(model.feature_names)} features, dataset provides {len(dataset.feature_names)}"
        )
    return dataset.feature_matrix()


@main.command()
@click.option("--input", "input_path", required=True, help="Synthesis CSV to load.")
@click.option("--validate", is_flag=True, help="Exit nonzero on any schema/vocabulary problem (default behavior; flag kept for clarity).")
def ingest(input_path, validate):
    """Load and validate a synthesis CSV, printing a dataset summary."""
    dataset = load_dataset(input_path)
    click.echo(f"records: {len(dataset)}")
    click.echo(f"feature columns: {len(dataset.feature_names)}")
    click.echo(f"shape-size instances: {dataset.instance_count()}")
    for shape in sorted({s for lab in dataset.labels for s in lab.shapes}, key=lambda s: s.value):
        count = int(binary_target(dataset, shape).sum())
        click.echo(f"  {shape.value}: {count}")


@main.command("stats")
@click.option("--input", "input_path", required=True, help="Synthesis CSV to screen.")
@click.option("--alpha", default=0.05, show_default=True, help="Family-wise significance level.")
@click.option("--out", "out_path", default="screening.csv", show_default=True, help="Report CSV path.")
@click.option("--figures/--no-figures", default=True, show_default=True, help="Render a PNG next to the CSV.")
def stats_cmd(input_path, alpha, out_path, figures):
    """Run the screening battery and write the corrected report."""
    dataset = load_dataset(input_path)
    report = stats_mod.screen_features(dataset, alpha=alpha)
    report.to_csv(out_path)
    if figures:
        viz.save_screening_figure(report, Path(out_path).with_suffix(".png"))
    click.echo(report.to_text())
    click.echo(f"report written to {out_path}", err=True)


@main.command()
@click.option("--input", "input_path", required=True, help="Synthesis CSV.")
@click.option("--task", required=True, help="Target category, e.g. shape:Stick or size:Cube_small.")
@click.option("--model", "model_name", type=click.Choice(["rf", "xgb"]), default="rf", show_default=True)
@click.option("--grid", "grid_path", default=None, help="JSON file with the hyperparameter lattice.")
@click.option("--folds", default=5, show_default=True)
@click.option("--seed", default=0, show_default=True)
@click.option("--test-fraction", default=0.33, show_default=True)
@click.option("--out", "out_path", default="model.json", show_default=True, help="Fitted model path.")
def train(input_path, task, model_name, grid_path, folds, seed, test_fraction, out_path):
    """Grid-search, fit, threshold-tune and save one binary classifier."""
    from .data_model import split

    dataset = load_dataset(input_path)
    category = _parse_task(task)
    if grid_path:
        with open(grid_path, encoding="utf-8") as fh:
            grid = json.load(fh)
    else:
        grid = harness.default_grid(model_name)
    model_kind = harness.MODEL_KINDS[model_name]
    train_ds, test_ds = split(dataset, test_fraction, seed, category)
    X_tr, y_tr = train_ds.feature_matrix(), binary_target(train_ds, category)
    search = trees.grid_search_cv(X_tr, y_tr, grid, k=folds, seed=seed, model_kind=model_kind)
    params = trees.make_params(model_kind, search.best_params, seed=(seed, 1))
    model = trees.fit_model(model_kind, X_tr, y_tr, params)
    model.feature_names = tuple(train_ds.feature_names)
    model.threshold = harness._oof_threshold(X_tr, y_tr, model_kind, search.best_params, folds, seed)
    trees.save_model(model, out_path)
    metrics = trees.evaluate(model, test_ds.feature_matrix(), binary_target(test_ds, category))
    click.echo(json.dumps({
        "task": task,
        "model": model_name,
        "best_params": search.best_params,
        "cv_f1": search.best_score,
        "threshold": model.threshold,
        "test": {"accuracy": metrics.accuracy, "precision": metrics.precision,
                 "recall": metrics.recall, "f1": metrics.f1},
    }, indent=2))
    click.echo(f"model written to {out_path}", err=True)


@main.command("predict")
@click.option("--model", "model_path", required=True, help="Fitted model JSON.")
@click.option("--input", "input_path", required=True, help="Synthesis CSV to score.")
@click.option("--out", "out_path", default="-", show_default=True, help="Output CSV path, - for stdout.")
def predict_cmd(model_path, input_path, out_path):
    """Score every record: probability and thresholded decision."""
    model = trees.load_model(model_path)
    dataset = load_dataset(input_path)
    X = _model_matrix(model, dataset)
    probs = trees.predict_proba(model, X)
    lines = ["index,probability,decision"]
    for i, p in enumerate(probs):
        lines.append(f"{i},{float(p)!r},{int(p >= model.threshold)}")
    text = "\n".join(lines) + "\n"
    if out_path == "-":
        click.echo(text, nl=False)
    else:
        Path(out_path).write_text(text, encoding="utf-8")
        click.echo(f"predictions written to {out_path}", err=True)


@main.command()
@click.option("--model", "model_path", required=True, help="Fitted model JSON.")
@click.option("--data", "data_path", required=True, help="Synthesis CSV to attribute over.")
@click.option("--top", default=10, show_default=True, help="Rows to print.")
@click.option("--out", "out_path", default="importance.csv", show_default=True)
@click.option("--instance", type=int, default=None, help="Also emit per-instance attribution JSON for this row.")
@click.option("--figures/--no-figures", default=True, show_default=True)
def importance(model_path, data_path, top, out_path, instance, figures):
    """Rank features by mean |phi| over a dataset."""
    model = trees.load_model(model_path)
    dataset = load_dataset(data_path)
    X = _model_matrix(model, dataset)
    ranking = attribution.importance_ranking(model, X)
    attribution.save_importance_csv(ranking, out_path)
    if figures:
        viz.save_importance_figure(ranking, Path(out_path).with_suffix(".png"), top=top)
    for feature, value in ranking[:top]:
        click.echo(f"{value:.6f}  {feature}")
    if instance is not None:
        if not 0 <= instance < X.shape[0]:
            raise DataError(f"instance index {instance} out of range [0, {X.shape[0]})")
        att = attribution.tree_shap(model, X[instance])
        click.echo(json.dumps({
            "instance": instance,
            "base_value": att.base_value,
            "output_scale": att.output_scale,
            "output": att.output(),
            "phi": {name: float(v) for name, v in zip(att.feature_names, att.values)},
        }, indent=2))
    click.echo(f"importance written to {out_path}", err=True)


def _sha256_file(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(65536), b""):
            h.update(chunk)
    return h.hexdigest()


def _write_report_dir(out_dir: Path, table, spec_path, input_path, spec, started: float) -> None:
    out_dir.mkdir(parents=True, exist_ok=True)
    transcript = table.metadata.pop("transcript", None)
    table.to_csv(out_dir / "report.csv")
    (out_dir / "report.txt").write_text(table.to_text() + "\n", encoding="utf-8")
    if transcript is not None and len(transcript):
        transcript.save(out_dir / "transcript.jsonl")
    manifest = {
        "command": " ".join(sys.argv),
        "tool_version": __version__,
        "spec_digest": _sha256_file(spec_path),
        "dataset_digest": _sha256_file(input_path),
        "seeds": list(spec.seeds),
        "started": time.strftime("%Y-%m-%dT%H:%M:%S", time.gmtime(started)),
        "finished": time.strftime("%Y-%m-%dT%H:%M:%S", time.gmtime()),
    }
    (out_dir / "manifest.json").write_text(json.dumps(manifest, indent=2) + "\n", encoding="utf-8")


@main.group()
def bench():
    """Full benchmark experiments driven by a JSON spec."""


@bench.command("trees")
@click.option("--input", "input_path", required=True, help="Synthesis CSV.")
@click.option("--spec", "spec_path", required=True, help="ExperimentSpec JSON.")
@click.option("--out", "out_dir", default="bench-report", show_default=True, help="Output directory.")
@click.option("--figures/--no-figures", default=True, show_default=True)
@click.pass_context
def bench_trees(ctx, input_path, spec_path, out_dir, figures):
    """Benchmark rf/xgb per the spec; writes report.csv/.txt + manifest."""
    started = time.time()
    dataset = load_dataset(input_path)
    spec = ExperimentSpec.from_json_file(spec_path)
    table = harness.run_tree_experiment(dataset, spec, jobs=ctx.obj["jobs"])
    out = Path(out_dir)
    _write_report_dir(out, table, spec_path, input_path, spec, started)
    if figures:
        viz.save_benchmark_figure(table, out / "accuracy.png", metric="accuracy")
        viz.save_benchmark_figure(table, out / "f1.png", metric="f1")
    click.echo(table.to_text())
    click.echo(f"report written to {out_dir}", err=True)


@bench.command("llm")
@click.option("--input", "input_path", required=True, help="Synthesis CSV.")
@click.option("--spec", "spec_path", required=True, help="ExperimentSpec JSON.")
@click.option("--out", "out_dir", default="bench-report", show_default=True, help="Output directory.")
@click.option("--transcript", "transcript_path", default=None,
              help="Replay transcript JSONL; overrides the spec and avoids any network use.")
@click.option("--figures/--no-figures", default=True, show_default=True)
def bench_llm(input_path, spec_path, out_dir, transcript_path, figures):
    """Few-shot LLM sweep per the spec; replayable from a transcript."""
    started = time.time()
    dataset = load_dataset(input_path)
    spec = ExperimentSpec.from_json_file(spec_path)
    if transcript_path:
        spec.transcript_path = transcript_path
    out = Path(out_dir)
    try:
        table = harness.run_llm_experiment(dataset, spec)
    except ExperimentAborted as exc:
        _write_report_dir(out, exc.partial, spec_path, input_path, spec, started)
        click.echo(f"aborted, partial results in {out_dir}: {exc}", err=True)
        raise
    _write_report_dir(out, table, spec_path, input_path, spec, started)
    if figures:
        viz.save_benchmark_figure(table, out / "accuracy.png", metric="accuracy")
    click.echo(table.to_text())
    click.echo(f"report written to {out_dir}", err=True)


@main.command()
@click.argument("metric", type=click.Choice(["ssim", "psnr"]))
@click.argument("image_a")
@click.argument("image_b")
def imgmetric(metric, image_a, image_b):
    """Compute SSIM or PSNR between two grayscale images (PGM or CSV)."""
    x = img_metrics.load_image(image_a)
    y = img_metrics.load_image(image_b)
    value = img_metrics.ssim(x, y) if metric == "ssim" else img_metrics.psnr(x, y)
    click.echo(repr(value))


@main.command("pdi")
@click.argument("diameters_csv")
def pdi_cmd(diameters_csv):
    """Polydispersity index of a single-column CSV of diameters."""
    sample = img_metrics.load_diameters(diameters_csv)
    click.echo(repr(img_metrics.pdi(sample)))


_DATA_ERRORS = (DataError, StatsError, ModelError, TemplateError, SamplingError, HarnessError, ImageError)


def entrypoint(argv=None) -> int:
    try:
        main(args=argv, standalone_mode=False, prog_name="morphoforge")
        return 0
    except click.exceptions.Exit as exc:
        return int(exc.exit_code)
    except click.UsageError as exc:
        exc.show()
        return 1
    except click.ClickException as exc:
        exc.show()
        return 1
    except click.Abort:
        click.echo("aborted", err=True)
        return 1
    except (ServiceError, ExperimentAborted) as exc:
        click.echo(f"service error: {exc}", err=True)
        return 3
    except _DATA_ERRORS as exc:
        click.echo(f"data error: {exc}", err=True)
        return 2
    except (OSError, json.JSONDecodeError) as exc:
        click.echo(f"data error: {exc}", err=True)
        return 2


if __name__ == "__main__":
    sys.exit(entrypoint())
