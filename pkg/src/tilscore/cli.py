"""Command-line entry points.

Exit codes: 0 success, 2 configuration error, 3 data error, 4 backend error,
5 partial failure (patches failed and --tolerate-failures was not set).
"""

from __future__ import annotations

import functools
import json
import sys
from pathlib import Path

import click

from ._version import __version__
from .config import load_config
from .errors import (BackendError, ConfigError, ConvergenceError, DataError,
                     PartialFailureError, UndefinedMetricError)
from .pipeline import (BackendPool, discover_bundles, read_patients_csv,
                       run_pipeline, stage_classify, stage_heatmaps,
                       stage_quantify, stage_sample, stage_score)
from .survival import cohort_analysis, read_cohort_csv
from .sweep import DEFAULT_RATIOS, ratio_sweep, write_sweep_csv

__all__ = ["cli", "main"]


def common_options(fn):
    opts = [
        click.option("--config", "config_path",
                     type=click.Path(exists=True, dir_okay=False),
                     default=None, help="Flat JSON config file."),
        click.option("--seed", type=click.IntRange(0, 2**64 - 1), default=None,
                     help="Master seed; every stream derives from it."),
        click.option("--ratio", type=click.FloatRange(0, 1, min_open=True),
                     default=None, help="Sampling ratio over eligible patches."),
        click.option("--backend", default=None,
                     help="mock | subprocess:CMD | http(s)://URL"),
        click.option("--out", "out_dir", type=click.Path(file_okay=False),
                     default="tilscore_out", show_default=True,
                     help="Artifact directory."),
        click.option("--workers", type=click.IntRange(1, None), default=None,
                     help="Patch-level worker threads."),
        click.option("--tolerate-failures", is_flag=True, default=False,
                     help="Keep going when single patches fail."),
    ]
    for opt in reversed(opts):
        fn = opt(fn)
    return fn


def _build_config(config_path, seed, ratio, backend, workers, tolerate_failures):
    overrides = {
        "seed": seed,
        "sampling_ratio": ratio,
        "backend": backend,
        "workers": workers,
        # flag can only switch the value on; use the config file to pin it off
        "tolerate_failures": True if tolerate_failures else None,
    }
    return load_config(config_path, overrides)


def handles_errors(fn):
    @functools.wraps(fn)
    def wrapper(*args, **kwargs):
        try:
            return fn(*args, **kwargs)
        except ConfigError as e:
            _fail(2, e)
        except PartialFailureError as e:
            _fail(5, e)
        except BackendError as e:
            _fail(4, e)
        except (DataError, UndefinedMetricError, ConvergenceError) as e:
            _fail(3, e)
    return wrapper


def _fail(code: int, err: Exception):
    click.echo(f"error: {err}", err=True)
    sys.exit(code)


def _prepare(out_dir) -> Path:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    return out


@click.group()
@click.version_option(__version__, prog_name="tilscore")
def cli():
    """TIL-density scoring over whole-slide image bundles."""


@cli.command()
@click.argument("slides", nargs=-1, required=True,
                type=click.Path(exists=True, file_okay=False))
@common_options
@handles_errors
def sample(slides, config_path, seed, ratio, backend, out_dir, workers,
           tolerate_failures):
    """Grid + tissue + cellularity filtering + seeded subsample."""
    cfg = _build_config(config_path, seed, ratio, backend, workers, tolerate_failures)
    out = _prepare(out_dir)
    bundles = discover_bundles(slides)
    for sid, c in stage_sample(cfg, bundles, out).items():
        click.echo(f"{sid}: {c['total']} candidates, {c['eligible']} eligible, "
                   f"{c['sampled']} sampled")


@cli.command()
@click.argument("slides", nargs=-1, required=True,
                type=click.Path(exists=True, file_okay=False))
@common_options
@handles_errors
def classify(slides, config_path, seed, ratio, backend, out_dir, workers,
             tolerate_failures):
    """Attach class probabilities and labels to the sampled patches."""
    cfg = _build_config(config_path, seed, ratio, backend, workers, tolerate_failures)
    out = _prepare(out_dir)
    bundles = discover_bundles(slides)
    with BackendPool(cfg.backend, cfg.seed) as pool:
        for sid, c in stage_classify(cfg, bundles, out, pool).items():
            click.echo(f"{sid}: {c['classified']} classified, "
                       f"{c['relevant']} relevant")


@cli.command()
@click.argument("slides", nargs=-1, required=True,
                type=click.Path(exists=True, file_okay=False))
@common_options
@handles_errors
def quantify(slides, config_path, seed, ratio, backend, out_dir, workers,
             tolerate_failures):
    """Count TILs on the relevant patches and derive densities."""
    cfg = _build_config(config_path, seed, ratio, backend, workers, tolerate_failures)
    out = _prepare(out_dir)
    bundles = discover_bundles(slides)
    with BackendPool(cfg.backend, cfg.seed) as pool:
        for sid, c in stage_quantify(cfg, bundles, out, pool).items():
            click.echo(f"{sid}: {c['quantified']}/{c['relevant']} quantified"
                       + (f", {c['failed']} failed" if c["failed"] else ""))


@cli.command()
@click.argument("slides", nargs=-1, required=True,
                type=click.Path(exists=True, file_okay=False))
@click.option("--patients", "patients_path", default=None,
              type=click.Path(exists=True, dir_okay=False),
              help="slide_id,patient_id mapping CSV (default: one slide = one patient).")
@common_options
@handles_errors
def score(slides, patients_path, config_path, seed, ratio, backend, out_dir,
          workers, tolerate_failures):
    """Aggregate patch densities into per-patient prognostic scores."""
    cfg = _build_config(config_path, seed, ratio, backend, workers, tolerate_failures)
    out = _prepare(out_dir)
    bundles = discover_bundles(slides)
    patients = read_patients_csv(patients_path) if patients_path else None
    for pid, value in sorted(stage_score(cfg, bundles, out, patients).items()):
        click.echo(f"{pid}: {value:.6g} TILs/mm^2")


@cli.command()
@click.argument("cohort", type=click.Path(exists=True, dir_okay=False))
@common_options
@handles_errors
def survival(cohort, config_path, seed, ratio, backend, out_dir, workers,
             tolerate_failures):
    """Survival battery over a patient_id,time_months,event,score CSV."""
    _build_config(config_path, seed, ratio, backend, workers, tolerate_failures)
    out = _prepare(out_dir)
    result = cohort_analysis(read_cohort_csv(cohort))
    curves = result.pop("km_curves")
    km_files = {}
    for group, curve in curves.items():
        km_files[group] = curve.write_csv(out / f"km_{group}.csv").name
    result["km_curves"] = km_files
    (out / "survival_summary.json").write_text(
        json.dumps(result, sort_keys=True, indent=1))
    click.echo(f"n={result['n']}  c-index={result['c_index']:.4f}")
    if "log_rank" in result:
        lr = result["log_rank"]
        click.echo(f"log-rank chi2={lr['statistic']:.4f} df={lr['df']} "
                   f"p={lr['p_value']:.4g}")
    click.echo(f"wrote {out / 'survival_summary.json'}")


@cli.command()
@click.argument("slides", nargs=-1, required=True,
                type=click.Path(exists=True, file_okay=False))
@click.option("--cohort", "cohort_path", required=True,
              type=click.Path(exists=True, dir_okay=False),
              help="patient_id,time_months,event,score CSV (score column ignored).")
@click.option("--ratios", default=",".join(f"{r:g}" for r in DEFAULT_RATIOS),
              show_default=True, help="Comma-separated sampling ratios.")
@click.option("--iterations", type=click.IntRange(1, None), default=100,
              show_default=True)
@click.option("--patients", "patients_path", default=None,
              type=click.Path(exists=True, dir_okay=False),
              help="slide_id,patient_id mapping CSV.")
@common_options
@handles_errors
def sweep(slides, cohort_path, ratios, iterations, patients_path, config_path,
          seed, ratio, backend, out_dir, workers, tolerate_failures):
    """Monte-Carlo c-index stability across sampling ratios."""
    cfg = _build_config(config_path, seed, ratio, backend, workers, tolerate_failures)
    out = _prepare(out_dir)
    try:
        ratio_list = [float(s) for s in ratios.split(",") if s.strip()]
    except ValueError as e:
        raise ConfigError(f"bad --ratios value: {e}") from None
    if not ratio_list or any(not 0.0 < r <= 1.0 for r in ratio_list):
        raise ConfigError("--ratios values must lie in (0, 1]")
    bundles = discover_bundles(slides)
    patients = read_patients_csv(patients_path) if patients_path else None
    rows = ratio_sweep(cfg, bundles, read_cohort_csv(cohort_path),
                       ratios=ratio_list, iterations=iterations,
                       patients=patients, progress=click.echo)
    path = write_sweep_csv(rows, out / "sweep.csv")
    click.echo(f"wrote {path}")


@cli.command()
@click.argument("slides", nargs=-1, required=True,
                type=click.Path(exists=True, file_okay=False))
@common_options
@handles_errors
def heatmap(slides, config_path, seed, ratio, backend, out_dir, workers,
            tolerate_failures):
    """Render density heatmaps and class overlays from persisted candidates."""
    cfg = _build_config(config_path, seed, ratio, backend, workers, tolerate_failures)
    out = _prepare(out_dir)
    bundles = discover_bundles(slides)
    for name in stage_heatmaps(cfg, bundles, out):
        click.echo(f"wrote {out / name}")


@cli.command()
@click.argument("slides", nargs=-1, required=True,
                type=click.Path(exists=True, file_okay=False))
@click.option("--patients", "patients_path", default=None,
              type=click.Path(exists=True, dir_okay=False),
              help="slide_id,patient_id mapping CSV.")
@common_options
@handles_errors
def run(slides, patients_path, config_path, seed, ratio, backend, out_dir,
        workers, tolerate_failures):
    """All stages: sample, classify, quantify, score, heatmaps, manifest."""
    cfg = _build_config(config_path, seed, ratio, backend, workers, tolerate_failures)
    out = _prepare(out_dir)
    bundles = discover_bundles(slides)
    patients = read_patients_csv(patients_path) if patients_path else None
    manifest = run_pipeline(cfg, bundles, out, patients)
    for sid in sorted(manifest.slides):
        c = manifest.slides[sid]
        click.echo(f"{sid}: {c['total']} total, {c['eligible']} eligible, "
                   f"{c['sampled']} sampled, {c['relevant']} relevant, "
                   f"{c['quantified']} quantified")
    click.echo(f"wrote {out / 'manifest.json'}")


def main():
    cli(prog_name="tilscore")


if __name__ == "__main__":
    main()
