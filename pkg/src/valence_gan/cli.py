"""Operator command line: synth, preprocess, search, train, evaluate, report."""

from __future__ import annotations

import functools
import json
import os
import subprocess
import sys
from pathlib import Path

import click
import numpy as np

from . import __version__, evaluation, models, reporting, synth, training
from .errors import ValenceGanError

SEED_ENV = "VALENCE_GAN_SEED"

DEFAULT_RUN = {
    "seed": 0,
    "max_epochs": 50,
    "patience": 5,
    "checkpoint_every": 10,
}

# Desk-scale default model parameters (validated ranges still apply).
DEFAULT_MODEL = {
    "crop_width": 64,
    "filter_size": 3,
    "num_filters": 32,
    "batch_size": 64,
    "learning_rate": 1e-3,
}


def build_identifier():
    """git describe when available, else the package version."""
    try:
        out = subprocess.run(
            ["git", "describe", "--always", "--dirty"],
            cwd=Path(__file__).parent, capture_output=True, text=True, timeout=10)
        if out.returncode == 0:
            return out.stdout.strip()
    except OSError:
        pass
    return f"valence-gan-{__version__}"


def load_run_config(config_path, kind, seed, max_epochs, patience):
    """Merge defaults, the optional config file, CLI overrides, and the env seed."""
    run = dict(DEFAULT_RUN)
    model = dict(DEFAULT_MODEL, kind=kind)
    if config_path:
        payload = json.loads(Path(config_path).read_text())
        model.update(payload.get("model", {}))
        run.update({k: v for k, v in payload.items() if k != "model"})
    if kind:
        model["kind"] = kind
    if seed is not None:
        run["seed"] = seed
    if max_epochs is not None:
        run["max_epochs"] = max_epochs
    if patience is not None:
        run["patience"] = patience
    if os.environ.get(SEED_ENV):
        run["seed"] = int(os.environ[SEED_ENV])
    config = models.ModelConfig.from_dict(model)
    return config, run


def failing_gracefully(fn):
    @functools.wraps(fn)
    def wrapper(*args, **kwargs):
        try:
            return fn(*args, **kwargs)
        except (ValenceGanError, OSError) as exc:
            click.echo(json.dumps({"error": str(exc), "type": type(exc).__name__}),
                       err=True)
            sys.exit(2)
    return wrapper


@click.group()
@click.option("--workdir", type=click.Path(), default=".",
              help="Base directory for all relative paths.")
@click.pass_context
def main(ctx, workdir):
    """Semi-supervised emotional-valence classification toolkit."""
    ctx.ensure_object(dict)
    ctx.obj["workdir"] = Path(workdir)


def _resolve(ctx, path):
    p = Path(path)
    return p if p.is_absolute() else ctx.obj["workdir"] / p


@main.command("synth")
@click.option("--out", default="corpus", show_default=True)
@click.option("--sessions", default=5, show_default=True)
@click.option("--clips-per-speaker", default=15, show_default=True)
@click.option("--unlabeled", default=24, show_default=True)
@click.option("--seed", default=None, type=int)
@click.option("--min-duration", default=1.0, show_default=True)
@click.option("--max-duration", default=4.0, show_default=True)
@click.pass_context
@failing_gracefully
def synth_cmd(ctx, out, sessions, clips_per_speaker, unlabeled, seed,
              min_duration, max_duration):
    """Generate the synthetic stand-in corpus."""
    if seed is None:
        seed = int(os.environ.get(SEED_ENV, 0))
    spec = synth.SynthSpec(
        n_sessions=sessions, labeled_per_speaker=clips_per_speaker,
        unlabeled_clips=unlabeled, duration_range=(min_duration, max_duration),
        seed=seed)
    manifest = synth.generate(spec, _resolve(ctx, out))
    click.echo(f"wrote {manifest}")


@main.command("preprocess")
@click.option("--manifest", required=True)
@click.option("--out", default="cache", show_default=True,
              help="Spectrogram cache directory.")
@click.pass_context
@failing_gracefully
def preprocess_cmd(ctx, manifest, out):
    """Compute and cache normalized spectrograms for a corpus."""
    corpus = evaluation.CorpusData.load(_resolve(ctx, manifest), _resolve(ctx, out))
    click.echo(f"cached {len(corpus.items)} spectrograms in {_resolve(ctx, out)}")


@main.command("search")
@click.argument("kind", type=click.Choice(models.KINDS))
@click.option("--manifest", required=True)
@click.option("--cache", default=None)
@click.option("--trials", default=5, show_default=True)
@click.option("--seed", default=None, type=int)
@click.option("--epochs", default=3, show_default=True,
              help="Training epochs per trial.")
@click.option("--out", default="trials.csv", show_default=True)
@click.pass_context
@failing_gracefully
def search_cmd(ctx, kind, manifest, cache, trials, seed, epochs, out):
    """Random hyper-parameter search scored on fold 1's validation speaker."""
    config0, run = load_run_config(None, kind, seed, None, None)
    corpus = evaluation.CorpusData.load(
        _resolve(ctx, manifest), _resolve(ctx, cache) if cache else None)
    fold = evaluation.make_folds([i.entry for i in corpus.items])[0]

    def eval_fn(config):
        report, _ = evaluation.run_fold(config, corpus, fold, run["seed"],
                                        max_epochs=epochs, patience=run["patience"])
        return max(report.val_trace)

    rng = np.random.default_rng(run["seed"])
    best, trial_list = evaluation.random_search(kind, trials, rng, eval_fn)
    out_path = _resolve(ctx, out)
    with open(out_path, "w") as fh:
        fh.write("kind,crop_width,filter_size,num_filters,batch_size,"
                 "learning_rate,val_accuracy\n")
        for config, acc in trial_list:
            fh.write(f"{config.kind},{config.crop_width},{config.filter_size},"
                     f"{config.num_filters},{config.batch_size},"
                     f"{config.learning_rate},{acc:.6f}\n")
    best_path = out_path.with_name(out_path.stem + "_best.json")
    best_path.write_text(json.dumps({"model": best.to_dict()}, indent=2, sort_keys=True))
    click.echo(f"wrote {out_path} and {best_path}")


@main.command("train")
@click.argument("kind", type=click.Choice(models.KINDS))
@click.option("--manifest", required=True)
@click.option("--cache", default=None)
@click.option("--config", "config_path", default=None)
@click.option("--fold", default=1, show_default=True)
@click.option("--seed", default=None, type=int)
@click.option("--epochs", "max_epochs", default=None, type=int)
@click.option("--patience", default=None, type=int)
@click.option("--out", default="train_out", show_default=True)
@click.pass_context
@failing_gracefully
def train_cmd(ctx, kind, manifest, cache, config_path, fold, seed, max_epochs,
              patience, out):
    """Train one fold; writes checkpoints, a loss CSV, and a fold report."""
    config, run = load_run_config(config_path, kind, seed, max_epochs, patience)
    corpus = evaluation.CorpusData.load(
        _resolve(ctx, manifest), _resolve(ctx, cache) if cache else None)
    folds = evaluation.make_folds([i.entry for i in corpus.items])
    fold_split = folds[fold - 1]
    report, bundle = evaluation.run_fold(
        config, corpus, fold_split, run["seed"],
        max_epochs=run["max_epochs"], patience=run["patience"])
    out_dir = _resolve(ctx, out)
    out_dir.mkdir(parents=True, exist_ok=True)
    with open(out_dir / "losses.csv", "w") as fh:
        fh.write(training.LOSS_CSV_HEADER + "\n")
        fh.write("\n".join(report.loss_rows) + "\n")
    models.save_checkpoint(out_dir / "checkpoint", bundle)
    payload = {
        "model": config.kind,
        "config": config.to_dict(),
        "run": run,
        "build": build_identifier(),
        "fold_report": report.to_dict(),
    }
    (out_dir / "fold_report.json").write_text(
        json.dumps(payload, indent=2, sort_keys=True))
    click.echo(f"fold {fold}: acc5={report.acc5:.4f} acc3={report.acc3:.4f} "
               f"best_epoch={report.best_epoch}")


@main.command("evaluate")
@click.argument("kind", type=click.Choice(models.KINDS))
@click.option("--manifest", required=True)
@click.option("--cache", default=None)
@click.option("--config", "config_path", default=None)
@click.option("--seed", default=None, type=int)
@click.option("--epochs", "max_epochs", default=None, type=int)
@click.option("--patience", default=None, type=int)
@click.option("--out", default="report.json", show_default=True)
@click.pass_context
@failing_gracefully
def evaluate_cmd(ctx, kind, manifest, cache, config_path, seed, max_epochs,
                 patience, out):
    """Run the full 5-fold protocol and write report.json."""
    config, run = load_run_config(config_path, kind, seed, max_epochs, patience)
    corpus = evaluation.CorpusData.load(
        _resolve(ctx, manifest), _resolve(ctx, cache) if cache else None)
    reports, aggregate = evaluation.run_experiment(
        config, corpus, run["seed"],
        max_epochs=run["max_epochs"], patience=run["patience"])
    payload = {
        "model": config.kind,
        "config": config.to_dict(),
        "run": run,
        "build": build_identifier(),
        "folds": [r.to_dict() for r in reports],
        "aggregate": aggregate,
    }
    out_path = _resolve(ctx, out)
    out_path.write_text(json.dumps(payload, indent=2, sort_keys=True))
    click.echo(f"acc5={aggregate['acc5']:.4f} acc3={aggregate['acc3']:.4f} "
               f"rho={aggregate['rho'] if aggregate['rho'] is not None else 'n/a'}")


@main.command("report")
@click.argument("report_json")
@click.option("--out", default="report_out", show_default=True)
@click.pass_context
@failing_gracefully
def report_cmd(ctx, report_json, out):
    """Render tables and figures from a report.json."""
    payload = json.loads(Path(_resolve(ctx, report_json)).read_text())
    metrics_txt, confusion_txt, written = reporting.render_report(
        payload, _resolve(ctx, out))
    click.echo(metrics_txt)
    click.echo("")
    click.echo(confusion_txt)
    for path in written:
        click.echo(f"wrote {path}")


if __name__ == "__main__":
    main()
