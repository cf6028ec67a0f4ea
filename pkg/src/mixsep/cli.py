"""Command-line interface: prepare, pair-index, train, separate, evaluate, report."""

from __future__ import annotations

import sys

import click

from . import harness


def _manifest(path, overrides):
    return harness.load_manifest(path, list(overrides))


def _fail(exc: Exception):
    click.echo(f"error: {type(exc).__name__}: {exc}", err=True)
    sys.exit(1)


manifest_opt = click.option(
    "--manifest", "-m", "manifest_path", required=True,
    type=click.Path(exists=True, dir_okay=False), help="Experiment manifest JSON."
)
override_opt = click.option(
    "--override", "-O", "overrides", multiple=True, metavar="KEY=VALUE",
    help="Override a manifest entry (dotted keys, JSON values)."
)


@click.group()
@click.version_option()
def main():
    """Synthesize supervised separation training data from solo recordings,
    train mask models, and evaluate separation quality."""


@main.command()
@manifest_opt
@override_opt
def prepare(manifest_path, overrides):
    """Chunk the corpus into mode-specific pools with cached features."""
    try:
        path = harness.cmd_prepare(_manifest(manifest_path, overrides))
    except Exception as exc:
        _fail(exc)
    click.echo(f"pools written: {path}")


@main.command("pair-index")
@manifest_opt
@override_opt
def pair_index(manifest_path, overrides):
    """Build the candidate-pair index for the manifest's pairing mode."""
    try:
        paths = harness.cmd_pair_index(_manifest(manifest_path, overrides))
    except Exception as exc:
        _fail(exc)
    for split, path in paths.items():
        click.echo(f"{split} index: {path}")


@main.command()
@manifest_opt
@override_opt
@click.option("--verbose", "-v", is_flag=True, help="Print per-epoch losses.")
def train(manifest_path, overrides, verbose):
    """Train one mask model per instrument."""
    try:
        paths = harness.cmd_train(_manifest(manifest_path, overrides), verbose=int(verbose))
    except Exception as exc:
        _fail(exc)
    for instrument, path in paths.items():
        click.echo(f"{instrument} checkpoint: {path}")


@main.command()
@manifest_opt
@override_opt
@click.option("--input", "-i", "input_path", required=True,
              type=click.Path(exists=True, dir_okay=False), help="Mixture WAV to separate.")
@click.option("--output-dir", "-o", type=click.Path(file_okay=False), default=None)
def separate(manifest_path, overrides, input_path, output_dir):
    """Separate a mixture WAV with the experiment's trained models."""
    try:
        paths = harness.cmd_separate(_manifest(manifest_path, overrides), input_path, output_dir)
    except Exception as exc:
        _fail(exc)
    for instrument, path in paths.items():
        click.echo(f"{instrument}: {path}")


@main.command()
@manifest_opt
@override_opt
@click.option("--testset", "-t", "testset_path", required=True,
              type=click.Path(exists=True, dir_okay=False), help="Test-set manifest JSON.")
@click.option("--methods", default="model,oracle_irm,mixture", show_default=True,
              help="Comma-separated methods to score.")
@click.option("--pgm", is_flag=True, help="Dump log-magnitude spectrogram PGM images.")
def evaluate(manifest_path, overrides, testset_path, methods, pgm):
    """Score separation quality on a paired test set."""
    method_tuple = tuple(m.strip() for m in methods.split(",") if m.strip())
    try:
        paths = harness.cmd_evaluate(
            _manifest(manifest_path, overrides), testset_path, method_tuple, pgm
        )
    except Exception as exc:
        _fail(exc)
    click.echo(f"scores: {paths['scores']}")
    click.echo(f"medians: {paths['medians']}")


@main.command()
@click.argument("run_dirs", nargs=-1, required=True,
                type=click.Path(exists=True, file_okay=False))
@click.option("--output", "-o", "out_path", required=True, type=click.Path(dir_okay=False))
def report(run_dirs, out_path):
    """Combine several evaluated runs into one comparison table."""
    try:
        path = harness.cmd_report(list(run_dirs), out_path)
    except Exception as exc:
        _fail(exc)
    click.echo(f"report: {path}")


if __name__ == "__main__":
    main()
