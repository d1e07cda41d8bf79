"""Single command-line entry point for the full workflow.

Every subcommand takes a JSON config plus optional dotted-key overrides and
operates inside one run directory, guarded by a lockfile. Exit codes:
0 success, 1 runtime failure (single-line machine-parsable error on stderr),
2 usage error.
"""

from __future__ import annotations

import functools
import json
from pathlib import Path

import click

from .errors import TreeNetError
from .pipeline import (ExperimentConfig, Manifest, apply_overrides,
                       load_trained_components, run_baseline, run_lock,
                       run_phase, run_pipeline)


def _parse_set(values: tuple[str, ...]) -> dict:
    overrides = {}
    for item in values:
        if "=" not in item:
            raise click.UsageError(f"--set expects key=value, got {item!r}")
        key, raw = item.split("=", 1)
        try:
            overrides[key] = json.loads(raw)
        except json.JSONDecodeError:
            overrides[key] = raw
    return overrides


def _load_config(config_path: str, sets: tuple[str, ...], seed: int | None,
                 epochs: int | None, batch: int | None) -> tuple[ExperimentConfig, dict]:
    path = Path(config_path)
    if not path.exists():
        raise click.UsageError(f"config file {path} does not exist")
    try:
        raw = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise click.UsageError(f"config file {path} is not valid JSON: {exc}")
    overrides = _parse_set(sets)
    if seed is not None:
        overrides["seed"] = seed
    if epochs is not None:
        for phase in ("encoder_hp", "decoder_hp", "bridge_hp"):
            overrides[f"{phase}.epochs"] = epochs
    if batch is not None:
        for phase in ("encoder_hp", "decoder_hp", "bridge_hp"):
            overrides[f"{phase}.batch_size"] = batch
    raw = apply_overrides(raw, overrides)
    return ExperimentConfig.from_dict(raw), overrides


def common_options(fn):
    @click.option("--config", "config_path", required=True, type=click.Path(),
                  help="JSON experiment config.")
    @click.option("--run-dir", "run_dir", default=None, type=click.Path(),
                  help="Run directory (default: runs/<config name>).")
    @click.option("--set", "sets", multiple=True, metavar="KEY=VALUE",
                  help="Dotted-key config override, e.g. bridge_hp.lr=0.001.")
    @click.option("--seed", type=int, default=None, help="Override the global seed.")
    @click.option("--epochs", type=int, default=None, help="Override epochs for every phase.")
    @click.option("--batch", type=int, default=None, help="Override batch size for every phase.")
    @functools.wraps(fn)
    def wrapper(*args, **kwargs):
        try:
            return fn(*args, **kwargs)
        except TreeNetError as exc:
            click.echo(f'error code={exc.code} message="{exc}"', err=True)
            raise SystemExit(1)
    return wrapper


def _resolve(config_path, run_dir, sets, seed, epochs, batch):
    cfg, overrides = _load_config(config_path, sets, seed, epochs, batch)
    run_dir = Path(run_dir) if run_dir else Path("runs") / cfg.name
    return cfg, run_dir, overrides


@click.group()
def main():
    """Train, assemble, evaluate and profile bottleneck-supervised segmentation."""


@main.command("prepare-data")
@common_options
def prepare_data(config_path, run_dir, sets, seed, epochs, batch):
    """Materialize the dataset and persist the split index."""
    from .data import prepare_dataset

    cfg, run_dir, overrides = _resolve(config_path, run_dir, sets, seed, epochs, batch)
    with run_lock(run_dir):
        manifest = Manifest(run_dir)
        manifest.bind_config(cfg)
        records, split = prepare_dataset(cfg.dataset)
        split.save(run_dir / "split_index.json")
        stats = {
            "source": cfg.dataset.source,
            "count": len(records),
            "target_size": cfg.dataset.target_size,
            "boundaries": list(split.boundaries),
        }
        (run_dir / "dataset_manifest.json").write_text(json.dumps(stats, indent=2) + "\n")
        manifest.record_invocation("prepare-data", cfg, overrides)
    click.echo(f"prepared {len(records)} samples, split {split.boundaries} -> {run_dir}")


def _train_phase_command(phase: str):
    @common_options
    def cmd(config_path, run_dir, sets, seed, epochs, batch):
        cfg, run_dir, overrides = _resolve(config_path, run_dir, sets, seed, epochs, batch)
        artifacts = run_phase(cfg, run_dir, phase, subcommand=f"train-{phase}",
                              overrides=overrides)
        state = "up to date (skipped)" if artifacts.skipped else "trained"
        click.echo(f"{phase}: {state}, checkpoint {artifacts.checkpoint_path}")
    cmd.__name__ = f"train_{phase}"
    cmd.__doc__ = f"Train the {phase} phase (skips when already up to date)."
    return cmd


main.command("train-encoder")(_train_phase_command("encoder"))
main.command("train-decoder")(_train_phase_command("decoder"))
main.command("train-bridge")(_train_phase_command("bridge"))


@main.command("run-pipeline")
@click.option("--force", is_flag=True, help="Rebind the run directory to this config.")
@click.option("--baseline", is_flag=True,
              help="Also train the full-resolution backbone on the identical split.")
@common_options
def run_pipeline_cmd(config_path, run_dir, sets, seed, epochs, batch, force, baseline):
    """Run all three phases, assemble, and evaluate the test split."""
    cfg, run_dir, overrides = _resolve(config_path, run_dir, sets, seed, epochs, batch)
    result = run_pipeline(cfg, run_dir, force=force, overrides=overrides)
    for phase, art in result.artifacts.items():
        state = "skipped" if art.skipped else "trained"
        click.echo(f"{phase}: {state} ({art.checkpoint_path})")
    means = result.report.means
    click.echo(
        f"test metrics: dice={means['dice']:.4f} iou={means['iou']:.4f} "
        f"acc={means['acc']:.4f} ({result.elapsed_s:.1f}s)"
    )
    if baseline:
        base_report = run_baseline(cfg, run_dir)
        bm = base_report.means
        click.echo(
            f"baseline metrics: dice={bm['dice']:.4f} iou={bm['iou']:.4f} acc={bm['acc']:.4f}"
        )


@main.command("assemble")
@common_options
def assemble_cmd(config_path, run_dir, sets, seed, epochs, batch):
    """Assemble the three trained parts into one inference checkpoint."""
    import torch

    from .assembly import assemble
    from .layer_graph import model_param_count

    cfg, run_dir, overrides = _resolve(config_path, run_dir, sets, seed, epochs, batch)
    with run_lock(run_dir):
        manifest = Manifest(run_dir)
        manifest.bind_config(cfg)
        enc, dec, bridge = load_trained_components(cfg, run_dir)
        model = assemble(enc, bridge, dec)
        out = run_dir / "assembled"
        out.mkdir(exist_ok=True)
        torch.save({
            "kind": "assembled",
            "state_dict": model.state_dict(),
            "provenance": model.provenance,
            "shapes": cfg.shapes.to_dict(),
        }, out / "checkpoint.pt")
        manifest.record_invocation("assemble", cfg, overrides)
    click.echo(
        f"assembled model: {model_param_count(model)} parameters -> {out / 'checkpoint.pt'}"
    )


@main.command("evaluate")
@click.option("--threshold", type=float, default=None, help="Binarization threshold.")
@common_options
def evaluate_cmd(config_path, run_dir, sets, seed, epochs, batch, threshold):
    """Evaluate the assembled model on the persisted test split."""
    from .assembly import assemble, evaluate
    from .data import prepare_dataset, select_records
    from .report import render_metrics_table, write_metrics_artifacts

    cfg, run_dir, overrides = _resolve(config_path, run_dir, sets, seed, epochs, batch)
    with run_lock(run_dir):
        manifest = Manifest(run_dir)
        manifest.bind_config(cfg)
        enc, dec, bridge = load_trained_components(cfg, run_dir)
        model = assemble(enc, bridge, dec)
        records, split = prepare_dataset(cfg.dataset)
        report = evaluate(model, select_records(records, split.test_ids),
                          threshold=threshold if threshold is not None else cfg.eval_threshold,
                          model_name=f"treenet-{cfg.bridge_spec().name}",
                          dataset_name=cfg.dataset.source)
        write_metrics_artifacts(run_dir / "eval", report)
        manifest.record_invocation("evaluate", cfg, overrides)
    click.echo(render_metrics_table([report.summary_row()]), nl=False)


@main.command("profile")
@click.option("--with-memory", is_flag=True,
              help="Also measure peak memory (runs forward passes in subprocesses).")
@click.option("--batches", default="1,8", show_default=True,
              help="Comma-separated batch sizes to profile.")
@common_options
def profile_cmd(config_path, run_dir, sets, seed, epochs, batch, with_memory, batches):
    """Static FLOP/parameter comparison of the backbone vs its treenet form."""
    from .autoencoders import KIND_INPUT, KIND_LABEL
    from .profiler import build_comparison_entries, compare
    from .report import render_efficiency_table, write_efficiency_artifacts

    cfg, run_dir, overrides = _resolve(config_path, run_dir, sets, seed, epochs, batch)
    batch_sizes = tuple(int(b) for b in batches.split(","))
    with run_lock(run_dir):
        manifest = Manifest(run_dir)
        manifest.bind_config(cfg)
        entries = build_comparison_entries(
            cfg.shapes, cfg.bridge_spec(),
            cfg.autoencoder_spec(KIND_INPUT), cfg.autoencoder_spec(KIND_LABEL))
        table = compare(entries, batches=batch_sizes, include_memory=with_memory)
        write_efficiency_artifacts(run_dir / "profile", table.to_records(), table.ratios)
        manifest.record_invocation("profile", cfg, overrides)
    click.echo(render_efficiency_table(table.to_records(), table.ratios), nl=False)


@main.command("report")
@click.option("--out-dir", default=None, type=click.Path(),
              help="Where to write the report (default: <run-dir>/report).")
@common_options
def report_cmd(config_path, run_dir, sets, seed, epochs, batch, out_dir):
    """Regenerate tables, CSV exports and figures from persisted rows."""
    from .report import generate_report

    cfg, run_dir, overrides = _resolve(config_path, run_dir, sets, seed, epochs, batch)
    with run_lock(run_dir):
        manifest = Manifest(run_dir)
        manifest.bind_config(cfg)
        written = generate_report(run_dir, out_dir)
        manifest.record_invocation("report", cfg, overrides)
    if not written:
        click.echo("no persisted rows found; run evaluate/profile first")
    for path in written:
        click.echo(f"wrote {path}")


if __name__ == "__main__":
    main()
