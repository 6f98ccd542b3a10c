"""Command-line orchestrator for the two-phase workflow.

Phase 1 trains per-minority-class diffusion models and samples synthetic
images from them; Phase 2 builds Real-n/Mixed-n training sets and trains the
classifiers that quantify the effect. Every command resolves its settings
from defaults < ``--config`` TOML file < explicit flags, derives all
randomness from one root seed, runs inside a content-addressed run directory,
and leaves a self-contained ``run_record.json`` behind.
"""

from __future__ import annotations

import hashlib
import json
import os
import sys
import time
from dataclasses import asdict
from pathlib import Path

try:
    import tomllib
except ModuleNotFoundError:  # python < 3.11
    import tomli as tomllib

import click
import numpy as np
import torch

from svpgen import classify, diffusion, frechet, imageio
from svpgen import denoiser as denoiser_mod
from svpgen import schedule as schedule_mod
from svpgen.seeds import derive_seed

DATA_ROOT_ENV = "SVP_DATA_ROOT"

SMOKE_GRID = {
    "optimizers": ("adam",),
    "learning_rates": (1e-3,),
    "weight_decays": (1e-4,),
    "batch_sizes": (8,),
}
GRIDS = {"paper": classify.PAPER_GRID, "smoke": SMOKE_GRID}


def data_root() -> Path:
    return Path(os.environ.get(DATA_ROOT_ENV, "."))


def _config_hash(config: dict) -> str:
    blob = json.dumps(config, sort_keys=True, default=str).encode("utf-8")
    return hashlib.sha256(blob).hexdigest()[:8]


def resolve_run_dir(base, command: str, config: dict, resume: bool = False) -> Path:
    """Run directory named <command>-<config hash>; refuses silent reuse."""
    base = Path(base) if base else data_root() / "runs"
    run_dir = base / f"{command}-{_config_hash(config)}"
    if run_dir.exists() and not resume and any(run_dir.iterdir()):
        raise click.ClickException(
            f"run directory {run_dir} already holds results for this exact config; "
            "pass --resume to continue it or change the config"
        )
    run_dir.mkdir(parents=True, exist_ok=True)
    return run_dir


def _atomic_json(path: Path, payload: dict) -> None:
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_text(json.dumps(payload, indent=2, sort_keys=True, default=str), encoding="utf-8")
    tmp.replace(path)


class RunRecord:
    """Collects command, resolved config, and artifacts; written at run end."""

    def __init__(self, command: str, config: dict):
        self.payload = {
            "command": command,
            "config": dict(config),
            "tool_version": _version(),
            "started": time.strftime("%Y-%m-%dT%H:%M:%S"),
            "artifacts": [],
        }

    def add(self, *paths) -> None:
        self.payload["artifacts"].extend(str(p) for p in paths)

    def write(self, run_dir: Path) -> None:
        self.payload["finished"] = time.strftime("%Y-%m-%dT%H:%M:%S")
        _atomic_json(run_dir / "run_record.json", self.payload)


def _version() -> str:
    from svpgen import __version__

    return __version__


def _load_config_file(path) -> dict:
    if not path:
        return {}
    with open(path, "rb") as fh:
        return tomllib.load(fh)


def _merged(ctx: click.Context, file_values: dict) -> dict:
    """Resolved parameters: config-file values fill in non-explicit flags."""
    merged = {}
    for name, value in ctx.params.items():
        if name == "config":
            continue
        source = ctx.get_parameter_source(name)
        if (
            name in file_values
            and source is not None
            and source.name in ("DEFAULT", "DEFAULT_MAP")
        ):
            merged[name] = file_values[name]
        else:
            merged[name] = value
    return merged


@click.group()
@click.option("--jobs", type=int, default=None, help="Cap worker threads globally.")
def main(jobs):
    """Diffusion-based augmentation and classification for particle images."""
    if jobs is not None:
        if jobs < 1:
            raise click.BadParameter("--jobs must be >= 1")
        torch.set_num_threads(jobs)


@main.command("make-procedural")
@click.option("--out", "out_dir", required=True, type=click.Path())
@click.option("--n-per-class", type=int, default=10, show_default=True)
@click.option("--seed", type=int, default=0, show_default=True)
@click.option("--classes", default=",".join(imageio.LABELS), show_default=True)
def cmd_make_procedural(out_dir, n_per_class, seed, classes):
    """Write a seeded procedural particle corpus and its manifest."""
    labels = [c.strip() for c in classes.split(",") if c.strip()]
    manifest = imageio.generate_procedural_corpus(labels, n_per_class, seed, out_dir)
    manifest_path = Path(out_dir) / "manifest.csv"
    imageio.save_manifest(manifest, manifest_path)
    for label in labels:
        click.echo(f"{label}: {manifest.count(label)} images")
    click.echo(f"manifest: {manifest_path}")


@main.command("build-dataset")
@click.option("--preset", required=True)
@click.option("--real-pool", required=True, type=click.Path(exists=True))
@click.option("--generated-pool", type=click.Path(exists=True), default=None)
@click.option("--out", "out_dir", type=click.Path(), default=None)
@click.option("--seed", type=int, default=0, show_default=True)
def cmd_build_dataset(preset, real_pool, generated_pool, out_dir, seed):
    """Sample a named training split from real/generated pools."""
    if preset not in imageio.SPLIT_PRESETS:
        raise click.BadParameter(
            f"unknown preset {preset!r}; valid presets: {', '.join(imageio.SPLIT_PRESETS)}"
        )
    spec = imageio.split_preset(preset)
    real = imageio.load_manifest(real_pool)
    generated = imageio.load_manifest(generated_pool) if generated_pool else None
    try:
        manifest = imageio.build_split(spec, real, generated, seed)
    except imageio.PoolShortfallError as exc:
        raise click.ClickException(str(exc)) from exc
    out_dir = Path(out_dir) if out_dir else data_root() / "splits"
    out_path = out_dir / f"{preset}.csv"
    imageio.save_manifest(manifest, out_path)

    click.echo("split,class,real,generated")
    for label in imageio.LABELS:
        click.echo(
            f"{preset},{label},{manifest.count(label, 'real')},{manifest.count(label, 'generated')}"
        )
    click.echo(f"manifest: {out_path}")


def _build_schedule(timesteps, beta_start, beta_end):
    return (
        schedule_mod.linear_schedule(timesteps, beta_start, beta_end),
        {"T": timesteps, "beta_start": beta_start, "beta_end": beta_end},
    )


@main.command("train-diffusion")
@click.option("--config", type=click.Path(exists=True), default=None, help="TOML config file.")
@click.option("--manifest", "manifest_path", required=True, type=click.Path(exists=True))
@click.option("--run-base", type=click.Path(), default=None, help="Parent of the run directory.")
@click.option("--arch", type=click.Choice(sorted(denoiser_mod.CONFIG_PRESETS)), default="default")
@click.option("--epochs", type=int, default=1000, show_default=True)
@click.option("--batch-size", type=int, default=128, show_default=True)
@click.option("--learning-rate", type=float, default=1e-4, show_default=True)
@click.option("--optimizer", type=click.Choice(["adam", "adamw"]), default="adam")
@click.option("--ema-decay", type=float, default=0.995, show_default=True)
@click.option("--no-ema", is_flag=True, default=False)
@click.option("--seed", type=int, default=0, show_default=True)
@click.option("--snapshot-epochs", default="", help="Comma-separated epochs, e.g. 1,5,10.")
@click.option("--timesteps", type=int, default=1000, show_default=True)
@click.option("--beta-start", type=float, default=1e-4, show_default=True)
@click.option("--beta-end", type=float, default=0.02, show_default=True)
@click.option("--loss-reduction", type=click.Choice(["mean", "sum"]), default="mean")
@click.option("--sigma-mode", type=click.Choice(["posterior", "beta"]), default="posterior")
@click.option("--fid-samples", type=int, default=100, show_default=True)
@click.option("--fid-extractor", type=click.Choice(["pixel_stats", "small_cnn"]), default="pixel_stats")
@click.option("--resume", is_flag=True, default=False, help="Continue from the last checkpoint.")
@click.pass_context
def cmd_train_diffusion(ctx, config, manifest_path, run_base, **_):
    """Train one diffusion model on a single-class manifest."""
    p = _merged(ctx, _load_config_file(config))
    snapshot_epochs = tuple(
        int(s) for s in str(p["snapshot_epochs"]).split(",") if str(s).strip()
    )
    run_config = {k: v for k, v in p.items() if k not in ("resume", "run_base")}
    run_dir = resolve_run_dir(p["run_base"], "train-diffusion", run_config, resume=p["resume"])
    record = RunRecord("train-diffusion", run_config)

    sched, sched_params = _build_schedule(p["timesteps"], p["beta_start"], p["beta_end"])
    manifest = imageio.load_manifest(p["manifest_path"])
    cfg = diffusion.TrainConfig(
        epochs=p["epochs"],
        batch_size=p["batch_size"],
        learning_rate=p["learning_rate"],
        optimizer=p["optimizer"],
        ema_decay=None if p["no_ema"] else p["ema_decay"],
        seed=p["seed"],
        snapshot_epochs=snapshot_epochs,
        loss_reduction=p["loss_reduction"],
        sigma_mode=p["sigma_mode"],
        fid_samples=p["fid_samples"],
        fid_extractor=p["fid_extractor"],
    )
    start_epoch = 0
    ema_state = None
    final = run_dir / "checkpoints" / "final.ckpt"
    if p["resume"] and final.exists():
        net, header, ema_state = denoiser_mod.load_checkpoint(final)
        ema_state = ema_state or None
        start_epoch = int(header.get("epoch", 0))
        click.echo(f"resuming from epoch {start_epoch}")
    else:
        net = denoiser_mod.build_denoiser(
            denoiser_mod.CONFIG_PRESETS[p["arch"]](), seed=derive_seed(p["seed"], "init")
        )
    try:
        ckpt, log = diffusion.train(
            net,
            sched,
            manifest,
            cfg,
            run_dir,
            sched_params,
            start_epoch=start_epoch,
            ema_state=ema_state,
        )
    except (diffusion.NonFiniteLossError, ValueError) as exc:
        raise click.ClickException(str(exc)) from exc
    record.add(ckpt, run_dir / "train_log.csv", run_dir / "fid_checkpoints.csv")
    record.write(run_dir)
    click.echo(f"run dir: {run_dir}")
    click.echo(f"checkpoint: {ckpt}")


@main.command("sample")
@click.option("--checkpoint", required=True, type=click.Path(exists=True))
@click.option("--out", "out_dir", required=True, type=click.Path())
@click.option("--n", type=int, default=100, show_default=True)
@click.option("--seed", type=int, default=0, show_default=True)
@click.option("--trajectory", type=int, default=0, help="Snapshot count for a trajectory grid.")
@click.option("--no-ema", is_flag=True, default=False, help="Sample raw instead of EMA weights.")
@click.option("--sigma", type=click.Choice(["posterior", "beta"]), default="posterior")
@click.option("--grid-cols", type=int, default=8, show_default=True)
@click.option(
    "--manifest-label",
    type=click.Choice(imageio.MINORITY_LABELS),
    default=None,
    help="Also write manifest.csv tagging the samples as generated images of this class.",
)
def cmd_sample(checkpoint, out_dir, n, seed, trajectory, no_ema, sigma, grid_cols, manifest_label):
    """Generate images from a checkpoint; optionally record the denoising trajectory."""
    try:
        net, header, ema_state = denoiser_mod.load_checkpoint(checkpoint)
    except denoiser_mod.CheckpointError as exc:
        raise click.ClickException(str(exc)) from exc
    if ema_state and not no_ema:
        net.load_state_dict(ema_state)
    sched_params = header["schedule"]
    sched, _ = _build_schedule(
        int(sched_params["T"]),
        float(sched_params.get("beta_start", schedule_mod.DEFAULT_BETA_START)),
        float(sched_params.get("beta_end", schedule_mod.DEFAULT_BETA_END)),
    )
    snap_steps = diffusion.trajectory_steps(sched.T, trajectory) if trajectory else ()
    images, traj = diffusion.sample(
        net, sched, n=n, snapshot_steps=snap_steps, seed=seed, sigma_mode=sigma
    )

    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    sample_paths = []
    for i in range(n):
        path = out_dir / f"sample_{i:05d}.png"
        imageio.save_png(images.data[i], path)
        sample_paths.append(path)
    imageio.save_png_grid(images, out_dir / "grid.png", ncol=grid_cols)
    if manifest_label:
        manifest = imageio.DatasetManifest(
            tuple(
                imageio.ManifestRecord(str(p), manifest_label, "generated") for p in sample_paths
            ),
            split_name=f"generated-{manifest_label}",
        )
        imageio.save_manifest(manifest, out_dir / "manifest.csv")
    if trajectory:
        rows = min(n, 8)
        tiles = np.concatenate(
            [np.stack([img.data[i] for _, img in traj.snapshots]) for i in range(rows)]
        )
        imageio.save_png_grid(
            imageio.ImageTensor(tiles, "unit"),
            out_dir / "trajectory.png",
            ncol=len(traj.snapshots),
        )
    click.echo(f"wrote {n} samples to {out_dir}")


@main.command("fid")
@click.option("--real-manifest", type=click.Path(exists=True), default=None)
@click.option("--generated-dir", type=click.Path(), default=None)
@click.option("--extractor", default="pixel_stats", show_default=True)
@click.option("--n-gen", type=int, default=100, show_default=True)
@click.option("--features-real", type=click.Path(exists=True), default=None)
@click.option("--features-gen", "features_gen", type=click.Path(exists=True), default=None)
@click.option("--features", "features_gen", type=click.Path(exists=True), default=None,
              help="Alias for --features-gen.")
def cmd_fid(real_manifest, generated_dir, extractor, n_gen, features_real, features_gen):
    """Print Fréchet distance between real and generated sets as CSV."""
    try:
        if extractor in ("imported", "imported_embeddings"):
            if not features_gen or not features_real:
                raise click.ClickException(
                    "imported extractor compares two precomputed feature files; "
                    "pass --features-real FILE and --features-gen FILE"
                )
            real = frechet.load_imported_embeddings(features_real)
            gen = frechet.load_imported_embeddings(features_gen, expected_dim=real.shape[1])
            report = frechet.fid_from_features(real, gen[:n_gen], "imported_embeddings")
        else:
            if not real_manifest or not generated_dir:
                raise click.ClickException("need --real-manifest and --generated-dir")
            ex = frechet.get_extractor(extractor)
            report = frechet.fid_protocol(
                imageio.load_manifest(real_manifest), generated_dir, ex, n_gen=n_gen
            )
    except (ValueError, FileNotFoundError) as exc:
        raise click.ClickException(str(exc)) from exc
    click.echo("extractor,n_real,n_gen,fid")
    click.echo(report.csv_row())


def _load_disjoint(train_path, val_path):
    train = imageio.load_manifest(train_path)
    val = imageio.load_manifest(val_path)
    classify.check_disjoint(train, val)
    return train, val


@main.command("train-classifier")
@click.option("--config", type=click.Path(exists=True), default=None, help="TOML config file.")
@click.option("--train", "train_path", required=True, type=click.Path(exists=True))
@click.option("--val", "val_path", required=True, type=click.Path(exists=True))
@click.option("--run-base", type=click.Path(), default=None)
@click.option("--arch", type=click.Choice(classify.ARCHITECTURES), default="resnet18")
@click.option("--optimizer", type=click.Choice(["adam", "adamw"]), default="adam")
@click.option("--learning-rate", type=float, default=1e-4, show_default=True)
@click.option("--weight-decay", type=float, default=1e-4, show_default=True)
@click.option("--batch-size", type=int, default=32, show_default=True)
@click.option("--epochs", type=int, default=30, show_default=True)
@click.option("--seed", type=int, default=0, show_default=True)
@click.pass_context
def cmd_train_classifier(ctx, config, train_path, val_path, run_base, **_):
    """Train one classifier configuration and write its evaluation report."""
    p = _merged(ctx, _load_config_file(config))
    run_config = {k: v for k, v in p.items() if k != "run_base"}
    run_dir = resolve_run_dir(p["run_base"], "train-classifier", run_config)
    record = RunRecord("train-classifier", run_config)
    try:
        train_m, val_m = _load_disjoint(p["train_path"], p["val_path"])
    except classify.LeakageError as exc:
        raise click.ClickException(str(exc)) from exc
    cfg = classify.ClassifierConfig(
        architecture=p["arch"],
        optimizer=p["optimizer"],
        learning_rate=p["learning_rate"],
        weight_decay=p["weight_decay"],
        batch_size=p["batch_size"],
        epochs=p["epochs"],
        seed=p["seed"],
    )
    net, report = classify.train_classifier(cfg, train_m, val_m)
    (run_dir / "report.json").write_text(report.to_json(), encoding="utf-8")
    (run_dir / "report.csv").write_text(
        ",".join(imageio.LABELS) + ",macro_precision,auprc\n" + report.csv_row() + "\n",
        encoding="utf-8",
    )
    torch.save({"config": asdict(cfg), "state": net.state_dict()}, run_dir / "classifier.pt")
    record.add(run_dir / "report.json", run_dir / "report.csv", run_dir / "classifier.pt")
    record.write(run_dir)
    click.echo(f"run dir: {run_dir}")
    click.echo(",".join(imageio.LABELS) + ",macro_precision,auprc")
    click.echo(report.csv_row())


@main.command("grid")
@click.option("--train", "train_path", required=True, type=click.Path(exists=True))
@click.option("--val", "val_path", required=True, type=click.Path(exists=True))
@click.option("--run-base", type=click.Path(), default=None)
@click.option("--arch", type=click.Choice(classify.ARCHITECTURES), default="resnet18")
@click.option("--grid", "grid_name", type=click.Choice(sorted(GRIDS)), default="paper")
@click.option("--epochs", type=int, default=30, show_default=True)
@click.option("--seed", type=int, default=0, show_default=True)
@click.option("--enumerate-only", is_flag=True, default=False,
              help="List the configurations without training.")
def cmd_grid(train_path, val_path, run_base, arch, grid_name, epochs, seed, enumerate_only):
    """Run (or enumerate) the full optimizer/lr/wd/batch grid."""
    grid = GRIDS[grid_name]
    if enumerate_only:
        click.echo("architecture,optimizer,learning_rate,weight_decay,batch_size")
        from itertools import product

        for opt, lr, wd, batch in product(
            grid["optimizers"], grid["learning_rates"], grid["weight_decays"], grid["batch_sizes"]
        ):
            click.echo(f"{arch},{opt},{lr},{wd},{batch}")
        click.echo(f"total,{classify.grid_size(grid)}")
        return
    run_config = {
        "train": str(train_path),
        "val": str(val_path),
        "arch": arch,
        "grid": grid_name,
        "epochs": epochs,
        "seed": seed,
    }
    run_dir = resolve_run_dir(run_base, "grid", run_config)
    record = RunRecord("grid", run_config)
    try:
        train_m, val_m = _load_disjoint(train_path, val_path)
    except classify.LeakageError as exc:
        raise click.ClickException(str(exc)) from exc
    reports = classify.grid_search(
        arch,
        grid["optimizers"],
        grid["learning_rates"],
        grid["weight_decays"],
        grid["batch_sizes"],
        train_m,
        val_m,
        epochs=epochs,
        seed=seed,
    )
    classify.write_grid_csv(reports, run_dir / "grid_results.csv")
    best = reports[0]
    (run_dir / "best_report.json").write_text(best.to_json(), encoding="utf-8")
    record.add(run_dir / "grid_results.csv", run_dir / "best_report.json")
    record.write(run_dir)
    click.echo(f"completed {len(reports)} runs; grid results: {run_dir / 'grid_results.csv'}")
    click.echo(
        f"best: {best.config.optimizer} lr={best.config.learning_rate} "
        f"wd={best.config.weight_decay} batch={best.config.batch_size} "
        f"macro={best.macro_precision:.4f} auprc={best.auprc:.4f}"
    )


def _load_classifier(path):
    payload = torch.load(path, weights_only=True)
    cfg = classify.ClassifierConfig(**payload["config"])
    net = classify.build_classifier(cfg.architecture, seed=cfg.seed)
    net.load_state_dict(payload["state"])
    return net, cfg


@main.command("eval")
@click.option("--classifier", "classifier_path", required=True, type=click.Path(exists=True))
@click.option("--manifest", "manifest_path", required=True, type=click.Path(exists=True))
@click.option("--out", "out_dir", type=click.Path(), default=None)
def cmd_eval(classifier_path, manifest_path, out_dir):
    """Evaluate a saved classifier on a manifest and print the report row."""
    net, cfg = _load_classifier(classifier_path)
    manifest = imageio.load_manifest(manifest_path)
    records = classify.score_records(net, manifest)
    report = classify.report_from_records(records, cfg)
    header = ",".join(imageio.LABELS) + ",macro_precision,auprc"
    if out_dir:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        (out_dir / "report.json").write_text(report.to_json(), encoding="utf-8")
        (out_dir / "report.csv").write_text(header + "\n" + report.csv_row() + "\n", encoding="utf-8")
    click.echo(header)
    click.echo(report.csv_row())


@main.command("export-misclassified")
@click.option("--classifier", "classifier_path", required=True, type=click.Path(exists=True))
@click.option("--manifest", "manifest_path", required=True, type=click.Path(exists=True))
@click.option("--out", "out_dir", required=True, type=click.Path())
@click.option("--top-k", type=int, default=5, show_default=True)
def cmd_export_misclassified(classifier_path, manifest_path, out_dir, top_k):
    """Export the most confident misclassifications with a CSV index."""
    net, _ = _load_classifier(classifier_path)
    manifest = imageio.load_manifest(manifest_path)
    records = classify.score_records(net, manifest)
    written = classify.export_misclassified(records, out_dir, top_k=top_k)
    click.echo(f"exported {len(written)} images to {out_dir}")


if __name__ == "__main__":
    sys.exit(main())
