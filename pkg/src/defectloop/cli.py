"""Command-line interface for the full pipeline.

Every subcommand works against one data root (``--data-root`` or the
``DEFECTLOOP_DATA_ROOT`` environment variable).  The typical desk flow:

    defectloop synth --data-root data            # or: ingest + preprocess
    defectloop grid --data-root data
    defectloop report --data-root data
    defectloop serve --data-root data --port 8080
"""

from __future__ import annotations

import json
import re
import sys
from pathlib import Path
from typing import Optional

import click
import numpy as np
from PIL import Image

from .annotations import DefectClass, ImageRecord, ImageStatus
from .augment import AugmentationPlan, expand_dataset
from .backend import ModelRegistry, ReferenceClassicalBackend, TrainingHyperparams
from .errors import DefectLoopError
from .ingest import GrowthRunManifest, filter_frames, resample_sequence
from .metrics import EvalConfig, evaluate
from .orchestrator import (
    GridConfig,
    PipelineConfig,
    StoreBackedSamples,
    materialize_entry,
    run_experiment_grid,
)
from .preprocess import (
    DatasetManifest,
    ManifestEntry,
    ORIGINAL_LINEAGE,
    PreprocessConfig,
    Split,
    build_split_map,
    preprocess_image,
    split_dataset,
)
from .selection import gray_histogram_features, score_uncertainty, select_batch
from .storage import DataStore, resolve_data_root
from .synthetic import SyntheticCorpusConfig, generate_corpus


def _store(data_root: Optional[str]) -> DataStore:
    return DataStore(resolve_data_root(data_root))


def _parse_classes(raw: str) -> tuple[DefectClass, ...]:
    return tuple(DefectClass(token.strip()) for token in raw.split(",") if token.strip())


@click.group()
def main() -> None:
    """Human-in-the-loop defect annotation and training pipeline."""


@main.command()
@click.option("--run-dir", type=click.Path(exists=True, file_okay=False), required=True)
@click.option("--window-s", default=900, show_default=True, help="Resample window in seconds.")
@click.option("--data-root", default=None, help="Data root (default: $DEFECTLOOP_DATA_ROOT).")
@click.option("--blackout-max", default=0.02, show_default=True)
@click.option("--noise-max", default=0.01, show_default=True)
def ingest(run_dir: str, window_s: int, data_root: Optional[str], blackout_max: float, noise_max: float) -> None:
    """Register a growth run's PNG frames, resample, and filter.

    Frame timestamps come from a trailing integer in the file name
    (seconds); files without one are ordered by modification time.
    """
    store = _store(data_root)
    run_path = Path(run_dir)
    growth_run_id = run_path.name
    records = []
    for path in sorted(run_path.glob("*.png")):
        match = re.search(r"(\d+)$", path.stem)
        captured_at = int(match.group(1)) if match else int(path.stat().st_mtime)
        with Image.open(path) as img:
            width, height = img.size
        records.append(
            ImageRecord(
                image_id=f"{growth_run_id}-{path.stem}",
                growth_run_id=growth_run_id,
                captured_at=captured_at,
                width=width,
                height=height,
                storage_path=str(path),
                status=ImageStatus.RAW,
            )
        )
    records.sort(key=lambda r: (r.captured_at, r.image_id))
    kept = resample_sequence(records, window_s)
    span_hours = (
        (records[-1].captured_at - records[0].captured_at) / 3600.0 if len(records) > 1 else 0.0
    )

    def loader(record: ImageRecord) -> np.ndarray:
        return np.asarray(Image.open(record.storage_path))

    kept, rejected = filter_frames(
        kept, blackout_luminance_max=blackout_max, noise_variance_max=noise_max, loader=loader
    )
    manifest = GrowthRunManifest(
        growth_run_id=growth_run_id,
        capture_interval_seconds=60,
        duration_hours=span_hours,
        frames=tuple(sorted(kept + rejected, key=lambda r: (r.captured_at, r.image_id))),
    )
    store.save_run_manifest(manifest)
    click.echo(
        f"run {growth_run_id}: {len(records)} frames, {len(kept)} kept, "
        f"{len(rejected)} rejected -> {store.run_manifest_path(growth_run_id)}"
    )


@main.command()
@click.option("--data-root", default=None)
@click.option("--resolution", "resolutions", default="256,512", show_default=True)
@click.option("--pool", "pool_size", default=300, show_default=True)
@click.option("--split", "split_ratio", default=0.9, show_default=True)
@click.option("--seed", default=0, show_default=True)
@click.option("--denoise/--no-denoise", default=True, show_default=True)
def preprocess(
    data_root: Optional[str],
    resolutions: str,
    pool_size: int,
    split_ratio: float,
    seed: int,
    denoise: bool,
) -> None:
    """Crop/resize/normalize filtered frames and write the dataset manifest."""
    store = _store(data_root)
    config = PreprocessConfig(
        target_resolutions=tuple(int(r) for r in resolutions.split(",")),
        pool_size=pool_size,
        split_ratio=split_ratio,
        split_seed=seed,
        denoise=denoise,
    )
    runs_dir = store.root / "runs"
    frames: list[ImageRecord] = []
    for path in sorted(runs_dir.glob("*.json")):
        manifest = GrowthRunManifest.from_json_dict(json.loads(path.read_text()))
        frames.extend(f for f in manifest.frames if f.status is ImageStatus.FILTERED)
    if not frames:
        raise click.ClickException("no filtered frames; run `defectloop ingest` first")
    frames = frames[: config.pool_size]

    entries: list[ManifestEntry] = []
    for frame in frames:
        image = np.asarray(Image.open(frame.storage_path))
        side = min(frame.width, frame.height)
        crop = ((frame.width - side) // 2, (frame.height - side) // 2, side, side)
        for resolution in config.target_resolutions:
            processed = preprocess_image(image, crop, resolution, denoise=config.denoise)
            store.save_image(frame.image_id, resolution, processed)
            entries.append(
                ManifestEntry(
                    image_id=frame.image_id,
                    resolution=resolution,
                    crop_region=crop,
                    lineage=ORIGINAL_LINEAGE,
                )
            )
    train, test = split_dataset([f.image_id for f in frames], config.split_ratio, seed)
    manifest = DatasetManifest(
        dataset_id=store.root.name,
        entries=tuple(entries),
        split=build_split_map(train, test),
        split_seed=seed,
    )
    store.save_manifest(manifest)
    click.echo(
        f"preprocessed {len(frames)} images at {list(config.target_resolutions)} "
        f"({len(train)} train / {len(test)} test) -> {store.manifest_path}"
    )


@main.command()
@click.option("--data-root", default=None)
@click.option("--images", "n_images", default=60, show_default=True)
@click.option("--resolution", "resolutions", default="256,512", show_default=True)
@click.option("--classes", default="polycrystalline,center", show_default=True)
@click.option("--seed", default=7, show_default=True)
def synth(
    data_root: Optional[str], n_images: int, resolutions: str, classes: str, seed: int
) -> None:
    """Generate the synthetic demo corpus with exact ground truth."""
    store = _store(data_root)
    config = SyntheticCorpusConfig(
        n_images=n_images,
        resolutions=tuple(int(r) for r in resolutions.split(",")),
        classes=_parse_classes(classes),
        seed=seed,
    )
    manifest = generate_corpus(store, config)
    click.echo(
        f"synthetic corpus: {n_images} images at {list(config.resolutions)} "
        f"-> {store.manifest_path} ({len(manifest.image_ids(Split.TRAIN))} train)"
    )


@main.command()
@click.option("--data-root", default=None)
@click.option("--pool", "pool_manifest", default=None,
              help="Manifest file to draw the pool from (default: data root's).")
@click.option("--model", "model_id", default=None, help="Model to score uncertainty with.")
@click.option("--resolution", default=512, show_default=True)
@click.option("--k", default=100, show_default=True)
@click.option("--out", "out_path", default="batch.json", show_default=True)
@click.option("--classes", default="polycrystalline,center", show_default=True)
def select(
    data_root: Optional[str],
    pool_manifest: Optional[str],
    model_id: Optional[str],
    resolution: int,
    k: int,
    out_path: str,
    classes: str,
) -> None:
    """Pick the next images to label, most uncertain first."""
    store = _store(data_root)
    manifest = (
        DatasetManifest.load(Path(pool_manifest)) if pool_manifest else store.load_manifest()
    )
    pool = manifest.image_ids(Split.TRAIN)
    class_list = _parse_classes(classes)
    scores: dict[str, float] = {}
    features: dict[str, np.ndarray] = {}
    if model_id:
        backend = ReferenceClassicalBackend(ModelRegistry(store.models_root), classes=class_list)
        handle = backend.registry.load_handle(model_id)
        for image_id in pool:
            image = store.load_image(image_id, resolution)
            prediction = backend.predict(handle, image_id, image)
            scores[image_id] = score_uncertainty(prediction, class_list).score
            features[image_id] = gray_histogram_features(image)
    else:
        for image_id in pool:
            scores[image_id] = 0.5  # no model yet: coverage-only selection
            features[image_id] = gray_histogram_features(store.load_image(image_id, resolution))
    chosen = select_batch(pool, scores, features, k)
    Path(out_path).write_text(
        json.dumps({"image_ids": chosen, "scores": {i: scores[i] for i in chosen}}, indent=2)
    )
    click.echo(f"selected {len(chosen)} of {len(pool)} -> {out_path}")


@main.command()
@click.option("--data-root", default=None)
@click.option("--manifest", "manifest_path", default=None,
              help="Manifest file to expand (default: data root's).")
@click.option("--rate", type=click.Choice(["2", "5", "10"]), required=True)
@click.option("--seed", default=0, show_default=True)
@click.option("--resolution", default=512, show_default=True)
@click.option("--materialize/--no-materialize", default=False, show_default=True,
              help="Also render augmented pixels now instead of on demand.")
def augment(
    data_root: Optional[str],
    manifest_path: Optional[str],
    rate: str,
    seed: int,
    resolution: int,
    materialize: bool,
) -> None:
    """Expand the train split by the given rate; log any dropped boxes."""
    store = _store(data_root)
    manifest = (
        DatasetManifest.load(Path(manifest_path)) if manifest_path else store.load_manifest()
    )
    originals = [
        e
        for e in manifest.entries_at(resolution)
        if e.is_original and manifest.split[e.image_id] is Split.TRAIN
    ]
    plan = AugmentationPlan(rate=int(rate), seed=seed)
    expanded = expand_dataset(originals, plan)
    # replace this resolution's expansion wholesale; test originals stay
    others = [
        e for e in manifest.entries
        if e.resolution != resolution
        or (e.is_original and manifest.split[e.image_id] is Split.TEST)
    ]
    new_manifest = manifest.with_entries(tuple(others) + tuple(expanded))
    if manifest_path:
        new_manifest.save(Path(manifest_path))
    else:
        store.save_manifest(new_manifest)
    drop_log: list[dict] = []
    if materialize:
        for entry in expanded:
            materialize_entry(store, entry, drop_log)
    store.save_report_json("transform_log.json", drop_log)
    click.echo(
        f"expanded {len(originals)} originals x{rate} -> {len(expanded)} entries "
        f"({len(drop_log)} boxes dropped)"
    )


@main.command()
@click.option("--data-root", default=None)
@click.option("--resolution", default=512, show_default=True)
@click.option("--classes", default="polycrystalline,center", show_default=True)
@click.option("--model-id", default="reference-classical", show_default=True)
@click.option("--epochs", default=35, show_default=True)
@click.option("--batch-size", default=20, show_default=True)
@click.option("--learning-rate", default=1e-4, show_default=True)
@click.option("--loss", default="sparse_categorical_cross_entropy", show_default=True)
@click.option("--source-key", default="truth", show_default=True,
              help="Annotation source to train on (truth or consensus).")
def train(
    data_root: Optional[str],
    resolution: int,
    classes: str,
    model_id: str,
    epochs: int,
    batch_size: int,
    learning_rate: float,
    loss: str,
    source_key: str,
) -> None:
    """Train the reference backend on the train split."""
    from .backend.base import LossKind

    store = _store(data_root)
    manifest = store.load_manifest()
    hyperparams = TrainingHyperparams(
        epochs=epochs, batch_size=batch_size, learning_rate=learning_rate, loss=LossKind(loss)
    )
    class_list = _parse_classes(classes)
    train_entries = [
        e
        for e in manifest.entries_at(resolution)
        if manifest.split_of(e) is Split.TRAIN
    ]
    for entry in train_entries:
        materialize_entry(store, entry)
    backend = ReferenceClassicalBackend(ModelRegistry(store.models_root), classes=class_list)
    samples = StoreBackedSamples(store, [e.image_id for e in train_entries], resolution, source_key)
    handle = backend.train(samples, hyperparams, model_id=model_id,
                           training_manifest_id=manifest.dataset_id)
    click.echo(f"trained {handle.model_id} v{handle.version} on {len(samples)} samples")


@main.command(name="evaluate")
@click.option("--data-root", default=None)
@click.option("--model-id", default="reference-classical", show_default=True)
@click.option("--resolution", default=512, show_default=True)
@click.option("--classes", default="polycrystalline,center", show_default=True)
@click.option("--iou", default=0.5, show_default=True)
def evaluate_cmd(
    data_root: Optional[str], model_id: str, resolution: int, classes: str, iou: float
) -> None:
    """Evaluate a trained model on the held-out test split."""
    store = _store(data_root)
    manifest = store.load_manifest()
    class_list = _parse_classes(classes)
    backend = ReferenceClassicalBackend(ModelRegistry(store.models_root), classes=class_list)
    handle = backend.registry.load_handle(model_id)
    test_ids = manifest.image_ids(Split.TEST)
    predictions = {
        i: backend.predict(handle, i, store.load_image(i, resolution)) for i in test_ids
    }
    truth = {i: store.load_truth(i, resolution) for i in test_ids}
    report = evaluate(
        predictions,
        truth,
        EvalConfig(iou_threshold=iou, classes=class_list),
        dataset_id=manifest.dataset_id,
        resolution=resolution,
        dataset_size=len(test_ids),
    )
    store.save_report_json("evaluation.json", report.to_json_dict())
    click.echo(json.dumps(report.to_json_dict(), indent=2))


@main.command()
@click.option("--data-root", default=None)
@click.option("--resolutions", default="256,512", show_default=True)
@click.option("--rates", default="2,5,10", show_default=True)
@click.option("--seed", default=0, show_default=True)
@click.option("--classes", default="polycrystalline,center", show_default=True)
def grid(
    data_root: Optional[str], resolutions: str, rates: str, seed: int, classes: str
) -> None:
    """Run the resolution x dataset-size experiment grid."""
    store = _store(data_root)
    manifest = store.load_manifest()
    class_list = _parse_classes(classes)
    config = GridConfig(
        resolutions=tuple(int(r) for r in resolutions.split(",")),
        rates=tuple(int(r) for r in rates.split(",")),
        seed=seed,
        classes=class_list,
    )
    registry = ModelRegistry(store.models_root)
    grid_result = run_experiment_grid(
        store,
        lambda: ReferenceClassicalBackend(registry, classes=class_list),
        manifest,
        config,
    )
    click.echo(grid_result.to_csv(), nl=False)
    click.echo(f"-> {store.reports_root / 'grid_report.csv'}")


@main.command()
@click.option("--data-root", default=None)
@click.option("--grid-csv", default=None, help="Grid CSV (default: reports/grid_report.csv).")
@click.option("--out-dir", default=None, help="Figure directory (default: reports/figures).")
def report(data_root: Optional[str], grid_csv: Optional[str], out_dir: Optional[str]) -> None:
    """Render figures for a grid report next to the CSV."""
    from .report import render_grid_figures

    store = _store(data_root)
    csv_path = Path(grid_csv) if grid_csv else store.reports_root / "grid_report.csv"
    if not csv_path.exists():
        raise click.ClickException(f"{csv_path} not found; run `defectloop grid` first")
    figures_dir = Path(out_dir) if out_dir else store.reports_root / "figures"
    written = render_grid_figures(csv_path, figures_dir)
    click.echo(csv_path.read_text(encoding="utf-8"), nl=False)
    for path in written:
        click.echo(f"figure -> {path}")


@main.command()
@click.option("--port", default=8080, show_default=True)
@click.option("--host", default="127.0.0.1", show_default=True)
@click.option("--data-root", default=None)
@click.option("--resolution", default=512, show_default=True)
@click.option("--labelers-per-image", default=1, show_default=True)
def serve(
    port: int, host: str, data_root: Optional[str], resolution: int, labelers_per_image: int
) -> None:
    """Serve the labeling API (and the UI bundle when built)."""
    import uvicorn

    from .service import ServiceConfig, create_app

    store = _store(data_root)
    app = create_app(
        store,
        ServiceConfig(resolution=resolution, labelers_per_image=labelers_per_image),
    )
    uvicorn.run(app, host=host, port=port)


if __name__ == "__main__":
    try:
        main()
    except DefectLoopError as exc:
        click.echo(f"error: {exc}", err=True)
        sys.exit(1)
