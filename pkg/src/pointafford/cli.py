"""Command line interface: dataset generation, text augmentation, training,
evaluation (with report + figures), single-cloud inference and PLY export.
"""

from __future__ import annotations

import logging
from pathlib import Path

import click
import numpy as np

from . import data as data_io
from .checkpoint import load_checkpoint
from .cloud import PointCloud, load_points
from .instructions import (
    ServiceConfig,
    augment_via_service,
    build_augmentation_prompt,
    rule_paraphrase,
)
from .metrics import evaluate_model, prompt_ablation
from .train import SplitSpec, TrainConfig, infer as run_infer, make_splits, model_from_checkpoint, train as run_train
from .visualize import export_vis as write_ply, render_cloud_figure


@click.group()
@click.option("-v", "--verbose", is_flag=True, help="Enable debug logging.")
def main(verbose: bool):
    """Point cloud affordance pipeline."""
    logging.basicConfig(
        level=logging.DEBUG if verbose else logging.INFO,
        format="%(asctime)s %(name)s %(levelname)s %(message)s",
    )


@main.command("gen-data")
@click.option("--out", "out_dir", type=click.Path(), required=True)
@click.option("--objects", default=32, show_default=True)
@click.option("--families", default="chair,mug,knife,bottle", show_default=True)
@click.option("--seed", default=0, show_default=True)
@click.option("--points", "n_points", default=512, show_default=True)
@click.option("--partial-fraction", default=0.25, show_default=True)
def gen_data(out_dir, objects, families, seed, n_points, partial_fraction):
    """Generate the synthetic affordance dataset."""
    records, manifest = data_io.generate_synthetic_dataset(
        out_dir,
        n_objects=objects,
        families=tuple(families.split(",")),
        seed=seed,
        n_points=n_points,
        partial_fraction=partial_fraction,
    )
    click.echo(f"wrote {len(records)} records over {len(manifest.categories)} categories to {out_dir}")


@main.command()
@click.option("--data", "data_dir", type=click.Path(exists=True), required=True)
@click.option("--service/--rule", default=False, help="Use the chat endpoint instead of rule paraphrases.")
@click.option("--variants", default=3, show_default=True)
@click.option("--seed", default=0, show_default=True)
def augment(data_dir, service, variants, seed):
    """Add paraphrased instruction variants for every (object, affordance) pair."""
    root = Path(data_dir)
    manifest, records = data_io.load_dataset(root)
    vocab = manifest.vocabulary()
    seen = {(r.category, r.affordance): r for r in records if r.source == "synthetic"}
    new_records = list(records)
    warnings_total = 0
    for (category, affordance), base in sorted(seen.items()):
        label = vocab.get(affordance)
        if service:
            prompt = build_augmentation_prompt(category, label, variants)
            result = augment_via_service(prompt, ServiceConfig.from_env(), category, label)
            variants_list, warnings_total = result.records, warnings_total + result.parse_warnings
        else:
            variants_list = rule_paraphrase(category, label, variants, seed=seed)
        for qa in variants_list:
            new_records.append(
                data_io.DatasetRecord(
                    instruct=qa.instruct_text,
                    input=base.input,
                    answer=qa.answer_text,
                    affordance_path=base.affordance_path,
                    affordance=affordance,
                    category=category,
                    shape_kind=base.shape_kind,
                    source=qa.source,
                )
            )
    data_io.write_records(new_records, root)
    manifest.record_count = len(new_records)
    data_io.save_manifest(manifest, root)
    click.echo(f"records: {len(records)} -> {len(new_records)} (parse warnings: {warnings_total})")


def _config_from_options(config_path, overrides: dict) -> TrainConfig:
    config = TrainConfig.from_yaml(config_path) if config_path else TrainConfig()
    encoder_fields = set(config.encoder.__dataclass_fields__)
    for key, value in overrides.items():
        if value is None:
            continue
        if key in encoder_fields:
            setattr(config.encoder, key, value)
        else:
            setattr(config, key, value)
    return config


def _split_records(root: Path, split: str, shape: str, seed: int):
    manifest, records = data_io.load_dataset(root)
    spec = SplitSpec(
        mode=split,
        held_out_categories=manifest.default_held_out if split == "unseen" else [],
        shuffle_seed=seed,
    )
    train_recs, val_recs, test_recs = make_splits(records, spec)
    if shape != "both":
        test_recs = [r for r in test_recs if r.shape_kind == shape]
    return manifest, train_recs, val_recs, test_recs


@main.command("train")
@click.option("--config", "config_path", type=click.Path(exists=True), default=None)
@click.option("--data", "data_dir", type=click.Path(exists=True), required=True)
@click.option("--split", type=click.Choice(["seen", "unseen"]), default="seen", show_default=True)
@click.option("--shape", type=click.Choice(["full", "partial", "both"]), default="both", show_default=True)
@click.option("--out", "out_path", type=click.Path(), required=True)
@click.option("--split-seed", default=0, show_default=True)
# TrainConfig overrides
@click.option("--seed", type=int, default=None)
@click.option("--lr", type=float, default=None)
@click.option("--batch-size", type=int, default=None)
@click.option("--steps-align", type=int, default=None)
@click.option("--steps-label", type=int, default=None)
@click.option("--steps-affordance", type=int, default=None)
@click.option("--joint/--phased", "joint", default=None)
@click.option("--steps-joint", type=int, default=None)
@click.option("--lambda-dice", type=float, default=None)
@click.option("--grad-clip", type=float, default=None)
@click.option("--encoder-kind", type=click.Choice(["geometric", "baseline"]), default=None)
@click.option("--d-q", type=int, default=None)
@click.option("--d-t", type=int, default=None)
@click.option("--d-a", type=int, default=None)
# EncoderConfig overrides
@click.option("--model-dim", type=int, default=None)
@click.option("--n-layers", type=int, default=None)
@click.option("--n-heads", type=int, default=None)
@click.option("--n-groups", type=int, default=None)
@click.option("--group-size", type=int, default=None)
@click.option("--propagation-knn", type=int, default=None)
@click.option("--out-dim", type=int, default=None)
def train_cmd(config_path, data_dir, split, shape, out_path, split_seed, **overrides):
    """Train on the chosen split and save the checkpoint."""
    from .checkpoint import save_checkpoint

    config = _config_from_options(config_path, overrides)
    root = Path(data_dir)
    manifest, train_recs, _, _ = _split_records(root, split, "both", split_seed)
    if shape != "both":
        train_recs = [r for r in train_recs if r.shape_kind == shape]
    click.echo(f"training on {len(train_recs)} records ({split} split, shape={shape})")
    _, ckpt = run_train(config, train_recs, manifest, root)
    save_checkpoint(ckpt, out_path)
    click.echo(f"checkpoint written to {out_path} (digest {ckpt.digest[:12]})")


@main.command("eval")
@click.option("--checkpoint", "ckpt_path", type=click.Path(exists=True), required=True)
@click.option("--data", "data_dir", type=click.Path(exists=True), required=True)
@click.option("--split", type=click.Choice(["seen", "unseen"]), default="seen", show_default=True)
@click.option("--shape", type=click.Choice(["full", "partial", "both"]), default="both", show_default=True)
@click.option("--split-seed", default=0, show_default=True)
@click.option("--gt-threshold", default=0.5, show_default=True)
@click.option("--prompt-variant", type=click.Choice(["none", "hi", "action", "object_action", "full_question", "augmented"]), default="none", show_default=True)
@click.option("--out", "out_dir", type=click.Path(), required=True)
def eval_cmd(ckpt_path, data_dir, split, shape, split_seed, gt_threshold, prompt_variant, out_dir):
    """Evaluate a checkpoint on the test split; writes the report and figures."""
    from .report import write_report

    root = Path(data_dir)
    ckpt = load_checkpoint(ckpt_path)
    model, _ = model_from_checkpoint(ckpt)
    manifest, _, _, test_recs = _split_records(root, split, shape, split_seed)
    if not test_recs:
        raise click.ClickException("test split is empty for the requested shape")
    metadata = {
        "split": split,
        "shape": shape,
        "checkpoint_digest": ckpt.digest,
        "gt_threshold": gt_threshold,
        "n_records": len(test_recs),
    }
    if prompt_variant == "none":
        report = evaluate_model(model, test_recs, root, gt_threshold=gt_threshold, metadata=metadata)
    else:
        report = prompt_ablation(model, test_recs, root, prompt_variant, manifest, gt_threshold=gt_threshold)
        report.metadata.update(metadata)
    paths = write_report(report, out_dir)
    click.echo(Path(paths["table"]).read_text(encoding="utf-8"))
    click.echo(f"report files: {', '.join(str(p) for p in paths.values())}")


@main.command("infer")
@click.option("--checkpoint", "ckpt_path", type=click.Path(exists=True), required=True)
@click.option("--cloud", "cloud_path", type=click.Path(exists=True), required=True)
@click.option("--instruct", required=True)
@click.option("--out", "out_path", type=click.Path(), required=True)
@click.option("--figure", type=click.Path(), default=None, help="Optional PNG scatter of the result.")
def infer_cmd(ckpt_path, cloud_path, instruct, out_path, figure):
    """Predict an affordance map for one cloud and write a colored PLY."""
    ckpt = load_checkpoint(ckpt_path)
    points = load_points(cloud_path)
    pc = PointCloud(points)
    scores, label = run_infer(ckpt, pc, instruct)
    write_ply(pc.points, np.clip(scores, 0.0, 1.0), out_path)
    if figure:
        render_cloud_figure(pc.points, scores, figure, title=f"predicted: {label.name}")
    click.echo(f"predicted label: {label.name} (id {label.id}); map written to {out_path}")


@main.command("export-vis")
@click.option("--cloud", "cloud_path", type=click.Path(exists=True), required=True)
@click.option("--scores", "scores_path", type=click.Path(exists=True), required=True)
@click.option("--out", "out_path", type=click.Path(), required=True)
@click.option("--figure", type=click.Path(), default=None)
def export_vis_cmd(cloud_path, scores_path, out_path, figure):
    """Render a stored score vector over a cloud as a colored PLY (and PNG)."""
    points = load_points(cloud_path)
    scores = data_io.load_scores(scores_path)
    write_ply(points, scores, out_path)
    if figure:
        render_cloud_figure(points, scores, figure)
    click.echo(f"wrote {out_path}")


if __name__ == "__main__":
    main()
