"""Training harness: dataset splitting, the three-objective schedule (with a
joint mode), checkpointing, and the inference entry point.
"""

from __future__ import annotations

import logging
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
import yaml

from .checkpoint import Checkpoint, load_checkpoint, save_checkpoint
from .cloud import PointCloud, load_points
from .data import DatasetManifest, DatasetRecord, _allocate_counts, load_scores
from .encoder import EncoderConfig, EncoderNumericsError
from .instructions import AffordanceLabel
from .losses import affordance_loss, contrastive_batch_average, query_loss
from .model import AffordanceModel, group_cloud

logger = logging.getLogger(__name__)

PHASE_ALIGN = "align"
PHASE_LABEL = "label"
PHASE_AFFORDANCE = "affordance"
PHASE_JOINT = "joint"


class TrainingDivergedError(RuntimeError):
    """A non-finite loss appeared; carries the phase and step."""


@dataclass
class SplitSpec:
    mode: str = "seen"
    ratios: tuple[int, int, int] = (8, 1, 1)
    held_out_categories: list[str] = field(default_factory=list)
    shuffle_seed: int = 0

    def __post_init__(self):
        if self.mode not in ("seen", "unseen"):
            raise ValueError("split mode must be 'seen' or 'unseen'")


def _partition(items: list, ratios: tuple[int, int, int]) -> tuple[list, list, list]:
    counts = _allocate_counts(ratios, len(items))
    train_end = int(counts[0])
    val_end = train_end + int(counts[1])
    return items[:train_end], items[train_end:val_end], items[val_end:]


def make_splits(
    records: list[DatasetRecord], spec: SplitSpec
) -> tuple[list[DatasetRecord], list[DatasetRecord], list[DatasetRecord]]:
    """Seeded shuffle, then an 8:1:1 partition; unseen mode reserves whole
    categories for the test set before splitting the remainder."""
    if not records:
        raise ValueError("no records to split")
    rng = np.random.default_rng(spec.shuffle_seed)
    if spec.mode == "seen":
        shuffled = [records[i] for i in rng.permutation(len(records))]
        return _partition(shuffled, spec.ratios)

    present = {rec.category for rec in records}
    for category in spec.held_out_categories:
        if category not in present:
            raise ValueError(f"held-out category {category!r} absent from the data")
    held = [rec for rec in records if rec.category in spec.held_out_categories]
    rest = [rec for rec in records if rec.category not in spec.held_out_categories]
    shuffled = [rest[i] for i in rng.permutation(len(rest))]
    train, val, test_share = _partition(shuffled, spec.ratios)
    return train, val, held + test_share


@dataclass
class TrainConfig:
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    encoder_kind: str = "geometric"
    d_q: int = 32
    d_t: int = 64
    d_a: int = 64
    text_vocab_size: int = 2048
    decoder_hidden: int | None = None
    lr: float = 1e-3
    batch_size: int = 8
    steps_align: int = 200
    steps_label: int = 200
    steps_affordance: int = 600
    joint: bool = False
    steps_joint: int = 1000
    lambda_dice: float = 1.0
    grad_clip: float = 1.0
    seed: int = 0
    freeze_text_in_affordance_phase: bool = True
    precision: str = "float32"

    def __post_init__(self):
        if self.lambda_dice < 0:
            raise ValueError("lambda_dice must be >= 0")
        for name in ("steps_align", "steps_label", "steps_affordance", "steps_joint"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0")
        if self.precision not in ("float32", "float64"):
            raise ValueError("precision must be 'float32' or 'float64'")

    def to_dict(self) -> dict:
        out = {k: v for k, v in self.__dict__.items() if k != "encoder"}
        out["encoder"] = self.encoder.to_dict()
        return out

    @classmethod
    def from_dict(cls, data: dict) -> "TrainConfig":
        data = dict(data)
        enc = data.pop("encoder", {})
        known = {f for f in cls.__dataclass_fields__ if f != "encoder"}
        unknown = set(data) - known
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        return cls(encoder=EncoderConfig(**enc), **data)

    @classmethod
    def from_yaml(cls, path: str | Path) -> "TrainConfig":
        with open(path, "r", encoding="utf-8") as f:
            data = yaml.safe_load(f) or {}
        return cls.from_dict(data)


def build_model(config: TrainConfig) -> AffordanceModel:
    """Seeded model construction so (seed, config) determines the init."""
    torch.manual_seed(config.seed)
    model = AffordanceModel(
        encoder_config=config.encoder,
        d_q=config.d_q,
        d_t=config.d_t,
        d_a=config.d_a,
        encoder_kind=config.encoder_kind,
        text_vocab_size=config.text_vocab_size,
        decoder_hidden=config.decoder_hidden,
    )
    if config.precision == "float64":
        model.double()
    return model


class TrainingData:
    """Preloaded tensors for a record list: clouds are grouped once and
    shared between the records that reference them."""

    def __init__(self, records: list[DatasetRecord], root: str | Path, config: TrainConfig, vocab):
        if not records:
            raise ValueError("training needs at least one record")
        root = Path(root)
        self.records = records
        cloud_ids: dict[str, int] = {}
        points, members, centers, neighbors = [], [], [], []
        for rec in records:
            if rec.input not in cloud_ids:
                pts = load_points(root / rec.input).astype(np.float32)
                m, c, nb = group_cloud(PointCloud(pts), config.encoder)
                cloud_ids[rec.input] = len(points)
                points.append(pts)
                members.append(m)
                centers.append(c)
                neighbors.append(nb)
        dtype = torch.float64 if config.precision == "float64" else torch.float32
        self.points = torch.from_numpy(np.stack(points)).to(dtype)
        self.members = torch.from_numpy(np.stack(members))
        self.centers = torch.from_numpy(np.stack(centers))
        self.neighbors = torch.from_numpy(np.stack(neighbors))
        self.cloud_index = torch.tensor([cloud_ids[r.input] for r in records], dtype=torch.long)
        self.gt = torch.from_numpy(
            np.stack([load_scores(root / r.affordance_path) for r in records])
        ).to(dtype)
        self.labels = torch.tensor([vocab.get(r.affordance).id for r in records], dtype=torch.long)
        self.texts = [r.instruct for r in records]

    def __len__(self) -> int:
        return len(self.records)

    def batch(self, idx: np.ndarray) -> dict:
        cloud = self.cloud_index[idx]
        return {
            "points": self.points[cloud],
            "members": self.members[cloud],
            "centers": self.centers[cloud],
            "neighbors": self.neighbors[cloud],
            "gt": self.gt[idx],
            "labels": self.labels[idx],
            "texts": [self.texts[i] for i in idx],
        }


def _phase_parameters(model: AffordanceModel, phase: str, config: TrainConfig) -> list:
    text_params = list(model.text_encoder.parameters())
    frozen_text = config.freeze_text_in_affordance_phase
    if phase == PHASE_ALIGN:
        groups = [model.encoder, model.point_align, model.text_align]
        params = [p for m in groups for p in m.parameters()] + text_params
    elif phase == PHASE_LABEL:
        params = list(model.classifier.parameters()) + ([] if frozen_text else text_params)
    elif phase == PHASE_AFFORDANCE:
        groups = [model.encoder, model.decoder, model.query, model.classifier]
        params = [p for m in groups for p in m.parameters()] + ([] if frozen_text else text_params)
    elif phase == PHASE_JOINT:
        params = list(model.parameters())
    else:
        raise ValueError(f"unknown phase {phase!r}")
    return params


def _phase_loss(model: AffordanceModel, batch: dict, phase: str, config: TrainConfig) -> torch.Tensor:
    if phase == PHASE_ALIGN:
        _, pooled = model.encode_points(
            batch["points"], batch["members"], batch["centers"], neighbor_idx=batch["neighbors"]
        )
        text_emb = model.text_encoder(batch["texts"])
        return contrastive_batch_average(model.point_align(pooled), model.text_align(text_emb))
    if phase == PHASE_LABEL:
        with torch.no_grad():
            _, pooled = model.encode_points(
                batch["points"], batch["members"], batch["centers"], neighbor_idx=batch["neighbors"]
            )
        logits = model.classifier(model.text_encoder(batch["texts"]), pooled)
        return query_loss(logits, batch["labels"])
    out = model.forward(
        batch["points"], batch["members"], batch["centers"], batch["texts"],
        neighbor_idx=batch["neighbors"], straight_through=True,
    )
    l_aff = affordance_loss(out["scores"], batch["gt"], lambda_dice=config.lambda_dice)
    if phase == PHASE_AFFORDANCE:
        return l_aff
    l_ca = contrastive_batch_average(out["point_align"], out["text_align"])
    l_q = query_loss(out["logits"], batch["labels"])
    return l_aff + l_ca + l_q


def _run_phase(
    model: AffordanceModel,
    data: TrainingData,
    phase: str,
    steps: int,
    config: TrainConfig,
    order_rng: np.random.Generator,
) -> float:
    params = [p for p in _phase_parameters(model, phase, config) if p.requires_grad]
    optimizer = torch.optim.Adam(params, lr=config.lr)
    model.train()
    queue: list[int] = []
    last = float("nan")
    for step in range(steps):
        if len(queue) < config.batch_size:
            queue.extend(order_rng.permutation(len(data)).tolist())
        idx = np.array(queue[: config.batch_size])
        del queue[: config.batch_size]
        batch = data.batch(idx)
        try:
            loss = _phase_loss(model, batch, phase, config)
        except EncoderNumericsError as exc:
            raise TrainingDivergedError(f"diverged in phase {phase!r} at step {step}: {exc}") from exc
        if not torch.isfinite(loss):
            raise TrainingDivergedError(f"non-finite loss in phase {phase!r} at step {step}")
        optimizer.zero_grad()
        loss.backward()
        torch.nn.utils.clip_grad_norm_(params, config.grad_clip)
        optimizer.step()
        last = float(loss.detach())
        logger.debug("phase=%s step=%d loss=%.6f", phase, step, last)
        if step % 50 == 0 or step == steps - 1:
            logger.info("phase=%s step=%d loss=%.6f", phase, step, last)
    return last


def train(
    config: TrainConfig,
    records: list[DatasetRecord],
    manifest: DatasetManifest,
    root: str | Path,
) -> tuple[AffordanceModel, Checkpoint]:
    """Run the configured phase schedule and return the trained model plus a
    fully deterministic checkpoint."""
    vocab = manifest.vocabulary()
    data = TrainingData(records, root, config, vocab)
    model = build_model(config)
    order_rng = np.random.default_rng(config.seed)

    if config.joint:
        schedule = [(PHASE_JOINT, config.steps_joint)]
    else:
        schedule = [
            (PHASE_ALIGN, config.steps_align),
            (PHASE_LABEL, config.steps_label),
            (PHASE_AFFORDANCE, config.steps_affordance),
        ]
    final_losses = {}
    trained_phases = []
    total_steps = 0
    for phase, steps in schedule:
        if steps == 0:
            continue
        final_losses[phase] = _run_phase(model, data, phase, steps, config, order_rng)
        trained_phases.append(phase)
        total_steps += steps

    ckpt = Checkpoint(
        params={k: v.detach().cpu().numpy().copy() for k, v in model.state_dict().items()},
        config=config.to_dict(),
        phase=trained_phases[-1] if trained_phases else "",
        step=total_steps,
        seed=config.seed,
        metrics={"final_loss": final_losses},
        extra={"vocabulary": manifest.affordances, "trained_phases": trained_phases},
    )
    return model, ckpt


def model_from_checkpoint(ckpt: Checkpoint) -> tuple[AffordanceModel, TrainConfig]:
    config = TrainConfig.from_dict(ckpt.config)
    model = build_model(config)
    state = {k: torch.from_numpy(v.copy()) for k, v in ckpt.params.items()}
    model.load_state_dict(state)
    model.eval()
    return model, config


def ensure_normalized(pc: PointCloud) -> PointCloud:
    from .cloud import normalize_unit_sphere

    centered = np.abs(pc.points.mean(axis=0)).max() < 1e-6
    radius = np.linalg.norm(pc.points, axis=1).max()
    if centered and abs(radius - 1.0) < 1e-6:
        return pc
    return normalize_unit_sphere(pc)


def infer(
    ckpt: Checkpoint, pc: PointCloud, instruct_text: str
) -> tuple[np.ndarray, AffordanceLabel]:
    """Full pipeline on one cloud: returns (per-point scores, predicted label)."""
    model, config = model_from_checkpoint(ckpt)
    trained = set(ckpt.extra.get("trained_phases", []))
    if not trained & {PHASE_LABEL, PHASE_JOINT}:
        warnings.warn("label classifier was never trained; using raw argmax anyway")
    pc = ensure_normalized(pc)
    members, centers, neighbors = group_cloud(pc, config.encoder)
    dtype = torch.float64 if config.precision == "float64" else torch.float32
    with torch.no_grad():
        out = model.forward(
            torch.from_numpy(pc.points).to(dtype).unsqueeze(0),
            torch.from_numpy(members).unsqueeze(0),
            torch.from_numpy(centers).unsqueeze(0),
            [instruct_text],
            neighbor_idx=torch.from_numpy(neighbors).unsqueeze(0),
            straight_through=False,
        )
    scores = out["scores"][0].numpy()
    label_id = int(torch.max(out["logits"][0], dim=-1).indices)
    names = ckpt.extra.get("vocabulary")
    label = AffordanceLabel(label_id, names[label_id]) if names else AffordanceLabel(label_id, str(label_id))
    return scores, label


def save_trained(ckpt: Checkpoint, path: str | Path) -> None:
    save_checkpoint(ckpt, path)


def load_trained(path: str | Path) -> Checkpoint:
    return load_checkpoint(path)
