"""Dataset records, manifests, ground-truth files, the procedural synthetic
dataset generator, and the adapter for externally prepared benchmark data.

Synthetic objects are part-based shapes with analytic per-point affordance
scores: 1 inside the target part, linear falloff over a band of 5% of the
part's extent, 0 beyond. Generation is a pure function of the seed.
"""

from __future__ import annotations

import json
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .cloud import (
    PointCloud,
    FULL,
    PARTIAL,
    normalize_unit_sphere,
    partial_view_indices,
    read_array_file,
    save_points,
    write_array_file,
)
from .instructions import AffordanceVocabulary, N_AFFORDANCE_LABELS, render_seed_qa

SCORES_MAGIC = b"PAVG"
RECORDS_FILENAME = "records.jsonl"
MANIFEST_FILENAME = "manifest.json"
REQUIRED_FIELDS = ("instruct", "input", "Answer", "Affordance_map")

# id = position in this list; families below use 9 of them, the remainder
# stay inert so the manifest always carries the full 18-label vocabulary
DEFAULT_AFFORDANCES = [
    "grasp", "contain", "lift", "open", "lay", "sit", "support", "wrap_grasp",
    "pour", "move", "display", "push", "pull", "listen", "wear", "press",
    "cut", "stab",
]


class RecordParseError(ValueError):
    """A record line is missing fields or is not valid JSON."""


class VocabularyError(ValueError):
    """Affordance vocabulary is the wrong size or contains unknown labels."""


@dataclass
class DatasetRecord:
    """One (object, affordance) sample binding text, geometry and ground truth."""

    instruct: str
    input: str
    answer: str
    affordance_path: str
    affordance: str
    category: str
    shape_kind: str
    source: str

    def to_json(self) -> str:
        obj = {
            "instruct": self.instruct,
            "input": self.input,
            "Answer": self.answer,
            "Affordance_map": {"path": self.affordance_path, "label": self.affordance},
            "category": self.category,
            "shape_kind": self.shape_kind,
            "source": self.source,
        }
        return json.dumps(obj, ensure_ascii=False)

    @classmethod
    def from_json(cls, line: str, line_no: int) -> "DatasetRecord":
        try:
            obj = json.loads(line)
        except json.JSONDecodeError as exc:
            raise RecordParseError(f"line {line_no}: invalid JSON ({exc})") from exc
        for name in REQUIRED_FIELDS:
            if name not in obj:
                raise RecordParseError(f"line {line_no}: missing field {name!r}")
        amap = obj["Affordance_map"]
        if not isinstance(amap, dict) or "path" not in amap or "label" not in amap:
            raise RecordParseError(f"line {line_no}: Affordance_map needs 'path' and 'label'")
        return cls(
            instruct=obj["instruct"],
            input=obj["input"],
            answer=obj["Answer"],
            affordance_path=amap["path"],
            affordance=amap["label"],
            category=obj.get("category", ""),
            shape_kind=obj.get("shape_kind", FULL),
            source=obj.get("source", "external"),
        )


@dataclass
class DatasetManifest:
    affordances: list[str]
    categories: list[str]
    record_count: int
    format_version: int = 1
    default_held_out: list[str] = field(default_factory=list)

    def __post_init__(self):
        if len(self.affordances) != N_AFFORDANCE_LABELS:
            raise VocabularyError(
                f"manifest must list exactly {N_AFFORDANCE_LABELS} affordances, got {len(self.affordances)}"
            )
        if len(set(self.affordances)) != len(self.affordances):
            raise VocabularyError("affordance names must be unique")

    def vocabulary(self) -> AffordanceVocabulary:
        return AffordanceVocabulary(self.affordances)


def write_records(records: list[DatasetRecord], root: str | Path) -> Path:
    path = Path(root) / RECORDS_FILENAME
    with open(path, "w", encoding="utf-8") as f:
        for rec in records:
            f.write(rec.to_json() + "\n")
    return path


def read_records(root: str | Path) -> list[DatasetRecord]:
    path = Path(root) / RECORDS_FILENAME
    records = []
    with open(path, "r", encoding="utf-8") as f:
        for line_no, line in enumerate(f, start=1):
            if line.strip():
                records.append(DatasetRecord.from_json(line, line_no))
    return records


def save_manifest(manifest: DatasetManifest, root: str | Path) -> Path:
    path = Path(root) / MANIFEST_FILENAME
    obj = {
        "format_version": manifest.format_version,
        "affordances": manifest.affordances,
        "categories": manifest.categories,
        "record_count": manifest.record_count,
        "default_held_out": manifest.default_held_out,
    }
    with open(path, "w", encoding="utf-8") as f:
        json.dump(obj, f, indent=2, ensure_ascii=False)
        f.write("\n")
    return path


def load_manifest(root: str | Path) -> DatasetManifest:
    with open(Path(root) / MANIFEST_FILENAME, "r", encoding="utf-8") as f:
        obj = json.load(f)
    return DatasetManifest(
        affordances=obj["affordances"],
        categories=obj["categories"],
        record_count=obj["record_count"],
        format_version=obj.get("format_version", 1),
        default_held_out=obj.get("default_held_out", []),
    )


def load_dataset(root: str | Path, check_files: bool = True) -> tuple[DatasetManifest, list[DatasetRecord]]:
    """Manifest + records with referenced-file and vocabulary validation."""
    root = Path(root)
    manifest = load_manifest(root)
    records = read_records(root)
    vocab = set(manifest.affordances)
    for rec in records:
        if rec.affordance not in vocab:
            raise VocabularyError(f"record label {rec.affordance!r} not in manifest vocabulary")
        if check_files:
            for rel in (rec.input, rec.affordance_path):
                if not (root / rel).exists():
                    raise FileNotFoundError(f"record references missing file {rel}")
    return manifest, records


def save_scores(path: str | Path, scores: np.ndarray) -> None:
    """Serialize a per-point score vector in the PAVG binary format."""
    arr = np.asarray(scores)
    if arr.ndim != 1:
        raise ValueError(f"scores must be 1-D, got shape {arr.shape}")
    write_array_file(path, SCORES_MAGIC, arr)


def load_scores(path: str | Path) -> np.ndarray:
    """Read a PAVG file; values outside [0, 1] are clamped with a warning."""
    vals = read_array_file(path, SCORES_MAGIC, 1).astype(np.float32)
    if (vals < 0.0).any() or (vals > 1.0).any():
        warnings.warn(f"{path}: scores outside [0, 1] were clamped")
        vals = np.clip(vals, 0.0, 1.0)
    return vals


# ---------------------------------------------------------------------------
# synthetic object families


class Box:
    """Axis-aligned solid box."""

    def __init__(self, center, half):
        self.center = np.asarray(center, dtype=np.float64)
        self.half = np.asarray(half, dtype=np.float64)

    def sample(self, rng: np.random.Generator, n: int) -> np.ndarray:
        return self.center + rng.uniform(-1.0, 1.0, size=(n, 3)) * self.half

    def distance(self, pts: np.ndarray) -> np.ndarray:
        gap = np.maximum(np.abs(pts - self.center) - self.half, 0.0)
        return np.linalg.norm(gap, axis=1)

    def extent(self) -> float:
        return float(2.0 * self.half.max())


class Cylinder:
    """Axis-aligned capped cylinder; samples on the lateral shell or the solid."""

    def __init__(self, axis: int, offset, lo: float, hi: float, radius: float, shell: bool = True):
        self.axis = axis
        self.offset = np.asarray(offset, dtype=np.float64)  # the two cross-axis coordinates
        self.lo, self.hi, self.radius, self.shell = float(lo), float(hi), float(radius), shell
        self.cross = [i for i in range(3) if i != axis]

    def sample(self, rng: np.random.Generator, n: int) -> np.ndarray:
        theta = rng.uniform(0.0, 2.0 * np.pi, size=n)
        along = rng.uniform(self.lo, self.hi, size=n)
        r = self.radius if self.shell else self.radius * np.sqrt(rng.uniform(0.0, 1.0, size=n))
        pts = np.empty((n, 3), dtype=np.float64)
        pts[:, self.axis] = along
        pts[:, self.cross[0]] = self.offset[0] + r * np.cos(theta)
        pts[:, self.cross[1]] = self.offset[1] + r * np.sin(theta)
        return pts

    def distance(self, pts: np.ndarray) -> np.ndarray:
        radial = np.hypot(
            pts[:, self.cross[0]] - self.offset[0], pts[:, self.cross[1]] - self.offset[1]
        )
        d_r = np.maximum(radial - self.radius, 0.0)
        mid, half = 0.5 * (self.lo + self.hi), 0.5 * (self.hi - self.lo)
        d_a = np.maximum(np.abs(pts[:, self.axis] - mid) - half, 0.0)
        return np.hypot(d_r, d_a)

    def extent(self) -> float:
        return float(max(2.0 * self.radius, self.hi - self.lo))


@dataclass
class Part:
    name: str
    region: object
    weight: float


@dataclass
class FamilySpec:
    """A part-based shape with per-affordance target parts."""

    name: str
    parts: list[Part]
    affordance_parts: dict[str, list[str]]

    def regions_for(self, affordance: str) -> list:
        names = self.affordance_parts[affordance]
        return [p.region for p in self.parts if p.name in names]


def _chair(rng: np.random.Generator) -> FamilySpec:
    w = rng.uniform(0.40, 0.50)
    seat_z = rng.uniform(0.45, 0.55)
    t = 0.04
    back_h = rng.uniform(0.75, 0.95)
    leg_xy = w - 0.07
    parts = [
        Part("seat", Box((0.0, 0.0, seat_z), (w, w, t)), 0.30),
        Part("back", Box((0.0, w - 0.03, seat_z + t + back_h / 2), (w, 0.03, back_h / 2)), 0.30),
    ]
    for sx in (-1.0, 1.0):
        for sy in (-1.0, 1.0):
            parts.append(
                Part("leg", Cylinder(2, (sx * leg_xy, sy * leg_xy), 0.0, seat_z - t, 0.05), 0.10)
            )
    return FamilySpec(
        "chair", parts, {"sit": ["seat"], "support": ["back"], "move": ["leg"]}
    )


def _mug(rng: np.random.Generator) -> FamilySpec:
    radius = rng.uniform(0.35, 0.45)
    height = rng.uniform(0.9, 1.1)
    rim_z = 0.85 * height
    parts = [
        Part("body", Cylinder(2, (0.0, 0.0), 0.0, rim_z, radius), 0.48),
        Part("body", Cylinder(2, (0.0, 0.0), 0.0, 0.02, radius, shell=False), 0.10),
        Part("rim", Cylinder(2, (0.0, 0.0), rim_z, height, radius), 0.12),
        Part("handle", Cylinder(2, (radius + 0.16, 0.0), 0.3 * height, 0.7 * height, 0.07), 0.30),
    ]
    return FamilySpec(
        "mug", parts, {"grasp": ["handle"], "contain": ["body"], "pour": ["rim"]}
    )


def _knife(rng: np.random.Generator) -> FamilySpec:
    handle_len = rng.uniform(0.55, 0.70)
    blade_top = rng.uniform(0.14, 0.20)
    tip_x = 0.62
    parts = [
        Part("handle", Cylinder(0, (0.0, blade_top / 2), -0.9, -0.9 + handle_len, 0.06), 0.35),
        Part("blade", Box(((tip_x - 0.25) / 2, 0.0, blade_top / 2), ((tip_x + 0.25) / 2, 0.015, blade_top / 2)), 0.45),
        Part("tip", Box(((tip_x + 0.9) / 2, 0.0, blade_top / 2), ((0.9 - tip_x) / 2, 0.015, blade_top / 2)), 0.20),
    ]
    return FamilySpec(
        "knife", parts, {"grasp": ["handle"], "cut": ["blade", "tip"], "stab": ["tip"]}
    )


def _bottle(rng: np.random.Generator) -> FamilySpec:
    body_r = rng.uniform(0.30, 0.40)
    body_h = rng.uniform(0.7, 0.9)
    parts = [
        Part("body", Cylinder(2, (0.0, 0.0), 0.0, body_h, body_r), 0.55),
        Part("neck", Cylinder(2, (0.0, 0.0), body_h, body_h + 0.3, 0.12), 0.25),
        Part("cap", Cylinder(2, (0.0, 0.0), body_h + 0.3, body_h + 0.45, 0.14), 0.20),
    ]
    return FamilySpec(
        "bottle", parts, {"contain": ["body"], "pour": ["neck"], "open": ["cap"]}
    )


FAMILY_BUILDERS = {"chair": _chair, "mug": _mug, "knife": _knife, "bottle": _bottle}
FALLOFF_FRACTION = 0.05


def _allocate_counts(weights, total: int) -> np.ndarray:
    """Largest-remainder allocation of `total` samples over `weights`."""
    w = np.asarray(weights, dtype=np.float64)
    raw = w / w.sum() * total
    counts = np.floor(raw).astype(np.int64)
    short = total - counts.sum()
    order = np.argsort(-(raw - counts), kind="stable")
    counts[order[:short]] += 1
    return counts


def sample_family_object(spec: FamilySpec, rng: np.random.Generator, n_points: int):
    """Sample points from every part and compute analytic affordance scores.

    Returns raw (unnormalized) points plus a dict of per-affordance score
    vectors aligned with the points.
    """
    counts = _allocate_counts([p.weight for p in spec.parts], n_points)
    chunks = [part.region.sample(rng, int(c)) for part, c in zip(spec.parts, counts)]
    points = np.concatenate(chunks, axis=0)
    scores = {}
    for affordance in spec.affordance_parts:
        regions = spec.regions_for(affordance)
        band = FALLOFF_FRACTION * max(r.extent() for r in regions)
        dist = np.min(np.stack([r.distance(points) for r in regions]), axis=0)
        scores[affordance] = np.clip(1.0 - dist / band, 0.0, 1.0)
    return points, scores


def generate_synthetic_dataset(
    out_dir: str | Path,
    n_objects: int = 32,
    families: tuple[str, ...] = ("chair", "mug", "knife", "bottle"),
    seed: int = 0,
    n_points: int = 512,
    partial_fraction: float = 0.25,
) -> tuple[list[DatasetRecord], DatasetManifest]:
    """Generate the full dataset tree (clouds, ground truth, records, manifest).

    Every byte of the output is determined by the arguments.
    """
    for fam in families:
        if fam not in FAMILY_BUILDERS:
            raise ValueError(f"unknown family {fam!r}; known: {sorted(FAMILY_BUILDERS)}")
    if n_objects < len(families):
        raise ValueError("need at least one object per family")

    out_dir = Path(out_dir)
    (out_dir / "clouds").mkdir(parents=True, exist_ok=True)
    (out_dir / "gt").mkdir(parents=True, exist_ok=True)

    master = np.random.default_rng(seed)
    n_partial = int(round(partial_fraction * n_objects))
    partial_ids = set(master.choice(n_objects, size=n_partial, replace=False).tolist())
    vocab = AffordanceVocabulary(DEFAULT_AFFORDANCES)

    records: list[DatasetRecord] = []
    for i in range(n_objects):
        rng = np.random.default_rng(master.integers(0, 2**63))
        family = families[i % len(families)]
        spec = FAMILY_BUILDERS[family](rng)
        raw_points, gt = sample_family_object(spec, rng, n_points)
        pc = normalize_unit_sphere(PointCloud(raw_points, shape_kind=FULL, category=family))

        variants = [(f"obj{i:04d}", pc.points, gt, FULL)]
        if i in partial_ids:
            direction = rng.normal(size=3)
            direction /= np.linalg.norm(direction)
            keep = rng.uniform(0.5, 0.7)
            mapping = partial_view_indices(pc.points, direction, keep)
            partial_pc = normalize_unit_sphere(
                PointCloud(pc.points[mapping], shape_kind=PARTIAL, category=family)
            )
            partial_gt = {name: vec[mapping] for name, vec in gt.items()}
            variants.append((f"obj{i:04d}_partial", partial_pc.points, partial_gt, PARTIAL))

        for stem, pts, gt_map, kind in variants:
            cloud_rel = f"clouds/{stem}.pavl"
            save_points(out_dir / cloud_rel, pts.astype(np.float32))
            for affordance, vec in gt_map.items():
                gt_rel = f"gt/{stem}_{affordance}.pavg"
                save_scores(out_dir / gt_rel, vec.astype(np.float32))
                qa = render_seed_qa(family, vocab.get(affordance))
                records.append(
                    DatasetRecord(
                        instruct=qa.instruct_text,
                        input=cloud_rel,
                        answer=qa.answer_text,
                        affordance_path=gt_rel,
                        affordance=affordance,
                        category=family,
                        shape_kind=kind,
                        source="synthetic",
                    )
                )

    held_out = ["mug"] if "mug" in families else [families[0]]
    manifest = DatasetManifest(
        affordances=list(DEFAULT_AFFORDANCES),
        categories=sorted(set(families)),
        record_count=len(records),
        default_held_out=held_out,
    )
    write_records(records, out_dir)
    save_manifest(manifest, out_dir)
    return records, manifest


# ---------------------------------------------------------------------------
# external data ingestion


def ingest_external(
    source_dir: str | Path, mapping_config: dict | str | Path, out_dir: str | Path
) -> tuple[list[DatasetRecord], DatasetManifest]:
    """Convert externally prepared data into the native dataset formats.

    The intermediate layout is an ``objects.json`` index listing, per object,
    the point array (.npy, N x 3), the category, the shape kind, and one .npy
    score array per affordance. ``mapping_config`` supplies the 18-label
    vocabulary (key "affordances"), an optional "rename" map applied to the
    source affordance names, and an optional declared "n_points".
    """
    source_dir = Path(source_dir)
    out_dir = Path(out_dir)
    if not isinstance(mapping_config, dict):
        with open(mapping_config, "r", encoding="utf-8") as f:
            mapping_config = json.load(f)

    names = mapping_config.get("affordances", [])
    if len(names) != N_AFFORDANCE_LABELS:
        raise VocabularyError(
            f"mapping config must list exactly {N_AFFORDANCE_LABELS} affordances, got {len(names)}"
        )
    vocab = AffordanceVocabulary(names)
    rename = mapping_config.get("rename", {})
    declared_n = mapping_config.get("n_points")

    with open(source_dir / "objects.json", "r", encoding="utf-8") as f:
        index = json.load(f)

    (out_dir / "clouds").mkdir(parents=True, exist_ok=True)
    (out_dir / "gt").mkdir(parents=True, exist_ok=True)

    records: list[DatasetRecord] = []
    categories: set[str] = set()
    unknown: set[str] = set()
    for i, entry in enumerate(index):
        points = np.load(source_dir / entry["points"])
        if points.ndim != 2 or points.shape[1] != 3:
            raise ValueError(f"object {i}: points must be (N, 3), got {points.shape}")
        if declared_n is not None and points.shape[0] != declared_n:
            raise ValueError(
                f"object {i}: point count {points.shape[0]} != declared {declared_n}"
            )
        kind = entry.get("shape_kind", FULL)
        category = entry["category"]
        categories.add(category)
        pc = normalize_unit_sphere(PointCloud(points, shape_kind=kind, category=category))
        stem = f"ext{i:04d}"
        cloud_rel = f"clouds/{stem}.pavl"
        save_points(out_dir / cloud_rel, pc.points.astype(np.float32))
        for src_name, score_rel in sorted(entry["affordances"].items()):
            name = rename.get(src_name, src_name)
            if name not in vocab:
                unknown.add(name)
                continue
            scores = np.load(source_dir / score_rel)
            if scores.shape != (points.shape[0],):
                raise ValueError(
                    f"object {i}: score array for {src_name!r} has shape {scores.shape}, "
                    f"expected ({points.shape[0]},)"
                )
            gt_rel = f"gt/{stem}_{name}.pavg"
            save_scores(out_dir / gt_rel, np.clip(scores, 0.0, 1.0).astype(np.float32))
            qa = render_seed_qa(category, vocab.get(name))
            records.append(
                DatasetRecord(
                    instruct=qa.instruct_text,
                    input=cloud_rel,
                    answer=qa.answer_text,
                    affordance_path=gt_rel,
                    affordance=name,
                    category=category,
                    shape_kind=kind,
                    source="external",
                )
            )
    if unknown:
        raise VocabularyError(f"unknown affordance labels in source data: {sorted(unknown)}")

    manifest = DatasetManifest(
        affordances=list(names),
        categories=sorted(categories),
        record_count=len(records),
    )
    write_records(records, out_dir)
    save_manifest(manifest, out_dir)
    return records, manifest
