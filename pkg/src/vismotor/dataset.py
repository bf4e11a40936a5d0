"""Dataset generation, on-disk format, splits and instance statistics.

On disk a dataset directory holds::

    manifest.json     summary, counts, splits, config and hashes
    samples.jsonl     one JSON record per sample
    vocab.txt         goal vocabulary, one token per line (line index = id)
    images/*.png      8-bit RGB renders
"""
from __future__ import annotations

import hashlib
import json
import logging
import os
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
from PIL import Image

from . import blockworld as bw
from .kinematics import ArmModel, UnreachableError, forward_kinematics, grasp_waypoints, normalize_joints
from .scene import (CELL_SIZE, CameraModel, NoiseParams, camera_for_background, framed_camera,
                    render_scene, synth_background, to_uint8, world_coords)

log = logging.getLogger(__name__)

MANIFEST = "manifest.json"
RECORDS = "samples.jsonl"
VOCAB = "vocab.txt"


class DatasetError(ValueError):
    pass


class SplitConfigError(DatasetError):
    pass


@dataclass
class ObjectAnn:
    class_index: int
    bbox: tuple[float, float, float, float]
    cell: tuple[int, int, int]
    visible_fraction: float = 1.0


@dataclass
class Target:
    class_index: int
    bbox: tuple[float, float, float, float]
    cell: tuple[int, int, int]
    joints: tuple[float, ...]


@dataclass
class Sample:
    id: str
    image_path: str
    goal_tokens: list[int]
    target: Target
    objects: list[ObjectAnn]
    meta: dict
    goal_text: str = ""
    root: Path | None = field(default=None, repr=False, compare=False)

    def load_image(self) -> np.ndarray:
        """RGB image as float32 in [0, 1], shape (H, W, 3)."""
        path = Path(self.image_path)
        if self.root is not None and not path.is_absolute():
            path = self.root / path
        return np.asarray(Image.open(path).convert("RGB"), dtype=np.float32) / 255.0

    def gt_objects(self, min_visible: float = 0.05) -> list[ObjectAnn]:
        """Objects that count as detection ground truth."""
        return [o for o in self.objects if o.visible_fraction >= min_visible]

    def to_record(self) -> dict:
        d = asdict(self)
        d.pop("root")
        return d

    @classmethod
    def from_record(cls, rec: dict, root=None) -> "Sample":
        t = rec["target"]
        return cls(
            id=rec["id"],
            image_path=rec["image_path"],
            goal_tokens=list(rec["goal_tokens"]),
            target=Target(t["class_index"], tuple(t["bbox"]), tuple(t["cell"]), tuple(t["joints"])),
            objects=[ObjectAnn(o["class_index"], tuple(o["bbox"]), tuple(o["cell"]), o["visible_fraction"])
                     for o in rec["objects"]],
            meta=dict(rec["meta"]),
            goal_text=rec.get("goal_text", ""),
            root=Path(root) if root is not None else None,
        )


@dataclass
class Manifest:
    sample_count: int
    classes: list[str]
    backgrounds: list[int]
    splits: dict[str, list[int]]
    class_counts: list[int]
    cell_counts: list[list[int]]
    config: dict
    config_hash: str
    records_hash: str
    skipped: int = 0
    vocabulary: str = VOCAB
    records: str = RECORDS
    root: Path | None = field(default=None, repr=False, compare=False)

    def to_json(self) -> str:
        d = asdict(self)
        d.pop("root")
        return json.dumps(d, indent=2, sort_keys=True)

    @property
    def hash(self) -> str:
        return hashlib.sha256(self.to_json().encode()).hexdigest()

    def samples(self) -> list[Sample]:
        if self.root is None:
            raise DatasetError("manifest has no root directory")
        return load_samples(self.root / self.records, root=self.root)


def config_hash(config: dict) -> str:
    return hashlib.sha256(json.dumps(config, sort_keys=True, default=str).encode()).hexdigest()


def expected_count(n_layouts: int, n_backgrounds: int, n_noise: int) -> int:
    return n_layouts * n_backgrounds * (1 + n_noise)


def _reachable_targets(layout: bw.Layout, arm: ArmModel, cell_size: float):
    """Normalized grasp configuration for every IK-reachable block."""
    out = {}
    for i, b in enumerate(layout.blocks):
        try:
            grasp = grasp_waypoints(arm, world_coords(b.cell, cell_size))[-1]
        except UnreachableError as e:
            log.info("layout %s block %d unreachable: %s", layout.id, i, e)
            continue
        out[i] = normalize_joints(arm, grasp)
    return out


def build_dataset(layouts: Sequence[bw.Layout], backgrounds: Sequence[int], n_noise: int,
                  camera: CameraModel | None, arm: ArmModel, out_dir, *, seed: int = 0,
                  distractor_backgrounds: Iterable[int] = (), val_backgrounds: Sequence[int] | None = None,
                  noise: NoiseParams = NoiseParams(), cell_size: float = CELL_SIZE,
                  min_visible: float = 0.05) -> Manifest:
    """Render ``len(layouts) * len(backgrounds) * (1 + n_noise)`` samples.

    Variant 0 of every (layout, background) pair is rendered without noise,
    variants 1..n_noise with independent block noise.  The grasp target of
    each sample is drawn uniformly from the IK-reachable blocks in view;
    samples whose layout has none are skipped and counted in ``skipped``.
    """
    if not layouts:
        raise DatasetError("need at least one layout")
    if not backgrounds:
        raise DatasetError("need at least one background")
    if n_noise < 0:
        raise DatasetError("n_noise must be non-negative")
    backgrounds = [int(b) for b in backgrounds]
    distractor_backgrounds = sorted(int(b) for b in distractor_backgrounds)
    if val_backgrounds is None:
        val_backgrounds = default_val_backgrounds(backgrounds)
    val_backgrounds = [int(b) for b in val_backgrounds]
    camera = camera or framed_camera()
    out = Path(out_dir)
    (out / "images").mkdir(parents=True, exist_ok=True)

    config = {
        "layouts": [l.to_text() for l in layouts],
        "backgrounds": backgrounds,
        "distractor_backgrounds": distractor_backgrounds,
        "n_noise": n_noise,
        "seed": seed,
        "noise": asdict(noise),
        "cell_size": cell_size,
        "min_visible": min_visible,
        "camera": {"fx": camera.fx, "fy": camera.fy, "cx": camera.cx, "cy": camera.cy,
                   "rotation": camera.rotation.tolist(), "translation": camera.translation.tolist(),
                   "image_size": list(camera.image_size)},
        "arm": {"lower": arm.lower.tolist(), "upper": arm.upper.tolist(), "tool": arm.tool.tolist(),
                "base": arm.base_position.tolist(),
                "joints": [[j.axis.tolist(), j.offset.tolist()] for j in arm.joints]},
    }
    vocab = bw.VOCABULARY
    bw.save_vocabulary(vocab, out / VOCAB)

    bg_cache = {}
    for b in backgrounds:
        cam = camera_for_background(b, camera)
        bg_cache[b] = (cam, synth_background(b, cam, b in distractor_backgrounds, cell_size))

    class_counts = np.zeros(bw.NUM_CLASSES, dtype=int)
    cell_counts = np.zeros((bw.GRID, bw.GRID), dtype=int)
    skipped = 0
    digest = hashlib.sha256()
    n_written = 0
    with open(out / RECORDS, "w") as fh:
        for li, layout in enumerate(layouts):
            reachable = _reachable_targets(layout, arm, cell_size)
            for b in backgrounds:
                cam, bg = bg_cache[b]
                for v in range(n_noise + 1):
                    sid = f"{li:05d}_{b:03d}_{v}"
                    rng = np.random.default_rng([seed, li, b, v])
                    scene = render_scene(layout, cam, bg, noise if v else None,
                                         int(rng.integers(2**31)), cell_size=cell_size)
                    anns = {a.block_index: a for a in scene.annotations}
                    choices = sorted(i for i in reachable if i in anns)
                    if not choices:
                        log.warning("sample %s skipped: no reachable block in view", sid)
                        skipped += 1
                        continue
                    ti = choices[int(rng.integers(len(choices)))]
                    goal = bw.describe_target(layout, ti, int(rng.integers(2**31)))
                    png = to_uint8(scene.image)
                    rel = f"images/{sid}.png"
                    Image.fromarray(png).save(out / rel)
                    t = anns[ti]
                    objects = [ObjectAnn(a.class_index, tuple(round(c, 4) for c in a.bbox), a.cell,
                                         round(a.visible_fraction, 6)) for a in scene.annotations]
                    sample = Sample(
                        id=sid, image_path=rel, goal_tokens=goal.token_ids(),
                        target=Target(t.class_index, tuple(round(c, 4) for c in t.bbox), t.cell,
                                      tuple(float(x) for x in reachable[ti])),
                        objects=objects,
                        meta={"layout_id": layout.id, "layout_index": li, "block_index": ti,
                              "background_id": b, "noise_variant": v,
                              "image_sha256": hashlib.sha256(png.tobytes()).hexdigest()},
                        goal_text=goal.text,
                    )
                    line = json.dumps(sample.to_record(), sort_keys=True)
                    fh.write(line + "\n")
                    digest.update(line.encode())
                    n_written += 1
                    for o in objects:
                        class_counts[o.class_index] += 1
                        cell_counts[o.cell[0], o.cell[1]] += 1

    manifest = Manifest(
        sample_count=n_written,
        classes=list(bw.CLASS_NAMES),
        backgrounds=backgrounds,
        splits={"train": [b for b in backgrounds if b not in val_backgrounds], "val": val_backgrounds},
        class_counts=class_counts.tolist(),
        cell_counts=cell_counts.tolist(),
        config=config,
        config_hash=config_hash(config),
        records_hash=digest.hexdigest(),
        skipped=skipped,
        root=out,
    )
    _check_split(backgrounds, val_backgrounds)
    (out / MANIFEST).write_text(manifest.to_json())
    return manifest


def default_val_backgrounds(backgrounds: Sequence[int]) -> list[int]:
    """Last fifth of the backgrounds (3 of 15), at least one, never all."""
    backgrounds = list(backgrounds)
    if len(backgrounds) < 2:
        return []
    k = max(1, round(len(backgrounds) / 5))
    return backgrounds[-k:]


def load_manifest(path) -> Manifest:
    path = Path(path)
    if path.is_dir():
        path = path / MANIFEST
    d = json.loads(path.read_text())
    return Manifest(**d, root=path.parent)


def load_samples(path, root=None) -> list[Sample]:
    path = Path(path)
    root = path.parent if root is None else root
    with open(path) as fh:
        return [Sample.from_record(json.loads(line), root) for line in fh if line.strip()]


def _check_split(backgrounds, val_backgrounds):
    if not val_backgrounds:
        raise SplitConfigError("validation background list is empty")
    unknown = set(val_backgrounds) - set(backgrounds)
    if unknown:
        raise SplitConfigError(f"validation backgrounds {sorted(unknown)} not in the dataset")
    if set(val_backgrounds) >= set(backgrounds):
        raise SplitConfigError("validation backgrounds cover every background")


def split(manifest_or_samples, val_backgrounds: Sequence[int] | None = None, *,
          mode: str = "background", val_fraction: float = 0.2, seed: int = 0):
    """Partition samples into (train, val).

    ``mode="background"`` keeps every background on one side of the split;
    ``mode="random"`` is a plain seeded shuffle with ``val_fraction`` held out.
    """
    if isinstance(manifest_or_samples, Manifest):
        samples = manifest_or_samples.samples()
        backgrounds = manifest_or_samples.backgrounds
        if val_backgrounds is None:
            val_backgrounds = manifest_or_samples.splits["val"]
    else:
        samples = list(manifest_or_samples)
        backgrounds = sorted({s.meta["background_id"] for s in samples})
    if mode == "random":
        if not 0 < val_fraction < 1:
            raise SplitConfigError("val_fraction must be in (0, 1)")
        order = np.random.default_rng(seed).permutation(len(samples))
        n_val = int(round(val_fraction * len(samples)))
        val_idx = set(order[:n_val].tolist())
        return ([s for i, s in enumerate(samples) if i not in val_idx],
                [s for i, s in enumerate(samples) if i in val_idx])
    if mode != "background":
        raise SplitConfigError(f"unknown split mode {mode!r}")
    val_backgrounds = list(val_backgrounds or [])
    _check_split(backgrounds, val_backgrounds)
    vset = set(val_backgrounds)
    train = [s for s in samples if s.meta["background_id"] not in vset]
    val = [s for s in samples if s.meta["background_id"] in vset]
    return train, val


def _objects(s: Sample, min_visible):
    return s.objects if min_visible is None else s.gt_objects(min_visible)


def class_histogram(samples: Iterable[Sample], min_visible: float | None = None) -> np.ndarray:
    """Object instances per class; ``min_visible`` keeps only detection ground truth."""
    counts = np.zeros(bw.NUM_CLASSES, dtype=int)
    for s in samples:
        for o in _objects(s, min_visible):
            counts[o.class_index] += 1
    return counts


def position_histogram(samples: Iterable[Sample], min_visible: float | None = None) -> np.ndarray:
    """Object instances per (x, y) board cell; height is ignored."""
    counts = np.zeros((bw.GRID, bw.GRID), dtype=int)
    for s in samples:
        for o in _objects(s, min_visible):
            counts[o.cell[0], o.cell[1]] += 1
    return counts


def verify_sample(sample: Sample, layout: bw.Layout, arm: ArmModel, cell_size: float = CELL_SIZE,
                  tol: float = 1e-3) -> list[str]:
    """Integrity problems of one sample (empty when it is consistent)."""
    problems = []
    from .kinematics import denormalize_joints
    j = np.asarray(sample.target.joints)
    if np.any(j < 0) or np.any(j > 1):
        problems.append("joint target outside [0, 1]")
    else:
        pos, _ = forward_kinematics(arm, denormalize_joints(arm, j))
        err = np.linalg.norm(pos - world_coords(sample.target.cell, cell_size))
        if err > tol:
            problems.append(f"joint target misses block by {err:.2e} m")
    tokens = bw.decode_tokens(sample.goal_tokens)
    try:
        idx = bw.resolve_description(layout, tokens)
    except bw.BlockWorldError as e:
        problems.append(f"goal does not resolve: {e}")
    else:
        if idx != sample.meta["block_index"]:
            problems.append(f"goal resolves to {idx}, expected {sample.meta['block_index']}")
    if not any(o.cell == sample.target.cell and o.class_index == sample.target.class_index
               for o in sample.objects):
        problems.append("target missing from objects")
    for o in sample.objects:
        x0, y0, x1, y1 = o.bbox
        if not (x0 < x1 and y0 < y1):
            problems.append(f"degenerate bbox {o.bbox}")
    return problems
