"""Training loops, the plateau scheduler and the task-combination ablation."""
from __future__ import annotations

import csv
import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
import torch

from .dataset import Sample
from .losses import (CombinedLossWeights, FocalParams, assign_targets, classification_loss, combined_loss,
                     regression_loss, visuomotor_mse)
from .model import SharedVisuomotorNet, image_tensor, save_checkpoint, token_tensor

log = logging.getLogger(__name__)


class TrainError(RuntimeError):
    pass


class NonFiniteLossError(TrainError):
    def __init__(self, snapshot: dict):
        super().__init__(f"non-finite loss: {snapshot}")
        self.snapshot = snapshot


@dataclass
class TrainConfig:
    iterations: int = 32_000
    batch_size: int = 1
    optimizer: str = "adam"
    lr: float = 1e-5
    momentum: float = 0.9
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-9
    scheduler: bool = True
    check_every: int = 1000
    patience: int = 2
    factor: float = 0.1
    threshold: float = 1e-6
    min_lr: float = 1e-8
    tasks: tuple[str, ...] = ("box", "cls", "vis")
    loss_weights: tuple[float, float, float] = (1.0, 1.0, 1.0)
    focal_alpha: float = 0.25
    focal_gamma: float = 2.0
    focal_balanced: bool = False
    grad_clip: float | None = None
    warmup: int = 0  # iterations of linear lr ramp from lr / warmup
    min_visible: float = 0.05
    seed: int = 0
    trials: int = 3
    log_every: int = 1

    def __post_init__(self):
        self.betas = tuple(self.betas)
        self.tasks = tuple(self.tasks)
        self.loss_weights = tuple(self.loss_weights)
        if self.batch_size < 1:
            raise TrainError("batch_size must be >= 1")
        if self.iterations < 0:
            raise TrainError("iterations must be >= 0")
        if self.warmup < 0:
            raise TrainError("warmup must be >= 0")
        if self.optimizer not in ("adam", "sgd"):
            raise TrainError(f"unknown optimizer {self.optimizer!r}")
        self.weights  # validates tasks

    @property
    def weights(self) -> CombinedLossWeights:
        loc, cls, vis = self.loss_weights
        return CombinedLossWeights.for_tasks(self.tasks, localization=loc, classification=cls, visuomotor=vis)

    @property
    def focal(self) -> FocalParams:
        return FocalParams(self.focal_alpha, self.focal_gamma, self.focal_balanced)

    @classmethod
    def multitask(cls, **kw) -> "TrainConfig":
        """Adam recipe for joint training of all heads."""
        return cls(**kw)

    @classmethod
    def detection(cls, **kw) -> "TrainConfig":
        """SGD recipe for detection-only training."""
        base = dict(iterations=50_000, optimizer="sgd", lr=0.01, momentum=0.9, scheduler=False,
                    tasks=("box", "cls"), warmup=1000, grad_clip=10.0)
        base.update(kw)
        return cls(**base)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise TrainError(f"unknown train keys: {sorted(unknown)}")
        return cls(**d)

    def to_dict(self) -> dict:
        return {k: list(v) if isinstance(v, tuple) else v for k, v in asdict(self).items()}


# ---------------------------------------------------------------------------
# scheduler

@dataclass
class PlateauState:
    lr: float
    iteration: int = 0
    window: list = field(default_factory=list)
    best: float = math.inf
    bad_checks: int = 0
    log: list = field(default_factory=list)  # (iteration, old_lr, new_lr)


def lr_schedule_step(loss: float, state: PlateauState, check_every: int = 1000, patience: int = 2,
                     factor: float = 0.1, threshold: float = 1e-6, min_lr: float = 1e-8) -> float:
    """Advance the plateau rule by one iteration and return the learning rate.

    Every ``check_every`` iterations the mean loss of the window just ended
    is compared with the best seen so far.  It improves when it is below
    ``best - threshold``; after ``patience`` failed checks in a row the rate
    is multiplied by ``factor`` (floored at ``min_lr``) and the count resets.
    """
    state.iteration += 1
    state.window.append(float(loss))
    if state.iteration % check_every:
        return state.lr
    mean = float(np.mean(state.window))
    state.window = []
    if mean < state.best - threshold:
        state.best = mean
        state.bad_checks = 0
        return state.lr
    state.bad_checks += 1
    if state.bad_checks >= patience:
        new = max(state.lr * factor, min_lr)
        if not math.isclose(new, state.lr, rel_tol=1e-9):  # ignore rounding drift near the floor
            state.log.append((state.iteration, state.lr, new))
            state.lr = new
        state.bad_checks = 0
    return state.lr


def replay_schedule(history: Sequence[float], lr: float, **kw) -> list[tuple[int, float, float]]:
    """Learning-rate change log produced by a loss history."""
    state = PlateauState(lr)
    for loss in history:
        lr_schedule_step(loss, state, **kw)
    return state.log


# ---------------------------------------------------------------------------
# training

class SampleCache:
    """Images and anchor targets kept in memory across epochs."""

    def __init__(self, anchors: np.ndarray, min_visible: float = 0.05):
        self.anchors = anchors
        self.min_visible = min_visible
        self._images: dict[str, np.ndarray] = {}
        self._targets: dict[str, tuple] = {}

    def image(self, s: Sample) -> torch.Tensor:
        if s.id not in self._images:
            self._images[s.id] = np.round(s.load_image() * 255).astype(np.uint8)
        return image_tensor(self._images[s.id].astype(np.float32) / 255.0)

    def targets(self, s: Sample):
        if s.id not in self._targets:
            gt = s.gt_objects(self.min_visible)
            t = assign_targets(self.anchors, [o.bbox for o in gt], [o.class_index for o in gt])
            self._targets[s.id] = (torch.from_numpy(t.labels.astype(np.int64)),
                                   torch.from_numpy(t.deltas.astype(np.float32)))
        return self._targets[s.id]


def sample_losses(model: SharedVisuomotorNet, batch: Sequence[Sample], cache: SampleCache, tasks,
                  focal: FocalParams):
    """Per-task losses averaged over a batch; masked tasks are None."""
    images = torch.cat([cache.image(s) for s in batch])
    width = max(len(s.goal_tokens) for s in batch)
    tokens = torch.cat([token_tensor(s.goal_tokens, width) for s in batch])
    out = model(images, tokens if "vis" in tasks else None, tasks)
    sl1 = fl = mse = None
    if "cls" in tasks or "box" in tasks:
        fls, sl1s = [], []
        for i, s in enumerate(batch):
            labels, deltas = cache.targets(s)
            if "cls" in tasks:
                fls.append(classification_loss(out["cls"][i], labels, focal))
            if "box" in tasks:
                sl1s.append(regression_loss(out["box"][i], deltas, labels))
        fl = torch.stack(fls).mean() if fls else None
        sl1 = torch.stack(sl1s).mean() if sl1s else None
    if "vis" in tasks:
        target = torch.tensor([s.target.joints for s in batch], dtype=out["joints"].dtype)
        mse = visuomotor_mse(out["joints"], target)
    return sl1, fl, mse


def validation_losses(model, samples, tasks=("box", "cls", "vis"), focal=FocalParams(),
                      min_visible: float = 0.05) -> dict:
    """Mean of each active loss over ``samples`` in eval mode."""
    if not samples:
        return {}
    cache = SampleCache(model.anchors(_input_size(samples[0])), min_visible)
    was = model.training
    model.eval()
    sums = {}
    try:
        with torch.no_grad():
            for s in samples:
                sl1, fl, mse = sample_losses(model, [s], cache, tasks, focal)
                for k, v in (("sl1", sl1), ("fl", fl), ("mse", mse)):
                    if v is not None:
                        sums.setdefault(k, []).append(float(v))
    finally:
        model.train(was)
    return {k: float(np.mean(v)) for k, v in sums.items()}


def _input_size(sample: Sample) -> tuple[int, int]:
    x = image_tensor(sample.load_image())
    return x.shape[3], x.shape[2]


@dataclass
class TrainReport:
    seed: int
    config: dict
    history: list[dict] = field(default_factory=list)   # per logged iteration
    lr_log: list[tuple[int, float, float]] = field(default_factory=list)
    initial_val: dict = field(default_factory=dict)
    final_val: dict = field(default_factory=dict)
    wall_time: float = 0.0
    status: str = "ok"

    def write(self, out_dir) -> None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        with open(out / "report.jsonl", "w") as fh:
            for rec in self.history:
                fh.write(json.dumps(rec) + "\n")
        summary = {k: v for k, v in asdict(self).items() if k != "history"}
        (out / "summary.json").write_text(json.dumps(summary, indent=2))
        with open(out / "summary.csv", "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["metric", "value"])
            w.writerow(["seed", self.seed])
            w.writerow(["status", self.status])
            w.writerow(["iterations", len(self.history) and self.history[-1]["iteration"] + 1])
            w.writerow(["wall_time", self.wall_time])
            w.writerow(["lr_changes", len(self.lr_log)])
            for split, vals in (("initial_val", self.initial_val), ("final_val", self.final_val)):
                for k, v in sorted(vals.items()):
                    w.writerow([f"{split}_{k}", repr(v)])

    def loss_curve(self, key: str) -> list[float]:
        return [r[key] for r in self.history if key in r]


def make_optimizer(params, config: TrainConfig):
    if config.optimizer == "adam":
        return torch.optim.Adam(params, lr=config.lr, betas=config.betas, eps=config.eps)
    return torch.optim.SGD(params, lr=config.lr, momentum=config.momentum)


def train(model: SharedVisuomotorNet, samples: Sequence[Sample], config: TrainConfig,
          out_dir=None, val_samples: Sequence[Sample] | None = None,
          progress: Callable[[int, dict], None] | None = None) -> TrainReport:
    """Run ``config.iterations`` optimizer steps and return the report.

    Samples are visited in a seeded shuffled cycle.  Only the heads of active
    tasks are evaluated, so masked heads receive no gradient and are left
    untouched.  The scheduler follows the visuomotor MSE.  A non-finite loss
    aborts with :class:`NonFiniteLossError` carrying the offending iteration,
    sample and per-term losses.
    """
    if not samples:
        raise TrainError("training set is empty")
    torch.manual_seed(config.seed)
    rng = np.random.default_rng(config.seed)
    tasks = config.weights.active_tasks
    focal = config.focal
    report = TrainReport(config.seed, config.to_dict())
    cache = SampleCache(model.anchors(_input_size(samples[0])), config.min_visible)
    if val_samples:
        report.initial_val = validation_losses(model, val_samples, tasks, focal, config.min_visible)

    params = [p for p in model.parameters() if p.requires_grad]
    opt = make_optimizer(params, config)
    sched = PlateauState(config.lr)
    order: list[int] = []
    start = time.perf_counter()
    model.train()
    for it in range(config.iterations):
        batch = []
        while len(batch) < config.batch_size:
            if not order:
                order = rng.permutation(len(samples)).tolist()
            batch.append(samples[order.pop()])
        sl1, fl, mse = sample_losses(model, batch, cache, tasks, focal)
        total, terms = combined_loss(sl1, fl, mse, config.weights)
        if not torch.isfinite(total):
            raise NonFiniteLossError({"iteration": it, "samples": [s.id for s in batch], **terms})
        lr = sched.lr * min(1.0, (it + 1) / config.warmup) if config.warmup else sched.lr
        for g in opt.param_groups:
            g["lr"] = lr
        opt.zero_grad(set_to_none=True)
        total.backward()
        if config.grad_clip:
            torch.nn.utils.clip_grad_norm_(params, config.grad_clip)
        opt.step()
        if config.scheduler and mse is not None:
            lr_schedule_step(terms["mse"], sched, config.check_every, config.patience,
                             config.factor, config.threshold, config.min_lr)
        if it % config.log_every == 0 or it == config.iterations - 1:
            rec = {"iteration": it, "lr": lr, "total": float(total.detach()), **terms}
            report.history.append(rec)
            if progress:
                progress(it, rec)
    report.lr_log = list(sched.log)
    report.wall_time = time.perf_counter() - start
    if val_samples:
        report.final_val = validation_losses(model, val_samples, tasks, focal, config.min_visible)
    if out_dir is not None:
        report.write(out_dir)
        save_checkpoint(model, Path(out_dir) / "model.ckpt", {"train": config.to_dict()})
    return report


# ---------------------------------------------------------------------------
# ablation

# column order of the ablation table
COMBINATIONS = {
    "classification": ("vis", "cls"),
    "none": ("vis",),
    "both": ("vis", "cls", "box"),
    "localization": ("vis", "box"),
}


def _mean_std(values):
    if not values:
        return None, None
    return float(np.mean(values)), float(np.std(values))


def run_ablation(base: TrainConfig, train_samples, val_samples, model_factory: Callable[[int], SharedVisuomotorNet],
                 trials: int | None = None, out_dir=None, progress=None):
    """Train every task combination ``trials`` times with distinct seeds.

    ``model_factory(seed)`` builds a freshly initialized network.  Returns
    ``(reports, rows)`` where ``reports[name]`` lists the per-trial reports
    and ``rows`` are summary rows for the ablation CSV.  A failed trial is
    kept with ``status`` set to the error and excluded from the statistics.
    """
    trials = base.trials if trials is None else trials
    reports: dict[str, list[TrainReport]] = {}
    rows = []
    for name, tasks in COMBINATIONS.items():
        reports[name] = []
        for t in range(trials):
            seed = base.seed + t
            cfg = replace(base, tasks=tasks, seed=seed)
            run_dir = None if out_dir is None else Path(out_dir) / f"{name}_seed{seed}"
            model = model_factory(seed)
            try:
                rep = train(model, train_samples, cfg, run_dir, val_samples,
                            progress=None if progress is None else (lambda i, r, n=name, s=seed: progress(n, s, i, r)))
            except (TrainError, RuntimeError) as e:
                log.error("ablation %s seed %d failed: %s", name, seed, e)
                rep = TrainReport(seed, cfg.to_dict(), status=f"failed: {e}")
            reports[name].append(rep)
        ok = [r for r in reports[name] if r.status == "ok"]
        row = {"combination": name, "trials": len(ok)}
        for key in ("mse", "fl", "sl1"):
            m, s = _mean_std([r.final_val[key] for r in ok if key in r.final_val])
            row[f"{key}_mean"], row[f"{key}_std"] = m, s
        if len(ok) < trials:
            row["combination"] = f"{name} ({trials - len(ok)} failed)"
        rows.append(row)
    return reports, rows


def format_ablation_table(rows: Sequence[dict]) -> str:
    """Plain-text table: one column per combination, '-' where a task is masked."""
    header = ["", *[r["combination"] for r in rows]]
    lines = []
    for label, key in (("Visuomotor (MSE)", "mse"), ("Classification (FL)", "fl"), ("Regression (SL1)", "sl1")):
        cells = [label]
        for r in rows:
            m, s = r.get(f"{key}_mean"), r.get(f"{key}_std")
            cells.append("-" if m is None else f"{m:.4g} ± {s:.2g}")
        lines.append(cells)
    widths = [max(len(str(c)) for c in col) for col in zip(header, *lines)]
    fmt = lambda cells: " | ".join(str(c).ljust(w) for c, w in zip(cells, widths))  # noqa: E731
    return "\n".join([fmt(header), "-+-".join("-" * w for w in widths), *map(fmt, lines)])
