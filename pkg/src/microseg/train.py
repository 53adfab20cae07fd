"""Training, evaluation, prediction and profiling commands with run-record logging.

A run directory holds::

    config.yaml     the resolved RunConfig (re-launchable as-is)
    events.jsonl    one JSON object per line: start, epoch, resume, abort, end
    state.pt        latest optimizer/scheduler/model state, for resuming
    best.ckpt       parameters at the best validation IoU (lowest train loss without validation)
    final.ckpt      parameters after the last epoch
    summary.json    the RunRecord, written once the run completes

A run is complete when its event log ends with an ``end`` event.
"""
from __future__ import annotations

import contextlib
import json
import logging
import math
import os
import random
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence

import numpy as np
import torch
from PIL import UnidentifiedImageError

from . import checkpoint as ckpt
from .config import RunConfig
from .data import (DatasetStats, SampleRecord, apply_augment, dataset_stats, load_image, load_mask, normalize,
                   plan_indices, sample_augment, sample_rng, save_png, scan_dataset, synth_generate)
from .inference import TilingConfig, predict_full, predict_tiled, render_overlay
from .losses import MetricReport, total_loss
from .profiler import ProfileReport, profile
from .zoo import SWIN_VARIANTS, VARIANTS, build, variant_spec

log = logging.getLogger(__name__)

EVENTS = "events.jsonl"
STATE = "state.pt"


class RunError(RuntimeError):
    """Failure with a short machine-readable ``code``."""

    code = "run_error"

    def __init__(self, message: str, code: Optional[str] = None):
        super().__init__(message)
        if code:
            self.code = code


class NonFiniteLoss(RunError):
    code = "nan_loss"


@dataclass
class RunRecord:
    config: dict
    epoch_losses: List[float] = field(default_factory=list)
    metrics: Optional[dict] = None
    profile: Optional[dict] = None
    timings: Dict[str, float] = field(default_factory=dict)
    checkpoints: Dict[str, str] = field(default_factory=dict)
    steps: int = 0

    def save(self, path) -> None:
        _atomic_write(Path(path), json.dumps(asdict(self), indent=2).encode())


# ---------------------------------------------------------------- run files

def _atomic_write(path: Path, data: bytes) -> None:
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(data)
        fh.flush()
        os.fsync(fh.fileno())
    os.replace(tmp, path)


def append_event(out_dir, event: dict) -> None:
    with open(Path(out_dir) / EVENTS, "a") as fh:
        fh.write(json.dumps(event) + "\n")
        fh.flush()
        os.fsync(fh.fileno())


def read_events(out_dir) -> List[dict]:
    """Parsed event log; a torn trailing line from an interrupted write is dropped."""
    path = Path(out_dir) / EVENTS
    if not path.exists():
        return []
    events = []
    for line in path.read_text().splitlines():
        try:
            events.append(json.loads(line))
        except json.JSONDecodeError:
            break
    return events


def repair_events(out_dir) -> List[dict]:
    """Rewrite the event log without any torn trailing line so appends stay parseable."""
    events = read_events(out_dir)
    _atomic_write(Path(out_dir) / EVENTS, "".join(json.dumps(e) + "\n" for e in events).encode())
    return events


def run_status(out_dir) -> str:
    """``absent``, ``partial`` or ``complete``."""
    events = read_events(out_dir)
    if not events:
        return "absent"
    return "complete" if events[-1].get("event") == "end" else "partial"


@contextlib.contextmanager
def determinism(seed: int, enabled: bool):
    random.seed(seed)
    np.random.seed(seed % 2**32)
    torch.manual_seed(seed)
    previous = torch.are_deterministic_algorithms_enabled()
    torch.use_deterministic_algorithms(enabled)
    try:
        yield
    finally:
        torch.use_deterministic_algorithms(previous)


# ---------------------------------------------------------------- data helpers

def split_records(records: Sequence[SampleRecord], fraction: float, seed: int):
    """Hold out ``round(fraction * n)`` records (chosen by seed) for validation."""
    n = len(records)
    n_val = int(round(fraction * n)) if n > 1 else 0
    order = np.random.default_rng([seed, 0x5EED]).permutation(n)
    val = sorted(order[:n_val].tolist())
    train = sorted(order[n_val:].tolist())
    return [records[i] for i in train], [records[i] for i in val]


def _load_pairs(records, stats):
    return [(normalize(load_image(r.image_path), stats), load_mask(r.mask_path)) for r in records]


def make_batch(pairs, indices: Sequence[int], cfg: RunConfig, epoch: int, offset: int):
    """Augmented (image, mask) tensors; sample ``offset + j`` of the epoch gets its own RNG stream."""
    images, masks = [], []
    for j, i in enumerate(indices):
        image, mask = pairs[i]
        p = sample_augment(mask.shape, cfg.augment, sample_rng(cfg.augment.seed, epoch, offset + j))
        images.append(apply_augment(image, p).transpose(2, 0, 1))
        masks.append(apply_augment(mask, p)[None])
    x = torch.from_numpy(np.ascontiguousarray(np.stack(images)))
    y = torch.from_numpy(np.stack(masks).astype(np.float32))
    return x, y


def _lr_lambda(cfg: RunConfig, steps_per_epoch: int, total_steps: int):
    warmup = cfg.optimizer.warmup_epochs * steps_per_epoch

    def f(step: int) -> float:
        if step < warmup:
            return (step + 1) / warmup
        if cfg.optimizer.schedule == "constant":
            return 1.0
        t = (step - warmup) / max(total_steps - warmup, 1)
        return 0.5 * (1 + math.cos(math.pi * min(t, 1.0)))
    return f


def make_optimizer(model, cfg: RunConfig):
    o = cfg.optimizer
    if o.name == "adamw":
        return torch.optim.AdamW(model.parameters(), lr=o.lr, weight_decay=o.weight_decay)
    if o.name == "adam":
        return torch.optim.Adam(model.parameters(), lr=o.lr, weight_decay=o.weight_decay)
    return torch.optim.SGD(model.parameters(), lr=o.lr, weight_decay=o.weight_decay, momentum=0.9)


# ---------------------------------------------------------------- prediction / evaluation

def resolve_mode(variant: str, mode: str) -> str:
    if mode != "auto":
        return mode
    return "pad" if variant in SWIN_VARIANTS else "tile"


def predict_probs(model, image: np.ndarray, mode: str, tiling: TilingConfig) -> np.ndarray:
    """Foreground probability (H, W) for a normalised H x W x C image."""
    x = torch.from_numpy(np.ascontiguousarray(image.transpose(2, 0, 1)))
    model.eval()
    if mode == "pad":
        prob = predict_full(model, x)
    else:
        prob = predict_tiled(model, x, tiling)
    return prob[0].numpy()


def evaluate_model(model, records, stats: DatasetStats, mode: str, tiling: TilingConfig,
                   threshold: float = 0.5) -> MetricReport:
    report = MetricReport(threshold=threshold)
    for rec in records:
        prob = predict_probs(model, normalize(load_image(rec.image_path), stats), mode, tiling)
        report.add(rec.name, prob > threshold, load_mask(rec.mask_path))
    return report


# ---------------------------------------------------------------- training

def _meta(cfg: RunConfig, in_chans: int, stats: DatasetStats, **extra) -> dict:
    return {"variant": cfg.variant, "scale": cfg.scale, "num_classes": 1, "in_chans": in_chans,
            "stats": {"mean": stats.mean, "std": stats.std}, **extra}


def train(cfg: RunConfig, resume: bool = False) -> RunRecord:
    """Run (or resume) a training job described by ``cfg``; returns the final RunRecord."""
    out = Path(cfg.out_dir)
    status = run_status(out)
    if status == "complete" and resume:
        return RunRecord(**json.loads((out / "summary.json").read_text()))
    if status != "absent" and not resume:
        raise RunError(f"run directory {out} already holds a {status} run; pass resume or pick a new --out",
                       code="run_exists")
    if status == "partial" and not (out / STATE).exists():
        # interrupted before the first epoch finished: nothing to resume from
        (out / EVENTS).unlink()
        status = "absent"
    if cfg.epoch.batch < 2 or cfg.epoch.samples_per_epoch < 2:
        raise RunError("batch and samples_per_epoch must both be at least 2", code="bad_config")
    records = scan_dataset(cfg.dataset)
    if not records:
        raise RunError(f"no image/mask pairs found under {cfg.dataset}", code="empty_dataset")
    out.mkdir(parents=True, exist_ok=True)
    t_start = time.perf_counter()

    with determinism(cfg.seed, cfg.deterministic):
        train_recs, val_recs = split_records(records, cfg.val_fraction, cfg.seed)
        stats = dataset_stats(cfg.dataset, records)
        in_chans = records[0].channels
        pairs = _load_pairs(train_recs, stats)
        spec = variant_spec(cfg.variant, cfg.scale)
        model = build(spec, 1, in_chans, seed=cfg.seed)
        optimizer = make_optimizer(model, cfg)
        steps_per_epoch = -(-cfg.epoch.samples_per_epoch // cfg.epoch.batch)
        total_steps = cfg.epoch.epochs * steps_per_epoch
        if cfg.max_steps is not None:
            total_steps = min(total_steps, cfg.max_steps)
        scheduler = torch.optim.lr_scheduler.LambdaLR(optimizer, _lr_lambda(cfg, steps_per_epoch, total_steps))
        mode = resolve_mode(cfg.variant, cfg.eval_mode)

        record = RunRecord(config=cfg.to_dict())
        best = {"score": -math.inf}
        first_epoch = 0
        if status == "partial":
            state = torch.load(out / STATE, weights_only=False)
            model.load_state_dict(state["model"])
            optimizer.load_state_dict(state["optimizer"])
            scheduler.load_state_dict(state["scheduler"])
            torch.set_rng_state(state["torch_rng"])
            record = RunRecord(**state["record"])
            best = state["best"]
            first_epoch = state["epoch"] + 1
            logged = {e.get("epoch") for e in repair_events(out) if e.get("event") == "epoch"}
            if state["epoch"] not in logged:
                # interrupted between saving state and logging the epoch
                append_event(out, state["event"])
            append_event(out, {"event": "resume", "epoch": first_epoch})
        else:
            cfg.save(out / "config.yaml")
            append_event(out, {"event": "start", "config": cfg.to_dict(), "n_train": len(train_recs),
                               "n_val": len(val_recs)})

        step = record.steps
        for epoch in range(first_epoch, cfg.epoch.epochs):
            if step >= total_steps:
                break
            t0 = time.perf_counter()
            model.train()
            order = plan_indices(len(train_recs), cfg.epoch, epoch)
            losses = []
            for offset in range(0, len(order), cfg.epoch.batch):
                if step >= total_steps:
                    break
                chunk = order[offset:offset + cfg.epoch.batch]
                if len(chunk) < 2:
                    # BatchNorm cannot normalise a 1x1 pooled map over a single sample
                    continue
                x, y = make_batch(pairs, chunk, cfg, epoch, offset)
                prob = torch.sigmoid(model(x))
                loss = total_loss(prob, y, cfg.loss)
                if not torch.isfinite(loss):
                    diag = {"event": "abort", "reason": "non-finite loss", "epoch": epoch, "step": step,
                            "batch": {"x_mean": float(x.mean()), "x_std": float(x.std()),
                                      "y_mean": float(y.mean()),
                                      "prob_min": float(prob.detach().nan_to_num(-1).min()),
                                      "prob_max": float(prob.detach().nan_to_num(2).max()),
                                      "loss": float(loss.detach())}}
                    append_event(out, diag)
                    raise NonFiniteLoss(f"non-finite loss at epoch {epoch} step {step}; "
                                        f"diagnostics in {out / EVENTS}")
                optimizer.zero_grad(set_to_none=True)
                loss.backward()
                optimizer.step()
                scheduler.step()
                losses.append(float(loss.detach()))
                step += 1
            epoch_loss = float(np.mean(losses))
            record.epoch_losses.append(epoch_loss)
            record.steps = step
            event = {"event": "epoch", "epoch": epoch, "loss": epoch_loss, "batch_losses": losses, "step": step,
                     "lr": scheduler.get_last_lr()[0], "seconds": time.perf_counter() - t0,
                     "plan": [int(i) for i in order]}
            last = epoch == cfg.epoch.epochs - 1 or step >= total_steps
            if val_recs and ((epoch + 1) % cfg.val_every == 0 or last):
                score = evaluate_model(model, val_recs, stats, mode, cfg.tiling).mean_iou
                event["val_iou"] = score
            else:
                score = -epoch_loss
            if score > best["score"]:
                best = {"score": score, "epoch": epoch}
                ckpt.save_checkpoint(model, out / "best.ckpt", _meta(cfg, in_chans, stats, epoch=epoch))
                record.checkpoints["best"] = str(out / "best.ckpt")
            ckpt_state = {"model": model.state_dict(), "optimizer": optimizer.state_dict(),
                          "scheduler": scheduler.state_dict(), "torch_rng": torch.get_rng_state(),
                          "record": asdict(record), "best": best, "epoch": epoch, "event": event}
            tmp = out / (STATE + ".tmp")
            torch.save(ckpt_state, tmp)
            os.replace(tmp, out / STATE)
            append_event(out, event)
            log.info("epoch %d loss %.5f", epoch, epoch_loss)

        ckpt.save_checkpoint(model, out / "final.ckpt", _meta(cfg, in_chans, stats, epoch=len(record.epoch_losses) - 1))
        record.checkpoints["final"] = str(out / "final.ckpt")
        record.timings["train_seconds"] = record.timings.get("train_seconds", 0.0) + time.perf_counter() - t_start
        if val_recs:
            t0 = time.perf_counter()
            report = evaluate_model(model, val_recs, stats, mode, cfg.tiling)
            report.write(out, "val_metrics")
            record.metrics = report.summary()
            record.timings["eval_seconds"] = time.perf_counter() - t0
        in_shape = (in_chans,) + tuple(cfg.augment.crop)
        with torch.device("meta"):
            meta_model = build(spec, 1, in_chans)
        record.profile = profile(meta_model, in_shape, cfg.variant).to_dict()
        record.profile.pop("per_layer", None)
        record.save(out / "summary.json")
        append_event(out, {"event": "end", "epochs": len(record.epoch_losses), "steps": step,
                           "best_epoch": best.get("epoch")})
    return record


# ---------------------------------------------------------------- other commands

def load_model(checkpoint_path, variant: Optional[str] = None):
    """Rebuild the model recorded in a checkpoint; ``variant`` overrides the recorded one."""
    meta, tensors = ckpt.read_checkpoint(checkpoint_path)
    name = variant or meta["variant"]
    model = build(variant_spec(name, meta.get("scale", "paper")), meta.get("num_classes", 1), meta.get("in_chans", 3))
    ckpt.load_into(model, tensors)
    model.eval()
    return model, meta


def _stats_from(meta: dict) -> Optional[DatasetStats]:
    s = meta.get("stats")
    return DatasetStats(s["mean"], s["std"], 0) if s else None


def cmd_evaluate(checkpoint_path, dataset, out_dir, tiling: Optional[TilingConfig] = None, mode: str = "auto",
                 variant: Optional[str] = None) -> MetricReport:
    records = scan_dataset(dataset)
    if not records:
        raise RunError(f"no image/mask pairs found under {dataset}", code="empty_dataset")
    model, meta = load_model(checkpoint_path, variant)
    name = variant or meta["variant"]
    report = evaluate_model(model, records, _stats_from(meta), resolve_mode(name, mode), tiling or TilingConfig())
    report.write(out_dir, "metrics")
    return report


def cmd_predict(checkpoint_path, image_path, out_dir, gt_mask_path=None, mode: str = "auto",
                tiling: Optional[TilingConfig] = None, variant: Optional[str] = None) -> Dict[str, Path]:
    """Write ``<stem>_mask.png`` (0/255) and ``<stem>_overlay.png``."""
    image_path = Path(image_path)
    try:
        image = load_image(image_path)
    except (FileNotFoundError, UnidentifiedImageError, OSError) as exc:
        raise RunError(f"cannot read image {image_path}: {exc}", code="bad_image") from exc
    model, meta = load_model(checkpoint_path, variant)
    if image.shape[-1] != meta.get("in_chans", 3):
        raise RunError(f"image has {image.shape[-1]} channels, model expects {meta.get('in_chans', 3)}",
                       code="bad_image")
    name = variant or meta["variant"]
    prob = predict_probs(model, normalize(image, _stats_from(meta)), resolve_mode(name, mode),
                         tiling or TilingConfig())
    pred = prob > 0.5
    gt = load_mask(gt_mask_path) if gt_mask_path else np.zeros_like(pred)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = {"mask": out / f"{image_path.stem}_mask.png", "overlay": out / f"{image_path.stem}_overlay.png"}
    save_png(paths["mask"], pred.astype(np.uint8) * 255)
    render_overlay(image, pred, gt, paths["overlay"])
    return paths


def cmd_profile(variants: Sequence[str], input_shape=(3, 224, 224), out_dir=None,
                scale: str = "paper") -> List[ProfileReport]:
    """Profile each variant on the meta device; writes ``profile.json`` and ``profile.txt`` to ``out_dir``."""
    for v in variants:
        if v not in VARIANTS:
            raise RunError(f"unknown variant {v!r}; valid names: {', '.join(VARIANTS)}", code="unknown_variant")
    reports = []
    for v in variants:
        with torch.device("meta"):
            model = build(variant_spec(v, scale), 1, input_shape[0])
        reports.append(profile(model, input_shape, v))
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        rows = [{k: r.to_dict()[k] for k in ("variant", "params", "flops", "input_shape")} for r in reports]
        (out / "profile.json").write_text(json.dumps(rows, indent=2))
        (out / "profile.txt").write_text(profile_table(reports) + "\n")
    return reports


def profile_table(reports: Sequence[ProfileReport]) -> str:
    lines = [f"{'variant':<16s} {'params (M)':>11s} {'FLOPs (G)':>11s}  input"]
    for r in reports:
        lines.append(f"{r.variant:<16s} {r.params / 1e6:11.2f} {r.flops / 1e9:11.1f}  "
                     f"{'x'.join(map(str, r.input_shape))}")
    return "\n".join(lines)


def cmd_synth_data(n: int, size: int, seed: int, out_dir, density: float = 0.2) -> Path:
    return synth_generate(out_dir, n, size, seed, density)


def overfit_run(variant: str, dataset, out_dir, steps: int = 200, scale: str = "tiny", batch: int = 4,
                lr: float = 2e-3, seed: int = 0) -> dict:
    """Memorise ``dataset`` for ``steps`` optimizer steps, then score the final model on the same images.

    No augmentation, no weight decay, no warmup and no validation split.
    """
    from .config import OptimizerConfig
    from .data import AugmentConfig, EpochPlan

    records = scan_dataset(dataset)
    if not records:
        raise RunError(f"no image/mask pairs found under {dataset}", code="empty_dataset")
    size = records[0].size
    cfg = RunConfig(variant=variant, scale=scale, dataset=str(dataset), out_dir=str(out_dir), seed=seed,
                    val_fraction=0, max_steps=steps,
                    epoch=EpochPlan(samples_per_epoch=5 * len(records), epochs=10 ** 6, batch=batch, seed=seed),
                    augment=AugmentConfig(0.0, 0.0, (0,), size, seed),
                    optimizer=OptimizerConfig(lr=lr, weight_decay=0.0, warmup_epochs=0))
    t0 = time.perf_counter()
    record = train(cfg)
    model, meta = load_model(Path(out_dir) / "final.ckpt")
    report = evaluate_model(model, records, _stats_from(meta), "pad", cfg.tiling)
    return {"variant": variant, "steps": record.steps, "train_iou": report.mean_iou, "train_f1": report.mean_f1,
            "final_loss": record.epoch_losses[-1], "seconds": time.perf_counter() - t0}
