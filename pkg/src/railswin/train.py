"""Training loop, toy detection head, checkpoints, timing, and ablation."""

from __future__ import annotations

import json
import os
import time
from dataclasses import dataclass, field, replace

import numpy as np

from . import tensor as T
from .data.coco import Dataset, load_coco
from .data.stats import category_stats
from .errors import DatasetEmpty, InvalidParam, NonFiniteLoss, ParseError, ShapeMismatch
from .metrics import Detection, evaluate
from .data.boxes import BBox
from .optim import AdamState, adamw_step
from .swin import (
    CbamPlacement,
    SwinBackbone,
    SwinConfig,
    config_from_dict,
    config_to_dict,
    nano_config,
)
from .synth import SyntheticSpec, generate_synthetic
from .tensor import Tensor, backward, no_grad

TASKS = ("classification", "localization")

WARMUP_ITERS = 5


@dataclass
class TrainConfig:
    swin: SwinConfig = field(default_factory=nano_config)
    lr: float = 1e-3
    weight_decay: float = 0.05
    betas: tuple = (0.9, 0.999)
    epochs: int = 16
    batch_size: int = 16
    seed: int = 0
    dataset: str = "synthetic"  # "synthetic" or a path to a COCO-style JSON
    timing_log_path: str | None = None
    task: str = "classification"
    max_iterations: int | None = None
    synthetic: SyntheticSpec | None = None

    def __post_init__(self):
        self.betas = tuple(float(b) for b in self.betas)
        self.validate()

    def validate(self):
        if self.lr <= 0:
            raise InvalidParam("lr must be positive")
        if not all(0.0 <= b < 1.0 for b in self.betas) or len(self.betas) != 2:
            raise InvalidParam("betas must be two values in [0, 1)")
        if self.epochs < 1:
            raise InvalidParam("epochs must be >= 1")
        if self.batch_size < 1:
            raise InvalidParam("batch_size must be >= 1")
        if self.task not in TASKS:
            raise InvalidParam(f"task must be one of {TASKS}")
        if self.weight_decay < 0:
            raise InvalidParam("weight_decay must be >= 0")


_TRAIN_KEYS = ("swin", "lr", "weight_decay", "betas", "epochs", "batch_size", "seed",
               "dataset", "timing_log_path", "task", "max_iterations", "synthetic")
_SYNTH_KEYS = ("num_images", "image_size", "categories", "instances_per_image",
               "small_fraction", "noise_level", "seed")


def train_config_to_dict(cfg):
    doc = {
        "swin": config_to_dict(cfg.swin),
        "lr": cfg.lr,
        "weight_decay": cfg.weight_decay,
        "betas": list(cfg.betas),
        "epochs": cfg.epochs,
        "batch_size": cfg.batch_size,
        "seed": cfg.seed,
        "dataset": cfg.dataset,
        "timing_log_path": cfg.timing_log_path,
        "task": cfg.task,
        "max_iterations": cfg.max_iterations,
        "synthetic": None,
    }
    if cfg.synthetic is not None:
        s = cfg.synthetic
        doc["synthetic"] = {
            "num_images": s.num_images, "image_size": list(s.image_size),
            "categories": list(s.categories),
            "instances_per_image": list(s.instances_per_image),
            "small_fraction": s.small_fraction, "noise_level": s.noise_level,
            "seed": s.seed,
        }
    return doc


def train_config_from_dict(doc):
    if not isinstance(doc, dict):
        raise ParseError("train config must be a JSON object")
    unknown = set(doc) - set(_TRAIN_KEYS)
    if unknown:
        raise ParseError(f"unknown train config keys: {sorted(unknown)}")
    if "swin" not in doc:
        raise ParseError("train config needs a 'swin' section")
    synth = None
    if doc.get("synthetic") is not None:
        sdoc = doc["synthetic"]
        unknown = set(sdoc) - set(_SYNTH_KEYS)
        if unknown:
            raise ParseError(f"unknown synthetic keys: {sorted(unknown)}")
        synth = SyntheticSpec(**sdoc)
    try:
        return TrainConfig(
            swin=config_from_dict(doc["swin"]),
            lr=float(doc.get("lr", 1e-3)),
            weight_decay=float(doc.get("weight_decay", 0.05)),
            betas=tuple(doc.get("betas", (0.9, 0.999))),
            epochs=int(doc.get("epochs", 8)),
            batch_size=int(doc.get("batch_size", 8)),
            seed=int(doc.get("seed", 0)),
            dataset=doc.get("dataset", "synthetic"),
            timing_log_path=doc.get("timing_log_path"),
            task=doc.get("task", "classification"),
            max_iterations=doc.get("max_iterations"),
            synthetic=synth,
        )
    except (TypeError, ValueError) as e:
        raise ParseError(f"bad train config value: {e}") from e


def load_train_config(path):
    try:
        with open(path) as fh:
            doc = json.load(fh)
    except (OSError, json.JSONDecodeError) as e:
        raise ParseError(f"cannot read train config {path}: {e}") from e
    return train_config_from_dict(doc)


# ---------------------------------------------------------------------------
# detection/classification head


@dataclass
class HeadParams:
    task: str
    w: Tensor
    b: Tensor
    num_classes: int

    def named_parameters(self, prefix="head."):
        return [(prefix + "w", self.w), (prefix + "b", self.b)]


def init_head_params(cfg, num_classes, task):
    if task == "classification":
        dim = cfg.stage_dim(3)
        out = num_classes
    else:
        dim = cfg.stage_dim(2)
        out = 5 + num_classes  # objectness, 4 offsets, class scores
    # zero-init: logits start flat, avoiding the first-step loss spike
    w = Tensor(np.zeros((out, dim)), requires_grad=True)
    b = Tensor(np.zeros(out), requires_grad=True)
    return HeadParams(task=task, w=w, b=b, num_classes=num_classes)


def head_forward(features, head):
    """Classification: pooled stage-4 logits. Localization: per-cell raw maps."""
    if head.task == "classification":
        f = features[3]
        if f.shape[-3] != head.w.shape[1]:
            raise ShapeMismatch(f"head dim {head.w.shape[1]} != feature dim {f.shape[-3]}")
        pooled = T.pool_spatial(f, "avg")
        vec = T.reshape(pooled, pooled.shape[:-2])
        return T.linear(vec, head.w, head.b)
    f = features[2]
    if f.shape[-3] != head.w.shape[1]:
        raise ShapeMismatch(f"head dim {head.w.shape[1]} != feature dim {f.shape[-3]}")
    h, w = f.shape[-2], f.shape[-1]
    n = f.ndim - 3
    grid = T.transpose(f, tuple(range(n)) + (n + 1, n + 2, n))  # [..., h, w, D]
    cells = T.reshape(grid, f.shape[:-3] + (h * w, f.shape[-3]))
    return T.linear(cells, head.w, head.b)


def decode_detections(raw, grid_hw, stride, image_id, image_size, cat_ids,
                      score_thresh=0.05, max_dets=100):
    """Turn per-cell raw outputs [cells, 5+K] into clamped Detection records.

    ``cat_ids`` maps class index -> dataset category id.
    """
    gh, gw = grid_hw
    H, W = image_size
    obj = 1.0 / (1.0 + np.exp(-np.clip(raw[:, 0], -50, 50)))
    offs = raw[:, 1:5]
    cls = raw[:, 5:]
    cls = cls - cls.max(axis=1, keepdims=True)
    probs = np.exp(cls)
    probs /= probs.sum(axis=1, keepdims=True)
    cats = probs.argmax(axis=1)
    scores = obj * probs[np.arange(len(cats)), cats]
    out = []
    for cell in np.argsort(-scores, kind="stable"):
        if scores[cell] < score_thresh or len(out) >= max_dets:
            break
        i, j = divmod(int(cell), gw)
        cx = (j + 0.5 + offs[cell, 0]) * stride
        cy = (i + 0.5 + offs[cell, 1]) * stride
        bw = float(np.exp(np.clip(offs[cell, 2], -8, 8)) * stride)
        bh = float(np.exp(np.clip(offs[cell, 3], -8, 8)) * stride)
        box = BBox(cx - bw / 2.0, cy - bh / 2.0, bw, bh).clamped(W, H)
        if box.area <= 0:
            continue
        out.append(Detection(image_id=image_id, box=box,
                             category_id=cat_ids[int(cats[cell])],
                             score=float(min(max(scores[cell], 0.0), 1.0))))
    return out


def _localization_targets(batch_images, grid_hw, stride, cat_index):
    gh, gw = grid_hw
    cells = gh * gw
    B = len(batch_images)
    obj = np.zeros((B, cells))
    pos_idx, pos_cls, pos_off = [], [], []
    for b, im in enumerate(batch_images):
        for box, cat in im.instances:
            cx, cy = box.x + box.w / 2.0, box.y + box.h / 2.0
            j = min(int(cx // stride), gw - 1)
            i = min(int(cy // stride), gh - 1)
            cell = i * gw + j
            obj[b, cell] = 1.0
            pos_idx.append(b * cells + cell)
            pos_cls.append(cat_index[cat])
            pos_off.append([cx / stride - (j + 0.5), cy / stride - (i + 0.5),
                            np.log(max(box.w, 1e-3) / stride),
                            np.log(max(box.h, 1e-3) / stride)])
    return obj, np.array(pos_idx, dtype=np.int64), np.array(pos_cls, dtype=np.int64), \
        np.array(pos_off, dtype=np.float64)


def localization_loss(raw, batch_images, grid_hw, stride, cat_index):
    """Objectness BCE over all cells + class CE and smooth-L1 at positives."""
    B, cells, width = raw.shape
    obj_t, pos_idx, pos_cls, pos_off = _localization_targets(
        batch_images, grid_hw, stride, cat_index)
    flat = T.reshape(raw, (B * cells, width))
    obj_logits = T.reshape(T.slice_axis(flat, -1, 0, 1), (B * cells,))
    loss = T.bce_with_logits(obj_logits, obj_t.reshape(-1))
    if len(pos_idx):
        rows = T.take(flat, pos_idx)
        offs = T.slice_axis(rows, -1, 1, 5)
        cls_logits = T.slice_axis(rows, -1, 5, width)
        loss = loss + T.smooth_l1(offs, pos_off) + T.cross_entropy(cls_logits, pos_cls)
    return loss


# ---------------------------------------------------------------------------
# timing


@dataclass
class IterTimingLog:
    seconds: list = field(default_factory=list)
    warmup: int = WARMUP_ITERS

    def retained(self):
        return self.seconds[self.warmup:]

    def mean(self):
        r = self.retained()
        return float(np.mean(r)) if r else 0.0

    def std(self):
        r = self.retained()
        return float(np.std(r)) if r else 0.0

    def to_csv(self):
        lines = ["iteration,seconds"]
        lines += [f"{i + 1},{s!r}" for i, s in enumerate(self.seconds)]
        return "\n".join(lines) + "\n"


# ---------------------------------------------------------------------------
# dataset plumbing


def _load_training_data(cfg):
    if cfg.dataset == "synthetic":
        spec = cfg.synthetic
        if spec is None:
            spec = SyntheticSpec(image_size=cfg.swin.input_size, seed=cfg.seed)
        data = generate_synthetic(spec)
    else:
        data = load_coco(cfg.dataset)
        data.images = [im for im in data.images if im.pixels is not None]
    if not data.images:
        raise DatasetEmpty(f"no usable images in dataset {cfg.dataset!r}")
    return data


def _image_tensor(images):
    shapes = {im.pixels.shape for im in images}
    if len(shapes) > 1:
        raise InvalidParam(f"batch mixes image shapes {sorted(shapes)}; "
                           "training expects a uniform-size dataset")
    arr = np.stack([im.pixels.astype(np.float64) for im in images])
    arr = arr / 127.5 - 1.0
    if arr.ndim == 3:
        arr = arr[:, None, :, :]
    else:
        arr = arr.transpose(0, 3, 1, 2)
    return Tensor(arr)


def _class_label(image, cat_index):
    if not image.instances:
        raise DatasetEmpty(f"image {image.id} has no instances to classify")
    return cat_index[image.instances[0][1]]


# ---------------------------------------------------------------------------
# checkpointing


def save_checkpoint(path, cfg, backbone, head, adam_state, named, iteration):
    arrays = {f"param.{name}": t.data for name, t in named}
    for (name, _), m, v in zip(named, adam_state.m, adam_state.v):
        arrays[f"adam_m.{name}"] = m
        arrays[f"adam_v.{name}"] = v
    meta = {
        "config": train_config_to_dict(cfg),
        "iteration": iteration,
        "adam_t": adam_state.t,
        "in_channels": backbone.in_channels,
        "num_classes": head.num_classes,
        "param_names": [name for name, _ in named],
    }
    np.savez(path, meta=np.array(json.dumps(meta)), **arrays)


def load_checkpoint(path):
    """Rebuild (cfg, backbone, head, adam_state, meta) from an .npz file."""
    with np.load(path) as blob:
        meta = json.loads(str(blob["meta"]))
        cfg = train_config_from_dict(meta["config"])
        backbone = SwinBackbone(cfg.swin, in_channels=meta["in_channels"])
        head = init_head_params(cfg.swin, meta["num_classes"], cfg.task)
        named = backbone.named_parameters() + head.named_parameters()
        by_name = dict(named)
        if set(meta["param_names"]) != set(by_name):
            raise ParseError(f"checkpoint {path} does not match the config's parameter set")
        for name, t in named:
            t.data = blob[f"param.{name}"].copy()
        adam = AdamState(m=[blob[f"adam_m.{name}"].copy() for name, _ in named],
                         v=[blob[f"adam_v.{name}"].copy() for name, _ in named],
                         t=meta["adam_t"])
    return cfg, backbone, head, adam, meta


# ---------------------------------------------------------------------------
# the loop


@dataclass
class TrainResult:
    losses: list
    timing: IterTimingLog
    backbone: SwinBackbone
    head: HeadParams
    data: Dataset
    cat_index: dict
    checkpoint_path: str | None = None

    def loss_curve_csv(self):
        lines = ["iteration,loss"]
        lines += [f"{i + 1},{v!r}" for i, v in enumerate(self.losses)]
        return "\n".join(lines) + "\n"


def train(cfg, out_dir=None, resume=None, data=None):
    """Run the configured training; single-threaded and bit-deterministic.

    Writes loss_curve.csv, timing.csv and checkpoint.npz under ``out_dir``
    when given.  ``resume`` continues from a checkpoint produced by a
    previous run of the same config.
    """
    if data is None:
        data = _load_training_data(cfg)
    cat_ids = sorted(data.categories)
    cat_index = {cid: i for i, cid in enumerate(cat_ids)}
    num_classes = len(cat_ids)
    in_channels = 1 if data.images[0].pixels.ndim == 2 else 3

    start_iteration = 0
    if resume is not None:
        cfg_ck, backbone, head, adam_state, meta = load_checkpoint(resume)
        if config_to_dict(cfg_ck.swin) != config_to_dict(cfg.swin):
            raise InvalidParam("resume checkpoint was built for a different backbone config")
        start_iteration = meta["iteration"]
    else:
        backbone = SwinBackbone(cfg.swin, in_channels=in_channels)
        head = init_head_params(cfg.swin, num_classes, cfg.task)
        named = backbone.named_parameters() + head.named_parameters()
        adam_state = AdamState.init([t for _, t in named])

    named = backbone.named_parameters() + head.named_parameters()
    params = [t for _, t in named]

    if cfg.task == "localization":
        gh = cfg.swin.input_size[0] // (cfg.swin.patch_size * 4)
        gw = cfg.swin.input_size[1] // (cfg.swin.patch_size * 4)
        stride = cfg.swin.patch_size * 4

    n = len(data.images)
    iters_per_epoch = (n + cfg.batch_size - 1) // cfg.batch_size
    total = cfg.epochs * iters_per_epoch
    if cfg.max_iterations is not None:
        total = min(total, cfg.max_iterations)

    losses = []
    timing = IterTimingLog()
    iteration = start_iteration
    order, order_epoch = None, -1
    while iteration < total:
        t0 = time.perf_counter()
        epoch = iteration // iters_per_epoch
        if epoch != order_epoch:
            # epoch order is random-access (seeded per epoch) so a resumed
            # run sees exactly the batches a fresh run would
            order = np.random.default_rng([cfg.seed + 1, epoch]).permutation(n)
            order_epoch = epoch
        lo = (iteration % iters_per_epoch) * cfg.batch_size
        batch = [data.images[k] for k in order[lo:lo + cfg.batch_size]]
        x = _image_tensor(batch)

        features = backbone.forward(x)
        if cfg.task == "classification":
            logits = head_forward(features, head)
            labels = np.array([_class_label(im, cat_index) for im in batch])
            loss = T.cross_entropy(logits, labels)
        else:
            raw = head_forward(features, head)
            loss = localization_loss(raw, batch, (gh, gw), stride, cat_index)

        value = loss.item()
        if not np.isfinite(value):
            raise NonFiniteLoss(f"loss became {value} at iteration {iteration + 1}")
        backward(loss)
        adamw_step(params, [p.grad for p in params], adam_state, cfg.lr,
                   cfg.betas, 1e-8, cfg.weight_decay)
        for p in params:
            p.grad = None
        losses.append(value)
        timing.seconds.append(time.perf_counter() - t0)
        iteration += 1

    result = TrainResult(losses=losses, timing=timing, backbone=backbone, head=head,
                         data=data, cat_index=cat_index)
    if out_dir is not None:
        os.makedirs(out_dir, exist_ok=True)
        with open(os.path.join(out_dir, "loss_curve.csv"), "w") as fh:
            fh.write(result.loss_curve_csv())
        with open(os.path.join(out_dir, "timing.csv"), "w") as fh:
            fh.write(timing.to_csv())
        ckpt = os.path.join(out_dir, "checkpoint.npz")
        named = backbone.named_parameters() + head.named_parameters()
        save_checkpoint(ckpt, cfg, backbone, head, adam_state, named, iteration)
        result.checkpoint_path = ckpt
    if cfg.timing_log_path:
        with open(cfg.timing_log_path, "w") as fh:
            fh.write(timing.to_csv())
    return result


def moving_average(values, window):
    """Mean of the last ``window`` entries ending at each index (1-based tail)."""
    if len(values) < window:
        raise InvalidParam(f"need at least {window} values")
    return float(np.mean(values[-window:]))


# ---------------------------------------------------------------------------
# evaluation of a trained localization model


def predict_detections(backbone, head, dataset, score_thresh=0.05, max_dets=100):
    if head.task != "localization":
        raise InvalidParam("detection decoding needs a localization head")
    stride = backbone.cfg.patch_size * 4
    cat_ids = sorted(dataset.categories)
    out = []
    with no_grad():
        for im in dataset.images:
            x = _image_tensor([im])
            raw = head_forward(backbone.forward(x), head)
            gh = im.height // stride
            gw = im.width // stride
            out.extend(decode_detections(raw.data[0], (gh, gw), stride, im.id,
                                         (im.height, im.width), cat_ids,
                                         score_thresh=score_thresh, max_dets=max_dets))
    return out


# ---------------------------------------------------------------------------
# ablation over placements


ABLATION_CSV_COLUMNS = ("variant", "map50", "map75", "ar100",
                        "iter_time_mean", "iter_time_std",
                        "map50_small", "map50_regular")


@dataclass
class AblationRun:
    variant: str
    seed: int
    report: object
    timing: IterTimingLog
    ap50_small: float | None = None
    ap50_regular: float | None = None


@dataclass
class AblationResult:
    runs: list
    summary: list  # one dict per variant, ABLATION_CSV_COLUMNS keys

    def to_csv(self):
        lines = [",".join(ABLATION_CSV_COLUMNS)]
        for row in self.summary:
            lines.append(",".join(repr(row[c]) if isinstance(row[c], float) else str(row[c])
                                  for c in ABLATION_CSV_COLUMNS))
        return "\n".join(lines) + "\n"


def run_ablation(base_cfg, variants=None, seeds=(0,), val_images=60):
    """Train/evaluate every placement variant on identical data per seed.

    Numbers are reported as measured; no attempt is made to reproduce
    full-scale results.
    """
    if variants is None:
        variants = [CbamPlacement.NONE, CbamPlacement.MODEL,
                    CbamPlacement.STAGE, CbamPlacement.BLOCK]
    if not seeds:
        raise InvalidParam("run_ablation needs at least one seed")
    runs = []
    for variant in variants:
        for seed in seeds:
            swin = replace(base_cfg.swin, placement=variant, seed=seed)
            synth = base_cfg.synthetic or SyntheticSpec(image_size=swin.input_size)
            cfg = replace(base_cfg, swin=swin, seed=seed, task="localization",
                          synthetic=replace(synth, seed=seed))
            result = train(cfg)
            val = generate_synthetic(replace(cfg.synthetic, seed=seed + 100_000,
                                             num_images=val_images))
            dets = predict_detections(result.backbone, result.head, val)
            report = evaluate(dets, val)
            size_class = {s.category_id: s.size_class for s in category_stats(val)}
            small = [pc.ap50 for pc in report.per_category
                     if size_class.get(pc.category_id) == "small"]
            regular = [pc.ap50 for pc in report.per_category
                       if size_class.get(pc.category_id) == "regular"]
            runs.append(AblationRun(
                variant=variant.value, seed=seed, report=report, timing=result.timing,
                ap50_small=float(np.mean(small)) if small else None,
                ap50_regular=float(np.mean(regular)) if regular else None))

    summary = []
    for variant in variants:
        mine = [r for r in runs if r.variant == variant.value]
        times = [s for r in mine for s in r.timing.retained()]
        small = [r.ap50_small for r in mine if r.ap50_small is not None]
        regular = [r.ap50_regular for r in mine if r.ap50_regular is not None]
        summary.append({
            "variant": variant.value,
            "map50": float(np.mean([r.report.map50 for r in mine])),
            "map75": float(np.mean([r.report.map75 for r in mine])),
            "ar100": float(np.mean([r.report.mar100 for r in mine])),
            "iter_time_mean": float(np.mean(times)) if times else 0.0,
            "iter_time_std": float(np.std(times)) if times else 0.0,
            "map50_small": float(np.mean(small)) if small else 0.0,
            "map50_regular": float(np.mean(regular)) if regular else 0.0,
        })
    return AblationResult(runs=runs, summary=summary)


def bench(cfg, iters):
    """Measure per-iteration wall time over ``iters`` training iterations."""
    if iters < 1:
        raise InvalidParam("bench needs iters >= 1")
    cfg = replace(cfg, max_iterations=iters,
                  epochs=max(cfg.epochs, iters))  # enough epochs to cover iters
    result = train(cfg)
    return result.timing
