"""Desk-scale benchmark: synthetic segmentation data, augmentation, mIoU,
retraining of derived genotypes, and forward-time measurement.

The synthetic scenes are colored geometric shapes on a textured background,
one class per shape kind plus background. Class colors are jittered and the
whole image carries pixel noise, so segmentation is learnable but not a
lookup. Generator bounds (asserted by tests): averaged over a dataset the
background covers 40-95% of pixels and every shape class at least 0.5%.

External datasets plug in through the same array contract: float images
(n, H, W, 3) in [0, 1], integer masks (n, H, W) with values < num_classes or
the ignore label 255, plus disjoint split index arrays.
"""

import math
import statistics
import time
from dataclasses import dataclass, field

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .supernet import DerivedNetwork, count_parameters

IGNORE_LABEL = 255

SPLIT_FRACTIONS = {"search-train": 0.40, "search-val": 0.15, "finetune": 0.30, "test": 0.15}

# Published results of the method this artifact reimplements; metadata only,
# printed in reports as "paper-reported, not reproduced".
REFERENCE_ROWS = (
    {"method": "GAS", "miou_pct": 71.8, "latency_ms": 9.22, "fps": 108.4,
     "input_size": "769x1537", "source": "paper-reported, not reproduced"},
    {"method": "GAS*", "miou_pct": 73.5, "latency_ms": 9.22, "fps": 108.4,
     "input_size": "769x1537", "source": "paper-reported, not reproduced"},
)


@dataclass
class ToyDataset:
    images: np.ndarray   # (n, H, W, 3) float32 in [0, 1]
    masks: np.ndarray    # (n, H, W) int64, values < num_classes
    num_classes: int
    splits: dict         # split name -> index array
    seed: int

    def split_arrays(self, name):
        idx = self.splits[name]
        return self.images[idx], self.masks[idx]

    def save(self, path):
        np.savez_compressed(
            path, images=self.images, masks=self.masks,
            num_classes=np.array([self.num_classes]), seed=np.array([self.seed]),
            **{f"split_{k}": v for k, v in self.splits.items()})

    @classmethod
    def load(cls, path):
        data = np.load(path)
        splits = {key[len("split_"):]: data[key] for key in data.files
                  if key.startswith("split_")}
        return cls(images=data["images"], masks=data["masks"],
                   num_classes=int(data["num_classes"][0]), splits=splits,
                   seed=int(data["seed"][0]))


# Shapes share one base color plus a small class tint that per-pixel noise
# largely masks: separating the classes needs spatial context, not a
# per-pixel color lookup.
_FOREGROUND_COLOR = (0.78, 0.76, 0.72)
_CLASS_TINTS = [
    (0.10, 0.00, -0.10),   # class 1: circles, slightly warm
    (-0.10, 0.00, 0.10),   # class 2: squares, slightly cool
    (0.00, 0.10, -0.05),   # class 3: triangles
    (-0.05, -0.08, 0.00),  # class 4: crosses
]
_BACKGROUND_COLOR = (0.30, 0.42, 0.33)


def _textured_background(rng, size):
    base = np.empty((size, size, 3), dtype=np.float32)
    for c in range(3):
        coarse = rng.uniform(-0.08, 0.08, size=(4, 4))
        grid = np.repeat(np.repeat(coarse, size // 4 + 1, 0), size // 4 + 1, 1)
        base[:, :, c] = _BACKGROUND_COLOR[c] + grid[:size, :size]
    return base


def _paint_shape(rng, image, mask, cls, size):
    yy, xx = np.mgrid[0:size, 0:size]
    cy, cx = rng.uniform(0.3 * size, 0.7 * size, size=2)
    radius = rng.uniform(0.16 * size, 0.3 * size)
    if cls == 1:
        region = (yy - cy) ** 2 + (xx - cx) ** 2 <= radius ** 2
    elif cls == 2:
        region = (np.abs(yy - cy) <= radius) & (np.abs(xx - cx) <= radius)
    elif cls == 3:
        region = (yy >= cy - radius) & (yy <= cy + radius) & \
                 (np.abs(xx - cx) <= (yy - (cy - radius)) / 2 + 1)
    else:
        bar = max(int(radius / 2), 1)
        region = ((np.abs(yy - cy) <= bar) & (np.abs(xx - cx) <= radius)) | \
                 ((np.abs(xx - cx) <= bar) & (np.abs(yy - cy) <= radius))
    color = (np.array(_FOREGROUND_COLOR) + np.array(_CLASS_TINTS[cls - 1])
             + rng.uniform(-0.08, 0.08, size=3))
    image[region] = color.astype(np.float32)
    mask[region] = cls


def make_toy_dataset(seed, n_images, size, num_classes, total_stride=8):
    """Procedural segmentation scenes; identical for identical seeds."""
    if num_classes < 2 or num_classes > 5:
        raise ValueError(f"num_classes must lie in [2, 5], got {num_classes}")
    if size % total_stride != 0:
        raise ValueError(f"size {size} not divisible by total stride {total_stride}")
    rng = np.random.default_rng(seed)
    images = np.empty((n_images, size, size, 3), dtype=np.float32)
    masks = np.zeros((n_images, size, size), dtype=np.int64)
    shape_classes = list(range(1, num_classes))
    for i in range(n_images):
        image = _textured_background(rng, size)
        mask = np.zeros((size, size), dtype=np.int64)
        count = rng.integers(1, 4)
        classes = rng.choice(shape_classes, size=count, replace=True)
        for cls in classes:
            _paint_shape(rng, image, mask, int(cls), size)
        image += rng.normal(0.0, 0.10, size=image.shape).astype(np.float32)
        images[i] = np.clip(image, 0.0, 1.0)
        masks[i] = mask
    order = rng.permutation(n_images)
    splits = {}
    start = 0
    for name, frac in SPLIT_FRACTIONS.items():
        count = int(round(frac * n_images))
        if name == "test":
            count = n_images - start
        splits[name] = np.sort(order[start:start + count])
        start += count
    return ToyDataset(images=images, masks=masks, num_classes=num_classes,
                      splits=splits, seed=seed)


@dataclass
class AugmentParams:
    flip: bool
    scale: float
    offset_y: int
    offset_x: int


def _resize_image(image, new_h, new_w):
    t = torch.from_numpy(image).permute(2, 0, 1).unsqueeze(0)
    out = F.interpolate(t, size=(new_h, new_w), mode="bilinear", align_corners=False)
    return out.squeeze(0).permute(1, 2, 0).numpy()


def _resize_mask(mask, new_h, new_w):
    h, w = mask.shape
    rows = np.clip(((np.arange(new_h) + 0.5) * h / new_h).astype(np.int64), 0, h - 1)
    cols = np.clip(((np.arange(new_w) + 0.5) * w / new_w).astype(np.int64), 0, w - 1)
    return mask[rows][:, cols]


def apply_augment(image, mask, params, crop_size, ignore=IGNORE_LABEL):
    """Deterministic application of augmentation parameters.

    Masks use nearest-neighbor resampling; padding fills with the ignore
    label so padded pixels never enter the loss.
    """
    if params.flip:
        image = image[:, ::-1].copy()
        mask = mask[:, ::-1].copy()
    h, w = mask.shape
    new_h = max(int(round(h * params.scale)), 1)
    new_w = max(int(round(w * params.scale)), 1)
    if (new_h, new_w) != (h, w):
        image = _resize_image(image, new_h, new_w)
        mask = _resize_mask(mask, new_h, new_w)
    pad_h = max(crop_size - image.shape[0], 0)
    pad_w = max(crop_size - image.shape[1], 0)
    if pad_h or pad_w:
        image = np.pad(image, ((0, pad_h), (0, pad_w), (0, 0)))
        mask = np.pad(mask, ((0, pad_h), (0, pad_w)), constant_values=ignore)
    oy = min(params.offset_y, image.shape[0] - crop_size)
    ox = min(params.offset_x, image.shape[1] - crop_size)
    image = image[oy:oy + crop_size, ox:ox + crop_size]
    mask = mask[oy:oy + crop_size, ox:ox + crop_size]
    return np.ascontiguousarray(image, dtype=np.float32), np.ascontiguousarray(mask)


def augment(image, mask, rng, crop_size=None, scale_range=(0.5, 2.0)):
    """Random flip, random resize within `scale_range`, random fixed-size crop."""
    crop_size = crop_size or mask.shape[0]
    flip = bool(rng.random() < 0.5)
    scale = float(rng.uniform(*scale_range))
    new_h = max(int(round(mask.shape[0] * scale)), crop_size)
    new_w = max(int(round(mask.shape[1] * scale)), crop_size)
    params = AugmentParams(
        flip=flip, scale=scale,
        offset_y=int(rng.integers(0, new_h - crop_size + 1)),
        offset_x=int(rng.integers(0, new_w - crop_size + 1)),
    )
    return apply_augment(image, mask, params, crop_size)


def confusion_matrix(pred, truth, num_classes, ignore=IGNORE_LABEL):
    """C x C counts, rows = truth, columns = prediction; ignore excluded."""
    pred = np.asarray(pred).reshape(-1)
    truth = np.asarray(truth).reshape(-1)
    valid = truth != ignore
    pred = pred[valid]
    truth = truth[valid]
    if pred.size and (pred.min() < 0 or pred.max() >= num_classes):
        raise ValueError("prediction labels outside [0, num_classes)")
    counts = np.bincount(truth * num_classes + pred,
                         minlength=num_classes * num_classes)
    return counts.reshape(num_classes, num_classes).astype(np.int64)


@dataclass
class MiouResult:
    per_class: list   # IoU per class; None for classes absent from pred and truth
    miou: float
    present: list     # class indices included in the mean


def miou(confusion):
    """IoU per class and their mean; classes absent from both sides excluded."""
    confusion = np.asarray(confusion)
    if confusion.sum() == 0:
        raise ValueError("confusion matrix is empty (no labeled pixels)")
    num_classes = confusion.shape[0]
    per_class = []
    present = []
    for c in range(num_classes):
        tp = confusion[c, c]
        fn = confusion[c].sum() - tp
        fp = confusion[:, c].sum() - tp
        denom = tp + fp + fn
        if denom == 0:
            per_class.append(None)
            continue
        per_class.append(float(tp / denom))
        present.append(c)
    values = [per_class[c] for c in present]
    return MiouResult(per_class=per_class, miou=float(np.mean(values)), present=present)


@dataclass
class EvalReport:
    per_class_iou: list
    miou: float
    confusion: list
    latency_ms: float
    fps: float
    input_size: int
    num_parameters: int = 0
    extra: dict = field(default_factory=dict)

    def to_dict(self):
        return {
            "per_class_iou": self.per_class_iou,
            "miou": self.miou,
            "confusion": self.confusion,
            "latency_ms": self.latency_ms,
            "fps": self.fps,
            "input_size": self.input_size,
            "num_parameters": self.num_parameters,
            "extra": self.extra,
            "reference": [dict(r) for r in REFERENCE_ROWS],
        }


def format_report_table(report, label="this-run"):
    lines = [
        f"{'method':<28} {'mIoU (%)':>9} {'latency (ms)':>13} {'FPS':>8}  source",
        "-" * 78,
        f"{label:<28} {report.miou * 100:>9.2f} {report.latency_ms:>13.3f} "
        f"{report.fps:>8.1f}  measured on this host ({report.input_size}x{report.input_size})",
    ]
    for row in REFERENCE_ROWS:
        lines.append(
            f"{row['method']:<28} {row['miou_pct']:>9.2f} {row['latency_ms']:>13.3f} "
            f"{row['fps']:>8.1f}  {row['source']} ({row['input_size']})")
    return "\n".join(lines) + "\n"


def _to_batches(images, masks, indices, batch_size):
    for start in range(0, len(indices), batch_size):
        idx = indices[start:start + batch_size]
        x = torch.from_numpy(images[idx]).permute(0, 3, 1, 2).contiguous()
        y = torch.from_numpy(masks[idx])
        yield x, y


def evaluate_network(net, images, masks, num_classes, batch_size=8):
    net.eval()
    total = np.zeros((num_classes, num_classes), dtype=np.int64)
    with torch.no_grad():
        for x, y in _to_batches(images, masks, np.arange(len(images)), batch_size):
            pred = net(x).argmax(dim=1).numpy()
            total += confusion_matrix(pred, y.numpy(), num_classes)
    return total


def bootstrapped_ce(logits, target, fraction, ignore=IGNORE_LABEL):
    """Cross-entropy over the hardest `fraction` of labeled pixels."""
    losses = F.cross_entropy(logits, target, ignore_index=ignore, reduction="none")
    valid = losses[target != ignore].reshape(-1)
    if valid.numel() == 0:
        raise ValueError("no labeled pixels in batch")
    if fraction >= 1.0:
        return valid.mean()
    k = max(int(fraction * valid.numel()), 1)
    top, _ = torch.topk(valid, k)
    return top.mean()


class FinetuneDiverged(RuntimeError):
    def __init__(self, trajectory):
        self.trajectory = trajectory
        super().__init__("non-finite finetune loss")


def finetune(genotype, layout, dataset, cfg):
    """Train the derived network from scratch and evaluate on the test split.

    Poly learning-rate decay to zero, hardest-pixel bootstrapped CE, and the
    flip/scale/crop augmentation. Returns (network, EvalReport, trajectory).
    """
    torch.manual_seed(cfg.seed)
    net = DerivedNetwork(genotype, layout)
    rng = np.random.default_rng(cfg.seed)
    images, masks = dataset.split_arrays("finetune")
    crop = cfg.crop_size or dataset.images.shape[1]
    opt = torch.optim.SGD(net.parameters(), lr=cfg.lr, momentum=cfg.momentum,
                          weight_decay=cfg.weight_decay)
    steps_per_epoch = max(math.ceil(len(images) / cfg.batch_size), 1)
    total_steps = cfg.epochs * steps_per_epoch
    trajectory = []
    step = 0
    net.train()
    for _ in range(cfg.epochs):
        order = rng.permutation(len(images))
        for start in range(0, len(order), cfg.batch_size):
            idx = order[start:start + cfg.batch_size]
            batch_x, batch_y = [], []
            for i in idx:
                if cfg.augment:
                    img, msk = augment(images[i], masks[i], rng, crop_size=crop)
                else:
                    img, msk = images[i], masks[i]
                batch_x.append(img)
                batch_y.append(msk)
            x = torch.from_numpy(np.stack(batch_x)).permute(0, 3, 1, 2).contiguous()
            y = torch.from_numpy(np.stack(batch_y))
            lr = cfg.lr * (1 - step / total_steps) ** cfg.poly_power
            for group in opt.param_groups:
                group["lr"] = lr
            opt.zero_grad()
            loss = bootstrapped_ce(net(x), y, cfg.bootstrap_fraction)
            if not bool(torch.isfinite(loss)):
                raise FinetuneDiverged(trajectory)
            loss.backward()
            opt.step()
            trajectory.append({"step": step, "loss": loss.item(), "lr": lr})
            step += 1
    test_images, test_masks = dataset.split_arrays("test")
    confusion = evaluate_network(net, test_images, test_masks, dataset.num_classes,
                                 batch_size=cfg.eval_batch_size)
    result = miou(confusion)
    latency_ms, fps = measure_fps(net, dataset.images.shape[1], trials=10)
    report = EvalReport(
        per_class_iou=result.per_class, miou=result.miou,
        confusion=confusion.tolist(), latency_ms=latency_ms, fps=fps,
        input_size=dataset.images.shape[1], num_parameters=count_parameters(net))
    return net, report, trajectory


def measure_fps(net, input_size, trials=30, device="cpu"):
    """Median forward latency (ms) and FPS at batch 1; forward only."""
    if trials < 10:
        raise ValueError(f"need trials >= 10, got {trials}")
    device = torch.device(device)
    if device.type == "cuda" and not torch.cuda.is_available():
        raise RuntimeError("timing backend unavailable: CUDA requested but not present")
    net = net.to(device).eval()
    x = torch.randn(1, 3, input_size, input_size, device=device)
    times = []
    with torch.no_grad():
        for _ in range(5):
            net(x)
        for _ in range(trials):
            if device.type == "cuda":
                torch.cuda.synchronize(device)
            t0 = time.perf_counter()
            net(x)
            if device.type == "cuda":
                torch.cuda.synchronize(device)
            times.append((time.perf_counter() - t0) * 1e3)
    latency_ms = statistics.median(times)
    return latency_ms, 1000.0 / latency_ms
