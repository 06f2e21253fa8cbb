"""Training loop, augmentation, class weighting and head-only field adaptation."""
from __future__ import annotations

import copy
import csv
import io
import logging
import math
import warnings
from dataclasses import asdict, dataclass, field

import cv2
import numpy as np

from . import evaluation
from .arch import SegmentationNetwork
from .imgproc import assemble_input_volume
from .nn.functional import softmax_pixelwise, weighted_cross_entropy
from .nn.optim import AdamState, adam_step
from .synth import Sample

log = logging.getLogger(__name__)

DESK_SIZE = (128, 96)  # width, height; both divisible by 16


class TrainingError(RuntimeError):
    pass


# --------------------------------------------------------------------------
# class weights
# --------------------------------------------------------------------------

def class_frequencies(label_masks) -> np.ndarray:
    counts = np.zeros(evaluation.NUM_CLASSES, dtype=np.float64)
    for lab in label_masks:
        counts += np.bincount(np.asarray(lab).ravel(), minlength=evaluation.NUM_CLASSES)[:3]
    if counts.sum() == 0:
        raise ValueError("cannot compute class weights of an empty dataset")
    return counts / counts.sum()


def median_frequency_weights(freq) -> np.ndarray:
    """``w_c = median(freq) / freq_c``; absent classes get weight 0 and a warning."""
    freq = np.asarray(freq, dtype=np.float64)
    present = freq > 0
    if not present.any():
        raise ValueError("no labeled pixels")
    med = np.median(freq)
    weights = np.zeros_like(freq)
    weights[present] = med / freq[present]
    for k in np.flatnonzero(~present):
        warnings.warn(f"class {evaluation.CLASS_NAMES[k]!r} is absent from the dataset; "
                      f"its weight is set to 0", stacklevel=3)
    return weights


def compute_class_weights(dataset) -> np.ndarray:
    """Median-frequency balancing over a nonempty sequence of samples or label masks."""
    masks = [s.labels if isinstance(s, Sample) else s for s in dataset]
    if not masks:
        raise ValueError("cannot compute class weights of an empty dataset")
    return median_frequency_weights(class_frequencies(masks))


# --------------------------------------------------------------------------
# augmentation
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class AugmentParams:
    rotation: float = 0.0      # degrees
    scale: float = 1.0
    shear: float = 0.0         # degrees
    stretch_x: float = 1.0
    stretch_y: float = 1.0

    @classmethod
    def sample(cls, rng: np.random.Generator) -> "AugmentParams":
        return cls(rotation=rng.uniform(-180.0, 180.0), scale=rng.uniform(0.8, 1.2),
                   shear=rng.uniform(-10.0, 10.0), stretch_x=rng.uniform(0.9, 1.1),
                   stretch_y=rng.uniform(0.9, 1.1))

    def matrix(self, width: int, height: int) -> np.ndarray:
        """Forward 2x3 affine map (source -> destination) about the image centre."""
        th = math.radians(self.rotation)
        rot = np.array([[math.cos(th), -math.sin(th)], [math.sin(th), math.cos(th)]])
        shear = np.array([[1.0, math.tan(math.radians(self.shear))], [0.0, 1.0]])
        stretch = np.diag([self.scale * self.stretch_x, self.scale * self.stretch_y])
        lin = rot @ shear @ stretch
        c = np.array([(width - 1) / 2.0, (height - 1) / 2.0])
        return np.hstack([lin, (c - lin @ c)[:, None]])


def apply_augment(s: Sample, params: AugmentParams) -> Sample:
    """Warp image (bilinear, replicated border) and labels (nearest, soil border)."""
    h, w = s.labels.shape
    m = params.matrix(w, h)
    img = cv2.warpAffine(s.image.astype(np.float32), m, (w, h), flags=cv2.INTER_LINEAR,
                         borderMode=cv2.BORDER_REPLICATE)
    lab = cv2.warpAffine(s.labels.astype(np.uint8), m, (w, h), flags=cv2.INTER_NEAREST,
                         borderMode=cv2.BORDER_CONSTANT, borderValue=evaluation.SOIL)
    img = np.clip(img.astype(np.float64), 0.0, 1.0)
    return Sample(img, lab, s.source_id)


def augment(s: Sample, rng: np.random.Generator) -> Sample:
    """Random rotation, scaling, shear and stretch of one sample."""
    return apply_augment(s, AugmentParams.sample(rng))


# --------------------------------------------------------------------------
# config and history
# --------------------------------------------------------------------------

SCHEDULES = ("constant", "cosine")


@dataclass
class TrainConfig:
    batch_size: int = 15
    epochs: int = 60
    lr: float = 1e-3
    schedule: str = "constant"
    class_weights: str | tuple[float, float, float] = "auto"
    augment: bool = True
    seed: int = 0
    patience: int = 5
    min_epochs: int = 10
    early_stopping: bool = False
    channels: str = "all"
    size: tuple[int, int] = DESK_SIZE

    def validate(self) -> None:
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.patience < 1:
            raise ValueError("patience must be >= 1")
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.channels not in ("all", "rgb"):
            raise ValueError(f"channels must be 'all' or 'rgb', got {self.channels!r}")
        if self.schedule not in SCHEDULES:
            raise ValueError(f"schedule must be one of {SCHEDULES}, got {self.schedule!r}")

    def lr_at(self, epoch: int) -> float:
        """Learning rate for a zero-based epoch; cosine decays to zero after the last."""
        if self.schedule == "cosine":
            return self.lr * 0.5 * (1.0 + math.cos(math.pi * epoch / self.epochs))
        return self.lr

    def to_dict(self) -> dict:
        d = asdict(self)
        d["size"] = list(self.size)
        if not isinstance(self.class_weights, str):
            d["class_weights"] = [float(v) for v in self.class_weights]
        return d


@dataclass
class TrainHistory:
    train_loss: list[float] = field(default_factory=list)
    val_loss: list[float] = field(default_factory=list)
    val_miou: list[float] = field(default_factory=list)
    best_epoch: int = -1
    class_weights: list[float] = field(default_factory=list)

    def record(self, train_loss: float, val_loss: float, val_miou: float) -> None:
        self.train_loss.append(train_loss)
        self.val_loss.append(val_loss)
        self.val_miou.append(val_miou)

    @property
    def epochs(self) -> int:
        return len(self.train_loss)

    def epochs_to_fraction(self, fraction: float = 0.95) -> int | None:
        """First epoch (1-based) whose validation mIoU reaches ``fraction`` of the best."""
        if not self.val_miou:
            return None
        target = fraction * max(self.val_miou)
        for k, v in enumerate(self.val_miou):
            if v >= target:
                return k + 1
        return None

    @property
    def epochs_to_95(self) -> int | None:
        return self.epochs_to_fraction(0.95)

    def to_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(["epoch", "train_loss", "val_loss", "val_miou"])
        for k in range(self.epochs):
            writer.writerow([k + 1, f"{self.train_loss[k]:.6f}", f"{self.val_loss[k]:.6f}",
                             f"{self.val_miou[k]:.6f}"])
        return buf.getvalue()


# --------------------------------------------------------------------------
# batching helpers
# --------------------------------------------------------------------------

def resize_labels(labels: np.ndarray, width: int, height: int) -> np.ndarray:
    """Nearest-neighbour resize of a label mask (half-pixel centres)."""
    h, w = labels.shape
    if (w, h) == (width, height):
        return labels
    rows = np.minimum(((np.arange(height) + 0.5) * h / height).astype(np.intp), h - 1)
    cols = np.minimum(((np.arange(width) + 0.5) * w / width).astype(np.intp), w - 1)
    return labels[rows][:, cols]


def volume_batch(samples, size, channels: str):
    x = np.stack([assemble_input_volume(s.image, size, channels).data for s in samples])
    y = np.stack([resize_labels(s.labels, *size) for s in samples]).astype(np.intp)
    return x, y


def _resolve_weights(cfg: TrainConfig, samples) -> np.ndarray:
    if isinstance(cfg.class_weights, str):
        if cfg.class_weights != "auto":
            raise ValueError(f"class_weights must be 'auto' or three numbers, "
                             f"got {cfg.class_weights!r}")
        return compute_class_weights(samples)
    w = np.asarray(cfg.class_weights, dtype=np.float64)
    if w.shape != (3,) or np.any(w < 0):
        raise ValueError("class_weights must be three nonnegative numbers")
    return w


def _evaluate_logits(logits_fn, xs, ys, weights, batch_size):
    cm = np.zeros((3, 3), dtype=np.int64)
    loss_sum = 0.0
    n_pix = 0
    for start in range(0, len(xs), batch_size):
        x, y = xs[start:start + batch_size], ys[start:start + batch_size]
        probs = softmax_pixelwise(logits_fn(x))
        loss, _ = weighted_cross_entropy(probs, y, weights.astype(probs.dtype))
        loss_sum += loss * y.size
        n_pix += y.size
        cm += evaluation.confusion_matrix(y, probs.argmax(axis=1))
    return loss_sum / n_pix, evaluation.pixel_metrics(cm).miou


def _snapshot(net: SegmentationNetwork) -> dict[str, np.ndarray]:
    return {k: v.copy() for k, v in net.state_dict().items()}


# --------------------------------------------------------------------------
# full training
# --------------------------------------------------------------------------

def train(net: SegmentationNetwork, train_set, val_set, cfg: TrainConfig | None = None):
    """Mini-batch Adam training on weighted cross-entropy.

    Keeps the parameters of the epoch with the best validation mIoU.
    Returns ``(net, history)``.
    """
    cfg = cfg or TrainConfig()
    cfg.validate()
    train_set, val_set = list(train_set), list(val_set)
    if not train_set or not val_set:
        raise ValueError("train and validation sets must be nonempty")
    shared = {s.source_id for s in train_set} & {s.source_id for s in val_set if s.source_id}
    if shared:
        raise ValueError(f"train and validation sets overlap: {sorted(shared)[:5]}")
    if net.spec.input_channels != {"all": 14, "rgb": 3}[cfg.channels]:
        raise ValueError(f"network takes {net.spec.input_channels} channels, "
                         f"config asks for {cfg.channels!r}")

    rng = np.random.default_rng(cfg.seed)
    weights = _resolve_weights(cfg, train_set)
    history = TrainHistory(class_weights=[float(v) for v in weights])
    weights32 = weights.astype(np.float32)
    x_val, y_val = volume_batch(val_set, cfg.size, cfg.channels)
    if not cfg.augment:
        x_all, y_all = volume_batch(train_set, cfg.size, cfg.channels)

    net.first.conv.need_input_grad = False
    adam = AdamState(lr=cfg.lr)
    best_state, best_score = None, -np.inf
    best_loss = np.inf
    for epoch in range(cfg.epochs):
        adam.lr = cfg.lr_at(epoch)
        order = rng.permutation(len(train_set))
        loss_sum, n_seen = 0.0, 0
        for start in range(0, len(order), cfg.batch_size):
            idx = order[start:start + cfg.batch_size]
            if cfg.augment:
                x, y = volume_batch([augment(train_set[i], rng) for i in idx], cfg.size,
                                    cfg.channels)
            else:
                x, y = x_all[idx], y_all[idx]
            probs = net.forward(x, train=True)
            loss, dlogits = weighted_cross_entropy(probs, y, weights32)
            if not math.isfinite(loss):
                raise TrainingError("non-finite loss on batch with samples "
                                    + ", ".join(train_set[i].source_id for i in idx))
            net.zero_grad()
            net.backward(dlogits)
            params = dict(net.named_parameters())
            grads = dict(net.named_grads())
            adam_step(params, grads, adam)
            loss_sum += loss * len(idx)
            n_seen += len(idx)
        net.clear_cache()
        val_loss, val_miou = _evaluate_logits(lambda x: net.logits(x, False), x_val, y_val,
                                              weights, cfg.batch_size)
        net.clear_cache()
        history.record(loss_sum / n_seen, val_loss, val_miou)
        log.info("epoch %d: train %.4f val %.4f mIoU %.4f", epoch + 1, loss_sum / n_seen,
                 val_loss, val_miou)
        if val_miou > best_score:
            best_score, best_state = val_miou, _snapshot(net)
            history.best_epoch = epoch + 1
        if val_loss < best_loss:
            best_loss, best_loss_epoch = val_loss, epoch + 1
        if (cfg.early_stopping and epoch + 1 >= cfg.min_epochs
                and epoch + 1 - best_loss_epoch >= cfg.patience):
            log.info("early stop after epoch %d", epoch + 1)
            break
    net.load_state_dict(best_state)
    return net, history


# --------------------------------------------------------------------------
# head-only adaptation
# --------------------------------------------------------------------------

@dataclass
class RetrainConfig:
    batch_size: int = 2
    max_epochs: int = 200
    lr: float = 5e-3
    patience: int = 5
    min_epochs: int = 10
    train_fraction: float = 0.8
    class_weights: str | tuple[float, float, float] = "auto"
    seed: int = 0
    channels: str = "all"
    size: tuple[int, int] = DESK_SIZE

    def to_dict(self) -> dict:
        d = asdict(self)
        d["size"] = list(self.size)
        return d


def split_adaptation(n: int, train_fraction: float = 0.8) -> tuple[int, int]:
    """Train/validation sizes for an ``n``-image adaptation set (10 -> 8/2)."""
    if n < 2:
        raise ValueError(f"need at least 2 adaptation images to split, got {n}")
    n_val = min(n - 1, max(1, int(round(n * (1.0 - train_fraction)))))
    return n - n_val, n_val


def extract_features(net: SegmentationNetwork, samples, size, channels, batch_size=8):
    feats, labels = [], []
    for start in range(0, len(samples), batch_size):
        x, y = volume_batch(samples[start:start + batch_size], size, channels)
        feats.append(net.features(x, train=False))
        labels.append(y)
        net.clear_cache()
    return np.concatenate(feats), np.concatenate(labels)


def retrain_head(net: SegmentationNetwork, samples, cfg: RetrainConfig | None = None):
    """Refit only the 1x1 head on a small set from a new field.

    Encoder and decoder act as a frozen feature extractor (inference-mode
    batch norm, so their statistics stay untouched too).  The set is split
    80/20; training stops once the validation loss has not improved for
    ``patience`` epochs (after ``min_epochs``) and the best epoch is restored.
    Returns ``(net, history)``.
    """
    cfg = cfg or RetrainConfig()
    samples = list(samples)
    n_train, n_val = split_adaptation(len(samples), cfg.train_fraction)
    rng = np.random.default_rng(cfg.seed)
    order = rng.permutation(len(samples))
    tr = [samples[i] for i in order[:n_train]]
    va = [samples[i] for i in order[n_train:]]

    f_tr, y_tr = extract_features(net, tr, cfg.size, cfg.channels)
    f_va, y_va = extract_features(net, va, cfg.size, cfg.channels)
    weights = _resolve_weights(cfg, tr)
    weights32 = weights.astype(np.float32)
    head = net.head
    history = TrainHistory(class_weights=[float(v) for v in weights])
    adam = AdamState(lr=cfg.lr)

    def head_logits(f):
        return head.forward(f)

    best_loss, _ = _evaluate_logits(head_logits, f_va, y_va, weights, cfg.batch_size)
    best_state = copy.deepcopy(head.params)
    history.best_epoch = 0
    for epoch in range(cfg.max_epochs):
        perm = rng.permutation(n_train)
        loss_sum = 0.0
        for start in range(0, n_train, cfg.batch_size):
            idx = perm[start:start + cfg.batch_size]
            probs = softmax_pixelwise(head.forward(f_tr[idx]))
            loss, dlogits = weighted_cross_entropy(probs, y_tr[idx], weights32)
            head.backward(dlogits)
            adam_step(head.params, head.grads, adam)
            loss_sum += loss * len(idx)
        val_loss, val_miou = _evaluate_logits(head_logits, f_va, y_va, weights, cfg.batch_size)
        history.record(loss_sum / n_train, val_loss, val_miou)
        if val_loss < best_loss:
            best_loss = val_loss
            best_state = copy.deepcopy(head.params)
            history.best_epoch = epoch + 1
        if epoch + 1 >= cfg.min_epochs and epoch + 1 - history.best_epoch >= cfg.patience:
            break
    for k, v in best_state.items():
        head.params[k][...] = v
    head.clear_cache()
    return net, history


# --------------------------------------------------------------------------
# inference helpers
# --------------------------------------------------------------------------

def predict_masks(net: SegmentationNetwork, samples, size=DESK_SIZE, channels: str = "all",
                  batch_size: int = 8) -> list[np.ndarray]:
    """Argmax label masks at network resolution."""
    out = []
    for start in range(0, len(samples), batch_size):
        x, _ = volume_batch(samples[start:start + batch_size], size, channels)
        probs = net.predict(x)
        out.extend(probs.argmax(axis=1).astype(np.uint8))
    return out


def evaluate_network(net, samples, size=DESK_SIZE, channels="all",
                     min_area=evaluation.MIN_OBJECT_AREA) -> evaluation.MetricsReport:
    preds = predict_masks(net, samples, size, channels)
    gts = [resize_labels(s.labels, *size) for s in samples]
    return evaluation.evaluate(zip(preds, gts), min_area)
