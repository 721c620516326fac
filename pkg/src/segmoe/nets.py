"""Small encoder-decoder segmentation nets, their training loop, checkpoints.

One stride-2 stage, a feature tap at the last half-resolution hidden layer,
nearest-neighbor upsample, 3x3 classifier head.  Training is SGD with
polynomial learning-rate decay over the total iteration count.
"""

from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass, field
from typing import Callable, List, Optional, Sequence

import numpy as np

from . import tensor as T
from .data import Sample
from .metrics import ConfusionMatrix, miou
from .optim import sgd_poly_step
from .serialize import (
    FormatError,
    expect_eof,
    read_json_block,
    read_magic,
    read_tensor_block,
    write_json_block,
    write_magic,
    write_tensor_block,
)
from .tensor import IntMask, Tensor

_CKPT_MAGIC = "SEGCKPT1"


@dataclass(frozen=True)
class SegNetConfig:
    in_channels: int = 3
    num_classes: int = 8
    hidden: tuple = (16, 32, 32)
    resolution: tuple = (64, 64)

    def __post_init__(self):
        if self.num_classes < 2:
            raise ValueError("need at least two classes")
        if len(self.hidden) != 3:
            raise ValueError("expected three hidden widths")
        if self.resolution[0] % 2 or self.resolution[1] % 2:
            raise ValueError("resolution must be divisible by 2")


@dataclass
class TrainConfig:
    epochs: int
    batch_size: int
    base_lr: float = 0.01
    power: float = 0.9
    seed: int = 0

    def __post_init__(self):
        if self.epochs < 0 or self.batch_size < 1 or self.base_lr <= 0:
            raise ValueError("invalid training configuration")


@dataclass
class TrainReport:
    epoch_losses: List[float] = field(default_factory=list)
    val_miou: List[float] = field(default_factory=list)

    @property
    def initial_loss(self) -> float:
        return self.epoch_losses[0]

    @property
    def final_loss(self) -> float:
        return self.epoch_losses[-1]


class SegModel:
    """Expert/baseline segmentation net; exposes logits plus a feature tap."""

    def __init__(self, config: SegNetConfig, seed: int = 0):
        self.config = config
        self.seed = seed
        h0, h1, h2 = config.hidden
        rng = np.random.default_rng(seed)
        self.params: List[Tensor] = []
        self._w1, self._b1 = self._conv_init(rng, h0, config.in_channels)
        self._w2, self._b2 = self._conv_init(rng, h1, h0)
        self._w3, self._b3 = self._conv_init(rng, h2, h1)
        # head reads upsampled features plus the full-resolution skip
        self._w4, self._b4 = self._conv_init(rng, config.num_classes, h2 + h0)

    def _conv_init(self, rng, out_ch, in_ch, k=3):
        fan_in = in_ch * k * k
        w = Tensor(rng.normal(0.0, math.sqrt(2.0 / fan_in), size=(out_ch, in_ch, k, k)),
                   requires_grad=True)
        b = Tensor(np.zeros(out_ch), requires_grad=True)
        self.params.extend([w, b])
        return w, b

    @property
    def num_classes(self) -> int:
        return self.config.num_classes

    @property
    def resolution(self) -> tuple:
        return tuple(self.config.resolution)

    @property
    def feature_channels(self) -> int:
        return self.config.hidden[-1]

    def _check_input(self, x: Tensor):
        n, c, h, w = x.shape
        if (h, w) != tuple(self.config.resolution) or c != self.config.in_channels:
            raise T.ShapeError(
                f"input {x.shape} does not match configured "
                f"{self.config.in_channels}x{self.config.resolution}"
            )

    def forward(self, x: Tensor):
        """Returns (logits [N,K,H,W], features [N,F,H/2,W/2])."""
        self._check_input(x)
        h1 = T.relu(T.conv2d(x, self._w1, self._b1, stride=1, padding=1))
        down = T.avg_pool2x2(h1)
        h2 = T.relu(T.conv2d(down, self._w2, self._b2, stride=1, padding=1))
        feats = T.relu(T.conv2d(h2, self._w3, self._b3, stride=1, padding=1))
        up = T.upsample_nearest2x(feats)
        logits = T.conv2d(T.concat_channels([up, h1]), self._w4, self._b4,
                          stride=1, padding=1)
        return logits, feats

    def loss(self, x: Tensor, target) -> Tensor:
        logits, _ = self.forward(x)
        return T.cross_entropy_mean(logits, IntMask(target, self.num_classes))

    def predict(self, x: np.ndarray) -> np.ndarray:
        logits, _ = self.forward(Tensor(x))
        return np.argmax(logits.data, axis=1)

    def trainable_parameters(self) -> List[Tensor]:
        return [p for p in self.params if p.requires_grad]

    def freeze(self):
        for p in self.params:
            p.requires_grad = False

    @property
    def frozen(self) -> bool:
        return all(not p.requires_grad for p in self.params)


def params_digest(params: Sequence[Tensor]) -> str:
    """SHA-256 over shapes and raw little-endian bytes of all parameters."""
    h = hashlib.sha256()
    for p in params:
        h.update(str(p.data.shape).encode())
        h.update(np.ascontiguousarray(p.data, dtype="<f8").tobytes())
    return h.hexdigest()


# ---------------------------------------------------------------------------
# training

def _stack_batch(samples: Sequence[Sample], num_classes: int):
    x = np.stack([s.image for s in samples])
    y = np.stack([s.mask for s in samples])
    if y.max() >= num_classes:
        raise ValueError(f"label {y.max()} out of range for {num_classes} classes")
    return x, y


def eval_miou(model, samples: Sequence[Sample], batch_size: int = 8,
              transform: Optional[Callable[[np.ndarray], np.ndarray]] = None) -> float:
    """mIoU of model over samples; transform optionally perturbs each batch."""
    if not samples:
        raise ValueError("no samples to evaluate")
    cm = ConfusionMatrix(model.num_classes)
    for i in range(0, len(samples), batch_size):
        chunk = samples[i : i + batch_size]
        x, y = _stack_batch(chunk, model.num_classes)
        if transform is not None:
            x = transform(x)
        pred = model.predict(x)
        cm.add(y, pred)
    return miou(cm)


def fit(model, train_samples: Sequence[Sample], cfg: TrainConfig,
        val_samples: Sequence[Sample] = (),
        on_step: Optional[Callable[[int], None]] = None) -> TrainReport:
    """SGD/poly training of model.trainable_parameters on its own loss.

    Works for any model exposing loss(x, y) and trainable_parameters();
    parameters update in place.  on_step(iteration) runs after each step.
    """
    if not train_samples:
        raise ValueError("empty training split")
    params = model.trainable_parameters()
    if not params:
        raise ValueError("model has no trainable parameters")
    report = TrainReport()
    if cfg.epochs == 0:
        return report
    rng = np.random.default_rng(cfg.seed)
    n = len(train_samples)
    steps_per_epoch = math.ceil(n / cfg.batch_size)
    max_iter = cfg.epochs * steps_per_epoch
    it = 0
    for _ in range(cfg.epochs):
        order = rng.permutation(n)
        losses = []
        for s in range(steps_per_epoch):
            idx = order[s * cfg.batch_size : (s + 1) * cfg.batch_size]
            batch = [train_samples[i] for i in idx]
            x, y = _stack_batch(batch, model.num_classes)
            T.zero_grads(params)
            loss = model.loss(Tensor(x, requires_grad=False), y)
            if not np.isfinite(loss.item()):
                raise FloatingPointError("non-finite training loss")
            T.backward(loss)
            sgd_poly_step(params, cfg.base_lr, it, max_iter, cfg.power)
            losses.append(loss.item())
            it += 1
            if on_step is not None:
                on_step(it)
        report.epoch_losses.append(float(np.mean(losses)))
        if val_samples:
            report.val_miou.append(eval_miou(model, list(val_samples)))
    for p in params:
        if not np.all(np.isfinite(p.data)):
            raise FloatingPointError("non-finite parameters after training")
    return report


def train(model: SegModel, train_samples: Sequence[Sample], cfg: TrainConfig,
          val_samples: Sequence[Sample] = ()) -> TrainReport:
    return fit(model, train_samples, cfg, val_samples)


# ---------------------------------------------------------------------------
# checkpoints

def save_model(model: SegModel, path: str):
    cfg = model.config
    with open(path, "wb") as fh:
        write_magic(fh, _CKPT_MAGIC)
        write_json_block(
            fh,
            {
                "in_channels": cfg.in_channels,
                "num_classes": cfg.num_classes,
                "hidden": list(cfg.hidden),
                "resolution": list(cfg.resolution),
                "seed": model.seed,
            },
        )
        for p in model.params:
            write_tensor_block(fh, p.data)


def load_model(path: str) -> SegModel:
    with open(path, "rb") as fh:
        read_magic(fh, _CKPT_MAGIC, path)
        meta = read_json_block(fh, path)
        cfg = SegNetConfig(
            in_channels=meta["in_channels"],
            num_classes=meta["num_classes"],
            hidden=tuple(meta["hidden"]),
            resolution=tuple(meta["resolution"]),
        )
        model = SegModel(cfg, seed=meta.get("seed", 0))
        for p in model.params:
            arr = read_tensor_block(fh, path)
            if arr.shape != p.data.shape:
                raise FormatError(
                    f"checkpoint tensor shape {arr.shape} != expected {p.data.shape} in {path}"
                )
            p.data = arr
        expect_eof(fh, path)
    return model
