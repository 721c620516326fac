"""Untargeted white-box attacks: FGSM, BIM, Adam-PGD, universal Adam-PGD.

All attacks consume any model exposing `loss(x, y) -> scalar Tensor` (the
graph flows from the given input tensor) and stay inside the L-inf ball:
after every step the perturbation is projected to [-eps, eps] and the
perturbed image clamped to [0, 1].
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Dict, List, Mapping, Optional, Sequence, Union

import numpy as np

from . import tensor as T
from .data import Sample
from .metrics import EvalRecord
from .nets import eval_miou
from .optim import AdamState, adam_step
from .serialize import (
    expect_eof,
    read_f64_array,
    read_json_block,
    read_magic,
    read_u32,
    write_f64_array,
    write_json_block,
    write_magic,
    write_u32,
)
from .tensor import Tensor

_NOISE_MAGIC = "UNIVNZ01"

FAMILIES = ("fgsm", "bim", "pgd", "universal")


@dataclass
class AttackSpec:
    family: str
    epsilon: float
    alpha: float = 0.01  # BIM step size / PGD learning rate
    steps: int = 10
    seed: int = 0
    passes: int = 5  # dataset epochs for the universal attack

    def __post_init__(self):
        if self.family not in FAMILIES:
            raise ValueError(f"unknown attack family {self.family!r}")
        if self.epsilon < 0:
            raise ValueError("epsilon must be >= 0")
        if self.family != "fgsm" and self.alpha <= 0:
            raise ValueError("alpha must be positive for iterative attacks")
        if self.steps < 1:
            raise ValueError("need at least one iteration")


@dataclass
class AdvResult:
    x_adv: np.ndarray
    delta: np.ndarray
    losses: List[float] = field(default_factory=list)


def _input_grad(model, x: np.ndarray, y: np.ndarray):
    xt = Tensor(x, requires_grad=True)
    loss = model.loss(xt, y)
    T.backward(loss)
    g = xt.grad
    if g is None or not np.all(np.isfinite(g)):
        raise FloatingPointError("non-finite or missing attack gradient")
    return g, loss.item()


def fgsm(model, x: np.ndarray, y: np.ndarray, epsilon: float) -> AdvResult:
    """One signed-gradient step of size epsilon, clamped to [0, 1]."""
    g, loss = _input_grad(model, x, y)
    delta = epsilon * np.sign(g)
    x_adv = np.clip(x + delta, 0.0, 1.0)
    return AdvResult(x_adv=x_adv, delta=delta, losses=[loss])


def bim(model, x: np.ndarray, y: np.ndarray, epsilon: float, alpha: float,
        steps: int, on_iterate=None) -> AdvResult:
    """Iterated FGSM from the clean point, clipped to the ball each step."""
    x_t = x.copy()
    losses = []
    for _ in range(steps):
        g, loss = _input_grad(model, x_t, y)
        losses.append(loss)
        x_t = x_t + alpha * np.sign(g)
        x_t = np.clip(x_t, x - epsilon, x + epsilon)
        x_t = np.clip(x_t, 0.0, 1.0)
        if on_iterate is not None:
            on_iterate(x_t)
    return AdvResult(x_adv=x_t, delta=x_t - x, losses=losses)


def _project(delta: np.ndarray, x: np.ndarray, epsilon: float) -> np.ndarray:
    delta = np.clip(delta, -epsilon, epsilon)
    return np.clip(x + delta, 0.0, 1.0) - x


def pgd(model, x: np.ndarray, y: np.ndarray, epsilon: float, lr: float = 0.01,
        steps: int = 10, seed: int = 0, on_iterate=None) -> AdvResult:
    """Adam ascent from a uniformly random start inside the L-inf ball."""
    rng = np.random.default_rng(seed)
    delta = rng.uniform(-epsilon, epsilon, size=x.shape)
    delta = _project(delta, x, epsilon)
    state = AdamState(shape=x.shape, lr=lr)
    losses = []
    for _ in range(steps):
        g, loss = _input_grad(model, x + delta, y)
        losses.append(loss)
        adam_step(state, delta, g, ascent=True)
        delta = _project(delta, x, epsilon)
        if on_iterate is not None:
            on_iterate(x + delta)
    return AdvResult(x_adv=x + delta, delta=delta, losses=losses)


def attack_instance(model, spec: AttackSpec, x: np.ndarray, y: np.ndarray) -> AdvResult:
    if spec.family == "fgsm":
        return fgsm(model, x, y, spec.epsilon)
    if spec.family == "bim":
        return bim(model, x, y, spec.epsilon, spec.alpha, spec.steps)
    if spec.family == "pgd":
        return pgd(model, x, y, spec.epsilon, spec.alpha, spec.steps, spec.seed)
    raise ValueError(f"{spec.family} is not a per-instance attack")


def universal_pgd(model, samples: Sequence[Sample], epsilon: float,
                  lr: float = 0.01, passes: int = 5, seed: int = 0,
                  batch_size: int = 8, on_iterate=None):
    """Single image-independent noise pattern, Adam-ascended over the data.

    `samples` should be the train+val material; evaluation on test data is
    the caller's job.  Returns (delta [1,3,H,W], per-batch loss trace).
    """
    if not samples:
        raise ValueError("empty dataset for universal attack")
    shape = (1,) + samples[0].image.shape
    rng = np.random.default_rng(seed)
    delta = np.clip(rng.uniform(-epsilon, epsilon, size=shape), -epsilon, epsilon)
    state = AdamState(shape=shape, lr=lr)
    losses: List[float] = []
    n = len(samples)
    for _ in range(passes):
        order = rng.permutation(n)
        for s in range(0, n, batch_size):
            batch = [samples[i] for i in order[s : s + batch_size]]
            x = np.stack([b.image for b in batch])
            y = np.stack([b.mask for b in batch])
            dt = Tensor(delta, requires_grad=True)
            x_adv = T.clip(T.add(Tensor(x), dt), 0.0, 1.0)
            loss = model.loss(x_adv, y)
            T.backward(loss)
            if dt.grad is None or not np.all(np.isfinite(dt.grad)):
                raise FloatingPointError("non-finite universal attack gradient")
            losses.append(loss.item())
            adam_step(state, delta, dt.grad, ascent=True)
            np.clip(delta, -epsilon, epsilon, out=delta)
            if on_iterate is not None:
                on_iterate(delta)
    return delta, losses


def apply_noise(delta: np.ndarray) -> Callable[[np.ndarray], np.ndarray]:
    """Batch transform adding image-independent noise, clamped to [0, 1]."""
    return lambda x: np.clip(x + delta, 0.0, 1.0)


# ---------------------------------------------------------------------------
# evaluation harnesses

def evaluate_attack(model, spec: AttackSpec, samples: Sequence[Sample],
                    batch_size: int = 8):
    """Clean and attacked mIoU of `model` over `samples` (id order, merged
    deterministically).  Returns (clean_miou, attacked_miou)."""
    from .metrics import ConfusionMatrix, miou

    clean_cm = ConfusionMatrix(model.num_classes)
    adv_cm = ConfusionMatrix(model.num_classes)
    ordered = sorted(samples, key=lambda s: s.id)
    for i in range(0, len(ordered), batch_size):
        chunk = ordered[i : i + batch_size]
        x = np.stack([s.image for s in chunk])
        y = np.stack([s.mask for s in chunk])
        clean_cm.add(y, model.predict(x))
        if spec.epsilon == 0.0:
            adv_cm.add(y, model.predict(x))
            continue
        res = attack_instance(model, spec, x, y)
        adv_cm.add(y, model.predict(res.x_adv))
    return miou(clean_cm), miou(adv_cm)


NoiseSource = Union[Mapping[str, np.ndarray], Callable]


def transfer_matrix(sources: Mapping[str, object], targets: Mapping[str, object],
                    noise: Optional[Mapping[str, np.ndarray]],
                    samples: Sequence[Sample],
                    epsilon: float) -> List[EvalRecord]:
    """Cross-model attack grid: entry (i, j) evaluates target j on test data
    perturbed with the noise crafted against source i.  `noise` maps source
    id to its universal pattern; None means the zero-noise control."""
    res = {tuple(m.resolution) for m in list(sources.values()) + list(targets.values())}
    ks = {m.num_classes for m in list(sources.values()) + list(targets.values())}
    if len(res) != 1 or len(ks) != 1:
        raise ValueError("transfer matrix requires matching resolutions and class counts")
    ordered = sorted(samples, key=lambda s: s.id)
    records: List[EvalRecord] = []
    clean_cache: Dict[str, float] = {}
    for tid, tgt in targets.items():
        clean_cache[tid] = eval_miou(tgt, ordered)
    for sid in sources:
        delta = None if noise is None else noise[sid]
        for tid, tgt in targets.items():
            if delta is None:
                attacked = clean_cache[tid]
            else:
                attacked = eval_miou(tgt, ordered, transform=apply_noise(delta))
            records.append(
                EvalRecord(
                    model=tid,
                    attack=f"universal-from-{sid}",
                    epsilon=epsilon,
                    miou_clean=clean_cache[tid],
                    miou_attack=attacked,
                )
            )
    return records


# ---------------------------------------------------------------------------
# noise container

def save_noise(path: str, delta: np.ndarray, epsilon: float, meta: dict):
    """UNIVNZ01: magic, u32 H W C, f64 (H,W,C) noise, JSON {epsilon, ...}."""
    if delta.ndim == 4:
        delta = delta[0]
    c, h, w = delta.shape
    with open(path, "wb") as fh:
        write_magic(fh, _NOISE_MAGIC)
        write_u32(fh, h, w, c)
        write_f64_array(fh, delta.transpose(1, 2, 0))
        write_json_block(fh, {"epsilon": epsilon, **meta})


def load_noise(path: str):
    """Returns (delta [1,C,H,W], epsilon, metadata dict)."""
    with open(path, "rb") as fh:
        read_magic(fh, _NOISE_MAGIC, path)
        h, w, c = read_u32(fh, 3, path)
        delta = read_f64_array(fh, (h, w, c), path).transpose(2, 0, 1)[None]
        meta = read_json_block(fh, path)
        expect_eof(fh, path)
    eps = float(meta.pop("epsilon"))
    return np.ascontiguousarray(delta), eps, meta
