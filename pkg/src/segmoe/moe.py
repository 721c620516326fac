"""Mixture of experts: gate nets over frozen experts, weighted logit sum.

The gate (one conv + two fully connected layers) reads the concatenated
expert feature taps and softmax-normalizes over the expert axis — one
weight per expert ("simple") or one per expert per class ("classwise").
Expert logits are combined pre-softmax; an optional 3x3 conv can follow
the weighted sum.  Attacks differentiate end to end through gate and
experts alike.
"""

from __future__ import annotations

import enum
import math
import os
from typing import List, Optional, Sequence

import numpy as np

from . import tensor as T
from .nets import SegModel, SegNetConfig, TrainConfig, TrainReport, fit, load_model, params_digest
from .serialize import (
    FormatError,
    expect_eof,
    file_sha256,
    read_json_block,
    read_magic,
    read_tensor_block,
    write_json_block,
    write_magic,
    write_tensor_block,
)
from .tensor import IntMask, Tensor

_MOE_MAGIC = "MOECKPT1"
_GATE_CONV_CH = 16
_GATE_FC_CH = 32


class GateKind(enum.Enum):
    SIMPLE = "simple"
    CLASSWISE = "classwise"


class MoEModel:
    """Two (or more) frozen experts plus a trainable gate and optional conv."""

    def __init__(self, experts: Sequence[SegModel], gate_kind: GateKind,
                 extra_conv: bool = False, seed: int = 0):
        if len(experts) < 2:
            raise ValueError("need at least two experts")
        k = experts[0].num_classes
        res = experts[0].resolution
        fch = experts[0].feature_channels
        for e in experts:
            if e.num_classes != k or e.resolution != res or e.feature_channels != fch:
                raise ValueError("experts disagree on classes/resolution/features")
        self.experts = list(experts)
        self.gate_kind = gate_kind
        self.seed = seed
        self.num_classes = k
        self.resolution = res
        e_count = len(experts)
        rng = np.random.default_rng(seed)
        in_ch = fch * e_count
        out_dim = e_count if gate_kind is GateKind.SIMPLE else e_count * k
        self.gate_params: List[Tensor] = []
        self._gw = self._param(rng.normal(0, math.sqrt(2.0 / (in_ch * 9)),
                                          size=(_GATE_CONV_CH, in_ch, 3, 3)))
        self._gb = self._param(np.zeros(_GATE_CONV_CH))
        self._fw1 = self._param(rng.normal(0, math.sqrt(2.0 / _GATE_CONV_CH),
                                           size=(_GATE_CONV_CH, _GATE_FC_CH)))
        self._fb1 = self._param(np.zeros(_GATE_FC_CH))
        self._fw2 = self._param(rng.normal(0, math.sqrt(2.0 / _GATE_FC_CH),
                                           size=(_GATE_FC_CH, out_dim)))
        self._fb2 = self._param(np.zeros(out_dim))
        self._cw: Optional[Tensor] = None
        self._cb: Optional[Tensor] = None
        if extra_conv:
            # near-identity start keeps the with-conv variant close to without
            w = rng.normal(0, 0.01, size=(k, k, 3, 3))
            w[np.arange(k), np.arange(k), 1, 1] += 1.0
            self._cw = self._param(w)
            self._cb = self._param(np.zeros(k))

    def _param(self, arr) -> Tensor:
        t = Tensor(arr, requires_grad=True)
        self.gate_params.append(t)
        return t

    @property
    def has_extra_conv(self) -> bool:
        return self._cw is not None

    @property
    def num_experts(self) -> int:
        return len(self.experts)

    def gate_forward(self, features: Sequence[Tensor]) -> Tensor:
        """Expert weights from feature taps: [N,E] or [N,E,K], softmax over E."""
        if len(features) != self.num_experts:
            raise T.ShapeError(f"expected {self.num_experts} feature maps, got {len(features)}")
        cat = T.concat_channels(list(features))
        h = T.relu(T.conv2d(cat, self._gw, self._gb, stride=1, padding=1))
        pooled = T.global_avg_pool(h)
        z = T.linear(T.relu(T.linear(pooled, self._fw1, self._fb1)), self._fw2, self._fb2)
        if self.gate_kind is GateKind.CLASSWISE:
            z = T.reshape(z, (z.shape[0], self.num_experts, self.num_classes))
        return T.softmax(z, axis=1)

    def forward(self, x: Tensor) -> Tensor:
        """Combined logits [N,K,H,W]; caller applies softmax/argmax."""
        outs = [e.forward(x) for e in self.experts]
        weights = self.gate_forward([f for _, f in outs])
        z = T.stack([logits for logits, _ in outs], axis=0)  # [E,N,K,H,W]
        if self.gate_kind is GateKind.SIMPLE:
            w = T.reshape(T.transpose(weights, (1, 0)), (self.num_experts, -1, 1, 1, 1))
        else:
            w = T.reshape(T.transpose(weights, (1, 0, 2)),
                          (self.num_experts, -1, self.num_classes, 1, 1))
        combined = T.tsum(T.mul(z, w), axis=0)
        if self._cw is not None:
            combined = T.conv2d(combined, self._cw, self._cb, stride=1, padding=1)
        return combined

    def loss(self, x: Tensor, target) -> Tensor:
        return T.cross_entropy_mean(self.forward(x), IntMask(target, self.num_classes))

    def predict(self, x: np.ndarray) -> np.ndarray:
        return np.argmax(self.forward(Tensor(x)).data, axis=1)

    def trainable_parameters(self) -> List[Tensor]:
        return list(self.gate_params)

    def gate_weights(self, x: np.ndarray) -> np.ndarray:
        """Gate output for raw image batch, no graph kept."""
        outs = [e.forward(Tensor(x)) for e in self.experts]
        return self.gate_forward([f for _, f in outs]).data


def train_moe(moe: MoEModel, train_samples, cfg: TrainConfig,
              val_samples=(), on_step=None) -> TrainReport:
    """Train gate (+ optional conv) only; experts must be frozen."""
    for e in moe.experts:
        if not e.frozen:
            raise ValueError("experts must be frozen before MoE training")
    return fit(moe, train_samples, cfg, val_samples, on_step=on_step)


def expert_digest(moe: MoEModel) -> str:
    return params_digest([p for e in moe.experts for p in e.params])


# ---------------------------------------------------------------------------
# checkpoint container: gate tensors inline, experts by file reference

def save_moe(moe: MoEModel, path: str, expert_paths: Sequence[str]):
    """Expert checkpoints are referenced by relative name + content hash."""
    if len(expert_paths) != moe.num_experts:
        raise ValueError("one checkpoint path per expert required")
    refs = []
    base = os.path.dirname(os.path.abspath(path))
    for p in expert_paths:
        refs.append({
            "file": os.path.relpath(os.path.abspath(p), base),
            "sha256": file_sha256(p),
        })
    with open(path, "wb") as fh:
        write_magic(fh, _MOE_MAGIC)
        write_json_block(fh, {
            "gate_kind": moe.gate_kind.value,
            "extra_conv": moe.has_extra_conv,
            "num_classes": moe.num_classes,
            "seed": moe.seed,
            "experts": refs,
        })
        for p in moe.gate_params:
            write_tensor_block(fh, p.data)


def load_moe(path: str) -> MoEModel:
    base = os.path.dirname(os.path.abspath(path))
    with open(path, "rb") as fh:
        read_magic(fh, _MOE_MAGIC, path)
        meta = read_json_block(fh, path)
        experts = []
        for ref in meta["experts"]:
            epath = os.path.join(base, ref["file"])
            if not os.path.exists(epath):
                raise FormatError(f"referenced expert checkpoint missing: {epath}")
            actual = file_sha256(epath)
            if actual != ref["sha256"]:
                raise FormatError(
                    f"expert checkpoint hash mismatch for {epath}: "
                    f"expected {ref['sha256'][:12]}, got {actual[:12]}"
                )
            expert = load_model(epath)
            expert.freeze()
            experts.append(expert)
        moe = MoEModel(
            experts,
            GateKind(meta["gate_kind"]),
            extra_conv=meta["extra_conv"],
            seed=meta.get("seed", 0),
        )
        for p in moe.gate_params:
            arr = read_tensor_block(fh, path)
            if arr.shape != p.data.shape:
                raise FormatError(f"gate tensor shape mismatch in {path}")
            p.data = arr
        expect_eof(fh, path)
    return moe
