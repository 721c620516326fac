"""Deterministic expert combination: mean or max of classwise probabilities.

Unlike the MoE (which mixes logits), ensembles combine each expert's
softmax output.  Mean yields a proper distribution; max does not, so its
argmax is the prediction and the attack loss renormalizes first.  White-box
attacks differentiate through all experts jointly.
"""

from __future__ import annotations

import enum
from functools import reduce
from typing import List, Sequence

import numpy as np

from . import tensor as T
from .nets import SegModel
from .tensor import IntMask, Tensor


class EnsembleRule(enum.Enum):
    MEAN = "mean"
    MAX = "max"


class EnsembleModel:
    def __init__(self, experts: Sequence[SegModel], rule: EnsembleRule):
        if len(experts) < 2:
            raise ValueError("need at least two experts")
        k = experts[0].num_classes
        res = experts[0].resolution
        for e in experts:
            if e.num_classes != k:
                raise ValueError("experts disagree on class count")
            if e.resolution != res:
                raise ValueError("experts disagree on resolution")
        self.experts = list(experts)
        self.rule = rule
        self.num_classes = k
        self.resolution = res

    def forward(self, x: Tensor) -> Tensor:
        """Combined classwise probabilities [N,K,H,W]."""
        probs = [T.softmax_channel(e.forward(x)[0]) for e in self.experts]
        if self.rule is EnsembleRule.MEAN:
            return T.scale(reduce(T.add, probs), 1.0 / len(probs))
        return reduce(T.maximum, probs)

    def loss(self, x: Tensor, target) -> Tensor:
        return T.nll_mean_probs(self.forward(x), IntMask(target, self.num_classes))

    def predict(self, x: np.ndarray) -> np.ndarray:
        return np.argmax(self.forward(Tensor(x)).data, axis=1)

    def trainable_parameters(self) -> List[Tensor]:
        return []


def ensemble_forward(experts: Sequence[SegModel], rule: EnsembleRule,
                     x: np.ndarray) -> np.ndarray:
    return EnsembleModel(experts, rule).forward(Tensor(x)).data
