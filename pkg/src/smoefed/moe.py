"""Toy sparse mixture-of-experts layer with per-expert LoRA adapters,
a frozen TopK router, and a learnable output rescaler.

The layer maps x in R^n to h in R^m through M frozen expert matrices
W^j (m x n). Only the LoRA pairs (A^j: m x r, B^j: r x n) and the scalar
rescaler carry gradients; experts and router stay frozen throughout.
"""

from __future__ import annotations

import copy
from dataclasses import dataclass, field

import numpy as np

from .errors import BudgetError, DimensionError, DomainError
from .numerics import softmax, topk_indices


@dataclass
class LoraPair:
    a: np.ndarray          # m x r
    b: np.ndarray          # r x n
    rank: int
    alpha: float = 16.0

    def __post_init__(self):
        if self.a.shape[1] != self.rank or self.b.shape[0] != self.rank:
            raise DimensionError(
                f"LoRA rank {self.rank} inconsistent with shapes "
                f"A{self.a.shape}, B{self.b.shape}"
            )

    @property
    def scaling(self) -> float:
        return self.alpha / self.rank

    def delta(self) -> np.ndarray:
        """Materialized update (alpha/r) * A @ B, shape m x n."""
        return self.scaling * (self.a @ self.b)

    def apply(self, x: np.ndarray) -> np.ndarray:
        """(alpha/r) * A (B x) without materializing the m x n delta."""
        return self.scaling * (self.a @ (self.b @ x))

    def copy(self) -> "LoraPair":
        return LoraPair(self.a.copy(), self.b.copy(), self.rank, self.alpha)

    @classmethod
    def init(cls, m: int, n: int, rank: int, alpha: float,
             rng: np.random.Generator) -> "LoraPair":
        # Standard LoRA init: A gaussian, B zero, so the initial delta is 0.
        a = rng.normal(0.0, 0.02, size=(m, rank))
        b = np.zeros((rank, n))
        return cls(a, b, rank, alpha)


@dataclass
class RoutingDecision:
    selected: list[int]
    gate_weights: np.ndarray


@dataclass
class SmoeLayer:
    experts: list[np.ndarray]      # M frozen matrices, each m x n
    router: np.ndarray             # n x M frozen gate weights (logits = router^T x)
    loras: list[LoraPair]          # one pair per expert
    rescaler: float = 1.0
    k_full: int = 1
    renormalize_gates: bool = True  # renormalize softmax mass over the TopK set

    def __post_init__(self):
        m_experts = len(self.experts)
        if len(self.loras) != m_experts:
            raise DimensionError(
                f"{m_experts} experts but {len(self.loras)} LoRA pairs"
            )
        if not 1 <= self.k_full <= m_experts:
            raise BudgetError(f"k_full={self.k_full} out of range for M={m_experts}")

    @property
    def num_experts(self) -> int:
        return len(self.experts)

    @property
    def in_dim(self) -> int:
        return self.experts[0].shape[1]

    @property
    def out_dim(self) -> int:
        return self.experts[0].shape[0]


def route(layer: SmoeLayer, x: np.ndarray, k_i: int) -> RoutingDecision:
    """Select the k_i most probable experts for x and their gate weights."""
    if not 1 <= k_i <= layer.k_full:
        raise BudgetError(
            f"k_i={k_i} outside [1, k_full={layer.k_full}]"
        )
    logits = layer.router.T @ x
    probs = softmax(logits)
    selected = topk_indices(probs, k_i)
    gates = probs[selected]
    if layer.renormalize_gates:
        gates = gates / gates.sum()
    return RoutingDecision(selected=selected, gate_weights=gates)


def smoe_forward(layer: SmoeLayer, x: np.ndarray,
                 k_i: int) -> tuple[np.ndarray, RoutingDecision]:
    """h = s * sum_j g_j (W^j x + (alpha/r) A^j B^j x) over the selected experts."""
    x = np.asarray(x, dtype=np.float64).ravel()
    if x.size != layer.in_dim:
        raise DimensionError(f"input dim {x.size}, layer expects {layer.in_dim}")
    decision = route(layer, x, k_i)
    h = np.zeros(layer.out_dim)
    for g, j in zip(decision.gate_weights, decision.selected):
        h += g * (layer.experts[j] @ x + layer.loras[j].apply(x))
    return layer.rescaler * h, decision


@dataclass
class ToyModel:
    embed: np.ndarray              # frozen, n x d_in
    smoe: SmoeLayer
    head: np.ndarray               # frozen, d_out x m
    task_kind: str = "classification"   # or "regression"

    def __post_init__(self):
        if self.task_kind not in ("classification", "regression"):
            raise DomainError(f"unknown task_kind {self.task_kind!r}")
        if self.embed.shape[0] != self.smoe.in_dim:
            raise DimensionError("embed output dim does not match SMoE input dim")
        if self.head.shape[1] != self.smoe.out_dim:
            raise DimensionError("head input dim does not match SMoE output dim")

    def clone(self) -> "ToyModel":
        return copy.deepcopy(self)

    def forward(self, x: np.ndarray, k_i: int) -> tuple[np.ndarray, RoutingDecision]:
        z = self.embed @ np.asarray(x, dtype=np.float64).ravel()
        h, decision = smoe_forward(self.smoe, z, k_i)
        return self.head @ h, decision


@dataclass
class LoraGrads:
    a: list[np.ndarray]
    b: list[np.ndarray]
    rescaler: float


def _loss_grad_out(model: ToyModel, y: np.ndarray, target) -> tuple[float, np.ndarray]:
    """Per-example loss and dL/dy (before the 1/batch factor)."""
    if model.task_kind == "regression":
        t = np.asarray(target, dtype=np.float64).ravel()
        if t.size != y.size:
            raise DimensionError(f"target dim {t.size} vs output dim {y.size}")
        e = y - t
        return float(e @ e), 2.0 * e
    label = int(target)
    if not 0 <= label < y.size:
        raise DimensionError(f"label {label} out of range for {y.size} classes")
    p = softmax(y)
    grad = p.copy()
    grad[label] -= 1.0
    return float(-np.log(p[label])), grad


def loss_and_grads(model: ToyModel, inputs, targets,
                   k_i: int) -> tuple[float, LoraGrads, list[RoutingDecision]]:
    """Mean loss over the batch plus analytic gradients for every LoRA
    pair and the rescaler.

    No gradient flows through the discrete TopK selection or the frozen
    router/experts/head; only the selected branches contribute.
    """
    inputs = np.atleast_2d(np.asarray(inputs, dtype=np.float64))
    if inputs.shape[0] == 0:
        raise DomainError("empty batch")
    if len(targets) != inputs.shape[0]:
        raise DimensionError(
            f"{inputs.shape[0]} inputs but {len(targets)} targets"
        )
    layer = model.smoe
    batch = inputs.shape[0]
    grads_a = [np.zeros_like(p.a) for p in layer.loras]
    grads_b = [np.zeros_like(p.b) for p in layer.loras]
    grad_s = 0.0
    total_loss = 0.0
    decisions = []

    for x, target in zip(inputs, targets):
        z = model.embed @ x
        decision = route(layer, z, k_i)
        decisions.append(decision)
        h_unscaled = np.zeros(layer.out_dim)
        bz_cache = {}
        for g, j in zip(decision.gate_weights, decision.selected):
            bz = layer.loras[j].b @ z
            bz_cache[j] = bz
            h_unscaled += g * (
                layer.experts[j] @ z + layer.loras[j].scaling * (layer.loras[j].a @ bz)
            )
        y = model.head @ (layer.rescaler * h_unscaled)
        loss, dy = _loss_grad_out(model, y, target)
        total_loss += loss
        dh = (model.head.T @ dy) / batch
        grad_s += float(dh @ h_unscaled)
        du = layer.rescaler * dh
        for g, j in zip(decision.gate_weights, decision.selected):
            pair = layer.loras[j]
            coef = g * pair.scaling
            grads_a[j] += coef * np.outer(du, bz_cache[j])
            grads_b[j] += coef * np.outer(pair.a.T @ du, z)

    return total_loss / batch, LoraGrads(grads_a, grads_b, grad_s), decisions


@dataclass
class ActivationCounter:
    counts: np.ndarray = field(default=None)
    steps: int = 0

    @classmethod
    def zeros(cls, num_experts: int) -> "ActivationCounter":
        return cls(counts=np.zeros(num_experts), steps=0)

    def frequencies(self) -> np.ndarray:
        if self.steps == 0:
            return np.zeros_like(self.counts)
        return self.counts / self.steps


def record_activations(counter: ActivationCounter,
                       decisions: list[RoutingDecision],
                       mode: str = "per_step") -> ActivationCounter:
    """Fold one optimizer step's routing decisions into the counter.

    per_step: an expert's count rises by 1 if it served at least one
    example in the step. per_example: by the fraction of examples it
    served, so counts stay bounded by steps in both modes.
    """
    if mode not in ("per_step", "per_example"):
        raise DomainError(f"unknown counting mode {mode!r}")
    counts = counter.counts.copy()
    if decisions:
        if mode == "per_step":
            touched = set()
            for d in decisions:
                touched.update(d.selected)
            for j in touched:
                counts[j] += 1.0
        else:
            for d in decisions:
                for j in d.selected:
                    counts[j] += 1.0 / len(decisions)
    return ActivationCounter(counts=counts, steps=counter.steps + 1)
