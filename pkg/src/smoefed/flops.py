"""Analytic forward-pass FLOPs and parameter accounting for dense and
sparse-MoE models with LoRA adapters.

Counting conventions: a multiply-add is 2 FLOPs; router softmax and
top-k add M + M*log2(M) FLOPs per token (negligible, included for
completeness); only the active experts of an SMoE layer are counted,
both for compute and for active-parameter tallies.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import yaml

from .errors import DomainError


@dataclass
class ArchSpec:
    name: str = "arch"
    dense_layers: list[tuple[int, int]] = field(default_factory=list)
    num_moe_layers: int = 0
    num_experts: int = 0           # M
    expert_shape: tuple[int, int] = (0, 0)   # (out, in) per expert matrix
    k_active: int = 0
    lora_rank: int = 0             # 0 = no adapters
    seq_len: int = 128
    batch: int = 1

    def validate(self) -> None:
        for m, n in self.dense_layers:
            if m < 1 or n < 1:
                raise DomainError(f"dense layer dims must be >= 1, got ({m}, {n})")
        if self.num_moe_layers > 0:
            m, n = self.expert_shape
            if m < 1 or n < 1:
                raise DomainError(f"expert dims must be >= 1, got ({m}, {n})")
            if not 1 <= self.k_active <= self.num_experts:
                raise DomainError(
                    f"k_active={self.k_active} outside [1, M={self.num_experts}]"
                )
        if self.lora_rank < 0 or self.seq_len < 1 or self.batch < 1:
            raise DomainError("lora_rank must be >= 0, seq_len and batch >= 1")

    def replace(self, **kw) -> "ArchSpec":
        d = self.__dict__.copy()
        d.update(kw)
        return ArchSpec(**d)

    @classmethod
    def from_file(cls, path) -> "ArchSpec":
        with open(path) as f:
            raw = yaml.safe_load(f)
        known = set(cls().__dict__)
        unknown = set(raw) - known
        if unknown:
            raise DomainError(f"unknown arch spec keys: {sorted(unknown)}")
        if "dense_layers" in raw:
            # Entries are [m, n] or [m, n, repeat].
            expanded = []
            for d in raw["dense_layers"]:
                if len(d) == 3:
                    expanded.extend([(d[0], d[1])] * d[2])
                else:
                    expanded.append((d[0], d[1]))
            raw["dense_layers"] = expanded
        if "expert_shape" in raw:
            raw["expert_shape"] = tuple(raw["expert_shape"])
        spec = cls(**raw)
        spec.validate()
        return spec


@dataclass
class FlopsReport:
    base_flops: float
    lora_flops: float
    total_flops: float
    params_total: int
    params_active: int
    trainable_total: int
    trainable_active: int


def count_linear(m: int, n: int, seq_len: int) -> float:
    """FLOPs of one m x n linear layer over seq_len tokens (2 per MAC)."""
    if m < 1 or n < 1 or seq_len < 1:
        raise DomainError(f"dims must be >= 1, got m={m}, n={n}, seq_len={seq_len}")
    return 2.0 * seq_len * m * n


def count_model(spec: ArchSpec) -> FlopsReport:
    spec.validate()
    em, en = spec.expert_shape
    seq = spec.seq_len

    base = sum(count_linear(m, n, seq) for m, n in spec.dense_layers)
    lora = 0.0
    if spec.num_moe_layers > 0:
        router = count_linear(spec.num_experts, en, seq)
        gating = seq * (spec.num_experts +
                        spec.num_experts * math.log2(spec.num_experts))
        experts = spec.k_active * count_linear(em, en, seq)
        base += spec.num_moe_layers * (router + gating + experts)
        if spec.lora_rank > 0:
            per_expert = 2.0 * seq * (em * spec.lora_rank + spec.lora_rank * en)
            lora = spec.num_moe_layers * spec.k_active * per_expert
    base *= spec.batch
    lora *= spec.batch

    dense_params = sum(m * n for m, n in spec.dense_layers)
    expert_params = em * en
    router_params = en * spec.num_experts
    params_total = dense_params + spec.num_moe_layers * (
        spec.num_experts * expert_params + router_params)
    params_active = dense_params + spec.num_moe_layers * (
        spec.k_active * expert_params + router_params)
    lora_per_expert = spec.lora_rank * (em + en)
    trainable_total = spec.num_moe_layers * spec.num_experts * lora_per_expert
    trainable_active = spec.num_moe_layers * spec.k_active * lora_per_expert

    return FlopsReport(
        base_flops=base,
        lora_flops=lora,
        total_flops=base + lora,
        params_total=params_total,
        params_active=params_active,
        trainable_total=trainable_total,
        trainable_active=trainable_active,
    )


def compare_budgets(specs: list[ArchSpec]) -> list[dict]:
    """Per-budget FLOPs table with percentage of the first entry."""
    if not specs:
        raise DomainError("no arch specs to compare")
    reports = [count_model(s) for s in specs]
    ref = reports[0].total_flops
    rows = []
    for spec, rep in zip(specs, reports):
        rows.append({
            "name": spec.name,
            "k_active": spec.k_active,
            "lora_rank": spec.lora_rank,
            "base_flops": rep.base_flops,
            "lora_flops": rep.lora_flops,
            "total_flops": rep.total_flops,
            "pct_of_first": 100.0 * rep.total_flops / ref,
            "params_total": rep.params_total,
            "params_active": rep.params_active,
            "trainable_total": rep.trainable_total,
            "trainable_active": rep.trainable_active,
        })
    return rows
