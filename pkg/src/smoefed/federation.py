"""Client local training, server-side aggregation (plain dataset-size
weighting and activation-aware weighting), client sampling, and round
orchestration.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .errors import BudgetError, DimensionError, DomainError, NumericError
from .moe import (ActivationCounter, LoraPair, ToyModel, loss_and_grads,
                  record_activations)
from .numerics import AdamState, adam_step

logger = logging.getLogger(__name__)

FEDAVG = "fedavg"
FLAME = "flame"


@dataclass
class ClientConfig:
    id: int
    indices: np.ndarray            # rows of the training set owned by this client
    k_i: int | None = None         # active-expert budget (expert-reduction methods)
    r_i: int | None = None         # LoRA-rank budget (rank-compression methods)
    local_epochs: int = 1
    batch_size: int = 16
    seed: int = 0
    lr: float = 1.5e-4


@dataclass
class ClientUpdate:
    client_id: int
    loras: list[LoraPair]
    activation: ActivationCounter
    dataset_size: int
    rescaler: float
    train_loss: float = float("nan")


@dataclass
class AggregationPolicy:
    kind: str = FEDAVG             # "fedavg" | "flame"
    temperature: int = 1           # ignored by fedavg

    def __post_init__(self):
        if self.kind not in (FEDAVG, FLAME):
            raise DomainError(f"unknown aggregation kind {self.kind!r}")
        if self.temperature < 0:
            raise DomainError(f"temperature must be >= 0, got {self.temperature}")


@dataclass
class GlobalState:
    loras: list[LoraPair]
    round_index: int = 0

    def copy_loras(self) -> list[LoraPair]:
        return [p.copy() for p in self.loras]


def _static_rescaler(k_full: int, k_i: int) -> float:
    return k_full / k_i


def local_train(global_state: GlobalState, client: ClientConfig,
                model_template: ToyModel, inputs: np.ndarray, labels,
                rescaler_mode: str = "learnable",
                rescaler_init: float = 1.0,
                counting_mode: str = "per_step") -> ClientUpdate:
    """Run the client's local fine-tuning and return its update.

    Copies the global LoRA pairs into a fresh model, trains them (and the
    rescaler, when learnable) with Adam over local_epochs passes of the
    client partition, and records per-step expert activations.
    """
    if client.indices is None or len(client.indices) == 0:
        raise DomainError(f"client {client.id} has an empty partition")
    k_i = client.k_i if client.k_i is not None else model_template.smoe.k_full
    if not 1 <= k_i <= model_template.smoe.k_full:
        raise BudgetError(
            f"client {client.id}: k_i={k_i} outside [1, {model_template.smoe.k_full}]"
        )
    if rescaler_mode not in ("learnable", "static", "none"):
        raise DomainError(f"unknown rescaler mode {rescaler_mode!r}")

    model = model_template.clone()
    model.smoe.loras = global_state.copy_loras()
    if rescaler_mode == "learnable":
        model.smoe.rescaler = rescaler_init
    elif rescaler_mode == "static":
        model.smoe.rescaler = _static_rescaler(model.smoe.k_full, k_i)
    else:
        model.smoe.rescaler = 1.0

    counter = ActivationCounter.zeros(model.smoe.num_experts)
    if client.local_epochs == 0:
        return ClientUpdate(
            client_id=client.id,
            loras=model.smoe.loras,
            activation=counter,
            dataset_size=len(client.indices),
            rescaler=model.smoe.rescaler,
        )

    states_a = [AdamState.for_param(p.a, lr=client.lr) for p in model.smoe.loras]
    states_b = [AdamState.for_param(p.b, lr=client.lr) for p in model.smoe.loras]
    state_s = AdamState.for_param(np.zeros((1, 1)), lr=client.lr)

    rng = np.random.default_rng(client.seed)
    own_x = inputs[client.indices]
    own_y = [labels[i] for i in client.indices]
    step = 0
    loss_sum = 0.0
    for _ in range(client.local_epochs):
        perm = rng.permutation(len(own_x))
        for start in range(0, len(perm), client.batch_size):
            batch_idx = perm[start:start + client.batch_size]
            bx = own_x[batch_idx]
            by = [own_y[i] for i in batch_idx]
            loss, grads, decisions = loss_and_grads(model, bx, by, k_i)
            if not np.isfinite(loss):
                raise NumericError(
                    f"client {client.id}: non-finite loss at step {step}"
                )
            for j, pair in enumerate(model.smoe.loras):
                pair.a, states_a[j] = adam_step(pair.a, grads.a[j], states_a[j])
                pair.b, states_b[j] = adam_step(pair.b, grads.b[j], states_b[j])
            if rescaler_mode == "learnable":
                s_mat = np.array([[model.smoe.rescaler]])
                g_mat = np.array([[grads.rescaler]])
                s_mat, state_s = adam_step(s_mat, g_mat, state_s)
                model.smoe.rescaler = float(s_mat[0, 0])
            counter = record_activations(counter, decisions, mode=counting_mode)
            loss_sum += loss
            step += 1

    return ClientUpdate(
        client_id=client.id,
        loras=model.smoe.loras,
        activation=counter,
        dataset_size=len(client.indices),
        rescaler=model.smoe.rescaler,
        train_loss=loss_sum / step if step else float("nan"),
    )


def compute_weights(updates: list[ClientUpdate],
                    policy: AggregationPolicy) -> np.ndarray:
    """Per-client, per-expert aggregation weights.

    fedavg: weight = dataset size for every expert. flame: weight =
    (activation frequency)^t * dataset size, with 0^0 := 1 so t=0
    reduces exactly to fedavg. Clients with zero completed steps get a
    zero row under flame (logged).
    """
    if not updates:
        raise DomainError("no client updates to weight")
    num_experts = len(updates[0].loras)
    weights = np.zeros((len(updates), num_experts))
    for i, upd in enumerate(updates):
        if len(upd.loras) != num_experts:
            raise DimensionError(
                f"client {upd.client_id} has {len(upd.loras)} experts, expected {num_experts}"
            )
        if policy.kind == FEDAVG:
            weights[i, :] = float(upd.dataset_size)
        else:
            if upd.activation.steps == 0:
                logger.warning(
                    "client %s completed 0 steps; dropped from activation-aware "
                    "aggregation", upd.client_id,
                )
                continue
            freq = upd.activation.frequencies()
            weights[i, :] = freq ** policy.temperature * float(upd.dataset_size)
    return weights


def aggregate(updates: list[ClientUpdate], previous: GlobalState,
              policy: AggregationPolicy,
              weights: np.ndarray | None = None) -> GlobalState:
    """Weighted per-expert average of client LoRA pairs.

    Experts with zero total weight keep the previous global matrices
    (zero-mass fallback). Rescalers are client-local and never averaged.
    """
    if weights is None:
        weights = compute_weights(updates, policy)
    num_experts = len(previous.loras)
    new_loras = []
    for j in range(num_experts):
        ref = previous.loras[j]
        for upd in updates:
            if upd.loras[j].a.shape != ref.a.shape or upd.loras[j].b.shape != ref.b.shape:
                raise DimensionError(
                    f"client {upd.client_id} expert {j} shape "
                    f"{upd.loras[j].a.shape}/{upd.loras[j].b.shape} does not match "
                    f"global {ref.a.shape}/{ref.b.shape}"
                )
        total = weights[:, j].sum()
        if total == 0.0:
            new_loras.append(ref.copy())
            continue
        # Normalize first so a lone weight of 1.0 reproduces the client
        # matrices bit-exactly.
        norm = weights[:, j] / total
        a = np.zeros_like(ref.a)
        b = np.zeros_like(ref.b)
        for i, upd in enumerate(updates):
            if norm[i] == 0.0:
                continue
            a += norm[i] * upd.loras[j].a
            b += norm[i] * upd.loras[j].b
        new_loras.append(LoraPair(a, b, ref.rank, ref.alpha))
    return GlobalState(loras=new_loras, round_index=previous.round_index + 1)


def sample_clients(clients: list[ClientConfig], participation: float,
                   rng: np.random.Generator) -> list[ClientConfig]:
    """Uniformly sample round(p*N) clients without replacement (min 1),
    returned in stable client order."""
    if not 0.0 < participation <= 1.0:
        raise DomainError(f"participation must be in (0, 1], got {participation}")
    n = len(clients)
    n_pick = max(1, int(np.floor(participation * n + 0.5)))
    if n_pick >= n:
        return list(clients)
    picked = rng.choice(n, size=n_pick, replace=False)
    return [clients[i] for i in sorted(int(i) for i in picked)]


@dataclass
class RoundReport:
    round_index: int
    sampled_ids: list[int]
    client_losses: dict[int, float] = field(default_factory=dict)
    client_steps: dict[int, int] = field(default_factory=dict)
    freq_matrix: np.ndarray | None = None     # sampled clients x M
    gamma: np.ndarray | None = None
    excluded_ids: list[int] = field(default_factory=list)

    def to_record(self) -> dict:
        return {
            "round": self.round_index,
            "sampled": self.sampled_ids,
            "losses": {str(k): v for k, v in self.client_losses.items()},
            "steps": {str(k): v for k, v in self.client_steps.items()},
            "excluded": self.excluded_ids,
        }


def run_round(state: GlobalState, clients: list[ClientConfig],
              policy: AggregationPolicy, participation: float,
              rng: np.random.Generator, model_template: ToyModel,
              inputs: np.ndarray, labels,
              rescaler_mode: str = "learnable",
              rescalers: dict[int, float] | None = None,
              counting_mode: str = "per_step") -> tuple[GlobalState, RoundReport]:
    """One communication round: sample, broadcast, train locally,
    aggregate. Diverged clients are excluded with a warning instead of
    aborting the round."""
    sampled = sample_clients(clients, participation, rng)
    if rescalers is None:
        rescalers = {}
    updates = []
    report = RoundReport(round_index=state.round_index, sampled_ids=[c.id for c in sampled])
    for client in sampled:
        try:
            upd = local_train(
                state, client, model_template, inputs, labels,
                rescaler_mode=rescaler_mode,
                rescaler_init=rescalers.get(client.id, 1.0),
                counting_mode=counting_mode,
            )
        except NumericError as exc:
            logger.warning("excluding diverged client %s: %s", client.id, exc)
            report.excluded_ids.append(client.id)
            continue
        rescalers[client.id] = upd.rescaler
        report.client_losses[client.id] = upd.train_loss
        report.client_steps[client.id] = upd.activation.steps
        updates.append(upd)
    if not updates:
        logger.warning("round %d: every client diverged; global state kept",
                       state.round_index)
        return GlobalState(state.copy_loras(), state.round_index + 1), report
    report.freq_matrix = np.stack([u.activation.frequencies() for u in updates])
    report.gamma = compute_weights(updates, policy)
    new_state = aggregate(updates, state, policy, weights=report.gamma)
    return new_state, report


def write_heatmap_csv(report: RoundReport, path) -> None:
    """Activation-frequency heatmap row data: one CSV row per client."""
    if report.freq_matrix is None:
        raise DomainError(f"round {report.round_index} produced no frequency data")
    ids = [i for i in report.sampled_ids if i not in report.excluded_ids]
    num_experts = report.freq_matrix.shape[1]
    header = "client_id," + ",".join(f"expert_{j}" for j in range(num_experts))
    lines = [header]
    for cid, row in zip(ids, report.freq_matrix):
        lines.append(str(cid) + "," + ",".join(repr(float(v)) for v in row))
    with open(path, "w") as f:
        f.write("\n".join(lines) + "\n")
