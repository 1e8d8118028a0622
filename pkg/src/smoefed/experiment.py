"""Declarative experiment runner: config schema, deterministic run
construction, per-round metrics/heatmap/checkpoint artifacts, and
interrupt/resume support.

Every random draw is derived from the config seed plus a fixed stream
tag (and the round index where applicable), so (config, seed) fully
determines all artifacts and a resumed run is bitwise identical to an
uninterrupted one.
"""

from __future__ import annotations

import hashlib
import json
import os
from dataclasses import dataclass, field

import numpy as np
import yaml

from .baselines import compress_for_client, decompress_update
from .checkpoint import load_checkpoint, save_checkpoint
from .datagen import (Dataset, dirichlet_partition, generate_clustered_task,
                      split_80_10_10)
from .errors import ConfigError, NumericError
from .federation import (AggregationPolicy, ClientConfig, GlobalState,
                         RoundReport, aggregate, compute_weights, local_train,
                         run_round, sample_clients, write_heatmap_csv)
from .moe import LoraPair, SmoeLayer, ToyModel
from .numerics import softmax

METHODS = ("flame", "fedavg_trivial", "rank_compress")
RESCALER_MODES = ("learnable", "static", "none")
COUNTING_MODES = ("per_step", "per_example")

_MODEL_KEYS = {"input_dim", "hidden_dim", "num_experts", "k_full",
               "lora_rank", "lora_alpha"}
_DATASET_KEYS = {"classes", "per_class", "dim", "spread", "separation"}
_TOP_KEYS = {"method", "model", "budgets", "rescaler_mode", "temperature",
             "rounds", "local_epochs", "batch_size", "lr", "dataset",
             "dirichlet_alpha", "clients", "participation", "seed",
             "gate_renormalize", "counting_mode"}


@dataclass
class ExperimentConfig:
    method: str = "flame"
    model: dict = field(default_factory=lambda: {
        "input_dim": 16, "hidden_dim": 16, "num_experts": 8, "k_full": 8,
        "lora_rank": 4, "lora_alpha": 16.0,
    })
    budgets: list = field(default_factory=lambda: [8, 4, 2, 1])
    rescaler_mode: str = "learnable"
    temperature: int = 1
    rounds: int = 2                 # communication rounds
    local_epochs: int = 1
    batch_size: int = 16
    lr: float = 1.5e-4
    dataset: dict = field(default_factory=lambda: {
        "classes": 4, "per_class": 250, "dim": 16, "spread": 1.0,
        "separation": 6.0,
    })
    dirichlet_alpha: float = 0.5
    clients: int = 4
    participation: float = 1.0
    seed: int = 0
    gate_renormalize: bool = True
    counting_mode: str = "per_step"

    @classmethod
    def from_dict(cls, raw: dict) -> "ExperimentConfig":
        if not isinstance(raw, dict):
            raise ConfigError("config root must be a mapping")
        unknown = set(raw) - _TOP_KEYS
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        cfg = cls()
        merged_model = dict(cfg.model)
        merged_ds = dict(cfg.dataset)
        for key, val in raw.items():
            if key == "model":
                bad = set(val) - _MODEL_KEYS
                if bad:
                    raise ConfigError(f"unknown model keys: {sorted(bad)}")
                merged_model.update(val)
            elif key == "dataset":
                bad = set(val) - _DATASET_KEYS
                if bad:
                    raise ConfigError(f"unknown dataset keys: {sorted(bad)}")
                merged_ds.update(val)
            else:
                setattr(cfg, key, val)
        cfg.model = merged_model
        cfg.dataset = merged_ds
        cfg.validate()
        return cfg

    @classmethod
    def from_file(cls, path) -> "ExperimentConfig":
        try:
            with open(path) as f:
                raw = yaml.safe_load(f)
        except yaml.YAMLError as exc:
            raise ConfigError(f"cannot parse {path}: {exc}") from exc
        return cls.from_dict(raw or {})

    def validate(self) -> None:
        if self.method not in METHODS:
            raise ConfigError(f"method must be one of {METHODS}, got {self.method!r}")
        if self.rescaler_mode not in RESCALER_MODES:
            raise ConfigError(
                f"rescaler_mode must be one of {RESCALER_MODES}, got {self.rescaler_mode!r}")
        if self.counting_mode not in COUNTING_MODES:
            raise ConfigError(
                f"counting_mode must be one of {COUNTING_MODES}, got {self.counting_mode!r}")
        m = self.model
        if not 1 <= m["k_full"] <= m["num_experts"]:
            raise ConfigError(
                f"model.k_full={m['k_full']} outside [1, num_experts={m['num_experts']}]")
        if m["lora_rank"] < 1:
            raise ConfigError("model.lora_rank must be >= 1")
        if not self.budgets:
            raise ConfigError("budgets must be non-empty")
        for b in self.budgets:
            if self.method == "rank_compress":
                if not 1 <= b <= m["lora_rank"]:
                    raise ConfigError(
                        f"rank budget {b} outside [1, lora_rank={m['lora_rank']}]")
            elif not 1 <= b <= m["k_full"]:
                raise ConfigError(f"expert budget {b} outside [1, k_full={m['k_full']}]")
        if self.temperature < 0:
            raise ConfigError("temperature must be a non-negative integer")
        if self.rounds < 1:
            raise ConfigError("rounds must be >= 1")
        if self.local_epochs < 0:
            raise ConfigError("local_epochs must be >= 0")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if self.lr <= 0:
            raise ConfigError("lr must be > 0")
        if not 0.0 < self.participation <= 1.0:
            raise ConfigError("participation must be in (0, 1]")
        if self.clients < 1:
            raise ConfigError("clients must be >= 1")
        if self.dirichlet_alpha <= 0:
            raise ConfigError("dirichlet_alpha must be > 0")

    def to_dict(self) -> dict:
        return {
            "method": self.method,
            "model": dict(self.model),
            "budgets": list(self.budgets),
            "rescaler_mode": self.rescaler_mode,
            "temperature": self.temperature,
            "rounds": self.rounds,
            "local_epochs": self.local_epochs,
            "batch_size": self.batch_size,
            "lr": self.lr,
            "dataset": dict(self.dataset),
            "dirichlet_alpha": self.dirichlet_alpha,
            "clients": self.clients,
            "participation": self.participation,
            "seed": self.seed,
            "gate_renormalize": self.gate_renormalize,
            "counting_mode": self.counting_mode,
        }

    def content_hash(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()


def build_model_template(cfg: ExperimentConfig) -> ToyModel:
    """Frozen base model drawn from the config seed: embed, experts,
    router, and head never change during fine-tuning."""
    m = cfg.model
    hid = m["hidden_dim"]
    rng = np.random.default_rng([cfg.seed, 3])
    embed = rng.normal(0.0, 1.0 / np.sqrt(m["input_dim"]), (hid, m["input_dim"]))
    experts = [rng.normal(0.0, 1.0 / np.sqrt(hid), (hid, hid))
               for _ in range(m["num_experts"])]
    router = rng.normal(0.0, 1.0 / np.sqrt(hid), (hid, m["num_experts"]))
    head = rng.normal(0.0, 1.0 / np.sqrt(hid), (cfg.dataset["classes"], hid))
    loras = [LoraPair.init(hid, hid, m["lora_rank"], m["lora_alpha"],
                           np.random.default_rng([cfg.seed, 4, j]))
             for j in range(m["num_experts"])]
    layer = SmoeLayer(experts=experts, router=router, loras=loras,
                      rescaler=1.0, k_full=m["k_full"],
                      renormalize_gates=cfg.gate_renormalize)
    return ToyModel(embed=embed, smoe=layer, head=head,
                    task_kind="classification")


@dataclass
class ExperimentContext:
    config: ExperimentConfig
    dataset: Dataset
    train_idx: np.ndarray
    val_idx: np.ndarray
    test_idx: np.ndarray
    template: ToyModel
    initial_state: GlobalState
    clients: list[ClientConfig]

    @property
    def train_inputs(self) -> np.ndarray:
        return self.dataset.inputs[self.train_idx]

    @property
    def train_labels(self):
        return self.dataset.labels[self.train_idx]


def build_context(cfg: ExperimentConfig) -> ExperimentContext:
    d = cfg.dataset
    ds = generate_clustered_task(d["classes"], d["per_class"], d["dim"],
                                 d["spread"], cfg.seed,
                                 separation=d["separation"])
    train_idx, val_idx, test_idx = split_80_10_10(
        ds, np.random.default_rng([cfg.seed, 1]))
    train = ds.subset(train_idx)
    partition = dirichlet_partition(train, cfg.clients, cfg.dirichlet_alpha,
                                    np.random.default_rng([cfg.seed, 2]))
    template = build_model_template(cfg)
    initial = GlobalState(loras=[p.copy() for p in template.smoe.loras],
                          round_index=0)
    clients = []
    for cid in range(cfg.clients):
        budget = cfg.budgets[cid % len(cfg.budgets)]
        clients.append(ClientConfig(
            id=cid,
            indices=partition.client_indices[cid],
            k_i=cfg.model["k_full"] if cfg.method == "rank_compress" else budget,
            r_i=budget if cfg.method == "rank_compress" else None,
            local_epochs=cfg.local_epochs,
            batch_size=cfg.batch_size,
            seed=0,     # reseeded per round
            lr=cfg.lr,
        ))
    if cfg.method == "fedavg_trivial":
        for c in clients:
            c.k_i = cfg.model["k_full"]
    return ExperimentContext(
        config=cfg, dataset=ds, train_idx=train_idx, val_idx=val_idx,
        test_idx=test_idx, template=template, initial_state=initial,
        clients=clients,
    )


def evaluate_global(template: ToyModel, state: GlobalState, ds: Dataset,
                    indices: np.ndarray, k: int,
                    rescaler: float = 1.0) -> tuple[float, float]:
    """Held-out mean loss and accuracy of the global model at budget k."""
    model = template.clone()
    model.smoe.loras = state.copy_loras()
    model.smoe.rescaler = rescaler
    total = 0.0
    correct = 0
    for i in indices:
        y, _ = model.forward(ds.inputs[i], k)
        label = int(ds.labels[i])
        p = softmax(y)
        total += float(-np.log(p[label]))
        if int(np.argmax(p)) == label:
            correct += 1
    n = len(indices)
    return total / n, correct / n


def _eval_rescaler(cfg: ExperimentConfig, k: int) -> float:
    # Rescalers are client-local and never aggregated; the global model
    # is evaluated with the static ratio when that mode is configured,
    # and with 1.0 otherwise.
    if cfg.rescaler_mode == "static":
        return cfg.model["k_full"] / k
    return 1.0


def _client_round_seed(seed: int, round_index: int, client_id: int) -> int:
    return int(np.random.SeedSequence([seed, round_index, client_id])
               .generate_state(1)[0])


def _run_rank_compress_round(ctx: ExperimentContext, state: GlobalState,
                             rng: np.random.Generator,
                             rescalers: dict[int, float]) -> tuple[GlobalState, RoundReport]:
    """One round of the rank-compression baseline: the server SVD-truncates
    the global delta to each client's rank, clients train at full expert
    activation, updates are zero-padded back and FedAvg-averaged."""
    cfg = ctx.config
    sampled = sample_clients(ctx.clients, cfg.participation, rng)
    policy = AggregationPolicy(kind="fedavg")
    report = RoundReport(round_index=state.round_index,
                         sampled_ids=[c.id for c in sampled])
    updates = []
    r_global = cfg.model["lora_rank"]
    alpha_global = cfg.model["lora_alpha"]
    for client in sampled:
        client_state = GlobalState(
            loras=compress_for_client(state, client.r_i),
            round_index=state.round_index)
        try:
            upd = local_train(
                client_state, client, ctx.template,
                ctx.train_inputs, ctx.train_labels,
                rescaler_mode=cfg.rescaler_mode,
                rescaler_init=rescalers.get(client.id, 1.0),
                counting_mode=cfg.counting_mode,
            )
        except NumericError:
            report.excluded_ids.append(client.id)
            continue
        upd.loras = [decompress_update(p, r_global, alpha_global)
                     for p in upd.loras]
        rescalers[client.id] = upd.rescaler
        report.client_losses[client.id] = upd.train_loss
        report.client_steps[client.id] = upd.activation.steps
        updates.append(upd)
    if not updates:
        return GlobalState(state.copy_loras(), state.round_index + 1), report
    report.freq_matrix = np.stack([u.activation.frequencies() for u in updates])
    report.gamma = compute_weights(updates, policy)
    new_state = aggregate(updates, state, policy, weights=report.gamma)
    return new_state, report


@dataclass
class RunArtifacts:
    run_dir: str
    metrics_path: str
    heatmap_paths: list[str]
    checkpoint_paths: list[str]
    config_snapshot_path: str
    final_state: GlobalState | None = None


def _metrics_header(cfg: ExperimentConfig) -> str:
    tag = "r" if cfg.method == "rank_compress" else "k"
    cols = ["round", "method", "policy", "temperature", "mean_train_loss",
            "excluded"]
    for b in _distinct_budgets(cfg):
        cols += [f"val_loss_{tag}{b}", f"val_acc_{tag}{b}"]
    cols += ["freq_mean", "freq_cv"]
    return ",".join(cols)


def _distinct_budgets(cfg: ExperimentConfig) -> list:
    seen = []
    for b in cfg.budgets:
        if b not in seen:
            seen.append(b)
    return seen


def _fmt(x: float) -> str:
    return repr(float(x))


def _metrics_row(cfg: ExperimentConfig, ctx: ExperimentContext,
                 state: GlobalState, report: RoundReport) -> str:
    policy = "flame" if cfg.method == "flame" else "fedavg"
    losses = list(report.client_losses.values())
    mean_loss = float(np.mean(losses)) if losses else float("nan")
    parts = [str(report.round_index), cfg.method, policy,
             str(cfg.temperature), _fmt(mean_loss),
             str(len(report.excluded_ids))]
    for b in _distinct_budgets(cfg):
        k_eval = cfg.model["k_full"] if cfg.method == "rank_compress" else b
        loss, acc = evaluate_global(
            ctx.template, state, ctx.dataset, ctx.val_idx, k_eval,
            rescaler=_eval_rescaler(cfg, k_eval))
        parts += [_fmt(loss), _fmt(acc)]
    if report.freq_matrix is not None:
        per_expert = report.freq_matrix.mean(axis=0)
        mean = float(per_expert.mean())
        cv = float(per_expert.std() / mean) if mean > 0 else float("nan")
    else:
        mean, cv = float("nan"), float("nan")
    parts += [_fmt(mean), _fmt(cv)]
    return ",".join(parts)


def run_experiment(config, out_dir, rounds_limit: int | None = None,
                   resume: bool = False) -> RunArtifacts:
    """Execute (or resume) a federated run, writing metrics.csv, per-round
    activation heatmaps, and per-round checkpoints under out_dir."""
    if isinstance(config, (str, os.PathLike)):
        cfg = ExperimentConfig.from_file(config)
    elif isinstance(config, ExperimentConfig):
        cfg = config
    else:
        cfg = ExperimentConfig.from_dict(config)
    cfg.validate()

    out_dir = str(out_dir)
    ckpt_dir = os.path.join(out_dir, "checkpoints")
    metrics_path = os.path.join(out_dir, "metrics.csv")
    snapshot_path = os.path.join(out_dir, "config.yaml")
    os.makedirs(ckpt_dir, exist_ok=True)

    ctx = build_context(cfg)
    header = _metrics_header(cfg)

    start_round = 0
    rescalers: dict[int, float] = {}
    state = ctx.initial_state
    if resume:
        rounds_done = sorted(
            int(f[len("round"):-len(".ckpt")])
            for f in os.listdir(ckpt_dir)
            if f.startswith("round") and f.endswith(".ckpt")
        )
        if rounds_done:
            last = rounds_done[-1]
            state, rescalers, extra = load_checkpoint(
                os.path.join(ckpt_dir, f"round{last}.ckpt"))
            if extra.get("config_hash") != cfg.content_hash():
                raise ConfigError(
                    "checkpoint was produced by a different config; refusing to resume")
            start_round = last
            # Keep only the rows belonging to completed rounds.
            with open(metrics_path) as f:
                lines = f.read().splitlines()
            with open(metrics_path, "w") as f:
                f.write("\n".join(lines[:1 + start_round]) + "\n")
    if not resume or start_round == 0:
        snapshot = cfg.to_dict()
        snapshot["content_hash"] = cfg.content_hash()
        with open(snapshot_path, "w") as f:
            yaml.safe_dump(snapshot, f, sort_keys=True)
        with open(metrics_path, "w") as f:
            f.write(header + "\n")

    end_round = cfg.rounds if rounds_limit is None else min(cfg.rounds, rounds_limit)
    heatmaps, checkpoints = [], []
    for rnd in range(start_round, end_round):
        for client in ctx.clients:
            client.seed = _client_round_seed(cfg.seed, rnd, client.id)
        rng = np.random.default_rng([cfg.seed, 100 + rnd])
        state = GlobalState(state.loras, round_index=rnd)
        if cfg.method == "rank_compress":
            state, report = _run_rank_compress_round(ctx, state, rng, rescalers)
        else:
            policy = (AggregationPolicy(kind="flame", temperature=cfg.temperature)
                      if cfg.method == "flame"
                      else AggregationPolicy(kind="fedavg"))
            state, report = run_round(
                state, ctx.clients, policy, cfg.participation, rng,
                ctx.template, ctx.train_inputs, ctx.train_labels,
                rescaler_mode=cfg.rescaler_mode, rescalers=rescalers,
                counting_mode=cfg.counting_mode,
            )
        with open(metrics_path, "a") as f:
            f.write(_metrics_row(cfg, ctx, state, report) + "\n")
        if report.freq_matrix is not None:
            hm = os.path.join(out_dir, f"activations_round{rnd}.csv")
            write_heatmap_csv(report, hm)
            heatmaps.append(hm)
        with open(os.path.join(out_dir, "rounds.jsonl"), "a" if rnd else "w") as f:
            f.write(json.dumps(report.to_record(), sort_keys=True) + "\n")
        ck = os.path.join(ckpt_dir, f"round{rnd + 1}.ckpt")
        save_checkpoint(state, ck, rescalers=rescalers,
                        extra={"config_hash": cfg.content_hash()})
        checkpoints.append(ck)

    return RunArtifacts(
        run_dir=out_dir, metrics_path=metrics_path, heatmap_paths=heatmaps,
        checkpoint_paths=checkpoints, config_snapshot_path=snapshot_path,
        final_state=state,
    )


def export_heatmap(run_dir, round_index: int) -> str:
    path = os.path.join(str(run_dir), f"activations_round{round_index}.csv")
    if not os.path.exists(path):
        raise FileNotFoundError(
            f"run {run_dir} has no activation data for round {round_index}")
    return path
