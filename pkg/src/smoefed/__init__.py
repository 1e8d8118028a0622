"""Desk-scale simulator of resource-adaptive federated fine-tuning for
sparse mixture-of-experts models with LoRA adapters."""

from .errors import (BudgetError, ConfigError, DimensionError, DomainError,
                     IntegrityError, NumericError)
from .federation import (AggregationPolicy, ClientConfig, ClientUpdate,
                         GlobalState, aggregate, compute_weights, local_train,
                         run_round, sample_clients)
from .moe import (ActivationCounter, LoraPair, RoutingDecision, SmoeLayer,
                  ToyModel, loss_and_grads, record_activations, route,
                  smoe_forward)
from .numerics import (AdamState, SvdResult, adam_step, matmul, softmax, svd,
                       svd_truncate, topk_indices)

__version__ = "0.1.0"
