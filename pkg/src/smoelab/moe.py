"""Expert bank, gated combination, and the progressive expert-count schedule.

The feedforward block of each layer is split into n_experts equal shards
(d_model -> inner_dim/n_experts -> d_model). Tokens are dispatched to the
experts their gating selected; experts outside the selected set are never
evaluated, and the sparse result equals the dense masked sum over all
experts. The number of active experts k grows from 1 to n_experts over the
training horizon.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import diffcore as dc
from . import routing
from .diffcore import Tensor
from .errors import ContractError

_LN_EPS = 1e-5


class Expert:
    """One feedforward shard: linear, ReLU, linear."""

    def __init__(self, rng: np.random.Generator, d_model: int, d_inner: int):
        b_in = 1.0 / np.sqrt(d_model)
        b_hid = 1.0 / np.sqrt(d_inner)
        self.w1 = dc.tensor(rng.uniform(-b_in, b_in, size=(d_model, d_inner)), requires_grad=True)
        self.b1 = dc.tensor(np.zeros(d_inner), requires_grad=True)
        self.w2 = dc.tensor(rng.uniform(-b_hid, b_hid, size=(d_inner, d_model)), requires_grad=True)
        self.b2 = dc.tensor(np.zeros(d_model), requires_grad=True)

    def __call__(self, h: Tensor) -> Tensor:
        hidden = dc.relu(dc.add(dc.matmul(h, self.w1), self.b1))
        return dc.add(dc.matmul(hidden, self.w2), self.b2)


class DenseFFN:
    """The unsplit feedforward path used by the dense baselines."""

    def __init__(self, rng: np.random.Generator, d_model: int, inner_dim: int):
        b_in = 1.0 / np.sqrt(d_model)
        b_hid = 1.0 / np.sqrt(inner_dim)
        self.w1 = dc.tensor(rng.uniform(-b_in, b_in, size=(d_model, inner_dim)), requires_grad=True)
        self.b1 = dc.tensor(np.zeros(inner_dim), requires_grad=True)
        self.w2 = dc.tensor(rng.uniform(-b_hid, b_hid, size=(inner_dim, d_model)), requires_grad=True)
        self.b2 = dc.tensor(np.zeros(d_model), requires_grad=True)

    def __call__(self, h, dropout_rate=0.0, training=False, rng=None):
        hidden = dc.relu(dc.add(dc.matmul(h, self.w1), self.b1))
        if dropout_rate > 0.0:
            hidden = dc.dropout(hidden, dropout_rate, training, rng)
        return dc.add(dc.matmul(hidden, self.w2), self.b2)


class ExpertBank:
    """n_experts identically shaped experts with per-expert call counting.

    inner_dim must divide evenly: each expert's inner dimension is
    inner_dim / n_experts, so running all experts costs the same as the
    unsplit feedforward network.
    """

    def __init__(self, rng: np.random.Generator, d_model: int, inner_dim: int, n_experts: int):
        if inner_dim % n_experts:
            raise ContractError(f"inner_dim {inner_dim} not divisible by n_experts {n_experts}")
        self.n_experts = n_experts
        self.d_e = inner_dim // n_experts
        self.experts = [Expert(rng, d_model, self.d_e) for _ in range(n_experts)]
        self.call_counts = np.zeros(n_experts, dtype=np.int64)

    def run_expert(self, j: int, h: Tensor) -> Tensor:
        self.call_counts[j] += h.shape[0]
        return self.experts[j](h)

    def reset_counts(self):
        self.call_counts[:] = 0


@dataclass
class KSchedule:
    """Active-expert count over training: k_start at step 0, k_end at the end."""

    k_start: int
    k_end: int
    total_steps: int
    shape: str = "linear"

    def __post_init__(self):
        if self.shape not in ("linear", "doubling"):
            raise ContractError(f"unknown schedule shape {self.shape!r}")
        if not 1 <= self.k_start <= self.k_end:
            raise ContractError("schedule requires 1 <= k_start <= k_end")


def current_k(schedule: KSchedule, step: int) -> int:
    """k at a given optimizer step; clamped to k_end beyond the horizon."""
    if step < 0:
        raise ContractError(f"step must be non-negative, got {step}")
    n, total = schedule.k_end, schedule.total_steps
    if total <= 0 or step >= total:
        return n
    if schedule.shape == "linear":
        return min(n, schedule.k_start + (n - schedule.k_start) * step // total)
    # doubling: 1, 2, 4, ... n over equal step fractions
    stages = [schedule.k_start]
    while stages[-1] < n:
        stages.append(min(n, stages[-1] * 2))
    return stages[min(len(stages) - 1, step * len(stages) // total)]


def moe_forward(h: Tensor, gating: routing.GatingOutput, bank: ExpertBank) -> Tensor:
    """Combine expert outputs weighted by the gates.

    Only selected experts run, on exactly the rows that selected them; the
    result matches the dense sum over all experts with masked gates. Accepts
    per-token gating (gates (M, N)) or a single shared draw (gates (N,)),
    which is applied to every row.
    """
    n = bank.n_experts
    if gating.gates.shape[-1] != n:
        raise ContractError(
            f"gating is for {gating.gates.shape[-1]} experts, bank has {n}"
        )
    m = h.shape[0]
    if gating.gates.ndim == 1:
        # one draw shared by every token (stochastic selection)
        out = None
        for j in gating.selected:
            weighted = dc.scale(bank.run_expert(int(j), h), float(gating.gates.data[j]))
            out = weighted if out is None else dc.add(out, weighted)
        return out
    if gating.gates.shape[0] != m:
        raise ContractError(f"gating covers {gating.gates.shape[0]} tokens, input has {m}")
    out = None
    for j in range(n):
        rows = np.nonzero((gating.selected == j).any(axis=1))[0]
        if rows.size == 0:
            continue
        expert_out = bank.run_expert(j, dc.take_rows(h, rows))
        weights = dc.col(dc.take_rows(gating.gates, rows), j)
        contrib = dc.scatter_rows(dc.mul(weights, expert_out), rows, m)
        out = contrib if out is None else dc.add(out, contrib)
    return out


def layer_forward(
    h: Tensor,
    strategy: routing.RouterStrategy,
    bank,
    k: int,
    *,
    d_model: int,
    training: bool = False,
    rng: np.random.Generator | None = None,
    dropout_rate: float = 0.0,
):
    """Run one feedforward block under the given routing strategy.

    h is (tokens, d_model). Dense kinds run the unsplit feedforward path and
    produce no gating diagnostics; the routed kinds gate per token; thor
    draws one expert subset per call. Returns (output, GatingOutput or None).
    """
    kind = strategy.kind
    if kind == routing.DENSE:
        return bank(h), None
    if kind == routing.DENSE_DROPOUT:
        return bank(h, dropout_rate=dropout_rate, training=training, rng=rng), None
    if kind == routing.THOR:
        gating = routing.thor_select(rng, bank.n_experts, k)
        return moe_forward(h, gating, bank), gating
    if kind == routing.SMOE or kind == routing.SMOE_DROPOUT:
        router = strategy.router
    elif kind == routing.HYPER_ROUTER:
        if not training and strategy.cached_router is not None:
            router = strategy.cached_router
        else:
            router = routing.generate_router(
                strategy.hypernet, strategy.embedding, bank.n_experts, d_model
            )
    else:
        raise ContractError(f"unhandled strategy kind {kind!r}")
    gating = routing.gate(h, router, k, renormalize=strategy.renormalize)
    return moe_forward(h, gating, bank), gating
