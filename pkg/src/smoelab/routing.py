"""Router construction and the softmax-then-top-k gating transform.

Four routing families share one gating function:

* a trainable linear router,
* a frozen randomly initialized router,
* a router whose weight matrix is generated per layer by a frozen
  two-layer perceptron from a small trainable embedding, and
* routerless uniform stochastic selection with a consistency penalty.

Gating applies softmax to the router logits first and then keeps the k
largest probabilities, zeroing the rest without renormalizing, so the kept
gates sum to at most one. Ties keep the lowest expert index. Gradients flow
only through the kept gates.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import diffcore as dc
from .diffcore import Tensor
from .errors import ContractError, DimensionError

DENSE = "dense"
DENSE_DROPOUT = "dense_dropout"
SMOE = "smoe"
SMOE_DROPOUT = "smoe_dropout"
HYPER_ROUTER = "hyper_router"
THOR = "thor"

STRATEGIES = (DENSE, DENSE_DROPOUT, SMOE, SMOE_DROPOUT, HYPER_ROUTER, THOR)
ROUTED_STRATEGIES = (SMOE, SMOE_DROPOUT, HYPER_ROUTER)


@dataclass
class RouterParams:
    """Linear router: (n_experts, d_model) weight plus a per-expert bias."""

    weight: Tensor
    bias: Tensor

    @property
    def n_experts(self):
        return self.weight.shape[0]

    @property
    def d_model(self):
        return self.weight.shape[1]


@dataclass
class RouterEmbedding:
    """Trainable per-layer vector from which a router is generated."""

    e: Tensor


@dataclass
class HypernetworkSpec:
    """Frozen two-layer ReLU perceptron mapping an embedding to router params.

    Weights are stored (fan_in, fan_out) for right multiplication. The output
    has size n_experts * d_model + n_experts: weight rows first, bias last.
    All four tensors are excluded from gradient tracking; `eval_count` counts
    generation calls so caching can be verified.
    """

    w1: Tensor
    b1: Tensor
    w2: Tensor
    b2: Tensor
    eval_count: int = 0

    @property
    def frozen(self):
        return True


@dataclass
class GatingOutput:
    """Sparse gates plus bookkeeping for diagnostics.

    gates has exactly k nonzero entries per row and is not renormalized;
    dense_gates is the full softmax output before masking; selected holds
    the kept expert indices per row, sorted ascending.
    """

    gates: Tensor
    selected: np.ndarray
    dense_gates: Tensor

    @property
    def k(self):
        return self.selected.shape[-1]


@dataclass
class RouterStrategy:
    """A routing policy and the parameters it owns.

    smoe owns a trainable router; smoe_dropout a frozen one; hyper_router a
    frozen hypernetwork plus a trainable embedding; thor owns nothing. The
    dense kinds bypass gating entirely.
    """

    kind: str
    router: RouterParams | None = None
    hypernet: HypernetworkSpec | None = None
    embedding: RouterEmbedding | None = None
    consistency_weight: float = 1.0
    renormalize: bool = False
    cached_router: RouterParams | None = field(default=None, repr=False)

    def __post_init__(self):
        if self.kind not in STRATEGIES:
            raise ContractError(f"unknown strategy {self.kind!r}, expected one of {STRATEGIES}")


def init_frozen_router(rng: np.random.Generator, n_experts: int, d_model: int) -> RouterParams:
    """Uniform init in [-1/sqrt(d), +1/sqrt(d)], excluded from training."""
    bound = 1.0 / np.sqrt(d_model)
    weight = rng.uniform(-bound, bound, size=(n_experts, d_model))
    bias = rng.uniform(-bound, bound, size=n_experts)
    return RouterParams(dc.tensor(weight), dc.tensor(bias))


def init_trainable_router(rng: np.random.Generator, n_experts: int, d_model: int) -> RouterParams:
    bound = 1.0 / np.sqrt(d_model)
    weight = rng.uniform(-bound, bound, size=(n_experts, d_model))
    bias = rng.uniform(-bound, bound, size=n_experts)
    return RouterParams(
        dc.tensor(weight, requires_grad=True), dc.tensor(bias, requires_grad=True)
    )


def init_hypernetwork(
    rng: np.random.Generator, embed_dim: int, inner_dim: int, n_experts: int, d_model: int
) -> HypernetworkSpec:
    out_dim = n_experts * d_model + n_experts
    b_in = 1.0 / np.sqrt(embed_dim)
    b_hid = 1.0 / np.sqrt(inner_dim)
    return HypernetworkSpec(
        w1=dc.tensor(rng.uniform(-b_in, b_in, size=(embed_dim, inner_dim))),
        b1=dc.tensor(rng.uniform(-b_in, b_in, size=inner_dim)),
        w2=dc.tensor(rng.uniform(-b_hid, b_hid, size=(inner_dim, out_dim))),
        b2=dc.tensor(rng.uniform(-b_hid, b_hid, size=out_dim)),
    )


def init_router_embedding(rng: np.random.Generator, embed_dim: int) -> RouterEmbedding:
    return RouterEmbedding(dc.tensor(rng.normal(0.0, 0.02, size=embed_dim), requires_grad=True))


def generate_router(
    hypernet: HypernetworkSpec, embedding: RouterEmbedding, n_experts: int, d_model: int
) -> RouterParams:
    """Run the frozen hypernetwork on the embedding to produce router params.

    The flat output is split row-major: the first n_experts*d_model entries
    form the weight matrix, the remaining n_experts the bias. Differentiable
    with respect to the embedding only.
    """
    expected = n_experts * d_model + n_experts
    if hypernet.w2.shape[1] != expected:
        raise DimensionError(
            f"hypernetwork output {hypernet.w2.shape[1]} does not match "
            f"n_experts {n_experts} x d_model {d_model} + bias"
        )
    e2 = dc.reshape(embedding.e, (1, -1))
    hidden = dc.relu(dc.add(dc.matmul(e2, hypernet.w1), hypernet.b1))
    flat = dc.add(dc.matmul(hidden, hypernet.w2), hypernet.b2)
    hypernet.eval_count += 1
    weight = dc.reshape(dc.narrow(flat, 0, n_experts * d_model), (n_experts, d_model))
    bias = dc.reshape(dc.narrow(flat, n_experts * d_model, expected), (n_experts,))
    return RouterParams(weight, bias)


def gate(h: Tensor, router: RouterParams, k: int, renormalize: bool = False) -> GatingOutput:
    """Softmax the router logits, then keep the k largest gates per token.

    h is (d,) for a single token or (tokens, d) for a batch. Kept gates are
    the raw softmax values (no renormalization unless asked), so they sum to
    at most one; masked entries are exactly zero.
    """
    n = router.n_experts
    if not 1 <= k <= n:
        raise ContractError(f"k must be in [1, {n}], got {k}")
    single = h.ndim == 1
    h2 = dc.reshape(h, (1, -1)) if single else h
    if h2.shape[-1] != router.d_model:
        raise DimensionError(
            f"token dimension {h2.shape[-1]} does not match router d_model {router.d_model}"
        )
    logits = dc.add(dc.matmul(h2, dc.transpose(router.weight, (1, 0))), router.bias)
    dense = dc.softmax(logits)
    gates, selected = dc.topk_mask(dense, k)
    if renormalize:
        total = dc.sum_over(gates, 1, keepdims=True)
        gates = dc.mul(gates, dc.pow_const(total, -1.0))
    if single:
        gates = dc.reshape(gates, (n,))
        dense = dc.reshape(dense, (n,))
        selected = selected.reshape(k)
    return GatingOutput(gates=gates, selected=selected, dense_gates=dense)


def thor_select(rng: np.random.Generator, n_experts: int, k: int) -> GatingOutput:
    """Draw k experts uniformly without replacement; each gets gate 1/k.

    One draw covers every token of the current forward pass. dense_gates is
    the uniform selection distribution.
    """
    if not 1 <= k <= n_experts:
        raise ContractError(f"k must be in [1, {n_experts}], got {k}")
    selected = np.sort(rng.choice(n_experts, size=k, replace=False)).astype(np.int64)
    gates = np.zeros(n_experts)
    gates[selected] = 1.0 / k
    dense = np.full(n_experts, 1.0 / n_experts)
    return GatingOutput(gates=dc.tensor(gates), selected=selected, dense_gates=dc.tensor(dense))


def thor_consistency_loss(y1: Tensor, y2: Tensor) -> Tensor:
    """Symmetric KL divergence between softmax(y1) and softmax(y2), averaged
    over tokens (all leading axes). Uses the Jeffreys form
    KL(p||q) + KL(q||p) = sum((p - q) * (log p - log q))."""
    if y1.shape != y2.shape:
        raise DimensionError(f"consistency loss shapes differ: {y1.shape} vs {y2.shape}")
    p, q = dc.softmax(y1), dc.softmax(y2)
    lp, lq = dc.log_softmax(y1), dc.log_softmax(y2)
    per_token = dc.sum_over(dc.mul(dc.sub(p, q), dc.sub(lp, lq)), -1)
    return dc.mean_all(per_token)


def cache_routers(model) -> None:
    """Generate and store each hypernetwork router once, for inference.

    Subsequent forward passes reuse the stored parameters, so the
    hypernetwork runs exactly once per layer regardless of batch count.
    Raises if the model is in training mode, where the embedding may still
    change.
    """
    if getattr(model, "train_mode", False):
        raise ContractError("cache_routers requires the model to be in inference mode")
    for layer in model.layers:
        strat = layer.strategy
        if strat.kind == HYPER_ROUTER:
            with dc.no_grad():
                strat.cached_router = generate_router(
                    strat.hypernet, strat.embedding, layer.bank.n_experts, model.cfg.d_model
                )
