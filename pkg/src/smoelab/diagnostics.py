"""Routing analysis: router output entropy, analytic inference cost, and
gate distribution export.

Cost convention: a multiply-add counts as 2 FLOPs; softmax and norm
nonlinearities count 5 FLOPs per element. Attention, norms, embeddings, and
the router are counted once per token regardless of k; expert cost is k/N of
the full feedforward cost; attention score/value matmuls use the causal
average context (T+1)/2. Router generation is excluded: hypernetwork-driven
models are costed in their cached-inference regime, so their per-batch cost
equals a linear router of the same dimensions.
"""

from __future__ import annotations

import math
import os
import tempfile
from dataclasses import dataclass

import numpy as np

from . import diffcore as dc
from . import routing
from .errors import ContractError, DataError
from .model import LanguageModel, ModelConfig


@dataclass
class EntropyReport:
    """Mean and standard deviation of gate-distribution entropy per layer,
    in nats; uniform gates over N experts reach ln N exactly."""

    per_layer_mean: list[float]
    per_layer_std: list[float]
    n_tokens: int

    @property
    def overall_mean(self) -> float:
        return float(np.mean(self.per_layer_mean))


@dataclass
class FlopsReport:
    attention: int
    router: int
    experts: int
    projections: int
    norms: int

    @property
    def total(self) -> int:
        return self.attention + self.router + self.experts + self.projections + self.norms

    def as_row(self) -> dict:
        return {
            "attention": self.attention,
            "router": self.router,
            "experts": self.experts,
            "projections": self.projections,
            "norms": self.norms,
            "total": self.total,
        }


def _gate_rows(model: LanguageModel, tokens_batches, k: int, seed: int = 0):
    """Yield per-layer dense gate arrays for each batch, inference mode."""
    model.train_mode = False
    if model.cfg.strategy == routing.HYPER_ROUTER:
        model.cache_routers()
    rng = np.random.default_rng([seed, 0xD1A6, k])
    with dc.no_grad():
        for x in tokens_batches:
            _, gates = model.lm_forward(x, k, training=False, rng=rng, collect_gates=True)
            if any(g is None for g in gates):
                raise ContractError("gate diagnostics require a routed strategy")
            yield [g.dense_gates.data for g in gates]


def router_entropy(model: LanguageModel, tokens_batches, k: int | None = None) -> EntropyReport:
    """Shannon entropy (natural log) of each token's dense gate distribution,
    aggregated per layer over every token in the batches."""
    k = model.cfg.n_experts if k is None else k
    sums = None
    sq_sums = None
    count = 0
    for per_layer in _gate_rows(model, tokens_batches, k):
        if sums is None:
            sums = np.zeros(len(per_layer))
            sq_sums = np.zeros(len(per_layer))
        for i, dense in enumerate(per_layer):
            p = np.clip(dense, 1e-300, None)
            h = -np.sum(p * np.log(p), axis=-1)
            sums[i] += h.sum()
            sq_sums[i] += (h * h).sum()
        count += per_layer[0].reshape(-1, per_layer[0].shape[-1]).shape[0]
    if count == 0:
        raise DataError("no tokens provided for entropy measurement")
    means = sums / count
    variances = np.maximum(sq_sums / count - means**2, 0.0)
    return EntropyReport(
        per_layer_mean=[float(m) for m in means],
        per_layer_std=[float(s) for s in np.sqrt(variances)],
        n_tokens=count,
    )


def count_flops(cfg: ModelConfig, k: int, seq_len: int, batch: int) -> FlopsReport:
    """Analytic inference cost for one forward pass of `batch` sequences."""
    if not 1 <= k <= cfg.n_experts:
        raise ContractError(f"k must be in [1, {cfg.n_experts}], got {k}")
    d, heads, layers = cfg.d_model, cfg.n_heads, cfg.n_layers
    tokens = batch * seq_len
    ctx = (seq_len + 1) / 2  # average causal context length

    attention = layers * tokens * (2 * ctx * d * 2 + 5 * heads * ctx)
    projections = (
        layers * tokens * (2 * d * 3 * d + 2 * d * d)  # qkv and output projections
        + tokens * 2 * d * cfg.vocab_size  # vocabulary head
        + tokens * d  # positional add
    )
    norms = layers * tokens * 2 * 5 * d
    router = 0
    experts = 0
    if cfg.strategy in (routing.DENSE, routing.DENSE_DROPOUT):
        experts = layers * tokens * (4 * d * cfg.inner_dim + 5 * cfg.inner_dim)
    else:
        router = layers * tokens * (2 * cfg.n_experts * d + 5 * cfg.n_experts)
        full_ffn = 4 * d * cfg.inner_dim + 5 * cfg.inner_dim
        experts = layers * tokens * k * full_ffn // cfg.n_experts
    return FlopsReport(
        attention=int(attention),
        router=int(router),
        experts=int(experts),
        projections=int(projections),
        norms=int(norms),
    )


def _atomic_write_text(path, text: str):
    os.makedirs(os.path.dirname(path) or ".", exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=os.path.dirname(path) or ".", suffix=".tmp")
    with os.fdopen(fd, "w") as f:
        f.write(text)
    os.replace(tmp, path)


def export_gate_distributions(model: LanguageModel, sample_tokens, k: int, path) -> int:
    """Write each token's dense gate row as `layer,position,expert,probability`
    lines. Returns the number of rows written (layers x positions x experts)."""
    lines = ["layer,position,expert,probability"]
    rows = 0
    for per_layer in _gate_rows(model, [np.asarray(sample_tokens)], k):
        for layer_idx, dense in enumerate(per_layer):
            flat = dense.reshape(-1, dense.shape[-1])
            for pos in range(flat.shape[0]):
                for expert in range(flat.shape[1]):
                    lines.append(f"{layer_idx},{pos},{expert},{float(flat[pos, expert])!r}")
                    rows += 1
    _atomic_write_text(path, "\n".join(lines) + "\n")
    return rows


def write_entropy_report(report: EntropyReport, path):
    lines = ["layer,mean_entropy,std_entropy"]
    for i, (m, s) in enumerate(zip(report.per_layer_mean, report.per_layer_std)):
        lines.append(f"{i},{m!r},{s!r}")
    _atomic_write_text(path, "\n".join(lines) + "\n")


def write_flops_report(report: FlopsReport, path):
    row = report.as_row()
    lines = [",".join(row), ",".join(str(v) for v in row.values())]
    _atomic_write_text(path, "\n".join(lines) + "\n")


def uniform_entropy(n_experts: int) -> float:
    return math.log(n_experts)
