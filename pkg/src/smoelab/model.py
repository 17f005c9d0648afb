"""Decoder-only transformer language model with routed feedforward blocks.

Each layer is pre-norm: x + attention(norm(x)) followed by
x + feedforward(norm(x)), where the feedforward block is dispatched through
the layer's routing strategy. Positions use a learned absolute embedding;
the output projection is untied from the input embedding. A mean-pooling
classifier head can be attached for finetuning.

Construction is deterministic: a seed produces bitwise identical parameters,
with separate seed streams for the backbone, the routing strategy, and the
heads so that strategies share backbone initialization at equal seeds.
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from typing import NamedTuple

import numpy as np

from . import diffcore as dc
from . import moe, routing
from .diffcore import Tensor
from .errors import ContractError


@dataclass
class ModelConfig:
    n_layers: int = 4
    d_model: int = 256
    n_heads: int = 8
    inner_dim: int = 512
    n_experts: int = 16
    dropout: float = 0.1
    vocab_size: int = 256
    max_seq_len: int = 512
    strategy: str = routing.HYPER_ROUTER
    seed: int = 0
    renormalize_gates: bool = False
    hyper_embed_dim: int = 256
    hyper_inner_dim: int = 256

    def __post_init__(self):
        if self.d_model % self.n_heads:
            raise ContractError(f"d_model {self.d_model} not divisible by n_heads {self.n_heads}")
        if self.inner_dim % self.n_experts:
            raise ContractError(
                f"inner_dim {self.inner_dim} not divisible by n_experts {self.n_experts}"
            )
        if self.strategy not in routing.STRATEGIES:
            raise ContractError(
                f"unknown strategy {self.strategy!r}, expected one of {routing.STRATEGIES}"
            )

    def with_(self, **kw) -> "ModelConfig":
        return replace(self, **kw)


class Param(NamedTuple):
    name: str
    tensor: Tensor
    trainable: bool
    category: str


class LayerNormParams:
    def __init__(self, d: int):
        self.gain = dc.tensor(np.ones(d), requires_grad=True)
        self.offset = dc.tensor(np.zeros(d), requires_grad=True)

    def __call__(self, x: Tensor) -> Tensor:
        return dc.layer_norm(x, self.gain, self.offset)


class Attention:
    """Causal multi-head self-attention over a flattened (B*T, d) stream."""

    def __init__(self, rng: np.random.Generator, d_model: int, n_heads: int):
        self.n_heads = n_heads
        self.d_head = d_model // n_heads
        bound = 1.0 / np.sqrt(d_model)

        def lin(out_dim):
            return (
                dc.tensor(rng.uniform(-bound, bound, size=(d_model, out_dim)), requires_grad=True),
                dc.tensor(np.zeros(out_dim), requires_grad=True),
            )

        self.wq, self.bq = lin(d_model)
        self.wk, self.bk = lin(d_model)
        self.wv, self.bv = lin(d_model)
        self.wo, self.bo = lin(d_model)

    def __call__(self, x2: Tensor, batch: int, seq: int) -> Tensor:
        h, dh = self.n_heads, self.d_head

        def heads(w, b):
            proj = dc.add(dc.matmul(x2, w), b)
            return dc.transpose(dc.reshape(proj, (batch, seq, h, dh)), (0, 2, 1, 3))

        q = heads(self.wq, self.bq)
        k = heads(self.wk, self.bk)
        v = heads(self.wv, self.bv)
        scores = dc.scale(dc.matmul(q, dc.transpose(k, (0, 1, 3, 2))), 1.0 / np.sqrt(dh))
        attn = dc.causal_softmax(scores)
        ctx = dc.transpose(dc.matmul(attn, v), (0, 2, 1, 3))
        ctx2 = dc.reshape(ctx, (batch * seq, h * dh))
        return dc.add(dc.matmul(ctx2, self.wo), self.bo)


class DecoderLayer:
    """Pre-norm attention block followed by a routed feedforward block."""

    def __init__(self, cfg: ModelConfig, rng: np.random.Generator, strategy: routing.RouterStrategy):
        self.ln1 = LayerNormParams(cfg.d_model)
        self.attn = Attention(rng, cfg.d_model, cfg.n_heads)
        self.ln2 = LayerNormParams(cfg.d_model)
        self.strategy = strategy
        if strategy.kind in (routing.DENSE, routing.DENSE_DROPOUT):
            self.bank = moe.DenseFFN(rng, cfg.d_model, cfg.inner_dim)
        else:
            self.bank = moe.ExpertBank(rng, cfg.d_model, cfg.inner_dim, cfg.n_experts)


class ClassifierHead:
    """Mean pooling over positions followed by a linear projection."""

    def __init__(self, rng: np.random.Generator, d_model: int, n_classes: int):
        bound = 0.1 / np.sqrt(d_model)
        self.w = dc.tensor(rng.uniform(-bound, bound, size=(d_model, n_classes)), requires_grad=True)
        self.b = dc.tensor(np.zeros(n_classes), requires_grad=True)
        self.n_classes = n_classes


def _build_strategy(cfg: ModelConfig, rng: np.random.Generator) -> routing.RouterStrategy:
    kind = cfg.strategy
    if kind == routing.SMOE:
        return routing.RouterStrategy(
            kind=kind,
            router=routing.init_trainable_router(rng, cfg.n_experts, cfg.d_model),
            renormalize=cfg.renormalize_gates,
        )
    if kind == routing.SMOE_DROPOUT:
        return routing.RouterStrategy(
            kind=kind,
            router=routing.init_frozen_router(rng, cfg.n_experts, cfg.d_model),
            renormalize=cfg.renormalize_gates,
        )
    if kind == routing.HYPER_ROUTER:
        return routing.RouterStrategy(
            kind=kind,
            hypernet=routing.init_hypernetwork(
                rng, cfg.hyper_embed_dim, cfg.hyper_inner_dim, cfg.n_experts, cfg.d_model
            ),
            embedding=routing.init_router_embedding(rng, cfg.hyper_embed_dim),
            renormalize=cfg.renormalize_gates,
        )
    return routing.RouterStrategy(kind=kind, renormalize=cfg.renormalize_gates)


class LanguageModel:
    """The full model: embeddings, decoder layers, vocabulary projection."""

    def __init__(self, cfg: ModelConfig):
        self.cfg = cfg
        self.train_mode = False
        self.head: ClassifierHead | None = None
        seq = np.random.SeedSequence(cfg.seed)
        backbone_rng, strategy_rng, head_rng = (
            np.random.default_rng(s) for s in seq.spawn(3)
        )
        self._head_rng = head_rng

        self.tok_emb = dc.tensor(
            backbone_rng.normal(0.0, 0.02, size=(cfg.vocab_size, cfg.d_model)), requires_grad=True
        )
        self.pos_emb = dc.tensor(
            backbone_rng.normal(0.0, 0.02, size=(cfg.max_seq_len, cfg.d_model)), requires_grad=True
        )
        self.layers = [
            DecoderLayer(cfg, backbone_rng, _build_strategy(cfg, strategy_rng))
            for _ in range(cfg.n_layers)
        ]
        # small output init keeps the untrained predictive distribution near uniform
        out_bound = 0.1 / np.sqrt(cfg.d_model)
        self.out_w = dc.tensor(
            backbone_rng.uniform(-out_bound, out_bound, size=(cfg.d_model, cfg.vocab_size)),
            requires_grad=True,
        )
        self.out_b = dc.tensor(np.zeros(cfg.vocab_size), requires_grad=True)

    # -- parameter registry -------------------------------------------------

    def parameters(self) -> list[Param]:
        """Every stored parameter in a fixed order, with category labels.

        Generated router weights are not parameters; they are recomputed
        from the hypernetwork each forward pass (or cached for inference).
        """
        params: list[Param] = [
            Param("tok_emb", self.tok_emb, True, "token_embedding"),
            Param("pos_emb", self.pos_emb, True, "position_embedding"),
        ]
        for i, layer in enumerate(self.layers):
            p = f"layer{i}"
            params += [
                Param(f"{p}.ln1.gain", layer.ln1.gain, True, "norm"),
                Param(f"{p}.ln1.offset", layer.ln1.offset, True, "norm"),
                Param(f"{p}.ln2.gain", layer.ln2.gain, True, "norm"),
                Param(f"{p}.ln2.offset", layer.ln2.offset, True, "norm"),
            ]
            a = layer.attn
            for nm, t in (
                ("wq", a.wq), ("bq", a.bq), ("wk", a.wk), ("bk", a.bk),
                ("wv", a.wv), ("bv", a.bv), ("wo", a.wo), ("bo", a.bo),
            ):
                params.append(Param(f"{p}.attn.{nm}", t, True, "attention"))
            if isinstance(layer.bank, moe.DenseFFN):
                for nm in ("w1", "b1", "w2", "b2"):
                    params.append(Param(f"{p}.ffn.{nm}", getattr(layer.bank, nm), True, "dense_ffn"))
            else:
                for j, exp in enumerate(layer.bank.experts):
                    for nm in ("w1", "b1", "w2", "b2"):
                        params.append(
                            Param(f"{p}.expert{j}.{nm}", getattr(exp, nm), True, "expert")
                        )
            strat = layer.strategy
            if strat.kind == routing.SMOE:
                params.append(Param(f"{p}.router.weight", strat.router.weight, True, "router"))
                params.append(Param(f"{p}.router.bias", strat.router.bias, True, "router"))
            elif strat.kind == routing.SMOE_DROPOUT:
                params.append(Param(f"{p}.router.weight", strat.router.weight, False, "router"))
                params.append(Param(f"{p}.router.bias", strat.router.bias, False, "router"))
            elif strat.kind == routing.HYPER_ROUTER:
                hyp = strat.hypernet
                for nm, t in (("w1", hyp.w1), ("b1", hyp.b1), ("w2", hyp.w2), ("b2", hyp.b2)):
                    params.append(Param(f"{p}.hyper.{nm}", t, False, "hypernetwork"))
                params.append(
                    Param(f"{p}.router_emb.e", strat.embedding.e, True, "router_embedding")
                )
        params += [
            Param("out_w", self.out_w, True, "lm_head"),
            Param("out_b", self.out_b, True, "lm_head"),
        ]
        if self.head is not None:
            params += [
                Param("cls.w", self.head.w, True, "classifier_head"),
                Param("cls.b", self.head.b, True, "classifier_head"),
            ]
        return params

    def trainable_parameters(self) -> list[Param]:
        return [p for p in self.parameters() if p.trainable]

    def zero_grad(self):
        for p in self.parameters():
            p.tensor.zero_grad()

    def attach_head(self, n_classes: int):
        self.head = ClassifierHead(self._head_rng, self.cfg.d_model, n_classes)

    def cache_routers(self):
        routing.cache_routers(self)

    def clear_router_cache(self):
        for layer in self.layers:
            layer.strategy.cached_router = None

    # -- forward passes ------------------------------------------------------

    def _trunk(self, tokens, k, training, rng, collect_gates=False):
        tokens = np.asarray(tokens)
        if tokens.ndim != 2:
            raise ContractError(f"tokens must be (batch, seq), got shape {tokens.shape}")
        b, t = tokens.shape
        if t > self.cfg.max_seq_len:
            raise ContractError(f"sequence length {t} exceeds max_seq_len {self.cfg.max_seq_len}")
        if tokens.min() < 0 or tokens.max() >= self.cfg.vocab_size:
            raise ContractError(f"token ids must be in [0, {self.cfg.vocab_size})")
        emb = dc.take_rows(self.tok_emb, tokens)
        pos = dc.take_rows(self.pos_emb, np.arange(t))
        x = dc.reshape(dc.add(emb, pos), (b * t, self.cfg.d_model))
        gate_stats = []
        for layer in self.layers:
            x = dc.add(x, layer.attn(layer.ln1(x), b, t))
            ffn_out, diag = moe.layer_forward(
                layer.ln2(x),
                layer.strategy,
                layer.bank,
                k,
                d_model=self.cfg.d_model,
                training=training,
                rng=rng,
                dropout_rate=self.cfg.dropout,
            )
            x = dc.add(x, ffn_out)
            if collect_gates:
                gate_stats.append(diag)
        return x, b, t, gate_stats

    def lm_forward(self, tokens, k, training=False, rng=None, collect_gates=False):
        """Next-token logits of shape (batch, seq, vocab).

        With collect_gates, also returns the per-layer GatingOutput list for
        this forward pass (None entries for dense layers).
        """
        x, b, t, gates = self._trunk(tokens, k, training, rng, collect_gates)
        logits = dc.add(dc.matmul(x, self.out_w), self.out_b)
        logits = dc.reshape(logits, (b, t, self.cfg.vocab_size))
        return (logits, gates) if collect_gates else logits

    def classify_forward(self, tokens, k, training=False, rng=None):
        """Class logits of shape (batch, n_classes) from mean-pooled states."""
        if self.head is None:
            raise ContractError("classify_forward requires attach_head first")
        x, b, t, _ = self._trunk(tokens, k, training, rng)
        pooled = dc.mean_over(dc.reshape(x, (b, t, self.cfg.d_model)), 1)
        return dc.add(dc.matmul(pooled, self.head.w), self.head.b)


def count_params(model: LanguageModel) -> dict:
    """Partition every parameter into trainable / frozen / generated counts.

    Returns {"categories": {cat: {"trainable": n, "frozen": n, "generated": n}},
    "totals": {...}}. Generated counts cover router parameters produced by a
    hypernetwork each forward pass; they belong to neither tracked set.
    """
    categories: dict[str, dict[str, int]] = {}

    def bump(cat, kind, n):
        slot = categories.setdefault(cat, {"trainable": 0, "frozen": 0, "generated": 0})
        slot[kind] += int(n)

    for p in model.parameters():
        bump(p.category, "trainable" if p.trainable else "frozen", p.tensor.size)
    cfg = model.cfg
    if cfg.strategy == routing.HYPER_ROUTER:
        per_layer = cfg.n_experts * cfg.d_model + cfg.n_experts
        bump("router", "generated", cfg.n_layers * per_layer)
    totals = {"trainable": 0, "frozen": 0, "generated": 0}
    for slot in categories.values():
        for kind in totals:
            totals[kind] += slot[kind]
    return {"categories": categories, "totals": totals}
