"""Model-level tests: determinism, causality, census, head gradients."""

import math

import numpy as np
import pytest

from smoelab import diffcore as dc
from smoelab import model as M
from smoelab import routing
from smoelab.errors import ContractError


def tiny_cfg(strategy=routing.SMOE_DROPOUT, **kw):
    base = dict(
        n_layers=2,
        d_model=16,
        n_heads=2,
        inner_dim=8,
        n_experts=4,
        dropout=0.1,
        vocab_size=29,
        max_seq_len=24,
        strategy=strategy,
        seed=7,
        hyper_embed_dim=12,
        hyper_inner_dim=10,
    )
    base.update(kw)
    return M.ModelConfig(**base)


def tokens(cfg, b=3, t=10, seed=0):
    return np.random.default_rng(seed).integers(0, cfg.vocab_size, size=(b, t))


def test_config_validates_divisibility():
    with pytest.raises(ContractError):
        tiny_cfg(d_model=15)
    with pytest.raises(ContractError):
        tiny_cfg(inner_dim=9)


def test_untrained_model_loss_near_uniform():
    cfg = tiny_cfg(vocab_size=256, strategy=routing.DENSE)
    lm = M.LanguageModel(cfg)
    toks = tokens(cfg, 4, 16)
    logits = lm.lm_forward(toks, k=1)
    flat = dc.reshape(logits, (4 * 16, 256))
    loss = float(dc.cross_entropy(flat, toks.reshape(-1)).data)
    assert abs(loss - math.log(256)) / math.log(256) < 0.10


def test_forward_bitwise_deterministic():
    cfg = tiny_cfg(strategy=routing.HYPER_ROUTER)
    lm1 = M.LanguageModel(cfg)
    lm2 = M.LanguageModel(cfg)
    toks = tokens(cfg)
    with dc.no_grad():
        a = lm1.lm_forward(toks, k=2).data
        b = lm2.lm_forward(toks, k=2).data
    assert np.array_equal(a, b)


def test_backbone_shared_across_strategies_at_equal_seed():
    a = M.LanguageModel(tiny_cfg(strategy=routing.SMOE))
    b = M.LanguageModel(tiny_cfg(strategy=routing.HYPER_ROUTER))
    assert np.array_equal(a.tok_emb.data, b.tok_emb.data)
    assert np.array_equal(a.layers[0].attn.wq.data, b.layers[0].attn.wq.data)
    assert np.array_equal(a.layers[1].bank.experts[2].w1.data, b.layers[1].bank.experts[2].w1.data)


def test_router_cache_transparency_bitwise():
    cfg = tiny_cfg(strategy=routing.HYPER_ROUTER)
    lm = M.LanguageModel(cfg)
    toks = tokens(cfg)
    with dc.no_grad():
        plain = lm.lm_forward(toks, k=3).data
    lm.cache_routers()
    with dc.no_grad():
        cached = lm.lm_forward(toks, k=3).data
    assert np.array_equal(plain, cached)


def test_router_cache_counts_one_generation_per_layer():
    cfg = tiny_cfg(strategy=routing.HYPER_ROUTER)
    lm = M.LanguageModel(cfg)
    toks = tokens(cfg)
    before = [layer.strategy.hypernet.eval_count for layer in lm.layers]
    lm.cache_routers()
    with dc.no_grad():
        for _ in range(100):
            lm.lm_forward(toks, k=2)
    after = [layer.strategy.hypernet.eval_count for layer in lm.layers]
    assert [a - b for a, b in zip(after, before)] == [1, 1]


def test_cache_routers_rejected_in_training_mode():
    lm = M.LanguageModel(tiny_cfg(strategy=routing.HYPER_ROUTER))
    lm.train_mode = True
    with pytest.raises(ContractError):
        lm.cache_routers()


def test_causality_prefix_logits_unchanged():
    cfg = tiny_cfg(strategy=routing.SMOE)
    lm = M.LanguageModel(cfg)
    toks = tokens(cfg, 2, 12, seed=3)
    with dc.no_grad():
        base = lm.lm_forward(toks, k=2).data
    for j in (4, 8, 11):
        perturbed = toks.copy()
        perturbed[:, j] = (perturbed[:, j] + 1) % cfg.vocab_size
        with dc.no_grad():
            out = lm.lm_forward(perturbed, k=2).data
        assert np.array_equal(out[:, :j], base[:, :j])
        assert not np.array_equal(out[:, j:], base[:, j:])


def test_overlong_sequence_rejected():
    cfg = tiny_cfg()
    lm = M.LanguageModel(cfg)
    with pytest.raises(ContractError):
        lm.lm_forward(np.zeros((1, cfg.max_seq_len + 1), dtype=int), k=1)


def test_token_out_of_range_rejected():
    cfg = tiny_cfg()
    lm = M.LanguageModel(cfg)
    bad = np.zeros((1, 4), dtype=int)
    bad[0, 2] = cfg.vocab_size
    with pytest.raises(ContractError):
        lm.lm_forward(bad, k=1)


# ---------------------------------------------------------------------------
# classifier head


def test_single_class_head_constant_argmax():
    cfg = tiny_cfg(strategy=routing.DENSE)
    lm = M.LanguageModel(cfg)
    lm.attach_head(1)
    logits = lm.classify_forward(tokens(cfg), k=1)
    assert logits.shape == (3, 1)
    assert np.argmax(logits.data, axis=1).tolist() == [0, 0, 0]


def test_classify_batch_permutation_equivariance():
    cfg = tiny_cfg(strategy=routing.DENSE)
    lm = M.LanguageModel(cfg)
    lm.attach_head(3)
    toks = tokens(cfg, 4, 8, seed=5)
    perm = np.array([2, 0, 3, 1])
    with dc.no_grad():
        base = lm.classify_forward(toks, k=1).data
        shuffled = lm.classify_forward(toks[perm], k=1).data
    assert np.allclose(shuffled, base[perm], atol=1e-12)


def test_classifier_head_gradient_vs_finite_differences():
    cfg = tiny_cfg(strategy=routing.SMOE_DROPOUT, n_layers=1, d_model=8, n_heads=2, inner_dim=4)
    lm = M.LanguageModel(cfg)
    lm.attach_head(3)
    toks = tokens(cfg, 2, 6, seed=9)
    labels = np.array([0, 2])

    def f(w):
        lm.head.w = w
        return dc.cross_entropy(lm.classify_forward(toks, k=2), labels)

    assert dc.grad_check(f, lm.head.w, step=1e-5) < 1e-4


def test_classify_requires_head():
    lm = M.LanguageModel(tiny_cfg())
    with pytest.raises(ContractError):
        lm.classify_forward(np.zeros((1, 4), dtype=int), k=1)


# ---------------------------------------------------------------------------
# census


def test_census_reference_config_hyper_router():
    cfg = M.ModelConfig(strategy=routing.HYPER_ROUTER, vocab_size=256, seed=0)
    lm = M.LanguageModel(cfg)
    census = M.count_params(lm)
    cats = census["categories"]
    assert cats["router_embedding"]["trainable"] == 1024  # 4 layers x 256
    assert cats["router"]["generated"] == 16448  # 4 x (16 x 256 + 16)
    per_layer_hyper = 256 * 256 + 256 + 256 * (16 * 256 + 16) + (16 * 256 + 16)
    assert cats["hypernetwork"]["frozen"] == 4 * per_layer_hyper
    assert cats["hypernetwork"]["trainable"] == 0


def test_census_reference_config_smoe_dropout():
    cfg = M.ModelConfig(strategy=routing.SMOE_DROPOUT, vocab_size=256, seed=0)
    census = M.count_params(M.LanguageModel(cfg))
    assert census["categories"]["router"]["frozen"] == 16448
    assert census["categories"]["router"]["trainable"] == 0


def test_census_toy_config_hand_count():
    cfg = M.ModelConfig(
        n_layers=2,
        d_model=8,
        n_heads=2,
        inner_dim=4,
        n_experts=2,
        vocab_size=11,
        max_seq_len=6,
        strategy=routing.SMOE,
        seed=1,
    )
    census = M.count_params(M.LanguageModel(cfg))
    cats = census["categories"]
    assert cats["token_embedding"]["trainable"] == 11 * 8
    assert cats["position_embedding"]["trainable"] == 6 * 8
    assert cats["attention"]["trainable"] == 2 * 4 * (8 * 8 + 8)
    assert cats["norm"]["trainable"] == 2 * 2 * 2 * 8
    # each expert: 8x2 + 2 + 2x8 + 8 = 42; two experts, two layers
    assert cats["expert"]["trainable"] == 2 * 2 * 42
    assert cats["router"]["trainable"] == 2 * (2 * 8 + 2)
    assert cats["lm_head"]["trainable"] == 8 * 11 + 11
    expected_total = (
        11 * 8 + 6 * 8 + 2 * 4 * 72 + 2 * 32 + 4 * 42 + 2 * 18 + 8 * 11 + 11
    )
    assert census["totals"]["trainable"] == expected_total
    assert census["totals"]["frozen"] == 0
    assert census["totals"]["generated"] == 0


def test_trainable_delta_hyper_vs_frozen_router():
    for layers in (1, 2, 4):
        base = dict(
            n_layers=layers, d_model=32, n_heads=2, inner_dim=16, n_experts=4,
            vocab_size=17, max_seq_len=8, seed=3,
        )
        hyper = M.count_params(M.LanguageModel(M.ModelConfig(strategy=routing.HYPER_ROUTER, **base)))
        frozen = M.count_params(M.LanguageModel(M.ModelConfig(strategy=routing.SMOE_DROPOUT, **base)))
        delta = hyper["totals"]["trainable"] - frozen["totals"]["trainable"]
        assert delta == layers * 256


def test_strategy_equivalence_at_forced_equal_router():
    cfg_s = tiny_cfg(strategy=routing.SMOE)
    cfg_h = tiny_cfg(strategy=routing.HYPER_ROUTER)
    lm_s = M.LanguageModel(cfg_s)
    lm_h = M.LanguageModel(cfg_h)
    with dc.no_grad():
        for ls, lh in zip(lm_s.layers, lm_h.layers):
            generated = routing.generate_router(
                lh.strategy.hypernet, lh.strategy.embedding, cfg_h.n_experts, cfg_h.d_model
            )
            ls.strategy.router.weight.data[...] = generated.weight.data
            ls.strategy.router.bias.data[...] = generated.bias.data
        toks = tokens(cfg_s)
        out_s = lm_s.lm_forward(toks, k=2).data
        out_h = lm_h.lm_forward(toks, k=2).data
    assert np.array_equal(out_s, out_h)


def test_generated_params_absent_from_parameter_list():
    lm = M.LanguageModel(tiny_cfg(strategy=routing.HYPER_ROUTER))
    names = [p.name for p in lm.parameters()]
    assert not any("router.weight" in n for n in names)
    assert any("router_emb.e" in n for n in names)
    assert any("hyper.w2" in n for n in names)
