"""Training loop contracts: determinism, resume, frozen parameters, metrics."""

import math

import numpy as np
import pytest

from helpers import tiny_run_config

from smoelab import routing, training
from smoelab.config import serialize
from smoelab.errors import ContractError, DataError
from smoelab.model import LanguageModel, count_params


def run(tmp_path, dataset, name, **kw):
    cfg = tiny_run_config(tmp_path, dataset, **kw)
    out = tmp_path / name
    log = training.pretrain(cfg, str(out), resume=kw.pop("resume", None))
    return cfg, out, log


# ---------------------------------------------------------------------------
# mechanics


def test_zero_iterations_writes_initial_checkpoint_only(tmp_path, small_lm_dataset):
    cfg = tiny_run_config(tmp_path, small_lm_dataset, **{"training.total_iterations": "0"})
    out = tmp_path / "zero"
    training.pretrain(cfg, str(out))
    files = sorted(p.name for p in out.iterdir())
    assert "ckpt_final.bin" in files
    _, step, records = training.load_run_checkpoint(out / "ckpt_final.bin")
    assert step == 0
    fresh = LanguageModel(cfg.model)
    for p in fresh.parameters():
        assert np.array_equal(records[p.name].array, p.tensor.data)


def test_dataset_smaller_than_one_batch_rejected(tmp_path):
    from smoelab import data as data_mod

    src = tmp_path / "tiny.txt"
    src.write_bytes(b"abcd" * 30)  # train split 108 tokens: 3 chunks < batch of 4
    ds = tmp_path / "ds"
    data_mod.ingest(str(src), "char-lm", str(ds))
    cfg = tiny_run_config(tmp_path, ds, **{"training.total_iterations": "2"})
    with pytest.raises(DataError):
        training.pretrain(cfg, str(tmp_path / "out"))


def test_metrics_log_format(tmp_path, small_lm_dataset):
    _, out, log = run(tmp_path, small_lm_dataset, "fmt")
    lines = (out / "metrics.csv").read_text().strip().split("\n")
    assert lines[0] == "step,k,split,metric,value"
    first = lines[1].split(",")
    assert first[0] == "0" and first[2] == "train" and first[3] == "loss"
    float(first[4])


def test_k_trace_matches_schedule(tmp_path, small_lm_dataset):
    from smoelab.moe import KSchedule, current_k

    cfg, out, log = run(tmp_path, small_lm_dataset, "ktrace")
    sched = KSchedule(1, cfg.model.n_experts, cfg.total_iterations, cfg.k_schedule)
    for step, k, split, metric, _ in log.select(metric="loss", split="train"):
        assert k == current_k(sched, step)


def test_initial_loss_near_uniform(tmp_path, small_lm_dataset):
    _, _, log = run(tmp_path, small_lm_dataset, "init")
    first_bpc = log.select(metric="bpc")[0][4]
    assert abs(first_bpc - 8.0) < 0.5


# ---------------------------------------------------------------------------
# determinism and persistence


def test_identical_config_reproduces_checkpoint_bitwise(tmp_path, small_lm_dataset):
    _, out_a, _ = run(tmp_path, small_lm_dataset, "det-a", seed=5)
    _, out_b, _ = run(tmp_path, small_lm_dataset, "det-b", seed=5)
    a = (out_a / "ckpt_final.bin").read_bytes()
    b = (out_b / "ckpt_final.bin").read_bytes()
    assert a == b


def test_different_seed_changes_checkpoint(tmp_path, small_lm_dataset):
    _, out_a, _ = run(tmp_path, small_lm_dataset, "seed-a", seed=5)
    _, out_b, _ = run(tmp_path, small_lm_dataset, "seed-b", seed=6)
    assert (out_a / "ckpt_final.bin").read_bytes() != (out_b / "ckpt_final.bin").read_bytes()


@pytest.mark.parametrize("strategy", ["smoe", "hyper_router", "thor"])
def test_resume_equals_uninterrupted_bitwise(tmp_path, small_lm_dataset, strategy):
    cfg = tiny_run_config(
        tmp_path, small_lm_dataset, strategy=strategy, **{"training.checkpoint_interval": "12"}
    )
    straight = tmp_path / f"straight-{strategy}"
    training.pretrain(cfg, str(straight))
    resumed = tmp_path / f"resumed-{strategy}"
    training.pretrain(cfg, str(resumed), resume=str(straight / "ckpt_00000012.bin"))
    a = (straight / "ckpt_final.bin").read_bytes()
    b = (resumed / "ckpt_final.bin").read_bytes()
    assert a == b


def test_resume_rejects_mismatched_config(tmp_path, small_lm_dataset):
    cfg = tiny_run_config(tmp_path, small_lm_dataset)
    out = tmp_path / "base"
    training.pretrain(cfg, str(out))
    other = cfg.with_(lr=1e-3)
    with pytest.raises(ContractError):
        training.pretrain(other, str(tmp_path / "other"), resume=str(out / "ckpt_final.bin"))


def test_checkpoint_contains_optimizer_moments_for_trainables_only(tmp_path, small_lm_dataset):
    cfg, out, _ = run(tmp_path, small_lm_dataset, "moments", strategy="smoe_dropout")
    _, _, records = training.load_run_checkpoint(out / "ckpt_final.bin")
    model = LanguageModel(cfg.model)
    for p in model.parameters():
        has_m = f"optim.m.{p.name}" in records
        assert has_m == p.trainable
    # frozen router recorded with trainable flag off
    assert records["layer0.router.weight"].trainable is False


# ---------------------------------------------------------------------------
# frozen / trainable partition


def test_frozen_router_bytes_unchanged_and_census_stable(tmp_path, small_lm_dataset):
    cfg = tiny_run_config(tmp_path, small_lm_dataset, strategy="smoe_dropout")
    model_init = LanguageModel(cfg.model)
    frozen_before = {
        p.name: p.tensor.data.tobytes() for p in model_init.parameters() if not p.trainable
    }
    census_before = count_params(model_init)
    out = tmp_path / "frozen"
    training.pretrain(cfg, str(out))
    _, _, records = training.load_run_checkpoint(out / "ckpt_final.bin")
    for name, blob in frozen_before.items():
        assert records[name].array.tobytes() == blob
    # trainables did change
    assert records["tok_emb"].array.tobytes() != model_init.tok_emb.data.tobytes()
    model_after = LanguageModel(cfg.model)
    training.restore_model(model_after, records)
    assert count_params(model_after) == census_before


def test_hypernetwork_frozen_embedding_moves(tmp_path, small_lm_dataset):
    cfg = tiny_run_config(tmp_path, small_lm_dataset, strategy="hyper_router")
    init = LanguageModel(cfg.model)
    out = tmp_path / "hyper"
    training.pretrain(cfg, str(out))
    _, _, records = training.load_run_checkpoint(out / "ckpt_final.bin")
    for p in init.parameters():
        if p.category == "hypernetwork":
            assert records[p.name].array.tobytes() == p.tensor.data.tobytes()
    delta = records["layer0.router_emb.e"].array - init.layers[0].strategy.embedding.e.data
    assert np.linalg.norm(delta) > 0


# ---------------------------------------------------------------------------
# evaluation


def test_evaluate_uniform_model_byte_vocab(tmp_path, small_lm_dataset):
    from smoelab import data as data_mod

    cfg = tiny_run_config(tmp_path, small_lm_dataset)
    model = LanguageModel(cfg.model)
    tokens = data_mod.load_tokens(small_lm_dataset, "test")
    result = training.evaluate(model, tokens, 2, cfg)
    assert abs(result["bpc"] - 8.0) < 0.1
    assert result["ppl"] == pytest.approx(math.exp(result["ce"]))


def test_evaluate_deterministic_across_calls(tmp_path, small_lm_dataset):
    from smoelab import data as data_mod

    for strategy in ("thor", "hyper_router"):
        cfg = tiny_run_config(tmp_path, small_lm_dataset, strategy=strategy)
        model = LanguageModel(cfg.model)
        tokens = data_mod.load_tokens(small_lm_dataset, "valid")
        a = training.evaluate(model, tokens, 2, cfg)
        b = training.evaluate(model, tokens, 2, cfg)
        assert a["ce"] == b["ce"]


def test_evaluate_cached_routers_bitwise_transparent(tmp_path, small_lm_dataset):
    from smoelab import data as data_mod
    from smoelab import diffcore as dc

    cfg = tiny_run_config(tmp_path, small_lm_dataset, strategy="hyper_router")
    model = LanguageModel(cfg.model)
    tokens = data_mod.load_tokens(small_lm_dataset, "valid")
    x = tokens[: cfg.input_length][None, :]
    model.train_mode = False
    with dc.no_grad():
        plain = model.lm_forward(x, 2).data.copy()
    training.evaluate(model, tokens, 2, cfg)  # caches routers internally
    with dc.no_grad():
        cached = model.lm_forward(x, 2).data
    assert np.array_equal(plain, cached)


# ---------------------------------------------------------------------------
# finetuning


def test_finetune_k_fixed_at_n_experts(tmp_path, small_lm_dataset, small_cls_dataset):
    lm_cfg = tiny_run_config(tmp_path, small_lm_dataset, **{"training.total_iterations": "4"})
    pre = tmp_path / "pre"
    training.pretrain(lm_cfg, str(pre))
    ft_cfg = lm_cfg.with_(dataset=str(small_cls_dataset), finetune_epochs=1, finetune_batch_size=16)
    log = training.finetune(ft_cfg, str(pre / "ckpt_final.bin"), str(tmp_path / "ft"))
    rows = log.select(split="train")
    assert rows, "finetune produced no metrics"
    assert all(r[1] == ft_cfg.model.n_experts for r in rows)


def test_finetune_separable_accuracy(tmp_path, small_lm_dataset, small_cls_dataset):
    lm_cfg = tiny_run_config(tmp_path, small_lm_dataset, **{"training.total_iterations": "0"})
    pre = tmp_path / "pre"
    training.pretrain(lm_cfg, str(pre))
    ft_cfg = lm_cfg.with_(
        dataset=str(small_cls_dataset), finetune_epochs=3, finetune_batch_size=16, finetune_lr=1e-2
    )
    log = training.finetune(ft_cfg, str(pre / "ckpt_final.bin"), str(tmp_path / "ft"))
    accs = [r[4] for r in log.select(metric="accuracy")]
    assert len(accs) == 3
    assert max(accs) > 0.95


def test_finetune_architecture_mismatch_rejected(tmp_path, small_lm_dataset, small_cls_dataset):
    lm_cfg = tiny_run_config(tmp_path, small_lm_dataset, **{"training.total_iterations": "0"})
    pre = tmp_path / "pre"
    training.pretrain(lm_cfg, str(pre))
    bad = tiny_run_config(
        tmp_path, small_cls_dataset, **{"model.d_model": "16", "training.total_iterations": "0"}
    )
    with pytest.raises(ContractError):
        training.finetune(bad, str(pre / "ckpt_final.bin"), str(tmp_path / "ft"))


def test_finetune_resume_mid_epoch_bitwise(tmp_path, small_lm_dataset, small_cls_dataset):
    lm_cfg = tiny_run_config(tmp_path, small_lm_dataset, **{"training.total_iterations": "0"})
    pre = tmp_path / "pre-r"
    training.pretrain(lm_cfg, str(pre))
    ckpt = str(pre / "ckpt_final.bin")
    ft_cfg = lm_cfg.with_(
        dataset=str(small_cls_dataset),
        finetune_epochs=2,
        finetune_batch_size=32,
        checkpoint_interval=5,
    )
    straight = tmp_path / "ft-straight"
    training.finetune(ft_cfg, ckpt, str(straight))
    # epoch boundary is 8 steps (256 train records / 32); step 5 is mid-epoch
    resumed = tmp_path / "ft-resumed"
    training.finetune(ft_cfg, ckpt, str(resumed), resume=str(straight / "ckpt_00000005.bin"))
    assert (straight / "ckpt_final.bin").read_bytes() == (resumed / "ckpt_final.bin").read_bytes()


# ---------------------------------------------------------------------------
# batching


def test_lm_batch_deterministic_and_contiguous(small_lm_dataset):
    from smoelab import data as data_mod

    tokens = data_mod.load_tokens(small_lm_dataset, "train")
    x1, y1 = training.lm_batch(tokens, 32, 4, seed=3, step=7)
    x2, y2 = training.lm_batch(tokens, 32, 4, seed=3, step=7)
    assert np.array_equal(x1, x2) and np.array_equal(y1, y2)
    # targets are inputs shifted by one
    assert np.array_equal(x1[:, 1:], y1[:, :-1])


def test_lm_batch_follows_epoch_permutation(small_lm_dataset):
    from smoelab import data as data_mod

    tokens = data_mod.load_tokens(small_lm_dataset, "train")
    t, b, seed = 64, 8, 1
    n_chunks = (tokens.size - 1) // t
    perm = training._epoch_perm(seed, 0xBA7C4, 0, n_chunks)
    assert sorted(perm.tolist()) == list(range(n_chunks))
    for step in (0, 3):
        x, y = training.lm_batch(tokens, t, b, seed=seed, step=step)
        for i in range(b):
            c = int(perm[step * b + i]) * t
            assert np.array_equal(x[i], tokens[c : c + t])
            assert np.array_equal(y[i], tokens[c + 1 : c + t + 1])
