"""Pre-training and finetuning loops with deterministic, resumable state.

Every stochastic choice derives from (seed, purpose, step), so a run can be
reproduced bitwise from its config and resumed bitwise from any checkpoint:
batches, dropout masks, and stochastic expert draws never depend on hidden
generator state. The optimizer holds moments only for trainable parameters;
frozen parameters are never touched.

Metrics are appended to a csv log as `step,k,split,metric,value` rows.
"""

from __future__ import annotations

import math
import os
from functools import lru_cache

import numpy as np

from . import diffcore as dc
from . import moe, routing
from .checkpoint import Record, read_checkpoint, write_checkpoint
from .config import RunConfig, parse_serialized, serialize
from .data import load_manifest, load_records, load_tokens
from .errors import ContractError, DataError
from .model import LanguageModel

LN2 = math.log(2.0)


class MetricsLog:
    """Append-only metric rows, mirrored to a csv file when given a path."""

    HEADER = "step,k,split,metric,value"

    def __init__(self, path=None):
        self.path = path
        self.rows: list[tuple[int, int, str, str, float]] = []
        if path is not None:
            os.makedirs(os.path.dirname(path) or ".", exist_ok=True)
            if not os.path.exists(path):
                with open(path, "w") as f:
                    f.write(self.HEADER + "\n")

    def log(self, step, k, split, metric, value):
        row = (int(step), int(k), split, metric, float(value))
        self.rows.append(row)
        if self.path is not None:
            with open(self.path, "a") as f:
                f.write(f"{row[0]},{row[1]},{split},{metric},{row[4]!r}\n")

    def select(self, metric=None, split=None):
        return [
            r
            for r in self.rows
            if (metric is None or r[3] == metric) and (split is None or r[2] == split)
        ]


class Adam:
    """Adam with bias correction over the trainable parameters only."""

    def __init__(self, params, lr, beta1=0.9, beta2=0.999, eps=1e-8):
        self.slots = [(p.name, p.tensor) for p in params]
        self.lr = lr
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.m = {name: np.zeros(t.size) for name, t in self.slots}
        self.v = {name: np.zeros(t.size) for name, t in self.slots}
        self.t = 0

    def step(self, lr=None):
        from . import _kernels as K

        lr = self.lr if lr is None else lr
        self.t += 1
        c1 = 1.0 - self.beta1**self.t
        c2 = 1.0 - self.beta2**self.t
        for name, tensor in self.slots:
            if tensor.grad is None:
                continue
            K.adam_update(
                tensor.data.reshape(-1),
                np.ascontiguousarray(tensor.grad.reshape(-1)),
                self.m[name],
                self.v[name],
                lr,
                self.beta1,
                self.beta2,
                self.eps,
                c1,
                c2,
            )


def clip_gradients(params, max_norm: float) -> float:
    """Scale gradients so their global norm is at most max_norm. Returns the
    pre-clip norm. max_norm <= 0 disables clipping."""
    total = 0.0
    grads = [p.tensor.grad for p in params if p.tensor.grad is not None]
    for g in grads:
        total += float(np.sum(g * g))
    norm = math.sqrt(total)
    if max_norm > 0 and norm > max_norm:
        factor = max_norm / norm
        for g in grads:
            g *= factor
    return norm


# ---------------------------------------------------------------------------
# deterministic derivation of per-step randomness


@lru_cache(maxsize=8)
def _epoch_perm(seed: int, tag: int, epoch: int, n: int):
    return np.random.default_rng([seed, tag, epoch]).permutation(n)


def step_rng(seed: int, step: int, stream: int = 0) -> np.random.Generator:
    return np.random.default_rng([seed, 0xD0 + stream, step])


def lm_batch(tokens, input_length, batch_size, seed, step):
    """Contiguous (input_length + 1)-token windows in seed-fixed epoch order."""
    t = input_length
    n_chunks = (tokens.size - 1) // t
    if n_chunks < batch_size:
        raise DataError(
            f"dataset has {n_chunks} chunks of length {t + 1}, need at least {batch_size}"
        )
    x = np.empty((batch_size, t), dtype=np.int64)
    y = np.empty((batch_size, t), dtype=np.int64)
    for i in range(batch_size):
        flat = step * batch_size + i
        perm = _epoch_perm(seed, 0xBA7C4, flat // n_chunks, n_chunks)
        c = int(perm[flat % n_chunks]) * t
        x[i] = tokens[c : c + t]
        y[i] = tokens[c + 1 : c + t + 1]
    return x, y


# ---------------------------------------------------------------------------
# checkpoint integration


def _model_records(model: LanguageModel) -> list[Record]:
    return [Record(p.name, p.tensor.data, p.trainable) for p in model.parameters()]


def save_run_checkpoint(path, cfg: RunConfig, model: LanguageModel, opt: Adam, step: int):
    records = _model_records(model)
    for name, _ in opt.slots:
        records.append(Record(f"optim.m.{name}", opt.m[name], False))
        records.append(Record(f"optim.v.{name}", opt.v[name], False))
    text = serialize(
        cfg,
        {
            "checkpoint": {
                "format_version": "1",
                "step": str(step),
                "rng_state": f"derived seed={cfg.seed} step={step}",
            }
        },
    )
    write_checkpoint(path, text, records)


def load_run_checkpoint(path):
    """Returns (RunConfig, step, {name: Record})."""
    text, records = read_checkpoint(path)
    cfg, extra = parse_serialized(text)
    step = int(extra.get("step", 0))
    return cfg, step, {r.name: r for r in records}


def restore_model(model: LanguageModel, records: dict, *, require_all=True):
    for p in model.parameters():
        rec = records.get(p.name)
        if rec is None:
            if require_all:
                raise ContractError(f"checkpoint is missing parameter {p.name}")
            continue
        if rec.array.shape != p.tensor.shape:
            raise ContractError(
                f"checkpoint shape mismatch for {p.name}: {rec.array.shape} vs {p.tensor.shape}"
            )
        if rec.trainable != p.trainable:
            raise ContractError(f"trainable flag mismatch for {p.name}")
        p.tensor.data[...] = rec.array


def restore_optimizer(opt: Adam, records: dict, step: int):
    opt.t = step
    for name, _ in opt.slots:
        m = records.get(f"optim.m.{name}")
        v = records.get(f"optim.v.{name}")
        if m is not None:
            opt.m[name][...] = m.array.reshape(-1)
        if v is not None:
            opt.v[name][...] = v.array.reshape(-1)


# ---------------------------------------------------------------------------
# loss assembly


def _lm_loss(model, cfg: RunConfig, x, y, k, step):
    """Task loss for one batch; returns (loss tensor, task cross-entropy)."""
    targets = y.reshape(-1)
    if model.cfg.strategy == routing.THOR:
        logits1 = model.lm_forward(x, k, training=True, rng=step_rng(cfg.seed, step, 0))
        logits2 = model.lm_forward(x, k, training=True, rng=step_rng(cfg.seed, step, 1))
        flat1 = dc.reshape(logits1, (-1, model.cfg.vocab_size))
        flat2 = dc.reshape(logits2, (-1, model.cfg.vocab_size))
        ce1 = dc.cross_entropy(flat1, targets)
        ce2 = dc.cross_entropy(flat2, targets)
        task = dc.scale(dc.add(ce1, ce2), 0.5)
        consistency = routing.thor_consistency_loss(flat1, flat2)
        loss = dc.add(task, dc.scale(consistency, cfg.thor_consistency_weight))
        return loss, float(task.data)
    collect = cfg.balance_loss_weight > 0
    out = model.lm_forward(
        x, k, training=True, rng=step_rng(cfg.seed, step, 0), collect_gates=collect
    )
    logits, gates = out if collect else (out, [])
    flat = dc.reshape(logits, (-1, model.cfg.vocab_size))
    ce = dc.cross_entropy(flat, targets)
    loss = ce
    if collect:
        balance = _balance_loss([g for g in gates if g is not None])
        if balance is not None:
            loss = dc.add(loss, dc.scale(balance, cfg.balance_loss_weight))
    return loss, float(ce.data)


def _balance_loss(gatings):
    """Load-balance penalty: n_experts * sum_i f_i * P_i per layer, averaged.

    f_i is the fraction of tokens that selected expert i (constant), P_i the
    mean gate probability (differentiable).
    """
    if not gatings:
        return None
    terms = None
    for g in gatings:
        n = g.dense_gates.shape[-1]
        m = g.selected.shape[0]
        f = np.bincount(g.selected.reshape(-1), minlength=n) / m
        p = dc.mean_over(g.dense_gates, 0)
        term = dc.sum_all(dc.mul(p, dc.tensor(f * n)))
        terms = term if terms is None else dc.add(terms, term)
    return dc.scale(terms, 1.0 / len(gatings))


def _lr_at(cfg: RunConfig, step: int) -> float:
    if cfg.lr_schedule == "cosine":
        frac = min(1.0, step / max(1, cfg.total_iterations))
        return cfg.lr * 0.5 * (1.0 + math.cos(math.pi * frac))
    return cfg.lr


# ---------------------------------------------------------------------------
# evaluation


def evaluate(model: LanguageModel, tokens, k: int, cfg: RunConfig) -> dict:
    """Token-level cross entropy over a full split, with routers cached.

    Returns {"ce", "bpc", "ppl", "tokens"}. Deterministic across repeated
    calls: stochastic strategies draw from a generator fixed by (seed, k).
    """
    model.train_mode = False
    if model.cfg.strategy == routing.HYPER_ROUTER:
        model.cache_routers()
    t = cfg.input_length
    n_chunks = (tokens.size - 1) // t
    if n_chunks < 1:
        raise DataError(f"split too small to evaluate: {tokens.size} tokens")
    total_ce = 0.0
    total_tokens = 0
    rng = np.random.default_rng([cfg.seed, 0xE7A1, k])
    with dc.no_grad():
        for start in range(0, n_chunks, cfg.batch_size):
            chunk_ids = np.arange(start, min(start + cfg.batch_size, n_chunks))
            x = np.stack([tokens[c * t : c * t + t] for c in chunk_ids])
            y = np.stack([tokens[c * t + 1 : c * t + t + 1] for c in chunk_ids])
            logits = model.lm_forward(x, k, training=False, rng=rng)
            flat = dc.reshape(logits, (-1, model.cfg.vocab_size))
            ce = float(dc.cross_entropy(flat, y.reshape(-1)).data)
            total_ce += ce * x.size
            total_tokens += x.size
    ce = total_ce / total_tokens
    return {"ce": ce, "bpc": ce / LN2, "ppl": math.exp(ce), "tokens": total_tokens}


def evaluate_accuracy(model: LanguageModel, records, cfg: RunConfig, k: int) -> float:
    model.train_mode = False
    if model.cfg.strategy == routing.HYPER_ROUTER:
        model.cache_routers()
    correct = 0
    rng = np.random.default_rng([cfg.seed, 0xE7A2, k])
    with dc.no_grad():
        for start in range(0, len(records), cfg.finetune_batch_size):
            batch = records[start : start + cfg.finetune_batch_size]
            x, labels = _classification_batch(batch, cfg.input_length)
            logits = model.classify_forward(x, k, training=False, rng=rng)
            correct += int(np.sum(np.argmax(logits.data, axis=1) == labels))
    return correct / len(records)


def _classification_batch(records, input_length):
    x = np.zeros((len(records), input_length), dtype=np.int64)
    labels = np.empty(len(records), dtype=np.int64)
    for i, (label, ids) in enumerate(records):
        n = min(ids.size, input_length)
        x[i, :n] = ids[:n]
        labels[i] = label
    return x, labels


# ---------------------------------------------------------------------------
# pre-training


def pretrain(
    cfg: RunConfig,
    out_dir: str,
    resume: str | None = None,
    progress=None,
) -> MetricsLog:
    """Train a language model per the config; returns the metrics log.

    Logs loss and bits-per-character (or perplexity for word-level data)
    every log_interval steps along with the active expert count k. Writes
    checkpoints at checkpoint_interval and at the end. `resume` continues
    bitwise from a saved checkpoint of the same config.
    """
    manifest = load_manifest(cfg.dataset)
    if manifest.kind == "classification":
        raise DataError("pretrain requires a language-model dataset")
    if manifest.vocab_size != cfg.model.vocab_size:
        raise ContractError(
            f"model vocab_size {cfg.model.vocab_size} does not match dataset "
            f"vocab {manifest.vocab_size}"
        )
    tokens = load_tokens(cfg.dataset, "train")
    metric_name = "bpc" if manifest.kind == "char-lm" else "ppl"

    model = LanguageModel(cfg.model)
    opt = Adam(model.trainable_parameters(), cfg.lr, cfg.beta1, cfg.beta2, cfg.eps)
    start_step = 0
    if resume is not None:
        saved_cfg, saved_step, records = load_run_checkpoint(resume)
        if serialize(saved_cfg) != serialize(cfg):
            raise ContractError("resume checkpoint was produced by a different config")
        restore_model(model, records)
        restore_optimizer(opt, records, saved_step)
        start_step = saved_step

    os.makedirs(out_dir, exist_ok=True)
    metrics = MetricsLog(os.path.join(out_dir, "metrics.csv"))
    schedule = moe.KSchedule(1, cfg.model.n_experts, cfg.total_iterations, cfg.k_schedule)

    if cfg.total_iterations == start_step == 0:
        save_run_checkpoint(os.path.join(out_dir, "ckpt_final.bin"), cfg, model, opt, 0)
        return metrics

    valid_tokens = None
    for step in range(start_step, cfg.total_iterations):
        k = moe.current_k(schedule, step)
        x, y = lm_batch(tokens, cfg.input_length, cfg.batch_size, cfg.seed, step)
        model.train_mode = True
        model.clear_router_cache()
        loss, task_ce = _lm_loss(model, cfg, x, y, k, step)
        if step % cfg.log_interval == 0 or step == cfg.total_iterations - 1:
            value = task_ce / LN2 if metric_name == "bpc" else math.exp(task_ce)
            metrics.log(step, k, "train", "loss", task_ce)
            metrics.log(step, k, "train", metric_name, value)
            if progress:
                progress(f"step {step} k={k} loss={task_ce:.4f} {metric_name}={value:.4f}")
        loss.backward()
        clip_gradients(model.trainable_parameters(), cfg.clip_norm)
        opt.step(_lr_at(cfg, step))
        model.zero_grad()

        done = step + 1
        if cfg.eval_interval and done % cfg.eval_interval == 0 and done < cfg.total_iterations:
            if valid_tokens is None:
                valid_tokens = load_tokens(cfg.dataset, "valid")
            result = evaluate(model, valid_tokens, cfg.model.n_experts, cfg)
            metrics.log(step, cfg.model.n_experts, "valid", metric_name, result[metric_name])
            model.train_mode = True
        if cfg.checkpoint_interval and done % cfg.checkpoint_interval == 0:
            save_run_checkpoint(
                os.path.join(out_dir, f"ckpt_{done:08d}.bin"), cfg, model, opt, done
            )

    model.train_mode = False
    save_run_checkpoint(
        os.path.join(out_dir, "ckpt_final.bin"), cfg, model, opt, cfg.total_iterations
    )
    return metrics


# ---------------------------------------------------------------------------
# finetuning


def cls_batch_ids(n_records, batch_size, seed, step):
    """Record indices for one finetune step; epochs are seed-fixed shuffles."""
    steps_per_epoch = max(1, math.ceil(n_records / batch_size))
    epoch = step // steps_per_epoch
    pos = step % steps_per_epoch
    perm = _epoch_perm(seed, 0xC1A55, epoch, n_records)
    return perm[pos * batch_size : (pos + 1) * batch_size], epoch, steps_per_epoch


def finetune(
    cfg: RunConfig,
    pretrained: str,
    out_dir: str,
    resume: str | None = None,
    progress=None,
) -> MetricsLog:
    """Attach a classifier head to a pretrained trunk and train with k fixed
    at n_experts (every expert active at every step)."""
    manifest = load_manifest(cfg.dataset)
    if manifest.kind != "classification":
        raise DataError("finetune requires a classification dataset")
    records = load_records(cfg.dataset, "train")
    if not records:
        raise DataError("classification train split is empty")

    trunk_cfg, _, trunk_records = load_run_checkpoint(pretrained)
    if trunk_cfg.model != cfg.model:
        raise ContractError("pretrained checkpoint architecture does not match config")
    model = LanguageModel(cfg.model)
    restore_model(model, trunk_records)
    model.attach_head(manifest.n_labels)

    opt = Adam(model.trainable_parameters(), cfg.finetune_lr, cfg.beta1, cfg.beta2, cfg.eps)
    start_step = 0
    if resume is not None:
        saved_cfg, saved_step, saved = load_run_checkpoint(resume)
        if serialize(saved_cfg) != serialize(cfg):
            raise ContractError("resume checkpoint was produced by a different config")
        restore_model(model, saved)
        restore_optimizer(opt, saved, saved_step)
        start_step = saved_step

    os.makedirs(out_dir, exist_ok=True)
    metrics = MetricsLog(os.path.join(out_dir, "metrics.csv"))
    k = cfg.model.n_experts  # dense finetuning: all experts at every step
    steps_per_epoch = max(1, math.ceil(len(records) / cfg.finetune_batch_size))
    total_steps = cfg.finetune_epochs * steps_per_epoch

    epoch_hits = 0
    epoch_count = 0
    for step in range(start_step, total_steps):
        ids, epoch, _ = cls_batch_ids(len(records), cfg.finetune_batch_size, cfg.seed, step)
        batch = [records[i] for i in ids]
        x, labels = _classification_batch(batch, cfg.input_length)
        model.train_mode = True
        model.clear_router_cache()
        logits = model.classify_forward(x, k, training=True, rng=step_rng(cfg.seed, step, 0))
        loss = dc.cross_entropy(logits, labels)
        epoch_hits += int(np.sum(np.argmax(logits.data, axis=1) == labels))
        epoch_count += len(batch)
        metrics.log(step, k, "train", "loss", float(loss.data))
        loss.backward()
        clip_gradients(model.trainable_parameters(), cfg.clip_norm)
        opt.step(cfg.finetune_lr)
        model.zero_grad()
        if (step + 1) % steps_per_epoch == 0:
            acc = epoch_hits / max(1, epoch_count)
            metrics.log(step, k, "train", "accuracy", acc)
            if progress:
                progress(f"epoch {epoch} accuracy={acc:.4f}")
            epoch_hits = epoch_count = 0
        if cfg.checkpoint_interval and (step + 1) % cfg.checkpoint_interval == 0:
            save_run_checkpoint(
                os.path.join(out_dir, f"ckpt_{step + 1:08d}.bin"), cfg, model, opt, step + 1
            )

    model.train_mode = False
    save_run_checkpoint(os.path.join(out_dir, "ckpt_final.bin"), cfg, model, opt, total_steps)
    return metrics


def build_model_from_checkpoint(path) -> tuple[LanguageModel, RunConfig]:
    """Reconstruct a model (with head if saved) from a checkpoint file."""
    cfg, _, records = load_run_checkpoint(path)
    model = LanguageModel(cfg.model)
    head_w = records.get("cls.w")
    if head_w is not None:
        model.attach_head(head_w.array.shape[1])
    restore_model(model, records, require_all=False)
    return model, cfg
