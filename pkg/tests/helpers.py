"""Shared test utilities: deterministic synthetic corpora and run configs."""

import numpy as np

from smoelab.config import build_config

WORDS = [
    "the", "of", "and", "to", "in", "a", "is", "that", "for", "it",
    "router", "expert", "token", "model", "layer", "gate", "sparse", "dense",
    "network", "weight", "batch", "step", "train", "signal", "memory",
    "stream", "branch", "count", "state", "value", "shift", "local", "core",
    "path", "node", "merge", "split", "scale", "probe", "trace",
]


def synth_corpus(n_bytes: int, seed: int = 0) -> bytes:
    """English-like filler text with zipf-ish word frequencies.

    Structured enough that a byte-level model beats the 8-bit uniform
    baseline by a wide margin after a short training run.
    """
    rng = np.random.default_rng([seed, 0x7E47])
    ranks = np.arange(1, len(WORDS) + 1, dtype=float)
    probs = (1.0 / ranks) / np.sum(1.0 / ranks)
    pieces = []
    size = 0
    while size < n_bytes:
        n_words = int(rng.integers(4, 13))
        idx = rng.choice(len(WORDS), size=n_words, p=probs)
        sentence = " ".join(WORDS[i] for i in idx) + ". "
        if rng.random() < 0.08:
            sentence += "\n"
        pieces.append(sentence)
        size += len(sentence)
    return "".join(pieces).encode("ascii")[:n_bytes]


def synth_classification(n_records: int, seed: int = 0) -> str:
    """label<TAB>text lines, separable by which marker word the text carries."""
    rng = np.random.default_rng([seed, 0xC1A5])
    lines = []
    for i in range(n_records):
        label = "pos" if i % 2 == 0 else "neg"
        marker = "sunlit" if label == "pos" else "basalt"
        n_words = int(rng.integers(5, 12))
        idx = rng.choice(len(WORDS), size=n_words)
        words = [WORDS[j] for j in idx]
        # marker near the front so it survives short input windows
        words.insert(int(rng.integers(0, 3)), marker)
        lines.append(f"{label}\t{' '.join(words)}")
    return "\n".join(lines) + "\n"


def tiny_run_config(tmp_dir, dataset, strategy="smoe_dropout", seed=0, **overrides):
    """A very small but complete training config for fast structural tests."""
    base = {
        "model.n_layers": "1",
        "model.d_model": "32",
        "model.n_heads": "2",
        "model.inner_dim": "16",
        "model.n_experts": "4",
        "model.max_seq_len": "32",
        "model.strategy": strategy,
        "training.seed": str(seed),
        "training.batch_size": "4",
        "training.input_length": "32",
        "training.total_iterations": "24",
        "training.eval_ks": "1,2,4",
        "training.log_interval": "4",
        "data.dataset": str(dataset),
    }
    base.update(overrides)
    return build_config(overrides=[f"{k}={v}" for k, v in base.items()])
