"""Reference numpy implementations of the hot numeric kernels.

Every kernel takes C-contiguous float64 arrays, already flattened by the
caller to at most three dimensions. The compiled module `_ext` mirrors these
signatures exactly; this module is the fallback and the source of truth for
semantics.
"""

import numpy as np

_TRIL = {}


def _tril(n):
    m = _TRIL.get(n)
    if m is None:
        m = np.tril(np.ones((n, n), dtype=bool))
        _TRIL[n] = m
    return m


def softmax(x):
    """Row softmax of a (M, N) array with max subtraction."""
    m = x.max(axis=1, keepdims=True)
    e = np.exp(x - m)
    e /= e.sum(axis=1, keepdims=True)
    return e


def softmax_grad(out, gout):
    """Input gradient of row softmax given its output and output gradient."""
    dot = np.sum(gout * out, axis=1, keepdims=True)
    return out * (gout - dot)


def causal_softmax(scores):
    """Row softmax of (R, T, T) score blocks, masking columns above the diagonal.

    Masked positions come out exactly zero, so the plain softmax gradient is
    also correct for the masked version.
    """
    t = scores.shape[-1]
    x = np.where(_tril(t), scores, -np.inf)
    m = x.max(axis=-1, keepdims=True)
    e = np.exp(x - m)
    e /= e.sum(axis=-1, keepdims=True)
    return e


def layernorm(x, gain, offset, eps):
    """Per-row normalization of (M, D) to zero mean, unit variance, then affine.

    Returns (out, xhat, inv_std); the latter two are consumed by the backward
    pass. Variance is the population variance; eps sits inside the sqrt.
    """
    mean = x.mean(axis=1, keepdims=True)
    var = x.var(axis=1, keepdims=True)
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = (x - mean) * inv_std
    return xhat * gain + offset, xhat, inv_std[:, 0].copy()


def layernorm_grad(xhat, inv_std, gain, gout):
    gg = gout * gain
    mean_gg = gg.mean(axis=1, keepdims=True)
    mean_ggx = (gg * xhat).mean(axis=1, keepdims=True)
    gx = (gg - mean_gg - xhat * mean_ggx) * inv_std[:, None]
    ggain = (gout * xhat).sum(axis=0)
    goffset = gout.sum(axis=0)
    return gx, ggain, goffset


def cross_entropy(logits, targets):
    """Mean negative log softmax probability of the target class.

    logits is (M, V), targets an int64 vector in [0, V). Returns the scalar
    loss and the (M, V) softmax probabilities saved for the backward pass.
    """
    m = logits.max(axis=1, keepdims=True)
    e = np.exp(logits - m)
    z = e.sum(axis=1, keepdims=True)
    probs = e / z
    n = logits.shape[0]
    picked = logits[np.arange(n), targets]
    loss = float(np.mean(m[:, 0] + np.log(z[:, 0]) - picked))
    return loss, probs


def cross_entropy_grad(probs, targets, gscale):
    g = probs.copy()
    n = probs.shape[0]
    g[np.arange(n), targets] -= 1.0
    g *= gscale / n
    return g


def topk_mask(dense, k):
    """Keep the k largest entries per row; ties keep the lowest column index.

    Returns (mask, selected) where mask is 0/1 float64 of dense's shape and
    selected is the (M, k) int64 matrix of kept columns, sorted ascending.
    """
    order = np.argsort(-dense, axis=1, kind="stable")
    selected = np.sort(order[:, :k].astype(np.int64), axis=1)
    mask = np.zeros_like(dense)
    np.put_along_axis(mask, selected, 1.0, axis=1)
    return mask, selected


def adam_update(p, g, m, v, lr, beta1, beta2, eps, c1, c2):
    """One fused Adam step on flat arrays, in place. c1/c2 are 1 - beta^t."""
    m *= beta1
    m += (1.0 - beta1) * g
    v *= beta2
    v += (1.0 - beta2) * (g * g)
    p -= lr * (m / c1) / (np.sqrt(v / c2) + eps)
