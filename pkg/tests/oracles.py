"""Independent reference implementations used as test oracles.

Everything here is written with plain loops or direct formulas in float64 so
that it shares no code path with the package under test.
"""

from __future__ import annotations

import math

import numpy as np

from mmbatch.tensor import (
    Tape,
    Tensor,
    add,
    add_bias,
    concat_cols,
    conv2d,
    embedding_mean,
    embedding_mean_batch,
    matmul,
    maxpool2d,
    mul,
    relu,
    reshape,
    softmax_cross_entropy,
    tensor_sum,
)

GRAD_EPS = 1e-3
GRAD_RTOL = 1e-4
GRAD_ATOL = 1e-6


# --- finite differences -------------------------------------------------------

def numeric_grad(f, arrays, index, eps=GRAD_EPS):
    """Central difference of scalar ``f(*arrays)`` w.r.t. ``arrays[index]``."""
    base = [np.array(a, dtype=np.float64) for a in arrays]
    x = base[index]
    grad = np.zeros_like(x)
    it = np.nditer(x, flags=["multi_index"])
    for _ in it:
        i = it.multi_index
        orig = x[i]
        x[i] = orig + eps
        hi = f(*base)
        x[i] = orig - eps
        lo = f(*base)
        x[i] = orig
        grad[i] = (hi - lo) / (2 * eps)
    return grad


def analytic_grads(build, arrays):
    """Run ``build`` on float64 tensors under a tape and return every input gradient."""
    tensors = [Tensor(a, requires_grad=True, dtype=np.float64) for a in arrays]
    with Tape() as tape:
        loss = build(*tensors)
    tape.backward(loss)
    return [t.grad for t in tensors]


def gradcheck(build, arrays):
    """Largest violation of ``|a - n| <= atol + rtol * |n|`` over all inputs (<= 0 passes)."""

    def scalar(*arrs):
        ts = [Tensor(a, dtype=np.float64) for a in arrs]
        return build(*ts).item()

    worst = -np.inf
    for k, g in enumerate(analytic_grads(build, arrays)):
        n = numeric_grad(scalar, arrays, k)
        worst = max(worst, float(np.max(np.abs(g - n) - (GRAD_ATOL + GRAD_RTOL * np.abs(n)))))
    return worst


def _weighted(out, rng):
    """Reduce an op output to a scalar through random weights so every entry matters."""
    w = Tensor(rng.standard_normal(out.shape), dtype=np.float64)
    return tensor_sum(mul(out, w))


def _away_from_zero(rng, shape, margin=0.05):
    x = rng.standard_normal(shape)
    return np.where(np.abs(x) < margin, np.sign(x + 1e-12) * margin * 2, x)


def _distinct(rng, shape, gap=0.02):
    """Values whose pairwise gaps exceed ``gap`` so max-pool argmaxes are stable."""
    n = int(np.prod(shape))
    vals = rng.permutation(n) * gap * 2 + rng.uniform(0, gap * 0.5, n)
    return (vals - vals.mean()).reshape(shape)


def gradient_cases(rng):
    """One randomized ``(name, build, arrays)`` triple per differentiable op."""
    m, k, n = rng.integers(1, 5, size=3)
    cases = [
        ("add", lambda a, b: _weighted(add(a, b), np.random.default_rng(1)),
         [rng.standard_normal((m, k)), rng.standard_normal((m, k))]),
        ("mul", lambda a, b: _weighted(mul(a, b), np.random.default_rng(2)),
         [rng.standard_normal((m, k)), rng.standard_normal((m, k))]),
        ("sum", lambda a: tensor_sum(a), [rng.standard_normal((m, k, n))]),
        ("matmul", lambda a, b: _weighted(matmul(a, b), np.random.default_rng(3)),
         [rng.standard_normal((m, k)), rng.standard_normal((k, n))]),
        ("add_bias", lambda a, b: _weighted(add_bias(a, b), np.random.default_rng(4)),
         [rng.standard_normal((m, k)), rng.standard_normal(k)]),
        ("reshape", lambda a: _weighted(reshape(a, (k, m)), np.random.default_rng(5)),
         [rng.standard_normal((m, k))]),
        ("concat_cols", lambda a, b: _weighted(concat_cols(a, b), np.random.default_rng(6)),
         [rng.standard_normal((m, k)), rng.standard_normal((m, n))]),
        ("relu", lambda a: _weighted(relu(a), np.random.default_rng(7)), [_away_from_zero(rng, (m, k))]),
    ]

    c, f = rng.integers(1, 3, size=2)
    kh, kw = rng.integers(1, 4, size=2)
    stride = int(rng.integers(1, 3))
    pad = int(rng.integers(0, 2))
    h = int(rng.integers(max(kh - 2 * pad, 1), 6))
    w = int(rng.integers(max(kw - 2 * pad, 1), 6))
    batch = int(rng.integers(1, 3))
    cases.append((
        "conv2d",
        lambda x, ker, b: _weighted(conv2d(x, ker, b, stride, pad), np.random.default_rng(8)),
        [rng.standard_normal((batch, c, h, w)), rng.standard_normal((f, c, kh, kw)), rng.standard_normal(f)],
    ))

    win = int(rng.integers(1, 3))
    pstride = int(rng.integers(1, 3))
    ph, pw = rng.integers(win, 6, size=2)
    cases.append((
        "maxpool2d",
        lambda x: _weighted(maxpool2d(x, win, pstride), np.random.default_rng(9)),
        [_distinct(rng, (batch, c, ph, pw))],
    ))

    vocab, dim = int(rng.integers(2, 6)), int(rng.integers(1, 4))
    ids = rng.integers(0, vocab, size=int(rng.integers(1, 5))).tolist()
    seqs = [rng.integers(0, vocab, size=int(rng.integers(1, 4))).tolist() for _ in range(int(rng.integers(1, 4)))]
    cases.append(("embedding_mean", lambda t: _weighted(embedding_mean(ids, t), np.random.default_rng(10)),
                  [rng.standard_normal((vocab, dim))]))
    cases.append(("embedding_mean_batch",
                  lambda t: _weighted(embedding_mean_batch(seqs, t), np.random.default_rng(11)),
                  [rng.standard_normal((vocab, dim))]))

    classes = int(rng.integers(2, 5))
    labels = rng.integers(0, classes, size=m).tolist()
    cases.append(("softmax_cross_entropy", lambda z: softmax_cross_entropy(z, labels),
                  [rng.standard_normal((m, classes)) * 2]))
    return cases


def run_gradient_suite(trials=100, seed=2024):
    """Worst violation per op over ``trials`` randomized cases."""
    worst: dict[str, float] = {}
    for t in range(trials):
        rng = np.random.default_rng([seed, t])
        for name, build, arrays in gradient_cases(rng):
            worst[name] = max(worst.get(name, -np.inf), gradcheck(build, arrays))
    return worst


# --- layer oracles -------------------------------------------------------------

def matmul_loop(a, b):
    m, k = len(a), len(a[0])
    n = len(b[0])
    return [[sum(a[i][t] * b[t][j] for t in range(k)) for j in range(n)] for i in range(m)]


def conv2d_loop(x, ker, bias=None, stride=1, pad=0):
    x = np.asarray(x, dtype=np.float64)
    ker = np.asarray(ker, dtype=np.float64)
    n, c, h, w = x.shape
    f, _, kh, kw = ker.shape
    ho = (h + 2 * pad - kh) // stride + 1
    wo = (w + 2 * pad - kw) // stride + 1
    out = np.zeros((n, f, ho, wo))
    for b in range(n):
        for o in range(f):
            for i in range(ho):
                for j in range(wo):
                    s = 0.0 if bias is None else float(bias[o])
                    for ch in range(c):
                        for u in range(kh):
                            for v in range(kw):
                                r, q = i * stride + u - pad, j * stride + v - pad
                                if 0 <= r < h and 0 <= q < w:
                                    s += x[b, ch, r, q] * ker[o, ch, u, v]
                    out[b, o, i, j] = s
    return out


def maxpool_loop(x, window, stride):
    x = np.asarray(x, dtype=np.float64)
    n, c, h, w = x.shape
    ho, wo = (h - window) // stride + 1, (w - window) // stride + 1
    out = np.zeros((n, c, ho, wo))
    for b in range(n):
        for ch in range(c):
            for i in range(ho):
                for j in range(wo):
                    out[b, ch, i, j] = max(
                        x[b, ch, i * stride + u, j * stride + v] for u in range(window) for v in range(window)
                    )
    return out


def cross_entropy_direct(logits, labels):
    total = 0.0
    for row, y in zip(np.asarray(logits, dtype=np.float64), labels):
        top = max(row)
        lse = top + math.log(math.fsum(math.exp(v - top) for v in row))
        total += lse - row[y]
    return total / len(labels)


def cam_loop(act, weights):
    """``S_c = sum_{x,y} sum_k w[c,k(,x,y)] * A[k,x,y]`` by direct summation."""
    act = np.asarray(act, dtype=np.float64)
    weights = np.asarray(weights, dtype=np.float64)
    k, nx, ny = act.shape
    scores = []
    for c in range(weights.shape[0]):
        s = 0.0
        for x in range(nx):
            for y in range(ny):
                for kk in range(k):
                    wv = weights[c, kk] if weights.ndim == 2 else weights[c, kk, x, y]
                    s += wv * act[kk, x, y]
        scores.append(s)
    return np.asarray(scores)


# --- optimizer oracles -----------------------------------------------------------

def sgd_momentum_scalar(w0, grad_fn, lr, mu, steps):
    w, v, trace = float(w0), 0.0, []
    for _ in range(steps):
        g = grad_fn(w)
        v = mu * v + g
        w = w - lr * v
        trace.append(w)
    return trace


def adam_scalar(w0, grad_fn, lr, steps, b1=0.9, b2=0.999, eps=1e-8):
    w, m, v, trace = float(w0), 0.0, 0.0, []
    for t in range(1, steps + 1):
        g = grad_fn(w)
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        mhat = m / (1 - b1**t)
        vhat = v / (1 - b2**t)
        w = w - lr * mhat / (math.sqrt(vhat) + eps)
        trace.append(w)
    return trace


# --- text oracles ------------------------------------------------------------------

def whole_word_scan(text: str, word: str) -> bool:
    """Whole-word containment by explicit scanning (no regular expressions)."""
    hay, needle = text.lower(), word.lower()
    start = 0
    while True:
        i = hay.find(needle, start)
        if i < 0:
            return False
        before = hay[i - 1] if i > 0 else " "
        after = hay[i + len(needle)] if i + len(needle) < len(hay) else " "
        if not (before.isalnum() or before == "_") and not (after.isalnum() or after == "_"):
            return True
        start = i + 1
