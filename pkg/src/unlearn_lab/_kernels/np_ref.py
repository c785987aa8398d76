"""Pure numpy reference implementations of the hot kernels.

Same math as the compiled core in ``_core.pyx``; used as the fallback
backend when the extension is unavailable, and as the readable statement
of what each kernel computes. Results agree with the compiled core to
floating-point roundoff (summation order differs).
"""

import numpy as np

BACKEND_NAME = "numpy"


def lcs_len(a: np.ndarray, b: np.ndarray) -> int:
    """Length of the longest common subsequence of two int token arrays."""
    n, m = len(a), len(b)
    if n == 0 or m == 0:
        return 0
    prev = [0] * (m + 1)
    cur = [0] * (m + 1)
    a_list = a.tolist()
    b_list = b.tolist()
    for i in range(1, n + 1):
        ai = a_list[i - 1]
        for j in range(1, m + 1):
            if ai == b_list[j - 1]:
                cur[j] = prev[j - 1] + 1
            else:
                up = prev[j]
                left = cur[j - 1]
                cur[j] = up if up >= left else left
        prev, cur = cur, prev
    return prev[m]


def softmax_xent_fwd(logits: np.ndarray, targets: np.ndarray, mask: np.ndarray):
    """Fused row-wise softmax + masked cross-entropy forward.

    logits: [N, V] float64, targets: [N] int64, mask: [N] float64 in {0,1}.
    Returns (sum of masked per-row negative log-likelihoods, probs [N, V]).
    """
    shift = logits - logits.max(axis=1, keepdims=True)
    exps = np.exp(shift)
    denom = exps.sum(axis=1)
    probs = exps / denom[:, None]
    rows = np.arange(logits.shape[0])
    logp = shift[rows, targets] - np.log(denom)
    nll_sum = float(-(mask * logp).sum())
    return nll_sum, probs


def softmax_xent_bwd(
    probs: np.ndarray, targets: np.ndarray, mask: np.ndarray, scale: float
) -> np.ndarray:
    """Gradient of ``scale * sum(mask * nll)`` w.r.t. the logits.

    Closed form per row: scale * mask * (probs - onehot(target)).
    """
    coeff = mask * scale
    grad = probs * coeff[:, None]
    rows = np.arange(probs.shape[0])
    grad[rows, targets] -= coeff
    return grad


def scatter_add_rows(out: np.ndarray, ids: np.ndarray, vals: np.ndarray) -> None:
    """out[ids[i], :] += vals[i, :] with repeated ids accumulating."""
    np.add.at(out, ids, vals)


_GELU_C = 0.7978845608028654  # sqrt(2/pi)
_GELU_A = 0.044715


def gelu_fwd(x: np.ndarray):
    """Tanh-approximation GELU forward; returns (output, tanh values)."""
    t = np.tanh(_GELU_C * (x + _GELU_A * x**3))
    return 0.5 * x * (1.0 + t), t


def gelu_bwd(g: np.ndarray, x: np.ndarray, t: np.ndarray) -> np.ndarray:
    """GELU gradient given the cached tanh values from the forward."""
    dinner = _GELU_C * (1.0 + 3.0 * _GELU_A * x**2)
    return g * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t**2) * dinner)


def adamw_step(
    theta: np.ndarray,
    grad: np.ndarray,
    m: np.ndarray,
    v: np.ndarray,
    step: int,
    lr: float,
    beta1: float,
    beta2: float,
    eps: float,
    weight_decay: float,
) -> None:
    """One decoupled-weight-decay Adam update, in place on theta/m/v.

    ``step`` is the 1-based update count used for bias correction.
    """
    m *= beta1
    m += (1.0 - beta1) * grad
    v *= beta2
    v += (1.0 - beta2) * grad * grad
    mhat = m / (1.0 - beta1**step)
    vhat = v / (1.0 - beta2**step)
    theta -= lr * (mhat / (np.sqrt(vhat) + eps) + weight_decay * theta)
