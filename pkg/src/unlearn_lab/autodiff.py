"""Dense-tensor reverse-mode automatic differentiation.

A minimal tape engine over float64 numpy arrays, sized for a tiny
language model rather than generality: eager execution, explicit shapes,
and no broadcasting beyond row-wise bias addition for tracked operands
(constants may broadcast freely). Each primitive records a node on the
tape only when some input requires a gradient, so inference reuses the
same code path at zero tape cost.

Gradients accumulate additively on fan-out and across repeated backward
calls; callers reset leaf ``grad`` buffers between optimizer steps.
"""

from __future__ import annotations

import math
from typing import Callable, Sequence

import numpy as np

from . import _kernels


class ShapeError(ValueError):
    """Raised when operand shapes do not conform to a primitive signature."""


class Tensor:
    """A float64 array with an optional accumulated gradient."""

    __slots__ = ("data", "grad", "requires_grad", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.asarray(data, dtype=np.float64)
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def value(self) -> float:
        """The scalar payload; only valid for 0-d / single-element tensors."""
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def reset_grad(self) -> None:
        self.grad = None

    def accumulate_grad(self, g: np.ndarray) -> None:
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        self.grad += g.reshape(self.data.shape)

    def __repr__(self) -> str:
        tag = self.name or "tensor"
        return f"Tensor({tag}, shape={self.shape}, requires_grad={self.requires_grad})"


def constant(data, name: str | None = None) -> Tensor:
    return Tensor(data, requires_grad=False, name=name)


def leaf(data, name: str | None = None) -> Tensor:
    return Tensor(data, requires_grad=True, name=name)


class TapeNode:
    """One recorded primitive: output, inputs, and the local gradient rule.

    ``vjp(grad_out)`` returns one cotangent per input (None for inputs
    that do not require a gradient).
    """

    __slots__ = ("op", "inputs", "output", "vjp")

    def __init__(self, op: str, inputs: tuple[Tensor, ...], output: Tensor, vjp: Callable):
        self.op = op
        self.inputs = inputs
        self.output = output
        self.vjp = vjp


class Tape:
    """Ordered record of primitives; nodes appear in execution order,
    which is a valid topological order of the computation graph."""

    def __init__(self):
        self.nodes: list[TapeNode] = []

    # -- plumbing ---------------------------------------------------------

    def _record(self, op: str, inputs: Sequence[Tensor], out_data: np.ndarray, vjp) -> Tensor:
        needs = any(t.requires_grad for t in inputs)
        out = Tensor(out_data, requires_grad=needs)
        if needs:
            self.nodes.append(TapeNode(op, tuple(inputs), out, vjp))
        return out

    @property
    def output(self) -> Tensor:
        if not self.nodes:
            raise RuntimeError("empty tape has no output")
        return self.nodes[-1].output

    def backward(self, output: Tensor | None = None, seed=None) -> dict[int, np.ndarray]:
        """Reverse sweep from ``output`` (default: last recorded node).

        Accumulates into the ``grad`` buffer of every reachable leaf that
        requires a gradient and returns {id(tensor): gradient} for them.
        """
        if output is None:
            output = self.output
        if seed is None:
            seed_arr = np.ones_like(output.data)
        else:
            seed_arr = np.asarray(seed, dtype=np.float64)
            if seed_arr.shape != output.data.shape:
                raise ShapeError(
                    f"backward: seed shape {seed_arr.shape} does not match "
                    f"output shape {output.data.shape}"
                )
        grads: dict[int, np.ndarray] = {id(output): seed_arr}
        produced = {id(node.output) for node in self.nodes}
        leaf_grads: dict[int, np.ndarray] = {}
        for node in reversed(self.nodes):
            gout = grads.pop(id(node.output), None)
            if gout is None:
                continue
            for tensor, gin in zip(node.inputs, node.vjp(gout)):
                if gin is None or not tensor.requires_grad:
                    continue
                key = id(tensor)
                if key in grads:
                    grads[key] = grads[key] + gin
                else:
                    grads[key] = gin
                if id(tensor) not in produced:
                    leaf_grads[key] = grads[key]
        for node in self.nodes:
            for tensor in node.inputs:
                key = id(tensor)
                if key in leaf_grads and tensor.requires_grad:
                    tensor.accumulate_grad(leaf_grads[key])
                    leaf_grads.pop(key)
        # leaves passed directly as output (no nodes) are handled above;
        # an output that is itself a leaf gets its seed.
        if not self.nodes and output.requires_grad:
            output.accumulate_grad(seed_arr)
        return grads

    # -- primitives -------------------------------------------------------

    def add(self, a: Tensor, b: Tensor) -> Tensor:
        """Elementwise add; a tracked ``b`` may also be a bias row whose
        shape equals the last axis of ``a``."""
        if a.shape == b.shape:
            def vjp(g):
                return g, g
        elif b.data.ndim == 1 and a.shape[-1] == b.shape[0]:
            def vjp(g):
                lead = tuple(range(g.ndim - 1))
                return g, g.sum(axis=lead)
        elif not b.requires_grad:
            try:
                np.broadcast_shapes(a.shape, b.shape)
            except ValueError:
                raise ShapeError(f"add: cannot broadcast {a.shape} with constant {b.shape}")

            def vjp(g):
                return g, None
        else:
            raise ShapeError(f"add: shapes {a.shape} and {b.shape} do not conform")
        return self._record("add", (a, b), a.data + b.data, vjp)

    def sub(self, a: Tensor, b: Tensor) -> Tensor:
        if a.shape != b.shape:
            raise ShapeError(f"sub: shapes {a.shape} and {b.shape} differ")

        def vjp(g):
            return g, -g

        return self._record("sub", (a, b), a.data - b.data, vjp)

    def mul(self, a: Tensor, b: Tensor) -> Tensor:
        if a.shape != b.shape:
            raise ShapeError(f"mul: shapes {a.shape} and {b.shape} differ")

        def vjp(g, ad=a.data, bd=b.data):
            return g * bd, g * ad

        return self._record("mul", (a, b), a.data * b.data, vjp)

    def scale(self, a: Tensor, c: float) -> Tensor:
        def vjp(g, c=float(c)):
            return (g * c,)

        return self._record("scale", (a,), a.data * float(c), vjp)

    def matmul(self, a: Tensor, b: Tensor) -> Tensor:
        if a.data.ndim < 2 or b.data.ndim < 2:
            raise ShapeError("matmul: operands must have rank >= 2")
        if a.shape[-1] != b.shape[-2]:
            raise ShapeError(f"matmul: inner dims {a.shape} x {b.shape} do not agree")
        if a.shape[:-2] != b.shape[:-2]:
            raise ShapeError(f"matmul: leading dims {a.shape} x {b.shape} differ")

        def vjp(g, ad=a.data, bd=b.data):
            ga = g @ bd.swapaxes(-1, -2)
            gb = ad.swapaxes(-1, -2) @ g
            return ga, gb

        return self._record("matmul", (a, b), a.data @ b.data, vjp)

    def transpose(self, a: Tensor, axes: tuple[int, ...]) -> Tensor:
        inv = tuple(int(i) for i in np.argsort(axes))

        def vjp(g):
            return (g.transpose(inv),)

        return self._record("transpose", (a,), a.data.transpose(axes).copy(), vjp)

    def reshape(self, a: Tensor, shape: tuple[int, ...]) -> Tensor:
        old = a.shape

        def vjp(g):
            return (g.reshape(old),)

        return self._record("reshape", (a,), a.data.reshape(shape), vjp)

    def exp(self, a: Tensor) -> Tensor:
        out = np.exp(a.data)

        def vjp(g, out=out):
            return (g * out,)

        return self._record("exp", (a,), out, vjp)

    def log(self, a: Tensor) -> Tensor:
        def vjp(g, ad=a.data):
            return (g / ad,)

        return self._record("log", (a,), np.log(a.data), vjp)

    def softmax(self, a: Tensor) -> Tensor:
        """Softmax over the last axis."""
        shift = a.data - a.data.max(axis=-1, keepdims=True)
        e = np.exp(shift)
        out = e / e.sum(axis=-1, keepdims=True)

        def vjp(g, out=out):
            dot = (g * out).sum(axis=-1, keepdims=True)
            return (out * (g - dot),)

        return self._record("softmax", (a,), out, vjp)

    def gelu(self, a: Tensor) -> Tensor:
        """GELU, tanh approximation (fused kernel)."""
        out, t = _kernels.gelu_fwd(a.data)

        def vjp(g, x=a.data, t=t):
            return (_kernels.gelu_bwd(g, x, t),)

        return self._record("gelu", (a,), out, vjp)

    def logsigmoid(self, a: Tensor) -> Tensor:
        """log(sigmoid(x)), numerically stable for large |x|."""
        x = a.data
        out = np.where(x >= 0, -np.log1p(np.exp(-np.abs(x))), x - np.log1p(np.exp(x)))

        def vjp(g, x=x):
            # d/dx log sigma(x) = sigma(-x)
            sig_neg = np.where(x >= 0, np.exp(-x) / (1.0 + np.exp(-np.abs(x))),
                               1.0 / (1.0 + np.exp(x)))
            return (g * sig_neg,)

        return self._record("logsigmoid", (a,), out, vjp)

    def gather_rows(self, table: Tensor, ids: np.ndarray) -> Tensor:
        """table[ids, :] for an int id vector; backward scatter-adds."""
        ids = np.asarray(ids)
        if table.data.ndim != 2:
            raise ShapeError(f"gather_rows: table must be 2-d, got {table.shape}")
        if ids.ndim != 1:
            raise ShapeError(f"gather_rows: ids must be 1-d, got {ids.shape}")
        ids64 = ids.astype(np.int64, copy=False)

        def vjp(g, shape=table.shape, ids64=ids64):
            gt = np.zeros(shape, dtype=np.float64)
            _kernels.scatter_add_rows(gt, ids64, np.ascontiguousarray(g))
            return (gt,)

        return self._record("gather_rows", (table,), table.data[ids64], vjp)

    def layer_norm(self, x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
        """Normalize the last axis to zero mean / unit variance, then
        apply an elementwise affine (gain, bias)."""
        d = x.shape[-1]
        if gain.shape != (d,) or bias.shape != (d,):
            raise ShapeError(f"layer_norm: gain/bias must have shape ({d},)")
        mu = x.data.mean(axis=-1, keepdims=True)
        xc = x.data - mu
        var = (xc * xc).mean(axis=-1, keepdims=True)
        rstd = 1.0 / np.sqrt(var + eps)
        xhat = xc * rstd
        out = xhat * gain.data + bias.data

        def vjp(g, xhat=xhat, rstd=rstd, gaind=gain.data, d=d):
            lead = tuple(range(g.ndim - 1))
            gbias = g.sum(axis=lead)
            ggain = (g * xhat).sum(axis=lead)
            gx_hat = g * gaind
            gx = rstd * (
                gx_hat
                - gx_hat.mean(axis=-1, keepdims=True)
                - xhat * (gx_hat * xhat).mean(axis=-1, keepdims=True)
            )
            return gx, ggain, gbias

        return self._record("layer_norm", (x, gain, bias), out, vjp)

    def sum_all(self, a: Tensor) -> Tensor:
        def vjp(g, shape=a.shape):
            return (np.full(shape, float(g)),)

        return self._record("sum_all", (a,), np.asarray(a.data.sum()), vjp)

    def mean_all(self, a: Tensor) -> Tensor:
        n = a.data.size

        def vjp(g, shape=a.shape, n=n):
            return (np.full(shape, float(g) / n),)

        return self._record("mean_all", (a,), np.asarray(a.data.mean()), vjp)

    def segment_masked_mean(self, x: Tensor, mask: np.ndarray, segments: int) -> Tensor:
        """Masked mean over equal contiguous segments: [N] -> [segments].

        Segment g covers rows [g*N/segments, (g+1)*N/segments); its output
        is sum(mask*x)/sum(mask) within the segment.
        """
        mask = np.asarray(mask, dtype=np.float64)
        n = x.data.shape[0]
        if x.data.ndim != 1 or mask.shape != (n,):
            raise ShapeError("segment_masked_mean: x and mask must be equal-length vectors")
        if n % segments != 0:
            raise ShapeError(
                f"segment_masked_mean: {n} rows do not split into {segments} segments"
            )
        width = n // segments
        m2 = mask.reshape(segments, width)
        counts = m2.sum(axis=1)
        if np.any(counts == 0):
            raise ValueError("segment_masked_mean: a segment has no selected positions")
        out = (x.data.reshape(segments, width) * m2).sum(axis=1) / counts

        def vjp(g, m2=m2, counts=counts, n=n):
            return ((m2 * (g / counts)[:, None]).reshape(n),)

        return self._record("segment_masked_mean", (x,), out, vjp)

    def row_masked_mean(self, x: Tensor, mask: np.ndarray) -> Tensor:
        """Per-row mean of the entries selected by a {0,1} mask: [B,T] -> [B]."""
        mask = np.asarray(mask, dtype=np.float64)
        if mask.shape != x.shape:
            raise ShapeError(f"row_masked_mean: mask {mask.shape} != x {x.shape}")
        counts = mask.sum(axis=-1)
        if np.any(counts == 0):
            raise ValueError("row_masked_mean: a row has no selected positions")
        out = (x.data * mask).sum(axis=-1) / counts

        def vjp(g, mask=mask, counts=counts):
            return (mask * (g / counts)[:, None],)

        return self._record("row_masked_mean", (x,), out, vjp)

    def token_xent(self, logits: Tensor, targets: np.ndarray, mask: np.ndarray) -> Tensor:
        """Mean masked next-token cross-entropy over [N, V] logits.

        Backward through the fused softmax + cross-entropy uses the
        closed form mask * (probs - onehot) / count.
        """
        targets = np.ascontiguousarray(targets, dtype=np.int64)
        mask = np.ascontiguousarray(mask, dtype=np.float64)
        if logits.data.ndim != 2:
            raise ShapeError(f"token_xent: logits must be 2-d, got {logits.shape}")
        if targets.shape != (logits.shape[0],) or mask.shape != (logits.shape[0],):
            raise ShapeError("token_xent: targets/mask must be [N] matching logits rows")
        count = mask.sum()
        if count == 0:
            raise ValueError("no supervised positions")
        if targets.min() < 0 or targets.max() >= logits.shape[1]:
            raise ShapeError("token_xent: target id outside vocabulary")
        nll_sum, probs = _kernels.softmax_xent_fwd(
            np.ascontiguousarray(logits.data), targets, mask
        )
        out = np.asarray(nll_sum / count)

        def vjp(g, probs=probs, targets=targets, mask=mask, count=count):
            return (_kernels.softmax_xent_bwd(probs, targets, mask, float(g) / count),)

        return self._record("token_xent", (logits,), out, vjp)

    def token_logprobs(self, logits: Tensor, targets: np.ndarray) -> Tensor:
        """Per-row log-probability of the target id: [N, V] -> [N]."""
        targets = np.ascontiguousarray(targets, dtype=np.int64)
        if targets.shape != (logits.shape[0],):
            raise ShapeError("token_logprobs: targets must be [N] matching logits rows")
        ones = np.ones(logits.shape[0], dtype=np.float64)
        _, probs = _kernels.softmax_xent_fwd(
            np.ascontiguousarray(logits.data), targets, ones
        )
        rows = np.arange(logits.shape[0])
        out = np.log(probs[rows, targets])

        def vjp(g, probs=probs, targets=targets, rows=rows):
            gl = -probs * g[:, None]
            gl[rows, targets] += g
            return (gl,)

        return self._record("token_logprobs", (logits,), out, vjp)

    def token_probs(self, logits: Tensor, targets: np.ndarray) -> Tensor:
        """Per-row probability of the target id: [N, V] -> [N]."""
        targets = np.ascontiguousarray(targets, dtype=np.int64)
        if targets.shape != (logits.shape[0],):
            raise ShapeError("token_probs: targets must be [N] matching logits rows")
        ones = np.ones(logits.shape[0], dtype=np.float64)
        _, probs = _kernels.softmax_xent_fwd(
            np.ascontiguousarray(logits.data), targets, ones
        )
        rows = np.arange(logits.shape[0])
        py = probs[rows, targets]

        def vjp(g, probs=probs, targets=targets, rows=rows, py=py):
            gl = -probs * (g * py)[:, None]
            gl[rows, targets] += g * py
            return (gl,)

        return self._record("token_probs", (logits,), py.copy(), vjp)

    def kl_from_ref(self, logits: Tensor, ref_probs: np.ndarray, mask: np.ndarray) -> Tensor:
        """Mean over masked positions of KL(ref || softmax(logits)).

        ``ref_probs`` is a constant [N, V] distribution per position.
        Gradient w.r.t. logits is mask * (probs - ref) / count.
        """
        ref_probs = np.asarray(ref_probs, dtype=np.float64)
        mask = np.asarray(mask, dtype=np.float64)
        if ref_probs.shape != logits.shape:
            raise ShapeError(f"kl_from_ref: ref {ref_probs.shape} != logits {logits.shape}")
        count = mask.sum()
        if count == 0:
            raise ValueError("kl_from_ref: empty mask")
        shift = logits.data - logits.data.max(axis=-1, keepdims=True)
        logz = np.log(np.exp(shift).sum(axis=-1, keepdims=True))
        logp = shift - logz
        probs = np.exp(logp)
        with np.errstate(divide="ignore", invalid="ignore"):
            plogq = np.where(ref_probs > 0, ref_probs * np.log(ref_probs), 0.0)
        per_pos = (plogq - ref_probs * logp).sum(axis=-1)
        out = np.asarray((per_pos * mask).sum() / count)

        def vjp(g, probs=probs, ref=ref_probs, mask=mask, count=count):
            return ((probs - ref) * (mask * (float(g) / count))[:, None],)

        return self._record("kl_from_ref", (logits,), out, vjp)


def forward(build: Callable, *leaves: Tensor) -> tuple[Tensor, Tape]:
    """Run ``build(tape, *leaves)`` on a fresh tape; returns (output, tape)."""
    tape = Tape()
    out = build(tape, *leaves)
    return out, tape


def backward(tape: Tape, seed=None) -> dict[int, np.ndarray]:
    """Reverse sweep from the tape's final output with the given seed."""
    return tape.backward(None, seed)


def finite_difference_check(
    loss_and_grad: Callable[[np.ndarray], tuple[float, np.ndarray]],
    params: np.ndarray,
    step: float = 1e-5,
    coords: np.ndarray | None = None,
) -> float:
    """Max relative error between an analytic gradient and central differences.

    ``loss_and_grad(theta)`` must be deterministic and return the scalar
    loss and its gradient w.r.t. the flat parameter vector. The error at
    each coordinate is |analytic - central| / (|central| + 1e-12); the
    max over the checked coordinates is returned. ``coords`` restricts the
    check to a subset of coordinates (default: all).
    """
    if step <= 0:
        raise ValueError("finite_difference_check: step must be positive")
    theta = np.asarray(params, dtype=np.float64).copy()
    base, grad = loss_and_grad(theta)
    if not np.isfinite(base):
        raise ValueError(f"finite_difference_check: non-finite loss {base!r}")
    if coords is None:
        coords = np.arange(theta.size)
    worst = 0.0
    for i in coords:
        old = theta[i]
        theta[i] = old + step
        up, _ = loss_and_grad(theta)
        theta[i] = old - step
        down, _ = loss_and_grad(theta)
        theta[i] = old
        if not (np.isfinite(up) and np.isfinite(down)):
            raise ValueError("finite_difference_check: non-finite perturbed loss")
        central = (up - down) / (2.0 * step)
        err = abs(grad[i] - central) / (abs(central) + 1e-12)
        if err > worst:
            worst = err
    return worst
