"""Minimal dense-tensor reverse-mode autodiff over float64 numpy arrays.

Every operation records its parents and an adjoint closure on the output;
the tape is this implicit graph, put into topological order when
``backward`` runs. Gradients only ever accumulate into tensors created
with ``requires_grad=True`` (and intermediates that depend on one), so
frozen parameters stay byte-identical no matter how many steps run.

Broadcasting is restricted to leading batch axes: elementwise ops accept
equal shapes or a right-hand side whose shape is a suffix of the left's
(the bias / row-vector case). Matmul follows numpy stacking rules with a
2-D weight or equal leading dims.

The quantum hook (`quantum_expectations`) injects externally computed
Pauli-Z expectations and their parameter-shift Jacobian into the graph:
backward routes the upstream gradient through J^T into the circuit angles
and deliberately stops at the embedded activation.
"""
from __future__ import annotations

import contextlib

import numpy as np
from scipy.special import erf

_SQRT2 = np.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / np.sqrt(2.0 * np.pi)

_GRAD_ENABLED = True


class ShapeMismatch(ValueError):
    """Operands have incompatible shapes for the requested op."""


class DisconnectedGraph(ValueError):
    """backward() called on a value with no trainable ancestors."""


class AllMasked(ValueError):
    """Loss mask excludes every position."""


@contextlib.contextmanager
def no_grad():
    """Disable tape recording inside the block (forward values unchanged)."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


def grad_enabled() -> bool:
    return _GRAD_ENABLED


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        self._parents: tuple[Tensor, ...] = ()
        self._backward = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def accumulate(self, g: np.ndarray) -> None:
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        self.grad += g

    def __repr__(self):
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"


def _make(data: np.ndarray, parents: tuple[Tensor, ...], backward_fn) -> Tensor:
    out = Tensor(data)
    if _GRAD_ENABLED and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._backward = backward_fn
    return out


class Tape:
    """Topologically ordered record of the ops reachable from a root."""

    def __init__(self, nodes: list[Tensor]):
        self.nodes = nodes

    @classmethod
    def trace(cls, root: Tensor) -> "Tape":
        order: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(root, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if id(p) not in seen:
                    stack.append((p, False))
        return cls(order)

    def backprop(self, root: Tensor) -> None:
        # non-leaf grads are scratch space: reset them so replaying the
        # same tape always yields identical leaf gradients
        for node in self.nodes:
            if node._parents:
                node.grad = None
        root.grad = np.ones_like(root.data)
        for node in reversed(self.nodes):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(leaf) into every trainable leaf's .grad."""
    if loss.data.ndim != 0:
        raise ShapeMismatch("backward expects a scalar loss")
    if not loss.requires_grad:
        raise DisconnectedGraph("loss does not depend on any trainable tensor")
    Tape.trace(loss).backprop(loss)


# ---------------------------------------------------------------------------
# elementwise / shape ops
# ---------------------------------------------------------------------------


def _suffix_axes(big: tuple[int, ...], small: tuple[int, ...]) -> tuple[int, ...]:
    """Axes of `big` that were broadcast when adding a `small` suffix operand."""
    if small == big:
        return ()
    if small != big[len(big) - len(small):]:
        raise ShapeMismatch(f"shape {small} is not a suffix of {big}")
    return tuple(range(len(big) - len(small)))


def add(a: Tensor, b: Tensor) -> Tensor:
    axes = _suffix_axes(a.shape, b.shape)
    out_data = a.data + b.data

    def backward_fn(g):
        if a.requires_grad:
            a.accumulate(g)
        if b.requires_grad:
            b.accumulate(g.sum(axis=axes) if axes else g)

    return _make(out_data, (a, b), backward_fn)


def mul(a: Tensor, b: Tensor) -> Tensor:
    axes = _suffix_axes(a.shape, b.shape)
    out_data = a.data * b.data

    def backward_fn(g):
        if a.requires_grad:
            a.accumulate(g * b.data)
        if b.requires_grad:
            gb = g * a.data
            b.accumulate(gb.sum(axis=axes) if axes else gb)

    return _make(out_data, (a, b), backward_fn)


def scale(a: Tensor, k: float) -> Tensor:
    k = float(k)

    def backward_fn(g):
        if a.requires_grad:
            a.accumulate(g * k)

    return _make(a.data * k, (a,), backward_fn)


def add_const(a: Tensor, c) -> Tensor:
    """Add a non-trainable constant (e.g. an additive attention mask)."""
    c = np.asarray(c, dtype=np.float64)

    def backward_fn(g):
        if a.requires_grad:
            a.accumulate(g)

    return _make(a.data + c, (a,), backward_fn)


def reshape(a: Tensor, shape: tuple[int, ...]) -> Tensor:
    old = a.shape

    def backward_fn(g):
        if a.requires_grad:
            a.accumulate(g.reshape(old))

    return _make(a.data.reshape(shape), (a,), backward_fn)


def transpose(a: Tensor, axes: tuple[int, ...]) -> Tensor:
    inv = np.argsort(axes)

    def backward_fn(g):
        if a.requires_grad:
            a.accumulate(g.transpose(inv))

    return _make(a.data.transpose(axes), (a,), backward_fn)


def concat(tensors: list[Tensor], axis: int) -> Tensor:
    sizes = [t.shape[axis] for t in tensors]
    offsets = np.cumsum([0] + sizes)

    def backward_fn(g):
        for t, lo, hi in zip(tensors, offsets[:-1], offsets[1:]):
            if t.requires_grad:
                idx = [slice(None)] * g.ndim
                idx[axis] = slice(lo, hi)
                t.accumulate(g[tuple(idx)])

    return _make(
        np.concatenate([t.data for t in tensors], axis=axis),
        tuple(tensors),
        backward_fn,
    )


def narrow(a: Tensor, axis: int, start: int, length: int) -> Tensor:
    """Contiguous slice [start, start+length) along `axis`."""
    idx = [slice(None)] * a.data.ndim
    idx[axis] = slice(start, start + length)
    idx = tuple(idx)

    def backward_fn(g):
        if a.requires_grad:
            full = np.zeros_like(a.data)
            full[idx] = g
            a.accumulate(full)

    return _make(a.data[idx].copy(), (a,), backward_fn)


def tile_leading(a: Tensor, reps: int) -> Tensor:
    """Repeat `a` along a new leading axis; backward sums over it."""

    def backward_fn(g):
        if a.requires_grad:
            a.accumulate(g.sum(axis=0))

    return _make(
        np.broadcast_to(a.data, (reps,) + a.shape).copy(), (a,), backward_fn
    )


def tsum(a: Tensor) -> Tensor:
    """Sum of all entries, as a scalar tensor."""
    shape = a.shape

    def backward_fn(g):
        if a.requires_grad:
            a.accumulate(np.broadcast_to(g, shape).copy())

    return _make(np.asarray(a.data.sum()), (a,), backward_fn)


# ---------------------------------------------------------------------------
# linear algebra and neural-net primitives
# ---------------------------------------------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """`a @ b`: 2-D weight on the right, or stacked matmul with equal leads."""
    if a.data.ndim < 2 or b.data.ndim < 2:
        raise ShapeMismatch("matmul operands need at least 2 dims")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeMismatch(f"inner dims differ: {a.shape} @ {b.shape}")
    if b.data.ndim != 2 and a.shape[:-2] != b.shape[:-2]:
        raise ShapeMismatch(f"leading dims differ: {a.shape} @ {b.shape}")
    out_data = a.data @ b.data

    def backward_fn(g):
        if a.requires_grad:
            a.accumulate(g @ np.swapaxes(b.data, -1, -2))
        if b.requires_grad:
            if b.data.ndim == 2 and a.data.ndim > 2:
                a2 = a.data.reshape(-1, a.shape[-1])
                g2 = g.reshape(-1, g.shape[-1])
                b.accumulate(a2.T @ g2)
            else:
                gb = np.swapaxes(a.data, -1, -2) @ g
                b.accumulate(gb)

    return _make(out_data, (a, b), backward_fn)


def softmax(a: Tensor, axis: int = -1) -> Tensor:
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    p = e / e.sum(axis=axis, keepdims=True)

    def backward_fn(g):
        if a.requires_grad:
            inner = (g * p).sum(axis=axis, keepdims=True)
            a.accumulate(p * (g - inner))

    return _make(p, (a,), backward_fn)


def layer_norm(a: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize over the last axis, then scale and shift."""
    d = a.shape[-1]
    if gamma.shape != (d,) or beta.shape != (d,):
        raise ShapeMismatch("gamma/beta must match the last axis")
    mu = a.data.mean(axis=-1, keepdims=True)
    xc = a.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv

    def backward_fn(g):
        if gamma.requires_grad:
            gamma.accumulate((g * xhat).reshape(-1, d).sum(axis=0))
        if beta.requires_grad:
            beta.accumulate(g.reshape(-1, d).sum(axis=0))
        if a.requires_grad:
            gx = g * gamma.data
            a.accumulate(
                inv
                * (
                    gx
                    - gx.mean(axis=-1, keepdims=True)
                    - xhat * (gx * xhat).mean(axis=-1, keepdims=True)
                )
            )

    return _make(xhat * gamma.data + beta.data, (a, gamma, beta), backward_fn)


def gelu(a: Tensor) -> Tensor:
    """Exact Gaussian-error-linear unit, x * Phi(x)."""
    cdf = 0.5 * (1.0 + erf(a.data / _SQRT2))
    pdf = _INV_SQRT_2PI * np.exp(-0.5 * a.data * a.data)

    def backward_fn(g):
        if a.requires_grad:
            a.accumulate(g * (cdf + a.data * pdf))

    return _make(a.data * cdf, (a,), backward_fn)


def embedding_lookup(table: Tensor, ids: np.ndarray) -> Tensor:
    ids = np.asarray(ids)
    if ids.min(initial=0) < 0 or ids.max(initial=0) >= table.shape[0]:
        raise ShapeMismatch("token id out of table range")

    def backward_fn(g):
        if table.requires_grad:
            acc = np.zeros_like(table.data)
            np.add.at(acc, ids.reshape(-1), g.reshape(-1, table.shape[-1]))
            table.accumulate(acc)

    return _make(table.data[ids], (table,), backward_fn)


def cross_entropy(logits: Tensor, targets: np.ndarray, mask: np.ndarray) -> Tensor:
    """Mean negative log-likelihood over positions where `mask` is true.

    `logits` has shape (..., vocab); `targets` and `mask` share the leading
    shape. Numerically stable via the log-sum-exp shift.
    """
    targets = np.asarray(targets)
    mask = np.asarray(mask, dtype=bool)
    if targets.shape != logits.shape[:-1] or mask.shape != targets.shape:
        raise ShapeMismatch(
            f"targets/mask {targets.shape}/{mask.shape} vs logits {logits.shape}"
        )
    if not mask.any():
        raise AllMasked("mask excludes every position")

    flat = logits.data.reshape(-1, logits.shape[-1])
    tflat = targets.reshape(-1)
    mflat = mask.reshape(-1)
    m = flat.max(axis=-1, keepdims=True)
    lse = m[:, 0] + np.log(np.exp(flat - m).sum(axis=-1))
    nll = lse - flat[np.arange(flat.shape[0]), tflat]
    count = int(mflat.sum())
    loss = nll[mflat].sum() / count

    def backward_fn(g):
        if logits.requires_grad:
            p = np.exp(flat - m)
            p /= p.sum(axis=-1, keepdims=True)
            p[np.arange(flat.shape[0]), tflat] -= 1.0
            p[~mflat] = 0.0
            logits.accumulate((g * p / count).reshape(logits.shape))

    return _make(np.asarray(loss), (logits,), backward_fn)


# ---------------------------------------------------------------------------
# quantum hook
# ---------------------------------------------------------------------------


class QuantumNode:
    """Per-step cache of one quantum evaluation: activations, expectations,
    and the parameter-shift Jacobian. Built once in the forward pass and
    replayed by backward; nothing is recomputed."""

    __slots__ = ("x", "z", "jac")

    def __init__(self, x: np.ndarray, z: np.ndarray, jac: np.ndarray):
        self.x = x
        self.z = z
        self.jac = jac


def quantum_expectations(theta: Tensor, node: QuantumNode) -> Tensor:
    """Wrap cached circuit outputs as a graph node differentiable in theta.

    Output data is ``node.z`` with shape (..., n). Backward contracts the
    upstream gradient with the cached Jacobian, d(loss)/d(theta) =
    sum_rows J_row^T g_row, and writes nothing to the embedded activation:
    gradient flow into the quantum branch's input is stopped by design
    (the surrounding residual connection carries earlier-layer gradients).
    """
    p = theta.shape[0] if theta.data.ndim else theta.size
    if node.jac.shape[-1] != p or node.jac.shape[:-1] != node.z.shape:
        raise ShapeMismatch(
            f"jacobian {node.jac.shape} vs z {node.z.shape} and theta {theta.shape}"
        )

    def backward_fn(g):
        if theta.requires_grad:
            theta.accumulate(
                np.einsum("...np,...n->p", node.jac, g, optimize=True)
            )

    return _make(node.z, (theta,), backward_fn)
