"""The five fine-tuning strategies behind one interface.

Each method owns a small set of trainable tensors and a forward rule that
maps a frozen hidden activation to the adapted activation:

  * full   -- no adapter; the backbone itself is unfrozen.
  * lora   -- low-rank weight update, delta_W = A B^T applied next to a
              frozen matrix.
  * sora   -- lora with a trainable gate g scaling the rank-1 components,
              sparsified by a proximal (soft-threshold) step.
  * prefix -- trainable rows prepended to each layer's input sequence.
  * qaa    -- the quantum adapter: normalize the activation, embed it as
              amplitudes, run the parameterized circuit, measure all-qubit
              Z expectations, and up-project back as a residual.

Weight-space adapters (lora/sora) attach to specific backbone matrices;
the quantum adapter attaches to block-output activations, so its size is
(depth * n_qubits + n_qubits * d) per site regardless of the site's
matrix shape. `count_trainable` audits all of this analytically and is
asserted against the literally instantiated scalar counts in the tests.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from . import circuits, tensor
from .circuits import CircuitSpec
from .qsim import EmbedSpec, ZERO_NORM_THRESHOLD, n_qubits_for
from .tensor import QuantumNode, Tensor

log = logging.getLogger(__name__)

METHODS = ("full", "lora", "sora", "prefix", "qaa")


class UnknownMethod(ValueError):
    """Method tag is not one of full/lora/sora/prefix/qaa."""


def _check_method(method: str) -> str:
    if method not in METHODS:
        raise UnknownMethod(
            f"unknown method {method!r}; expected one of {', '.join(METHODS)}"
        )
    return method


# ---------------------------------------------------------------------------
# adapter state types
# ---------------------------------------------------------------------------


@dataclass
class QaaAdapter:
    """Amplitude embedding -> PQC -> Z measurement -> up-projection."""

    embed: EmbedSpec
    circuit: CircuitSpec
    theta: Tensor  # (depth * n_qubits,)
    w_up: Tensor  # (n_qubits, d), zero-initialized so the residual starts at 0

    @classmethod
    def init(cls, d: int, depth: int, rng: np.random.Generator) -> "QaaAdapter":
        embed = EmbedSpec.for_dim(d)
        circuit = CircuitSpec(embed.n_qubits, depth)
        theta = Tensor(
            rng.uniform(-0.1, 0.1, size=circuit.n_params), requires_grad=True
        )
        w_up = Tensor(np.zeros((embed.n_qubits, d)), requires_grad=True)
        return cls(embed, circuit, theta, w_up)

    def tensors(self) -> list[tuple[str, Tensor]]:
        return [("theta", self.theta), ("w_up", self.w_up)]


@dataclass
class LoraAdapter:
    """delta_W = A B^T with A (out, r) gaussian and B (in, r) zeros."""

    a: Tensor
    b: Tensor
    rank: int

    @classmethod
    def init(
        cls, in_dim: int, out_dim: int, rank: int, rng: np.random.Generator
    ) -> "LoraAdapter":
        a = Tensor(rng.normal(0.0, 0.02, size=(out_dim, rank)), requires_grad=True)
        b = Tensor(np.zeros((in_dim, rank)), requires_grad=True)
        return cls(a, b, rank)

    def tensors(self) -> list[tuple[str, Tensor]]:
        return [("a", self.a), ("b", self.b)]


@dataclass
class SoraAdapter:
    """LoRA plus a gate vector g; zeros in g prune rank-1 components."""

    a: Tensor
    b: Tensor
    g: Tensor  # (rank,)
    rank: int
    sparsity: float  # the l1 strength lambda used by the proximal step

    @classmethod
    def init(
        cls,
        in_dim: int,
        out_dim: int,
        rank: int,
        sparsity: float,
        rng: np.random.Generator,
    ) -> "SoraAdapter":
        a = Tensor(rng.normal(0.0, 0.02, size=(out_dim, rank)), requires_grad=True)
        b = Tensor(np.zeros((in_dim, rank)), requires_grad=True)
        g = Tensor(np.ones(rank), requires_grad=True)
        return cls(a, b, g, rank, sparsity)

    def effective_rank(self) -> int:
        return int(np.count_nonzero(self.g.data))

    def tensors(self) -> list[tuple[str, Tensor]]:
        return [("a", self.a), ("b", self.b), ("g", self.g)]


@dataclass
class PrefixAdapter:
    """l trainable d-vectors prepended to one layer's input sequence."""

    p: Tensor  # (l, d)

    @classmethod
    def init(cls, length: int, d: int, rng: np.random.Generator) -> "PrefixAdapter":
        return cls(Tensor(rng.normal(0.0, 0.02, size=(length, d)), requires_grad=True))

    @property
    def length(self) -> int:
        return self.p.shape[0]

    def tensors(self) -> list[tuple[str, Tensor]]:
        return [("p", self.p)]


@dataclass
class FullTuning:
    """Marker: no adapter state; every backbone parameter is trainable."""


# ---------------------------------------------------------------------------
# forward rules
# ---------------------------------------------------------------------------


def _as_rows(h: Tensor) -> tuple[Tensor, tuple[int, ...]]:
    if h.data.ndim == 1:
        return tensor.reshape(h, (1, h.shape[0])), h.shape
    if h.data.ndim == 2:
        return h, h.shape
    return tensor.reshape(h, (-1, h.shape[-1])), h.shape


def qaa_quantum_outputs(
    adapter: QaaAdapter, x: np.ndarray, need_jacobian: bool
) -> tuple[np.ndarray, np.ndarray | None, int]:
    """Embed rows of x, run the circuit, measure; optionally the Jacobian.

    Rows with l2 norm at or below the embedding threshold skip the quantum
    branch entirely: their z (and Jacobian) rows are exactly zero, so the
    residual leaves those activations untouched and no gradient flows.
    Returns (z, jac_or_None, n_skipped).
    """
    d = adapter.embed.input_dim
    n = adapter.embed.n_qubits
    norms = np.linalg.norm(x, axis=-1)
    ok = norms > ZERO_NORM_THRESHOLD
    skipped = int(x.shape[0] - ok.sum())
    if skipped:
        log.debug("qaa: skipped %d zero-norm activation(s)", skipped)

    states = np.zeros((x.shape[0], 1 << n), dtype=np.complex128)
    safe = np.where(ok, norms, 1.0)
    states[:, :d] = np.where(ok[:, None], x / safe[:, None], 0.0)

    z = circuits.expectations_batch(adapter.circuit, adapter.theta.data, states)
    z[~ok] = 0.0
    jac = None
    if need_jacobian:
        jac = circuits.jacobian_batch(adapter.circuit, adapter.theta.data, states)
        jac[~ok] = 0.0
    return z, jac, skipped


def qaa_forward(adapter: QaaAdapter, h: Tensor) -> Tensor:
    """h + W^T z where z are the circuit's Z expectations for embed(h).

    Accepts shape (d,) or (..., d); each trailing-axis row is one
    activation. The parameter-shift Jacobian is computed alongside the
    forward pass and cached on the tape's QuantumNode, so backward never
    re-runs the circuit.
    """
    rows, orig_shape = _as_rows(h)
    x = rows.data
    need_grad = tensor.grad_enabled() and adapter.theta.requires_grad
    z, jac, _ = qaa_quantum_outputs(adapter, x, need_jacobian=need_grad)
    if need_grad:
        z_node = tensor.quantum_expectations(adapter.theta, QuantumNode(x, z, jac))
    else:
        z_node = Tensor(z)
    delta = tensor.matmul(z_node, adapter.w_up)  # (N, n) @ (n, d)
    out = tensor.add(rows, delta)
    return out if out.shape == orig_shape else tensor.reshape(out, orig_shape)


def lora_delta(adapter: LoraAdapter, x: Tensor) -> Tensor:
    """(x B) A^T: the low-rank update applied without materializing A B^T."""
    inner = tensor.matmul(x, adapter.b)  # (..., r)
    return tensor.matmul(inner, tensor.transpose(adapter.a, (1, 0)))


def sora_delta(adapter: SoraAdapter, x: Tensor) -> Tensor:
    """(x B) gated by g, then A^T; zero gate entries prune components."""
    inner = tensor.mul(tensor.matmul(x, adapter.b), adapter.g)
    return tensor.matmul(inner, tensor.transpose(adapter.a, (1, 0)))


def _apply_with_frozen(x: Tensor, w_frozen: Tensor, delta: Tensor) -> Tensor:
    base = tensor.matmul(x, tensor.transpose(w_frozen, (1, 0)))
    return tensor.add(base, delta)


def lora_forward(adapter: LoraAdapter, h: Tensor, w_frozen: Tensor) -> Tensor:
    """(W_frozen + A B^T) h, with W_frozen in (out, in) orientation."""
    rows, orig = _as_rows(h)
    out = _apply_with_frozen(rows, w_frozen, lora_delta(adapter, rows))
    target = orig[:-1] + (w_frozen.shape[0],)
    return out if out.shape == target else tensor.reshape(out, target)


def sora_forward(adapter: SoraAdapter, h: Tensor, w_frozen: Tensor) -> Tensor:
    """(W_frozen + A diag(g) B^T) h, with W_frozen in (out, in) orientation."""
    rows, orig = _as_rows(h)
    out = _apply_with_frozen(rows, w_frozen, sora_delta(adapter, rows))
    target = orig[:-1] + (w_frozen.shape[0],)
    return out if out.shape == target else tensor.reshape(out, target)


def prefix_forward(adapter: PrefixAdapter, token_states: Tensor) -> Tensor:
    """[P; token_states] along the sequence axis; (T, d) or (B, T, d)."""
    if adapter.length == 0:
        return token_states
    if adapter.p.shape[-1] != token_states.shape[-1]:
        raise tensor.ShapeMismatch(
            f"prefix width {adapter.p.shape} vs states {token_states.shape}"
        )
    if token_states.data.ndim == 2:
        return tensor.concat([adapter.p, token_states], axis=0)
    tiled = tensor.tile_leading(adapter.p, token_states.shape[0])
    return tensor.concat([tiled, token_states], axis=1)


def sora_proximal_step(g, grad_g, eta: float, sparsity: float) -> np.ndarray:
    """Proximal gradient step for the l1-penalized gate.

    g' = soft_threshold(g - eta * grad_g, eta * sparsity) with
    soft_threshold(v, t) = sign(v) * max(|v| - t, 0) elementwise.
    """
    if eta <= 0:
        raise ValueError("eta must be positive")
    if sparsity < 0:
        raise ValueError("sparsity must be non-negative")
    v = np.asarray(g, dtype=np.float64) - eta * np.asarray(grad_g, dtype=np.float64)
    t = eta * sparsity
    return np.sign(v) * np.maximum(np.abs(v) - t, 0.0)


# ---------------------------------------------------------------------------
# per-model adapter sets
# ---------------------------------------------------------------------------


@dataclass
class AdapterSet:
    """All adapter state for one run: per-layer sites in a fixed order."""

    method: str
    attn_sites: list  # one entry per layer (None for full/prefix)
    ffn_sites: list
    prefixes: list[PrefixAdapter]  # one per layer (empty unless prefix)

    @property
    def prefix_len(self) -> int:
        return self.prefixes[0].length if self.prefixes else 0

    def named_tensors(self) -> list[tuple[str, Tensor]]:
        out = []
        for i, (att, ffn) in enumerate(zip(self.attn_sites, self.ffn_sites)):
            for site_name, site in (("attn", att), ("ffn", ffn)):
                if site is not None:
                    for field_name, t in site.tensors():
                        out.append(
                            (f"adapter.{self.method}.layer{i}.{site_name}.{field_name}", t)
                        )
        for i, pre in enumerate(self.prefixes):
            out.append((f"adapter.{self.method}.layer{i}.p", pre.p))
        return out

    def trainable_tensors(self) -> list[Tensor]:
        return [t for _, t in self.named_tensors()]

    def trainable_count(self) -> int:
        return sum(t.size for t in self.trainable_tensors())


def init_adapters(
    method: str,
    arch,
    *,
    rank: int = 4,
    prefix_len: int = 4,
    depth: int = 2,
    sora_lambda: float = 1e-3,
    rng: np.random.Generator,
) -> AdapterSet:
    """Build fresh adapter state for every insertion point of `arch`.

    Weight sites per layer: the attention output projection (d -> d) and
    the feed-forward down-projection (ffn_mult*d -> d). Draws happen in a
    fixed (layer, site, field) order so a seed pins the initialization.
    """
    _check_method(method)
    d = arch.d_model
    d_ff = arch.d_model * arch.ffn_mult
    attn_sites: list = []
    ffn_sites: list = []
    prefixes: list[PrefixAdapter] = []
    for _ in range(arch.n_layers):
        if method == "qaa":
            attn_sites.append(QaaAdapter.init(d, depth, rng))
            ffn_sites.append(QaaAdapter.init(d, depth, rng))
        elif method == "lora":
            attn_sites.append(LoraAdapter.init(d, d, rank, rng))
            ffn_sites.append(LoraAdapter.init(d_ff, d, rank, rng))
        elif method == "sora":
            attn_sites.append(SoraAdapter.init(d, d, rank, sora_lambda, rng))
            ffn_sites.append(SoraAdapter.init(d_ff, d, rank, sora_lambda, rng))
        else:
            attn_sites.append(None)
            ffn_sites.append(None)
        if method == "prefix":
            prefixes.append(PrefixAdapter.init(prefix_len, d, rng))
    return AdapterSet(method, attn_sites, ffn_sites, prefixes)


# ---------------------------------------------------------------------------
# analytic parameter audit
# ---------------------------------------------------------------------------


def _site_shapes(d: int, ffn_mult: int, multiplicity: int) -> list[tuple[int, int]]:
    """(in, out) of each adapted matrix per layer; multiplicity 1 keeps only
    the square attention-output site (the configuration behind published
    per-layer counts), 2 adds the feed-forward down-projection."""
    if multiplicity not in (1, 2):
        raise ValueError("multiplicity must be 1 or 2")
    shapes = [(d, d)]
    if multiplicity == 2:
        shapes.append((d * ffn_mult, d))
    return shapes


def count_trainable(
    method: str,
    arch,
    *,
    rank: int = 4,
    prefix_len: int = 4,
    depth: int = 2,
    multiplicity: int = 2,
    total_params: int | None = None,
) -> tuple[int, float]:
    """Trainable-scalar count and its ratio to the full backbone.

    LoRA counts (in + out) * r per adapted matrix, which reduces to the
    familiar 2*d*r per site when the matrix is square; SoRA adds the r
    gate entries per site; prefix is l*d per layer; the quantum adapter is
    depth*n + n*d per site with n the qubit count for d. `total_params`
    overrides the analytic backbone count (used by presets whose published
    totals include structure this toy backbone does not model).
    """
    _check_method(method)
    if total_params is None:
        from .model import backbone_param_count

        total_params = backbone_param_count(arch)
    d = arch.d_model
    layers = arch.n_layers
    sites = _site_shapes(d, arch.ffn_mult, multiplicity)

    if method == "full":
        count = total_params
    elif method == "lora":
        count = sum((i + o) * rank for i, o in sites) * layers
    elif method == "sora":
        count = sum((i + o) * rank + rank for i, o in sites) * layers
    elif method == "prefix":
        count = prefix_len * d * layers
    else:  # qaa
        n = n_qubits_for(d)
        count = (depth * n + n * d) * layers * len(sites)
    return count, count / total_params
