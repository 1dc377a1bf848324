"""Exact complex statevector simulation of small qubit registers.

Supports exactly what the quantum adapter needs: amplitude embedding of a
classical vector, RX rotations, CNOT entanglers, and analytic Pauli-Z
expectations. No sampling, no density matrices, no other gates.

Index convention: qubit 0 is the MOST significant bit of the basis-state
index, so ``amplitude_embed(e_k)`` lands on basis state ``|k>`` with the
bits of k read left to right. ``expect_z`` uses the same convention.

Gate kernels never build a dense 2^n x 2^n matrix; they reshape the
amplitude buffer to expose the target qubit's axis and update strided
pairs, O(2^n) per gate. The same kernels accept leading batch dimensions
(shape ``(..., 2^n)``) so independent states evolve in one vectorized
call; that batch axis is the intended scaling axis.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

ZERO_NORM_THRESHOLD = 1e-12


class ZeroNormInput(ValueError):
    """The vector's l2 norm is too small to embed as a quantum state."""


class DimensionMismatch(ValueError):
    """Input length does not match the embedding spec."""


class QubitOutOfRange(IndexError):
    """Qubit index outside [0, n_qubits)."""


class SelfTarget(ValueError):
    """CNOT control and target refer to the same qubit."""


@dataclass(frozen=True)
class StateVector:
    """An n-qubit pure state: 2^n complex amplitudes, unit l2 norm."""

    n_qubits: int
    amps: np.ndarray

    def __post_init__(self):
        if self.n_qubits < 1:
            raise ValueError("n_qubits must be >= 1")
        amps = np.ascontiguousarray(self.amps, dtype=np.complex128)
        object.__setattr__(self, "amps", amps)
        if amps.shape != (1 << self.n_qubits,):
            raise DimensionMismatch(
                f"expected {1 << self.n_qubits} amplitudes, got {amps.shape}"
            )

    @property
    def dim(self) -> int:
        return 1 << self.n_qubits

    def norm(self) -> float:
        return float(np.sqrt(np.sum(self.amps.real**2 + self.amps.imag**2)))


def basis_state(n_qubits: int, index: int) -> StateVector:
    """|index> on n_qubits qubits."""
    amps = np.zeros(1 << n_qubits, dtype=np.complex128)
    amps[index] = 1.0
    return StateVector(n_qubits, amps)


def n_qubits_for(dim: int) -> int:
    """Smallest n with 2^n >= dim."""
    if dim < 1:
        raise ValueError("dimension must be positive")
    return max(1, (dim - 1).bit_length())


@dataclass(frozen=True)
class EmbedSpec:
    """How a length-d real vector maps onto qubits (zero-padded to 2^n)."""

    input_dim: int
    n_qubits: int

    def __post_init__(self):
        if self.input_dim < 1:
            raise ValueError("input_dim must be positive")
        if (1 << self.n_qubits) < self.input_dim:
            raise DimensionMismatch(
                f"2^{self.n_qubits} < input_dim {self.input_dim}"
            )
        if self.input_dim > 1 and (1 << (self.n_qubits - 1)) >= self.input_dim:
            raise ValueError("n_qubits is not minimal for input_dim")

    @classmethod
    def for_dim(cls, input_dim: int) -> "EmbedSpec":
        return cls(input_dim, n_qubits_for(input_dim))


def normalize(x) -> np.ndarray:
    """x / ||x||_2. Raises ZeroNormInput for degenerate vectors."""
    x = np.asarray(x, dtype=np.float64)
    nrm = float(np.linalg.norm(x))
    if nrm <= ZERO_NORM_THRESHOLD:
        raise ZeroNormInput(f"l2 norm {nrm:.3e} <= {ZERO_NORM_THRESHOLD:.0e}")
    return x / nrm


def amplitude_embed(x, spec: EmbedSpec) -> StateVector:
    """Encode a real vector as the amplitudes of a 2^n-dimensional state.

    The vector is zero-padded to length 2^n and then normalized; since the
    padded entries are zero, the norm over the original entries is
    unchanged and the first d amplitudes equal x / ||x||_2 exactly.
    """
    x = np.asarray(x, dtype=np.float64)
    if x.shape != (spec.input_dim,):
        raise DimensionMismatch(
            f"expected length {spec.input_dim}, got shape {x.shape}"
        )
    padded = np.zeros(1 << spec.n_qubits, dtype=np.float64)
    padded[: spec.input_dim] = x
    return StateVector(spec.n_qubits, normalize(padded).astype(np.complex128))


# ---------------------------------------------------------------------------
# In-place kernels over privately owned buffers. `amps` has shape
# (..., 2^n_qubits); leading axes are independent states. `theta` for the
# RX kernel may be a scalar or an array broadcastable over the leading axes.
# ---------------------------------------------------------------------------


def _check_qubit(n_qubits: int, qubit: int):
    if not 0 <= qubit < n_qubits:
        raise QubitOutOfRange(f"qubit {qubit} out of range for {n_qubits} qubits")


def rx_inplace(amps: np.ndarray, n_qubits: int, qubit: int, theta, scratch=None) -> None:
    """Apply RX(theta) = [[cos t/2, -i sin t/2], [-i sin t/2, cos t/2]] on `qubit`.

    `theta` may be a scalar, or an array broadcastable over the leading
    (batch) axes of `amps` for per-state angles. `scratch`, when given, is
    a complex buffer of at least amps.size entries reused across calls;
    the kernel then performs no allocations (hot path for the shift-rule
    mega-batches).
    """
    _check_qubit(n_qubits, qubit)
    lead = amps.shape[:-1]
    view = amps.reshape(lead + (1 << qubit, 2, 1 << (n_qubits - qubit - 1)))
    if np.ndim(theta) == 0:
        c = math.cos(theta / 2.0)
        ms = complex(0.0, -math.sin(theta / 2.0))
    else:
        # two trailing singleton axes line up with the exposed qubit axes
        t = np.asarray(theta, dtype=np.float64)[..., None, None]
        c = np.cos(t / 2.0)
        ms = -1j * np.sin(t / 2.0)
    v0 = view[..., 0, :]
    v1 = view[..., 1, :]
    half = amps.size // 2
    if scratch is None:
        scratch = np.empty(2 * half, dtype=np.complex128)
    s0 = scratch[:half].reshape(v0.shape)
    s1 = scratch[half : 2 * half].reshape(v0.shape)
    # new0 = c*v0 + ms*v1, new1 = c*v1 + ms*v0, all via out= to avoid temps
    np.multiply(v1, ms, out=s0)
    np.multiply(v0, c, out=s1)
    s0 += s1
    np.multiply(v0, ms, out=s1)
    v1 *= c
    v1 += s1
    v0[:] = s0


def cnot_inplace(amps: np.ndarray, n_qubits: int, control: int, target: int) -> None:
    """Swap the target bit of every basis state whose control bit is 1."""
    _check_qubit(n_qubits, control)
    _check_qubit(n_qubits, target)
    if control == target:
        raise SelfTarget(f"control == target == {control}")
    lead = amps.shape[:-1]
    lo, hi = min(control, target), max(control, target)
    view = amps.reshape(
        lead
        + (1 << lo, 2, 1 << (hi - lo - 1), 2, 1 << (n_qubits - hi - 1))
    )
    if control < target:
        tmp = view[..., 1, :, 0, :].copy()
        view[..., 1, :, 0, :] = view[..., 1, :, 1, :]
        view[..., 1, :, 1, :] = tmp
    else:
        tmp = view[..., 0, :, 1, :].copy()
        view[..., 0, :, 1, :] = view[..., 1, :, 1, :]
        view[..., 1, :, 1, :] = tmp


def expect_z_batch(amps: np.ndarray, n_qubits: int) -> np.ndarray:
    """Pauli-Z expectation of every qubit for a batch of states.

    Returns shape ``lead + (n_qubits,)`` where ``lead = amps.shape[:-1]``.
    Probabilities are computed once; each qubit's marginal is a strided sum.
    """
    lead = amps.shape[:-1]
    probs = amps.real**2 + amps.imag**2
    out = np.empty(lead + (n_qubits,), dtype=np.float64)
    for j in range(n_qubits):
        view = probs.reshape(lead + (1 << j, 2, 1 << (n_qubits - j - 1)))
        p0 = view[..., 0, :].sum(axis=(-2, -1))
        p1 = view[..., 1, :].sum(axis=(-2, -1))
        out[..., j] = p0 - p1
    return out


# ---------------------------------------------------------------------------
# Public single-state operations: take a state, return a new state.
# ---------------------------------------------------------------------------


def apply_rx(state: StateVector, qubit: int, theta: float) -> StateVector:
    """RX rotation by `theta` radians on `qubit`; norm preserved."""
    amps = state.amps.copy()
    rx_inplace(amps, state.n_qubits, qubit, float(theta))
    return StateVector(state.n_qubits, amps)


def apply_cnot(state: StateVector, control: int, target: int) -> StateVector:
    """CNOT: |a>_c |b>_t -> |a>_c |a XOR b>_t. Exact amplitude permutation."""
    amps = state.amps.copy()
    cnot_inplace(amps, state.n_qubits, control, target)
    return StateVector(state.n_qubits, amps)


def expect_z(state: StateVector, qubit: int) -> float:
    """<psi| Z_qubit |psi>: +|a_k|^2 where bit is 0, -|a_k|^2 where 1."""
    _check_qubit(state.n_qubits, qubit)
    probs = state.amps.real**2 + state.amps.imag**2
    view = probs.reshape(1 << qubit, 2, -1)
    return float(view[:, 0, :].sum() - view[:, 1, :].sum())


def expect_z_all(state: StateVector) -> np.ndarray:
    """Vector of <Z_j> for j = 0 .. n_qubits-1."""
    return expect_z_batch(state.amps, state.n_qubits)
