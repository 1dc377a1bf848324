"""Parameterized quantum circuits and their parameter-shift gradients.

A circuit is `depth` repetitions of one fixed layer: an RX rotation on
every qubit (each with its own trainable angle) followed by the linear
CNOT chain (0,1), (1,2), ..., (n-2, n-1). Angles are stored layer-major:
``values[layer * n_qubits + qubit]``.

The Jacobian of all Pauli-Z expectations with respect to all angles uses
the parameter-shift rule

    dz_i/dtheta_j = (z_i(theta_j + pi/2) - z_i(theta_j - pi/2)) / 2,

which is exact for RX gates: exactly 2 * n_params shifted executions, each
yielding all n_qubits observables. Shifted evaluations are independent;
here they run as one vectorized batch with a per-row angle table, reduced
in fixed parameter order so results are bit-reproducible.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .qsim import StateVector, cnot_inplace, expect_z_batch, rx_inplace


class ShapeMismatch(ValueError):
    """Circuit, parameters, and input state disagree on sizes."""


@dataclass(frozen=True)
class CircuitSpec:
    """Layout of the PQC: `depth` layers of per-qubit RX + CNOT chain."""

    n_qubits: int
    depth: int

    def __post_init__(self):
        if self.n_qubits < 1 or self.depth < 1:
            raise ValueError("n_qubits and depth must be positive")

    @property
    def n_params(self) -> int:
        return self.depth * self.n_qubits

    def cnot_pairs(self) -> list[tuple[int, int]]:
        return [(j, j + 1) for j in range(self.n_qubits - 1)]


@dataclass(frozen=True)
class ParamVector:
    """Trainable angles in radians, layer-major then qubit-major."""

    values: np.ndarray

    def __post_init__(self):
        values = np.ascontiguousarray(self.values, dtype=np.float64)
        object.__setattr__(self, "values", values)
        if values.ndim != 1:
            raise ShapeMismatch("parameter vector must be one-dimensional")
        if not np.all(np.isfinite(values)):
            raise ValueError("parameter vector contains NaN or Inf")

    def __len__(self) -> int:
        return len(self.values)


@dataclass
class ExecutionCounter:
    """Counts single-state circuit executions (batch runs count each row)."""

    forward_states: int = 0
    shift_states: int = 0

    def reset(self) -> None:
        self.forward_states = 0
        self.shift_states = 0

    @property
    def total(self) -> int:
        return self.forward_states + self.shift_states


EXECUTIONS = ExecutionCounter()


def _param_values(params) -> np.ndarray:
    values = params.values if isinstance(params, ParamVector) else np.asarray(
        params, dtype=np.float64
    )
    return values


def _check(spec: CircuitSpec, values: np.ndarray, state_dim: int):
    if values.shape[-1] != spec.n_params:
        raise ShapeMismatch(
            f"expected {spec.n_params} parameters, got {values.shape[-1]}"
        )
    if state_dim != (1 << spec.n_qubits):
        raise ShapeMismatch(
            f"state dimension {state_dim} != 2^{spec.n_qubits}"
        )


def _evolve_inplace(spec: CircuitSpec, values: np.ndarray, amps: np.ndarray) -> None:
    """Run the circuit over a privately owned buffer of shape (..., 2^n).

    `values` is either (n_params,) applied to every state in the batch, or
    (..., n_params) with per-row angles matching the leading axes of `amps`.
    """
    n = spec.n_qubits
    per_row = values.ndim > 1
    scratch = np.empty(amps.size, dtype=np.complex128)
    for layer in range(spec.depth):
        base = layer * n
        for q in range(n):
            theta = values[..., base + q] if per_row else values[base + q]
            rx_inplace(amps, n, q, theta, scratch=scratch)
        for c, t in spec.cnot_pairs():
            cnot_inplace(amps, n, c, t)


def run_batch(spec: CircuitSpec, params, states: np.ndarray) -> np.ndarray:
    """Evolve a batch of states (shape ``(..., 2^n)``) through the circuit."""
    values = _param_values(params)
    _check(spec, values, states.shape[-1])
    amps = np.ascontiguousarray(states, dtype=np.complex128).copy()
    _evolve_inplace(spec, values, amps)
    return amps


def expectations_batch(spec: CircuitSpec, params, states: np.ndarray) -> np.ndarray:
    """All-qubit Z expectations for a batch of input states; shape (..., n)."""
    amps = run_batch(spec, params, states)
    EXECUTIONS.forward_states += int(np.prod(amps.shape[:-1], dtype=np.int64))
    return expect_z_batch(amps, spec.n_qubits)


def jacobian_batch(spec: CircuitSpec, params, states: np.ndarray) -> np.ndarray:
    """Parameter-shift Jacobians for a batch of states.

    Returns shape ``(..., n_qubits, n_params)``. Runs the full shift table
    (2 * n_params parameter settings) as one vectorized execution over the
    batch; per-state cost is exactly 2 * n_params circuit runs.
    """
    values = _param_values(params)
    _check(spec, values, states.shape[-1])
    states = np.ascontiguousarray(states, dtype=np.complex128)
    lead = states.shape[:-1]
    p = spec.n_params

    # Row 2k is theta with theta_k + pi/2, row 2k+1 with theta_k - pi/2.
    table = np.tile(values, (2 * p, 1))
    idx = np.arange(p)
    table[2 * idx, idx] += math.pi / 2.0
    table[2 * idx + 1, idx] -= math.pi / 2.0

    amps = np.broadcast_to(states, (2 * p,) + states.shape).copy()
    shift_values = table.reshape((2 * p,) + (1,) * len(lead) + (p,))
    _evolve_inplace(spec, shift_values, amps)
    EXECUTIONS.shift_states += int(np.prod(amps.shape[:-1], dtype=np.int64))

    z = expect_z_batch(amps, spec.n_qubits)  # (2p, ..., n)
    jac = 0.5 * (z[0::2] - z[1::2])  # (p, ..., n)
    return np.moveaxis(jac, 0, -1)  # (..., n, p)


def run_circuit(spec: CircuitSpec, params, input: StateVector) -> StateVector:
    """Apply all layers to `input`; returns the evolved state."""
    if input.n_qubits != spec.n_qubits:
        raise ShapeMismatch(
            f"input has {input.n_qubits} qubits, circuit wants {spec.n_qubits}"
        )
    amps = run_batch(spec, params, input.amps)
    return StateVector(spec.n_qubits, amps)


def expectation_bundle(spec: CircuitSpec, params, input: StateVector) -> np.ndarray:
    """z_j = <psi(theta)| Z_j |psi(theta)> for every qubit j."""
    if input.n_qubits != spec.n_qubits:
        raise ShapeMismatch(
            f"input has {input.n_qubits} qubits, circuit wants {spec.n_qubits}"
        )
    return expectations_batch(spec, params, input.amps)


def parameter_shift_jacobian(
    spec: CircuitSpec, params, input: StateVector
) -> np.ndarray:
    """Exact Jacobian J[i, j] = dz_i/dtheta_j, shape (n_qubits, n_params)."""
    if input.n_qubits != spec.n_qubits:
        raise ShapeMismatch(
            f"input has {input.n_qubits} qubits, circuit wants {spec.n_qubits}"
        )
    return jacobian_batch(spec, params, input.amps)
