"""Exact statevector simulation of the patch sub-generator circuits.

Conventions, fixed once and used everywhere:

* Little-endian qubit order: qubit ``i`` is bit ``i`` of the basis-state
  index, so the amplitude vector entry ``k`` belongs to the basis state
  whose binary expansion (LSB first) gives the qubit values.
* A state over ``n`` qubits is a complex128 array whose last axis has
  length ``2**n``.  Any leading axes are batch axes and every operation
  here broadcasts over them.
* Ancilla qubits are the highest-indexed ones.  Post-selecting all
  ancillas on |0> therefore keeps exactly the first ``2**(n - n_ancilla)``
  amplitudes.

A sub-generator circuit is: Ry(z_i) data encoding on every qubit, then
``layers`` repetitions of (one U3 gate per qubit, then a CNOT ring
0->1, 1->2, ..., n-2->n-1, n-1->0).  Measurement probabilities are taken
after post-selection.  Gradients with respect to both the latent input
and every U3 angle are computed by the adjoint (gate-undo) method, which
walks the circuit backwards once instead of storing intermediate states.
"""

from functools import lru_cache

import numpy as np

# Post-selection mass below this is treated as a degenerate circuit
# rather than silently dividing by ~0.
DEGENERATE_KEEP_PROB = 1e-12


class DegeneratePostselectionError(RuntimeError):
    """Raised when post-selection keeps (numerically) zero probability mass."""


def zero_state(n_qubits: int, batch_shape: tuple = ()) -> np.ndarray:
    """|0...0> over ``n_qubits``, with optional leading batch axes."""
    state = np.zeros(batch_shape + (2 ** n_qubits,), dtype=np.complex128)
    state[..., 0] = 1.0
    return state


def num_qubits(state: np.ndarray) -> int:
    dim = state.shape[-1]
    n = dim.bit_length() - 1
    if 2 ** n != dim:
        raise ValueError(f"state length {dim} is not a power of two")
    return n


def ry_matrix(theta):
    """Rotation about Y.  Accepts scalars or arrays (batched in leading axes)."""
    theta = np.asarray(theta, dtype=np.float64)
    c = np.cos(theta / 2.0)
    s = np.sin(theta / 2.0)
    out = np.empty(theta.shape + (2, 2), dtype=np.complex128)
    out[..., 0, 0] = c
    out[..., 0, 1] = -s
    out[..., 1, 0] = s
    out[..., 1, 1] = c
    return out


def ry_derivative(theta):
    """d/dtheta of ry_matrix."""
    theta = np.asarray(theta, dtype=np.float64)
    c = np.cos(theta / 2.0) / 2.0
    s = np.sin(theta / 2.0) / 2.0
    out = np.empty(theta.shape + (2, 2), dtype=np.complex128)
    out[..., 0, 0] = -s
    out[..., 0, 1] = -c
    out[..., 1, 0] = c
    out[..., 1, 1] = -s
    return out


def u3_matrix(a, b, c):
    """General single-qubit rotation with angles (a, b, c).

    [[cos(a/2),            -e^{ic} sin(a/2)      ],
     [e^{ib} sin(a/2),      e^{i(b+c)} cos(a/2)  ]]
    """
    ca = np.cos(a / 2.0)
    sa = np.sin(a / 2.0)
    out = np.empty((2, 2), dtype=np.complex128)
    out[0, 0] = ca
    out[0, 1] = -np.exp(1j * c) * sa
    out[1, 0] = np.exp(1j * b) * sa
    out[1, 1] = np.exp(1j * (b + c)) * ca
    return out


def u3_derivatives(a, b, c):
    """Partial derivatives of u3_matrix, stacked as shape (3, 2, 2)."""
    ca = np.cos(a / 2.0)
    sa = np.sin(a / 2.0)
    eib = np.exp(1j * b)
    eic = np.exp(1j * c)
    eibc = np.exp(1j * (b + c))
    out = np.zeros((3, 2, 2), dtype=np.complex128)
    # d/da
    out[0, 0, 0] = -sa / 2.0
    out[0, 0, 1] = -eic * ca / 2.0
    out[0, 1, 0] = eib * ca / 2.0
    out[0, 1, 1] = -eibc * sa / 2.0
    # d/db
    out[1, 1, 0] = 1j * eib * sa
    out[1, 1, 1] = 1j * eibc * ca
    # d/dc
    out[2, 0, 1] = -1j * eic * sa
    out[2, 1, 1] = 1j * eibc * ca
    return out


def apply_one_qubit(state: np.ndarray, gate: np.ndarray, qubit: int) -> np.ndarray:
    """Apply a 2x2 gate to one qubit.

    ``gate`` is either a shared (2, 2) matrix or a batch of per-sample
    matrices with shape ``state.shape[:-1] + (2, 2)``.
    """
    dim = state.shape[-1]
    low = 1 << qubit
    if low >= dim:
        raise ValueError(f"qubit {qubit} out of range for dim {dim}")
    high = dim // (2 * low)
    lead = state.shape[:-1]
    # (..., high, 2, low) view exposes the target qubit's bit as a length-2
    # axis that matmul contracts from the left
    s = state.reshape(lead + (high, 2, low))
    if gate.ndim == 2:
        out = np.matmul(gate, s)
    else:
        out = np.matmul(gate.reshape(lead + (1, 2, 2)), s)
    return out.reshape(state.shape)


@lru_cache(maxsize=None)
def _cnot_permutation(dim: int, control: int, target: int) -> np.ndarray:
    idx = np.arange(dim)
    flipped = np.where((idx >> control) & 1 == 1, idx ^ (1 << target), idx)
    flipped.setflags(write=False)
    return flipped


def apply_cnot(state: np.ndarray, control: int, target: int) -> np.ndarray:
    """Apply CNOT with the given control and target qubit indices."""
    if control == target:
        raise ValueError("control and target must differ")
    dim = state.shape[-1]
    if (1 << control) >= dim or (1 << target) >= dim:
        raise ValueError("qubit index out of range")
    return state[..., _cnot_permutation(dim, control, target)]


def encode_latent(z: np.ndarray) -> np.ndarray:
    """Angle-encode a latent vector: Ry(z_i) on qubit i of |0...0>.

    ``z`` has shape (..., n); the result has shape (..., 2**n).
    """
    z = np.asarray(z, dtype=np.float64)
    n = z.shape[-1]
    state = zero_state(n, z.shape[:-1])
    for i in range(n):
        state = apply_one_qubit(state, ry_matrix(z[..., i]), i)
    return state


def _cnot_ring(n: int):
    pairs = [(i, i + 1) for i in range(n - 1)]
    if n > 1:
        pairs.append((n - 1, 0))
    return pairs


def run_subgenerator(z: np.ndarray, angles: np.ndarray) -> np.ndarray:
    """Full sub-generator circuit: encoding, then layered U3 + CNOT ring.

    ``angles`` has shape (layers, n, 3).
    """
    angles = np.asarray(angles, dtype=np.float64)
    if angles.ndim != 3 or angles.shape[2] != 3:
        raise ValueError(f"angles must have shape (layers, n, 3), got {angles.shape}")
    n = angles.shape[1]
    z = np.asarray(z, dtype=np.float64)
    if z.shape[-1] != n:
        raise ValueError(f"latent dim {z.shape[-1]} != circuit qubits {n}")
    state = encode_latent(z)
    ring = _cnot_ring(n)
    for layer in angles:
        for i in range(n):
            state = apply_one_qubit(state, u3_matrix(*layer[i]), i)
        for c, t in ring:
            state = apply_cnot(state, c, t)
    return state


def postselect_probs(state: np.ndarray, n_ancilla: int):
    """Measurement distribution over data qubits given all ancillas read |0>.

    Returns ``(probs, keep_prob)`` where ``probs`` has shape
    (..., 2**(n - n_ancilla)) and sums to 1, and ``keep_prob`` is the
    post-selection success probability <psi| (|0><0|_anc x I) |psi>.
    """
    n = num_qubits(state)
    if not 0 <= n_ancilla < n:
        raise ValueError(f"n_ancilla {n_ancilla} out of range for {n} qubits")
    dim_keep = 2 ** (n - n_ancilla)
    kept = state[..., :dim_keep]
    raw = kept.real ** 2 + kept.imag ** 2
    keep_prob = raw.sum(axis=-1)
    if np.any(keep_prob < DEGENERATE_KEEP_PROB):
        raise DegeneratePostselectionError(
            f"post-selection probability below {DEGENERATE_KEEP_PROB}"
        )
    return raw / keep_prob[..., None], keep_prob


def subgen_probs(z: np.ndarray, angles: np.ndarray, n_ancilla: int = 1):
    """Run one sub-generator and return (probs, keep_prob)."""
    return postselect_probs(run_subgenerator(z, angles), n_ancilla)


def _grad_reduce(cotangent: np.ndarray, dstate: np.ndarray) -> np.ndarray:
    # 2 Re <cotangent | dstate>, batched over leading axes
    return 2.0 * (cotangent.conj() * dstate).real.sum(axis=-1)


def _pair_overlap(cot: np.ndarray, state: np.ndarray, qubit: int) -> np.ndarray:
    """K[c, d] = sum over all other indices of conj(cot)_c * state_d.

    The 2x2 matrix K contracts against any single-qubit gate derivative:
    2 Re <cot| dU |state> = 2 Re sum_{cd} dU[c, d] K[c, d], so one pass over
    the state serves all three U3 parameter derivatives at once.
    """
    dim = state.shape[-1]
    low = 1 << qubit
    high = dim // (2 * low)
    lead = state.shape[:-1]
    sv = state.reshape(lead + (high, 2, low))
    cv = cot.reshape(lead + (high, 2, low))
    return np.einsum("...hcl,...hdl->...cd", cv.conj(), sv)


def subgen_backward(z: np.ndarray, angles: np.ndarray, upstream: np.ndarray,
                    n_ancilla: int = 1, final_state: np.ndarray = None):
    """Exact gradients of sum(upstream * probs) for one sub-generator.

    ``upstream`` is dL/dprobs with shape (..., 2**(n - n_ancilla)) matching
    the batch shape of ``z``.  Returns ``(grad_z, grad_angles)`` with shapes
    (..., n) and (..., layers, n, 3); batched calls leave per-sample angle
    gradients unsummed so the caller chooses the reduction.

    Uses the adjoint method: one forward pass (skipped when the caller
    supplies the circuit's ``final_state``), then a single backward walk
    that undoes each gate (psi <- U^dag psi), evaluates the parameter
    gradients 2 Re <g | dU/dtheta | psi_before> via the pair overlap, and
    pulls the cotangent back through the gate (g <- U^dag g).
    """
    z = np.asarray(z, dtype=np.float64)
    angles = np.asarray(angles, dtype=np.float64)
    upstream = np.asarray(upstream, dtype=np.float64)
    layers, n, _ = angles.shape
    lead = z.shape[:-1]
    if upstream.shape[:-1] != lead:
        raise ValueError("upstream batch shape does not match z")

    state = run_subgenerator(z, angles) if final_state is None else final_state
    dim_keep = 2 ** (n - n_ancilla)
    kept = state[..., :dim_keep]
    raw = kept.real ** 2 + kept.imag ** 2
    keep_prob = raw.sum(axis=-1)
    if np.any(keep_prob < DEGENERATE_KEEP_PROB):
        raise DegeneratePostselectionError(
            f"post-selection probability below {DEGENERATE_KEEP_PROB}"
        )
    probs = raw / keep_prob[..., None]

    # dL/d|amp_k|^2 through the normalisation q_k / keep_prob
    inner = (upstream * probs).sum(axis=-1)
    draw = (upstream - inner[..., None]) / keep_prob[..., None]
    cot = np.zeros_like(state)
    cot[..., :dim_keep] = draw * kept

    grad_angles = np.zeros(lead + (layers, n, 3), dtype=np.float64)
    ring = _cnot_ring(n)

    for layer_idx in range(layers - 1, -1, -1):
        layer = angles[layer_idx]
        for c, t in reversed(ring):
            state = apply_cnot(state, c, t)
            cot = apply_cnot(cot, c, t)
        for i in range(n - 1, -1, -1):
            undo = u3_matrix(*layer[i]).conj().T
            state = apply_one_qubit(state, undo, i)
            K = _pair_overlap(cot, state, i)
            dgates = u3_derivatives(*layer[i])
            grad_angles[..., layer_idx, i, :] = (
                2.0 * np.einsum("pcd,...cd->...p", dgates, K).real)
            cot = apply_one_qubit(cot, undo, i)

    grad_z = np.zeros(lead + (n,), dtype=np.float64)
    for i in range(n - 1, -1, -1):
        gate = ry_matrix(z[..., i])
        undo = gate.swapaxes(-1, -2)  # Ry is real, so dagger is transpose
        state = apply_one_qubit(state, undo, i)
        K = _pair_overlap(cot, state, i)
        dgate = ry_derivative(z[..., i])
        grad_z[..., i] = 2.0 * np.einsum("...cd,...cd->...", dgate, K).real
        cot = apply_one_qubit(cot, undo, i)

    return grad_z, grad_angles
