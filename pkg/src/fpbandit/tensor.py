"""Dense matrices, a small feed-forward network with hand-written backprop,
first-order optimizers and a symmetric eigensolver.

Everything runs on float64 numpy arrays. A "Matrix" is simply a 2-D
``np.ndarray``; :func:`as_matrix` validates and coerces inputs.
"""
from __future__ import annotations

from typing import Optional, Sequence

import numba
import numpy as np

from .errors import ContractError, NumericError, ShapeError

ACTIVATIONS = ("relu", "tanh")


def as_matrix(x, name: str = "input") -> np.ndarray:
    """Return ``x`` as a finite 2-D float64 array."""
    m = np.asarray(x, dtype=np.float64)
    if m.ndim == 1:
        m = m[None, :]
    if m.ndim != 2:
        raise ShapeError(f"{name}: expected a 2-D matrix, got ndim={m.ndim}")
    if not np.all(np.isfinite(m)):
        raise NumericError(f"{name}: non-finite entries")
    return m


def _check_finite(a: np.ndarray, what: str) -> np.ndarray:
    if not np.all(np.isfinite(a)):
        raise NumericError(f"non-finite values in {what}")
    return a


def _activate(kind: str, z: np.ndarray) -> np.ndarray:
    if kind == "relu":
        return np.maximum(z, 0.0)
    return np.tanh(z)


def _activate_grad(kind: str, z: np.ndarray, a: np.ndarray) -> np.ndarray:
    if kind == "relu":
        return z > 0.0
    return 1.0 - a * a


class DenseNet:
    """Fully connected network ``d -> hidden... -> 1`` with linear output.

    Weights are stored as ``(fan_in, fan_out)`` matrices so a batch ``x`` of
    shape ``(batch, d)`` maps through ``x @ W + b``. The flat parameter vector
    lists, layer by layer, the row-major weight matrix followed by the bias.
    """

    def __init__(self, weights: Sequence[np.ndarray], biases: Sequence[np.ndarray],
                 activations: Optional[Sequence[str]] = None):
        if len(weights) != len(biases) or not weights:
            raise ShapeError("need one bias per weight matrix and at least one layer")
        self.weights = [np.array(w, dtype=np.float64) for w in weights]
        self.biases = [np.array(b, dtype=np.float64).reshape(-1) for b in biases]
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            if w.ndim != 2 or w.shape[1] != b.shape[0]:
                raise ShapeError(f"layer {i}: weight {w.shape} incompatible with bias {b.shape}")
            if i and self.weights[i - 1].shape[1] != w.shape[0]:
                raise ShapeError(f"layer {i}: fan_in {w.shape[0]} != previous fan_out "
                                 f"{self.weights[i - 1].shape[1]}")
        n_hidden = len(self.weights) - 1
        if activations is None:
            activations = ["relu"] * n_hidden
        activations = list(activations)
        if len(activations) != n_hidden:
            raise ShapeError(f"expected {n_hidden} activations, got {len(activations)}")
        for a in activations:
            if a not in ACTIVATIONS:
                raise ContractError(f"unknown activation {a!r}")
        self.activations = activations

    @classmethod
    def init(cls, sizes: Sequence[int], rng: np.random.Generator,
             activation: str = "relu") -> "DenseNet":
        """Glorot-uniform weights, zero biases."""
        sizes = [int(s) for s in sizes]
        if len(sizes) < 2 or min(sizes) < 1:
            raise ContractError(f"bad layer sizes {sizes}")
        weights, biases = [], []
        for fan_in, fan_out in zip(sizes[:-1], sizes[1:]):
            limit = np.sqrt(6.0 / (fan_in + fan_out))
            weights.append(rng.uniform(-limit, limit, size=(fan_in, fan_out)))
            biases.append(np.zeros(fan_out))
        return cls(weights, biases, [activation] * (len(sizes) - 2))

    @classmethod
    def zeros(cls, sizes: Sequence[int], activation: str = "relu") -> "DenseNet":
        sizes = [int(s) for s in sizes]
        weights = [np.zeros((a, b)) for a, b in zip(sizes[:-1], sizes[1:])]
        biases = [np.zeros(b) for b in sizes[1:]]
        return cls(weights, biases, [activation] * (len(sizes) - 2))

    @property
    def sizes(self) -> list[int]:
        return [self.weights[0].shape[0]] + [w.shape[1] for w in self.weights]

    @property
    def input_dim(self) -> int:
        return self.weights[0].shape[0]

    @property
    def param_count(self) -> int:
        return sum(w.size + b.size for w, b in zip(self.weights, self.biases))

    def flat(self) -> np.ndarray:
        return np.concatenate([np.concatenate([w.ravel(), b]) for w, b in
                               zip(self.weights, self.biases)])

    def set_flat(self, vec: np.ndarray) -> "DenseNet":
        vec = np.asarray(vec, dtype=np.float64)
        if vec.shape != (self.param_count,):
            raise ShapeError(f"flat vector has shape {vec.shape}, expected ({self.param_count},)")
        pos = 0
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            self.weights[i] = vec[pos:pos + w.size].reshape(w.shape).copy()
            pos += w.size
            self.biases[i] = vec[pos:pos + b.size].copy()
            pos += b.size
        return self

    def with_flat(self, vec: np.ndarray) -> "DenseNet":
        return self.copy().set_flat(vec)

    def copy(self) -> "DenseNet":
        return DenseNet([w.copy() for w in self.weights], [b.copy() for b in self.biases],
                        list(self.activations))

    # -- internals shared with the stochastic-input network ------------------
    def _forward_from(self, z: np.ndarray, masks=None):
        """Propagate from the first layer's pre-activation ``z``."""
        pre, act, post = [z], [], []
        for i in range(1, len(self.weights)):
            a = _activate(self.activations[i - 1], pre[-1])
            act.append(a)
            if masks is not None and masks[i - 1] is not None:
                a = a * masks[i - 1]
            post.append(a)
            pre.append(a @ self.weights[i] + self.biases[i])
        return pre[-1], (pre, act, post)

    def _backward_from(self, cache, g: np.ndarray, masks=None):
        """Return (per-layer grads for layers 1.., grad wrt first pre-activation)."""
        pre, act, post = cache
        grads = []
        for i in range(len(self.weights) - 1, 0, -1):
            grads.append((post[i - 1].T @ g, g.sum(axis=0)))
            g = g @ self.weights[i].T
            if masks is not None and masks[i - 1] is not None:
                g = g * masks[i - 1]
            g = g * _activate_grad(self.activations[i - 1], pre[i - 1], act[i - 1])
        grads.reverse()
        return grads, g

    def forward(self, x, masks=None) -> np.ndarray:
        x = as_matrix(x)
        if x.shape[1] != self.input_dim:
            raise ShapeError(f"input has {x.shape[1]} columns, net expects {self.input_dim}")
        out, _ = self._forward_from(x @ self.weights[0] + self.biases[0], masks)
        return _check_finite(out, "forward output")

    def backward(self, x, loss_grad, masks=None) -> np.ndarray:
        """Gradient of a loss w.r.t. the flat parameters given dLoss/dOutput."""
        x = as_matrix(x)
        loss_grad = np.asarray(loss_grad, dtype=np.float64)
        if loss_grad.ndim == 1:
            loss_grad = loss_grad[:, None]
        if x.shape[1] != self.input_dim:
            raise ShapeError(f"input has {x.shape[1]} columns, net expects {self.input_dim}")
        if loss_grad.shape != (x.shape[0], 1):
            raise ShapeError(f"loss_grad shape {loss_grad.shape} != output shape ({x.shape[0]}, 1)")
        _, cache = self._forward_from(x @ self.weights[0] + self.biases[0], masks)
        grads, dz = self._backward_from(cache, loss_grad, masks)
        grads.insert(0, (x.T @ dz, dz.sum(axis=0)))
        return _check_finite(self._pack(grads), "gradient")

    def _pack(self, grads) -> np.ndarray:
        return np.concatenate([np.concatenate([gw.ravel(), gb]) for gw, gb in grads])


def forward(net: DenseNet, x, masks=None) -> np.ndarray:
    return net.forward(x, masks)


def backward(net: DenseNet, x, loss_grad, masks=None) -> np.ndarray:
    return net.backward(x, loss_grad, masks)


class Optimizer:
    """SGD, RMSProp or Adam over a flat parameter vector.

    State vectors are created on the first update and must keep the same
    length afterwards.
    """

    KINDS = ("sgd", "rmsprop", "adam")

    def __init__(self, kind: str = "rmsprop", lr: float = 1e-3, beta1: float = 0.9,
                 beta2: float = 0.999, decay: float = 0.9, eps: float = 1e-8):
        if kind not in self.KINDS:
            raise ContractError(f"unknown optimizer {kind!r}")
        if not lr > 0:
            raise ContractError(f"learning rate must be positive, got {lr}")
        self.kind = kind
        self.lr = float(lr)
        self.beta1, self.beta2, self.decay, self.eps = beta1, beta2, decay, eps
        self.t = 0
        self.m: Optional[np.ndarray] = None
        self.v: Optional[np.ndarray] = None

    def update(self, params: np.ndarray, grad: np.ndarray) -> np.ndarray:
        """Return the parameters after one descent step along ``grad``."""
        grad = np.asarray(grad, dtype=np.float64)
        if grad.shape != params.shape:
            raise ShapeError(f"gradient shape {grad.shape} != parameter shape {params.shape}")
        if not np.all(np.isfinite(grad)):
            raise NumericError("non-finite gradient entries")
        if self.m is None:
            self.m = np.zeros_like(params)
            self.v = np.zeros_like(params)
        elif self.m.shape != params.shape:
            raise ShapeError("optimizer state does not match parameter count")
        self.t += 1
        if self.kind == "sgd":
            return params - self.lr * grad
        if self.kind == "rmsprop":
            self.v = self.decay * self.v + (1.0 - self.decay) * grad * grad
            return params - self.lr * grad / (np.sqrt(self.v) + self.eps)
        self.m = self.beta1 * self.m + (1.0 - self.beta1) * grad
        self.v = self.beta2 * self.v + (1.0 - self.beta2) * grad * grad
        m_hat = self.m / (1.0 - self.beta1 ** self.t)
        v_hat = self.v / (1.0 - self.beta2 ** self.t)
        return params - self.lr * m_hat / (np.sqrt(v_hat) + self.eps)

    def step(self, net: DenseNet, tape: np.ndarray) -> DenseNet:
        tape = np.asarray(tape, dtype=np.float64)
        if tape.shape != (net.param_count,):
            raise ShapeError(f"tape length {tape.shape} != parameter count {net.param_count}")
        return net.set_flat(self.update(net.flat(), tape))


def step(opt: Optimizer, net: DenseNet, tape: np.ndarray) -> DenseNet:
    return opt.step(net, tape)


# -- symmetric eigendecomposition --------------------------------------------

JACOBI_MAX_N = 128


@numba.njit(cache=True)
def _jacobi(a, tol, max_sweeps):
    n = a.shape[0]
    v = np.eye(n)
    for sweep in range(max_sweeps + 1):
        off = 0.0
        for p in range(n):
            for q in range(p + 1, n):
                off += 2.0 * a[p, q] * a[p, q]
        if np.sqrt(off) <= tol:
            return a, v, True
        if sweep == max_sweeps:
            break
        for p in range(n - 1):
            for q in range(p + 1, n):
                apq = a[p, q]
                if apq == 0.0:
                    continue
                tau = (a[q, q] - a[p, p]) / (2.0 * apq)
                if tau >= 0.0:
                    t = 1.0 / (tau + np.sqrt(1.0 + tau * tau))
                else:
                    t = -1.0 / (-tau + np.sqrt(1.0 + tau * tau))
                c = 1.0 / np.sqrt(1.0 + t * t)
                s = t * c
                for k in range(n):
                    akp = a[k, p]
                    akq = a[k, q]
                    a[k, p] = c * akp - s * akq
                    a[k, q] = s * akp + c * akq
                for k in range(n):
                    apk = a[p, k]
                    aqk = a[q, k]
                    a[p, k] = c * apk - s * aqk
                    a[q, k] = s * apk + c * aqk
                a[p, q] = 0.0
                a[q, p] = 0.0
                for k in range(n):
                    vkp = v[k, p]
                    vkq = v[k, q]
                    v[k, p] = c * vkp - s * vkq
                    v[k, q] = s * vkp + c * vkq
    return a, v, False


def symmetric_eig(m, method: str = "auto", tol: float = 1e-12,
                  max_sweeps: int = 100) -> tuple[np.ndarray, np.ndarray]:
    """Eigenpairs of a symmetric matrix, eigenvalues in descending order.

    ``method="jacobi"`` runs cyclic Jacobi until the off-diagonal Frobenius
    norm drops below ``tol`` times the matrix norm; ``"lapack"`` calls
    ``numpy.linalg.eigh``. ``"auto"`` uses Jacobi up to ``JACOBI_MAX_N`` rows.
    Column ``i`` of the returned matrix is the eigenvector for value ``i``.
    """
    m = as_matrix(m, "symmetric_eig input")
    n = m.shape[0]
    if m.shape[1] != n:
        raise ShapeError(f"expected a square matrix, got {m.shape}")
    scale = max(1.0, float(np.max(np.abs(m))) if m.size else 1.0)
    if np.max(np.abs(m - m.T), initial=0.0) > 1e-10 * scale:
        raise ContractError("matrix is not symmetric within 1e-10")
    m = 0.5 * (m + m.T)
    if method == "auto":
        method = "jacobi" if n <= JACOBI_MAX_N else "lapack"
    if method == "jacobi":
        norm = float(np.linalg.norm(m))
        a, vecs, ok = _jacobi(m.copy(), tol * norm, max_sweeps)
        if not ok:
            raise NumericError(f"Jacobi did not converge within {max_sweeps} sweeps")
        vals = np.diag(a).copy()
    elif method == "lapack":
        vals, vecs = np.linalg.eigh(m)
    else:
        raise ContractError(f"unknown eigen method {method!r}")
    order = np.argsort(-vals, kind="stable")
    return vals[order], np.ascontiguousarray(vecs[:, order])
