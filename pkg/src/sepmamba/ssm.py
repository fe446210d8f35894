"""Selective state-space scan with zero-order-hold discretisation.

Per channel ``e`` and state ``n`` the recurrence is::

    A_bar = exp(delta * a)
    B_bar = (exp(delta * a) - 1) / a * B          (zero-order hold)
    h[t]  = A_bar[t] * h[t-1] + B_bar[t] * u[t]
    y[t]  = sum_n C[n, t] * h[t, n] + D * u[t]

``a`` is stored as ``A_log`` with ``a = -exp(A_log)`` so it is negative by
construction; ``delta`` comes out of a softplus and is positive.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import kernels
from . import numerics as nx
from .errors import DomainError, ShapeError
from .numerics import Tensor


@dataclass
class SSMParams:
    """Weights of one selective SSM over ``d_channels`` channels.

    ``x_proj`` stacks the low-rank step projection, ``W_B`` and ``W_C``
    (rows ``[0, R)``, ``[R, R+N)``, ``[R+N, R+2N)``).  ``D`` may be ``None``
    to drop the direct term.
    """

    A_log: Tensor  # (E, N)
    x_proj: Tensor  # (R + 2N, E)
    dt_proj: Tensor  # (E, R)
    dt_bias: Tensor  # (E,)
    D: Tensor | None = None  # (E,)

    @property
    def d_channels(self) -> int:
        return self.A_log.shape[0]

    @property
    def n_state(self) -> int:
        return self.A_log.shape[1]

    @property
    def dt_rank(self) -> int:
        return self.dt_proj.shape[1]

    @property
    def W_B(self) -> np.ndarray:
        R, N = self.dt_rank, self.n_state
        return self.x_proj.data[R : R + N]

    @property
    def W_C(self) -> np.ndarray:
        R, N = self.dt_rank, self.n_state
        return self.x_proj.data[R + N :]

    @property
    def W_delta(self) -> np.ndarray:
        """Full-rank equivalent of the factored step projection."""
        return self.dt_proj.data @ self.x_proj.data[: self.dt_rank]

    def tensors(self) -> dict[str, Tensor]:
        out = {"A_log": self.A_log, "x_proj": self.x_proj, "dt_proj": self.dt_proj, "dt_bias": self.dt_bias}
        if self.D is not None:
            out["D"] = self.D
        return out

    @classmethod
    def from_tensors(cls, t: dict[str, Tensor]) -> "SSMParams":
        return cls(t["A_log"], t["x_proj"], t["dt_proj"], t["dt_bias"], t.get("D"))


def default_dt_rank(d_model: int) -> int:
    return math.ceil(d_model / 16)


def init_ssm_arrays(
    d_channels: int,
    n_state: int,
    dt_rank: int,
    rng: np.random.Generator,
    dtype=np.float32,
    dt_min: float = 1e-3,
    dt_max: float = 1e-1,
    with_d: bool = True,
) -> dict[str, np.ndarray]:
    E, N, R = d_channels, n_state, dt_rank
    x_bound = 1.0 / math.sqrt(E)
    dt_bound = R**-0.5
    dt = np.exp(rng.uniform(math.log(dt_min), math.log(dt_max), size=E))
    out = {
        "A_log": np.log(np.tile(np.arange(1, N + 1, dtype=np.float64), (E, 1))),
        "x_proj": rng.uniform(-x_bound, x_bound, size=(R + 2 * N, E)),
        "dt_proj": rng.uniform(-dt_bound, dt_bound, size=(E, R)),
        # inverse softplus so that softplus(dt_bias) == dt
        "dt_bias": dt + np.log(-np.expm1(-dt)),
    }
    if with_d:
        out["D"] = np.ones(E)
    return {k: v.astype(dtype) for k, v in out.items()}


def init_ssm_params(d_channels: int, n_state: int, rng: np.random.Generator, dt_rank: int | None = None, dtype=np.float32, with_d: bool = True) -> SSMParams:
    R = default_dt_rank(d_channels) if dt_rank is None else dt_rank
    arrs = init_ssm_arrays(d_channels, n_state, R, rng, dtype=dtype, with_d=with_d)
    return SSMParams.from_tensors({k: Tensor(v, requires_grad=True) for k, v in arrs.items()})


def discretize(a, b, delta):
    """Zero-order hold: returns ``(A_bar, B_bar)`` with numpy broadcasting."""
    a = np.asarray(a)
    b = np.asarray(b)
    delta = np.asarray(delta)
    if np.any(delta <= 0):
        raise DomainError("step size delta must be strictly positive")
    z = delta * a
    return np.exp(z), delta * kernels.phi1(z) * b


def continuous_a(params: SSMParams) -> Tensor:
    return nx.neg(nx.exp(params.A_log))


def project(params: SSMParams, x: Tensor) -> tuple[Tensor, Tensor, Tensor]:
    """Input-dependent ``(delta[E, L], B[N, L], C[N, L])``."""
    R, N = params.dt_rank, params.n_state
    x_dbl = nx.matmul(params.x_proj, x)
    dt_low = x_dbl[:R]
    B = x_dbl[R : R + N]
    C = x_dbl[R + N :]
    delta = nx.softplus(nx.add_channel_bias(nx.matmul(params.dt_proj, dt_low), params.dt_bias))
    return delta, B, C


def selective_scan(u, delta, A, B, C, D=None, h0: np.ndarray | None = None, method: str = "sequential") -> tuple[Tensor, np.ndarray]:
    """Differentiable scan; returns ``(y[E, L], h_last[E, N])``.

    ``method`` is ``"sequential"`` (the recurrence kernel) or ``"parallel"``
    (a log-depth associative scan).  The final state is returned as a plain
    array for carrying into a following chunk; it is not differentiated.
    """
    u, delta, A, B, C = (nx.as_tensor(v) for v in (u, delta, A, B, C))
    E, L = u.shape
    N = A.shape[1]
    if delta.shape != (E, L) or A.shape != (E, N) or B.shape != (N, L) or C.shape != (N, L):
        raise ShapeError(f"selective_scan shapes: u{u.shape} delta{delta.shape} A{A.shape} B{B.shape} C{C.shape}")
    if method not in ("sequential", "parallel"):
        raise ValueError(f"unknown scan method {method!r}")
    dtype = u.dtype
    h0 = np.zeros((E, N), dtype=dtype) if h0 is None else np.asarray(h0, dtype=dtype)
    if h0.shape != (E, N):
        raise ShapeError(f"state shape {h0.shape} does not match ({E}, {N})")

    Dt = None if D is None else nx.as_tensor(D)
    Dv = np.zeros(E, dtype=dtype) if Dt is None else Dt.data
    args = (u.data, delta.data, A.data, B.data, C.data, Dv)

    if method == "sequential":
        y, h_last = kernels.fused_selective_scan(*args, h0)

        def bw(g):
            return kernels.selective_scan_backward(*args, h0, g)[: 6 if Dt is not None else 5]

    else:
        *_, h = kernels.materialized_scan_states(u.data, delta.data, A.data, B.data, h0, kernels.associative_recurrence)
        y = (np.einsum("len,nl->el", h, C.data) + Dv[:, None] * u.data).astype(dtype, copy=False)
        h_last = h[-1].copy()
        del h

        def bw(g):
            grads = kernels.materialized_scan_backward(*args, h0, g, reverse=kernels.associative_reverse_recurrence)
            return grads[: 6 if Dt is not None else 5]

    parents = [u, delta, A, B, C] + ([Dt] if Dt is not None else [])
    return nx.custom_op(y, parents, bw), h_last


def _scan(params: SSMParams, x, h0, method):
    x = nx.as_tensor(x)
    if x.ndim != 2 or x.shape[0] != params.d_channels:
        raise ShapeError(f"scan input must be [{params.d_channels}, L], got {x.shape}")
    delta, B, C = project(params, x)
    return selective_scan(x, delta, continuous_a(params), B, C, params.D, h0=h0, method=method)


def scan_sequential(params: SSMParams, x, h0: np.ndarray | None = None) -> tuple[Tensor, np.ndarray]:
    """Left-to-right recurrence over ``x[E, L]``."""
    return _scan(params, x, h0, "sequential")


def scan_parallel(params: SSMParams, x, h0: np.ndarray | None = None) -> tuple[Tensor, np.ndarray]:
    """Associative-scan evaluation of the same recurrence."""
    return _scan(params, x, h0, "parallel")


def scan_step(params: SSMParams, x_t, h_prev: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """One streaming step: ``x_t[E]`` and state ``[E, N]`` to ``(y_t[E], h_t)``.

    Runs the batch scan on a length-one sequence, so feeding a signal step by
    step reproduces :func:`scan_sequential` exactly.
    """
    x_t = np.asarray(x_t.data if isinstance(x_t, Tensor) else x_t)
    h_prev = np.asarray(h_prev)
    E, N = params.d_channels, params.n_state
    if x_t.shape != (E,):
        raise ShapeError(f"step input must have shape ({E},), got {x_t.shape}")
    if h_prev.shape != (E, N):
        raise ShapeError(f"state shape {h_prev.shape} does not match ({E}, {N})")
    with nx.no_grad():
        y, h = scan_sequential(params, x_t[:, None], h_prev)
    return y.data[:, 0], h


def scan_reference(a: np.ndarray, delta: np.ndarray, B: np.ndarray, C: np.ndarray, u: np.ndarray, D: np.ndarray | None = None, h0=None, discretize_fn=discretize):
    """Plain triple loop over time, channel and state (test oracle)."""
    E, L = u.shape
    N = a.shape[1]
    h = np.zeros((E, N)) if h0 is None else np.array(h0, dtype=np.float64)
    y = np.zeros((E, L))
    for t in range(L):
        for e in range(E):
            acc = 0.0
            for n in range(N):
                Ab, Bb = discretize_fn(a[e, n], B[n, t], delta[e, t])
                h[e, n] = Ab * h[e, n] + Bb * u[e, t]
                acc += C[n, t] * h[e, n]
            y[e, t] = acc + (0.0 if D is None else D[e] * u[e, t])
    return y, h


def infer_scan(params: SSMParams, x: np.ndarray, h0: np.ndarray | None = None) -> tuple[np.ndarray, np.ndarray]:
    """Gradient-free scan through the fused kernel (streaming and inference)."""
    E, N = params.d_channels, params.n_state
    dtype = x.dtype
    with nx.no_grad():
        delta, B, C = project(params, Tensor(x))
    A = -np.exp(params.A_log.data)
    D = np.zeros(E, dtype=dtype) if params.D is None else params.D.data
    h = np.zeros((E, N), dtype=dtype) if h0 is None else h0
    return kernels.fused_selective_scan(x, delta.data, A, B.data, C.data, D, h)
