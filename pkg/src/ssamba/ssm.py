"""State-space sequence mixing: LTI discretization, scan/convolution duality,
the input-selective scan, and the bidirectional Mamba block."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import numerics as nx
from .numerics import ACC, DimensionError, DomainError, Tensor


# --------------------------------------------------------------------------
# Linear time-invariant systems (diagonal A)

@dataclass
class LtiSsm:
    """Continuous system h' = A h + B x, y = C h with diagonal A.

    ``A``, ``B``, ``C`` have shape (..., N); leading dims index channels.
    """

    A: np.ndarray
    B: np.ndarray
    C: np.ndarray

    def __post_init__(self):
        self.A, self.B, self.C = (np.asarray(v, dtype=ACC) for v in (self.A, self.B, self.C))
        if not (self.A.shape == self.B.shape == self.C.shape):
            raise DimensionError(f"A{self.A.shape}, B{self.B.shape}, C{self.C.shape} disagree")

    @property
    def N(self) -> int:
        return self.A.shape[-1]

    @classmethod
    def from_log(cls, A_log, B, C) -> "LtiSsm":
        """Stable parameterization A = -exp(A_log)."""
        return cls(-np.exp(np.asarray(A_log, dtype=ACC)), B, C)


@dataclass
class DiscreteLti:
    Ad: np.ndarray
    Bd: np.ndarray
    delta: float | np.ndarray


def discretize_zoh(A, B, delta) -> DiscreteLti:
    """Zero-order hold: Ad = exp(dA), Bd = (dA)^-1 (exp(dA) - 1) dB, elementwise.

    Where |dA| < 1e-6 the removable singularity is replaced by the series
    Bd = dB (1 + dA/2).
    """
    delta_arr = np.asarray(delta, dtype=ACC)
    if np.any(delta_arr <= 0):
        raise DomainError("discretize_zoh: step size must be > 0")
    A = np.asarray(A, dtype=ACC)
    B = np.asarray(B, dtype=ACC)
    dA = delta_arr * A
    Ad = np.exp(dA)
    small = np.abs(dA) < 1e-6
    safe = np.where(small, 1.0, dA)
    Bd = np.where(small, delta_arr * B * (1.0 + dA / 2.0), np.expm1(dA) / safe * delta_arr * B)
    return DiscreteLti(Ad, Bd, delta)


def simplified_discretize(A, B_t, delta_t):
    """Exact ZOH for A with the first-order input term: Ad_t = exp(dt A), Bd_t = dt B_t.

    ``A`` is (C, N), ``delta_t`` (M, C) and ``B_t`` (M, N); returns
    ``(Ad_t, Bd_t)`` each shaped (M, C, N).
    """
    delta_t = np.asarray(delta_t, dtype=ACC)
    if np.any(delta_t <= 0):
        raise DomainError("simplified_discretize: step sizes must be > 0")
    A = np.asarray(A, dtype=ACC)
    B_t = np.asarray(B_t, dtype=ACC)
    Ad = np.exp(delta_t[..., :, None] * A)
    Bd = delta_t[..., :, None] * B_t[..., None, :]
    return Ad, Bd


def lti_scan(d: DiscreteLti, C, x) -> np.ndarray:
    """Run h_t = Ad h_{t-1} + Bd x_t, y_t = C . h_t from h_0 = 0."""
    x = np.asarray(x, dtype=ACC)
    C = np.asarray(C, dtype=ACC)
    h = np.zeros(np.broadcast(d.Ad, d.Bd).shape, dtype=ACC)
    y = np.empty(x.shape, dtype=ACC)
    for t in range(x.shape[0]):
        h = d.Ad * h + d.Bd * x[t]
        y[t] = np.sum(C * h, axis=-1)
    return y


def lti_states(d: DiscreteLti, x) -> np.ndarray:
    """All hidden states of the scan, shape (M, ..., N)."""
    x = np.asarray(x, dtype=ACC)
    h = np.zeros(np.broadcast(d.Ad, d.Bd).shape, dtype=ACC)
    out = []
    for t in range(x.shape[0]):
        h = d.Ad * h + d.Bd * x[t]
        out.append(h)
    return np.stack(out)


def ssm_kernel(d: DiscreteLti, C, M: int) -> np.ndarray:
    """K = (C Bd, C Ad Bd, ..., C Ad^(M-1) Bd)."""
    C = np.asarray(C, dtype=ACC)
    powers = d.Ad[..., None, :] ** np.arange(M)[:, None]
    return np.sum(C[..., None, :] * powers * d.Bd[..., None, :], axis=-1)


def kernel_apply(x, K) -> np.ndarray:
    """Causal convolution y_t = sum_{j<=t} K_j x_{t-j}."""
    x = np.asarray(x, dtype=ACC)
    K = np.asarray(K, dtype=ACC)
    if x.shape[-1] != K.shape[-1]:
        raise DimensionError(f"kernel_apply: sequence length {x.shape[-1]} vs kernel {K.shape[-1]}")
    M = x.shape[-1]
    return np.convolve(x, K)[:M] if x.ndim == 1 else np.stack(
        [np.convolve(xi, ki)[:M] for xi, ki in zip(x, K)])


# --------------------------------------------------------------------------
# Selective scan

SCAN_CHUNK = 128


def selective_scan(u, delta, A, B, C, D) -> Tensor:
    """Input-selective scan over the sequence axis.

    Shapes: ``u``, ``delta`` (..., M, C); ``A`` (C, N); ``B``, ``C``
    (..., M, N); ``D`` (C,).  Per channel c and state n::

        h_t = exp(delta_tc A_cn) h_{t-1} + delta_tc B_tn u_tc
        y_tc = sum_n C_tn h_tcn + D_c u_tc

    Under a gradient tape all states are kept for the reverse pass; without
    one the discretized terms are materialized a chunk at a time so memory
    stays linear in M with a small constant.
    """
    ud, dd, Ad_, Bd_, Cd, Dd = (nx._data(v) for v in (u, delta, A, B, C, D))
    if np.any(dd <= 0):
        raise DomainError("selective_scan: delta must be > 0")
    if ud.shape != dd.shape or Ad_.shape[0] != ud.shape[-1] or Bd_.shape != Cd.shape \
            or Bd_.shape[-1] != Ad_.shape[1] or Bd_.shape[:-1] != ud.shape[:-1]:
        raise DimensionError(
            f"selective_scan shapes: u{ud.shape} delta{dd.shape} A{Ad_.shape} B{Bd_.shape} C{Cd.shape}")
    dt = ud.dtype
    M = ud.shape[-2]
    Cn, N = Ad_.shape
    lead = ud.shape[:-2]
    nx.add_work("selective_scan", int(np.prod(lead, dtype=np.int64)) * M * Cn * N * 4)

    tape = nx.active_tape()
    needs_grad = tape is not None and any(
        isinstance(v, Tensor) and v.requires_grad for v in (u, delta, A, B, C, D))

    if not needs_grad:
        y = np.empty(ud.shape, dtype=dt)
        h = np.zeros(lead + (Cn, N), dtype=dt)
        for s in range(0, M, SCAN_CHUNK):
            e = min(M, s + SCAN_CHUNK)
            dA = np.exp(dd[..., s:e, :, None] * Ad_)
            dBu = (dd[..., s:e, :] * ud[..., s:e, :])[..., None] * Bd_[..., s:e, None, :]
            Hc = np.empty_like(dA)
            for i in range(e - s):
                h = dA[..., i, :, :] * h + dBu[..., i, :, :]
                Hc[..., i, :, :] = h
            y[..., s:e, :] = np.matmul(Hc.astype(ACC), Cd[..., s:e, :, None].astype(ACC))[..., 0]
        y += ud * Dd
        return nx.record("selective_scan", y, (u, delta, A, B, C, D), None)

    # time-major, leading dims flattened to L: per-step slices stay contiguous
    L = int(np.prod(lead, dtype=np.int64))
    tm = lambda a: np.ascontiguousarray(np.moveaxis(a.reshape((L,) + a.shape[-2:]), 1, 0), dtype=ACC)
    dT, uT, BT, CT = tm(dd), tm(ud), tm(Bd_), tm(Cd)         # (M, L, C) / (M, L, N)
    A64 = Ad_.astype(ACC)
    dA = np.exp(dT[..., None] * A64)                         # (M, L, C, N)
    dBu = (dT * uT)[..., None] * BT[:, :, None, :]
    H = np.empty(dA.shape, dtype=ACC)
    h = np.zeros(dA.shape[1:], dtype=ACC)
    for i in range(M):
        h = dA[i] * h + dBu[i]
        H[i] = h
    yT = np.einsum("mlcn,mln->mlc", H, CT) + uT * Dd
    untm = lambda a, like: np.moveaxis(a, 0, 1).reshape(like.shape).astype(like.dtype)
    y = untm(yT, ud)

    def bwd(gy):
        gyT = tm(gy)                                         # (M, L, C)
        G = np.empty(dA.shape, dtype=ACC)                    # dL/dh_t over all paths
        gh = np.zeros(dA.shape[1:], dtype=ACC)
        for i in range(M - 1, -1, -1):
            gh = gh + gyT[i][..., None] * CT[i][:, None, :]
            G[i] = gh
            gh = gh * dA[i]
        Hprev = np.empty_like(H)
        Hprev[0] = 0.0
        Hprev[1:] = H[:-1]
        g_arg = G * Hprev * dA                               # through exp(delta A)
        GB = np.einsum("mlcn,mln->mlc", G, BT)
        g_delta = np.einsum("mlcn,cn->mlc", g_arg, A64) + GB * uT
        gA = np.einsum("mlcn,mlc->cn", g_arg, dT)
        gB = np.einsum("mlcn,mlc->mln", G, dT * uT)
        gu = GB * dT + gyT * Dd
        gC = np.einsum("mlc,mlcn->mln", gyT, H)
        gD = np.einsum("mlc,mlc->c", gyT, uT)
        return (untm(gu, ud), untm(g_delta, dd), gA.astype(Ad_.dtype),
                untm(gB, Bd_), untm(gC, Cd), gD.astype(Dd.dtype))

    return nx.record("selective_scan", y, (u, delta, A, B, C, D), bwd)


def selective_scan_reference(u, delta, A, B, C, D) -> np.ndarray:
    """Plain triple loop over (t, c, n); slow, for checking only."""
    u, delta, A, B, C, D = (np.asarray(v, dtype=ACC) for v in (u, delta, A, B, C, D))
    M, Cn = u.shape
    N = A.shape[1]
    h = np.zeros((Cn, N))
    y = np.zeros((M, Cn))
    for t in range(M):
        for c in range(Cn):
            acc = 0.0
            for n in range(N):
                h[c, n] = math.exp(delta[t, c] * A[c, n]) * h[c, n] + delta[t, c] * B[t, n] * u[t, c]
                acc += C[t, n] * h[c, n]
            y[t, c] = acc + D[c] * u[t, c]
    return y


# --------------------------------------------------------------------------
# Bidirectional Mamba block

@dataclass(frozen=True)
class BlockDims:
    d_model: int
    expand: int = 2
    d_state: int = 16
    d_conv: int = 4
    dt_rank: int | None = None

    @property
    def d_inner(self) -> int:
        return self.expand * self.d_model

    @property
    def rank(self) -> int:
        return self.dt_rank if self.dt_rank is not None else math.ceil(self.d_model / 16)


DIRECTIONS = ("fwd", "bwd")
_DIR_PARAMS = ("conv_w", "conv_b", "W_B", "W_C", "W_dt_down", "W_dt_up", "dt_bias", "A_log", "D_skip")


def block_param_shapes(dims: BlockDims, bidirectional: bool = True, norm: str = "rms") -> dict:
    D, E, N, k, r = dims.d_model, dims.d_inner, dims.d_state, dims.d_conv, dims.rank
    shapes = {"norm_g": (D,)}
    if norm == "layer":
        shapes["norm_b"] = (D,)
    shapes.update({"W_x": (D, E), "W_z": (D, E)})
    for o in DIRECTIONS if bidirectional else DIRECTIONS[:1]:
        shapes.update({
            f"{o}.conv_w": (E, k), f"{o}.conv_b": (E,),
            f"{o}.W_B": (E, N), f"{o}.W_C": (E, N),
            f"{o}.W_dt_down": (E, r), f"{o}.W_dt_up": (r, E), f"{o}.dt_bias": (E,),
            f"{o}.A_log": (E, N), f"{o}.D_skip": (E,),
        })
    shapes["W_T"] = (E, D)
    return shapes


def init_block(dims: BlockDims, rng: np.random.Generator, bidirectional: bool = True,
               norm: str = "rms", dt_min: float = 1e-3, dt_max: float = 0.1) -> dict[str, Tensor]:
    D, E, N, k, r = dims.d_model, dims.d_inner, dims.d_state, dims.d_conv, dims.rank
    f32 = np.float32
    w: dict[str, np.ndarray] = {"norm_g": np.ones(D, f32)}
    if norm == "layer":
        w["norm_b"] = np.zeros(D, f32)
    w["W_x"] = rng.normal(0, 1 / math.sqrt(D), (D, E))
    w["W_z"] = rng.normal(0, 1 / math.sqrt(D), (D, E))
    for o in DIRECTIONS if bidirectional else DIRECTIONS[:1]:
        w[f"{o}.conv_w"] = rng.uniform(-1, 1, (E, k)) / math.sqrt(k)
        w[f"{o}.conv_b"] = np.zeros(E)
        w[f"{o}.W_B"] = rng.normal(0, 1 / math.sqrt(E), (E, N))
        w[f"{o}.W_C"] = rng.normal(0, 1 / math.sqrt(E), (E, N))
        w[f"{o}.W_dt_down"] = rng.normal(0, 1 / math.sqrt(E), (E, r))
        w[f"{o}.W_dt_up"] = rng.uniform(-1, 1, (r, E)) / math.sqrt(r)
        # softplus(bias) lands log-uniformly in [dt_min, dt_max]
        dt = np.exp(rng.uniform(math.log(dt_min), math.log(dt_max), E))
        w[f"{o}.dt_bias"] = dt + np.log(-np.expm1(-dt))
        w[f"{o}.A_log"] = np.log(np.tile(np.arange(1, N + 1, dtype=np.float64), (E, 1)))
        w[f"{o}.D_skip"] = np.ones(E)
    w["W_T"] = rng.normal(0, 1 / math.sqrt(E), (E, D)) / math.sqrt(2.0)
    return {name: nx.parameter(np.asarray(v, dtype=f32), name=name) for name, v in w.items()}


def tie_directions(w: dict[str, Tensor]) -> dict[str, Tensor]:
    """Copy of ``w`` whose backward-direction params equal the forward ones."""
    out = dict(w)
    for p in _DIR_PARAMS:
        out[f"bwd.{p}"] = nx.parameter(w[f"fwd.{p}"].data.copy(), name=f"bwd.{p}")
    return out


def _norm(x, w, kind, eps=1e-5):
    if kind == "layer":
        return nx.layer_norm(x, w["norm_g"], w.get("norm_b"), eps)
    return nx.rms_norm(x, w["norm_g"], eps)


def _direction(x: Tensor, w: dict[str, Tensor], o: str) -> Tensor:
    xc = nx.silu(nx.depthwise_conv1d(x, w[f"{o}.conv_w"], w[f"{o}.conv_b"]))
    Bt = nx.matmul(xc, w[f"{o}.W_B"])
    Ct = nx.matmul(xc, w[f"{o}.W_C"])
    dt = nx.softplus(nx.add(nx.matmul(nx.matmul(xc, w[f"{o}.W_dt_down"]), w[f"{o}.W_dt_up"]),
                            w[f"{o}.dt_bias"]))
    A = nx.scale(nx.exp(w[f"{o}.A_log"]), -1.0)
    return selective_scan(xc, dt, A, Bt, Ct, w[f"{o}.D_skip"])


def mamba_block(E: Tensor, w: dict[str, Tensor], mode: str = "bidirectional",
                norm: str = "rms") -> Tensor:
    """One residual block: (M, D) or (B, M, D) in, same shape out.

    The backward direction reverses the sequence, runs its own conv and
    scan, then reverses back.  Both gated outputs are summed before the
    output projection.
    """
    if mode not in ("bidirectional", "unidirectional"):
        raise ValueError(f"unknown mode {mode!r}")
    if E.shape[-2] < 1:
        raise DimensionError("mamba_block needs at least one token")
    h = _norm(E, w, norm)
    x = nx.matmul(h, w["W_x"])
    gate = nx.silu(nx.matmul(h, w["W_z"]))
    y = nx.mul(_direction(x, w, "fwd"), gate)
    if mode == "bidirectional":
        axis = E.ndim - 2
        yb = nx.flip(_direction(nx.flip(x, axis), w, "bwd"), axis)
        y = nx.add(y, nx.mul(yb, gate))
    return nx.add(nx.matmul(y, w["W_T"]), E)
