"""Patch encoder built from bidirectional Mamba blocks, with pretraining heads and losses."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from . import numerics as nx
from .features import FRAME_RATE, HOP_LENGTH, PATCH, SAMPLE_RATE, WIN_LENGTH
from .numerics import ContractError, DimensionError, DomainError, Tensor
from .ssm import BlockDims, block_param_shapes, init_block, mamba_block


class CapacityError(ValueError):
    """Sequence longer than the positional table."""


@dataclass(frozen=True)
class ModelConfig:
    embed_dim: int = 64
    depth: int = 4
    expand: int = 2
    d_state: int = 16
    d_conv: int = 4
    dt_rank: int | None = None
    patch_dim: int = PATCH * PATCH
    freq_patches: int = 8
    max_time_patches: int = 63      # 10 s of audio
    norm: str = "rms"
    bidirectional: bool = True
    head_hidden: int | None = None   # defaults to embed_dim

    def __post_init__(self):
        if self.embed_dim <= 0:
            raise ValueError("embed_dim must be > 0")
        if self.depth < 0:
            raise ValueError("depth must be >= 0")
        if self.norm not in ("rms", "layer"):
            raise ValueError(f"norm must be 'rms' or 'layer', got {self.norm!r}")

    @property
    def block_dims(self) -> BlockDims:
        return BlockDims(self.embed_dim, self.expand, self.d_state, self.d_conv, self.dt_rank)

    @property
    def max_patches(self) -> int:
        return self.freq_patches * self.max_time_patches

    @property
    def mode(self) -> str:
        return "bidirectional" if self.bidirectional else "unidirectional"

    def to_dict(self) -> dict:
        return asdict(self)


PRESETS = {
    "nano": ModelConfig(embed_dim=64, depth=4),
    "tiny": ModelConfig(embed_dim=192, depth=24),
    "small": ModelConfig(embed_dim=384, depth=24),
    "base": ModelConfig(embed_dim=768, depth=24),
}


def preset(name: str, **overrides) -> ModelConfig:
    try:
        cfg = PRESETS[name]
    except KeyError:
        raise ValueError(f"unknown preset {name!r}; choose from {sorted(PRESETS)}") from None
    return replace(cfg, **overrides) if overrides else cfg


# --------------------------------------------------------------------------
# Parameters

def encoder_param_shapes(cfg: ModelConfig) -> dict[str, tuple[int, ...]]:
    D = cfg.embed_dim
    shapes = {"patch.W": (cfg.patch_dim, D), "patch.b": (D,),
              "pos": (cfg.max_patches, D), "mask_emb": (D,)}
    blk = block_param_shapes(cfg.block_dims, cfg.bidirectional, cfg.norm)
    for i in range(cfg.depth):
        shapes.update({f"blocks.{i}.{k}": v for k, v in blk.items()})
    shapes["final_norm.g"] = (D,)
    if cfg.norm == "layer":
        shapes["final_norm.b"] = (D,)
    return shapes


def head_param_shapes(cfg: ModelConfig) -> dict[str, tuple[int, ...]]:
    D, P = cfg.embed_dim, cfg.patch_dim
    Hd = cfg.head_hidden or D
    shapes = {}
    for h in ("cls", "rec"):
        shapes.update({f"{h}.W1": (D, Hd), f"{h}.b1": (Hd,), f"{h}.W2": (Hd, P), f"{h}.b2": (P,)})
    return shapes


def count_params(cfg: ModelConfig) -> int:
    """Trainable scalars in the encoder, positional table and mask embedding (no heads)."""
    return int(sum(math.prod(s) for s in encoder_param_shapes(cfg).values()))


def init_encoder(cfg: ModelConfig, rng: np.random.Generator) -> dict[str, Tensor]:
    D = cfg.embed_dim
    p = {
        "patch.W": rng.normal(0, 1 / math.sqrt(cfg.patch_dim), (cfg.patch_dim, D)),
        "patch.b": np.zeros(D),
        "pos": rng.normal(0, 0.02, (cfg.max_patches, D)),
        "mask_emb": rng.normal(0, 0.02, D),
    }
    params = {k: nx.parameter(np.asarray(v, np.float32), name=k) for k, v in p.items()}
    for i in range(cfg.depth):
        blk = init_block(cfg.block_dims, rng, cfg.bidirectional, cfg.norm)
        for k, t in blk.items():
            t.name = f"blocks.{i}.{k}"
            params[t.name] = t
    params["final_norm.g"] = nx.parameter(np.ones(D, np.float32), name="final_norm.g")
    if cfg.norm == "layer":
        params["final_norm.b"] = nx.parameter(np.zeros(D, np.float32), name="final_norm.b")
    return params


def init_heads(cfg: ModelConfig, rng: np.random.Generator) -> dict[str, Tensor]:
    out = {}
    for name, shape in head_param_shapes(cfg).items():
        if name.endswith(("b1", "b2")):
            v = np.zeros(shape)
        else:
            v = rng.normal(0, 1 / math.sqrt(shape[0]), shape)
        out[name] = nx.parameter(np.asarray(v, np.float32), name=name)
    return out


# --------------------------------------------------------------------------
# Forward pieces

def embed(patches, W, b=None) -> Tensor:
    if nx._shape_of(patches)[-1] != nx._shape_of(W)[0]:
        raise DimensionError(f"embed: patch dim {nx._shape_of(patches)[-1]} vs projection {nx._shape_of(W)}")
    return nx.linear(patches, W, b)


def add_positional(E, P) -> Tensor:
    M = nx._shape_of(E)[-2]
    rows = nx._shape_of(P)[0]
    if M > rows:
        raise CapacityError(f"sequence of {M} patches exceeds positional table of {rows}")
    if M == rows:
        return nx.add(E, P)
    return nx.add(E, nx.take_rows(P, np.arange(M)))


def apply_mask(E, indices, mask_emb) -> Tensor:
    """Replace the rows at ``indices`` with ``mask_emb``.

    ``E`` is (M, D) with a 1-D index set, or (B, M, D) with indices (B, m).
    """
    shape = nx._shape_of(E)
    M = shape[-2]
    idx = np.asarray(indices, dtype=np.int64)
    if len(shape) == 2:
        idx = idx.reshape(-1)
        rows = idx[None]
    else:
        rows = idx.reshape(shape[0], -1)
    if rows.size and (rows.min() < 0 or rows.max() >= M):
        raise ContractError(f"mask index out of range [0, {M})")
    for r in rows:
        if np.unique(r).size != r.size:
            raise ContractError("duplicate mask index")
    if rows.size == 0:
        return E if isinstance(E, Tensor) else nx.as_tensor(E)
    return nx.replace_rows(E, idx if len(shape) == 2 else rows, mask_emb)


def final_norm(H, params, norm: str) -> Tensor:
    if norm == "layer":
        return nx.layer_norm(H, params["final_norm.g"], params.get("final_norm.b"))
    return nx.rms_norm(H, params["final_norm.g"])


def block_weights(params: dict[str, Tensor], i: int) -> dict[str, Tensor]:
    prefix = f"blocks.{i}."
    return {k[len(prefix):]: v for k, v in params.items() if k.startswith(prefix)}


def encode(E_prime, params: dict[str, Tensor], cfg: ModelConfig) -> Tensor:
    H = nx.as_tensor(E_prime)
    for i in range(cfg.depth):
        H = mamba_block(H, block_weights(params, i), cfg.mode, cfg.norm)
    return final_norm(H, params, cfg.norm)


def mlp_head(H, params: dict[str, Tensor], prefix: str) -> Tensor:
    h = nx.relu(nx.linear(H, params[f"{prefix}.W1"], params[f"{prefix}.b1"]))
    return nx.linear(h, params[f"{prefix}.W2"], params[f"{prefix}.b2"])


class EncoderModel:
    """Configuration plus the named parameter tensors of the encoder."""

    def __init__(self, config: ModelConfig, params: dict[str, Tensor]):
        self.config = config
        self.params = params

    @classmethod
    def init(cls, config: ModelConfig, seed: int = 42) -> "EncoderModel":
        return cls(config, init_encoder(config, nx.make_rng(seed, "encoder")))

    def forward(self, patches, mask_idx=None, positional: bool = True) -> Tensor:
        E = embed(patches, self.params["patch.W"], self.params["patch.b"])
        if mask_idx is not None:
            E = apply_mask(E, mask_idx, self.params["mask_emb"])
        if positional:
            E = add_positional(E, self.params["pos"])
        return encode(E, self.params, self.config)

    __call__ = forward

    def num_params(self) -> int:
        return int(sum(t.size for t in self.params.values()))


# --------------------------------------------------------------------------
# Losses

def infonce_loss(c, x, extra_negatives=None) -> Tensor:
    """Mean over i of -log softmax_j <c_i, x_j> at j = i.

    Candidates are the rows of ``x`` (optionally followed by
    ``extra_negatives``); the i-th row of ``x`` is the positive for ``c_i``.
    """
    N = nx._shape_of(c)[0]
    if N < 1:
        raise ContractError("infonce_loss needs at least one prediction")
    cand = x if extra_negatives is None else nx.concat([x, extra_negatives], axis=0)
    logits = nx.matmul(c, nx.transpose(cand))
    lsm = nx.log_softmax(logits, axis=-1)
    return nx.scale(nx.tmean(nx.pick(lsm, np.arange(N))), -1.0)


def mse_loss(x_hat, x) -> Tensor:
    """(1/N) sum_i ||x_hat_i - x_i||^2."""
    d = nx.sub(x_hat, x)
    N = nx._shape_of(x_hat)[0]
    return nx.scale(nx.tsum(nx.mul(d, d)), 1.0 / N)


def combined_loss(Ld, Lg, lam: float = 10.0) -> Tensor:
    if lam < 0:
        raise DomainError(f"loss weight must be >= 0, got {lam}")
    return nx.add(Ld, nx.scale(Lg, lam))


# --------------------------------------------------------------------------
# Pooling

def mean_pool(H) -> Tensor:
    return nx.tmean(H, axis=-2)


def column_center_seconds(col: np.ndarray) -> np.ndarray:
    """Mean centre time of the 16 frames in each patch column."""
    first_frame = np.asarray(col) * PATCH
    mid_frame = first_frame + (PATCH - 1) / 2.0
    return (mid_frame * HOP_LENGTH + WIN_LENGTH / 2.0) / SAMPLE_RATE


def segment_assignment(grid: tuple[int, int], segment_seconds: float = 1.0) -> np.ndarray:
    """Segment index of every token, given the (freq, time) patch grid."""
    fp, tp = grid
    seg_of_col = np.floor(column_center_seconds(np.arange(tp)) / segment_seconds).astype(np.int64)
    return np.repeat(seg_of_col, fp)   # tokens are time-major, frequency inner


def segment_matrix(grid, segment_seconds: float = 1.0, n_segments: int | None = None) -> np.ndarray:
    seg = segment_assignment(grid, segment_seconds)
    S = int(seg.max()) + 1 if n_segments is None else n_segments
    P = np.zeros((S, seg.size), dtype=np.float32)
    P[seg[seg < S], np.nonzero(seg < S)[0]] = 1.0
    counts = P.sum(axis=1, keepdims=True)
    if np.any(counts == 0):
        empty = int(np.nonzero(counts[:, 0] == 0)[0][0])
        raise ContractError(f"segment {empty} has no tokens")
    return P / counts


def segment_pool(H, grid, segment_seconds: float = 1.0, n_segments: int | None = None) -> Tensor:
    """Per-segment token means: (M, D) -> (S, D), or (B, M, D) -> (B, S, D)."""
    M = nx._shape_of(H)[-2]
    if grid[0] * grid[1] != M:
        raise DimensionError(f"grid {grid} does not match {M} tokens")
    return nx.matmul(segment_matrix(grid, segment_seconds, n_segments), H)


def resize_positional(P: np.ndarray, freq_patches: int, new_time_patches: int) -> np.ndarray:
    """Linearly interpolate a positional table along the time axis."""
    P = np.asarray(P)
    tp = P.shape[0] // freq_patches
    grid = P[: tp * freq_patches].reshape(tp, freq_patches, -1)
    src = np.linspace(0.0, 1.0, tp) if tp > 1 else np.zeros(1)
    dst = np.linspace(0.0, 1.0, new_time_patches)
    out = np.empty((new_time_patches,) + grid.shape[1:], dtype=P.dtype)
    for f in range(freq_patches):
        for d in range(grid.shape[2]):
            out[:, f, d] = np.interp(dst, src, grid[:, f, d])
    return out.reshape(new_time_patches * freq_patches, -1)


def with_time_capacity(model: EncoderModel, time_patches: int) -> EncoderModel:
    """Copy of ``model`` whose positional table covers ``time_patches`` columns."""
    cfg = replace(model.config, max_time_patches=time_patches)
    params = dict(model.params)
    params["pos"] = nx.parameter(
        resize_positional(model.params["pos"].data, cfg.freq_patches, time_patches), name="pos")
    return EncoderModel(cfg, params)
