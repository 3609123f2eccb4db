"""Forward-pass cost of the Mamba encoder against a self-attention reference.

Both encoders share the patch embedding and positional table and run the
same depth and width, so the only difference is the token mixer.  For every
sequence length M the sweep records median wall-clock time, an analytic
count of activation bytes live at the widest point of the forward pass, and
the traced allocation peak.
"""

from __future__ import annotations

import csv
import math
import statistics
import time
import tracemalloc
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
from threadpoolctl import threadpool_limits

from . import numerics as nx
from .model import EncoderModel, ModelConfig, add_positional, embed, encode, preset
from .numerics import DomainError, Tensor

KINDS = ("ssm", "attention")
BYTES = 4  # float32 activations
MIN_SPAN = 8  # an exponent fit needs lengths covering at least this ratio


# --------------------------------------------------------------------------
# Attention reference

def attention_heads(embed_dim: int) -> int:
    return max(1, embed_dim // 64)


def init_attention(cfg: ModelConfig, rng: np.random.Generator) -> dict[str, Tensor]:
    """Pre-norm transformer layers matched to the encoder's depth and width."""
    D = cfg.embed_dim
    p = {}
    for i in range(cfg.depth):
        pre = f"layers.{i}"
        p[f"{pre}.ln1_g"] = np.ones(D)
        p[f"{pre}.ln1_b"] = np.zeros(D)
        p[f"{pre}.W_qkv"] = rng.normal(0, 1 / math.sqrt(D), (D, 3 * D))
        p[f"{pre}.b_qkv"] = np.zeros(3 * D)
        p[f"{pre}.W_o"] = rng.normal(0, 1 / math.sqrt(D), (D, D))
        p[f"{pre}.b_o"] = np.zeros(D)
        p[f"{pre}.ln2_g"] = np.ones(D)
        p[f"{pre}.ln2_b"] = np.zeros(D)
        p[f"{pre}.W_1"] = rng.normal(0, 1 / math.sqrt(D), (D, 4 * D))
        p[f"{pre}.b_1"] = np.zeros(4 * D)
        p[f"{pre}.W_2"] = rng.normal(0, 1 / math.sqrt(4 * D), (4 * D, D))
        p[f"{pre}.b_2"] = np.zeros(D)
    p["final_norm.g"] = np.ones(D)
    p["final_norm.b"] = np.zeros(D)
    return {k: nx.parameter(np.asarray(v, np.float32), name=k) for k, v in p.items()}


def _split_heads(x: Tensor, heads: int) -> Tensor:
    *lead, M, D = x.shape
    x = nx.reshape(x, (*lead, M, heads, D // heads))
    n = len(lead)
    return nx.transpose(x, tuple(range(n)) + (n + 1, n, n + 2))


def _merge_heads(x: Tensor) -> Tensor:
    *lead, h, M, dh = x.shape
    n = len(lead)
    x = nx.transpose(x, tuple(range(n)) + (n + 1, n, n + 2))
    return nx.reshape(x, (*lead, M, h * dh))


def scaled_dot_attention(q, k, v) -> Tensor:
    """softmax(q k^T / sqrt(d)) v over the last two axes; scores are materialized."""
    d = q.shape[-1]
    kt = nx.transpose(k, tuple(range(k.ndim - 2)) + (k.ndim - 1, k.ndim - 2))
    scores = nx.scale(nx.matmul(q, kt), 1.0 / math.sqrt(d))
    return nx.matmul(nx.softmax(scores, axis=-1), v)


def attention_layer(x: Tensor, w: dict[str, Tensor], heads: int) -> Tensor:
    D = x.shape[-1]
    h = nx.layer_norm(x, w["ln1_g"], w["ln1_b"])
    qkv = nx.linear(h, w["W_qkv"], w["b_qkv"])
    q, k, v = (_split_heads(nx.narrow(qkv, j * D, (j + 1) * D), heads) for j in range(3))
    o = _merge_heads(scaled_dot_attention(q, k, v))
    x = nx.add(x, nx.linear(o, w["W_o"], w["b_o"]))
    f = nx.gelu(nx.linear(nx.layer_norm(x, w["ln2_g"], w["ln2_b"]), w["W_1"], w["b_1"]))
    return nx.add(x, nx.linear(f, w["W_2"], w["b_2"]))


def attention_forward(E, params: dict[str, Tensor], depth: int, heads: int | None = None) -> Tensor:
    """Run ``depth`` attention layers on (M, D) or (B, M, D) embeddings."""
    x = nx.as_tensor(E)
    heads = heads or attention_heads(x.shape[-1])
    if x.shape[-1] % heads:
        raise nx.DimensionError(f"embed dim {x.shape[-1]} not divisible by {heads} heads")
    for i in range(depth):
        pre = f"layers.{i}."
        w = {k[len(pre):]: t for k, t in params.items() if k.startswith(pre)}
        x = attention_layer(x, w, heads)
    return nx.layer_norm(x, params["final_norm.g"], params["final_norm.b"])


class AttentionModel:
    def __init__(self, config: ModelConfig, params: dict[str, Tensor], shared: dict[str, Tensor]):
        self.config = config
        self.params = params
        self.shared = shared

    @classmethod
    def init(cls, config: ModelConfig, seed: int = 42) -> "AttentionModel":
        enc = EncoderModel.init(replace(config, depth=0), seed)
        return cls(config, init_attention(config, nx.make_rng(seed, "attention")), enc.params)

    def forward(self, patches) -> Tensor:
        E = embed(patches, self.shared["patch.W"], self.shared["patch.b"])
        E = add_positional(E, self.shared["pos"])
        return attention_forward(E, self.params, self.config.depth)

    __call__ = forward


# --------------------------------------------------------------------------
# Analytic memory

def analytic_bytes(kind: str, cfg: ModelConfig, M: int, batch: int) -> int:
    """Activation bytes simultaneously live at the widest point of one layer.

    SSM: inside the reverse-direction scan the block holds its input and
    normed input (D each), the inner stream, gate, forward output, reversed
    stream, conv output, step sizes and scan output (7 x E*D), and the
    projected B and C (N each).  Attention: the residual stream, normed
    input, the three projections and the score and probability matrices.
    """
    D = cfg.embed_dim
    if kind == "ssm":
        dims = cfg.block_dims
        per_token = 2 * D + 7 * dims.d_inner + 2 * dims.d_state
        return BYTES * batch * M * per_token
    if kind == "attention":
        h = attention_heads(D)
        return BYTES * batch * (5 * M * D + 2 * h * M * M)
    raise ValueError(f"unknown model kind {kind!r}; choose from {KINDS}")


# --------------------------------------------------------------------------
# Measurement

@dataclass
class BenchPoint:
    kind: str
    preset: str
    batch: int
    M: int
    median_seconds: float
    analytic_bytes: int
    peak_bytes: int
    truncated: bool = False

    def row(self) -> dict:
        if self.truncated:
            return {"kind": self.kind, "preset": self.preset, "batch": self.batch, "M": self.M,
                    "median_seconds": "truncated", "analytic_bytes": self.analytic_bytes,
                    "peak_bytes": "truncated"}
        return {"kind": self.kind, "preset": self.preset, "batch": self.batch, "M": self.M,
                "median_seconds": f"{self.median_seconds:.6f}",
                "analytic_bytes": self.analytic_bytes, "peak_bytes": self.peak_bytes}


def bench_config(preset_name: str, M: int) -> ModelConfig:
    """Preset with a positional table long enough for M tokens."""
    cfg = preset(preset_name)
    return replace(cfg, max_time_patches=max(cfg.max_time_patches, -(-M // cfg.freq_patches)))


def build(kind: str, cfg: ModelConfig, seed: int = 0):
    if kind == "ssm":
        return EncoderModel.init(cfg, seed)
    if kind == "attention":
        return AttentionModel.init(cfg, seed)
    raise ValueError(f"unknown model kind {kind!r}; choose from {KINDS}")


def measure(kind: str, preset_name: str, M: int, batch: int = 4, trials: int = 5,
            warmups: int = 2, seed: int = 0, memory: bool = True,
            memory_limit: int | None = None, threads: int = 1) -> BenchPoint:
    """Median forward time over ``trials`` runs after ``warmups``, plus memory figures.

    Running out of memory, or an analytic estimate above ``memory_limit``,
    yields a point marked truncated instead of raising.
    """
    if M < 1 or batch < 1:
        raise nx.ContractError("M and batch must be positive")
    cfg = bench_config(preset_name, M)
    est = analytic_bytes(kind, cfg, M, batch)
    cut = BenchPoint(kind, preset_name, batch, M, math.nan, est, -1, truncated=True)
    if memory_limit is not None and est > memory_limit:
        return cut
    model = build(kind, cfg, seed)
    x = nx.make_rng(seed, "bench-input", M).standard_normal((batch, M, cfg.patch_dim)).astype(np.float32)
    try:
        with threadpool_limits(threads), nx.no_grad():
            for _ in range(warmups):
                model(x)
            times = []
            for _ in range(trials):
                t0 = time.perf_counter()
                model(x)
                times.append(time.perf_counter() - t0)
            peak = _traced_peak(model, x) if memory else -1
    except MemoryError:
        return cut
    return BenchPoint(kind, preset_name, batch, M, statistics.median(times), est, peak)


def _traced_peak(model, x) -> int:
    """Bytes allocated above the pre-call baseline at the high-water mark."""
    tracemalloc.start()
    try:
        base = tracemalloc.get_traced_memory()[0]
        tracemalloc.reset_peak()
        out = model(x)
        peak = tracemalloc.get_traced_memory()[1] - base
        del out
    finally:
        tracemalloc.stop()
    return int(peak)


def count_block_ops(cfg: ModelConfig, M: int, batch: int = 1, seed: int = 0) -> int:
    """Scalar work charged by one forward pass through the encoder blocks."""
    cfg = replace(cfg, max_time_patches=max(cfg.max_time_patches, -(-M // cfg.freq_patches)))
    model = EncoderModel.init(cfg, seed)
    E = nx.make_rng(seed, "ops", M).standard_normal((batch, M, cfg.embed_dim)).astype(np.float32)
    with nx.no_grad(), nx.count_ops() as counter:
        encode(E, model.params, cfg)
    return counter.total


# --------------------------------------------------------------------------
# Fits

@dataclass(frozen=True)
class ScalingFit:
    slope: float
    intercept: float
    r2: float


def fit_exponent(Ms, costs) -> ScalingFit:
    """Least-squares line through (log M, log cost)."""
    Ms = np.asarray(Ms, dtype=float)
    costs = np.asarray(costs, dtype=float)
    if Ms.shape != costs.shape:
        raise nx.DimensionError(f"{Ms.shape} lengths vs {costs.shape} costs")
    if len(Ms) < 4:
        raise nx.ContractError(f"need at least 4 points to fit an exponent, got {len(Ms)}")
    if np.any(Ms <= 0) or np.any(costs <= 0):
        raise DomainError("lengths and costs must be positive to take logs")
    if Ms.max() < MIN_SPAN * Ms.min():
        raise nx.ContractError(f"lengths span {Ms.max() / Ms.min():.1f}x, need at least {MIN_SPAN}x")
    lx, ly = np.log(Ms), np.log(costs)
    slope, intercept = np.polyfit(lx, ly, 1)
    resid = ly - (slope * lx + intercept)
    ss_tot = float(np.sum((ly - ly.mean()) ** 2))
    r2 = 1.0 - float(np.sum(resid**2)) / ss_tot if ss_tot > 0 else 1.0
    return ScalingFit(float(slope), float(intercept), r2)


# --------------------------------------------------------------------------
# Sweep

@dataclass
class BenchConfig:
    kinds: tuple[str, ...] = KINDS
    preset: str = "nano"
    lengths: tuple[int, ...] = (256, 512, 1024, 2048, 4096)
    batch: int = 4
    trials: int = 5
    warmups: int = 2
    memory_limit: int | None = 3 * 2**30
    threads: int = 1
    seed: int = 0

    def __post_init__(self):
        bad = [k for k in self.kinds if k not in KINDS]
        if bad:
            raise ValueError(f"unknown model kind {bad[0]!r}; choose from {KINDS}")
        self.kinds = tuple(self.kinds)
        self.lengths = tuple(int(m) for m in self.lengths)
        if not self.lengths or any(b <= a for a, b in zip(self.lengths, self.lengths[1:])):
            raise ValueError(f"sweep lengths must be strictly increasing, got {self.lengths}")


@dataclass
class SweepResult:
    config: BenchConfig
    points: list[BenchPoint]
    fits: dict[tuple[str, str], ScalingFit] = field(default_factory=dict)

    def of(self, kind: str, complete: bool = True) -> list[BenchPoint]:
        return [p for p in self.points if p.kind == kind and not (complete and p.truncated)]


METRICS = {"time": "median_seconds", "analytic_memory": "analytic_bytes", "peak_memory": "peak_bytes"}


def sweep(config: BenchConfig, out_dir=None, progress=None) -> SweepResult:
    points = []
    for kind in config.kinds:
        for M in config.lengths:
            p = measure(kind, config.preset, M, config.batch, config.trials, config.warmups,
                        config.seed, memory=True, memory_limit=config.memory_limit,
                        threads=config.threads)
            points.append(p)
            if progress:
                progress(p)
    result = SweepResult(config, points)
    for kind in config.kinds:
        pts = result.of(kind)
        if len(pts) < 4 or pts[-1].M < MIN_SPAN * pts[0].M:
            continue
        Ms = [p.M for p in pts]
        for metric, attr in METRICS.items():
            result.fits[(kind, metric)] = fit_exponent(Ms, [getattr(p, attr) for p in pts])
    if out_dir is not None:
        write_sweep(result, out_dir)
    return result


def write_sweep(result: SweepResult, out_dir) -> None:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    cols = ["kind", "preset", "batch", "M", "median_seconds", "analytic_bytes", "peak_bytes"]
    with open(out / "bench.csv", "w", newline="") as f:
        w = csv.DictWriter(f, fieldnames=cols)
        w.writeheader()
        for p in result.points:
            w.writerow(p.row())
    with open(out / "bench_summary.csv", "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["kind", "metric", "slope", "r2"])
        for (kind, metric), fit in result.fits.items():
            w.writerow([kind, metric, f"{fit.slope:.4f}", f"{fit.r2:.4f}"])


def scaling_checks(result: SweepResult) -> list[tuple[str, bool, str]]:
    """The expected scaling regime, one (name, passed, detail) per claim."""
    checks = []
    fits = result.fits

    def have(kind, metric):
        return (kind, metric) in fits

    if have("ssm", "time"):
        s = fits[("ssm", "time")].slope
        checks.append(("ssm time exponent <= 1.3", s <= 1.3, f"slope {s:.3f}"))
    if have("ssm", "analytic_memory"):
        s = fits[("ssm", "analytic_memory")].slope
        checks.append(("ssm memory exponent in [0.99, 1.05]", 0.99 <= s <= 1.05, f"slope {s:.3f}"))
    if have("attention", "time"):
        s = fits[("attention", "time")].slope
        checks.append(("attention time exponent >= 1.6", s >= 1.6, f"slope {s:.3f}"))
    att = sorted(result.of("attention"), key=lambda p: p.M)
    if len(att) >= 2:
        hi, lo = att[-1], att[-2]
        ratio = hi.analytic_bytes / lo.analytic_bytes
        ok = ratio >= 3.5 and hi.M == 2 * lo.M
        checks.append((f"attention memory ratio {lo.M}->{hi.M} >= 3.5", ok, f"ratio {ratio:.3f}"))
    ssm = {p.M: p for p in result.of("ssm")}
    common = [p.M for p in att if p.M in ssm]
    if common:
        M = max(common)
        a = next(p for p in att if p.M == M)
        s = ssm[M]
        checks.append((f"ssm faster than attention at M={M}", s.median_seconds < a.median_seconds,
                       f"{s.median_seconds:.3f}s vs {a.median_seconds:.3f}s"))
        checks.append((f"ssm smaller than attention at M={M}", s.analytic_bytes < a.analytic_bytes,
                       f"{s.analytic_bytes} vs {a.analytic_bytes} bytes"))
    return checks
