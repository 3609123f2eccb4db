"""Masked-patch pretraining, fine-tuning, metrics and run checkpoints."""

from __future__ import annotations

import csv
import logging
import math
import zlib
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

import numpy as np

from . import features as ft
from . import numerics as nx
from .checkpoint import ShapeMismatchError, load_tensors, save_tensors
from .model import (EncoderModel, ModelConfig, combined_loss, encoder_param_shapes, head_param_shapes,
                    infonce_loss, init_heads, mean_pool, mlp_head, mse_loss, segment_assignment, segment_pool,
                    with_time_capacity)
from .numerics import AdamState, ContractError, NumericError, Tensor

log = logging.getLogger(__name__)

MASK_REFERENCE_PATCHES = 500


class DataError(ValueError):
    """Labels or corpus contents violate a precondition."""


# --------------------------------------------------------------------------
# Data containers

@dataclass
class PatchCorpus:
    """Equal-length normalized patch sequences plus their ids."""

    patches: np.ndarray                  # (K, M, 256)
    ids: list[str]
    grid: tuple[int, int]
    norm_mean: float = 0.0
    norm_std: float = 0.5

    def __len__(self) -> int:
        return self.patches.shape[0]

    @property
    def M(self) -> int:
        return self.patches.shape[1]

    @classmethod
    def from_spectrograms(cls, specs, ids, stats: tuple[float, float] | None = None) -> "PatchCorpus":
        specs = list(specs)
        if not specs:
            raise ft.IngestionError("empty corpus")
        mean, std = stats if stats is not None else ft.corpus_stats(specs)
        pad = (ft.FLOOR_VALUE - mean) / (2 * std)
        seqs = [ft.patchify(ft.normalize(s, mean, std), pad_value=pad) for s in specs]
        if len({p.grid for p in seqs}) != 1:
            raise DataError("spectrograms differ in length; standardize durations first")
        return cls(np.stack([p.flat for p in seqs]).astype(np.float32), list(ids), seqs[0].grid, mean, std)

    def subset(self, index) -> "PatchCorpus":
        index = np.asarray(index, dtype=np.int64)
        return replace(self, patches=self.patches[index], ids=[self.ids[i] for i in index])


@dataclass
class LabeledSet:
    corpus: PatchCorpus
    labels: np.ndarray        # (K,) single-label, (K, C) multi-hot, (K, S) per-segment

    def __len__(self) -> int:
        return len(self.corpus)

    def subset(self, index) -> "LabeledSet":
        index = np.asarray(index, dtype=np.int64)
        return LabeledSet(self.corpus.subset(index), self.labels[index])


# --------------------------------------------------------------------------
# Configs

@dataclass
class PretrainConfig:
    mask_count: int = 400
    lr: float = 1e-4
    batch_size: int = 8
    lam: float = 10.0
    max_epochs: int = 10
    patience: int = 3
    min_delta: float = 1e-4
    val_fraction: float = 0.1
    eval_every: int | None = None        # steps between evaluations; None means once per epoch
    max_steps: int | None = None
    negatives: str = "masked"            # "masked" or "all"
    seed: int = 42

    def __post_init__(self):
        if self.mask_count < 0:
            raise ValueError("mask_count must be >= 0")
        if self.lr <= 0:
            raise ValueError("lr must be > 0")
        if self.lam < 0:
            raise ValueError("lam must be >= 0")
        if self.negatives not in ("masked", "all"):
            raise ValueError("negatives must be 'masked' or 'all'")


@dataclass
class FinetuneConfig:
    task: str = "single"                 # "single", "multi" or "segment"
    num_classes: int = 2
    lr: float = 1e-4
    larger_head_lr: bool = False
    head_lr_multiplier: float | None = None
    epochs: int = 10
    batch_size: int = 8
    segment_seconds: float = 1.0
    seed: int = 42

    def __post_init__(self):
        if self.task not in ("single", "multi", "segment"):
            raise ValueError(f"unknown task {self.task!r}")
        if self.num_classes < 2:
            raise ValueError("num_classes must be >= 2")

    @property
    def head_multiplier(self) -> float:
        if self.head_lr_multiplier is not None:
            return float(self.head_lr_multiplier)
        return 10.0 if self.larger_head_lr else 1.0


# --------------------------------------------------------------------------
# Masking

def sample_mask(M: int, m: int, rng: np.random.Generator) -> np.ndarray:
    """``m`` distinct positions out of ``M``, uniform without replacement, sorted."""
    if m > M:
        raise ContractError(f"cannot mask {m} of {M} patches")
    if m < 0:
        raise ContractError("mask count must be >= 0")
    return np.sort(rng.choice(M, size=m, replace=False)).astype(np.int64)


def effective_mask_count(m: int, M: int, reference: int = MASK_REFERENCE_PATCHES) -> int:
    """Scale a mask setting given for ``reference`` patches to a sequence of M."""
    if m == 0:
        return 0
    return int(min(M, max(1, round(m * M / reference))))


# --------------------------------------------------------------------------
# Early stopping

class EarlyStopping:
    """Counts evaluations without improvement of more than ``min_delta``."""

    def __init__(self, patience: int = 3, min_delta: float = 1e-4, best: float = math.inf, bad: int = 0):
        self.patience = patience
        self.min_delta = min_delta
        self.best = best
        self.bad = bad

    def update(self, value: float) -> bool:
        """Record one evaluation; True once patience is exhausted."""
        if value < self.best - self.min_delta:
            self.best = value
            self.bad = 0
        else:
            self.bad += 1
        return self.bad >= self.patience

    @property
    def improved(self) -> bool:
        return self.bad == 0


# --------------------------------------------------------------------------
# Pretraining

@dataclass
class TrainRun:
    model: EncoderModel
    heads: dict[str, Tensor]
    config: PretrainConfig
    adam: AdamState
    epoch: int = 0
    step: int = 0
    best_val: float = math.inf
    bad_evals: int = 0
    norm_mean: float = 0.0
    norm_std: float = 0.5
    log: list[dict] = field(default_factory=list)
    evals: list[dict] = field(default_factory=list)
    mask_stats: list[dict] = field(default_factory=list)

    @classmethod
    def create(cls, model_config: ModelConfig, config: PretrainConfig,
               norm_mean: float = 0.0, norm_std: float = 0.5) -> "TrainRun":
        model = EncoderModel.init(model_config, config.seed)
        heads = init_heads(model_config, nx.make_rng(config.seed, "heads"))
        return cls(model, heads, config, AdamState(lr=config.lr),
                   norm_mean=norm_mean, norm_std=norm_std)

    def trainable(self) -> dict[str, Tensor]:
        out = {f"encoder.{k}": v for k, v in self.model.params.items()}
        out.update({f"heads.{k}": v for k, v in self.heads.items()})
        return out


def masked_losses(batch: np.ndarray, idx: np.ndarray, model: EncoderModel, heads: dict[str, Tensor],
                  lam: float, negatives: str = "masked"):
    """Forward pass with masking; returns (L, L_d, L_g) tensors."""
    B, M, P = batch.shape
    H = model(batch, idx)
    D = model.config.embed_dim
    Hm = nx.reshape(nx.take_rows(H, idx), (-1, D))
    target = np.take_along_axis(batch, idx[..., None], axis=1).reshape(-1, P)
    extra = None
    if negatives == "all":
        keep = np.ones((B, M), dtype=bool)
        np.put_along_axis(keep, idx, False, axis=1)
        extra = batch[keep]
    Ld = infonce_loss(mlp_head(Hm, heads, "cls"), target, extra)
    Lg = mse_loss(mlp_head(Hm, heads, "rec"), target)
    return combined_loss(Ld, Lg, lam), Ld, Lg


def _batch_masks(B: int, M: int, m: int, rng: np.random.Generator) -> np.ndarray:
    return np.stack([sample_mask(M, m, rng) for _ in range(B)]) if B else np.zeros((0, m), np.int64)


def pretrain_step(batch: np.ndarray, run: TrainRun, rng: np.random.Generator | None = None):
    """One masked forward/backward/Adam update; returns (L, L_d, L_g) as floats."""
    cfg = run.config
    batch = np.asarray(batch, dtype=np.float32)
    B, M, _ = batch.shape
    m = effective_mask_count(cfg.mask_count, M)
    rng = rng if rng is not None else nx.make_rng(cfg.seed, "mask", run.step)
    idx = _batch_masks(B, M, m, rng)
    params = run.trainable()
    if m == 0:
        grads = {k: np.zeros_like(v.data) for k, v in params.items()}
        L = Ld = Lg = 0.0
    else:
        with nx.GradTape() as tape:
            tape.watch(params)
            L_t, Ld_t, Lg_t = masked_losses(batch, idx, run.model, run.heads, cfg.lam, cfg.negatives)
        grads = tape.backward(L_t)
        L, Ld, Lg = L_t.item(), Ld_t.item(), Lg_t.item()
        if not (math.isfinite(L) and all(np.all(np.isfinite(g)) for g in grads.values())):
            gmax = max(float(np.nanmax(np.abs(g))) if g.size else 0.0 for g in grads.values())
            raise NumericError(f"step {run.step}: non-finite loss L={L} (max |grad| = {gmax:.3g})")
    nx.adam_step(params, grads, run.adam)
    run.mask_stats.append({"step": run.step, "masked": m, "of": M,
                           "coverage": float(np.unique(idx).size) / M if m else 0.0})
    run.step += 1
    return L, Ld, Lg


def validation_loss(corpus: PatchCorpus, run: TrainRun) -> float:
    """Mean combined loss on ``corpus`` with masks fixed by the run seed."""
    cfg = run.config
    m = effective_mask_count(cfg.mask_count, corpus.M)
    if m == 0 or len(corpus) == 0:
        return 0.0
    rng = nx.make_rng(cfg.seed, "validation")
    total, count = 0.0, 0
    with nx.no_grad():
        for s in range(0, len(corpus), cfg.batch_size):
            batch = corpus.patches[s:s + cfg.batch_size]
            idx = _batch_masks(batch.shape[0], corpus.M, m, rng)
            L, _, _ = masked_losses(batch, idx, run.model, run.heads, cfg.lam, cfg.negatives)
            total += L.item() * batch.shape[0]
            count += batch.shape[0]
    return float(np.float32(total / count))


def split_validation(ids, fraction: float = 0.1) -> tuple[np.ndarray, np.ndarray]:
    """Deterministic hash split; at least one item on each side when possible."""
    h = np.array([zlib.crc32(str(i).encode()) % 10000 for i in ids])
    val = h < int(round(fraction * 10000))
    if len(ids) >= 2:
        if not val.any() and fraction > 0:
            val[np.argmin(h)] = True
        if val.all():
            val[np.argmax(h)] = False
    return np.nonzero(~val)[0], np.nonzero(val)[0]


@dataclass
class PretrainResult:
    run: TrainRun
    best_params: dict[str, np.ndarray]
    stopped_early: bool


LOG_FIELDS = ("step", "epoch", "L", "L_d", "L_g", "lr")


def pretrain(corpus: PatchCorpus, config: PretrainConfig, model_config: ModelConfig | None = None,
             out_dir=None, run: TrainRun | None = None) -> PretrainResult:
    """Epoch loop with hash-split validation and early stopping.

    With ``out_dir`` the best and final runs are written as ``best.ckpt``
    and ``last.ckpt`` and the curves as ``pretrain_log.csv`` / ``eval.csv``.
    """
    if len(corpus) == 0:
        raise ft.IngestionError("empty corpus")
    if run is None:
        run = TrainRun.create(model_config or ModelConfig(), config, corpus.norm_mean, corpus.norm_std)
    train_idx, val_idx = split_validation(corpus.ids, config.val_fraction)
    train = corpus.subset(train_idx)
    val = corpus.subset(val_idx) if len(val_idx) else train
    out = Path(out_dir) if out_dir is not None else None
    stopper = EarlyStopping(config.patience, config.min_delta, run.best_val, run.bad_evals)
    best = {k: v.data.copy() for k, v in run.trainable().items()}
    stopped = False

    def evaluate() -> bool:
        nonlocal best
        v = validation_loss(val, run)
        stop = stopper.update(v)
        run.best_val, run.bad_evals = stopper.best, stopper.bad
        run.evals.append({"step": run.step, "epoch": run.epoch, "metric": "val_loss", "value": v})
        log.info("epoch %d step %d val_loss %.5f", run.epoch, run.step, v)
        if stopper.improved:
            best = {k: t.data.copy() for k, t in run.trainable().items()}
            if out is not None:
                save_checkpoint(run, out / "best.ckpt")
        return stop

    budget_spent = False
    while run.epoch < config.max_epochs and not (stopped or budget_spent):
        order = nx.make_rng(config.seed, "shuffle", run.epoch).permutation(len(train))
        for s in range(0, len(order), config.batch_size):
            batch = train.patches[order[s:s + config.batch_size]]
            L, Ld, Lg = pretrain_step(batch, run)
            run.log.append({"step": run.step - 1, "epoch": run.epoch, "L": L, "L_d": Ld, "L_g": Lg,
                            "lr": run.adam.lr})
            if config.eval_every and run.step % config.eval_every == 0 and evaluate():
                stopped = True
                break
            if config.max_steps is not None and run.step >= config.max_steps:
                budget_spent = True
                break
        run.epoch += 1
        if not config.eval_every and not stopped and evaluate():
            stopped = True

    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        save_checkpoint(run, out / "last.ckpt")
        write_csv(out / "pretrain_log.csv", LOG_FIELDS, run.log)
        write_csv(out / "eval.csv", ("step", "epoch", "metric", "value"), run.evals)
        write_csv(out / "mask_stats.csv", ("step", "masked", "of", "coverage"), run.mask_stats)
    return PretrainResult(run, best, stopped)


def write_csv(path, columns, rows) -> None:
    with open(path, "w", newline="", encoding="utf-8") as f:
        w = csv.DictWriter(f, fieldnames=list(columns), extrasaction="ignore")
        w.writeheader()
        for r in rows:
            w.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in r.items()})


# --------------------------------------------------------------------------
# Fine-tuning

@dataclass
class Classifier:
    model: EncoderModel
    head: dict[str, Tensor]
    config: FinetuneConfig
    grid: tuple[int, int]
    norm_mean: float = 0.0
    norm_std: float = 0.5

    def logits(self, patches) -> Tensor:
        H = self.model(patches)
        if self.config.task == "segment":
            pooled = segment_pool(H, self.grid, self.config.segment_seconds)
        else:
            pooled = mean_pool(H)
        return nx.linear(pooled, self.head["W"], self.head["b"])

    def predict_scores(self, patches, batch_size: int = 16) -> np.ndarray:
        outs = []
        with nx.no_grad():
            for s in range(0, len(patches), batch_size):
                outs.append(self.logits(np.asarray(patches[s:s + batch_size], np.float32)).data)
        return np.concatenate(outs) if outs else np.zeros((0, self.config.num_classes))


def init_classifier_head(D: int, num_classes: int, rng: np.random.Generator) -> dict[str, Tensor]:
    return {"W": nx.parameter(rng.normal(0, 0.02, (D, num_classes)).astype(np.float32), name="W"),
            "b": nx.parameter(np.zeros(num_classes, np.float32), name="b")}


def classification_loss(logits: Tensor, labels: np.ndarray, task: str) -> Tensor:
    if task == "multi":
        y = np.asarray(labels, dtype=logits.dtype)
        # binary cross-entropy with logits: softplus(z) - y z
        return nx.tmean(nx.sub(nx.softplus(logits), nx.mul(logits, y)))
    C = logits.shape[-1]
    flat = nx.reshape(logits, (-1, C))
    y = np.asarray(labels, dtype=np.int64).reshape(-1)
    return nx.scale(nx.tmean(nx.pick(nx.log_softmax(flat), y)), -1.0)


def _check_labels(labels: np.ndarray, cfg: FinetuneConfig, grid=None) -> None:
    labels = np.asarray(labels)
    if cfg.task == "segment" and grid is not None:
        S = int(segment_assignment(grid, cfg.segment_seconds).max()) + 1
        if labels.ndim != 2 or labels.shape[1] != S:
            raise DataError(f"segment targets must be (K, {S}) for a {grid} grid, got {labels.shape}")
    if cfg.task == "multi":
        if labels.ndim != 2 or labels.shape[1] != cfg.num_classes:
            raise DataError(f"multi-label targets must be (K, {cfg.num_classes})")
        if not np.isin(labels, (0, 1)).all():
            raise DataError("multi-label targets must be 0/1")
        return
    if labels.size and (labels.min() < 0 or labels.max() >= cfg.num_classes
                        or not np.all(labels == np.round(labels))):
        raise DataError(f"label outside [0, {cfg.num_classes})")


@dataclass
class FinetuneResult:
    classifier: Classifier
    metrics: dict[str, float]
    history: list[dict]


def finetune(source, train: LabeledSet, config: FinetuneConfig, eval_set: LabeledSet | None = None,
             out_dir=None) -> FinetuneResult:
    """Train encoder plus a linear head on pooled tokens, no masking.

    ``source`` is an :class:`EncoderModel`, a :class:`TrainRun`, or a path
    to a run checkpoint.  The mask embedding is not trained.
    """
    if isinstance(source, (str, Path)):
        source = load_checkpoint(source)
    if isinstance(source, TrainRun):
        norm = (source.norm_mean, source.norm_std)
        source = source.model
    else:
        norm = (train.corpus.norm_mean, train.corpus.norm_std)
    _check_labels(train.labels, config, train.corpus.grid)
    model = EncoderModel(source.config, {k: nx.parameter(v.data.copy(), name=k)
                                         for k, v in source.params.items()})
    if train.corpus.grid[1] > model.config.max_time_patches:
        model = with_time_capacity(model, train.corpus.grid[1])
    head = init_classifier_head(model.config.embed_dim, config.num_classes,
                                nx.make_rng(config.seed, "classifier"))
    clf = Classifier(model, head, config, train.corpus.grid, *norm)
    params = {f"encoder.{k}": v for k, v in model.params.items() if k != "mask_emb"}
    params.update({f"head.{k}": v for k, v in head.items()})
    scale = {f"head.{k}": config.head_multiplier for k in head}
    adam = AdamState(lr=config.lr)
    history = []
    step = 0
    for epoch in range(config.epochs):
        order = nx.make_rng(config.seed, "ft-shuffle", epoch).permutation(len(train))
        for s in range(0, len(order), config.batch_size):
            sel = order[s:s + config.batch_size]
            with nx.GradTape() as tape:
                tape.watch(params)
                loss = classification_loss(clf.logits(train.corpus.patches[sel]), train.labels[sel], config.task)
            grads = tape.backward(loss)
            if not math.isfinite(loss.item()):
                raise NumericError(f"fine-tune step {step}: non-finite loss")
            nx.adam_step(params, grads, adam, scale)
            history.append({"step": step, "epoch": epoch, "loss": loss.item()})
            step += 1
    metrics = evaluate(clf, eval_set) if eval_set is not None else evaluate(clf, train)
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        save_classifier(clf, out / "finetuned.ckpt")
        write_csv(out / "finetune_log.csv", ("step", "epoch", "loss"), history)
        write_metrics(out / "metrics.csv", metrics)
    return FinetuneResult(clf, metrics, history)


def evaluate(clf: Classifier, data: LabeledSet) -> dict[str, float]:
    scores = clf.predict_scores(data.corpus.patches)
    task = clf.config.task
    if task == "multi":
        return {"mAP": mean_ap(scores, data.labels)}
    preds = scores.argmax(axis=-1)
    out = {"accuracy": accuracy(preds.reshape(-1), np.asarray(data.labels).reshape(-1))}
    if task == "segment":
        C = scores.shape[-1]
        onehot = np.eye(C)[np.asarray(data.labels, dtype=np.int64).reshape(-1)]
        out["mAP"] = mean_ap(scores.reshape(-1, C), onehot)
    return out


def write_metrics(path, metrics: dict[str, float]) -> None:
    write_csv(path, ("metric", "value"), [{"metric": k, "value": float(v)} for k, v in metrics.items()])


# --------------------------------------------------------------------------
# Metrics

def accuracy(preds, labels) -> float:
    preds, labels = np.asarray(preds), np.asarray(labels)
    if preds.shape != labels.shape:
        raise ContractError(f"accuracy: {preds.shape} predictions vs {labels.shape} labels")
    if preds.size == 0:
        raise ContractError("accuracy of an empty set")
    return float(np.mean(preds == labels))


def average_precision(scores, positives) -> float:
    """Precision averaged at the rank of each positive (ties broken by index)."""
    scores = np.asarray(scores, dtype=np.float64)
    positives = np.asarray(positives).astype(bool)
    order = np.argsort(-scores, kind="stable")
    hits = positives[order]
    if not hits.any():
        return float("nan")
    ranks = np.nonzero(hits)[0] + 1
    return float(np.mean(np.arange(1, ranks.size + 1) / ranks))


def mean_ap(scores, labels) -> float:
    """Unweighted mean of per-class AP, skipping classes without positives."""
    scores, labels = np.asarray(scores), np.asarray(labels)
    if scores.shape != labels.shape:
        raise ContractError(f"mean_ap: scores {scores.shape} vs labels {labels.shape}")
    aps = [average_precision(scores[:, c], labels[:, c]) for c in range(scores.shape[1])
           if np.any(labels[:, c])]
    return float(np.mean(aps)) if aps else float("nan")


# --------------------------------------------------------------------------
# Checkpoints

_NORM_CODE = {"rms": 0, "layer": 1}
_TASK_CODE = {"single": 0, "multi": 1, "segment": 2}


def _config_vector(cfg: ModelConfig) -> np.ndarray:
    return np.array([cfg.embed_dim, cfg.depth, cfg.expand, cfg.d_state, cfg.d_conv,
                     -1 if cfg.dt_rank is None else cfg.dt_rank, cfg.patch_dim, cfg.freq_patches,
                     cfg.max_time_patches, _NORM_CODE[cfg.norm], int(cfg.bidirectional),
                     -1 if cfg.head_hidden is None else cfg.head_hidden], dtype=np.float32)


def config_from_vector(v: np.ndarray) -> ModelConfig:
    v = [int(x) for x in np.asarray(v)]
    return ModelConfig(embed_dim=v[0], depth=v[1], expand=v[2], d_state=v[3], d_conv=v[4],
                       dt_rank=None if v[5] < 0 else v[5], patch_dim=v[6], freq_patches=v[7],
                       max_time_patches=v[8], norm="layer" if v[9] == 1 else "rms",
                       bidirectional=bool(v[10]), head_hidden=None if v[11] < 0 else v[11])


def _u16_parts(n: int) -> np.ndarray:
    n = int(n) & 0xFFFFFFFFFFFFFFFF
    return np.array([(n >> s) & 0xFFFF for s in (48, 32, 16, 0)], dtype=np.float32)


def _from_u16_parts(v) -> int:
    out = 0
    for x in np.asarray(v):
        out = (out << 16) | int(x)
    return out


def run_tensors(run: TrainRun) -> dict[str, np.ndarray]:
    t: dict[str, np.ndarray] = {"meta.config": _config_vector(run.model.config)}
    c = run.config
    t["meta.pretrain"] = np.array([c.mask_count, c.lr, c.batch_size, c.lam, c.max_epochs, c.patience,
                                   c.min_delta, c.val_fraction, c.eval_every or 0, c.max_steps or -1,
                                   int(c.negatives == "all")], dtype=np.float32)
    t["norm.mean"] = np.array([run.norm_mean], np.float32)
    t["norm.std"] = np.array([run.norm_std], np.float32)
    t["run.seed"] = _u16_parts(c.seed)
    t["run.counters"] = np.array([run.epoch, run.step, run.bad_evals], np.float32)
    t["run.best_val"] = np.array([run.best_val], np.float32)
    t["adam.t"] = np.array([run.adam.t], np.float32)
    for k, v in run.model.params.items():
        t[f"encoder.{k}"] = v.data
    for k, v in run.heads.items():
        t[f"heads.{k}"] = v.data
    for k in run.trainable():
        if k in run.adam.m:
            t[f"adam.m.{k}"] = run.adam.m[k]
            t[f"adam.v.{k}"] = run.adam.v[k]
    return t


def save_checkpoint(run: TrainRun, path) -> None:
    save_tensors(path, run_tensors(run))


def check_shapes(tensors: dict[str, np.ndarray], expected: dict[str, tuple], prefix: str) -> None:
    for name, shape in expected.items():
        key = prefix + name
        if key not in tensors:
            raise ShapeMismatchError(key, shape, ())
        if tuple(tensors[key].shape) != tuple(shape):
            raise ShapeMismatchError(key, shape, tensors[key].shape)


def load_checkpoint(path, model_config: ModelConfig | None = None) -> TrainRun:
    """Rebuild a :class:`TrainRun`; with ``model_config`` shapes are validated against it."""
    t = load_tensors(path)
    cfg = model_config or config_from_vector(t["meta.config"])
    check_shapes(t, encoder_param_shapes(cfg), "encoder.")
    has_heads = any(k.startswith("heads.") for k in t)
    if has_heads:
        check_shapes(t, head_param_shapes(cfg), "heads.")
    model = EncoderModel(cfg, {k: nx.parameter(t[f"encoder.{k}"].copy(), name=k)
                               for k in encoder_param_shapes(cfg)})
    heads = ({k: nx.parameter(t[f"heads.{k}"].copy(), name=k) for k in head_param_shapes(cfg)}
             if has_heads else init_heads(cfg, nx.make_rng(0, "heads")))
    p = t.get("meta.pretrain")
    if p is not None:
        pc = PretrainConfig(mask_count=int(p[0]), lr=float(p[1]), batch_size=int(p[2]), lam=float(p[3]),
                            max_epochs=int(p[4]), patience=int(p[5]), min_delta=float(p[6]),
                            val_fraction=float(p[7]), eval_every=int(p[8]) or None,
                            max_steps=None if p[9] < 0 else int(p[9]),
                            negatives="all" if p[10] else "masked",
                            seed=_from_u16_parts(t["run.seed"]))
    else:
        pc = PretrainConfig()
    adam = AdamState(lr=pc.lr, t=int(t.get("adam.t", [0])[0]))
    for k in t:
        if k.startswith("adam.m."):
            name = k[len("adam.m."):]
            adam.m[name] = t[k].copy()
            adam.v[name] = t[f"adam.v.{name}"].copy()
    counters = t.get("run.counters", np.zeros(3))
    return TrainRun(model, heads, pc, adam, epoch=int(counters[0]), step=int(counters[1]),
                    best_val=float(t.get("run.best_val", [math.inf])[0]), bad_evals=int(counters[2]),
                    norm_mean=float(t.get("norm.mean", [0.0])[0]), norm_std=float(t.get("norm.std", [0.5])[0]))


def save_classifier(clf: Classifier, path) -> None:
    t = {"meta.config": _config_vector(clf.model.config),
         "meta.finetune": np.array([_TASK_CODE[clf.config.task], clf.config.num_classes,
                                    clf.config.segment_seconds, *clf.grid], np.float32),
         "norm.mean": np.array([clf.norm_mean], np.float32),
         "norm.std": np.array([clf.norm_std], np.float32)}
    for k, v in clf.model.params.items():
        t[f"encoder.{k}"] = v.data
    for k, v in clf.head.items():
        t[f"head.{k}"] = v.data
    save_tensors(path, t)


def load_classifier(path) -> Classifier:
    t = load_tensors(path)
    if "meta.finetune" not in t:
        raise DataError(f"{path}: not a fine-tuned checkpoint")
    cfg = config_from_vector(t["meta.config"])
    check_shapes(t, encoder_param_shapes(cfg), "encoder.")
    f = t["meta.finetune"]
    task = {v: k for k, v in _TASK_CODE.items()}[int(f[0])]
    fc = FinetuneConfig(task=task, num_classes=int(f[1]), segment_seconds=float(f[2]))
    model = EncoderModel(cfg, {k: nx.parameter(t[f"encoder.{k}"].copy(), name=k)
                               for k in encoder_param_shapes(cfg)})
    head = {k: nx.parameter(t[f"head.{k}"].copy(), name=k) for k in ("W", "b")}
    return Classifier(model, head, fc, (int(f[3]), int(f[4])),
                      float(t["norm.mean"][0]), float(t["norm.std"][0]))


def config_fields(cls) -> list[str]:
    return [f.name for f in fields(cls)]


def config_dict(cfg) -> dict:
    return asdict(cfg)
