import csv
import math
from dataclasses import replace

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from ssamba import checkpoint as ck
from ssamba import features as ft
from ssamba import model as m
from ssamba import numerics as nx
from ssamba import training as tr
from ssamba.numerics import ContractError

TOY = replace(m.preset("nano"), depth=1, max_time_patches=2)


def toy_corpus(K=12, seed=0, tp=2):
    rng = np.random.default_rng(seed)
    patches = (rng.standard_normal((K, 8 * tp, 256)) * 0.5).astype(np.float32)
    return tr.PatchCorpus(patches, [f"clip{i}" for i in range(K)], (8, tp))


def read_csv(path):
    with open(path, newline="") as f:
        return list(csv.DictReader(f))


# -- masking --------------------------------------------------------------

def test_mask_full_and_empty():
    rng = np.random.default_rng(0)
    assert np.array_equal(tr.sample_mask(7, 7, rng), np.arange(7))
    assert tr.sample_mask(7, 0, rng).size == 0
    with pytest.raises(ContractError):
        tr.sample_mask(3, 4, rng)


def test_mask_deterministic_given_rng():
    a = tr.sample_mask(50, 10, nx.make_rng(1, "mask", 0))
    b = tr.sample_mask(50, 10, nx.make_rng(1, "mask", 0))
    assert np.array_equal(a, b) and np.unique(a).size == 10


def test_mask_index_frequencies():
    rng = np.random.default_rng(1)
    draws = 100_000
    counts = np.zeros(20)
    keys = rng.random((draws, 20)).argsort(axis=1)[:, :5]      # vectorized reference sampler
    np.add.at(counts, keys.reshape(-1), 1)
    # the library sampler over a smaller run, pooled with the same statistics check
    lib = np.zeros(20)
    for _ in range(20_000):
        lib[tr.sample_mask(20, 5, rng)] += 1
    for total, n in ((counts, draws), (lib, 20_000)):
        sigma = math.sqrt(n * 0.25 * 0.75)
        assert np.all(np.abs(total - 0.25 * n) < 3 * sigma + 1)


@settings(max_examples=30, deadline=None)
@given(st.integers(1, 600), st.sampled_from([250, 300, 400]))
def test_effective_mask_count(M, m_):
    k = tr.effective_mask_count(m_, M)
    assert 1 <= k <= M
    assert k == min(M, max(1, round(m_ * M / 500)))


def test_mask_settings_scale_for_short_clips():
    assert [tr.effective_mask_count(x, 104) for x in (400, 300, 250)] == [83, 62, 52]
    assert tr.effective_mask_count(400, 500) == 400


# -- early stopping -------------------------------------------------------

def test_early_stopping_sequence():
    es = tr.EarlyStopping(patience=3)
    stops = [es.update(v) for v in [5, 4, 4.1, 4.2, 4.05]]
    assert stops == [False, False, False, False, True]


def test_early_stopping_threshold_and_reset():
    es = tr.EarlyStopping(patience=2, min_delta=1e-4)
    es.update(1.0)
    assert not es.update(1.0 - 5e-5) and es.bad == 1      # not significant
    assert not es.update(0.5) and es.bad == 0              # counter resets


@settings(max_examples=40, deadline=None)
@given(st.lists(st.floats(0, 10), min_size=1, max_size=30), st.integers(1, 5))
def test_early_stopping_never_stops_before_patience(values, patience):
    es = tr.EarlyStopping(patience)
    for i, v in enumerate(values):
        if es.update(v):
            assert i + 1 >= patience + 1 or (i + 1 >= patience and es.best == math.inf) or es.bad == patience
            break


# -- pretraining ----------------------------------------------------------

def make_run(lam=10.0, seed=0, **kw):
    cfg = tr.PretrainConfig(lam=lam, seed=seed, batch_size=4, lr=1e-3, **kw)
    return tr.TrainRun.create(TOY, cfg)


def test_pretrain_step_returns_parts():
    run = make_run()
    L, Ld, Lg = tr.pretrain_step(toy_corpus().patches[:4], run)
    assert abs(L - (Ld + 10 * Lg)) <= 1e-6 * max(1.0, abs(L))
    assert run.step == 1 and run.adam.t == 1


def test_lambda_changes_nothing_before_first_update():
    x = toy_corpus().patches[:4]
    a, b = make_run(lam=0.0), make_run(lam=10.0)
    La = tr.pretrain_step(x, a)
    Lb = tr.pretrain_step(x, b)
    assert La[1] == Lb[1] and La[2] == Lb[2]
    La2 = tr.pretrain_step(x, a)
    Lb2 = tr.pretrain_step(x, b)
    assert La2[1] != Lb2[1]


def test_overfit_single_batch():
    run = make_run(mask_count=2000)
    x = toy_corpus(K=4).patches
    rng_state = nx.make_rng(0, "fixed-mask")
    idx_seed = rng_state.integers(2**31)
    losses = [tr.pretrain_step(x, run, np.random.default_rng(idx_seed))[0] for _ in range(50)]
    drops = sum(b < a for a, b in zip(losses, losses[1:]))
    assert drops >= 45


def test_zero_mask_gives_zero_generative_gradient():
    run = make_run(mask_count=0)
    before = {k: v.data.copy() for k, v in run.trainable().items()}
    L, Ld, Lg = tr.pretrain_step(toy_corpus().patches[:4], run)
    assert (L, Ld, Lg) == (0.0, 0.0, 0.0)
    for k, v in run.trainable().items():
        assert np.array_equal(v.data, before[k])


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_non_finite_loss_aborts():
    run = make_run()
    x = toy_corpus().patches[:2].copy()
    x[0, 0, 0] = np.inf
    with pytest.raises(nx.NumericError, match="step 0"):
        tr.pretrain_step(x, run)


def test_validation_split_is_hashed():
    ids = [f"clip{i}" for i in range(200)]
    tr_idx, val_idx = tr.split_validation(ids, 0.1)
    assert len(tr_idx) + len(val_idx) == 200 and 5 <= len(val_idx) <= 40
    assert np.array_equal(tr.split_validation(list(reversed(ids)), 0.1)[1],
                          np.sort(199 - val_idx))


def test_pretrain_outputs(tmp_path):
    cfg = tr.PretrainConfig(max_epochs=2, batch_size=4, lr=1e-3, seed=1)
    res = tr.pretrain(toy_corpus(), cfg, TOY, out_dir=tmp_path)
    for name in ("best.ckpt", "last.ckpt", "pretrain_log.csv", "eval.csv", "mask_stats.csv"):
        assert (tmp_path / name).exists()
    rows = read_csv(tmp_path / "pretrain_log.csv")
    assert list(rows[0]) == ["step", "epoch", "L", "L_d", "L_g", "lr"]
    for r in rows:
        assert abs(float(r["L"]) - float(r["L_d"]) - 10 * float(r["L_g"])) <= 1e-6 * max(1, abs(float(r["L"])))
    assert {r["epoch"] for r in rows} == {"0", "1"}
    assert len(read_csv(tmp_path / "eval.csv")) == 2
    run = tr.load_checkpoint(tmp_path / "best.ckpt")
    assert run.model.config == TOY


def test_pretrain_single_epoch_bound():
    cfg = tr.PretrainConfig(max_epochs=1, patience=1, batch_size=4, seed=2)
    res = tr.pretrain(toy_corpus(), cfg, TOY)
    assert res.run.epoch == 1 and {r["epoch"] for r in res.run.log} == {0}


def test_pretrain_early_stop_halts():
    cfg = tr.PretrainConfig(max_epochs=50, patience=1, min_delta=1e9, batch_size=4, seed=2)
    res = tr.pretrain(toy_corpus(), cfg, TOY)
    assert res.stopped_early and res.run.epoch == 2      # first eval always improves on inf


def test_pretrain_empty_corpus():
    empty = tr.PatchCorpus(np.zeros((0, 16, 256), np.float32), [], (8, 2))
    with pytest.raises(ft.IngestionError):
        tr.pretrain(empty, tr.PretrainConfig(), TOY)


def test_pretrain_deterministic(tmp_path):
    cfg = tr.PretrainConfig(max_epochs=1, batch_size=4, seed=5)
    for d in ("a", "b"):
        tr.pretrain(toy_corpus(), cfg, TOY, out_dir=tmp_path / d)
    for name in ("pretrain_log.csv", "best.ckpt", "last.ckpt"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()


def test_mask_stats_logged(tmp_path):
    cfg = tr.PretrainConfig(max_epochs=1, batch_size=4, mask_count=300, seed=0)
    tr.pretrain(toy_corpus(), cfg, TOY, out_dir=tmp_path)
    rows = read_csv(tmp_path / "mask_stats.csv")
    assert rows and all(int(r["masked"]) == tr.effective_mask_count(300, 16) for r in rows)


def test_config_validation():
    with pytest.raises(ValueError):
        tr.PretrainConfig(lr=0)
    with pytest.raises(ValueError):
        tr.PretrainConfig(lam=-1)
    with pytest.raises(ValueError):
        tr.FinetuneConfig(num_classes=1)
    assert tr.FinetuneConfig(larger_head_lr=True).head_multiplier == 10
    assert tr.FinetuneConfig().head_multiplier == 1


# -- fine-tuning ----------------------------------------------------------

def separable_set(K=16, seed=0):
    rng = np.random.default_rng(seed)
    labels = np.arange(K) % 2
    patches = rng.standard_normal((K, 16, 256)).astype(np.float32) * 0.1
    patches += np.where(labels[:, None, None] == 1, 1.0, -1.0).astype(np.float32)
    return tr.LabeledSet(tr.PatchCorpus(patches, [f"s{i}" for i in range(K)], (8, 2)), labels)


def test_finetune_separable_reaches_full_accuracy():
    data = separable_set()
    cfg = tr.FinetuneConfig(num_classes=2, lr=1e-3, epochs=25, batch_size=8, seed=0)
    res = tr.finetune(m.EncoderModel.init(TOY, 0), data, cfg)
    assert len(res.history) <= 200
    assert res.metrics["accuracy"] == 1.0


def test_finetune_never_touches_mask_embedding():
    model = m.EncoderModel.init(TOY, 0)
    before = model.params["mask_emb"].data.copy()
    cfg = tr.FinetuneConfig(num_classes=2, lr=1e-2, epochs=1, seed=0)
    res = tr.finetune(model, separable_set(), cfg)
    assert np.array_equal(res.classifier.model.params["mask_emb"].data, before)


def test_finetune_rejects_bad_labels():
    data = separable_set()
    bad = tr.LabeledSet(data.corpus, data.labels + 1)
    with pytest.raises(tr.DataError):
        tr.finetune(m.EncoderModel.init(TOY, 0), bad, tr.FinetuneConfig(num_classes=2, epochs=1))


def test_head_lr_multiplier_scales_head_update():
    data = separable_set(K=8)
    model = m.EncoderModel.init(TOY, 0)
    runs = {}
    for mult in (1.0, 10.0):
        cfg = tr.FinetuneConfig(num_classes=2, lr=1e-3, epochs=1, batch_size=8, seed=0, head_lr_multiplier=mult)
        runs[mult] = tr.finetune(model, data, cfg).classifier.head["b"].data
    init = np.zeros(2)
    # one Adam step moves each coordinate by about lr * multiplier
    assert np.allclose(np.abs(runs[10.0] - init), 10 * np.abs(runs[1.0] - init), rtol=1e-3)


def test_segment_task_logit_count():
    K, tp = 4, 13
    rng = np.random.default_rng(0)
    corpus = tr.PatchCorpus(rng.standard_normal((K, 8 * tp, 256)).astype(np.float32),
                            [str(i) for i in range(K)], (8, tp))
    labels = rng.integers(0, 3, (K, 3))          # 2.08 s of patches spans three 1 s segments
    cfg = tr.FinetuneConfig(task="segment", num_classes=3, epochs=1, seed=0)
    model = m.EncoderModel.init(replace(TOY, max_time_patches=tp))
    res = tr.finetune(model, tr.LabeledSet(corpus, labels), cfg)
    assert res.classifier.logits(corpus.patches).shape == (K, 3, 3)
    with pytest.raises(tr.DataError, match="segment"):
        tr.finetune(model, tr.LabeledSet(corpus, labels[:, :2]), cfg)
    assert set(res.metrics) == {"accuracy", "mAP"}


def test_multi_label_task():
    K = 6
    rng = np.random.default_rng(1)
    corpus = tr.PatchCorpus(rng.standard_normal((K, 16, 256)).astype(np.float32), [str(i) for i in range(K)], (8, 2))
    labels = (rng.random((K, 4)) < 0.5).astype(np.float32)
    labels[0] = 1
    cfg = tr.FinetuneConfig(task="multi", num_classes=4, epochs=1, seed=0)
    res = tr.finetune(m.EncoderModel.init(TOY), tr.LabeledSet(corpus, labels), cfg)
    assert 0 <= res.metrics["mAP"] <= 1


def test_finetune_outputs(tmp_path):
    cfg = tr.FinetuneConfig(num_classes=2, epochs=1, seed=0)
    tr.finetune(m.EncoderModel.init(TOY), separable_set(), cfg, out_dir=tmp_path)
    assert read_csv(tmp_path / "metrics.csv")[0]["metric"] == "accuracy"
    clf = tr.load_classifier(tmp_path / "finetuned.ckpt")
    assert clf.config.num_classes == 2 and clf.grid == (8, 2)


# -- metrics --------------------------------------------------------------

def test_accuracy():
    assert tr.accuracy([0, 1, 2, 2], [0, 1, 1, 2]) == 0.75
    with pytest.raises(ContractError):
        tr.accuracy([0, 1], [0])


def test_map_perfect_and_closed_form():
    labels = np.eye(3)
    assert tr.mean_ap(labels + 0.1, labels) == 1.0
    assert tr.average_precision([0.9, 0.3], [0, 1]) == 0.5
    with pytest.raises(ContractError):
        tr.mean_ap(np.zeros((3, 2)), np.zeros((2, 2)))


def brute_force_ap(scores, pos):
    order = sorted(range(len(scores)), key=lambda i: (-scores[i], i))
    precisions = []
    for rank, i in enumerate(order, start=1):
        if pos[i]:
            hits = sum(pos[j] for j in order[:rank])
            precisions.append(hits / rank)
    return sum(precisions) / len(precisions)


def test_map_against_brute_force():
    rng = np.random.default_rng(3)
    scores = rng.random((6, 4))
    labels = (rng.random((6, 4)) < 0.5).astype(int)
    labels[0, :] = 1
    expect = np.mean([brute_force_ap(list(scores[:, c]), list(labels[:, c])) for c in range(4)])
    assert tr.mean_ap(scores, labels) == pytest.approx(expect, abs=1e-12)


def test_map_skips_empty_classes():
    scores = np.array([[0.9, 0.1], [0.2, 0.8]])
    labels = np.array([[1, 0], [0, 0]])
    assert tr.mean_ap(scores, labels) == 1.0


# -- checkpoints ----------------------------------------------------------

def test_checkpoint_round_trip(tmp_path):
    run = make_run()
    tr.pretrain_step(toy_corpus().patches[:4], run)
    tr.save_checkpoint(run, tmp_path / "a.ckpt")
    back = tr.load_checkpoint(tmp_path / "a.ckpt")
    tr.save_checkpoint(back, tmp_path / "b.ckpt")
    assert (tmp_path / "a.ckpt").read_bytes() == (tmp_path / "b.ckpt").read_bytes()
    assert back.step == 1 and back.adam.t == 1 and back.config.seed == run.config.seed
    for k, v in run.trainable().items():
        assert v.data.tobytes() == back.trainable()[k].data.tobytes()


def test_checkpoint_flipped_byte(tmp_path):
    path = tmp_path / "a.ckpt"
    tr.save_checkpoint(make_run(), path)
    raw = bytearray(path.read_bytes())
    raw[len(raw) // 2] ^= 0x01
    path.write_bytes(bytes(raw))
    with pytest.raises(ck.CorruptionError, match="checksum"):
        tr.load_checkpoint(path)


def test_checkpoint_wrong_preset(tmp_path):
    path = tmp_path / "tiny.ckpt"
    tensors = {"meta.config": tr._config_vector(m.preset("tiny"))}
    tensors.update({f"encoder.{k}": np.zeros(s, np.float32) for k, s in
                    list(m.encoder_param_shapes(m.preset("tiny")).items())[:3]})
    ck.save_tensors(path, tensors)
    with pytest.raises(ck.ShapeMismatchError) as info:
        tr.load_checkpoint(path, m.preset("small"))
    assert info.value.name == "encoder.patch.W"


def test_checkpoint_resume_continues_identically(tmp_path):
    x = toy_corpus().patches[:4]
    a = make_run()
    tr.pretrain_step(x, a)
    tr.save_checkpoint(a, tmp_path / "r.ckpt")
    b = tr.load_checkpoint(tmp_path / "r.ckpt")
    assert tr.pretrain_step(x, a) == tr.pretrain_step(x, b)
