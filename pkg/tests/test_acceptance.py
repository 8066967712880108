"""Acceptance suite: nine end-to-end criteria at their stated tolerances.

Each test records one PASS/FAIL line (collected into the terminal summary)
before asserting. The training criteria share models through session
fixtures, so criteria 6, 8 and 9 reuse the criterion-5 runs.
"""
import time

import numpy as np
import pytest

from socnn.data import (checkpoint_load, checkpoint_save, make_classification_dataset,
                        make_segmentation_dataset)
from socnn.geometry import intra_pairwise_oracle, moment_features
from socnn.network import (SOCNNConfig, backbone_forward, forward_logits, init_socnn,
                           segmentation_head)
from socnn.numerics import Mode, ParamStore, Tensor, grad_check
from socnn.numerics import tensor as T
from socnn.shapeconv import ShapeConvConfig, init_shapeconv, place_forward
from socnn.training import TrainConfig, evaluate, fit

from conftest import general_position_cloud, record_criterion

pytestmark = pytest.mark.acceptance

SEEDS = (0, 1, 2)


def _max_rel(a, b, floor=1e-300):
    """Largest entrywise |a - b| / max(|a|, |b|)."""
    a, b = np.asarray(a), np.asarray(b)
    return float((np.abs(a - b) / np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)).max())


# 1. moment-point shortcut against the pairwise double loop

def test_criterion_1_moment_shortcut_equals_pairwise_oracle():
    rng = np.random.default_rng(101)
    gathered = rng.normal(size=(100, 16, 32))
    start = time.perf_counter()
    oracle = intra_pairwise_oracle(gathered)
    shortcut = gathered - moment_features(Tensor(gathered)).data[:, None, :]
    elapsed = time.perf_counter() - start
    # relative error of each neighbourhood's (k, C) block against its own scale;
    # the float64 oracle itself carries about k * eps absolute error, so an
    # entrywise ratio is dominated by entries that happen to sit near zero
    per_hood = np.abs(shortcut - oracle).max(axis=(1, 2)) / np.abs(oracle).max(axis=(1, 2))
    err = float(per_hood.max())
    entrywise = _max_rel(shortcut, oracle)
    ok = err <= 1e-12 and elapsed < 1.0
    record_criterion(1, ok, f"max relative error {err:.2e} (<= 1e-12; entrywise ratio {entrywise:.1e}), "
                            f"{elapsed:.3f} s (< 1 s)")
    assert err <= 1e-12
    assert elapsed < 1.0


# 2. permutation invariance of the signature, equivariance of per-point outputs

def test_criterion_2_permutation_invariance():
    rng = np.random.default_rng(202)
    config = SOCNNConfig(num_points=128, num_classes=6, num_parts=6)
    store = init_socnn(config, seed=2, dtype=np.float64)
    start = time.perf_counter()
    sig_err = point_err = 0.0
    for _ in range(20):
        x = general_position_cloud(rng, 128)
        trace = backbone_forward(store, config, x)
        seg = segmentation_head(store, config, trace).data[0]
        for _ in range(5):
            perm = rng.permutation(128)
            t2 = backbone_forward(store, config, x[perm])
            seg2 = segmentation_head(store, config, t2).data[0]
            sig_err = max(sig_err, float(np.abs(t2.signature.data - trace.signature.data).max()))
            point_err = max(point_err, float(np.abs(seg2 - seg[perm]).max()),
                            float(np.abs(t2.tail_features.data[0] - trace.tail_features.data[0][perm]).max()))
    elapsed = time.perf_counter() - start
    ok = sig_err <= 1e-12 and point_err <= 1e-12 and elapsed < 30
    record_criterion(2, ok, f"signature diff {sig_err:.2e}, per-point diff after permuting {point_err:.2e} "
                            f"(both <= 1e-12), {elapsed:.1f} s (< 30 s)")
    assert sig_err <= 1e-12
    assert point_err <= 1e-12
    assert elapsed < 30


# 3. PLACE against a dense straight-line oracle

def _dense_place(store: ParamStore, prefix: str, m: np.ndarray):
    def lin(name, v):
        w = store.param(f"{prefix}.place.{name}.weight").data
        key = f"{prefix}.place.{name}.bias"
        return v @ w + (store.param(key).data if key in store else 0.0)

    n, c = m.shape
    g, th, ph = lin("g", m), lin("theta", m), lin("phi", m)
    att = np.zeros((n, n))
    for i in range(n):
        logits = [sum(th[i, a] * ph[j, a] for a in range(c)) / np.sqrt(c) for j in range(n)]
        top = max(logits)
        e = [np.exp(v - top) for v in logits]
        total = sum(e)
        for j in range(n):
            att[i, j] = e[j] / total
    ctx = np.zeros((n, c))
    for i in range(n):
        for j in range(n):
            ctx[i] += att[i, j] * g[j]
    return lin("alpha", ctx) + m, att


def test_criterion_3_place_matches_dense_oracle():
    rng = np.random.default_rng(303)
    start = time.perf_counter()
    row_err = out_err = 0.0
    for n in range(8, 65):
        c = 8
        store = ParamStore(np.float64)
        init_shapeconv(store, "s", ShapeConvConfig(c, c, k=4, enable_intra=False), rng)
        m = rng.normal(size=(n, c))
        out, att = place_forward(store, "s", Tensor(m), return_attention=True)
        want, want_att = _dense_place(store, "s", m)
        row_err = max(row_err, float(np.abs(att.data.sum(axis=-1) - 1.0).max()))
        out_err = max(out_err, float(np.abs(out.data - want).max()), float(np.abs(att.data - want_att).max()))
    elapsed = time.perf_counter() - start
    ok = row_err <= 1e-6 and out_err <= 1e-10 and elapsed < 5
    record_criterion(3, ok, f"row-sum error {row_err:.2e} (<= 1e-6), max abs diff to oracle {out_err:.2e} "
                            f"(<= 1e-10), {elapsed:.2f} s (< 5 s)")
    assert row_err <= 1e-6
    assert out_err <= 1e-10
    assert elapsed < 5


# 4. end-to-end gradient check

def test_criterion_4_end_to_end_gradient_check():
    rng = np.random.default_rng(404)
    config = SOCNNConfig.tiny(num_points=32, k=8, num_classes=4, num_parts=4)
    store = init_socnn(config, seed=4, dtype=np.float64)
    # populate batch-norm running statistics, then check in eval mode so the
    # loss is a deterministic function of the parameters alone
    for _ in range(3):
        for task in ("classification", "segmentation"):
            forward_logits(store, config, rng.normal(size=(4, 32, 3)), task, Mode.train(rng))
    x = general_position_cloud(rng, 32)[None]
    targets = {"classification": rng.integers(4, size=1), "segmentation": rng.integers(4, size=(1, 32))}
    start = time.perf_counter()
    errors = {}
    for task, skip in (("classification", "seg."), ("segmentation", "cls.")):
        names = [n for n in store.params if not n.startswith(skip)]
        loss = lambda s, task=task: T.cross_entropy(forward_logits(s, config, x, task), targets[task])
        errors[task] = grad_check(loss, store, h=1e-5, names=names, per_tensor=True)
    elapsed = time.perf_counter() - start
    worst = {task: max(e.items(), key=lambda kv: kv[1]) for task, e in errors.items()}
    over = sum(v >= 1e-4 for e in errors.values() for v in e.values())
    total = sum(len(e) for e in errors.values())
    err = max(v for _, v in worst.values())
    ok = err < 1e-4 and elapsed < 180
    record_criterion(4, ok, f"max relative error {err:.2e} (< 1e-4); worst tensors "
                            + ", ".join(f"{t}: {n} {v:.1e}" for t, (n, v) in worst.items())
                            + f"; {over}/{total} tensors at or above 1e-4; {elapsed:.0f} s (< 180 s)")
    assert err < 1e-4
    assert elapsed < 180


# 5, 6, 8, 9. desk-scale classification

CLS_POINTS = 256


@pytest.fixture(scope="session")
def cls_benchmark():
    train = make_classification_dataset(100, CLS_POINTS, seed=5000)
    test = make_classification_dataset(20, CLS_POINTS, seed=5001)
    assert (len(train), len(test)) == (600, 120)
    return train, test


def _train_variant(variant, seed, train, test):
    config = SOCNNConfig(num_points=CLS_POINTS, num_classes=6).with_variant(variant)
    store = init_socnn(config, seed=seed)
    fit(store, config, train, TrainConfig(epochs=30, seed=seed))
    return store, config, evaluate(store, config, test)["accuracy"]


@pytest.fixture(scope="session")
def cls_runs(cls_benchmark):
    train, test = cls_benchmark
    start = time.perf_counter()
    runs = [_train_variant("E", s, train, test) for s in SEEDS]
    return runs, time.perf_counter() - start


@pytest.mark.slow
def test_criterion_5_desk_scale_classification(cls_runs):
    runs, elapsed = cls_runs
    accs = [acc for _, _, acc in runs]
    med = float(np.median(accs))
    ok = med >= 0.90 and elapsed < 20 * 60
    record_criterion(5, ok, f"median test accuracy {med:.4f} (>= 0.90) over seeds {accs}; "
                            f"{elapsed / 60:.1f} min for three seeds (< 20 min)")
    assert med >= 0.90
    assert elapsed < 20 * 60


@pytest.mark.slow
def test_criterion_6_ablation_ordering(cls_benchmark, cls_runs):
    train, test = cls_benchmark
    medians = {"E": float(np.median([acc for _, _, acc in cls_runs[0]]))}
    for variant in "ABCD":
        medians[variant] = float(np.median([_train_variant(variant, s, train, test)[2] for s in SEEDS]))
    checks = {"E>=C": medians["E"] >= medians["C"] - 0.02, "E>=D": medians["E"] >= medians["D"] - 0.02,
              "C>=A": medians["C"] >= medians["A"] - 0.02, "D>=B": medians["D"] >= medians["B"] - 0.02}
    ok = all(checks.values())
    record_criterion(6, ok, "medians " + ", ".join(f"{v} {medians[v]:.4f}" for v in "ABCDE")
                            + "; " + ", ".join(f"{k} {'ok' if v else 'violated'}" for k, v in checks.items())
                            + " (slack 0.02)")
    assert ok, medians


@pytest.mark.slow
def test_criterion_8_voting_consistency(cls_benchmark, cls_runs):
    _, test = cls_benchmark
    spec = TrainConfig().augmentation
    one, ten = [], []
    for store, config, _ in cls_runs[0]:
        one.append(evaluate(store, config, test, votes=1)["accuracy"])
        ten.append(evaluate(store, config, test, votes=10, aug_spec=spec, seed=8000)["accuracy"])
    drop = float(np.median(one) - np.median(ten))
    ok = drop <= 0.01
    record_criterion(8, ok, f"median accuracy votes=1 {np.median(one):.4f}, votes=10 {np.median(ten):.4f}, "
                            f"drop {drop:.4f} (<= 0.01)")
    assert drop <= 0.01


@pytest.mark.slow
def test_criterion_9_checkpoint_round_trip(cls_runs, tmp_path):
    store, config, _ = cls_runs[0][0]
    clouds = np.random.default_rng(909).normal(size=(10, CLS_POINTS, 3)).astype(store.dtype)
    before = forward_logits(store, config, clouds).data
    checkpoint_save(tmp_path / "model.ckpt", store, config)
    loaded, loaded_config = checkpoint_load(tmp_path / "model.ckpt")
    after = forward_logits(loaded, loaded_config, clouds).data
    tensors_equal = all(loaded.params[n].data.tobytes() == t.data.tobytes() for n, t in store.params.items())
    ok = tensors_equal and after.tobytes() == before.tobytes()
    record_criterion(9, ok, f"tensors bitwise equal: {tensors_equal}; eval logits on 10 clouds bitwise equal: "
                            f"{after.tobytes() == before.tobytes()}")
    assert ok


# 7. desk-scale segmentation

SEG_POINTS = 512
SEG_EPOCHS = 15


@pytest.mark.slow
def test_criterion_7_desk_scale_segmentation():
    train = make_segmentation_dataset(100, SEG_POINTS, seed=7000)
    test = make_segmentation_dataset(20, SEG_POINTS, seed=7001)
    assert (len(train), len(test)) == (300, 60)
    start = time.perf_counter()
    scores = []
    for seed in SEEDS:
        config = SOCNNConfig(num_points=SEG_POINTS, num_classes=3, num_parts=train.num_parts)
        store = init_socnn(config, seed=seed, classification=False)
        fit(store, config, train, TrainConfig(epochs=SEG_EPOCHS, seed=seed))
        scores.append(evaluate(store, config, test)["miou"])
    elapsed = time.perf_counter() - start
    med = float(np.median(scores))
    ok = med >= 0.85 and elapsed < 30 * 60
    record_criterion(7, ok, f"median test mIoU {med:.4f} (>= 0.85) over seeds "
                            f"{[round(s, 4) for s in scores]}; {elapsed / 60:.1f} min (< 30 min)")
    assert med >= 0.85
    assert elapsed < 30 * 60
