"""Release acceptance checks — ten criteria, one verdict line each.

Every test prints a ``[criterion N] PASS/FAIL`` line straight to the
terminal (pytest capture bypassed) before asserting, so a plain
``pytest -v tests/test_acceptance.py`` run always shows the scorecard.

These are deliberately end-to-end and slower than the unit suites: they
train real (desk-scale) models, exercise the CLI, and re-derive every
checked value from an oracle that is independent of the library code.
"""

import time
from dataclasses import replace

import numpy as np
import pytest

from xfnet import attention, cli
from xfnet.config import ModelConfig
from xfnet.data import SynthSpec, split_dataset, synth_dataset
from xfnet.gradcheck import TOLERANCE, run_gradient_suite
from xfnet.model import (Model, build_model, cbam_count, middle_block_count,
                         shape_trace)
from xfnet.tensor import Rng, Tensor, backward
from xfnet.train import (TrainConfig, attention_ablation_variants,
                         cross_entropy_loss, fusion_ablation_variants,
                         lr_at_epoch, roc_auc, run_ablation, train)
from xfnet.weights import load_weights, save_weights

DESK = ModelConfig(input_size=(64, 64), width_multiplier=0.125)
TINY = ModelConfig(input_size=(32, 32), width_multiplier=0.125)


def _report(capsys, num, ok, detail, extra_lines=()):
    with capsys.disabled():
        print(f"\n[criterion {num}] {'PASS' if ok else 'FAIL'}: {detail}")
        for line in extra_lines:
            print(f"    {line}")


# --- 1: gradient check suite ------------------------------------------------

def test_criterion_01_gradient_suite(capsys):
    started = time.time()
    results = run_gradient_suite(seed=0)
    elapsed = time.time() - started
    bad = [(name, err) for name, err in results if not err < TOLERANCE]
    worst_name, worst = max(results, key=lambda r: r[1])
    ok = not bad and elapsed < 120.0
    _report(capsys, 1, ok,
            f"{len(results)} ops checked, worst rel err {worst:.3g} "
            f"({worst_name}), {elapsed:.1f}s")
    assert not bad, f"ops over tolerance: {bad}"
    assert elapsed < 120.0


# --- 2: shape trace vs independent oracle ------------------------------------

def _ceil_half(n):
    return (n + 1) // 2


def default_shape_oracle():
    """Shape chain for the default config, derived by hand from the layer
    contracts alone: stride-2 'same' layers take n -> ceil(n/2), everything
    else preserves the spatial grid."""
    rows = {}
    s = _ceil_half(224)
    rows["entry.conv1"] = (32, s, s)
    rows["entry.conv2"] = (64, s, s)
    for ch, name in ((128, "entry.block1"), (256, "entry.block2"),
                     (728, "entry.block3")):
        s = _ceil_half(s)
        rows[name] = (ch, s, s)
    rows["entry.out"] = (728, s, s)
    for i, depth in enumerate((1, 2, 3), start=1):
        for j in range(1, depth + 1):
            rows[f"middle.branch{i}.block{j}"] = (728, s, s)
    rows["middle.fuse"] = (728, s, s)
    s = _ceil_half(s)
    rows["exit.block"] = (1024, s, s)
    rows["exit.sep1"] = (1536, s, s)
    rows["exit.sep2"] = (2048, s, s)
    rows["exit.attn"] = (2048, s, s)
    rows["exit.merge"] = (2048, s, s)
    rows["exit.gap"] = (2048,)
    rows["fc"] = (2,)
    return rows


def test_criterion_02_shape_trace(capsys):
    oracle = default_shape_oracle()
    traced = shape_trace(ModelConfig()).shapes()
    symbolic_ok = traced == oracle

    model = build_model(ModelConfig(), seed=0)
    live = []
    logits = model.forward(Tensor(np.zeros((1, 3, 224, 224), dtype=np.float32)),
                           mode="eval", trace=live)
    live_ok = dict(live) == oracle and logits.data.shape == (1, 2)
    anchor_ok = traced["entry.out"] == (728, 14, 14) and traced["fc"] == (2,)

    ok = symbolic_ok and live_ok and anchor_ok
    _report(capsys, 2, ok,
            f"{len(oracle)} trace rows match hand-derived oracle; live "
            f"224x224 forward agrees; entry.out {traced['entry.out']}, "
            f"fc {traced['fc']}")
    assert symbolic_ok, f"trace mismatch: {traced} != {oracle}"
    assert live_ok
    assert anchor_ok


# --- 3: block counts and every ablation variant trains -----------------------

def _variant_trains(cfg):
    model = build_model(cfg, seed=0)
    rng = Rng(0).child("c3")
    x = Tensor(rng.normal((2, 3, *cfg.input_size)))
    logits = model.forward(x, mode="train")
    loss = cross_entropy_loss(logits, np.array([0, 1]))
    grads = backward(loss, model.params())
    if not np.isfinite(loss.data):
        return "loss not finite"
    for name, g in grads.items():
        if not np.isfinite(g.data).all():
            return f"non-finite grad for {name}"
    return None


def test_criterion_03_variants(capsys):
    fused = build_model(TINY, seed=0)
    original = build_model(
        replace(TINY, middle_flow_kind="original_xception"), seed=0)
    counts_ok = (middle_block_count(fused) == 6 and cbam_count(fused) == 6
                 and middle_block_count(original) == 8
                 and cbam_count(original) == 0)

    failures = []
    labels = []
    for label, cfg in (attention_ablation_variants(TINY)
                       + fusion_ablation_variants(TINY)):
        problem = _variant_trains(cfg)
        labels.append(label)
        if problem is not None:
            failures.append(f"{label}: {problem}")

    ok = counts_ok and not failures
    _report(capsys, 3, ok,
            f"middle blocks 6 (fused) / 8 (original); {len(labels)} variants "
            "build, forward and backprop with finite loss and gradients")
    assert counts_ok
    assert not failures, failures


# --- 4: attention invariants --------------------------------------------------

def test_criterion_04_attention_invariants(capsys):
    rng = Rng(0).child("c4")
    b, c, h, w = 3, 6, 4, 5
    x = rng.normal((b, c, h, w), dtype=np.float64)
    sa = attention.init_self_attention_params(c, 3, 4, 5, rng.child("sa"))

    rows = attention.attention_matrix(Tensor(x), sa)
    row_sum_err = float(np.abs(rows.sum(axis=2) - 1.0).max())

    perm = rng.permutation(h * w)

    def permute_positions(a):
        flat = a.reshape(a.shape[0], a.shape[1], h * w)
        return flat[:, :, perm].reshape(a.shape[0], a.shape[1], h, w)

    out = attention.self_attention(Tensor(x), sa).data
    out_permuted = attention.self_attention(Tensor(permute_positions(x)), sa).data
    equiv_err = float(np.abs(out_permuted - permute_positions(out)).max())

    cb = attention.init_cbam_params(c, reduction=2, kernel_size=7,
                                    rng=rng.child("cb"))
    xt = Tensor(x)
    ch_gate = attention.channel_attention(xt, cb).data
    sp_gate = attention.spatial_attention(xt, cb).data
    gates_ok = (0 < ch_gate.min() and ch_gate.max() < 1
                and 0 < sp_gate.min() and sp_gate.max() < 1)

    zero_out = attention.cbam(Tensor(np.zeros((2, c, h, w))), cb).data
    zero_ok = np.array_equal(zero_out, np.zeros_like(zero_out))

    ok = row_sum_err <= 1e-5 and equiv_err <= 1e-5 and gates_ok and zero_ok
    _report(capsys, 4, ok,
            f"attention rows sum to 1 (err {row_sum_err:.2g}); permutation "
            f"equivariance err {equiv_err:.2g}; gates in (0,1); cbam(0) = 0")
    assert row_sum_err <= 1e-5
    assert equiv_err <= 1e-5
    assert gates_ok
    assert zero_ok


# --- 5: schedule, defaults, best-epoch rule -----------------------------------

def test_criterion_05_schedule_and_best_epoch(capsys):
    lrs = [lr_at_epoch(0.0001, e, 5) for e in range(20)]
    expected = ([0.0001] * 5 + [0.00005] * 5
                + [0.000025] * 5 + [0.0000125] * 5)
    schedule_ok = lrs == expected

    defaults = TrainConfig()
    defaults_ok = defaults.batch_size == 64 and defaults.initial_lr == 0.0001

    ds = synth_dataset(SynthSpec(per_class=5, image_size=(32, 32), seed=4))
    train_set, val_set = split_dataset(ds, val_fraction=0.2, seed=0)
    hist = train(build_model(TINY, seed=0), train_set, val_set,
                 TrainConfig(batch_size=4, initial_lr=1e-3, epochs=3,
                             lr_halving_period=5, seed=0))
    accs = [e.val_acc for e in hist.epochs]
    best_ok = hist.best_epoch == accs.index(max(accs))

    ok = schedule_ok and defaults_ok and best_ok
    _report(capsys, 5, ok,
            "lr halves every 5 epochs (exact over 20); default batch size 64, "
            f"lr 0.0001; best epoch {hist.best_epoch} is the earliest "
            "val-accuracy argmax")
    assert schedule_ok, lrs
    assert defaults_ok
    assert best_ok, (hist.best_epoch, accs)


# --- 6: desk-scale overfit, deterministic -------------------------------------

def _desk_overfit_run():
    train_set = synth_dataset(SynthSpec(per_class=64, image_size=(64, 64),
                                        seed=0))
    val_set = synth_dataset(SynthSpec(per_class=8, image_size=(64, 64),
                                      seed=1))
    tcfg = TrainConfig(batch_size=16, initial_lr=1e-3, epochs=30,
                       lr_halving_period=10, seed=0)
    model = build_model(DESK, seed=0)
    return train(model, train_set, val_set, tcfg, early_stop_train_acc=0.95)


def test_criterion_06_desk_overfit(capsys):
    started = time.time()
    first = _desk_overfit_run()
    second = _desk_overfit_run()
    elapsed = time.time() - started

    peak = max(e.train_acc for e in first.epochs)
    overfit_ok = peak >= 0.95 and len(first.epochs) <= 30
    time_ok = elapsed < 900.0
    deterministic = first.to_table() == second.to_table()

    ok = overfit_ok and time_ok and deterministic
    _report(capsys, 6, ok,
            f"128-sample overfit hits {peak:.0%} train accuracy in "
            f"{len(first.epochs)} epoch(s); both runs in {elapsed:.0f}s; "
            "repeat run byte-identical")
    assert overfit_ok, f"peak train acc {peak} in {len(first.epochs)} epochs"
    assert time_ok, f"{elapsed:.0f}s"
    assert deterministic


# --- 7: attention ablation direction ------------------------------------------

def test_criterion_07_ablation_direction(capsys):
    ds = synth_dataset(SynthSpec(per_class=12, image_size=(32, 32),
                                 kind="blob-vs-stripe", seed=11))
    train_set, val_set = split_dataset(ds, val_fraction=0.25, seed=0)
    tcfg = TrainConfig(batch_size=6, initial_lr=1e-3, epochs=20,
                       lr_halving_period=8, seed=0)
    rows = run_ablation(attention_ablation_variants(TINY), train_set, val_set,
                        tcfg, seeds=(0, 1, 2))

    by_label = {r.label: r for r in rows}
    full = by_label["full"].mean_train_loss
    stripped = by_label["w/o both"].mean_train_loss
    ok = len(rows) == 4 and full <= stripped
    _report(capsys, 7, ok,
            f"mean final train loss over seeds (0, 1, 2): full {full:.4f} <= "
            f"w/o both {stripped:.4f}",
            extra_lines=[f"{r.label:20s} train_loss {r.mean_train_loss:.4f}  "
                         f"train_acc {r.mean_train_acc:.3f}  "
                         f"val_acc {r.mean_val_acc:.3f}" for r in rows])
    assert len(rows) == 4
    assert full <= stripped, (full, stripped)


# --- 8: weight files round-trip bit-exactly ------------------------------------

def test_criterion_08_weight_round_trip(capsys, tmp_path):
    ds = synth_dataset(SynthSpec(per_class=6, image_size=(32, 32), seed=2))
    train_set, val_set = split_dataset(ds, val_fraction=0.25, seed=0)
    model = build_model(TINY, seed=0)
    train(model, train_set, val_set,
          TrainConfig(batch_size=4, initial_lr=1e-3, epochs=1,
                      lr_halving_period=5, seed=0))
    path = tmp_path / "model.xfw"
    save_weights(model, path)

    other = build_model(TINY, seed=99)
    load_weights(path, other)
    exact = all(np.array_equal(p.data, other.params()[n].data)
                for n, p in model.params().items())
    exact = exact and all(np.array_equal(b, other.buffers()[n])
                          for n, b in model.buffers().items())

    stripped = build_model(replace(TINY, cbam_enabled=False), seed=0)
    with pytest.raises(ValueError, match="fingerprint"):
        load_weights(path, stripped)
    with pytest.raises(ValueError, match="does not match") as excinfo:
        load_weights(path, stripped, allow_fingerprint_mismatch=True)
    message = str(excinfo.value)
    saved_names = set(model.params()) | set(model.buffers())
    stripped_names = set(stripped.params()) | set(stripped.buffers())
    diff = (saved_names - stripped_names) | (stripped_names - saved_names)
    diff_listed = diff and all(name in message for name in diff)

    ok = exact and diff_listed
    _report(capsys, 8, ok,
            f"{len(saved_names)} arrays reload bit-exactly into a fresh "
            f"model; cross-config load names all {len(diff)} mismatched "
            "entries")
    assert exact
    assert diff_listed, message


# --- 9: CLI training is deterministic ------------------------------------------

def test_criterion_09_cli_determinism(capsys, tmp_path):
    data = tmp_path / "data"
    assert cli.main(["synth", "--out", str(data), "--per-class", "6",
                     "--size", "32x32", "--seed", "3"]) == 0
    cfg_file = tmp_path / "desk.cfg"
    cfg_file.write_text("input_size = 32x32\nwidth_multiplier = 0.125\n")

    outputs = []
    for run in ("a", "b"):
        out = tmp_path / run
        rc = cli.main(["train", "--config", str(cfg_file), "--data", str(data),
                       "--out", str(out), "--epochs", "2", "--batch-size", "4",
                       "--lr", "0.001", "--seed", "5"])
        assert rc == 0
        outputs.append(((out / "history.txt").read_bytes(),
                        (out / "model.xfw").read_bytes()))

    history_same = outputs[0][0] == outputs[1][0]
    weights_same = outputs[0][1] == outputs[1][1]
    ok = history_same and weights_same
    _report(capsys, 9, ok,
            "two identical CLI train runs produce byte-identical history.txt "
            "and model.xfw")
    assert history_same
    assert weights_same


# --- 10: AUC vs all-pairs brute force -------------------------------------------

def _auc_brute_force(scores, labels):
    pos = scores[labels == 1]
    neg = scores[labels == 0]
    total = 0.0
    for p in pos:
        for q in neg:
            total += 1.0 if p > q else (0.5 if p == q else 0.0)
    return total / (len(pos) * len(neg))


def test_criterion_10_auc(capsys):
    rng = np.random.default_rng(0)
    worst = 0.0
    for _ in range(200):
        n = int(rng.integers(3, 50))
        scores = rng.integers(0, 6, size=n).astype(np.float64) / 5.0
        labels = rng.integers(0, 2, size=n)
        labels[0], labels[1] = 0, 1  # both classes always present
        worst = max(worst, abs(roc_auc(scores, labels)
                               - _auc_brute_force(scores, labels)))
    ok = worst < 1e-12
    _report(capsys, 10, ok,
            f"200 random tied score sets match all-pairs brute force "
            f"(worst diff {worst:.2g})")
    assert worst < 1e-12
