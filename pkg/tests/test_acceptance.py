"""Acceptance suite: one test per criterion, each printing a PASS/FAIL line.

The two end-to-end criteria (6 and 7) train for ``TRIPLETNET_ACCEPTANCE_EPOCHS``
epochs (default 4) so the suite finishes in minutes; set it to 100 for the
full protocol.
"""
import math
import os
import time

import numpy as np
import pytest

import oracles
from tripletnet import tensor as T
from tripletnet.cli import main as cli_main
from tripletnet.data import AugmentationConfig, GeneticDistanceMatrix, augment, augment_batch, stratified_kfold
from tripletnet.evaluation import (SEPARABLE, AblationConfig, ForestConfig, SyntheticSpec, generate_synthetic,
                                   leakage_probe, paired_significance, run_cv)
from tripletnet.tensor import Parameter, Tape, Tensor, grad_check
from tripletnet.training import (DynamicMargin, FixedMargin, OptimizerState, TrainConfig, adam_step, batch_loss,
                                 combined_loss, cosine_anneal, dynamic_margin, margin_table, mine_triplets,
                                 triplet_loss)

EPOCHS = int(os.environ.get("TRIPLETNET_ACCEPTANCE_EPOCHS", "4"))
SEEDS = range(5)
# measurements informative, images nearly blank
MODALITY = dict(separation=1.5, image_separation=0.1)

RESULTS = []


def report(n, title, ok, detail=""):
    line = f"criterion {n:>2} {'PASS' if ok else 'FAIL'}  {title}" + (f"  ({detail})" if detail else "")
    RESULTS.append(line)
    print(line)
    assert ok, line


# ----------------------------------------------------------------- 1

def _primitive_cases(r):
    w = r.uniform(-1, 1, size=(3, 4))
    x34 = r.uniform(-2, 2, size=(3, 4))
    wc = Tensor(r.uniform(-1, 1, size=(2, 3, 2, 2)))
    return {
        "add": (lambda a, b: T.sum(T.add(a, b) * w), [x34, r.uniform(-2, 2, size=(1, 4))]),
        "sub": (lambda a, b: T.sum(T.sub(a, b) * w), [x34, r.uniform(-2, 2, size=(3, 1))]),
        "mul": (lambda a, b: T.sum(T.mul(a, b) * w), [x34, r.uniform(-2, 2, size=(4,))]),
        "neg": (lambda a: T.sum(T.neg(a) * w), [x34]),
        "exp": (lambda a: T.sum(T.exp(a) * w), [x34]),
        "relu": (lambda a: T.sum(T.relu(a) * w), [np.where(np.abs(x34) < 0.1, 0.5, x34)]),
        "sum": (lambda a: T.sum(T.sum(a, axis=1) * w[:, 0]), [x34]),
        "mean": (lambda a: T.sum(T.mean(a, axis=0) * w[0]), [x34]),
        "reshape": (lambda a: T.sum(T.reshape(a, (4, 3)) * w.T), [x34]),
        "take": (lambda a: T.sum(T.take(a, np.array([2, 0, 2])) * w), [x34]),
        "concat": (lambda a, b: T.sum(T.concat([a, b], axis=1) * w), [x34[:, :2], x34[:, 2:]]),
        "matmul": (lambda a, b: T.sum(T.matmul(a, b) * w[:, :2]), [x34, r.uniform(-2, 2, size=(4, 2))]),
        "conv2d": (lambda a, b: T.sum(T.conv2d(a, b, stride=2) * wc),
                   [r.uniform(-1, 1, size=(2, 2, 5, 5)), r.uniform(-1, 1, size=(3, 2, 3, 3))]),
        "softmax_cross_entropy": (lambda a: T.softmax_cross_entropy(a, [1, 3, 0]), [x34]),
        "cosine_distance": (lambda a, b: T.sum(T.cosine_distance(a, b) * w[:, 0]), [x34, r.uniform(-2, 2, (3, 4))]),
    }


def test_criterion_01_gradients():
    t0 = time.perf_counter()
    r = np.random.default_rng(2024)
    errs = {}
    for name, (fn, inputs) in _primitive_cases(r).items():
        errs[name] = grad_check(lambda ps: fn(*ps), [Parameter(x) for x in inputs])
    for config in (1, 2, 3, 4):
        data, params, trips = oracles.tiny_batch(config, seed=config)
        cfg = AblationConfig(config).train_config(TrainConfig(dtype="float64"))
        if config == 4:
            margins = margin_table(DynamicMargin(data.genetic, cfg.m_min, cfg.m_max), 3)
        else:
            margins = margin_table(FixedMargin(cfg.margin), 3)
        use = trips if cfg.use_triplet else None
        errs[f"pipeline config {config}"] = grad_check(
            lambda _: batch_loss(params, data, np.arange(4), use, margins, cfg)[0], params.parameters())
    worst = max(errs, key=errs.get)
    elapsed = time.perf_counter() - t0
    report(1, "gradient correctness", errs[worst] < 1e-4 and elapsed < 60,
           f"max rel err {errs[worst]:.2e} at {worst}, {elapsed:.1f}s")


# ----------------------------------------------------------------- 2

def test_criterion_02_loss_oracles():
    r = np.random.default_rng(7)
    worst = {"triplet": 0.0, "combined": 0.0, "dynamic_margin": 0.0, "cross_entropy": 0.0}
    for _ in range(1000):
        dp, dm, m = r.uniform(0, 2), r.uniform(0, 2), r.uniform(0, 1)
        got = triplet_loss(Tensor(dp), Tensor(dm), m).item()
        worst["triplet"] = max(worst["triplet"], abs(got - oracles.triplet(dp, dm, m)))

        lt, lc, s1, s2 = r.uniform(0, 5), r.uniform(0, 5), r.uniform(-3, 3), r.uniform(-3, 3)
        got = combined_loss(Tensor(lt), Tensor(lc), Parameter(s1), Parameter(s2)).item()
        worst["combined"] = max(worst["combined"], abs(got - oracles.combined(lt, lc, s1, s2)))

        n = int(r.integers(2, 8))
        a = r.uniform(0, 10, size=(n, n))
        D = np.triu(a, 1) + np.triu(a, 1).T
        m_min = r.uniform(0, 0.5)
        m_max = m_min + r.uniform(0, 1)
        pol = DynamicMargin(GeneticDistanceMatrix(tuple(f"s{i}" for i in range(n)), D), m_min, m_max)
        i, j = r.choice(n, size=2, replace=False)
        got = dynamic_margin(pol, int(i), int(j))
        worst["dynamic_margin"] = max(worst["dynamic_margin"],
                                      abs(got - oracles.dyn_margin(D.tolist(), i, j, m_min, m_max)))

        B, C = int(r.integers(1, 6)), int(r.integers(2, 22))
        logits = r.uniform(-20, 20, size=(B, C))
        labels = r.integers(0, C, size=B)
        got = T.softmax_cross_entropy(logits, labels).item()
        ref = oracles.cross_entropy(logits.tolist(), labels.tolist())
        worst["cross_entropy"] = max(worst["cross_entropy"], abs(got - ref))
    name = max(worst, key=worst.get)
    report(2, "loss formula oracles", worst[name] < 1e-9, f"max abs err {worst[name]:.1e} ({name})")


# ----------------------------------------------------------------- 3

def test_criterion_03_mining_oracle():
    t0 = time.perf_counter()
    r = np.random.default_rng(11)
    bad = []
    for inst in range(200):
        n = int(r.integers(4, 65))
        n_cls = int(r.integers(2, max(3, n // 2)))
        labels = r.integers(0, n_cls, size=n)
        labels[:2] = [0, 1]
        emb = r.normal(size=(n, int(r.integers(2, 9))))
        if inst % 2:
            a = r.uniform(0.1, 5, size=(n_cls, n_cls))
            D = np.triu(a, 1) + np.triu(a, 1).T
            pol = DynamicMargin(GeneticDistanceMatrix(tuple(f"s{i}" for i in range(n_cls)), D), 0.1, 0.5)
            mtab = margin_table(pol, n_cls)
        else:
            pol = FixedMargin(float(r.uniform(0.05, 1.0)))
            mtab = margin_table(pol, n_cls)
        ref = oracles.brute_mine(emb, labels, lambda ca, cn: mtab[ca, cn])
        trips, stats = mine_triplets(emb, labels, pol, np.random.default_rng(inst))
        got = {t.anchor: t for t in trips}
        if set(got) != set(ref):
            bad.append((inst, "anchors"))
            continue
        for a, (pos, semi, dp, row) in ref.items():
            t = got[a]
            if t.positive != pos:
                bad.append((inst, "positive", a))
            if semi and not row[t.negative] < dp + mtab[labels[a], labels[t.negative]]:
                bad.append((inst, "negative", a))
        if stats.fallback_negatives != sum(1 for v in ref.values() if not v[1]):
            bad.append((inst, "fallback count"))
    elapsed = time.perf_counter() - t0
    report(3, "mining oracle equivalence", not bad and elapsed < 60,
           f"{len(bad)} mismatches over 200 instances, {elapsed:.1f}s")


# ----------------------------------------------------------------- 4

def test_criterion_04_schedule():
    lrs = [cosine_anneal(0.001, 1e-5, t, 100) for t in range(101)]
    ok = lrs[0] == 0.001 and lrs[100] == 1e-5 and all(b <= a for a, b in zip(lrs, lrs[1:]))
    report(4, "schedule endpoints", ok, f"lr(0)={lrs[0]!r}, lr(100)={lrs[100]!r}")


# ----------------------------------------------------------------- 5

def test_criterion_05_uncertainty_stationarity():
    s1 = Parameter(0.0)
    state = OptimizerState.for_params({"s1": s1})
    steps = 0
    for steps in range(1, 5001):
        with Tape() as tape:
            out = combined_loss(Tensor(2.0), Tensor(0.0), s1, Tensor(0.0))
        tape.backward(out)
        adam_step({"s1": s1}, state, 0.01)
    err = abs(s1.item() - math.log(2.0))
    report(5, "uncertainty weight stationarity", err < 1e-3, f"|s1 - ln 2| = {err:.1e} after {steps} steps")


# ----------------------------------------------------------------- 6

@pytest.mark.slow
def test_criterion_06_end_to_end():
    t0 = time.perf_counter()
    means = []
    for seed in SEEDS:
        ds = generate_synthetic(SyntheticSpec(**SEPARABLE), seed=seed).to_dataset()
        means.append(run_cv(3, ds, 5, seed, TrainConfig(epochs=EPOCHS)).mean)
    passed = sum(m >= 0.90 for m in means)
    elapsed = time.perf_counter() - t0
    report(6, "end-to-end synthetic learning", passed >= 4 and elapsed < 3600,
           f"{EPOCHS} epochs, means {', '.join(f'{m:.3f}' for m in means)}, {elapsed:.0f}s")


# ----------------------------------------------------------------- 7

@pytest.mark.slow
def test_criterion_07_ablation_ordering():
    wins, pairs = 0, []
    for seed in SEEDS:
        ds = generate_synthetic(SyntheticSpec(**MODALITY), seed=seed).to_dataset()
        base = TrainConfig(epochs=EPOCHS)
        a = run_cv(1, ds, 5, seed, base).mean
        b = run_cv(2, ds, 5, seed, base).mean
        pairs.append(f"{a:.3f}<={b:.3f}" if b >= a else f"{a:.3f}>{b:.3f}")
        wins += b >= a
    report(7, "ablation ordering (statistical)", wins >= 4, f"config 2 >= config 1 in {wins}/5: {', '.join(pairs)}")


# ----------------------------------------------------------------- 8

@pytest.mark.slow
def test_criterion_08_leakage_probe():
    fails = []
    forest = ForestConfig(n_trees=25)
    for seed in range(10):
        fc = ForestConfig(n_trees=forest.n_trees, seed=seed)
        leak = generate_synthetic(SyntheticSpec(leakage=True, image_side=8), seed=seed)
        rep = leakage_probe(leak.records, leak.schema, seed, forest=fc)
        if not (rep.accuracy_flagged_subsets["site_code"] >= 0.99 and rep.verdict == "leaky"):
            fails.append(f"seed {seed} leak")
        clean = generate_synthetic(SyntheticSpec(image_side=8), seed=seed)
        rep = leakage_probe(clean.records, clean.schema, seed, forest=fc)
        if not (rep.accuracy_reduced < 0.90 and rep.verdict == "clean"):
            fails.append(f"seed {seed} clean ({rep.accuracy_reduced:.3f})")
    report(8, "leakage probe", not fails, ", ".join(fails) or "10/10 seeds")


# ----------------------------------------------------------------- 9

def test_criterion_09_chirality():
    pat = np.arange(1.0, 10.0).reshape(3, 3)
    rots = [np.rot90(pat, k) for k in range(4)]
    mirrors = [np.rot90(pat[:, ::-1], k) for k in range(4)]
    assert not any(np.array_equal(a, b) for a in rots for b in mirrors)
    cfg = AugmentationConfig(noise_std=0.0)
    r = np.random.default_rng(9)
    outs = [augment(pat, cfg, r) for _ in range(5000)]
    outs += list(augment_batch(np.broadcast_to(pat, (5000, 1, 3, 3)).copy(), cfg, r)[:, 0])
    in_orbit = sum(any(np.array_equal(o, x) for x in rots) for o in outs)
    mirrored = sum(any(np.array_equal(o, x) for x in mirrors) for o in outs)
    report(9, "chirality invariant", in_orbit == len(outs) == 10_000 and mirrored == 0,
           f"{in_orbit}/{len(outs)} in rotation orbit, {mirrored} mirrored")


# ----------------------------------------------------------------- 10

def _cli_outputs(root, tag):
    """Run every command once under ``root/tag``; return {relative path: bytes} plus stdout."""
    from contextlib import redirect_stdout
    from io import StringIO

    out = root / tag
    out.mkdir()
    (out / "gen.cfg").write_text("seed = 5\nclasses = 4\nclass_sizes = 5,6,7,8\nimage_side = 16\nleakage = true\n")
    extra = "conv_channels = 4,8,8\nepochs = 2\nbatch_size = 8\nn_trees = 10\ncheckpoint = train/model.ckpt\n"
    codes, buf = [], StringIO()
    with redirect_stdout(buf):
        codes.append(cli_main(["generate", "--config", str(out / "gen.cfg"), "--out", str(out / "data")]))
        cfg = out / "data" / "dataset.cfg"
        cfg.write_text(cfg.read_text() + extra)
        for cmd in ("validate", "train", "crossval", "ablate", "probe"):
            codes.append(cli_main([cmd, "--config", str(cfg), "--out", str(out / "data" / cmd), "--svg"]))
        codes.append(cli_main(["classify", "--config", str(cfg), "--out", str(out / "data" / "classify")]))
    files = {p.relative_to(out).as_posix(): p.read_bytes() for p in sorted(out.rglob("*")) if p.is_file()}
    return codes, files, buf.getvalue().replace(str(out), "<root>")


def test_criterion_10_stratification_and_determinism(tmp_path):
    r = np.random.default_rng(10)
    worst = 0
    for i in range(100):
        n_cls = int(r.integers(2, 22))
        sizes = r.integers(5, 90, size=n_cls)
        sizes[r.integers(0, n_cls)] = 5
        labels = r.permutation(np.repeat(np.arange(n_cls), sizes))
        folds = stratified_kfold(labels, 5, seed=i).folds
        for c in range(n_cls):
            cnt = np.bincount(folds[labels == c], minlength=5)
            worst = max(worst, int(cnt.max() - cnt.min()))
    codes_a, files_a, out_a = _cli_outputs(tmp_path, "a")
    codes_b, files_b, out_b = _cli_outputs(tmp_path, "b")
    differ = sorted(k for k in files_a if files_a[k] != files_b.get(k))
    ok = (worst <= 1 and codes_a == codes_b == [0, 0, 0, 0, 0, 2, 0] and files_a.keys() == files_b.keys()
          and not differ and out_a == out_b)
    report(10, "stratification and determinism", ok,
           f"max per-class fold deviation {worst}; {len(files_a)} CLI output files, {len(differ)} differ; "
           f"exit codes {codes_a}")


# ----------------------------------------------------------------- 11

def test_criterion_11_significance():
    p_pos = paired_significance([0.9, 0.92, 0.95, 0.91, 0.93], [0.8, 0.85, 0.9, 0.88, 0.9])
    same = [0.9, 0.8, 0.85, 0.95, 0.7]
    p_same = paired_significance(same, same)
    report(11, "significance test exactness", p_pos == 0.0625 and p_same == 1.0,
           f"all-positive p={p_pos!r}, identical p={p_same!r}")
