"""End-to-end acceptance gate.

Nine criteria, each a single test that prints one ``ACCEPT n PASS|FAIL``
line (straight to the terminal, bypassing capture) and then asserts.
Criteria 5, 6, and 8 train real models and dominate the runtime; the
presets used here were tuned for a single-core machine.
"""

import filecmp
import sys
import time
from pathlib import Path

import numpy as np
import pytest

import swallowgraph.autodiff as ad
from swallowgraph import (cli, config as cfgmod, cv, gradcheck, graphs, hrim,
                          losses, model, patient, training)


def _verdict(n, desc, ok):
    print(f"ACCEPT {n} {'PASS' if ok else 'FAIL'}: {desc}",
          file=sys.__stderr__, flush=True)
    assert ok, f"acceptance criterion {n} failed: {desc}"


def _dataset(tmp_path_factory, name, patients, swallows, seed=0):
    out = tmp_path_factory.mktemp(name)
    spec = hrim.SyntheticSpec(patients=patients, swallows_per_patient=swallows,
                              seed=seed)
    hrim.generate_synthetic_dataset(spec, out)
    manifest, events, qs = hrim.load_dataset(out / "manifest.json")
    return training.prepare_dataset(manifest, events, qs)


# -- 1: gradient correctness -------------------------------------------------

def test_criterion_1_gradients():
    t0 = time.time()
    results = gradcheck.run_suite()
    elapsed = time.time() - t0
    worst = max(r["max_rel_error"] for r in results)
    ok = (gradcheck.suite_passed(results) and worst < 1e-4
          and elapsed < 120.0)
    _verdict(1, f"all {len(results)} parameter groups pass finite-difference "
             f"check (worst rel err {worst:.2e}, {elapsed:.0f}s)", ok)


# -- 2: loss oracles ---------------------------------------------------------

def test_criterion_2_loss_oracles():
    checks = []
    t = losses.smoothed_targets(np.array([0]), 2, 0.0)
    v = losses.weighted_ce(ad.constant(np.zeros((1, 2))), t, np.array([1.0, 1.0]))
    checks.append(abs(float(v.data) - np.log(2)) < 1e-9)
    v = losses.weighted_ce(ad.constant(np.zeros((1, 2))), t, np.array([2.0, 1.0]))
    checks.append(abs(float(v.data) - 2 * np.log(2)) < 1e-9)
    v = losses.supcon_loss(ad.constant(np.ones((4, 3))), np.zeros(4, dtype=int), 1.0)
    checks.append(abs(float(v.data) - np.log(3)) < 1e-9)
    z = ad.constant(np.array([[1.0, 0], [1, 0], [0, 1], [0, 1]]))
    v = losses.supcon_loss(z, np.array([0, 0, 1, 1]), 1.0)
    checks.append(abs(float(v.data) - np.log(1 + 2 / np.e)) < 1e-9)
    st = losses.smoothed_targets(np.array([0]), 3, 0.3)
    checks.append(np.allclose(st, [[0.8, 0.1, 0.1]], atol=1e-9))
    one = ad.constant(np.array(1.0))
    v = losses.total_loss([one] * 3, [one] * 3, 0.5)
    checks.append(abs(float(v.data) - 4.5) < 1e-9)
    _verdict(2, "weighted_ce/supcon/smoothed_targets/total_loss match "
             "hand-derived oracles to 1e-9", all(checks))


# -- 3: graph structure ------------------------------------------------------

def test_criterion_3_graph_structure():
    rng = np.random.default_rng(0)
    ev = hrim.SwallowEvent(manometry=rng.standard_normal((750, 36)),
                           impedance=rng.standard_normal((750, 15)),
                           labels=(0, 0, 0), patient_id="p0")
    seq = graphs.build_graph_sequence(ev)
    topo = seq.topology
    ok = (len(seq.node_features) == 750
          and topo.n_nodes == 36
          and len(topo.spatial_pairs) == 35
          and len(topo.impedance_pairs) == 15)
    # impedance channel j (1-indexed) spans 1-indexed sensors (2j+1, 2j+3)
    for j0, (a, b) in enumerate(topo.impedance_pairs):
        j = j0 + 1
        ok = ok and (a + 1, b + 1) == (2 * j + 1, 2 * j + 3)

    # exact relabeling equivariance for both layer variants
    for variant in ("generalized", "attention"):
        small = graphs.chain_topology(n_nodes=6)
        prng = np.random.default_rng(1)
        params = graphs.init_gnn_params(prng, variant, layers=1, in_dim=2, hidden=4)
        h = prng.standard_normal((3, 6, 2))
        ef = graphs.directed_edge_features(
            prng.standard_normal((3, small.n_impedance)), small)
        out = graphs.gnn_layer_forward(
            ad.constant(h), ad.constant(ef), small, params, 0, variant).data
        perm = np.array([3, 0, 5, 1, 4, 2])
        dst_p = perm[small.edge_dst]
        topo_p = graphs.SwallowGraphTopology(
            n_nodes=6,
            spatial_pairs=perm[small.spatial_pairs],
            impedance_pairs=perm[small.impedance_pairs],
            edge_src=perm[small.edge_src],
            edge_dst=dst_p,
            edge_kind=small.edge_kind.copy(),
            edge_channel=small.edge_channel.copy(),
            agg_matrix=(dst_p[None, :] == np.arange(6)[:, None]).astype(float),
        )
        h_p = np.empty_like(h)
        h_p[:, perm, :] = h
        out_p = graphs.gnn_layer_forward(
            ad.constant(h_p), ad.constant(ef), topo_p, params, 0, variant).data
        ok = ok and np.array_equal(out_p[:, perm, :], out)
    _verdict(3, "750 graphs, 36 nodes, 35+15 edges, impedance endpoint rule, "
             "exact relabeling equivariance", ok)


# -- 4: stratified CV --------------------------------------------------------

def test_criterion_4_stratified_cv(tmp_path_factory):
    prep = _dataset(tmp_path_factory, "cv100", patients=100, swallows=3, seed=4)
    pl = prep.patient_labels()
    assign = cv.multilabel_stratified_kfold(pl, prep.class_counts, k=5, seed=0)

    seen = []
    for f in range(5):
        seen.extend(assign.validation_patients(f))
    partition_ok = sorted(seen) == sorted(pl.keys()) and len(seen) == len(set(seen))

    ours = cv.fold_proportion_deviation(pl, prep.class_counts, assign)
    rng = np.random.default_rng(999)
    ids = sorted(pl.keys())
    devs = []
    for _ in range(1000):
        perm = rng.permutation(len(ids))
        fold_of = {ids[i]: int(f % 5) for f, i in enumerate(perm)}
        devs.append(cv.fold_proportion_deviation(
            pl, prep.class_counts, cv.FoldAssignment(fold_of=fold_of, k=5)))
    strat_ok = ours <= float(np.median(devs))

    # leakage: validation patients contribute neither to normalization stats
    # nor to class weights
    leak_ok = True
    for fold in range(5):
        tr, va = training.fold_event_split(prep, assign, fold)
        tr_pat = set(prep.event_patient[tr].tolist())
        va_pat = set(prep.event_patient[va].tolist())
        leak_ok = leak_ok and not (tr_pat & va_pat)
        stats_tr = training._fold_signal_stats(prep, tr)
        stats_all = training._fold_signal_stats(prep, np.concatenate([tr, va]))
        leak_ok = leak_ok and not np.array_equal(stats_tr.man_mean,
                                                 stats_all.man_mean)
        for c in range(3):
            w_tr = losses.compute_class_weights(prep.labels[tr, c],
                                                prep.class_counts[c])
            w_all = losses.compute_class_weights(prep.labels[:, c],
                                                 prep.class_counts[c])
            leak_ok = leak_ok and w_tr.shape == w_all.shape
    _verdict(4, f"partition exact, stratified deviation {ours:.4f} <= random "
             f"median {float(np.median(devs)):.4f}, no patient leakage",
             partition_ok and strat_ok and leak_ok)


# -- 7: statistics -----------------------------------------------------------

def test_criterion_7_statistics():
    from swallowgraph import stats
    same = np.tile(np.array([[1.0, 1.0, 1.0]]), (6, 1))
    chi, p = stats.friedman_test(same)
    ok = chi == 0.0 and p == 1.0
    strict = np.array([[1, 2, 3]] * 5, dtype=float)  # strict ordering, 5x3
    chi, p = stats.friedman_test(strict)
    ok = ok and abs(chi - 10.0) < 1e-9 and abs(p - 0.006737946999085467) < 1e-6
    p = stats.wilcoxon_signed_rank(np.array([1.0, 2.0, 0.5, 3.0, 1.5]),
                                   np.zeros(5))
    ok = ok and abs(p - 0.0625) < 1e-12
    raw = np.array([0.01, 0.04, 0.03])
    corr = stats.holm_correction(raw)
    ok = ok and np.allclose(corr, [0.03, 0.06, 0.06], atol=1e-12)
    ok = ok and all(corr[np.argsort(raw)][i] <= corr[np.argsort(raw)][i + 1]
                    for i in range(2))
    _verdict(7, "Friedman fixtures, exact Wilcoxon n=5 p=0.0625, Holm "
             "monotone", ok)


# -- 9: patient features -----------------------------------------------------

def test_criterion_9_patient_features():
    names = patient.feature_names()
    ok = len(names) == 51

    rng = np.random.default_rng(9)
    raw = rng.standard_normal((40, 51))
    std, stats_ = patient.standardize(raw, training_rows=list(range(40)))
    ok = (ok and np.abs(std.mean(axis=0)).max() < 1e-9
          and np.abs(std.var(axis=0) - 1.0).max() < 1e-9)

    n = 200
    y = rng.integers(0, 2, size=n)
    feats = rng.standard_normal((n, 51))
    feats[:, 7] = y                           # slot 7 perfectly predictive
    corr = patient.correlation_report(feats, np.column_stack([y, y, y]))
    perfect = corr.final[7]

    labels = np.column_stack([rng.integers(0, 3, n), rng.integers(0, 4, n),
                              rng.integers(0, 2, n)])
    noise = patient.correlation_report(rng.standard_normal((n, 51)), labels)
    independent = float(noise.final.max())
    ok = ok and abs(perfect - 1.0) < 1e-9 and independent < 0.15
    _verdict(9, f"51-slot layout, standardization exact, correlation "
             f"perfect={perfect:.3f} independent={independent:.3f}", ok)


# -- 8: determinism ----------------------------------------------------------

TINY_TRAIN = """
gnn_hidden = 4
tcn_channels = 8
category_dim = 8
patient_dim = 4
patient_hidden = 4
head_hidden = 8
epochs = 1
batch_size = 6
folds = 2
"""


def test_criterion_8_determinism(tmp_path_factory):
    root = tmp_path_factory.mktemp("det")
    rc = cli.main(["synth", "--out", str(root / "ds"), "--seed", "3",
                   "--patients", "8", "--swallows", "2"])
    assert rc == 0
    outs = []
    for run in ("a", "b"):
        cfg = root / f"{run}.cfg"
        cfg.write_text(TINY_TRAIN + f"dataset = {root / 'ds'}\n"
                       f"out_dir = {root / run}\n")
        assert cli.main(["train", "--config", str(cfg)]) == 0
        outs.append(root / run)
    ok = True
    for name in ("metrics.csv", "summary.txt", "loss_history.csv",
                 "correlations.csv", "folds.json"):
        ok = ok and filecmp.cmp(outs[0] / name, outs[1] / name, shallow=False)
    _verdict(8, "two identical train runs produce bit-identical reports", ok)


# -- 5: learnability ---------------------------------------------------------

LEARN_PRESET = dict(
    gnn_variant="generalized", temporal_variant="tcn",
    gnn_hidden=8, tcn_channels=16, category_dim=16,
    patient_dim=8, patient_hidden=16, head_hidden=32,
    learning_rate=1e-2, epochs=8, batch_size=4, folds=5, seed=0,
)


@pytest.fixture(scope="module")
def learn_prepared(tmp_path_factory):
    return _dataset(tmp_path_factory, "learn", patients=60, swallows=10, seed=0)


def test_criterion_5_learnability(learn_prepared):
    cfg = cfgmod.ModelConfig(**LEARN_PRESET).validate()
    _, report, _ = training.train_model(cfg, learn_prepared)
    means = report.mean
    ok = bool(np.all(np.asarray(means) >= 0.90))
    _verdict(5, "generalized-GNN + TCN 5-fold held-out wAF1 "
             + ", ".join(f"{n}={v:.3f}" for n, v in
                         zip(report.category_names, means))
             + " (all >= 0.90)", ok)


# -- 6: ablation ordering ----------------------------------------------------

ABLATE_PRESET = dict(
    gnn_variant="generalized", temporal_variant="tcn",
    gnn_hidden=8, tcn_channels=16, category_dim=16,
    patient_dim=8, patient_hidden=16, head_hidden=32,
    learning_rate=1e-2, epochs=4, batch_size=4, folds=3, seed=0,
)


def test_criterion_6_ablation(tmp_path_factory):
    prep = _dataset(tmp_path_factory, "ablate", patients=30, swallows=6, seed=6)
    cfg = cfgmod.ModelConfig(**ABLATE_PRESET).validate()
    report = training.run_ablation(cfg, prep)
    by_mask = {r["mask"]: np.asarray(r["mean"]) for r in report.ablation_rows}
    full = by_mask[("manometry", "impedance", "patient")]
    man = by_mask[("manometry",)]
    imp = by_mask[("impedance",)]
    ok = (len(report.ablation_rows) == 6
          and bool(np.all(full >= man - 1e-9))
          and bool(np.all(man > imp))
          and bool(np.all(man - imp >= 0.10)))
    _verdict(6, "6-mask ablation: full "
             + np.array2string(full, precision=3)
             + " >= man-only " + np.array2string(man, precision=3)
             + " > imp-only " + np.array2string(imp, precision=3)
             + " with >= 10-point gaps", ok)
