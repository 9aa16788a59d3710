"""Whole-model gradient verification on a scaled fixture.

Runs every parameter group of every model variant combination through
central-finite-difference checking at a small size (6 nodes, 16 timesteps,
batch 4) so the full sweep stays fast.
"""

from __future__ import annotations


import numpy as np

from . import autodiff as ad
from . import graphs, losses, model
from .config import ModelConfig

FIXTURE_NODES = 6
FIXTURE_TIMESTEPS = 16
FIXTURE_BATCH = 4
FIXTURE_CLASS_COUNTS = (3, 4, 2)


def scaled_config(gnn_variant, temporal_variant):
    return ModelConfig(
        gnn_variant=gnn_variant,
        temporal_variant=temporal_variant,
        gnn_layers=2,
        gnn_hidden=4,
        tcn_channels=4,
        tcn_kernel=3,
        transformer_blocks=1,
        transformer_heads=2,
        transformer_width=4,
        transformer_ff=8,
        category_dim=3,
        patient_dim=3,
        patient_hidden=3,
        head_hidden=4,
    ).validate()


def fixture_batch(seed=0):
    rng = np.random.default_rng(seed)
    topology = graphs.chain_topology(FIXTURE_NODES)
    n_imp = len(topology.impedance_pairs)
    man = rng.standard_normal((FIXTURE_BATCH, FIXTURE_TIMESTEPS, FIXTURE_NODES))
    imp = rng.standard_normal((FIXTURE_BATCH, FIXTURE_TIMESTEPS, n_imp))
    pfeat = rng.standard_normal((FIXTURE_BATCH, 51))
    labels = np.array([[0, 1, 0], [0, 2, 1], [1, 1, 0], [2, 3, 1]])
    return topology, man, imp, pfeat, labels


def _loss_for(params, config, topology, man, imp, pfeat, labels):
    logits, z, _ = model.forward(params, config, topology, man, imp, pfeat,
                                 FIXTURE_CLASS_COUNTS)
    ce_terms, con_terms = [], []
    for c in range(3):
        targets = losses.smoothed_targets(labels[:, c], FIXTURE_CLASS_COUNTS[c],
                                          config.label_smoothing)
        weights = np.ones(FIXTURE_CLASS_COUNTS[c])
        ce_terms.append(losses.weighted_ce(logits[c], targets, weights))
        con_terms.append(losses.supcon_loss(z[c], labels[:, c],
                                            config.contrastive_temperature))
    return losses.total_loss(ce_terms, con_terms, config.contrastive_weight)


def check_variant(gnn_variant, temporal_variant, step=1e-5, tolerance=1e-4,
                  seed=0):
    """Gradcheck every parameter group of one variant combination.

    Returns a list of dicts: group, max relative error, pass flag.
    """
    config = scaled_config(gnn_variant, temporal_variant)
    topology, man, imp, pfeat, labels = fixture_batch(seed)
    rng = np.random.default_rng(seed + 1)
    params = model.init_model_params(config, rng, topology,
                                     FIXTURE_CLASS_COUNTS,
                                     seq_len=FIXTURE_TIMESTEPS)

    results = []
    for group, items in model.parameter_groups(params).items():
        worst = 0.0
        for key, tensor in items:
            def fn(x, key=key):
                saved = params[key]
                params[key] = x
                try:
                    return _loss_for(params, config, topology, man, imp, pfeat,
                                     labels)
                finally:
                    params[key] = saved

            report = ad.grad_check(fn, tensor.data, step=step,
                                   tolerance=tolerance)
            worst = max(worst, report.max_rel_error)
        results.append({
            "variants": f"{gnn_variant}-{temporal_variant}",
            "group": group,
            "max_rel_error": worst,
            "passed": worst < tolerance,
        })
    return results


ALL_COMBOS = (
    ("generalized", "tcn"),
    ("generalized", "transformer"),
    ("attention", "tcn"),
    ("attention", "transformer"),
)


def _broken_leaky_relu(a, slope=ad.LEAKY_SLOPE):
    a = ad.as_tensor(a)
    out = np.where(a.data >= 0, a.data, slope * a.data)
    # deliberately wrong gradient (negative-control hook for the suite)
    return ad._make("leaky_relu", out, (a,), [
        (a, lambda g: g * np.where(a.data >= 0, 1.05, slope)),
    ])


def run_suite(combos=ALL_COMBOS, step=1e-5, tolerance=1e-4, sabotage=False):
    """Full gradcheck sweep; `sabotage` injects a wrong activation gradient
    so callers can verify the suite actually fails on bad gradients."""
    original = ad.leaky_relu
    if sabotage:
        ad.leaky_relu = _broken_leaky_relu
    try:
        results = []
        for gnn_variant, temporal_variant in combos:
            results.extend(check_variant(gnn_variant, temporal_variant,
                                         step=step, tolerance=tolerance))
        return results
    finally:
        ad.leaky_relu = original


def suite_passed(results):
    return all(r["passed"] for r in results)
