"""End-to-end model: spatial GNN -> per-category node pooling -> shared
temporal trunk -> per-category temporal pooling -> fusion with the patient
embedding -> three classification heads.

Parameters live in one flat dict of named leaf tensors; keys starting with
an underscore are architecture metadata, not learnable.
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from . import autodiff as ad
from . import graphs, patient, temporal
from .hrim import WINDOW_SAMPLES


class ModelError(ValueError):
    pass


def init_model_params(config, rng, topology, class_counts, seq_len=WINDOW_SAMPLES):
    params = {}
    params.update(graphs.init_gnn_params(
        rng, config.gnn_variant, layers=config.gnn_layers,
        in_dim=1, hidden=config.gnn_hidden))
    params.update(graphs.init_node_pool_params(rng, hidden=config.gnn_hidden))

    trunk_in = 3 * config.gnn_hidden
    if config.temporal_variant == "tcn":
        params.update(temporal.init_tcn_params(
            rng, in_dim=trunk_in, channels=config.tcn_channels,
            kernel=config.tcn_kernel, seq_len=seq_len))
        trunk_out = config.tcn_channels
    else:
        params.update(temporal.init_transformer_params(
            rng, in_dim=trunk_in, width=config.transformer_width,
            heads=config.transformer_heads, ff_width=config.transformer_ff,
            blocks=config.transformer_blocks))
        trunk_out = config.transformer_width
    params.update(temporal.init_temporal_pool_params(
        rng, in_dim=trunk_out, category_dim=config.category_dim))

    params.update(patient.init_patient_encoder(
        rng, hidden=config.patient_hidden, out_dim=config.patient_dim))

    fuse_in = config.category_dim + config.patient_dim
    for c, k in enumerate(class_counts):
        p = f"head{c}_"
        params[p + "w1"] = ad.Tensor(
            rng.normal(0.0, (2.0 / fuse_in) ** 0.5, size=(fuse_in, config.head_hidden)),
            requires_grad=True)
        params[p + "b1"] = ad.Tensor(np.zeros(config.head_hidden), requires_grad=True)
        params[p + "w2"] = ad.Tensor(
            rng.normal(0.0, (1.0 / config.head_hidden) ** 0.5,
                       size=(config.head_hidden, k)),
            requires_grad=True)
        params[p + "b2"] = ad.Tensor(np.zeros(k), requires_grad=True)
    return params


def learnable_items(params):
    return [(k, v) for k, v in params.items()
            if not k.startswith("_") and isinstance(v, ad.Tensor)]


def parameter_groups(params):
    """Group flat keys by component prefix (gnn0, tcn3, head1, ...)."""
    groups = {}
    for key, tensor in learnable_items(params):
        prefix = key.split("_", 1)[0]
        groups.setdefault(prefix, []).append((key, tensor))
    return groups


def apply_modality_mask(manometry, impedance, config):
    """Structural ablation on the input arrays: a disabled modality is
    zeroed before any forward computation."""
    man = manometry if config.use_manometry else np.zeros_like(manometry)
    imp = impedance if config.use_impedance else np.zeros_like(impedance)
    return man, imp


def fuse_and_classify(category_embeddings, patient_emb, params, class_counts):
    """Per category: concat(z_c, patient embedding) -> 2-layer MLP -> logits."""
    logits = []
    for c in range(len(class_counts)):
        p = f"head{c}_"
        fused = ad.concat([category_embeddings[c], patient_emb], axis=1)
        hidden = ad.leaky_relu(ad.add(ad.matmul(fused, params[p + "w1"]),
                                      params[p + "b1"]))
        logits.append(ad.add(ad.matmul(hidden, params[p + "w2"]), params[p + "b2"]))
    return logits


def forward(params, config, topology, manometry, impedance, patient_features,
            class_counts):
    """Full forward pass on a batch.

    manometry [B, T, N], impedance [B, T, C], patient_features [B, 51]
    (already normalized/standardized with training-fold stats). Returns
    (logits per category, category embeddings, patient embedding).
    """
    man, imp = apply_modality_mask(np.asarray(manometry), np.asarray(impedance),
                                   config)
    b, t, n_nodes = man.shape
    if n_nodes != topology.n_nodes:
        raise ModelError(f"node count {n_nodes} != topology {topology.n_nodes}")

    node0 = ad.constant(man.reshape(b * t, n_nodes, 1))
    efeat = ad.constant(graphs.directed_edge_features(
        imp.reshape(b * t, imp.shape[2]), topology))

    h = graphs.gnn_forward(node0, efeat, topology, params,
                           layers=config.gnn_layers, variant=config.gnn_variant)

    pooled = [graphs.node_attention_pool(h, params, c) for c in range(3)]
    x = ad.concat(pooled, axis=1)                       # [B*T, 3*d_h]
    x = ad.reshape(x, (b, t, x.shape[1]))

    if config.temporal_variant == "tcn":
        trunk = temporal.tcn_forward(x, params, kernel=config.tcn_kernel)
    else:
        trunk = temporal.transformer_encoder_forward(x, params)

    z = [temporal.temporal_attention_pool(trunk, params, c) for c in range(3)]

    if config.use_patient:
        p_emb = patient.encode_patient(ad.constant(patient_features), params)
    else:
        p_emb = ad.constant(np.zeros((b, config.patient_dim)))

    logits = fuse_and_classify(z, p_emb, params, class_counts)
    return logits, z, p_emb


# ---------------------------------------------------------------------------
# parameter persistence


def save_params(params, path):
    arrays = {k: v.data for k, v in learnable_items(params)}
    meta = {k: v for k, v in params.items() if k.startswith("_")}
    np.savez(path, __meta__=json.dumps(meta), **arrays)


def load_params(path):
    with np.load(path, allow_pickle=False) as npz:
        params = {}
        for k in npz.files:
            if k == "__meta__":
                meta = json.loads(str(npz[k]))
                params.update(meta)
            else:
                params[k] = ad.Tensor(npz[k], requires_grad=True)
    return params


def params_path(out_dir, fold):
    return Path(out_dir) / f"params_fold{fold}.npz"
