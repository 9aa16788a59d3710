"""Cross-validated training: per-fold optimization of the three-part
objective, evaluation with weighted F1, modality ablations, and the
accompanying statistical comparisons.

All randomness fans out from one seed through named SeedSequence spawns:
stream 0 is the fold split, streams (1 + 2*fold) and (2 + 2*fold) are the
fold's parameter init and batch shuffling.
"""

from __future__ import annotations

from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from . import cv, graphs, losses, model, patient, stats
from .hrim import SignalStats


class TrainingError(RuntimeError):
    pass


# ---------------------------------------------------------------------------
# dataset preparation


@dataclass
class PreparedDataset:
    schema: object
    manometry: np.ndarray        # [N, 750, 36] raw
    impedance: np.ndarray        # [N, 750, 15] raw
    labels: np.ndarray           # [N, 3]
    event_patient: np.ndarray    # [N] row into patients
    patients: list               # patient ids, sorted
    questionnaires: list         # aligned with patients

    @property
    def class_counts(self):
        return self.schema.class_counts

    def patient_labels(self):
        out = {}
        for r, pid in enumerate(self.patients):
            out[pid] = self.labels[self.event_patient == r]
        return out


def prepare_dataset(manifest, events, questionnaires):
    patients = sorted({e.patient_id for e in events})
    row_of = {pid: r for r, pid in enumerate(patients)}
    q_of = {q.patient_id: q for q in questionnaires}
    missing = [p for p in patients if p not in q_of]
    if missing:
        raise TrainingError(f"missing questionnaires for {missing}")
    return PreparedDataset(
        schema=manifest.schema,
        manometry=np.stack([e.manometry for e in events]),
        impedance=np.stack([e.impedance for e in events]),
        labels=np.array([e.labels for e in events], dtype=int),
        event_patient=np.array([row_of[e.patient_id] for e in events], dtype=int),
        patients=patients,
        questionnaires=[q_of[p] for p in patients],
    )


# ---------------------------------------------------------------------------
# optimizer


class Adam:
    """Adam with the usual bias correction; operates on a flat param dict."""

    def __init__(self, params, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8):
        self.items = model.learnable_items(params)
        self.lr = lr
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.m = {k: np.zeros_like(t.data) for k, t in self.items}
        self.v = {k: np.zeros_like(t.data) for k, t in self.items}
        self.t = 0

    def step(self):
        self.t += 1
        b1c = 1.0 - self.beta1 ** self.t
        b2c = 1.0 - self.beta2 ** self.t
        for key, tensor in self.items:
            g = tensor.grad
            if g is None:
                continue
            m = self.m[key]
            v = self.v[key]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            tensor.data -= self.lr * (m / b1c) / (np.sqrt(v / b2c) + self.eps)

    def zero_grad(self):
        for _, tensor in self.items:
            tensor.grad = None


# ---------------------------------------------------------------------------
# per-fold context


@dataclass
class FoldModel:
    fold: int
    params: dict
    signal_stats: SignalStats
    patient_matrix: np.ndarray   # [P, 51] standardized with this fold's stats
    patient_stats: object
    topology: object


def _fold_signal_stats(prepared, train_idx):
    man = prepared.manometry[train_idx]
    imp = prepared.impedance[train_idx]
    man_std = man.std(axis=(0, 1))
    imp_std = imp.std(axis=(0, 1))
    man_std[man_std == 0] = 1.0
    imp_std[imp_std == 0] = 1.0
    return SignalStats(
        man_mean=man.mean(axis=(0, 1)), man_std=man_std,
        imp_mean=imp.mean(axis=(0, 1)), imp_std=imp_std, source="train")


def _normalized_batch(prepared, idx, sig):
    man = (prepared.manometry[idx] - sig.man_mean) / sig.man_std
    imp = (prepared.impedance[idx] - sig.imp_mean) / sig.imp_std
    return man, imp


def fold_event_split(prepared, assignment, fold):
    val_pat = set(assignment.validation_patients(fold))
    val_rows = {r for r, pid in enumerate(prepared.patients) if pid in val_pat}
    is_val = np.isin(prepared.event_patient, list(val_rows))
    return np.where(~is_val)[0], np.where(is_val)[0]


def _predict(fold_model, config, prepared, idx, batch_size, collect_embeddings=False):
    preds = np.zeros((len(idx), 3), dtype=int)
    embeddings = [[] for _ in range(3)] if collect_embeddings else None
    for start in range(0, len(idx), batch_size):
        chunk = idx[start:start + batch_size]
        man, imp = _normalized_batch(prepared, chunk, fold_model.signal_stats)
        pfeat = fold_model.patient_matrix[prepared.event_patient[chunk]]
        logits, z, _ = model.forward(
            fold_model.params, config, fold_model.topology, man, imp, pfeat,
            prepared.class_counts)
        for c in range(3):
            preds[start:start + len(chunk), c] = logits[c].data.argmax(axis=1)
            if collect_embeddings:
                embeddings[c].append(z[c].data.copy())
    if collect_embeddings:
        embeddings = [np.vstack(e) for e in embeddings]
    return preds, embeddings


def evaluate_fold(fold_model, config, prepared, idx, batch_size=16):
    preds, _ = _predict(fold_model, config, prepared, idx, batch_size)
    labels = prepared.labels[idx]
    return np.array([
        cv.weighted_f1(preds[:, c], labels[:, c], prepared.class_counts[c])
        for c in range(3)
    ])


def patient_modal_labels(prepared):
    """Patient-level label per category: mode over the patient's swallows,
    ties resolved to the lowest class index."""
    out = np.zeros((len(prepared.patients), 3), dtype=int)
    for r in range(len(prepared.patients)):
        labs = prepared.labels[prepared.event_patient == r]
        for c in range(3):
            out[r, c] = int(np.bincount(labs[:, c]).argmax())
    return out


def rebuild_fold_model(config, prepared, assignment, fold, params):
    """Recreate a fold's evaluation context (training-fold statistics) for
    previously trained parameters."""
    train_idx, _ = fold_event_split(prepared, assignment, fold)
    sig = _fold_signal_stats(prepared, train_idx)
    train_pat_rows = sorted(set(prepared.event_patient[train_idx].tolist()))
    raw = patient.build_feature_matrix(
        prepared.questionnaires, training_rows=train_pat_rows)
    pmat, pstats = patient.standardize(raw, training_rows=train_pat_rows)
    return FoldModel(fold=fold, params=params, signal_stats=sig,
                     patient_matrix=pmat, patient_stats=pstats,
                     topology=graphs.chain_topology())


def train_fold(config, prepared, assignment, fold, init_seed, batch_seed):
    """Optimize one fold; returns (FoldModel, val wAF1 [3], history)."""
    train_idx, val_idx = fold_event_split(prepared, assignment, fold)
    topology = graphs.chain_topology()
    sig = _fold_signal_stats(prepared, train_idx)

    train_pat_rows = sorted(set(prepared.event_patient[train_idx].tolist()))
    raw = patient.build_feature_matrix(
        prepared.questionnaires, training_rows=train_pat_rows)
    pmat, pstats = patient.standardize(raw, training_rows=train_pat_rows)

    class_weights = [
        losses.compute_class_weights(prepared.labels[train_idx, c],
                                     prepared.class_counts[c])
        for c in range(3)
    ]

    init_rng = np.random.default_rng(init_seed)
    params = model.init_model_params(config, init_rng, topology,
                                     prepared.class_counts,
                                     seq_len=prepared.manometry.shape[1])
    opt = Adam(params, lr=config.learning_rate)
    batch_rng = np.random.default_rng(batch_seed)

    fm = FoldModel(fold=fold, params=params, signal_stats=sig,
                   patient_matrix=pmat, patient_stats=pstats, topology=topology)

    history = []
    for epoch in range(config.epochs):
        order = batch_rng.permutation(train_idx)
        epoch_loss, epoch_ce, epoch_con, n_batches = 0.0, 0.0, 0.0, 0
        for start in range(0, len(order), config.batch_size):
            bidx = order[start:start + config.batch_size]
            if len(bidx) < 2:
                continue
            man, imp = _normalized_batch(prepared, bidx, sig)
            pfeat = pmat[prepared.event_patient[bidx]]
            blabels = prepared.labels[bidx]

            try:
                logits, z, _ = model.forward(params, config, topology, man, imp,
                                             pfeat, prepared.class_counts)
                ce_terms, con_terms = [], []
                for c in range(3):
                    targets = losses.smoothed_targets(
                        blabels[:, c], prepared.class_counts[c],
                        config.label_smoothing)
                    ce_terms.append(losses.weighted_ce(
                        logits[c], targets, class_weights[c]))
                    con_terms.append(losses.supcon_loss(
                        z[c], blabels[:, c], config.contrastive_temperature))
                loss = losses.total_loss(ce_terms, con_terms,
                                         config.contrastive_weight)
                if not np.isfinite(loss.data):
                    raise ad.NonFiniteError("loss is non-finite")
                opt.zero_grad()
                loss.backward()
                opt.step()
            except ad.NonFiniteError as exc:
                raise TrainingError(
                    f"fold {fold} diverged at epoch {epoch}: {exc}") from exc

            epoch_loss += float(loss.data)
            epoch_ce += sum(float(t.data) for t in ce_terms)
            epoch_con += sum(float(t.data) for t in con_terms)
            n_batches += 1
        history.append({
            "epoch": epoch,
            "loss": epoch_loss / max(n_batches, 1),
            "ce": epoch_ce / max(n_batches, 1),
            "con": epoch_con / max(n_batches, 1),
        })

    scores = evaluate_fold(fm, config, prepared, val_idx,
                           batch_size=config.batch_size)
    return fm, scores, history


# ---------------------------------------------------------------------------
# metrics report


@dataclass
class MetricsReport:
    category_names: tuple
    fold_scores: np.ndarray          # [k, 3]
    history: list                    # per fold: list of epoch dicts
    ablation_rows: list = field(default_factory=list)
    friedman: dict = field(default_factory=dict)      # category -> (stat, p)
    holm: dict = field(default_factory=dict)          # category -> pair details

    @property
    def mean(self):
        return self.fold_scores.mean(axis=0)

    @property
    def std(self):
        return self.fold_scores.std(axis=0)


def _fold_seeds(seed, k):
    children = np.random.SeedSequence(seed).spawn(1 + 2 * k)
    split = children[0]
    per_fold = [(children[1 + 2 * f], children[2 + 2 * f]) for f in range(k)]
    return split, per_fold


def _train_fold_worker(args):
    config, prepared, assignment, fold, init_seed, batch_seed = args
    return train_fold(config, prepared, assignment, fold, init_seed, batch_seed)


def train_model(config, prepared, parallel_folds=1, fold_assignment=None):
    """5-fold (by default) patient-level CV training of the configured model.

    Returns (fold models, MetricsReport). Deterministic given config.seed.
    """
    config.validate()
    k = config.folds
    split_seed, per_fold = _fold_seeds(config.seed, k)
    if fold_assignment is None:
        split_rng_seed = split_seed.generate_state(1)[0]
        fold_assignment = cv.multilabel_stratified_kfold(
            prepared.patient_labels(), prepared.class_counts, k=k,
            seed=int(split_rng_seed))

    jobs = [(config, prepared, fold_assignment, f, per_fold[f][0], per_fold[f][1])
            for f in range(k)]
    if parallel_folds > 1:
        with ProcessPoolExecutor(max_workers=parallel_folds) as pool:
            results = list(pool.map(_train_fold_worker, jobs))
    else:
        results = [_train_fold_worker(j) for j in jobs]

    fold_models = [r[0] for r in results]
    fold_scores = np.stack([r[1] for r in results])
    history = [r[2] for r in results]
    report = MetricsReport(
        category_names=prepared.schema.categories,
        fold_scores=fold_scores,
        history=history,
    )
    return fold_models, report, fold_assignment


# ---------------------------------------------------------------------------
# ablation


PAPER_MASKS = (
    ("manometry", "impedance", "patient"),
    ("manometry", "impedance"),
    ("manometry", "patient"),
    ("impedance", "patient"),
    ("manometry",),
    ("impedance",),
)


def run_ablation(config, prepared, masks=PAPER_MASKS, parallel_folds=1):
    """Train/test once per modality mask on a shared fold split.

    Returns a MetricsReport whose ablation_rows hold one entry per mask and
    whose friedman/holm fields compare the masks per category.
    """
    if any(len(m) == 0 for m in masks):
        raise TrainingError("every ablation mask must enable at least one modality")
    split_seed, _ = _fold_seeds(config.seed, config.folds)
    assignment = cv.multilabel_stratified_kfold(
        prepared.patient_labels(), prepared.class_counts, k=config.folds,
        seed=int(split_seed.generate_state(1)[0]))

    rows = []
    per_mask_scores = []
    for mask in masks:
        mcfg = config.with_modalities(mask)
        _, rep, _ = train_model(mcfg, prepared, parallel_folds=parallel_folds,
                                fold_assignment=assignment)
        rows.append({
            "mask": tuple(mask),
            "fold_scores": rep.fold_scores,
            "mean": rep.mean,
            "std": rep.std,
        })
        per_mask_scores.append(rep.fold_scores)

    report = MetricsReport(
        category_names=prepared.schema.categories,
        fold_scores=rows[0]["fold_scores"],
        history=[],
        ablation_rows=rows,
    )
    stacked = np.stack(per_mask_scores)          # [masks, k, 3]
    for c, name in enumerate(prepared.schema.categories):
        matrix = stacked[:, :, c].T              # folds x masks
        report.friedman[name] = stats.friedman_test(matrix)
        _, details = stats.wilcoxon_holm(matrix)
        report.holm[name] = details
    return report


# ---------------------------------------------------------------------------
# embedding export


def collect_embeddings(fold_models, config, prepared, assignment, batch_size=16):
    """Post-training category embeddings for every swallow, taken from the
    fold that held the swallow out (so each swallow appears exactly once).

    Returns rows: (patient_id, category index, label, embedding vector).
    """
    rows = []
    for fm in fold_models:
        _, val_idx = fold_event_split(prepared, assignment, fm.fold)
        _, embeddings = _predict(fm, config, prepared, val_idx, batch_size,
                                 collect_embeddings=True)
        for c in range(3):
            for i, ev in enumerate(val_idx):
                rows.append((
                    prepared.patients[prepared.event_patient[ev]],
                    c,
                    int(prepared.labels[ev, c]),
                    embeddings[c][i],
                ))
    return rows
