"""Patient questionnaire processing: the 51-feature vector, its encoder,
and the feature/target correlation report.

Feature layout is fixed and ordered: 4 numeric | 28 categorical/ordinal
(integer-coded) | 19 binary note attributes = 51 slots.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy import stats as sps

from . import autodiff as ad

N_NUMERIC = 4
N_CATEGORICAL = 28
N_NOTE_ATTRS = 19
N_FEATURES = N_NUMERIC + N_CATEGORICAL + N_NOTE_ATTRS  # 51


class PatientFeatureError(ValueError):
    pass


@dataclass
class QuestionnaireRecord:
    patient_id: str
    fields: dict
    free_text: str = ""

    def __post_init__(self):
        if not self.patient_id:
            raise PatientFeatureError("patient_id must be non-empty")


@dataclass
class FieldSpec:
    numeric: tuple                  # 4 field names
    categorical: dict               # 28 entries: name -> {value_name: int code}

    def __post_init__(self):
        self.numeric = tuple(self.numeric)
        if len(self.numeric) != N_NUMERIC:
            raise PatientFeatureError(f"need {N_NUMERIC} numeric fields")
        if len(self.categorical) != N_CATEGORICAL:
            raise PatientFeatureError(f"need {N_CATEGORICAL} categorical fields")

    @property
    def feature_names(self):
        return list(self.numeric) + list(self.categorical)


def _ordinal(*values):
    return {v: i for i, v in enumerate(values)}


_YN = _ordinal("no", "yes")
_FREQ = _ordinal("never", "rarely", "sometimes", "often", "daily")

DEFAULT_FIELD_SPEC = FieldSpec(
    numeric=("age", "bmi", "symptom_duration_months", "weight_loss_kg"),
    categorical={
        "sex": _ordinal("female", "male"),
        "smoking": _ordinal("never", "former", "current"),
        "alcohol_use": _FREQ,
        "dysphagia_solids": _YN,
        "dysphagia_liquids": _YN,
        "dysphagia_severity": _ordinal("none", "mild", "moderate", "severe"),
        "heartburn_frequency": _FREQ,
        "regurgitation_frequency": _FREQ,
        "chest_pain_frequency": _FREQ,
        "odynophagia": _YN,
        "globus_sensation": _YN,
        "nocturnal_symptoms": _YN,
        "weight_loss_reported": _YN,
        "appetite_loss": _YN,
        "nausea_frequency": _FREQ,
        "vomiting_frequency": _FREQ,
        "cough_during_meals": _YN,
        "voice_change": _YN,
        "ppi_use": _ordinal("none", "on_demand", "daily"),
        "prokinetic_use": _YN,
        "opioid_use": _YN,
        "diabetes": _YN,
        "hypertension": _YN,
        "thyroid_disorder": _YN,
        "autoimmune_disease": _YN,
        "prior_esophageal_surgery": _YN,
        "prior_endoscopy": _YN,
        "family_history_gi": _YN,
    },
)

DEFAULT_NOTE_VOCABULARY = (
    "reflux", "regurgitation", "chest_pain", "food_impaction", "belching",
    "bloating", "hoarseness", "chronic_cough", "aspiration", "early_satiety",
    "anxiety", "stress_related_symptoms", "sleep_disturbance", "dry_mouth",
    "throat_clearing", "postprandial_fullness", "liquid_preference",
    "slow_eating", "avoids_social_meals",
)

NEGATION_TOKENS = ("no", "not", "without", "denies", "negative")
NEGATION_WINDOW = 3  # tokens before the keyword


class KeywordNoteExtractor:
    """Deterministic keyword matcher over a fixed attribute vocabulary.

    An attribute fires when all its words appear consecutively in the note;
    it is suppressed when a negation token occurs within NEGATION_WINDOW
    tokens before the match.
    """

    def __init__(self, vocabulary=DEFAULT_NOTE_VOCABULARY):
        self.vocabulary = tuple(vocabulary)

    def extract(self, free_text):
        tokens = [t.strip(".,;:!?()").lower() for t in free_text.split()]
        flags = np.zeros(len(self.vocabulary))
        for a, attr in enumerate(self.vocabulary):
            words = attr.split("_")
            n = len(words)
            for i in range(len(tokens) - n + 1):
                if tokens[i:i + n] != words:
                    continue
                window = tokens[max(0, i - NEGATION_WINDOW):i]
                if any(t in NEGATION_TOKENS for t in window):
                    continue
                flags[a] = 1.0
                break
        return flags


def extract_note_attributes(free_text, extractor):
    flags = extractor.extract(free_text)
    if len(flags) != len(extractor.vocabulary):
        raise PatientFeatureError("extractor output length mismatch")
    return flags


def extract_structured(record, field_spec, numeric_medians=None, missing_log=None):
    """32 structured slots (4 numeric + 28 coded categoricals) for one record.

    Missing numerics use the supplied training-fold medians (0.0 when none
    are given); missing categoricals get the dedicated 'unknown' code one
    past the declared coding. Every imputation is appended to missing_log.
    """
    out = np.zeros(N_NUMERIC + N_CATEGORICAL)
    for i, name in enumerate(field_spec.numeric):
        val = record.fields.get(name)
        if val is None:
            fill = 0.0 if numeric_medians is None else float(numeric_medians[i])
            out[i] = fill
            if missing_log is not None:
                missing_log.append((record.patient_id, name, "imputed_median"))
        else:
            out[i] = float(val)
    for j, (name, coding) in enumerate(field_spec.categorical.items()):
        val = record.fields.get(name)
        if val is None:
            out[N_NUMERIC + j] = len(coding)  # 'unknown' code
            if missing_log is not None:
                missing_log.append((record.patient_id, name, "unknown_code"))
        elif val not in coding:
            raise PatientFeatureError(
                f"value '{val}' outside declared coding of field '{name}'")
        else:
            out[N_NUMERIC + j] = coding[val]
    return out


def build_feature_matrix(records, field_spec=DEFAULT_FIELD_SPEC, extractor=None,
                         training_rows=None, missing_log=None):
    """Stack all patients into an [n, 51] raw (unstandardized) matrix.

    Numeric medians for imputation come from training_rows only (all rows
    when not given).
    """
    extractor = extractor or KeywordNoteExtractor()
    rows = training_rows if training_rows is not None else range(len(records))
    med = np.zeros(N_NUMERIC)
    for i, name in enumerate(field_spec.numeric):
        vals = [float(records[r].fields[name]) for r in rows
                if records[r].fields.get(name) is not None]
        med[i] = np.median(vals) if vals else 0.0

    mat = np.zeros((len(records), N_FEATURES))
    for r, rec in enumerate(records):
        mat[r, :N_NUMERIC + N_CATEGORICAL] = extract_structured(
            rec, field_spec, numeric_medians=med, missing_log=missing_log)
        mat[r, N_NUMERIC + N_CATEGORICAL:] = extract_note_attributes(
            rec.free_text, extractor)
    return mat


def feature_names(field_spec=DEFAULT_FIELD_SPEC, vocabulary=DEFAULT_NOTE_VOCABULARY):
    return field_spec.feature_names + [f"note_{a}" for a in vocabulary]


# ---------------------------------------------------------------------------
# standardization


@dataclass
class StandardizeStats:
    mean: np.ndarray
    std: np.ndarray
    source: str = "train"


def standardize(matrix, training_rows, stats=None):
    """Zero-mean/unit-variance per column, fit on training rows only.

    Population std convention. Zero-variance columns keep std=1 with a
    warning. Returns (standardized matrix, stats).
    """
    matrix = np.asarray(matrix, dtype=np.float64)
    if stats is None:
        train = matrix[np.asarray(training_rows, dtype=int)]
        if train.shape[0] == 0:
            raise PatientFeatureError("training row set must be non-empty")
        mean = train.mean(axis=0)
        std = train.std(axis=0)
        zero = std == 0.0
        if zero.any():
            warnings.warn(f"zero-variance feature column(s) {np.where(zero)[0].tolist()}")
            std = np.where(zero, 1.0, std)
        stats = StandardizeStats(mean=mean, std=std, source="train")
    return (matrix - stats.mean) / stats.std, stats


# ---------------------------------------------------------------------------
# feed-forward encoder


def init_patient_encoder(rng, hidden=32, out_dim=32):
    def mat(shape, scale):
        return ad.Tensor(rng.normal(0.0, scale, size=shape), requires_grad=True)
    return {
        "enc_w1": mat((N_FEATURES, hidden), (2.0 / N_FEATURES) ** 0.5),
        "enc_b1": ad.Tensor(np.zeros(hidden), requires_grad=True),
        "enc_w2": mat((hidden, out_dim), (2.0 / hidden) ** 0.5),
        "enc_b2": ad.Tensor(np.zeros(out_dim), requires_grad=True),
    }


def encode_patient(features, params):
    """Feed-forward encoder: [n, 51] -> [n, d_p], differentiable."""
    x = ad.as_tensor(features)
    h = ad.leaky_relu(ad.add(ad.matmul(x, params["enc_w1"]), params["enc_b1"]))
    return ad.add(ad.matmul(h, params["enc_w2"]), params["enc_b2"])


# ---------------------------------------------------------------------------
# correlation report


def _point_biserial_max(x, y, n_classes):
    """Max |Pearson| between x and each class's one-hot indicator."""
    best = 0.0
    for k in range(n_classes):
        ind = (y == k).astype(float)
        if ind.std() == 0 or x.std() == 0:
            continue
        r = np.corrcoef(x, ind)[0, 1]
        if np.isfinite(r):
            best = max(best, abs(r))
    return best


def _spearman_max(x, y, n_classes):
    best = 0.0
    for k in range(n_classes):
        ind = (y == k).astype(float)
        if ind.std() == 0 or x.std() == 0:
            continue
        r = sps.spearmanr(x, ind).statistic
        if np.isfinite(r):
            best = max(best, abs(r))
    return best


def _discretize(x, is_numeric):
    if not is_numeric:
        _, codes = np.unique(x, return_inverse=True)
        return codes
    edges = np.quantile(x, [0.25, 0.5, 0.75])
    return np.digitize(x, np.unique(edges))


def _nmi(x_codes, y):
    """Normalized mutual information (sqrt normalization), both discrete."""
    xs, x_idx = np.unique(x_codes, return_inverse=True)
    ys, y_idx = np.unique(y, return_inverse=True)
    n = len(x_codes)
    joint = np.zeros((len(xs), len(ys)))
    np.add.at(joint, (x_idx, y_idx), 1.0)
    joint /= n
    px = joint.sum(axis=1)
    py = joint.sum(axis=0)
    nz = joint > 0
    mi = (joint[nz] * np.log(joint[nz] / np.outer(px, py)[nz])).sum()
    hx = -(px[px > 0] * np.log(px[px > 0])).sum()
    hy = -(py[py > 0] * np.log(py[py > 0])).sum()
    if hx == 0 or hy == 0:
        return 0.0
    # chance correction: plug-in MI is biased up by about (r-1)(c-1)/2n under
    # independence; subtracting it from numerator and denominator keeps a
    # perfectly predictive feature at exactly 1 while driving noise toward 0
    bias = (len(xs) - 1) * (len(ys) - 1) / (2.0 * n)
    denom = np.sqrt(hx * hy) - bias
    if denom <= 0:
        return 0.0
    return float(np.clip((mi - bias) / denom, 0.0, 1.0))


@dataclass
class CorrelationReport:
    names: list                 # 51 feature names
    target_names: list          # 3 categories + "combined"
    per_measure: np.ndarray     # [51, targets, 3] measures in [0,1]
    per_target: np.ndarray      # [51, targets]
    final: np.ndarray           # [51]
    flagged_constant: list


def correlation_report(features, labels, names=None):
    """Associate each feature with the 3 targets and the combined target.

    Three measures per (feature, target): max |point-biserial Pearson| over
    classes, max |Spearman| likewise, and normalized mutual information on
    discretized features (quartile bins for the 4 numeric slots). Each lies
    in [0,1]; measures average to a per-target score, per-target scores
    average to the final score.
    """
    features = np.asarray(features, dtype=np.float64)
    labels = np.asarray(labels, dtype=int)
    n, f = features.shape
    if n < 3:
        raise PatientFeatureError("correlation report needs at least 3 patients")
    if names is None:
        names = [f"feature_{i}" for i in range(f)]

    combined = np.unique(labels, axis=0, return_inverse=True)[1]
    targets = [labels[:, c] for c in range(labels.shape[1])] + [combined]
    target_names = [f"category_{c + 1}" for c in range(labels.shape[1])] + ["combined"]

    per_measure = np.zeros((f, len(targets), 3))
    flagged = []
    for i in range(f):
        x = features[:, i]
        if x.std() == 0:
            flagged.append(i)
            continue
        codes = _discretize(x, is_numeric=i < N_NUMERIC)
        for t, y in enumerate(targets):
            kc = int(y.max()) + 1
            per_measure[i, t, 0] = _point_biserial_max(x, y, kc)
            per_measure[i, t, 1] = _spearman_max(x, y, kc)
            per_measure[i, t, 2] = _nmi(codes, y)
    per_target = per_measure.mean(axis=2)
    final = per_target.mean(axis=1)
    for i in flagged:
        per_target[i] = 0.0
        final[i] = 0.0
    return CorrelationReport(
        names=list(names), target_names=target_names,
        per_measure=per_measure, per_target=per_target, final=final,
        flagged_constant=flagged,
    )
