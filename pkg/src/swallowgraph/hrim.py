"""Swallow data model, on-disk formats, and the synthetic dataset generator.

A recording holds the raw sensor matrices for one patient: pressure from 36
catheter sensors (mmHg) and impedance from 15 channels (ohm), sampled at
50 Hz. A swallow event is a fixed 750-sample (15 s) window with one class
label per annotation category.

On-disk layout of a dataset directory:
  manifest.json            dataset manifest (schema + per-patient entries)
  <pid>.hrim               recording, binary (header documented below)
  <pid>_questionnaire.json patient questionnaire

Recording binary format (little-endian):
  bytes 0..3   magic b"HRIM"
  u32          version (1)
  u32          T (sample count)
  u32          manometry column count (36)
  u32          impedance column count (15)
  T*36 f64     manometry, row-major
  T*15 f64     impedance, row-major
"""

from __future__ import annotations

import json
import struct
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .patient import (
    DEFAULT_FIELD_SPEC,
    DEFAULT_NOTE_VOCABULARY,
    QuestionnaireRecord,
)

MAN_SENSORS = 36
IMP_CHANNELS = 15
WINDOW_SAMPLES = 750
SAMPLE_RATE_HZ = 50  # 750 samples / 15 s

MAGIC = b"HRIM"
FORMAT_VERSION = 1


class DataFormatError(ValueError):
    pass


@dataclass
class Recording:
    patient_id: str
    manometry: np.ndarray   # [T, 36] mmHg
    impedance: np.ndarray   # [T, 15] ohm
    sample_rate: int = SAMPLE_RATE_HZ

    def __post_init__(self):
        self.manometry = np.asarray(self.manometry, dtype=np.float64)
        self.impedance = np.asarray(self.impedance, dtype=np.float64)
        if self.manometry.ndim != 2 or self.manometry.shape[1] != MAN_SENSORS:
            raise DataFormatError(
                f"manometry must have {MAN_SENSORS} columns, got shape {self.manometry.shape}")
        if self.impedance.ndim != 2 or self.impedance.shape[1] != IMP_CHANNELS:
            raise DataFormatError(
                f"impedance must have {IMP_CHANNELS} columns, got shape {self.impedance.shape}")
        if self.manometry.shape[0] != self.impedance.shape[0]:
            raise DataFormatError("manometry and impedance must share the sample axis")
        if self.manometry.shape[0] < 1:
            raise DataFormatError("recording must contain at least one sample")


@dataclass
class SwallowEvent:
    manometry: np.ndarray    # [750, 36]
    impedance: np.ndarray    # [750, 15]
    labels: tuple | None     # one class index per category, or None if unset
    patient_id: str

    def __post_init__(self):
        self.manometry = np.asarray(self.manometry, dtype=np.float64)
        self.impedance = np.asarray(self.impedance, dtype=np.float64)
        if self.manometry.shape != (WINDOW_SAMPLES, MAN_SENSORS):
            raise DataFormatError(f"event manometry shape {self.manometry.shape}")
        if self.impedance.shape != (WINDOW_SAMPLES, IMP_CHANNELS):
            raise DataFormatError(f"event impedance shape {self.impedance.shape}")


@dataclass
class LabelSchema:
    categories: tuple        # category names, length 3
    classes: tuple           # per category: tuple of class names

    def __post_init__(self):
        self.categories = tuple(self.categories)
        self.classes = tuple(tuple(c) for c in self.classes)
        if len(self.categories) != 3 or len(self.classes) != 3:
            raise DataFormatError("label schema must define exactly 3 categories")
        if any(len(c) == 0 for c in self.classes):
            raise DataFormatError("every category needs at least one class")

    @property
    def class_counts(self):
        return tuple(len(c) for c in self.classes)

    def encode(self, category_idx, class_name):
        try:
            return self.classes[category_idx].index(class_name)
        except ValueError:
            raise DataFormatError(
                f"unknown label '{class_name}' for category "
                f"'{self.categories[category_idx]}'") from None


DEFAULT_SCHEMA = LabelSchema(
    categories=("peristaltic_pattern", "contraction_type", "pressure_characteristics"),
    classes=(
        ("normal", "fragmented", "absent"),
        ("normal", "hypercontractile", "weak", "premature"),
        ("normal", "pressurized"),
    ),
)


@dataclass
class SwallowAnnotation:
    onset: int
    labels: tuple  # class indices per category


@dataclass
class PatientEntry:
    patient_id: str
    questionnaire: str
    recording: str
    swallows: list


@dataclass
class DatasetManifest:
    schema: LabelSchema
    patients: list = field(default_factory=list)
    root: Path | None = None

    def __post_init__(self):
        pids = [p.patient_id for p in self.patients]
        if len(pids) != len(set(pids)):
            raise DataFormatError("patient ids must be unique")


# ---------------------------------------------------------------------------
# recording i/o


def save_recording(recording, path):
    t = recording.manometry.shape[0]
    header = MAGIC + struct.pack("<IIII", FORMAT_VERSION, t, MAN_SENSORS, IMP_CHANNELS)
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(recording.manometry.astype("<f8").tobytes())
        fh.write(recording.impedance.astype("<f8").tobytes())


def load_recording(path, patient_id=""):
    raw = Path(path).read_bytes()
    if raw[:4] != MAGIC:
        raise DataFormatError(f"{path}: bad magic")
    version, t, n_man, n_imp = struct.unpack("<IIII", raw[4:20])
    if version != FORMAT_VERSION:
        raise DataFormatError(f"{path}: unsupported version {version}")
    if n_man != MAN_SENSORS or n_imp != IMP_CHANNELS:
        raise DataFormatError(
            f"{path}: column counts {n_man}/{n_imp}, expected {MAN_SENSORS}/{IMP_CHANNELS}")
    need = 20 + 8 * t * (n_man + n_imp)
    if len(raw) != need:
        raise DataFormatError(f"{path}: truncated ({len(raw)} bytes, expected {need})")
    man = np.frombuffer(raw, dtype="<f8", count=t * n_man, offset=20).reshape(t, n_man)
    imp = np.frombuffer(raw, dtype="<f8", count=t * n_imp,
                        offset=20 + 8 * t * n_man).reshape(t, n_imp)
    return Recording(patient_id=patient_id, manometry=man.copy(), impedance=imp.copy())


def export_recording_csv(recording, path):
    header = (["sample"] + [f"man_{i}" for i in range(MAN_SENSORS)]
              + [f"imp_{j}" for j in range(IMP_CHANNELS)])
    t = recording.manometry.shape[0]
    body = np.column_stack([np.arange(t), recording.manometry, recording.impedance])
    np.savetxt(path, body, delimiter=",", header=",".join(header), comments="",
               fmt="%.6f")


# ---------------------------------------------------------------------------
# windowing


def window_swallow(recording, onset):
    """Cut a 750-sample event at `onset`; short tails repeat the last sample."""
    t = recording.manometry.shape[0]
    if onset < 0 or onset >= t:
        raise DataFormatError(f"onset {onset} outside recording of length {t}")
    man = recording.manometry[onset:onset + WINDOW_SAMPLES]
    imp = recording.impedance[onset:onset + WINDOW_SAMPLES]
    short = WINDOW_SAMPLES - man.shape[0]
    if short > 0:
        man = np.vstack([man, np.repeat(man[-1:], short, axis=0)])
        imp = np.vstack([imp, np.repeat(imp[-1:], short, axis=0)])
    return SwallowEvent(manometry=man.copy(), impedance=imp.copy(),
                        labels=None, patient_id=recording.patient_id)


# ---------------------------------------------------------------------------
# manifest i/o


def _schema_to_json(schema):
    return {
        "categories": [
            {"name": name, "classes": list(classes)}
            for name, classes in zip(schema.categories, schema.classes)
        ]
    }


def _schema_from_json(obj):
    cats = obj["categories"]
    return LabelSchema(
        categories=tuple(c["name"] for c in cats),
        classes=tuple(tuple(c["classes"]) for c in cats),
    )


def save_manifest(manifest, path):
    obj = {
        "schema": _schema_to_json(manifest.schema),
        "patients": [
            {
                "patient_id": p.patient_id,
                "questionnaire": p.questionnaire,
                "recording": p.recording,
                "swallows": [
                    {
                        "onset": int(s.onset),
                        "labels": {
                            manifest.schema.categories[c]:
                                manifest.schema.classes[c][s.labels[c]]
                            for c in range(3)
                        },
                    }
                    for s in p.swallows
                ],
            }
            for p in manifest.patients
        ],
    }
    Path(path).write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def load_manifest(path):
    path = Path(path)
    obj = json.loads(path.read_text())
    schema = _schema_from_json(obj["schema"])
    patients = []
    for p in obj["patients"]:
        swallows = [
            SwallowAnnotation(
                onset=int(s["onset"]),
                labels=tuple(schema.encode(c, s["labels"][schema.categories[c]])
                             for c in range(3)),
            )
            for s in p["swallows"]
        ]
        patients.append(PatientEntry(
            patient_id=p["patient_id"],
            questionnaire=p["questionnaire"],
            recording=p["recording"],
            swallows=swallows,
        ))
    return DatasetManifest(schema=schema, patients=patients, root=path.parent)


def load_questionnaire(path):
    obj = json.loads(Path(path).read_text())
    return QuestionnaireRecord(
        patient_id=obj["patient_id"],
        fields=dict(obj["fields"]),
        free_text=obj.get("free_text", ""),
    )


def load_dataset(manifest_path):
    """Load a dataset directory: (manifest, events, questionnaires).

    Events come out in manifest order (patients, then swallows).
    """
    manifest = load_manifest(manifest_path)
    root = manifest.root
    events, questionnaires = [], []
    for p in manifest.patients:
        rec_path = root / p.recording
        if not rec_path.exists():
            raise DataFormatError(f"missing recording file {rec_path}")
        q_path = root / p.questionnaire
        if not q_path.exists():
            raise DataFormatError(f"missing questionnaire file {q_path}")
        recording = load_recording(rec_path, patient_id=p.patient_id)
        questionnaires.append(load_questionnaire(q_path))
        for s in p.swallows:
            ev = window_swallow(recording, s.onset)
            ev.labels = s.labels
            events.append(ev)
    return manifest, events, questionnaires


# ---------------------------------------------------------------------------
# signal normalization


@dataclass
class SignalStats:
    man_mean: np.ndarray
    man_std: np.ndarray
    imp_mean: np.ndarray
    imp_std: np.ndarray
    source: str = "train"  # provenance tag, checked by leakage tests


def compute_signal_stats(events, source="train"):
    """Per-sensor mean/std (population convention) over the given events."""
    man = np.stack([e.manometry for e in events])
    imp = np.stack([e.impedance for e in events])
    man_mean = man.mean(axis=(0, 1))
    man_std = man.std(axis=(0, 1))
    imp_mean = imp.mean(axis=(0, 1))
    imp_std = imp.std(axis=(0, 1))
    for std, kind in ((man_std, "manometry"), (imp_std, "impedance")):
        zero = std == 0.0
        if zero.any():
            warnings.warn(f"zero-variance {kind} sensor(s) {np.where(zero)[0].tolist()}; "
                          "using std=1")
            std[zero] = 1.0
    return SignalStats(man_mean, man_std, imp_mean, imp_std, source=source)


def normalize_signals(events, stats):
    """Apply training-fold stats; never recompute on the events passed in."""
    if stats.source != "train":
        raise DataFormatError("normalization stats must come from training folds")
    out = []
    for e in events:
        out.append(SwallowEvent(
            manometry=(e.manometry - stats.man_mean) / stats.man_std,
            impedance=(e.impedance - stats.imp_mean) / stats.imp_std,
            labels=e.labels,
            patient_id=e.patient_id,
        ))
    return out


# ---------------------------------------------------------------------------
# synthetic generator


@dataclass
class SyntheticSpec:
    patients: int = 60
    swallows_per_patient: int = 10
    class_counts: tuple = (3, 4, 2)
    noise: float = 0.05
    seed: int = 0
    priors: tuple | None = None  # per category; default: skewed (K, K-1, .., 1)/sum

    def resolved_priors(self):
        if self.priors is not None:
            return tuple(tuple(p) for p in self.priors)
        out = []
        for k in self.class_counts:
            w = np.arange(k, 0, -1, dtype=float)
            out.append(tuple(w / w.sum()))
        return tuple(out)


def _exact_allocation(priors, n):
    """Class counts summing to n, each within 1 of priors*n (largest remainder)."""
    raw = np.asarray(priors) * n
    counts = np.floor(raw).astype(int)
    remainder = n - counts.sum()
    order = np.argsort(-(raw - counts))
    for i in range(remainder):
        counts[order[i]] += 1
    return counts


def _default_schema_for(class_counts):
    if tuple(class_counts) == DEFAULT_SCHEMA.class_counts:
        return DEFAULT_SCHEMA
    return LabelSchema(
        categories=DEFAULT_SCHEMA.categories,
        classes=tuple(
            tuple(f"class_{k}" for k in range(count)) for count in class_counts
        ),
    )


# class-conditioned pressure-wave template parameters
_PERISTALSIS_LAG = (12.0, 12.0, 20.0)      # samples of ridge delay per sensor
_PERISTALSIS_AMP = (1.0, 1.0, 0.3)         # overall contraction strength;
# the weak class keeps enough amplitude that contraction type stays readable
_FRAGMENT_BAND = (14, 22)                  # sensors zeroed for the fragmented class
_CONTRACTION_AMP = (60.0, 130.0, 25.0, 90.0)
_CONTRACTION_WIDTH = (35.0, 20.0, 55.0, 10.0)  # distinct per class: the
# temporal extent of the ridge identifies contraction type on its own,
# independent of the amplitude scaling applied by the peristalsis class
_PRESSURIZATION_OFFSET = (0.0, 28.0)       # distal baseline add for category 3


def _swallow_signal(labels, class_counts, noise, rng):
    """Render one swallow's manometry/impedance from its class labels."""
    c1, c2, c3 = (labels[i] % class_counts[i] for i in range(3))
    t = np.arange(WINDOW_SAMPLES)[:, None]          # [750, 1]
    s = np.arange(MAN_SENSORS)[None, :]             # [1, 36]

    t_onset = 80.0 + rng.uniform(-10.0, 10.0)
    lag = _PERISTALSIS_LAG[c1 % 3]
    center = t_onset + lag * s
    amp = _CONTRACTION_AMP[c2 % 4] * _PERISTALSIS_AMP[c1 % 3]
    width = _CONTRACTION_WIDTH[c2 % 4]

    wave = amp * np.exp(-((t - center) ** 2) / (2.0 * width ** 2))
    if (c1 % 3) == 1:
        wave[:, _FRAGMENT_BAND[0]:_FRAGMENT_BAND[1]] = 0.0

    resting = 12.0 + 6.0 * np.sin(np.pi * s / (MAN_SENSORS - 1))
    offset = np.zeros((1, MAN_SENSORS))
    offset[:, 24:] = _PRESSURIZATION_OFFSET[c3 % 2]

    man = resting + offset + wave + noise * 10.0 * rng.standard_normal(
        (WINDOW_SAMPLES, MAN_SENSORS))

    # impedance: bolus-transit drop, only weakly class-dependent by design so
    # the manometry modality dominates
    j = np.arange(IMP_CHANNELS)[None, :]
    mid_sensor = 2.0 * j + 2.0  # 0-indexed midpoint of the sensor pair
    imp_center = t_onset + lag * mid_sensor
    drop = 900.0 * (1.0 - 0.1 * (c1 % 3))
    imp = 1800.0 - drop * np.exp(-((t - imp_center) ** 2) / (2.0 * 90.0 ** 2))
    imp = imp + noise * 400.0 * rng.standard_normal((WINDOW_SAMPLES, IMP_CHANNELS))
    return man, imp


def _patient_labels(spec, rng):
    """Per-patient label tuples with exact global class counts per category.

    Labels are allocated deterministically to match priors*N within 1, then
    dealt to patients in runs so each patient has a dominant class per
    category (mirrors clinical data and makes patient-level stratification
    meaningful).
    """
    n = spec.patients * spec.swallows_per_patient
    per_category = []
    for c, k in enumerate(spec.class_counts):
        counts = _exact_allocation(spec.resolved_priors()[c], n)
        pool = np.repeat(np.arange(k), counts)
        # deal in contiguous runs to a shuffled patient order
        order = rng.permutation(spec.patients)
        labels = np.empty(n, dtype=int)
        for slot, pat in enumerate(order):
            run = pool[slot * spec.swallows_per_patient:(slot + 1) * spec.swallows_per_patient]
            labels[pat * spec.swallows_per_patient:(pat + 1) * spec.swallows_per_patient] = \
                rng.permutation(run)
        per_category.append(labels)
    return np.stack(per_category, axis=1)  # [n, 3]


def _questionnaire_for(patient_id, modal_labels, rng):
    """Questionnaire whose fields correlate with the patient's modal labels."""
    c1, c2, c3 = modal_labels
    fields = {
        "age": round(float(np.clip(46.0 + 9.0 * c1 + rng.normal(0, 5), 18, 95)), 1),
        "bmi": round(float(np.clip(24.0 + 2.5 * c3 + rng.normal(0, 1.5), 15, 45)), 1),
        "symptom_duration_months": round(float(np.clip(
            10.0 + 6.0 * c2 + rng.normal(0, 4), 0, 240)), 1),
        "weight_loss_kg": round(float(np.clip(
            2.0 + 1.5 * c1 + rng.normal(0, 1), 0, 40)), 1),
    }
    for name, coding in DEFAULT_FIELD_SPEC.categorical.items():
        k = len(coding)
        if name == "dysphagia_severity":
            val = min(c2, k - 1)
        elif name == "heartburn_frequency":
            val = min(c3 + (1 if rng.uniform() < 0.5 else 0), k - 1)
        else:
            val = int(rng.integers(0, k))
        inv = {v: key for key, v in coding.items()}
        fields[name] = inv[val]

    notes = []
    for i, attr in enumerate(DEFAULT_NOTE_VOCABULARY):
        tied = (i % 3 == c1 % 3)
        p_mention = 0.85 if tied else 0.15
        if rng.uniform() < p_mention:
            word = attr.replace("_", " ")
            if rng.uniform() < 0.15:
                notes.append(f"no {word}")
            else:
                notes.append(word)
    free_text = "; ".join(notes)
    return {"patient_id": patient_id, "fields": fields, "free_text": free_text}


def generate_synthetic_dataset(spec, out_dir):
    """Write a labeled synthetic dataset to `out_dir`; returns the manifest.

    Deterministic given spec.seed: the same spec produces byte-identical
    files. Class signal lives primarily in manometry (propagating Gaussian
    pressure ridge with class-specific lag/amplitude/break pattern), weakly
    in impedance, and patient questionnaires correlate with modal labels.
    """
    if spec.patients < 1 or spec.swallows_per_patient < 1:
        raise DataFormatError("generator needs at least one patient and one swallow")
    if any(k < 2 for k in spec.class_counts):
        raise DataFormatError("every category needs at least 2 classes")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    schema = _default_schema_for(spec.class_counts)

    seeds = np.random.SeedSequence(spec.seed).spawn(2 + spec.patients)
    label_rng = np.random.default_rng(seeds[0])
    labels = _patient_labels(spec, label_rng)  # [n, 3]

    entries = []
    for p in range(spec.patients):
        pid = f"p{p:03d}"
        prng = np.random.default_rng(seeds[2 + p])
        rows = slice(p * spec.swallows_per_patient, (p + 1) * spec.swallows_per_patient)
        plabels = labels[rows]

        mans, imps, swallows = [], [], []
        for i, lab in enumerate(plabels):
            man, imp = _swallow_signal(tuple(lab), spec.class_counts, spec.noise, prng)
            mans.append(man)
            imps.append(imp)
            swallows.append(SwallowAnnotation(onset=i * WINDOW_SAMPLES, labels=tuple(int(x) for x in lab)))
        recording = Recording(patient_id=pid,
                              manometry=np.vstack(mans), impedance=np.vstack(imps))
        save_recording(recording, out_dir / f"{pid}.hrim")

        modal = tuple(int(np.bincount(plabels[:, c]).argmax()) for c in range(3))
        q = _questionnaire_for(pid, modal, prng)
        (out_dir / f"{pid}_questionnaire.json").write_text(
            json.dumps(q, indent=2, sort_keys=True) + "\n")

        entries.append(PatientEntry(
            patient_id=pid,
            questionnaire=f"{pid}_questionnaire.json",
            recording=f"{pid}.hrim",
            swallows=swallows,
        ))

    manifest = DatasetManifest(schema=schema, patients=entries, root=out_dir)
    save_manifest(manifest, out_dir / "manifest.json")
    return manifest
