"""HRIM data model, binary format, windowing, and synthetic generator."""
import json
from pathlib import Path

import numpy as np
import pytest
from scipy import stats as sps

from swallowgraph import hrim
from swallowgraph.hrim import (
    DataFormatError, Recording, SwallowEvent, SyntheticSpec,
    MAN_SENSORS, IMP_CHANNELS, WINDOW_SAMPLES,
)


def _recording(t=900, seed=0, pid="p0"):
    rng = np.random.default_rng(seed)
    return Recording(patient_id=pid,
                     manometry=rng.standard_normal((t, MAN_SENSORS)) * 40 + 20,
                     impedance=rng.standard_normal((t, IMP_CHANNELS)) * 300 + 1500)


def test_recording_roundtrip_bit_exact(tmp_path):
    rec = _recording()
    p = tmp_path / "rec.hrim"
    hrim.save_recording(rec, p)
    back = hrim.load_recording(p, patient_id="p0")
    np.testing.assert_array_equal(back.manometry, rec.manometry)
    np.testing.assert_array_equal(back.impedance, rec.impedance)
    assert back.patient_id == "p0"


def test_load_rejects_bad_magic(tmp_path):
    p = tmp_path / "bad.hrim"
    p.write_bytes(b"NOPE" + bytes(32))
    with pytest.raises(DataFormatError):
        hrim.load_recording(p)


def test_load_rejects_truncation(tmp_path):
    rec = _recording(t=100)
    p = tmp_path / "trunc.hrim"
    hrim.save_recording(rec, p)
    raw = p.read_bytes()
    p.write_bytes(raw[:-8])
    with pytest.raises(DataFormatError):
        hrim.load_recording(p)


def test_window_full_and_padded():
    rec = _recording(t=1000)
    ev = hrim.window_swallow(rec, 100)
    np.testing.assert_array_equal(ev.manometry, rec.manometry[100:850])

    # onset too close to the end: repeat the last sample
    ev2 = hrim.window_swallow(rec, 900)
    assert ev2.manometry.shape == (WINDOW_SAMPLES, MAN_SENSORS)
    np.testing.assert_array_equal(ev2.manometry[:100], rec.manometry[900:])
    for row in ev2.manometry[100:]:
        np.testing.assert_array_equal(row, rec.manometry[-1])

    with pytest.raises(DataFormatError):
        hrim.window_swallow(rec, 1000)
    with pytest.raises(DataFormatError):
        hrim.window_swallow(rec, -1)


def test_event_shape_validation():
    with pytest.raises(DataFormatError):
        SwallowEvent(manometry=np.zeros((10, MAN_SENSORS)),
                     impedance=np.zeros((WINDOW_SAMPLES, IMP_CHANNELS)),
                     labels=None, patient_id="x")


def test_normalize_signals_hand_value():
    # a sensor with values [1,2,3] maps to [-1.2247, 0, 1.2247] (population std)
    man = np.zeros((3, WINDOW_SAMPLES, MAN_SENSORS))
    man[:, :, 0] = np.array([1.0, 2.0, 3.0])[:, None]
    events = [SwallowEvent(manometry=man[i],
                           impedance=np.ones((WINDOW_SAMPLES, IMP_CHANNELS)),
                           labels=None, patient_id=f"p{i}") for i in range(3)]
    with pytest.warns(UserWarning):   # constant sensors elsewhere
        stats = hrim.compute_signal_stats(events)
    out = hrim.normalize_signals(events, stats)
    got = np.array([e.manometry[0, 0] for e in out])
    np.testing.assert_allclose(got, [-1.224744871391589, 0.0, 1.224744871391589],
                               atol=1e-9)


def test_normalize_refuses_non_train_stats():
    events = [_event_from(_recording(t=WINDOW_SAMPLES, seed=i)) for i in range(2)]
    stats = hrim.compute_signal_stats(events, source="validation")
    with pytest.raises(DataFormatError):
        hrim.normalize_signals(events, stats)


def _event_from(rec):
    return hrim.window_swallow(rec, 0)


# ---------------------------------------------------------------------------
# synthetic generator


def test_synthetic_dataset_structure(tmp_path):
    spec = SyntheticSpec(patients=8, swallows_per_patient=5, seed=3)
    manifest = hrim.generate_synthetic_dataset(spec, tmp_path / "ds")
    m2, events, qs = hrim.load_dataset(tmp_path / "ds" / "manifest.json")
    assert len(m2.patients) == 8
    assert len(events) == 40
    assert len(qs) == 8
    for e in events:
        assert e.manometry.shape == (WINDOW_SAMPLES, MAN_SENSORS)
        assert len(e.labels) == 3


def test_synthetic_determinism_byte_identical(tmp_path):
    spec = SyntheticSpec(patients=5, swallows_per_patient=3, seed=11)
    hrim.generate_synthetic_dataset(spec, tmp_path / "a")
    hrim.generate_synthetic_dataset(spec, tmp_path / "b")
    fa = sorted((tmp_path / "a").rglob("*"))
    fb = sorted((tmp_path / "b").rglob("*"))
    assert [f.name for f in fa if f.is_file()] == [f.name for f in fb if f.is_file()]
    for a, b in zip(fa, fb):
        if a.is_file():
            assert a.read_bytes() == (tmp_path / "b" / a.relative_to(tmp_path / "a")).read_bytes(), a.name


def test_synthetic_label_histogram_within_one_of_priors(tmp_path):
    spec = SyntheticSpec(patients=20, swallows_per_patient=10, seed=5)
    hrim.generate_synthetic_dataset(spec, tmp_path / "ds")
    _, events, _ = hrim.load_dataset(tmp_path / "ds" / "manifest.json")
    labels = np.array([e.labels for e in events])
    n = len(labels)
    for c, (k, priors) in enumerate(zip(spec.class_counts, spec.resolved_priors())):
        hist = np.bincount(labels[:, c], minlength=k)
        for cls in range(k):
            assert abs(hist[cls] - priors[cls] * n) <= 1.0 + 1e-9


def test_synthetic_signal_is_class_separable(tmp_path):
    # mean within-class template distance must beat across-class distance
    spec = SyntheticSpec(patients=16, swallows_per_patient=5, seed=8)
    hrim.generate_synthetic_dataset(spec, tmp_path / "ds")
    _, events, _ = hrim.load_dataset(tmp_path / "ds" / "manifest.json")
    by_class = {}
    for e in events:
        by_class.setdefault(e.labels[1], []).append(e.manometry.mean(axis=0))
    means = {k: np.mean(v, axis=0) for k, v in by_class.items() if len(v) >= 3}
    keys = sorted(means)
    assert len(keys) >= 2
    gaps = [np.linalg.norm(means[a] - means[b]) for a in keys for b in keys if a < b]
    within = [np.mean([np.linalg.norm(x - means[k]) for x in by_class[k]])
              for k in keys]
    # time-mean collapses timing/width differences, so the margin is loose
    assert min(gaps) > 0.25 * np.mean(within)


def test_synthetic_chi_square_goodness_of_fit(tmp_path):
    # allocation is exact by construction; chi-square GoF cannot reject
    spec = SyntheticSpec(patients=30, swallows_per_patient=10, seed=13)
    hrim.generate_synthetic_dataset(spec, tmp_path / "ds")
    _, events, _ = hrim.load_dataset(tmp_path / "ds" / "manifest.json")
    labels = np.array([e.labels for e in events])
    for c, (k, priors) in enumerate(zip(spec.class_counts, spec.resolved_priors())):
        obs = np.bincount(labels[:, c], minlength=k)
        exp = np.asarray(priors) * len(labels)
        _, p = sps.chisquare(obs, exp)
        assert p > 0.01


def test_manifest_roundtrip(tmp_path):
    spec = SyntheticSpec(patients=4, swallows_per_patient=2, seed=2)
    hrim.generate_synthetic_dataset(spec, tmp_path / "ds")
    manifest = hrim.load_manifest(tmp_path / "ds" / "manifest.json")
    assert len(manifest.patients) == 4
    assert manifest.schema.categories == ("peristaltic_pattern",
                                          "contraction_type",
                                          "pressure_characteristics")
    # JSON is stable under reload+rewrite
    out = tmp_path / "again.json"
    hrim.save_manifest(manifest, out)
    assert json.loads(out.read_text()) == json.loads(
        (tmp_path / "ds" / "manifest.json").read_text())


def test_export_recording_csv(tmp_path):
    rec = _recording(t=20)
    p = tmp_path / "rec.csv"
    hrim.export_recording_csv(rec, p)
    lines = p.read_text().strip().split("\n")
    assert len(lines) == 21
    assert lines[0].startswith("sample,man_0")
    assert len(lines[1].split(",")) == 1 + MAN_SENSORS + IMP_CHANNELS
