import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import signal as sps
from scipy import stats

from liteheart.signal_core import (
    ClassPattern,
    SignalRecord,
    SplitSpec,
    SynthConfig,
    bandpass_filter,
    bandpass_sos,
    load_dataset,
    mask_to_lead,
    resample,
    save_dataset,
    split_dataset,
    stack_labels,
    stack_signals,
    synth_generate,
    zscore_normalize,
)


def _record(sig, fs=500.0, labels=None, rid="r"):
    sig = np.asarray(sig, dtype=np.float64)
    if sig.ndim == 1:
        sig = np.tile(sig, (12, 1))
    return SignalRecord(rid, sig, fs, labels)


def _rms(x):
    return np.sqrt(np.mean(np.square(x)))


class TestRecord:
    def test_rejects_non_finite(self):
        sig = np.zeros((12, 100))
        sig[3, 5] = np.nan
        with pytest.raises(ValueError):
            SignalRecord("bad", sig, 500.0)

    def test_rejects_low_fs(self):
        with pytest.raises(ValueError):
            SignalRecord("slow", np.zeros((12, 100)), 90.0)

    def test_rejects_non_binary_labels(self):
        with pytest.raises(ValueError):
            SignalRecord("x", np.zeros((12, 10)), 500.0, np.array([0, 2]))

    def test_wrong_lead_count(self):
        with pytest.raises(ValueError):
            SignalRecord("x", np.zeros((3, 10)), 500.0)


class TestBandpass:
    fs = 500.0
    t = np.arange(5000) / 500.0

    def test_dc_removed(self):
        out = bandpass_filter(_record(np.full(5000, 5.0))).signal
        assert np.abs(out.mean(axis=1)).max() < 1e-3

    @staticmethod
    def _gain(freq, fs=500.0):
        # forward-backward application squares the magnitude response
        _, h = sps.sosfreqz(bandpass_sos(fs), worN=[freq], fs=fs)
        return np.abs(h[0]) ** 2

    def test_50hz_attenuated(self):
        x = np.sin(2 * np.pi * 50 * self.t)
        out = bandpass_filter(_record(x)).signal[0]
        core = slice(500, -500)
        ratio = _rms(out[core]) / _rms(x[core])
        assert self._gain(50.0) < 0.1
        assert ratio < 0.1
        assert ratio == pytest.approx(self._gain(50.0), abs=0.01)

    def test_10hz_passed(self):
        x = np.sin(2 * np.pi * 10 * self.t)
        out = bandpass_filter(_record(x)).signal[0]
        core = slice(500, -500)
        ratio = _rms(out[core]) / _rms(x[core])
        assert abs(self._gain(10.0) - 1) < 0.1
        assert abs(ratio - 1) < 0.1

    def test_length_preserved(self):
        rec = _record(np.random.default_rng(0).standard_normal((12, 777)))
        assert bandpass_filter(rec).signal.shape == (12, 777)

    def test_fs_too_low_for_band(self):
        rec = _record(np.zeros(1000), fs=100.0)
        with pytest.raises(ValueError):
            bandpass_filter(rec, high=60.0)

    def test_too_short(self):
        with pytest.raises(ValueError):
            bandpass_filter(_record(np.zeros(20)))


class TestZscore:
    def test_constant_lead_zero(self):
        out = zscore_normalize(_record([1.0, 1.0, 1.0, 1.0])).signal
        assert np.array_equal(out, np.zeros((12, 4)))

    def test_two_points(self):
        out = zscore_normalize(_record([0.0, 2.0])).signal
        np.testing.assert_allclose(out[0], [-1.0, 1.0], atol=1e-12)

    @settings(max_examples=50, deadline=None)
    @given(st.integers(0, 2**31 - 1), st.floats(0.01, 100), st.floats(-50, 50))
    def test_moments(self, seed, scale, offset):
        x = np.random.default_rng(seed).standard_normal((12, 64)) * scale + offset
        out = zscore_normalize(_record(x)).signal
        np.testing.assert_allclose(out.mean(axis=1), 0, atol=1e-6)
        np.testing.assert_allclose(out.std(axis=1), 1, atol=1e-6)

    def test_idempotent(self):
        x = np.random.default_rng(1).standard_normal((12, 1000))
        once = zscore_normalize(_record(x))
        twice = zscore_normalize(once)
        np.testing.assert_allclose(twice.signal, once.signal, atol=1e-6)


class TestMaskToLead:
    def test_selects_row(self):
        x = np.random.default_rng(0).standard_normal((12, 50))
        rec = _record(x)
        for lead in (0, 5, 11):
            view = mask_to_lead(rec, lead)
            assert view.signal.shape == (1, 50)
            assert np.array_equal(view.signal[0], rec.signal[lead])
            assert view.lead_index == lead and view.source_id == rec.id

    def test_out_of_range(self):
        with pytest.raises(ValueError):
            mask_to_lead(_record(np.zeros(10)), 12)
        with pytest.raises(ValueError):
            mask_to_lead(_record(np.zeros(10)), -1)

    def test_source_untouched(self):
        rec = _record(np.arange(10.0))
        before = rec.signal.copy()
        view = mask_to_lead(rec, 0)
        view.signal[:] = -1
        assert np.array_equal(rec.signal, before)


def _records(n, c=3, seed=0):
    rng = np.random.default_rng(seed)
    return [
        SignalRecord(f"r{i:04d}", rng.standard_normal((12, 8)), 500.0, rng.integers(0, 2, c))
        for i in range(n)
    ]


class TestSplit:
    def test_default_sizes(self):
        split = split_dataset(_records(1000), SplitSpec())
        assert (len(split.labeled), len(split.unlabeled), len(split.val), len(split.test)) == (80, 720, 100, 100)

    def test_fully_labeled(self):
        split = split_dataset(_records(50), SplitSpec(labeled_frac=1.0))
        assert split.unlabeled == []

    def test_deterministic(self):
        recs = _records(200)
        assert split_dataset(recs, SplitSpec(seed=3)).ids() == split_dataset(recs, SplitSpec(seed=3)).ids()
        assert split_dataset(recs, SplitSpec(seed=3)).ids() != split_dataset(recs, SplitSpec(seed=4)).ids()

    @settings(max_examples=30, deadline=None)
    @given(st.integers(10, 300), st.integers(0, 10_000), st.floats(0.05, 1.0))
    def test_partition(self, n, seed, lab):
        recs = _records(n)
        ids = split_dataset(recs, SplitSpec(labeled_frac=lab, seed=seed)).ids()
        parts = [set(v) for v in ids.values()]
        assert set().union(*parts) == {r.id for r in recs}
        assert sum(len(p) for p in parts) == n

    def test_unlabeled_stripped(self):
        split = split_dataset(_records(100), SplitSpec())
        assert all(r.labels is None and not r.is_labeled for r in split.unlabeled)
        assert all(r.labels is not None for r in split.labeled)

    def test_rejects_empty(self):
        with pytest.raises(ValueError):
            split_dataset([], SplitSpec())

    def test_bad_fractions(self):
        with pytest.raises(ValueError):
            SplitSpec(train_frac=0.8, val_frac=0.1, test_frac=0.2)
        with pytest.raises(ValueError):
            SplitSpec(labeled_frac=0.0)


class TestSynth:
    def test_shapes(self):
        recs = synth_generate(SynthConfig(n_records=100))
        assert len(recs) == 100
        assert stack_labels(recs).shape == (100, 6)
        assert stack_signals(recs).shape == (100, 12, 512)

    def test_deterministic(self):
        a = stack_signals(synth_generate(SynthConfig(n_records=20, seed=5)), np.float64)
        b = stack_signals(synth_generate(SynthConfig(n_records=20, seed=5)), np.float64)
        assert a.tobytes() == b.tobytes()

    def test_record_depends_only_on_index(self):
        full = synth_generate(SynthConfig(n_records=10, seed=2))
        head = synth_generate(SynthConfig(n_records=3, seed=2))
        assert np.array_equal(full[2].signal, head[2].signal)

    @pytest.mark.parametrize("seed", [11, 12, 13])
    def test_energy_concentrated_in_listed_leads(self, seed):
        table = [
            ClassPattern("A", [0, 1], (0.1, 0.2)),
            ClassPattern("B", [7, 8], (0.3, 0.5), "bump", 1.0),
        ]
        cfg = SynthConfig(n_records=500, n_classes=2, class_prevalence=[0.5, 0.5], pattern_table=table, seed=seed)
        recs = synth_generate(cfg)
        x = stack_signals(recs, np.float64)
        y = stack_labels(recs)
        energy = (x**2).sum(axis=2)
        delta = np.abs(energy[y[:, 1] == 1].mean(0) - energy[y[:, 1] == 0].mean(0))
        assert delta[[7, 8]].sum() / delta.sum() > 0.9

    def test_lead0_invisible_class(self):
        cfg = SynthConfig(n_records=500, seed=3)
        recs = synth_generate(cfg)
        lead0 = np.stack([mask_to_lead(r, 0).signal[0] for r in recs])
        energy = (lead0**2).sum(axis=1)
        y = stack_labels(recs)
        for k in cfg.lead0_invisible():
            res = stats.ttest_ind(energy[y[:, k] == 1], energy[y[:, k] == 0])
            assert res.pvalue > 0.01

    def test_prevalence(self):
        prev = [0.1, 0.2, 0.3, 0.4, 0.5, 0.6]
        y = stack_labels(synth_generate(SynthConfig(n_records=10_000, class_prevalence=prev, length=128, seed=9)))
        np.testing.assert_allclose(y.mean(0), prev, atol=0.03)

    def test_invalid_configs(self):
        with pytest.raises(ValueError):
            SynthConfig(class_prevalence=[0.3] * 5)
        with pytest.raises(ValueError):
            SynthConfig(pattern_table=[ClassPattern(str(k), [0, 1], (0.1, 0.2)) for k in range(6)])
        with pytest.raises(ValueError):
            ClassPattern("x", [], (0.1, 0.2))
        with pytest.raises(ValueError):
            SynthConfig(fs=80.0)

    def test_from_file(self, tmp_path):
        cfg = SynthConfig(n_records=7, seed=4)
        p = tmp_path / "synth.json"
        p.write_text(json.dumps(cfg.to_dict()))
        assert SynthConfig.from_file(p) == cfg
        t = tmp_path / "synth.toml"
        t.write_text("[synth]\nn_records = 3\nseed = 2\n")
        assert SynthConfig.from_file(t).n_records == 3


class TestResample:
    def test_length_scales(self):
        rec = _record(np.random.default_rng(0).standard_normal((12, 1000)), fs=500.0)
        out = resample(rec, 250.0)
        assert out.signal.shape == (12, 500) and out.fs == 250.0


class TestIO:
    def test_round_trip(self, tmp_path):
        recs = synth_generate(SynthConfig(n_records=5))
        recs[2].labels = None
        recs[2].is_labeled = False
        save_dataset(recs, tmp_path / "ds")
        back = load_dataset(tmp_path / "ds")
        assert [r.id for r in back] == [r.id for r in recs]
        for a, b in zip(recs, back):
            assert np.array_equal(a.signal.astype(np.float32), b.signal)
            assert a.fs == b.fs
            if a.labels is None:
                assert b.labels is None
            else:
                assert np.array_equal(a.labels, b.labels)

    def test_truncated(self, tmp_path):
        recs = synth_generate(SynthConfig(n_records=3))
        save_dataset(recs, tmp_path / "ds")
        victim = tmp_path / "ds" / "signals" / f"{recs[1].id}.f32"
        victim.write_bytes(victim.read_bytes()[:-10])
        with pytest.raises(ValueError, match=recs[1].id):
            load_dataset(tmp_path / "ds")

    def test_empty(self, tmp_path):
        save_dataset([], tmp_path / "ds")
        assert (tmp_path / "ds" / "manifest.jsonl").read_text() == ""
        assert load_dataset(tmp_path / "ds") == []

    def test_malformed_manifest(self, tmp_path):
        (tmp_path / "ds").mkdir()
        (tmp_path / "ds" / "manifest.jsonl").write_text("{not json\n")
        with pytest.raises(ValueError):
            load_dataset(tmp_path / "ds")

    def test_header_layout(self, tmp_path):
        rec = synth_generate(SynthConfig(n_records=1, length=256))[0]
        save_dataset([rec], tmp_path / "ds")
        raw = (tmp_path / "ds" / "signals" / f"{rec.id}.f32").read_bytes()
        assert np.frombuffer(raw[:8], "<u4").tolist() == [12, 256]
        assert len(raw) == 8 + 4 * 12 * 256
