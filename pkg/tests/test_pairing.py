import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mixsep import dsp
from mixsep.audio_io import Instrument, StemChunk, Waveform, chunk_id
from mixsep.pairing import (
    CORR_SCALE,
    EmptyIndexError,
    EmptyPoolError,
    PairMode,
    PairingThresholds,
    build_pair_index,
    chroma_distance,
    corr_score,
    load_pair_index,
    magnitude_envelope,
    sample_pairs,
    save_pair_index,
)

from conftest import sine

SR = 44100


def make_chunk(samples, instrument="violin", source="s", offset=0):
    return StemChunk(
        audio=Waveform(np.asarray(samples, dtype=float), SR),
        instrument=instrument,
        source_id=source,
        offset=offset,
    )


def tone_chunk(freq, instrument, source, offset=0, seconds=0.5, amp=0.5):
    c = make_chunk(sine(freq, seconds, amp=amp).samples, instrument, source, offset)
    return c


class TestChromaDistance:
    def test_self_distance_zero(self, rng):
        v = rng.random(12)
        assert chroma_distance(v, v) == 0.0

    def test_one_hot_orthogonal(self):
        c = np.zeros(12)
        g = np.zeros(12)
        c[0] = 1.0
        g[7] = 1.0
        assert chroma_distance(c, g) == pytest.approx(np.sqrt(2))

    def test_threshold_accepts_045_rejects_051(self):
        thr = PairingThresholds()
        base = np.zeros(12)
        base[0] = 1.0

        def at_distance(d):
            cos_t = 1.0 - d**2 / 2.0
            v = np.zeros(12)
            v[0] = cos_t
            v[1] = np.sqrt(1.0 - cos_t**2)
            return v

        assert chroma_distance(base, at_distance(0.45)) == pytest.approx(0.45)
        assert chroma_distance(base, at_distance(0.45)) < thr.chroma_max
        assert chroma_distance(base, at_distance(0.51)) >= thr.chroma_max

    def test_shape_errors(self):
        with pytest.raises(ValueError):
            chroma_distance(np.zeros(11), np.zeros(12))

    @settings(max_examples=200, deadline=None)
    @given(st.integers(0, 2**32 - 1))
    def test_metric_axioms(self, seed):
        r = np.random.default_rng(seed)
        a, b, c = r.random((3, 12))
        dab = chroma_distance(a, b)
        assert dab == pytest.approx(chroma_distance(b, a))
        assert dab >= 0
        assert chroma_distance(a, c) <= dab + chroma_distance(b, c) + 1e-12


class TestEnvelope:
    def test_silent_chunk_zero(self):
        env = magnitude_envelope(make_chunk(np.zeros(441000)))
        assert env.shape == (431,)
        assert np.all(env == 0)

    def test_constant_chunk_unit_norm(self):
        env = magnitude_envelope(make_chunk(np.full(441000, 0.25)))
        assert np.linalg.norm(env) == pytest.approx(1.0)
        # last block is partial but averages the same constant
        assert np.allclose(env, env[0])

    def test_scale_invariance(self, rng):
        x = rng.standard_normal(44100)
        e1 = magnitude_envelope(make_chunk(x))
        e2 = magnitude_envelope(make_chunk(0.5 * x))
        assert np.allclose(e1, e2, atol=1e-12)


class TestCorrScore:
    def test_zero_envelope(self):
        assert corr_score(np.zeros(16), np.ones(16)) == 0.0

    def test_identical_unit_norm_is_scale(self, rng):
        a = np.abs(rng.random(64)) + 0.1
        a /= np.linalg.norm(a)
        assert corr_score(a, a) == pytest.approx(CORR_SCALE, rel=1e-9)

    def test_brute_force_over_lags(self, rng):
        a = rng.random(40)
        b = rng.random(40)
        best = 0.0
        for lag in range(-39, 40):
            total = 0.0
            for t in range(40):
                if 0 <= t + lag < 40:
                    total += a[t] * b[t + lag]
            best = max(best, abs(total))
        assert corr_score(a, b) == pytest.approx(best * CORR_SCALE, rel=1e-12)

    def test_disjoint_support_scores_below_coactive(self):
        n = 64
        a = np.zeros(n)
        b = np.zeros(n)
        a[: n // 2] = np.hanning(n // 2)
        b[n // 2 :] = np.bartlett(n // 2)  # different shape
        a /= np.linalg.norm(a)
        b /= np.linalg.norm(b)
        coactive = corr_score(a, a)
        assert corr_score(a, b) < coactive

    def test_symmetry(self, rng):
        a, b = rng.random((2, 50))
        assert corr_score(a, b) == pytest.approx(corr_score(b, a), rel=1e-12)

    def test_zero_lag_statistic(self, rng):
        a, b = rng.random((2, 30))
        assert corr_score(a, b, "zero_lag") == pytest.approx(abs(a @ b) * CORR_SCALE)

    def test_length_mismatch(self):
        with pytest.raises(ValueError):
            corr_score(np.zeros(5), np.zeros(6))

    def test_unknown_statistic(self):
        with pytest.raises(ValueError):
            corr_score(np.zeros(5), np.zeros(5), "sum")


class TestBuildIndex:
    def test_random_mode_implicit_cross_product(self):
        violins = [tone_chunk(300 + 10 * i, "violin", "v", i) for i in range(3)]
        pianos = [tone_chunk(200 + 10 * i, "piano", "p", i) for i in range(4)]
        index = build_pair_index(violins, pianos, PairMode.RANDOM)
        assert index.n_candidates == 12
        assert index.pairs == []

    def test_empty_pool_error(self):
        violins = [tone_chunk(300, "violin", "v")]
        with pytest.raises(EmptyPoolError):
            build_pair_index(violins, [], PairMode.RANDOM)

    def test_chroma_all_rejected(self):
        # distant keys and a tiny threshold leave nothing
        violins = [tone_chunk(440, "violin", "v")]
        pianos = [tone_chunk(311.13, "piano", "p")]  # D#4, far pitch class
        with pytest.raises(EmptyIndexError):
            build_pair_index(
                violins, pianos, PairMode.CHROMA, PairingThresholds(chroma_max=1e-6)
            )

    def test_chroma_matches_brute_force(self, rng):
        violins = [tone_chunk(float(f), "violin", "v", i)
                   for i, f in enumerate(rng.uniform(200, 880, 8))]
        pianos = [tone_chunk(float(f), "piano", "p", i)
                  for i, f in enumerate(rng.uniform(100, 520, 8))]
        thr = PairingThresholds(chroma_max=0.9)
        index = build_pair_index(violins, pianos, PairMode.CHROMA, thr)
        expected = set()
        for v in violins:
            for p in pianos:
                d = float(np.linalg.norm(dsp.chroma_mean(v.audio) - dsp.chroma_mean(p.audio)))
                if d < thr.chroma_max:
                    expected.add((chunk_id(v), chunk_id(p)))
        assert {(v, p) for v, p, _ in index.pairs} == expected
        for vid, pid, score in index.pairs:
            assert score < thr.chroma_max

    def test_correlation_matches_brute_force(self, rng):
        def burst_chunk(start, width, i, instrument, source):
            x = np.zeros(22050)
            x[start : start + width] = rng.random(width) + 0.2
            return make_chunk(x, instrument, source, i * 22050)

        violins = [burst_chunk(int(rng.integers(0, 15000)), 4000, i, "violin", "v")
                   for i in range(7)]
        pianos = [burst_chunk(int(rng.integers(0, 15000)), 6000, i, "piano", "p")
                  for i in range(7)]
        thr = PairingThresholds(corr_min=60.0)
        index = build_pair_index(violins, pianos, PairMode.CORRELATION, thr)
        expected = set()
        for v in violins:
            for p in pianos:
                s = corr_score(magnitude_envelope(v), magnitude_envelope(p))
                if s >= thr.corr_min:
                    expected.add((chunk_id(v), chunk_id(p)))
        assert {(v, p) for v, p, _ in index.pairs} == expected

    def test_pool_order_invariance(self, rng):
        violins = [tone_chunk(float(f), "violin", "v", i)
                   for i, f in enumerate(rng.uniform(200, 880, 5))]
        pianos = [tone_chunk(float(f), "piano", "p", i)
                  for i, f in enumerate(rng.uniform(100, 520, 5))]
        thr = PairingThresholds(chroma_max=1.2)
        a = build_pair_index(violins, pianos, PairMode.CHROMA, thr)
        b = build_pair_index(violins[::-1], pianos[::-1], PairMode.CHROMA, thr)
        assert set(map(tuple, a.pairs)) == set(map(tuple, b.pairs))


class TestSamplePairs:
    def _index(self):
        violins = [tone_chunk(300 + 5 * i, "violin", "v", i) for i in range(3)]
        pianos = [tone_chunk(200 + 5 * i, "piano", "p", i) for i in range(3)]
        return build_pair_index(violins, pianos, PairMode.RANDOM)

    def test_single_pair_index(self):
        violins = [tone_chunk(300, "violin", "v")]
        pianos = [tone_chunk(200, "piano", "p")]
        index = build_pair_index(violins, pianos, PairMode.RANDOM)
        draws = sample_pairs(index, 20, np.random.default_rng(0))
        assert len(set(draws)) == 1

    def test_n_validation(self):
        with pytest.raises(ValueError):
            sample_pairs(self._index(), 0, np.random.default_rng(0))

    def test_deterministic(self):
        idx = self._index()
        a = sample_pairs(idx, 50, np.random.default_rng(3))
        b = sample_pairs(idx, 50, np.random.default_rng(3))
        assert a == b

    def test_draw_counts(self):
        draws = sample_pairs(self._index(), 250, np.random.default_rng(1))
        assert len(draws) == 250


class TestPersistence:
    def test_round_trip_filtered(self, tmp_path, rng):
        violins = [tone_chunk(float(f), "violin", "v", i)
                   for i, f in enumerate(rng.uniform(200, 880, 4))]
        pianos = [tone_chunk(float(f), "piano", "p", i)
                  for i, f in enumerate(rng.uniform(100, 520, 4))]
        index = build_pair_index(violins, pianos, PairMode.CHROMA,
                                 PairingThresholds(chroma_max=1.5))
        path = tmp_path / "pairs.csv"
        save_pair_index(index, path)
        loaded = load_pair_index(path, index.thresholds)
        assert loaded.mode is PairMode.CHROMA
        assert [(v, p) for v, p, _ in loaded.pairs] == [(v, p) for v, p, _ in index.pairs]
        assert np.allclose([s for _, _, s in loaded.pairs], [s for _, _, s in index.pairs])

    def test_round_trip_random(self, tmp_path):
        violins = [tone_chunk(300 + i, "violin", "v", i) for i in range(3)]
        pianos = [tone_chunk(200 + i, "piano", "p", i) for i in range(2)]
        index = build_pair_index(violins, pianos, PairMode.RANDOM)
        path = tmp_path / "pairs.csv"
        save_pair_index(index, path)
        loaded = load_pair_index(path)
        assert loaded.mode is PairMode.RANDOM
        assert loaded.violin_ids == index.violin_ids
        assert loaded.piano_ids == index.piano_ids
        assert loaded.n_candidates == 6

    def test_reject_non_index_file(self, tmp_path):
        p = tmp_path / "x.csv"
        p.write_text("a,b,c\n")
        with pytest.raises(ValueError):
            load_pair_index(p)
