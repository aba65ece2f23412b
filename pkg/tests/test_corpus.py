import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from cldino.corpus import (AugmentPool, Manifest, SpeakerProfile, TrialList, augment,
                           generate_corpus, generate_rir, load_waveform, make_trials, reverberate)
from cldino.errors import ConfigError, ZeroPowerError
from cldino.frontend import FrontendConfig, Waveform
from cldino.selection import mfcc_mean_embeddings

from oracles import direct_convolution


class TestGenerateCorpus:
    def test_counts(self, desk_corpus):
        assert len(desk_corpus) == 800
        assert len(desk_corpus.speakers) == 20
        assert all(2.0 <= u.duration <= 4.0 for u in desk_corpus)

    def test_same_seed_identical_audio(self, tmp_path):
        a = generate_corpus(2, 3, (2.0, 2.2), seed=11, out_dir=tmp_path / "a")
        b = generate_corpus(2, 3, (2.0, 2.2), seed=11, out_dir=tmp_path / "b")
        for u in a:
            assert (a.resolve(u).read_bytes() == b.resolve(b[u.utt_id]).read_bytes())
        assert (tmp_path / "a/manifest.jsonl").read_text() == (tmp_path / "b/manifest.jsonl").read_text()

    def test_manifest_round_trip(self, tiny_corpus):
        back = Manifest.read(tiny_corpus.root / "manifest.jsonl")
        assert back.ids == tiny_corpus.ids
        assert [back.speaker_of(u) for u in back.ids] == [tiny_corpus.speaker_of(u) for u in back.ids]
        np.testing.assert_array_equal(back.load(back.ids[0]), tiny_corpus.load(back.ids[0]))

    def test_rejects_single_speaker(self, tmp_path):
        with pytest.raises(ConfigError):
            generate_corpus(1, 5, seed=0, out_dir=tmp_path)

    def test_same_speaker_more_similar(self, desk_corpus):
        """Mean within-speaker cosine of MFCC statistics beats the cross-speaker mean."""
        emb = mfcc_mean_embeddings(desk_corpus, FrontendConfig(cms=False))
        emb = emb - emb.mean(0)
        emb /= np.linalg.norm(emb, axis=1, keepdims=True)
        sims = emb @ emb.T
        spk = np.array([desk_corpus.speaker_of(u) for u in desk_corpus.ids])
        same = spk[:, None] == spk[None, :]
        off = ~np.eye(len(spk), dtype=bool)
        assert sims[same & off].mean() > sims[~same].mean() + 0.1

    def test_wav_reader_rejects_rate_mismatch(self, tiny_corpus):
        path = tiny_corpus.resolve(tiny_corpus.utterances[0])
        assert load_waveform(path).sample_rate == 16000
        with pytest.raises(ValueError, match="8000 Hz"):
            load_waveform(path, 8000)

    def test_profile_invariants(self):
        with pytest.raises(ConfigError):
            SpeakerProfile("x", 50.0, np.ones(8))
        with pytest.raises(ConfigError):
            SpeakerProfile("x", 120.0, np.zeros(8))


class TestRIR:
    def test_length(self):
        assert len(generate_rir(0.5, 16000, seed=0)) == 8000

    def test_peak_at_zero(self):
        rir = generate_rir(0.4, 16000, seed=1)
        assert np.argmax(np.abs(rir)) == 0

    def test_sixty_db_decay(self):
        rt60 = 0.6
        rir = generate_rir(rt60, 16000, seed=2)[1:]
        t = np.arange(1, len(rir) + 1) / 16000
        # fit log-energy against time over 10 ms windows
        win = 160
        n = len(rir) // win
        energy = (rir[: n * win] ** 2).reshape(n, win).mean(1)
        tc = t[: n * win].reshape(n, win).mean(1)
        slope, _ = np.polyfit(tc, 10 * np.log10(energy), 1)
        assert abs(-slope * rt60 - 60.0) < 1.0

    @pytest.mark.parametrize("rt60", [0.0, -0.1, 2.5])
    def test_bad_rt60(self, rt60):
        with pytest.raises(ConfigError):
            generate_rir(rt60)

    def test_reverb_of_impulse_is_rir(self):
        rir = generate_rir(0.3, 16000, seed=3)
        x = np.zeros(len(rir))
        x[0] = 1.0
        np.testing.assert_allclose(reverberate(x, rir), rir, atol=1e-12)

    def test_matches_direct_convolution(self):
        rng = np.random.default_rng(4)
        x, h = rng.standard_normal(300), generate_rir(0.01, 16000, seed=5)
        full = direct_convolution(x, h)[: len(x)]
        ref = full * (np.abs(x).max() / np.abs(full).max())
        got = reverberate(x, h)
        assert np.max(np.abs(got - ref)) / np.abs(ref).max() < 1e-9


class TestAugment:
    def test_infinite_snr_is_identity(self):
        x = np.random.default_rng(0).standard_normal(1000)
        y = augment(Waveform(x), "noise", np.ones(10), math.inf)
        np.testing.assert_array_equal(y.samples, x)

    def test_zero_db(self):
        rng = np.random.default_rng(1)
        x = rng.standard_normal(4000)
        y = augment(x, "noise", rng.standard_normal(1500), 0.0, rng)
        added = y - x
        assert abs(np.mean(added ** 2) / np.mean(x ** 2) - 1.0) < 1e-6

    @given(snr=st.floats(-10, 40), n=st.integers(10, 3000), m=st.integers(1, 500),
           seed=st.integers(0, 2 ** 31))
    @settings(max_examples=150, deadline=None)
    def test_snr_property(self, snr, n, m, seed):
        rng = np.random.default_rng(seed)
        x, noise = rng.standard_normal(n), rng.standard_normal(m)
        if np.mean(noise ** 2) < 1e-12:
            return
        y = augment(x, "noise", noise, snr, rng)
        got = 10 * np.log10(np.mean(x ** 2) / np.mean((y - x) ** 2))
        assert abs(10 ** (got / 10) / 10 ** (snr / 10) - 1.0) < 1e-6

    def test_identity_rir(self):
        x = np.random.default_rng(2).standard_normal(500)
        np.testing.assert_allclose(augment(x, "reverb", np.array([1.0])), x, atol=1e-15)

    def test_silent_input(self):
        with pytest.raises(ZeroPowerError, match="zero-power"):
            augment(np.zeros(100), "noise", np.ones(50), 5.0)

    def test_unknown_kind(self):
        with pytest.raises(ConfigError):
            augment(np.ones(10), "codec", np.ones(10))

    def test_pool_is_deterministic(self):
        pool = AugmentPool.synthetic(seed=0)
        x = np.random.default_rng(3).standard_normal(16000)
        a = pool.apply(x, np.random.default_rng(9))
        b = pool.apply(x, np.random.default_rng(9))
        np.testing.assert_array_equal(a, b)


class TestTrials:
    def test_counts_and_labels(self, desk_corpus):
        trials = make_trials(desk_corpus, 500, 500, seed=1)
        assert len(trials) == 1000 and trials.n_target == 500
        for a, b, t in trials:
            assert (desk_corpus.speaker_of(a) == desk_corpus.speaker_of(b)) == t

    def test_deterministic_and_unique(self, tiny_corpus):
        a = make_trials(tiny_corpus, 20, 30, seed=5)
        assert a.trials == make_trials(tiny_corpus, 20, 30, seed=5).trials
        pairs = [(x, y) for x, y, _ in a]
        assert len(set(pairs)) == len(pairs)

    def test_too_many(self, tiny_corpus):
        with pytest.raises(ValueError, match="only"):
            make_trials(tiny_corpus, 1000, 10, seed=0)

    def test_file_round_trip(self, tiny_corpus, tmp_path):
        trials = make_trials(tiny_corpus, 5, 5, seed=0)
        trials.write(tmp_path / "t.txt")
        assert TrialList.read(tmp_path / "t.txt").trials == trials.trials
        line = (tmp_path / "t.txt").read_text().splitlines()[0].split()
        assert len(line) == 3 and line[2] in ("0", "1")
