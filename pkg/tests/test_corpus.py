"""Corpus generator determinism, speaker disjointness, the gain/LHUC
representability link, and manifest / feature-file round trips."""

import numpy as np
import pytest

from lhuc_asr import corpus as cp
from lhuc_asr.errors import MalformedLine, MissingFeatureFile, SpecInvalid
from lhuc_asr.model import FIRST_TOKEN_ID, ConformerModel, ModelConfig, \
    SpeakerParams


def _spec(**kwargs):
    base = dict(num_speakers=3, num_test_speakers=2, utterances_per_speaker=5,
                vocab_size=6, token_len_range=(2, 4), frames_per_token=4,
                feat_dim=8, speaker_gain_log_std=0.5, noise_std=0.1,
                dev_fraction=0.2, seed=13)
    base.update(kwargs)
    return cp.CorpusSpec(**base)


class TestGeneration:
    def test_same_seed_bit_identical(self):
        a = cp.generate_corpus(_spec())
        b = cp.generate_corpus(_spec())
        for split in ("train", "dev", "test"):
            for ua, ub in zip(a.split(split), b.split(split)):
                assert ua.utterance_id == ub.utterance_id
                assert ua.reference == ub.reference
                assert np.array_equal(ua.features, ub.features)

    def test_speaker_disjoint_splits(self):
        c = cp.generate_corpus(_spec())
        train_speakers = set(c.speakers("train")) | set(c.speakers("dev"))
        assert not train_speakers & set(c.speakers("test"))

    def test_no_variability_means_identical_speakers(self):
        c = cp.generate_corpus(_spec(speaker_gain_log_std=0.0, noise_std=0.0))
        gains = np.stack(list(c.speaker_gains.values()))
        np.testing.assert_array_equal(gains, 1.0)
        # Same reference implies identical features across speakers.
        proto = cp.token_prototypes(c.spec)
        for utt in c.train + c.test:
            rebuilt = np.concatenate(
                [proto[t - FIRST_TOKEN_ID] for t in utt.reference], axis=0)
            np.testing.assert_array_equal(utt.features, rebuilt)

    def test_frames_match_reference_length(self):
        c = cp.generate_corpus(_spec())
        for utt in c.train + c.dev + c.test:
            assert utt.features.shape == (len(utt.reference) * 4, 8)
            assert all(FIRST_TOKEN_ID <= t < FIRST_TOKEN_ID + 6
                       for t in utt.reference)

    def test_no_adjacent_repeats(self):
        c = cp.generate_corpus(_spec(utterances_per_speaker=20))
        for utt in c.train + c.dev + c.test:
            assert all(a != b for a, b in zip(utt.reference, utt.reference[1:]))

    def test_gains_clamped_for_lhuc_representability(self):
        c = cp.generate_corpus(_spec(speaker_gain_log_std=5.0))
        for gain in c.speaker_gains.values():
            assert np.all(gain >= cp.GAIN_MIN) and np.all(gain <= cp.GAIN_MAX)

    def test_invalid_spec(self):
        with pytest.raises(SpecInvalid):
            cp.generate_corpus(_spec(num_speakers=0))
        with pytest.raises(SpecInvalid):
            cp.generate_corpus(_spec(token_len_range=(3, 2)))

    def test_gain_lies_in_lhuc_class_on_probe_model(self):
        """Clamping keeps every speaker gain inside the (0, 2) scaling range:
        on the diagonal probe model an r exists whose scale reproduces the
        speaker transformation exactly."""
        spec = _spec(feat_dim=16, noise_std=0.0)
        c = cp.generate_corpus(spec)
        model = ConformerModel(ModelConfig(feat_dim=16, linear_probe=True), seed=1)
        speaker_id = c.speakers("test")[0]
        gain = c.speaker_gains[speaker_id]
        # 2*sigmoid(r) = gain  =>  r = logit(gain / 2), valid for gain in (0, 2)
        half = gain / 2.0
        r = np.log(half / (1.0 - half))
        utt = next(u for u in c.test if u.speaker_id == speaker_id)
        proto = np.concatenate(
            [c.prototypes[t - FIRST_TOKEN_ID] for t in utt.reference], axis=0)
        synthesized = model.encode(proto, speaker=SpeakerParams("s", r))
        actual = model.encode(utt.features)
        np.testing.assert_allclose(synthesized.states.data, actual.states.data,
                                   atol=1e-9)


class TestSupervisionNoise:
    def test_zero_rate_identity(self):
        c = cp.generate_corpus(_spec())
        out = cp.corrupt_references(c.test, 0.0, 6, seed=3)
        assert all(a.reference == b.reference for a, b in zip(out, c.test))

    def test_rate_approximately_respected(self):
        c = cp.generate_corpus(_spec(num_speakers=10, utterances_per_speaker=30))
        out = cp.corrupt_references(c.train, 0.3, 6, seed=3)
        flips = total = 0
        for noisy, clean in zip(out, c.train):
            assert len(noisy.reference) == len(clean.reference)
            flips += sum(a != b for a, b in
                         zip(noisy.reference, clean.reference))
            total += len(clean.reference)
        assert 0.25 < flips / total < 0.35

    def test_keeps_repeat_freedom(self):
        c = cp.generate_corpus(_spec(num_speakers=6, utterances_per_speaker=20))
        out = cp.corrupt_references(c.train, 0.5, 6, seed=4)
        for utt in out:
            assert all(a != b for a, b in zip(utt.reference, utt.reference[1:]))


class TestFeatureFiles:
    def test_bit_exact_round_trip(self, tmp_path):
        arr = np.random.default_rng(5).normal(size=(17, 9))
        path = tmp_path / "x.f64"
        cp.write_features(path, arr)
        back = cp.read_features(path)
        assert back.dtype == np.float64
        assert np.array_equal(back, arr)
        assert path.stat().st_size == 16 + arr.size * 8

    def test_missing_file(self, tmp_path):
        with pytest.raises(MissingFeatureFile):
            cp.read_features(tmp_path / "absent.f64")

    def test_truncated_file(self, tmp_path):
        arr = np.zeros((4, 4))
        path = tmp_path / "x.f64"
        cp.write_features(path, arr)
        path.write_bytes(path.read_bytes()[:-8])
        with pytest.raises(MalformedLine):
            cp.read_features(path)


class TestManifest:
    def test_empty_corpus_round_trips(self, tmp_path):
        corpus = cp.Corpus(spec=_spec())
        man = cp.write_manifest(tmp_path, corpus)
        assert man.read_text().count("\n") == 1  # header only
        back = cp.read_manifest(man)
        assert back == {"train": [], "dev": [], "test": []}

    def test_full_round_trip_bit_exact(self, tmp_path):
        c = cp.generate_corpus(_spec())
        man = cp.write_manifest(tmp_path, c)
        back = cp.read_manifest(man)
        for split in ("train", "dev", "test"):
            orig = c.split(split)
            got = back[split]
            assert len(orig) == len(got)
            for a, b in zip(orig, got):
                assert (a.utterance_id, a.speaker_id, a.reference) \
                    == (b.utterance_id, b.speaker_id, b.reference)
                assert np.array_equal(a.features, b.features)

    def test_truncated_line_reports_lineno(self, tmp_path):
        c = cp.generate_corpus(_spec())
        man = cp.write_manifest(tmp_path, c)
        lines = man.read_text().splitlines()
        lines[3] = "\t".join(lines[3].split("\t")[:3])
        man.write_text("\n".join(lines) + "\n")
        with pytest.raises(MalformedLine) as err:
            cp.read_manifest(man)
        assert err.value.lineno == 4

    def test_missing_feature_file(self, tmp_path):
        c = cp.generate_corpus(_spec())
        man = cp.write_manifest(tmp_path, c)
        victim = next((tmp_path / "feats").iterdir())
        victim.unlink()
        with pytest.raises(MissingFeatureFile):
            cp.read_manifest(man)
