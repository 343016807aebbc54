import json
import math
import struct

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from sled.metrics import ged2
from sled.synth import (
    UNKNOWN_TOKEN,
    LatentFormatError,
    LatentSequence,
    SeparationError,
    SlatStreamWriter,
    classify_frames,
    decode_tokens,
    infer_state,
    make_task,
    oracle_sample_next,
    random_prompt,
    read_dataset,
    read_latents,
    sample_utterance,
    strip_eot,
    write_dataset,
    write_latents,
)


@pytest.fixture(scope="module")
def task():
    return make_task(1)


def _min_dist(c):
    d = np.sqrt(((c[:, None] - c[None]) ** 2).sum(-1))
    return d[np.triu_indices(len(c), 1)].min()


class TestMakeTask:
    def test_deterministic(self):
        assert make_task(3).to_bytes() == make_task(3).to_bytes()
        assert make_task(3).digest() != make_task(4).digest()

    def test_separation(self):
        t = make_task(1, vocab_size=8, latent_dim=16)
        assert _min_dist(t.centroids) > 4 * t.noise_scale

    def test_rescales_crowded_centroids(self):
        t = make_task(0, vocab_size=16, latent_dim=2, noise_scale=0.5)
        assert _min_dist(t.centroids) > 4 * 0.5

    def test_zero_noise_needs_no_rescale(self):
        raw = np.random.default_rng(2).standard_normal((16, 16))
        np.testing.assert_array_equal(make_task(2, noise_scale=0.0).centroids, raw)

    def test_unattainable_separation(self):
        with pytest.raises(SeparationError):
            make_task(0, vocab_size=2, latent_dim=1, noise_scale=1e6)

    def test_mode_offset_magnitude(self, task):
        assert task.delta_norm == pytest.approx(0.5, rel=1e-12)

    @pytest.mark.parametrize("kwargs", [dict(ar_coeff=1.0), dict(noise_scale=-1.0), dict(frames_per_token=0)])
    def test_invalid(self, kwargs):
        with pytest.raises(ValueError):
            make_task(0, **kwargs)


class TestPrompts:
    def test_strip_eot(self, task):
        assert strip_eot(task, [1, 2, task.eot]) == [1, 2]
        with pytest.raises(ValueError):
            strip_eot(task, [1, task.eot, 2])
        with pytest.raises(ValueError):
            strip_eot(task, [task.vocab_size + 1])
        with pytest.raises(ValueError):
            strip_eot(task, [])


class TestSampleUtterance:
    def test_noise_free_no_offset_repeats_centroids(self):
        t = make_task(0, noise_scale=0.0, mode_offset=0.0)
        seq = sample_utterance(t, [3, 1, 4], seed=9)
        want = np.repeat(t.centroids[[3, 1, 4]], t.frames_per_token, axis=0).astype(np.float32)
        np.testing.assert_array_equal(seq.frames, want)
        assert seq.stopped

    def test_noise_free_sign_is_constant(self):
        t = make_task(0, noise_scale=0.0)
        for seed in range(10):
            seq = sample_utterance(t, [2, 5], seed)
            off = seq.frames - np.repeat(t.centroids[[2, 5]], t.frames_per_token, axis=0)
            signs = np.sign(off @ t.delta_unit)
            assert len(set(signs)) == 1
            np.testing.assert_allclose(np.abs(off @ t.delta_unit), 0.5, atol=1e-6)

    def test_deterministic(self, task):
        assert sample_utterance(task, [1, 2], 5) == sample_utterance(task, [1, 2], 5)

    def test_unknown_token(self, task):
        with pytest.raises(ValueError):
            sample_utterance(task, [99], 0)

    def test_single_token_mean_and_bimodality(self, task):
        frames = np.stack([sample_utterance(task, [7], s).frames[0] for s in range(10_000)]).astype(np.float64)
        proj = (frames - task.centroids[7]) @ task.delta_unit
        # the mean over s cancels the offset
        np.testing.assert_allclose(frames.mean(0), task.centroids[7], atol=0.03)
        assert np.mean(proj > 0) == pytest.approx(0.5, abs=0.02)
        assert np.median(proj[proj > 0]) == pytest.approx(0.5, abs=0.02)
        assert np.median(proj[proj < 0]) == pytest.approx(-0.5, abs=0.02)
        hist, _ = np.histogram(proj, bins=64)
        centre = hist[28:36].max()
        assert centre / hist.max() < 0.2


class TestOracle:
    def test_empty_history_noise_free(self):
        t = make_task(0, noise_scale=0.0)
        draws = oracle_sample_next(t, [4], np.zeros((0, 16)), seed=0, count=2000)
        plus = np.all(np.isclose(draws, t.centroids[4] + t.mode_offset), axis=1)
        minus = np.all(np.isclose(draws, t.centroids[4] - t.mode_offset), axis=1)
        assert np.all(plus | minus)
        assert plus.mean() == pytest.approx(0.5, abs=0.05)

    def test_history_fixes_sign(self):
        t = make_task(0, noise_scale=0.0)
        history = (t.centroids[[4, 4]] + t.mode_offset)
        nxt = oracle_sample_next(t, [4, 6], history, seed=3)
        np.testing.assert_allclose(nxt, t.centroids[4] + t.mode_offset, atol=1e-12)

    def test_infer_state_recovers_truth(self, task):
        from sled.synth import _simulate

        frames, sign, resid = _simulate(task, [1, 2, 3], np.random.default_rng(0))
        for j in (1, 9, 20):
            s, e = infer_state(task, [1, 2, 3], frames[:j])
            assert s == sign
            np.testing.assert_allclose(e, resid[j - 1], atol=1e-12)

    def test_history_too_long(self, task):
        with pytest.raises(ValueError):
            oracle_sample_next(task, [1], np.zeros((8, 16)), seed=0)

    @pytest.mark.parametrize("j", [0, 3, 8])
    def test_matches_true_continuations(self, task, j):
        prompt = [5, 11]
        rng = np.random.default_rng(j)
        vals = []
        for trial in range(100):
            utt = sample_utterance(task, prompt, 1000 + trial)
            history = utt.frames[:j].astype(np.float64)
            oracle = oracle_sample_next(task, prompt, history, seed=int(rng.integers(1 << 62)), count=100)
            # true continuations from the same prefix: rerun the generator past j with fresh noise
            from sled.synth import infer_state as _inf

            s, e = _inf(task, prompt, history)
            signs = rng.choice([-1.0, 1.0], size=(100, 1)) if s is None else s
            xi = rng.standard_normal((100, 16))
            truth = task.centroids[prompt[j // 8]] + signs * task.mode_offset + task.ar_coeff * e + 0.05 * xi
            vals.append(ged2(oracle, truth))
        se = np.std(vals, ddof=1) / math.sqrt(len(vals))
        assert abs(np.mean(vals)) < 3 * se


class TestDecode:
    def test_noise_free_exact(self):
        t = make_task(0, noise_scale=0.0)
        tokens, acc = decode_tokens(t, sample_utterance(t, [0, 15, 7, 7], 1))
        assert tokens == [0, 15, 7, 7] and acc == 1.0

    def test_default_noise_token_accuracy(self, task):
        rng = np.random.default_rng(0)
        ok = total = 0
        for i in range(1000):
            p = random_prompt(task, rng)
            tokens, _ = decode_tokens(task, sample_utterance(task, p, i))
            ok += sum(a == b for a, b in zip(tokens, p)) if len(tokens) == len(p) else 0
            total += len(p)
        assert ok / total > 0.999

    def test_zero_frames_tie_break(self):
        t = make_task(0, noise_scale=0.0, mode_offset=0.0)
        c = t.centroids.copy()
        t.centroids[1] = c[0]  # duplicate -> tie; lowest index must win
        labels = classify_frames(t, np.tile(c[0], (8, 1)))
        assert labels.tolist() == [0] * 8
        zeros = np.zeros((16, 16), dtype=np.float32)
        tokens, acc = decode_tokens(t, zeros)
        nearest = int(np.argmin((t.centroids**2).sum(1)))
        assert tokens == [nearest, nearest] and acc == 1.0

    def test_zero_frames_with_offset_nearest_mode(self, task):
        zeros = np.zeros((8, 16), dtype=np.float32)
        modes = np.concatenate([task.centroids + task.mode_offset, task.centroids - task.mode_offset])
        nearest = int(np.argmin((modes**2).sum(1))) % task.vocab_size
        assert decode_tokens(task, zeros, reject_off_mode=False) == ([nearest], 1.0)
        # deterministic under the default rule as well
        assert decode_tokens(task, zeros) == decode_tokens(task, zeros)

    def test_midpoint_frames_are_rejected(self, task):
        frames = np.tile(task.centroids[3], (8, 1))
        assert decode_tokens(task, frames) == ([UNKNOWN_TOKEN], 0.0)
        assert decode_tokens(task, frames, reject_off_mode=False)[0] == [3]

    def test_partial_block(self, task):
        seq = sample_utterance(task, [2, 9], 0).frames
        assert decode_tokens(task, seq[:12])[0] == [2, 9]
        assert decode_tokens(task, seq[:11])[0] == [2]

    def test_errors(self, task):
        with pytest.raises(ValueError):
            decode_tokens(task, np.zeros((0, 16)))
        with pytest.raises(ValueError):
            decode_tokens(task, np.zeros((8, 3)))


frames_st = st.integers(0, 20).flatmap(
    lambda n: st.integers(1, 6).flatmap(
        lambda d: st.lists(st.floats(-1e6, 1e6, width=32, allow_nan=False), min_size=n * d, max_size=n * d)
        .map(lambda v: np.asarray(v, dtype=np.float32).reshape(n, d))))


class TestSlatFormat:
    @given(frames_st, st.integers(1, 1000))
    @settings(max_examples=40, deadline=None)
    def test_round_trip(self, tmp_path_factory, frames, rate):
        path = tmp_path_factory.mktemp("slat") / "x.slat"
        seq = LatentSequence(frames, rate, True)
        write_latents(path, seq)
        assert read_latents(path) == seq

    def test_header_layout(self, tmp_path):
        write_latents(tmp_path / "a.slat", LatentSequence(np.ones((3, 2)), 75))
        raw = (tmp_path / "a.slat").read_bytes()
        assert raw[:4] == b"SLAT"
        assert struct.unpack("<HHHI", raw[4:14]) == (1, 2, 75, 3)
        assert len(raw) == 14 + 3 * 2 * 4
        assert np.frombuffer(raw[14:], "<f4").tolist() == [1.0] * 6

    def test_bad_magic(self, tmp_path):
        p = tmp_path / "a.slat"
        write_latents(p, LatentSequence(np.ones((3, 2))))
        raw = bytearray(p.read_bytes())
        raw[:4] = b"NOPE"
        p.write_bytes(bytes(raw))
        with pytest.raises(LatentFormatError, match="magic"):
            read_latents(p)

    def test_bad_version(self, tmp_path):
        p = tmp_path / "a.slat"
        write_latents(p, LatentSequence(np.ones((3, 2))))
        raw = bytearray(p.read_bytes())
        raw[4:6] = struct.pack("<H", 9)
        p.write_bytes(bytes(raw))
        with pytest.raises(LatentFormatError, match="version"):
            read_latents(p)

    @pytest.mark.parametrize("cut", [-1, -8])
    def test_truncated_payload(self, tmp_path, cut):
        p = tmp_path / "a.slat"
        write_latents(p, LatentSequence(np.ones((3, 2))))
        p.write_bytes(p.read_bytes()[:cut])
        with pytest.raises(LatentFormatError, match="length"):
            read_latents(p)

    def test_trailing_bytes(self, tmp_path):
        p = tmp_path / "a.slat"
        write_latents(p, LatentSequence(np.ones((3, 2))))
        p.write_bytes(p.read_bytes() + b"\0")
        with pytest.raises(LatentFormatError, match="length"):
            read_latents(p)

    def test_stream_writer(self, tmp_path):
        frames = np.arange(12, dtype=np.float32).reshape(4, 3)
        with SlatStreamWriter(tmp_path / "s.slat", 3) as w:
            for f in frames:
                w.write(f)
        write_latents(tmp_path / "b.slat", LatentSequence(frames))
        assert (tmp_path / "s.slat").read_bytes() == (tmp_path / "b.slat").read_bytes()

    def test_nonfinite_rejected(self):
        with pytest.raises(ValueError):
            LatentSequence(np.array([[np.inf]]))


class TestDataset:
    def test_reproducible_bytes(self, tmp_path, task):
        a = write_dataset(tmp_path / "a", task, 20, seed=4)
        b = write_dataset(tmp_path / "b", task, 20, seed=4)
        assert a == b
        for name in ["tokens.txt", "manifest.json"] + [f"utt_{i:06d}.slat" for i in range(20)]:
            assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()
        manifest = json.loads((tmp_path / "a" / "manifest.json").read_text())
        assert manifest["task_seed"] == 1 and manifest["task_sha256"] == task.digest()

    def test_read_back(self, tmp_path, task):
        write_dataset(tmp_path, task, 10, seed=2)
        ds = read_dataset(tmp_path)
        assert len(ds) == 10
        for p, u in zip(ds.prompts, ds.utterances):
            assert len(u) == len(p) * task.frames_per_token
            assert decode_tokens(task, u)[0] == p
