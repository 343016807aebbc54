import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from sled.model import ModelConfig, init_params
from sled.sampler import (
    STOPPED,
    CfgConfig,
    StreamError,
    StreamSchedule,
    StreamSession,
    cfg_combine,
    generate_batch,
    generate_offline,
    generate_streaming,
    noise_vector,
)

CFG = ModelConfig()
EOT = CFG.eot_id


@pytest.fixture(scope="module")
def model():
    m = init_params(CFG, 0)
    gen = torch.Generator().manual_seed(1)
    with torch.no_grad():
        for b in m.head.blocks:
            b.noise_proj.weight.copy_(torch.randn(b.noise_proj.weight.shape, generator=gen) * 0.1)
    return m


def stopping_model(bias):
    m = init_params(CFG, 0)
    with torch.no_grad():
        m.stop.weight.zero_()
        m.stop.bias.fill_(bias)
    return m


class TestConfig:
    def test_defaults(self):
        c = CfgConfig()
        assert (c.lam, c.stop_threshold) == (2.0, 0.5)

    @pytest.mark.parametrize("kw", [dict(lam=-1.0), dict(stop_threshold=1.0), dict(stop_threshold=0.0),
                                    dict(max_frames=0), dict(stop_on="both")])
    def test_invalid(self, kw):
        with pytest.raises(ValueError):
            CfgConfig(**kw)

    def test_schedules(self):
        assert StreamSchedule.parse("5:20") == StreamSchedule(5, 20)
        assert str(StreamSchedule.parse("5:45")) == "5:45"
        with pytest.raises(ValueError):
            StreamSchedule(0, 20)


class TestCombine:
    def test_endpoints_and_arithmetic(self):
        zc, zu = torch.randn(8), torch.randn(8)
        assert cfg_combine(zc, zu, 1.0) is zc
        assert cfg_combine(zc, zu, 0.0) is zu
        out = cfg_combine(torch.tensor([2.0, 0.0]), torch.tensor([0.0, 0.0]), 2.0)
        assert out.tolist() == [4.0, 0.0]

    def test_shape_mismatch(self):
        with pytest.raises(ValueError):
            cfg_combine(torch.zeros(3), torch.zeros(4), 2.0)

    @given(st.floats(0, 10), st.floats(-5, 5), st.floats(-5, 5))
    @settings(max_examples=50, deadline=None)
    def test_linearity(self, lam, a, b):
        zc, zu = torch.tensor([a], dtype=torch.float64), torch.tensor([b], dtype=torch.float64)
        assert float(cfg_combine(zc, zu, lam)) == pytest.approx(b + lam * (a - b), rel=1e-12, abs=1e-12)


class TestNoise:
    def test_counter_based(self):
        a = noise_vector(5, 3, 16)
        assert np.array_equal(a, noise_vector(5, 3, 16))
        assert not np.array_equal(a, noise_vector(5, 4, 16))
        assert not np.array_equal(a, noise_vector(6, 3, 16))


class TestOffline:
    def test_lambda_one_skips_unconditional_pass(self, model):
        cfg = CfgConfig(lam=1.0, max_frames=30)
        a = generate_offline(model, [1, 2, 3], cfg, seed=4, guided=False)
        b = generate_offline(model, [1, 2, 3], cfg, seed=4, guided=True)
        assert a == b

    def test_deterministic(self, model):
        cfg = CfgConfig(max_frames=20)
        assert generate_offline(model, [4, 5], cfg, 1) == generate_offline(model, [4, 5, EOT], cfg, 1)
        assert generate_offline(model, [4, 5], cfg, 1) != generate_offline(model, [4, 5], cfg, 2)

    def test_batch_equals_single(self, model):
        cfg = CfgConfig(max_frames=12)
        prompts = [[1, 2, 3], [4, 5, 6], [7, 8, 9]]
        batch = generate_batch(model, prompts, cfg, [10, 11, 12])
        for p, s, out in zip(prompts, [10, 11, 12], batch):
            single = generate_offline(model, p, cfg, s)
            np.testing.assert_allclose(out.frames, single.frames, rtol=1e-5, atol=1e-6)

    def test_termination_reasons(self):
        out = generate_offline(stopping_model(5.0), [1], CfgConfig(max_frames=50), 0)
        assert len(out) == 1 and out.stopped
        out = generate_offline(stopping_model(-5.0), [1], CfgConfig(max_frames=7), 0)
        assert len(out) == 7 and not out.stopped

    def test_errors(self, model):
        with pytest.raises(ValueError):
            generate_offline(model, [], CfgConfig())
        with pytest.raises(ValueError):
            generate_offline(model, [EOT], CfgConfig())
        with pytest.raises(ValueError):
            generate_offline(model, [99], CfgConfig())
        with pytest.raises(ValueError):
            generate_batch(model, [[1], [1, 2]], CfgConfig(), [0, 1])


class TestStreaming:
    @pytest.mark.parametrize("sched", [StreamSchedule(5, 20), StreamSchedule(5, 45), StreamSchedule(2, 3)])
    def test_schedule_accounting(self, model, sched):
        s = StreamSession(model, sched, CfgConfig(max_frames=400), seed=0)
        for k in range(1, 4):
            for _ in range(sched.n_text):
                s.push_text([k])
            assert len(s.frames) == k * sched.m_frames
            assert s.tokens_seen == k * sched.n_text

    def test_partial_buffer_emits_nothing(self, model):
        s = StreamSession(model, StreamSchedule(5, 20), CfgConfig(), 0)
        assert s.push_text([1, 2, 3]) == []
        assert s.push_text([4, 5]) and len(s.frames) == 20

    def test_twelve_token_prompt(self, model):
        s = StreamSession(model, StreamSchedule(5, 20), CfgConfig(max_frames=60), 0)
        counts = []
        for tok in range(12):
            counts.append(len(s.push_text([tok])))
        assert counts == [0, 0, 0, 0, 20, 0, 0, 0, 0, 20, 0, 0]
        s.end_text()
        assert s.phase == "post_eot"
        rest = s.drain()
        assert len(rest) == 20 and len(s.frames) == 60
        assert [e[0] for e in s.events] == ["group", "group", "eot"] + ["frame"] * 20

    def test_stop_only_after_eot(self):
        # a stop head that always fires must not cut a pre-EOT group short
        s = StreamSession(stopping_model(5.0), StreamSchedule(2, 4), CfgConfig(), 0)
        assert len(s.push_text([1, 2])) == 4
        s.end_text()
        frame = s.pull()
        assert frame.shape == (CFG.latent_dim,)
        assert s.pull() is STOPPED and s.pull() is STOPPED
        assert s.result().stopped and len(s.result()) == 5

    def test_errors(self, model):
        s = StreamSession(model, StreamSchedule(5, 20), CfgConfig(max_frames=3), 0)
        with pytest.raises(StreamError):
            s.pull()
        s.end_text()
        with pytest.raises(StreamError):
            s.push_text([1])
        s.drain()
        assert s.phase == "stopped"
        with pytest.raises(StreamError):
            s.push_text([1])

    @pytest.mark.parametrize("lam", [1.0, 2.0])
    def test_degenerate_schedule_equals_offline(self, model, lam):
        cfg = CfgConfig(lam=lam, max_frames=40)
        prompt = [3, 1, 4, 1]
        off = generate_offline(model, prompt, cfg, 9)
        on = generate_streaming(model, prompt, StreamSchedule(len(prompt) + 1, 20), cfg, 9)
        assert off == on

    def test_prefix_monotonic(self, model):
        s = StreamSession(model, StreamSchedule(2, 3), CfgConfig(max_frames=20), 0)
        seen = []
        for tok in [1, 2, 3, 4]:
            seen += [f.copy() for f in s.push_text([tok])]
        s.end_text()
        seen += [f.copy() for f in s.drain()]
        np.testing.assert_array_equal(np.stack(seen), s.result().frames)
