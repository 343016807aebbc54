"""Offline and streaming generation with classifier-free guidance.

Guidance runs a second, prompt-masked backbone pass whose stream starts at
EOT and then sees only the generated frames. At each step the two features
are mixed as ``z_u + lam * (z_c - z_u)`` before the head samples a frame.

Noise is counter-based: frame ``t`` of a session with seed ``s`` always uses
the draw keyed by ``(s, t)``, whatever else was computed before it.
"""

from __future__ import annotations

import time
from dataclasses import dataclass
from typing import Sequence

import numpy as np
import torch

from .model import SledModel
from .synth import LatentSequence

__all__ = [
    "CfgConfig",
    "StreamSchedule",
    "StreamError",
    "STOPPED",
    "noise_vector",
    "cfg_combine",
    "generate_offline",
    "generate_batch",
    "StreamSession",
    "generate_streaming",
]


@dataclass(frozen=True)
class CfgConfig:
    lam: float = 2.0
    stop_threshold: float = 0.5
    max_frames: int = 400
    stop_on: str = "conditional"

    def __post_init__(self):
        errors = self.validation_errors()
        if errors:
            raise ValueError("; ".join(errors))

    def validation_errors(self) -> list[str]:
        errors = []
        if self.lam < 0:
            errors.append("sampler.lam must be >= 0")
        if not (0.0 < self.stop_threshold < 1.0):
            errors.append("sampler.stop_threshold must lie in (0, 1)")
        if self.max_frames < 1:
            errors.append("sampler.max_frames must be >= 1")
        if self.stop_on not in ("conditional", "guided"):
            errors.append("sampler.stop_on must be 'conditional' or 'guided'")
        return errors


@dataclass(frozen=True)
class StreamSchedule:
    n_text: int = 5
    m_frames: int = 20

    def __post_init__(self):
        if self.n_text < 1 or self.m_frames < 1:
            raise ValueError("schedule counts must be positive")

    @classmethod
    def parse(cls, text: str) -> "StreamSchedule":
        n, _, m = text.partition(":")
        return cls(int(n), int(m))

    def __str__(self):
        return f"{self.n_text}:{self.m_frames}"


class StreamError(RuntimeError):
    pass


class _Stopped:
    def __repr__(self):
        return "STOPPED"

    def __bool__(self):
        return False


#: Returned by :meth:`StreamSession.pull` once generation has ended.
STOPPED = _Stopped()


def noise_vector(seed: int, index: int, dim: int) -> np.ndarray:
    """Standard-normal draw keyed by ``(seed, index)`` (Philox counter-based)."""
    key = [int(seed) & 0xFFFFFFFFFFFFFFFF, int(index) & 0xFFFFFFFFFFFFFFFF]
    return np.random.Generator(np.random.Philox(key=key)).standard_normal(dim)


def cfg_combine(z_cond: torch.Tensor, z_uncond: torch.Tensor, lam: float) -> torch.Tensor:
    """``z_uncond + lam * (z_cond - z_uncond)``; returns an endpoint unchanged at lam 1 or 0."""
    if z_cond.shape != z_uncond.shape:
        raise ValueError(f"shape mismatch: {tuple(z_cond.shape)} vs {tuple(z_uncond.shape)}")
    if lam == 1.0:
        return z_cond
    if lam == 0.0:
        return z_uncond
    return z_uncond + lam * (z_cond - z_uncond)


class _Decoder:
    """Lock-stepped conditional/unconditional backbone states for a batch."""

    def __init__(self, model: SledModel, cfg: CfgConfig, seeds: Sequence[int], guided: bool):
        self.model = model
        self.cfg = cfg
        self.seeds = [int(s) for s in seeds]
        self.batch = len(self.seeds)
        self.guided = guided
        self.cond = model.new_state()
        self.uncond = model.new_state() if guided else None
        self.z_cond = None
        self.z_uncond = None
        self.pending = None
        self.index = 0
        if guided:
            self.z_uncond = self._run(self.uncond, self._eot_tokens())

    def _eot_tokens(self):
        return torch.full((self.batch, 1), self.model.config.eot_id, dtype=torch.long)

    def _run(self, state, tokens=None, frames=None):
        m = self.model
        if frames is None:
            T = tokens.shape[1]
            x = m.embed(tokens, torch.zeros(self.batch, T, m.config.latent_dim, dtype=m.dtype),
                        torch.zeros(self.batch, T, dtype=torch.bool))
        else:
            x = m.embed(torch.zeros(self.batch, 1, dtype=torch.long), frames[:, None, :],
                        torch.ones(self.batch, 1, dtype=torch.bool))
        return m.backbone(x, state)[:, -1]

    def flush(self):
        if self.pending is not None:
            h, self.pending = self.pending, None
            self.z_cond = self._run(self.cond, frames=h)
            if self.guided:
                self.z_uncond = self._run(self.uncond, frames=h)

    def feed_text(self, tokens: torch.Tensor):
        self.flush()
        self.z_cond = self._run(self.cond, tokens)

    def step(self):
        """Sample the next frame for every sequence; returns ``(h, stop_prob)``."""
        self.flush()
        z = cfg_combine(self.z_cond, self.z_uncond, self.cfg.lam) if self.guided else self.z_cond
        eps = np.stack([noise_vector(s, self.index, self.model.config.noise_dim) for s in self.seeds])
        h = self.model.head_sample(z, torch.from_numpy(eps).to(self.model.dtype))
        stop_z = z if self.cfg.stop_on == "guided" else self.z_cond
        p_stop = self.model.stop_prob(stop_z)
        self.pending = h
        self.index += 1
        return h, p_stop


def _check_prompt(model: SledModel, tokens) -> list[int]:
    eot = model.config.eot_id
    tokens = [int(t) for t in tokens]
    if tokens and tokens[-1] == eot:
        tokens = tokens[:-1]
    if not tokens:
        raise ValueError("prompt is empty")
    for t in tokens:
        if not (0 <= t < eot):
            raise ValueError(f"token id {t} out of range")
    return tokens + [eot]


@torch.no_grad()
def generate_batch(model: SledModel, prompts, cfg: CfgConfig, seeds, guided: bool | None = None,
                   frame_rate: int = 75) -> list[LatentSequence]:
    """Offline generation for prompts of equal length, decoded in lock-step."""
    if cfg.max_frames < 1:
        raise ValueError("max_frames must be >= 1")
    prompts = [_check_prompt(model, p) for p in prompts]
    if len({len(p) for p in prompts}) != 1:
        raise ValueError("generate_batch needs prompts of equal length")
    if guided is None:
        guided = cfg.lam != 1.0
    model.eval()
    dec = _Decoder(model, cfg, seeds, guided)
    dec.feed_text(torch.tensor(prompts, dtype=torch.long))
    B = len(prompts)
    frames = [[] for _ in range(B)]
    done = np.zeros(B, dtype=bool)
    stopped = np.zeros(B, dtype=bool)
    while not done.all():
        h, p_stop = dec.step()
        h_np = h.detach().cpu().numpy()
        p_np = p_stop.detach().cpu().numpy()
        for b in np.flatnonzero(~done):
            frames[b].append(h_np[b])
            if p_np[b] >= cfg.stop_threshold:
                done[b] = stopped[b] = True
            elif len(frames[b]) >= cfg.max_frames:
                done[b] = True
    return [LatentSequence(np.asarray(f, dtype=np.float32), frame_rate, bool(s)) for f, s in zip(frames, stopped)]


def generate_offline(model: SledModel, tokens, cfg: CfgConfig = CfgConfig(), seed: int = 0,
                     guided: bool | None = None) -> LatentSequence:
    """Generate one utterance; EOT is appended to the prompt if absent.

    ``guided=None`` skips the unconditional pass when ``lam == 1``.
    """
    return generate_batch(model, [tokens], cfg, [seed], guided)[0]


class StreamSession:
    """Incremental n:m text-to-latent generation.

    Every ``n_text`` pushed tokens trigger exactly ``m_frames`` frames. EOT
    flushes any leftover tokens and switches to free-running generation via
    :meth:`pull` until the stop head fires or ``max_frames`` is reached.
    """

    def __init__(self, model: SledModel, schedule: StreamSchedule = StreamSchedule(), cfg: CfgConfig = CfgConfig(),
                 seed: int = 0, guided: bool | None = None, clock=time.perf_counter):
        self.model = model
        self.schedule = schedule
        self.cfg = cfg
        self.seed = seed
        self.clock = clock
        model.eval()
        self._dec = _Decoder(model, cfg, [seed], cfg.lam != 1.0 if guided is None else guided)
        self.buffer: list[int] = []
        self.frames: list[np.ndarray] = []
        self.tokens_seen = 0
        self.phase = "filling_text"
        self.stopped_by_head = False
        self.events: list[tuple] = []
        self._t0 = clock()

    def _event(self, name):
        self.events.append((name, self.tokens_seen, len(self.frames), 1000.0 * (self.clock() - self._t0)))

    def _emit(self, decide: bool) -> np.ndarray:
        h, p_stop = self._dec.step()
        frame = h[0].detach().cpu().numpy().astype(np.float32)
        self.frames.append(frame)
        if decide:
            if float(p_stop[0]) >= self.cfg.stop_threshold:
                self.stopped_by_head = True
                self.phase = "stopped"
            elif len(self.frames) >= self.cfg.max_frames:
                self.phase = "stopped"
        return frame

    def _feed(self, tokens):
        self._dec.feed_text(torch.tensor([tokens], dtype=torch.long))

    @torch.no_grad()
    def push_text(self, tokens) -> list[np.ndarray]:
        eot = self.model.config.eot_id
        out = []
        for tok in tokens:
            tok = int(tok)
            if self.phase == "stopped":
                raise StreamError("push after stop")
            if self.phase == "post_eot":
                raise StreamError("push after EOT")
            if tok == eot:
                self._feed(self.buffer + [eot])
                self.buffer = []
                self.phase = "post_eot"
                self._event("eot")
                continue
            if not (0 <= tok < eot):
                raise ValueError(f"token id {tok} out of range")
            self.buffer.append(tok)
            self.tokens_seen += 1
            if len(self.buffer) == self.schedule.n_text:
                self._feed(self.buffer)
                self.buffer = []
                self.phase = "emitting"
                for _ in range(self.schedule.m_frames):
                    out.append(self._emit(decide=False))
                self.phase = "filling_text"
                self._event("group")
        return out

    def end_text(self) -> None:
        self.push_text([self.model.config.eot_id])

    @torch.no_grad()
    def pull(self):
        """Next free-running frame, or :data:`STOPPED` (idempotently) once ended."""
        if self.phase == "stopped":
            return STOPPED
        if self.phase != "post_eot":
            raise StreamError(f"pull is only valid after EOT (phase {self.phase})")
        if len(self.frames) >= self.cfg.max_frames:
            self.phase = "stopped"
            return STOPPED
        frame = self._emit(decide=True)
        self._event("frame")
        return frame

    def drain(self) -> list[np.ndarray]:
        out = []
        while True:
            frame = self.pull()
            if frame is STOPPED:
                return out
            out.append(frame)

    def result(self, frame_rate: int = 75) -> LatentSequence:
        frames = np.asarray(self.frames, dtype=np.float32).reshape(-1, self.model.config.latent_dim)
        return LatentSequence(frames, frame_rate, self.stopped_by_head)


def generate_streaming(model: SledModel, tokens, schedule: StreamSchedule = StreamSchedule(),
                       cfg: CfgConfig = CfgConfig(), seed: int = 0, guided: bool | None = None) -> LatentSequence:
    """Feed a whole prompt token by token through a :class:`StreamSession`."""
    tokens = _check_prompt(model, tokens)
    session = StreamSession(model, schedule, cfg, seed, guided)
    for tok in tokens:
        session.push_text([tok])
    session.drain()
    return session.result()
