"""Oracle-based evaluation of trained models.

All scores compare model samples against exact draws from the synthetic
task's conditional. Reports are CSV with a ``# schema=<name>,version=1``
comment line followed by ``configuration,metric,value`` rows.
"""

from __future__ import annotations

import csv
import io
import math
import statistics
import time
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np
import torch

from . import kernels
from .metrics import EstimatorKind, Semimetric, as_sample_set, ged2
from .model import SledModel, init_params
from .sampler import CfgConfig, StreamSchedule, _Decoder, cfg_combine, generate_batch, generate_streaming
from .synth import (
    UNKNOWN_TOKEN,
    LatentSequence,
    TaskSpec,
    decode_tokens,
    oracle_sample_next,
    random_prompt,
    sample_utterance,
)
from .train import TaskSource, TrainConfig, Trainer, _mix_seed, stream_layout

__all__ = [
    "EvalReport",
    "eval_prompts",
    "PositionScore",
    "step_distribution_score",
    "sample_spread",
    "edit_distance",
    "proxy_transcription",
    "cfg_sweep",
    "ablation_repulsive",
    "DimensionAudit",
    "normality_audit",
    "throughput_bench",
    "first_position_samples",
    "DEFAULT_POSITIONS",
]

#: First frame plus three interior positions (one on a token boundary).
DEFAULT_POSITIONS = (0, 5, 16, 21)


@dataclass
class EvalReport:
    schema: str
    rows: list = field(default_factory=list)

    def add(self, configuration: str, metric: str, value) -> None:
        if any(r[0] == configuration and r[1] == metric for r in self.rows):
            raise ValueError(f"duplicate metric {metric!r} for configuration {configuration!r}")
        self.rows.append((configuration, metric, value))

    def get(self, configuration: str, metric: str):
        for c, m, v in self.rows:
            if c == configuration and m == metric:
                return v
        raise KeyError((configuration, metric))

    def configurations(self) -> list[str]:
        seen = []
        for c, _, _ in self.rows:
            if c not in seen:
                seen.append(c)
        return seen

    def to_csv(self) -> str:
        buf = io.StringIO()
        buf.write(f"# schema={self.schema},version=1\n")
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(["configuration", "metric", "value"])
        for c, m, v in self.rows:
            writer.writerow([c, m, repr(float(v)) if isinstance(v, (float, np.floating)) else v])
        return buf.getvalue()

    def write(self, path) -> None:
        with open(path, "w", newline="") as fh:
            fh.write(self.to_csv())

    @classmethod
    def from_csv(cls, text: str) -> "EvalReport":
        lines = text.splitlines()
        if not lines or not lines[0].startswith("# schema="):
            raise ValueError("missing schema header")
        schema = lines[0][len("# schema="):].split(",")[0]
        report = cls(schema)
        for row in list(csv.reader(lines[1:]))[1:]:
            c, m, v = row
            try:
                value = float(v)
            except ValueError:
                value = v
            report.add(c, m, value)
        return report


def eval_prompts(task: TaskSpec, count: int, seed: int, min_tokens: int = 3, max_tokens: int = 6) -> list[list[int]]:
    """Held-out prompts; seeds are offset from any training stream."""
    rng = np.random.default_rng([seed, 0xE7A1])
    return [random_prompt(task, rng, min_tokens, max_tokens) for _ in range(count)]


def sample_spread(samples) -> float:
    """Mean pairwise Euclidean distance among samples (off-diagonal pairs)."""
    X = as_sample_set(samples)
    n = X.shape[0]
    if n < 2:
        raise ValueError("need at least two samples")
    return kernels.distance_sum(X, X, 1.0) / (n * (n - 1))


def edit_distance(a: Sequence[int], b: Sequence[int]) -> int:
    prev = list(range(len(b) + 1))
    for i, x in enumerate(a, 1):
        cur = [i] + [0] * len(b)
        for j, y in enumerate(b, 1):
            same = x == y and x != UNKNOWN_TOKEN
            cur[j] = min(prev[j] + 1, cur[j - 1] + 1, prev[j - 1] + (0 if same else 1))
        prev = cur
    return prev[-1]


# ---------------------------------------------------------------------------
# per-step distribution fit


def _layout_tensors(model: SledModel, prompt, frames: np.ndarray, position: int, masked: bool, schedule):
    """Teacher-forced input stream up to the position that predicts frame ``position``."""
    layout = stream_layout(prompt, len(frames), model.config.eot_id, schedule, masked)
    t = layout.target.index(position)
    kinds = np.asarray(layout.kinds[: t + 1])
    values = np.asarray(layout.values[: t + 1])
    fr = kinds == 2
    tokens = torch.from_numpy(np.where(fr, 0, values)[None].astype(np.int64))
    inputs = np.zeros((1, t + 1, frames.shape[1]), dtype=np.float32)
    inputs[0, fr] = frames[values[fr]]
    return tokens, torch.from_numpy(inputs).to(model.dtype), torch.from_numpy(fr[None])


@torch.no_grad()
def guided_feature(model: SledModel, prompt, frames: np.ndarray, position: int, lam: float = 1.0, schedule=None):
    """Backbone feature (after guidance) that predicts frame ``position`` under teacher forcing."""
    model.eval()
    z_c = model.backbone(model.embed(*_layout_tensors(model, prompt, frames, position, False, schedule)))[0, -1]
    if lam == 1.0:
        return z_c
    z_u = model.backbone(model.embed(*_layout_tensors(model, prompt, frames, position, True, None)))[0, -1]
    return cfg_combine(z_c, z_u, lam)


@torch.no_grad()
def model_step_samples(model: SledModel, z: torch.Tensor, count: int, seed: int) -> np.ndarray:
    gen = torch.Generator().manual_seed(_mix_seed(seed, 0x5A4D) & 0x7FFFFFFFFFFFFFFF)
    eps = torch.randn(count, model.config.noise_dim, generator=gen, dtype=torch.float64).to(model.dtype)
    h = model.head_sample(z.expand(count, -1), eps)
    return h.detach().cpu().numpy().astype(np.float64)


@dataclass
class PositionScore:
    position: int
    score: float
    noise_floor: float
    null_mean: float
    spread_model: float
    spread_oracle: float


def step_distribution_score(model: SledModel, task: TaskSpec, prompts, positions=DEFAULT_POSITIONS,
                            samples_per_step: int = 256, seed: int = 0, lam: float = 1.0, schedule=None,
                            null_reps: int = 20) -> list[PositionScore]:
    """Unbiased GED^2 (beta = 1) between model and oracle next-frame samples.

    For each prompt a ground-truth utterance supplies the teacher-forced
    prefix. The per-position score is the mean over prompts; the noise
    floor is the standard deviation of the same statistic computed between
    two independent oracle sample sets, over ``null_reps`` replicates.
    """
    d = Semimetric(1.0)
    out = []
    utterances = [sample_utterance(task, p, _mix_seed(seed, i, 0x7A)) for i, p in enumerate(prompts)]
    for j in positions:
        scores, nulls = [], np.zeros(null_reps)
        spreads_m, spreads_o = [], []
        for i, (prompt, utt) in enumerate(zip(prompts, utterances)):
            if j >= len(utt):
                raise ValueError(f"position {j} is beyond the {len(utt)}-frame utterance")
            frames = utt.frames
            history = frames[:j]
            z = guided_feature(model, prompt, frames, j, lam, schedule)
            ms = model_step_samples(model, z, samples_per_step, _mix_seed(seed, i, j, 1))
            os_ = oracle_sample_next(task, prompt, history, _mix_seed(seed, i, j, 2), count=samples_per_step)
            scores.append(ged2(ms, os_, d, EstimatorKind.UNBIASED))
            spreads_m.append(sample_spread(ms))
            spreads_o.append(sample_spread(os_))
            for r in range(null_reps):
                a = oracle_sample_next(task, prompt, history, _mix_seed(seed, i, j, 3, r), count=samples_per_step)
                b = oracle_sample_next(task, prompt, history, _mix_seed(seed, i, j, 4, r), count=samples_per_step)
                nulls[r] += ged2(a, b, d, EstimatorKind.UNBIASED) / len(prompts)
        out.append(PositionScore(
            position=j,
            score=float(np.mean(scores)),
            noise_floor=float(np.std(nulls, ddof=1)),
            null_mean=float(np.mean(nulls)),
            spread_model=float(np.mean(spreads_m)),
            spread_oracle=float(np.mean(spreads_o)),
        ))
    return out


def first_position_samples(model: SledModel, prompt, count: int, seed: int, lam: float = 1.0) -> np.ndarray:
    """Model samples of the first frame given the full prompt."""
    frames = np.zeros((1, model.config.latent_dim), dtype=np.float32)
    z = guided_feature(model, prompt, frames, 0, lam)
    return model_step_samples(model, z, count, seed)


# ---------------------------------------------------------------------------
# proxy transcription


def score_transcripts(task: TaskSpec, prompts, sequences: Iterable[LatentSequence]):
    errors = total = 0
    for prompt, seq in zip(prompts, sequences):
        decoded = decode_tokens(task, seq)[0] if len(seq) else []
        errors += edit_distance(decoded, prompt)
        total += len(prompt)
    rate = errors / total
    return max(0.0, 1.0 - rate), rate


def generate_all(model: SledModel, prompts, cfg: CfgConfig, seed: int, mode: str = "offline",
                 schedule: StreamSchedule = StreamSchedule(), guided=None) -> list[LatentSequence]:
    seeds = [_mix_seed(seed, i, 0x6E) for i in range(len(prompts))]
    if mode == "streaming":
        return [generate_streaming(model, p, schedule, cfg, s, guided) for p, s in zip(prompts, seeds)]
    if mode != "offline":
        raise ValueError(f"unknown mode {mode!r}")
    out: list[LatentSequence | None] = [None] * len(prompts)
    by_len: dict[int, list[int]] = {}
    for i, p in enumerate(prompts):
        by_len.setdefault(len(p), []).append(i)
    for idx in by_len.values():
        seqs = generate_batch(model, [prompts[i] for i in idx], cfg, [seeds[i] for i in idx], guided)
        for i, s in zip(idx, seqs):
            out[i] = s
    return out


def proxy_transcription(model: SledModel, task: TaskSpec, prompts, cfg: CfgConfig = CfgConfig(), seed: int = 0,
                        mode: str = "offline", schedule: StreamSchedule = StreamSchedule(), guided=None,
                        generator=None):
    """Generate for each prompt and decode; returns ``(token_accuracy, proxy_error_rate)``.

    The error rate is the token edit distance over the reference length,
    summed over prompts. ``generator(prompt, index)`` may replace the model.
    """
    if generator is not None:
        sequences = [generator(p, i) for i, p in enumerate(prompts)]
    else:
        sequences = generate_all(model, prompts, cfg, seed, mode, schedule, guided)
    return score_transcripts(task, prompts, sequences)


def cfg_sweep(model: SledModel, task: TaskSpec, lams: Sequence[float], prompts, score_prompts=None,
              cfg: CfgConfig = CfgConfig(), seed: int = 0, schedule: StreamSchedule = StreamSchedule(),
              modes=("offline", "streaming"), positions=DEFAULT_POSITIONS, samples_per_step: int = 256) -> EvalReport:
    """Proxy error rate and per-step score for every (lam, mode) pair."""
    if not lams:
        raise ValueError("lam list is empty")
    report = EvalReport("cfg_sweep")
    score_prompts = prompts[:4] if score_prompts is None else score_prompts
    for lam in lams:
        run_cfg = CfgConfig(lam=float(lam), stop_threshold=cfg.stop_threshold, max_frames=cfg.max_frames,
                            stop_on=cfg.stop_on)
        for mode in modes:
            conf = f"lam={float(lam)!r};mode={mode}"
            acc, err = proxy_transcription(model, task, prompts, run_cfg, seed, mode, schedule)
            sched = None if mode == "offline" else (schedule.n_text, schedule.m_frames)
            scores = step_distribution_score(model, task, score_prompts, positions, samples_per_step, seed,
                                             lam=float(lam), schedule=sched)
            report.add(conf, "token_accuracy", acc)
            report.add(conf, "proxy_error_rate", err)
            report.add(conf, "step_score_max_ratio", max(s.score / s.noise_floor for s in scores))
            report.add(conf, "noise_floor_mean", float(np.mean([s.noise_floor for s in scores])))
    return report


def ablation_repulsive(task: TaskSpec, model_config, train_config: TrainConfig, prompts, source=None,
                       cfg: CfgConfig = CfgConfig(), seed: int = 0, spread_samples: int = 512,
                       log=None):
    """Train energy and rmse models from identical initial weights and compare.

    Returns ``(report, models)`` with ``models`` keyed by loss mode.
    """
    source = source or TaskSource(task, train_config.seed)
    report = EvalReport("ablation_repulsive")
    models = {}
    init_state = None
    for mode in ("energy", "rmse"):
        tc = TrainConfig(**{**train_config.__dict__, "loss_mode": mode})
        model = init_params(model_config, tc.seed)
        state = [p.detach().clone() for p in model.parameters()]
        if init_state is None:
            init_state = state
        elif any(not torch.equal(a, b) for a, b in zip(init_state, state)):
            raise AssertionError("ablation runs must start from identical parameters")
        trainer = Trainer(model, tc, source)
        trainer.run(log=log)
        models[mode] = trainer.model
        report.add(f"loss_mode={mode}", "initial_param_sha", _param_digest(state))
    oracle_spread = None
    for mode, model in models.items():
        acc, err = proxy_transcription(model, task, prompts, cfg, seed)
        spreads, o_spreads = [], []
        for i, p in enumerate(prompts[:8]):
            ms = first_position_samples(model, p, spread_samples, _mix_seed(seed, i, 0xAB))
            os_ = oracle_sample_next(task, p, np.zeros((0, task.latent_dim)), _mix_seed(seed, i, 0xAC),
                                     count=spread_samples)
            spreads.append(sample_spread(ms))
            o_spreads.append(sample_spread(os_))
        oracle_spread = float(np.mean(o_spreads))
        report.add(f"loss_mode={mode}", "token_accuracy", acc)
        report.add(f"loss_mode={mode}", "proxy_error_rate", err)
        report.add(f"loss_mode={mode}", "first_step_spread", float(np.mean(spreads)))
        report.add(f"loss_mode={mode}", "oracle_first_step_spread", oracle_spread)
    return report, models


def _param_digest(tensors) -> str:
    import hashlib

    h = hashlib.sha256()
    for t in tensors:
        h.update(t.detach().cpu().numpy().tobytes())
    return h.hexdigest()[:16]


# ---------------------------------------------------------------------------
# normality audit


@dataclass
class DimensionAudit:
    dim: int
    statistic: float
    p_value: float
    passed: bool
    degenerate: bool = False


def normality_audit(samples, alpha: float = 0.05) -> list[DimensionAudit]:
    """Per-dimension Jarque-Bera test from sample skewness and excess kurtosis.

    ``JB = n/6 * (S^2 + K^2/4)`` is asymptotically chi-square with two
    degrees of freedom, whose survival function is ``exp(-JB/2)``. A
    dimension passes when the p-value exceeds ``alpha``. Zero-variance
    dimensions are flagged as degenerate and fail.
    """
    X = np.asarray(samples, dtype=np.float64)
    if X.ndim == 1:
        X = X[:, None]
    n = X.shape[0]
    if n < 20:
        raise ValueError("normality audit needs at least 20 samples")
    out = []
    centred = X - X.mean(axis=0)
    m2 = (centred**2).mean(axis=0)
    m3 = (centred**3).mean(axis=0)
    m4 = (centred**4).mean(axis=0)
    scale = np.abs(X).max(axis=0) + 1e-300
    for k in range(X.shape[1]):
        if m2[k] <= (1e-12 * scale[k]) ** 2:
            out.append(DimensionAudit(k, float("nan"), 0.0, False, degenerate=True))
            continue
        skew = m3[k] / m2[k] ** 1.5
        kurt = m4[k] / m2[k] ** 2 - 3.0
        jb = n / 6.0 * (skew**2 + kurt**2 / 4.0)
        p = math.exp(-jb / 2.0)
        out.append(DimensionAudit(k, float(jb), p, p > alpha))
    return out


# ---------------------------------------------------------------------------
# throughput


@torch.no_grad()
def _decode_fixed(model: SledModel, prompts: np.ndarray, frames: int, cfg: CfgConfig, seeds):
    dec = _Decoder(model, cfg, seeds, guided=cfg.lam != 1.0)
    dec.feed_text(torch.from_numpy(prompts))
    for _ in range(frames):
        dec.step()
    dec.flush()


def throughput_bench(model: SledModel, batch_sizes: Sequence[int], frames: int = 64, cfg: CfgConfig = CfgConfig(),
                     prompt_tokens: int = 4, warmup: int = 2, reps: int = 5, seed: int = 0,
                     frame_rate: int = 75, threads: int = 1, clock=time.perf_counter) -> EvalReport:
    """Batched decoding of ``frames`` steps; median wall time over ``reps`` runs.

    ``rtf_proxy`` is wall time over the audio duration of all frames in the batch at
    ``frame_rate``. Failures (e.g. out of memory) are reported per batch size.
    """
    if any(b < 1 for b in batch_sizes):
        raise ValueError("batch sizes must be positive")
    report = EvalReport("throughput")
    previous_threads = torch.get_num_threads()
    torch.set_num_threads(threads)
    try:
        model.eval()
        rng = np.random.default_rng(seed)
        eot = model.config.eot_id
        for b in batch_sizes:
            conf = f"batch={b}"
            prompts = np.concatenate([rng.integers(0, eot, size=(b, prompt_tokens)), np.full((b, 1), eot)], axis=1)
            seeds = [_mix_seed(seed, b, i) for i in range(b)]
            try:
                for _ in range(warmup):
                    _decode_fixed(model, prompts, frames, cfg, seeds)
                times = []
                for _ in range(reps):
                    t0 = clock()
                    _decode_fixed(model, prompts, frames, cfg, seeds)
                    times.append(clock() - t0)
            except (RuntimeError, MemoryError) as exc:
                report.add(conf, "status", f"error:{type(exc).__name__}")
                continue
            wall = statistics.median(times)
            report.add(conf, "status", "ok")
            report.add(conf, "threads", threads)
            report.add(conf, "frames", frames)
            report.add(conf, "wall_ms", 1000.0 * wall)
            report.add(conf, "per_frame_ms", 1000.0 * wall / (b * frames))
            report.add(conf, "frames_per_sec", b * frames / wall)
            report.add(conf, "rtf_proxy", wall / (b * frames / frame_rate))
    finally:
        torch.set_num_threads(previous_threads)
    return report
