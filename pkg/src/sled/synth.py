"""Synthetic latent-sequence tasks with exactly known per-step conditionals.

A task maps each text token ``k`` to a centroid ``c_k`` in R^n. An utterance
for tokens ``k_0 .. k_{T-1}`` has ``T * m_f`` frames; frame ``j`` belongs to
token ``k_{j // m_f}`` and is

    h_j = c_k + s * delta + e_j,    e_j = rho * e_{j-1} + sigma * xi_j,

with ``e_{-1} = 0``, ``xi_j`` standard normal and one mode sign ``s`` in
{+1, -1} drawn per utterance. Given ``(s, e_{j-1})`` the next frame is
Gaussian; marginally over ``s`` the first frame is bimodal.

Token ids ``0 .. vocab_size - 1`` are text; ``vocab_size`` itself is the
end-of-text (EOT) id.
"""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

__all__ = [
    "TaskSpec",
    "LatentSequence",
    "SeparationError",
    "LatentFormatError",
    "make_task",
    "eot_id",
    "strip_eot",
    "random_prompt",
    "sample_utterance",
    "oracle_sample_next",
    "decode_tokens",
    "UNKNOWN_TOKEN",
    "write_latents",
    "read_latents",
    "write_dataset",
    "read_dataset",
]

SLAT_MAGIC = b"SLAT"
SLAT_VERSION = 1
_SLAT_HEADER = struct.Struct("<4sHHHI")

#: Decoded id for a block or frame that matches no (centroid, sign) mode.
UNKNOWN_TOKEN = -1

# Largest factor by which centroids may be stretched to meet separation.
_MAX_RESCALE = 1e3


class SeparationError(ValueError):
    """The centroid separation invariant cannot be met."""


class LatentFormatError(ValueError):
    """Malformed or truncated SLAT file."""


@dataclass(frozen=True, eq=False)
class TaskSpec:
    vocab_size: int
    latent_dim: int
    frames_per_token: int
    centroids: np.ndarray
    mode_offset: np.ndarray
    ar_coeff: float
    noise_scale: float
    seed: int

    @property
    def eot(self) -> int:
        return self.vocab_size

    @property
    def delta_norm(self) -> float:
        return float(np.linalg.norm(self.mode_offset))

    @property
    def delta_unit(self) -> np.ndarray:
        norm = self.delta_norm
        if norm == 0.0:
            return np.zeros_like(self.mode_offset)
        return self.mode_offset / norm

    def to_bytes(self) -> bytes:
        head = json.dumps(
            {
                "vocab_size": self.vocab_size,
                "latent_dim": self.latent_dim,
                "frames_per_token": self.frames_per_token,
                "ar_coeff": self.ar_coeff,
                "noise_scale": self.noise_scale,
                "seed": self.seed,
            },
            sort_keys=True,
            separators=(",", ":"),
        ).encode()
        return head + self.centroids.astype("<f8").tobytes() + self.mode_offset.astype("<f8").tobytes()

    def digest(self) -> str:
        return hashlib.sha256(self.to_bytes()).hexdigest()

    def __eq__(self, other):
        return isinstance(other, TaskSpec) and self.to_bytes() == other.to_bytes()

    def __hash__(self):
        return hash(self.to_bytes())


@dataclass(eq=False)
class LatentSequence:
    """Frames of one utterance, stored as float32 ``(count, dim)``."""

    frames: np.ndarray
    frame_rate: int = 75
    stopped: bool = True

    def __post_init__(self):
        frames = np.asarray(self.frames, dtype=np.float32)
        if frames.ndim != 2:
            raise ValueError(f"frames must be 2-D (count, dim), got shape {frames.shape}")
        if not np.all(np.isfinite(frames)):
            raise ValueError("frames must be finite")
        self.frames = np.ascontiguousarray(frames)

    @classmethod
    def empty(cls, dim: int, frame_rate: int = 75) -> "LatentSequence":
        return cls(np.zeros((0, dim), dtype=np.float32), frame_rate, stopped=False)

    @property
    def dim(self) -> int:
        return self.frames.shape[1]

    def __len__(self):
        return self.frames.shape[0]

    def __eq__(self, other):
        return (
            isinstance(other, LatentSequence)
            and self.frame_rate == other.frame_rate
            and self.stopped == other.stopped
            and self.frames.shape == other.frames.shape
            and self.frames.tobytes() == other.frames.tobytes()
        )


def make_task(
    seed: int = 0,
    vocab_size: int = 16,
    latent_dim: int = 16,
    frames_per_token: int = 8,
    ar_coeff: float = 0.8,
    noise_scale: float = 0.05,
    mode_offset: float = 0.5,
) -> TaskSpec:
    """Build a task deterministically from ``seed``.

    Centroids are standard normal; if their minimum pairwise distance is not
    above ``4 * noise_scale`` they are stretched until it is.
    """
    if vocab_size < 1 or latent_dim < 1 or frames_per_token < 1:
        raise ValueError("vocab_size, latent_dim and frames_per_token must be >= 1")
    if not (0.0 <= ar_coeff < 1.0):
        raise ValueError(f"ar_coeff must lie in [0, 1), got {ar_coeff}")
    if noise_scale < 0.0 or mode_offset < 0.0:
        raise ValueError("noise_scale and mode_offset must be >= 0")

    rng = np.random.default_rng(seed)
    centroids = rng.standard_normal((vocab_size, latent_dim))
    direction = rng.standard_normal(latent_dim)
    direction /= np.linalg.norm(direction)

    required = 4.0 * noise_scale
    if vocab_size > 1 and required > 0.0:
        diffs = centroids[:, None, :] - centroids[None, :, :]
        dist = np.sqrt((diffs**2).sum(-1))
        min_dist = dist[np.triu_indices(vocab_size, 1)].min()
        if min_dist <= required:
            factor = 1.25 * required / min_dist if min_dist > 0 else np.inf
            if factor > _MAX_RESCALE:
                raise SeparationError(
                    f"cannot separate {vocab_size} centroids in R^{latent_dim} by more than {required:g}"
                )
            centroids *= factor

    return TaskSpec(
        vocab_size=vocab_size,
        latent_dim=latent_dim,
        frames_per_token=frames_per_token,
        centroids=centroids,
        mode_offset=direction * mode_offset,
        ar_coeff=float(ar_coeff),
        noise_scale=float(noise_scale),
        seed=int(seed),
    )


def eot_id(task: TaskSpec) -> int:
    return task.eot


def strip_eot(task: TaskSpec, tokens) -> list[int]:
    """Validate a prompt and return its text tokens (a trailing EOT removed)."""
    tokens = [int(t) for t in tokens]
    if not tokens:
        raise ValueError("prompt is empty")
    if tokens[-1] == task.eot:
        tokens = tokens[:-1]
    for t in tokens:
        if t == task.eot:
            raise ValueError("EOT may only appear once, at the end of the prompt")
        if not (0 <= t < task.vocab_size):
            raise ValueError(f"unknown token id {t}")
    if not tokens:
        raise ValueError("prompt has no text tokens")
    return tokens


def random_prompt(task: TaskSpec, rng: np.random.Generator, min_tokens=3, max_tokens=6) -> list[int]:
    length = int(rng.integers(min_tokens, max_tokens + 1))
    return [int(t) for t in rng.integers(0, task.vocab_size, size=length)]


def _simulate(task: TaskSpec, tokens, rng: np.random.Generator):
    """Return frames (float64), the mode sign and the AR residuals ``e``."""
    tokens = strip_eot(task, tokens)
    total = len(tokens) * task.frames_per_token
    sign = 1.0 if rng.random() < 0.5 else -1.0
    xi = rng.standard_normal((total, task.latent_dim))
    resid = np.empty_like(xi)
    prev = np.zeros(task.latent_dim)
    for j in range(total):
        prev = task.ar_coeff * prev + task.noise_scale * xi[j]
        resid[j] = prev
    block = np.repeat(np.asarray(tokens), task.frames_per_token)
    frames = task.centroids[block] + sign * task.mode_offset + resid
    return frames, sign, resid


def sample_utterance(task: TaskSpec, tokens, seed: int, frame_rate: int = 75) -> LatentSequence:
    frames, _, _ = _simulate(task, tokens, np.random.default_rng(seed))
    return LatentSequence(frames, frame_rate=frame_rate, stopped=True)


def infer_state(task: TaskSpec, tokens, history: np.ndarray):
    """Recover ``(sign, e_{j-1})`` from the frames generated so far."""
    tokens = strip_eot(task, tokens)
    history = np.asarray(history, dtype=np.float64)
    m_f = task.frames_per_token
    if len(history) == 0:
        return None, np.zeros(task.latent_dim)
    first = history[0] - task.centroids[tokens[0]]
    sign = 1.0 if float(first @ task.delta_unit) >= 0.0 else -1.0
    last = len(history) - 1
    resid = history[last] - task.centroids[tokens[last // m_f]] - sign * task.mode_offset
    return sign, resid


def oracle_sample_next(task: TaskSpec, tokens, history, seed: int, count: int | None = None) -> np.ndarray:
    """Draw from the exact conditional of the next frame given ``history``.

    Returns one frame ``(n,)``, or ``(count, n)`` independent draws. At the
    first frame the mode sign is resampled per draw.
    """
    tokens = strip_eot(task, tokens)
    frames = history.frames if isinstance(history, LatentSequence) else np.asarray(history)
    frames = np.asarray(frames, dtype=np.float64).reshape(-1, task.latent_dim)
    j = len(frames)
    if j >= len(tokens) * task.frames_per_token:
        raise ValueError(f"history of {j} frames already covers the utterance")
    rng = np.random.default_rng(seed)
    draws = 1 if count is None else int(count)
    sign, prev = infer_state(task, tokens, frames)
    if sign is None:
        signs = np.where(rng.random(draws) < 0.5, 1.0, -1.0)[:, None]
    else:
        signs = np.full((draws, 1), sign)
    xi = rng.standard_normal((draws, task.latent_dim))
    centroid = task.centroids[tokens[j // task.frames_per_token]]
    out = centroid + signs * task.mode_offset + task.ar_coeff * prev + task.noise_scale * xi
    return out[0] if count is None else out


def classify_frames(task: TaskSpec, frames, reject_off_mode: bool = True) -> np.ndarray:
    """Nearest-centroid label per frame, or UNKNOWN_TOKEN for off-mode frames.

    Each frame is compared with ``c_k + delta`` and ``c_k - delta`` and
    takes the nearest ``k`` (lowest index on ties). With ``reject_off_mode``
    and ``delta != 0``, a frame whose offset from its centroid projects onto
    ``delta`` by less than ``|delta| / 2`` in magnitude fits neither mode
    and is rejected.
    """
    frames = np.asarray(frames, dtype=np.float64)
    modes = np.stack([task.centroids + task.mode_offset, task.centroids - task.mode_offset], axis=1)
    diffs = frames[:, None, None, :] - modes[None, :, :, :]
    dist = (diffs**2).sum(-1).reshape(len(frames), -1)
    labels = np.argmin(dist, axis=1) // 2
    if reject_off_mode and task.delta_norm > 0.0:
        proj = ((frames - task.centroids[labels]) @ task.delta_unit)
        labels = np.where(np.abs(proj) < 0.5 * task.delta_norm, UNKNOWN_TOKEN, labels)
    return labels


def _majority(labels) -> int:
    values, counts = np.unique(labels, return_counts=True)
    best = counts.max()
    winners = [int(v) for v, c in zip(values, counts) if c == best]
    known = [w for w in winners if w != UNKNOWN_TOKEN]
    return min(known) if known else UNKNOWN_TOKEN


def decode_tokens(task: TaskSpec, latents, reject_off_mode: bool = True) -> tuple[list[int], float]:
    """Transcribe frames back into tokens by block-wise majority vote.

    Blocks are ``frames_per_token`` long; a trailing partial block counts
    if it holds at least half a block. ``frame_accuracy`` is the fraction
    of frames (in counted blocks) whose own label equals their block's.
    """
    frames = latents.frames if isinstance(latents, LatentSequence) else np.asarray(latents)
    if frames.ndim != 2 or len(frames) == 0:
        raise ValueError("cannot decode an empty sequence")
    if frames.shape[1] != task.latent_dim:
        raise ValueError(f"frame dim {frames.shape[1]} != task latent dim {task.latent_dim}")
    m_f = task.frames_per_token
    labels = classify_frames(task, frames, reject_off_mode)
    tokens, hits, counted = [], 0, 0
    for start in range(0, len(labels), m_f):
        block = labels[start : start + m_f]
        if len(block) < m_f and 2 * len(block) < m_f:
            break
        token = _majority(block)
        tokens.append(token)
        counted += len(block)
        if token != UNKNOWN_TOKEN:
            hits += int(np.sum(block == token))
    return tokens, (hits / counted if counted else 0.0)


def write_latents(path, seq: LatentSequence) -> None:
    frames = np.ascontiguousarray(seq.frames, dtype="<f4")
    count, dim = frames.shape
    if dim > 0xFFFF or seq.frame_rate > 0xFFFF or count > 0xFFFFFFFF:
        raise LatentFormatError("sequence does not fit the SLAT header fields")
    with open(path, "wb") as fh:
        fh.write(_SLAT_HEADER.pack(SLAT_MAGIC, SLAT_VERSION, dim, seq.frame_rate, count))
        fh.write(frames.tobytes())


def read_latents(path) -> LatentSequence:
    with open(path, "rb") as fh:
        head = fh.read(_SLAT_HEADER.size)
        if len(head) != _SLAT_HEADER.size:
            raise LatentFormatError(f"{path}: truncated header")
        magic, version, dim, frame_rate, count = _SLAT_HEADER.unpack(head)
        if magic != SLAT_MAGIC:
            raise LatentFormatError(f"{path}: bad magic {magic!r}")
        if version != SLAT_VERSION:
            raise LatentFormatError(f"{path}: unsupported version {version}")
        expected = count * dim * 4
        payload = fh.read(expected)
        if len(payload) != expected:
            raise LatentFormatError(
                f"{path}: length error, header declares {count} frames but payload has {len(payload)} of {expected} bytes"
            )
        if fh.read(1):
            raise LatentFormatError(f"{path}: length error, trailing bytes after {count} frames")
    frames = np.frombuffer(payload, dtype="<f4").reshape(count, dim).astype(np.float32)
    return LatentSequence(frames, frame_rate=frame_rate, stopped=True)


class SlatStreamWriter:
    """Append frames to a SLAT file; the frame count is patched on close."""

    def __init__(self, path, dim: int, frame_rate: int = 75):
        self.path = Path(path)
        self.dim = dim
        self.frame_rate = frame_rate
        self.count = 0
        self._fh = open(self.path, "wb")
        self._fh.write(_SLAT_HEADER.pack(SLAT_MAGIC, SLAT_VERSION, dim, frame_rate, 0))

    def write(self, frame) -> None:
        frame = np.ascontiguousarray(frame, dtype="<f4").reshape(-1)
        if frame.shape[0] != self.dim:
            raise ValueError(f"frame dim {frame.shape[0]} != {self.dim}")
        self._fh.write(frame.tobytes())
        self._fh.flush()
        self.count += 1

    def close(self) -> None:
        if self._fh.closed:
            return
        self._fh.seek(0)
        self._fh.write(_SLAT_HEADER.pack(SLAT_MAGIC, SLAT_VERSION, self.dim, self.frame_rate, self.count))
        self._fh.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


@dataclass
class Dataset:
    prompts: list[list[int]]
    utterances: list[LatentSequence] = field(default_factory=list)

    def __len__(self):
        return len(self.prompts)


def write_dataset(out_dir, task: TaskSpec, count: int, seed: int, min_tokens=3, max_tokens=6, extra_manifest=None):
    """Write ``count`` utterances as SLAT files plus ``tokens.txt`` and ``manifest.json``."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(seed)
    lines = []
    for i in range(count):
        prompt = random_prompt(task, rng, min_tokens, max_tokens)
        utt_seed = int(rng.integers(0, 2**63 - 1))
        write_latents(out / f"utt_{i:06d}.slat", sample_utterance(task, prompt, utt_seed))
        lines.append(" ".join(str(t) for t in prompt))
    (out / "tokens.txt").write_text("\n".join(lines) + "\n", encoding="ascii")
    manifest = {
        "count": count,
        "seed": seed,
        "task_seed": task.seed,
        "task_sha256": task.digest(),
        "min_tokens": min_tokens,
        "max_tokens": max_tokens,
    }
    if extra_manifest:
        manifest.update(extra_manifest)
    (out / "manifest.json").write_text(json.dumps(manifest, sort_keys=True, indent=2) + "\n")
    return manifest


def read_token_file(path) -> list[list[int]]:
    prompts = []
    for line in Path(path).read_text(encoding="ascii").splitlines():
        line = line.strip()
        if line:
            prompts.append([int(tok) for tok in line.split()])
    return prompts


def read_dataset(data_dir) -> Dataset:
    root = Path(data_dir)
    prompts = read_token_file(root / "tokens.txt")
    utterances = [read_latents(root / f"utt_{i:06d}.slat") for i in range(len(prompts))]
    return Dataset(prompts, utterances)
