"""Energy-distance training for the continuous autoregressive model.

For each position that emits a frame, two noise draws give two head samples
``h`` and ``h'``; the per-position loss is

    2 * ||h - h*|| - ||h - h'||

with the smoothed norm ``sqrt(||v||^2 + eps_s)``. The ``rmse`` loss mode
keeps only the first (attraction) term with a single draw.
"""

from __future__ import annotations

import csv
import dataclasses
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
import torch
import torch.nn.functional as F

from .model import SledModel, init_params, load_checkpoint, save_checkpoint
from .synth import Dataset, TaskSpec, _simulate, random_prompt

__all__ = [
    "TrainConfig",
    "TrainingBatch",
    "Collated",
    "stream_layout",
    "mask_prompts",
    "collate",
    "energy_terms",
    "loss_energy",
    "loss_rmse",
    "loss_stop",
    "lr_at",
    "Trainer",
    "GradCheckResult",
    "grad_check",
    "model_grad_check",
    "TaskSource",
    "DatasetSource",
    "METRIC_FIELDS",
    "NonFiniteLossError",
]

METRIC_FIELDS = ("step", "loss", "attraction", "repulsion", "stop_loss", "lr", "grad_norm")


class NonFiniteLossError(FloatingPointError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    loss_mode: str = "energy"
    lr: float = 3e-4
    warmup_steps: int = 200
    total_steps: int = 5000
    batch_size: int = 32
    grad_clip: float = 1.0
    cfg_mask_prob: float = 0.1
    stop_loss_weight: float = 1.0
    norm_smoothing: float = 1e-8
    weight_decay: float = 0.01
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    interleave_prob: float = 0.5
    stream_schedule: tuple = (5, 20)
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "stream_schedule", tuple(int(v) for v in self.stream_schedule))
        errors = self.validation_errors()
        if errors:
            raise ValueError("; ".join(errors))

    def validation_errors(self) -> list[str]:
        errors = []
        if self.loss_mode not in ("energy", "rmse"):
            errors.append(f"train.loss_mode must be 'energy' or 'rmse', got {self.loss_mode!r}")
        if not (0.0 <= self.cfg_mask_prob <= 1.0):
            errors.append("train.cfg_mask_prob must lie in [0, 1]")
        if not (0.0 <= self.interleave_prob <= 1.0):
            errors.append("train.interleave_prob must lie in [0, 1]")
        if self.lr < 0:
            errors.append("train.lr must be >= 0")
        if self.warmup_steps < 0 or self.total_steps < 1:
            errors.append("train.warmup_steps must be >= 0 and train.total_steps >= 1")
        if self.batch_size < 1:
            errors.append("train.batch_size must be >= 1")
        if self.grad_clip <= 0:
            errors.append("train.grad_clip must be positive")
        if self.norm_smoothing < 0:
            errors.append("train.norm_smoothing must be >= 0")
        if len(self.stream_schedule) != 2 or min(self.stream_schedule) < 1:
            errors.append("train.stream_schedule must be two positive integers")
        return errors

    @classmethod
    def large_scale(cls, **overrides) -> "TrainConfig":
        base = dict(lr=5e-4, warmup_steps=32000, total_steps=300000, batch_size=512)
        base.update(overrides)
        return cls(**base)


def _mix_seed(*parts) -> int:
    return int(np.random.SeedSequence([int(p) & 0xFFFFFFFFFFFFFFFF for p in parts]).generate_state(1, np.uint64)[0])


def _torch_gen(*parts) -> torch.Generator:
    return torch.Generator().manual_seed(_mix_seed(*parts) & 0x7FFFFFFFFFFFFFFF)


# ---------------------------------------------------------------------------
# data


@dataclass
class TrainingBatch:
    prompts: list[list[int]]
    targets: list[np.ndarray]
    masked: list[bool] = field(default_factory=list)
    interleaved: list[bool] = field(default_factory=list)

    def __post_init__(self):
        if not self.masked:
            self.masked = [False] * len(self.prompts)
        if not self.interleaved:
            self.interleaved = [False] * len(self.prompts)

    def __len__(self):
        return len(self.prompts)


class TaskSource:
    """Fresh utterances drawn from the task; item ``i`` of step ``s`` is seeded by (seed, s, i)."""

    def __init__(self, task: TaskSpec, seed: int = 0, min_tokens: int = 3, max_tokens: int = 6):
        self.task = task
        self.seed = seed
        self.min_tokens = min_tokens
        self.max_tokens = max_tokens

    def batch(self, step: int, size: int) -> TrainingBatch:
        prompts, targets = [], []
        for i in range(size):
            rng = np.random.default_rng([self.seed, step, i])
            prompt = random_prompt(self.task, rng, self.min_tokens, self.max_tokens)
            frames, _, _ = _simulate(self.task, prompt, rng)
            prompts.append(prompt)
            targets.append(frames.astype(np.float32))
        return TrainingBatch(prompts, targets)


class DatasetSource:
    """Utterances sampled with replacement from an on-disk dataset."""

    def __init__(self, dataset: Dataset, seed: int = 0):
        self.dataset = dataset
        self.seed = seed

    def batch(self, step: int, size: int) -> TrainingBatch:
        rng = np.random.default_rng([self.seed, step])
        idx = rng.integers(0, len(self.dataset), size=size)
        return TrainingBatch(
            [list(self.dataset.prompts[i]) for i in idx],
            [self.dataset.utterances[i].frames for i in idx],
        )


def mask_prompts(batch: TrainingBatch, p: float, seed: int) -> TrainingBatch:
    """Flag each item as prompt-masked with probability ``p`` (item-level, independent)."""
    if not (0.0 <= p <= 1.0):
        raise ValueError(f"mask probability must lie in [0, 1], got {p}")
    rng = np.random.default_rng([seed, 0x4D41534B])
    flags = (rng.random(len(batch)) < p).tolist()
    return dataclasses.replace(batch, masked=[bool(f) for f in flags])


@dataclass
class Layout:
    """One training stream: input items plus per-position prediction targets.

    ``kinds`` holds 0 (text), 1 (eot), 2 (frame); ``values`` the token id
    or the index of the input frame. ``target[t]`` is the index of the frame
    predicted from position ``t`` (or -1), ``decide[t]`` whether a stop
    decision is made there.
    """

    kinds: list[int]
    values: list[int]
    target: list[int]
    decide: list[bool]


def stream_layout(prompt: Sequence[int], num_frames: int, eot: int, schedule=None, masked=False) -> Layout:
    """Order text, EOT and frame positions as the sampler will consume them.

    Offline: ``text.. EOT f0 .. f_{F-2}``. Masked: ``EOT f0 ..``. With an
    ``(n, m)`` schedule, every full group of ``n`` tokens is followed by
    ``m`` frames; leftover tokens are followed by EOT and free-running
    frames. Stop decisions are only made after EOT.
    """
    if num_frames < 1:
        raise ValueError("an utterance needs at least one frame")
    kinds, values, target, decide = [], [], [], []
    next_frame = 0

    def feed(kind, value):
        kinds.append(kind)
        values.append(value)
        target.append(-1)
        decide.append(False)

    def emit(count, post_eot):
        # Frame i is predicted from the last position, then fed back (except
        # the final frame of the utterance, which is never an input).
        nonlocal next_frame
        for _ in range(count):
            if next_frame >= num_frames:
                raise ValueError("schedule emits more frames before EOT than the utterance holds")
            target[-1] = next_frame
            decide[-1] = post_eot
            if next_frame + 1 < num_frames:
                feed(2, next_frame)
            next_frame += 1

    text = [] if masked else list(prompt)
    if schedule is None or masked:
        for tok in text:
            feed(0, tok)
    else:
        n_text, m_frames = schedule
        full = (len(text) // n_text) * n_text
        for start in range(0, full, n_text):
            for tok in text[start : start + n_text]:
                feed(0, tok)
            emit(m_frames, post_eot=False)
        for tok in text[full:]:
            feed(0, tok)
        if next_frame >= num_frames:
            raise ValueError("utterance exhausted before EOT")
    feed(1, eot)
    emit(num_frames - next_frame, post_eot=True)
    return Layout(kinds, values, target, decide)


@dataclass
class Collated:
    tokens: torch.Tensor      # (B, T) long
    frames: torch.Tensor      # (B, T, n) inputs at frame positions
    is_frame: torch.Tensor    # (B, T) bool
    predict: torch.Tensor     # (B, T) bool, positions that emit a frame
    target: torch.Tensor      # (B, T, n)
    stop_label: torch.Tensor  # (B, T)
    decide: torch.Tensor      # (B, T) bool, positions with a stop decision

    @property
    def batch_size(self) -> int:
        return self.tokens.shape[0]

    def to(self, dtype) -> "Collated":
        return dataclasses.replace(self, frames=self.frames.to(dtype), target=self.target.to(dtype),
                                   stop_label=self.stop_label.to(dtype))


def collate(batch: TrainingBatch, eot: int, schedule=(5, 20), dtype=torch.float32) -> Collated:
    layouts = []
    for prompt, frames, masked, inter in zip(batch.prompts, batch.targets, batch.masked, batch.interleaved):
        layouts.append(stream_layout(prompt, len(frames), eot, schedule if inter else None, masked))
    B = len(layouts)
    T = max(len(l.kinds) for l in layouts)
    n = batch.targets[0].shape[1]
    tokens = np.zeros((B, T), dtype=np.int64)
    frames = np.zeros((B, T, n), dtype=np.float32)
    is_frame = np.zeros((B, T), dtype=bool)
    predict = np.zeros((B, T), dtype=bool)
    target = np.zeros((B, T, n), dtype=np.float32)
    stop_label = np.zeros((B, T), dtype=np.float32)
    decide = np.zeros((B, T), dtype=bool)
    for b, (layout, tgt) in enumerate(zip(layouts, batch.targets)):
        L = len(layout.kinds)
        kinds = np.asarray(layout.kinds)
        values = np.asarray(layout.values)
        fr = kinds == 2
        tokens[b, :L] = np.where(fr, 0, values)
        is_frame[b, :L] = fr
        frames[b, :L][fr] = tgt[values[fr]]
        tix = np.asarray(layout.target)
        pr = tix >= 0
        predict[b, :L] = pr
        target[b, :L][pr] = tgt[tix[pr]]
        decide[b, :L] = np.asarray(layout.decide)
        stop_label[b, :L] = (tix == len(tgt) - 1).astype(np.float32)
    return Collated(
        torch.from_numpy(tokens), torch.from_numpy(frames).to(dtype), torch.from_numpy(is_frame),
        torch.from_numpy(predict), torch.from_numpy(target).to(dtype), torch.from_numpy(stop_label).to(dtype),
        torch.from_numpy(decide),
    )


# ---------------------------------------------------------------------------
# losses


def smoothed_norm(v: torch.Tensor, eps_s: float) -> torch.Tensor:
    return torch.sqrt((v * v).sum(-1) + eps_s)


def energy_terms(h, h_prime, target, eps_s: float):
    """Per-position ``(attraction, repulsion)``: ``2||h - h*||`` and ``||h - h'||``."""
    attraction = 2.0 * smoothed_norm(h - target, eps_s)
    repulsion = smoothed_norm(h - h_prime, eps_s)
    return attraction, repulsion


@dataclass
class LossOutput:
    total: torch.Tensor
    main: torch.Tensor
    attraction: torch.Tensor
    repulsion: torch.Tensor
    stop: torch.Tensor
    per_step: dict


def _features(model: SledModel, col: Collated) -> torch.Tensor:
    return model.backbone(model.embed(col.tokens, col.frames, col.is_frame))


def _noise(col: Collated, draws: int, dim: int, seed: int, dtype) -> torch.Tensor:
    count = int(col.predict.sum())
    gen = _torch_gen(seed, 0x4E4F495345)
    return torch.randn(draws, count, dim, generator=gen, dtype=torch.float64).to(dtype)


def _terms(model: SledModel, col: Collated, seed: int, eps_s: float, draws: int, z=None):
    if z is None:
        z = _features(model, col)
    zp = z[col.predict]
    tgt = col.target[col.predict]
    # Always draw two noise sets so a single-draw loss reuses the first one.
    eps = _noise(col, 2, model.config.noise_dim, seed, z.dtype)[:draws]
    h_all = model.head(zp.repeat(draws, 1), eps.reshape(-1, eps.shape[-1]))
    h = h_all[: len(zp)]
    h_prime = h_all[len(zp):] if draws == 2 else h.detach()
    attraction, repulsion = energy_terms(h, h_prime, tgt, eps_s)
    return z, h, h_prime, attraction, repulsion


def loss_energy(model: SledModel, col: Collated, seed: int, eps_s: float = 1e-8, z=None):
    """Energy loss summed over positions, averaged over the batch.

    Returns ``(loss, diagnostics)``; diagnostics hold the attraction and
    repulsion sums and the per-position terms.
    """
    z, h, h_prime, attraction, repulsion = _terms(model, col, seed, eps_s, draws=2, z=z)
    B = col.batch_size
    loss = (attraction - repulsion).sum() / B
    diag = {
        "attraction": attraction.sum() / B,
        "repulsion": repulsion.sum() / B,
        "per_step_attraction": attraction.detach(),
        "per_step_repulsion": repulsion.detach(),
        "h": h.detach(),
        "h_prime": h_prime.detach(),
        "z": z,
    }
    if not torch.isfinite(loss):
        raise NonFiniteLossError(f"non-finite energy loss: attraction={float(diag['attraction'])}, "
                                 f"repulsion={float(diag['repulsion'])}")
    return loss, diag


def loss_rmse(model: SledModel, col: Collated, seed: int, eps_s: float = 1e-8, z=None):
    """Attraction term only: the energy loss with the repulsive term removed.

    Uses the same first noise draw as :func:`loss_energy` for a given seed.
    """
    z, h, _, attraction, _ = _terms(model, col, seed, eps_s, draws=1, z=z)
    B = col.batch_size
    loss = attraction.sum() / B
    if not torch.isfinite(loss):
        raise NonFiniteLossError(f"non-finite rmse loss: {float(loss)}")
    return loss, {"attraction": loss, "repulsion": torch.zeros((), dtype=loss.dtype),
                  "per_step_attraction": attraction.detach(), "h": h.detach(), "z": z}


def loss_stop(model: SledModel, col: Collated, z=None) -> torch.Tensor:
    """Mean binary cross-entropy of the stop head over decision positions."""
    if z is None:
        z = _features(model, col)
    logits = model.stop_logit(z)[col.decide]
    labels = col.stop_label[col.decide]
    if logits.numel() == 0:
        return torch.zeros((), dtype=z.dtype)
    return F.binary_cross_entropy_with_logits(logits, labels, reduction="mean")


def compute_losses(model: SledModel, col: Collated, seed: int, config: TrainConfig) -> LossOutput:
    z = _features(model, col)
    if config.loss_mode == "energy":
        main, diag = loss_energy(model, col, seed, config.norm_smoothing, z=z)
    else:
        main, diag = loss_rmse(model, col, seed, config.norm_smoothing, z=z)
    stop = loss_stop(model, col, z=z)
    total = main + config.stop_loss_weight * stop
    return LossOutput(total, main, diag["attraction"], diag["repulsion"], stop, diag)


def lr_at(step: int, config: TrainConfig) -> float:
    """Linear warm-up from 0 to the peak, then linear decay to 0 at ``total_steps``."""
    if step <= 0:
        return 0.0
    if step <= config.warmup_steps:
        return config.lr * step / config.warmup_steps
    if step >= config.total_steps:
        return 0.0
    return config.lr * (config.total_steps - step) / (config.total_steps - config.warmup_steps)


# ---------------------------------------------------------------------------
# optimisation


def _make_optimizer(model: SledModel, config: TrainConfig) -> torch.optim.AdamW:
    return torch.optim.AdamW(
        model.parameters(), lr=0.0, betas=(config.adam_beta1, config.adam_beta2),
        eps=config.adam_eps, weight_decay=config.weight_decay, foreach=False,
    )


def _optimizer_tensors(model, optimizer) -> tuple[list[torch.Tensor], int]:
    tensors, steps = [], 0
    for p in model.parameters():
        state = optimizer.state.get(p)
        if not state:
            return [], 0
        tensors += [state["exp_avg"], state["exp_avg_sq"]]
        steps = int(state["step"])
    return tensors, steps


def _restore_optimizer(model, optimizer, tensors, steps):
    if not tensors:
        return
    params = list(model.parameters())
    if len(tensors) != 2 * len(params):
        raise ValueError("optimizer state does not match the model")
    for i, p in enumerate(params):
        optimizer.state[p] = {
            "step": torch.tensor(float(steps)),
            "exp_avg": tensors[2 * i].clone().to(p.dtype),
            "exp_avg_sq": tensors[2 * i + 1].clone().to(p.dtype),
        }


class Trainer:
    """Single-writer optimisation loop with a deterministic metrics stream."""

    def __init__(self, model: SledModel, config: TrainConfig, source, step: int = 0):
        self.model = model
        self.config = config
        self.source = source
        self.step = step
        self.optimizer = _make_optimizer(model, config)

    @classmethod
    def from_checkpoint(cls, path, config: TrainConfig, source) -> "Trainer":
        ckpt = load_checkpoint(path)
        trainer = cls(ckpt.model, config, source, step=ckpt.step)
        _restore_optimizer(trainer.model, trainer.optimizer, ckpt.optimizer_state, ckpt.extra.get("optimizer_steps", 0))
        return trainer

    def make_batch(self, step: int) -> Collated:
        cfg = self.config
        batch = self.source.batch(step, cfg.batch_size)
        batch = mask_prompts(batch, cfg.cfg_mask_prob, _mix_seed(cfg.seed, step, 1))
        rng = np.random.default_rng([cfg.seed, step, 2])
        batch.interleaved = (rng.random(len(batch)) < cfg.interleave_prob).tolist()
        return collate(batch, self.model.config.eot_id, cfg.stream_schedule, self.model.dtype)

    def train_step(self, col: Collated | None = None) -> dict:
        cfg = self.config
        step = self.step
        if step >= cfg.total_steps:
            raise ValueError(f"step {step} is past total_steps={cfg.total_steps}")
        if col is None:
            col = self.make_batch(step)
        self.model.train()
        torch.manual_seed(_mix_seed(cfg.seed, step, 3) & 0x7FFFFFFFFFFFFFFF)  # dropout only
        out = compute_losses(self.model, col, _mix_seed(cfg.seed, step, 4), cfg)
        self.optimizer.zero_grad(set_to_none=True)
        out.total.backward()
        grads = [p.grad for p in self.model.parameters() if p.grad is not None]
        if not all(torch.all(torch.isfinite(g)) for g in grads):
            raise NonFiniteLossError(f"non-finite gradients at step {step}")
        grad_norm = float(torch.nn.utils.clip_grad_norm_(self.model.parameters(), cfg.grad_clip))
        lr = lr_at(step, cfg)
        for group in self.optimizer.param_groups:
            group["lr"] = lr
        self.optimizer.step()
        self.model.eval()
        self.step += 1
        return {
            "step": step,
            "loss": float(out.total.detach()),
            "attraction": float(out.attraction.detach()),
            "repulsion": float(out.repulsion.detach()),
            "stop_loss": float(out.stop.detach()),
            "lr": lr,
            "grad_norm": grad_norm,
        }

    def save(self, path) -> None:
        tensors, steps = _optimizer_tensors(self.model, self.optimizer)
        save_checkpoint(path, self.model, self.step, tensors, extra={"optimizer_steps": steps})

    def run(self, steps: int | None = None, metrics_path=None, checkpoint_path=None, checkpoint_every: int = 0,
            log: Callable[[dict], None] | None = None) -> list[dict]:
        """Train until ``total_steps`` (or ``steps`` more); append metrics as CSV."""
        end = self.config.total_steps if steps is None else min(self.config.total_steps, self.step + steps)
        rows = []
        fh = None
        if metrics_path is not None:
            path = Path(metrics_path)
            fresh = not path.exists() or path.stat().st_size == 0
            fh = open(path, "a", newline="")
            writer = csv.writer(fh, lineterminator="\n")
            if fresh:
                writer.writerow(METRIC_FIELDS)
        try:
            while self.step < end:
                row = self.train_step()
                rows.append(row)
                if fh is not None:
                    writer.writerow([format_metric(row[k]) for k in METRIC_FIELDS])
                if log is not None:
                    log(row)
                if checkpoint_path and checkpoint_every and self.step % checkpoint_every == 0:
                    self.save(checkpoint_path)
        finally:
            if fh is not None:
                fh.close()
        if checkpoint_path:
            self.save(checkpoint_path)
        return rows


def format_metric(value) -> str:
    if isinstance(value, int):
        return str(value)
    return repr(float(value))


def train_model(model_config, train_config: TrainConfig, source, init_seed: int | None = None, **run_kwargs):
    model = init_params(model_config, train_config.seed if init_seed is None else init_seed)
    trainer = Trainer(model, train_config, source)
    trainer.run(**run_kwargs)
    return trainer


# ---------------------------------------------------------------------------
# gradient verification


@dataclass
class GradCheckResult:
    max_rel_error: float
    per_tensor: dict
    flagged: list = field(default_factory=list)
    checked: int = 0


def grad_check(loss_fn: Callable[[], torch.Tensor], params: dict, coords_per_tensor: int = 64,
               step: float = 1e-5, seed: int = 0, abs_floor: float = 1e-8) -> GradCheckResult:
    """Compare autograd gradients with central finite differences.

    ``loss_fn`` must be deterministic (frozen noise). ``params`` maps names
    to float64 leaf tensors. Coordinates whose analytic gradient is not
    finite are reported in ``flagged`` instead of entering the error.
    Relative error is ``|a - n| / max(|a|, |n|, abs_floor)``.
    """
    for name, p in params.items():
        if p.dtype != torch.float64:
            raise TypeError(f"grad_check needs float64 parameters ({name} is {p.dtype})")
    for p in params.values():
        p.grad = None
    loss = loss_fn()
    loss.backward()
    analytic = {name: (p.grad.detach().clone() if p.grad is not None else torch.zeros_like(p))
                for name, p in params.items()}
    rng = np.random.default_rng(seed)
    per_tensor, flagged = {}, []
    worst, checked = 0.0, 0
    with torch.no_grad():
        for name, p in params.items():
            flat = p.view(-1)
            count = min(coords_per_tensor, flat.numel())
            coords = rng.choice(flat.numel(), size=count, replace=False)
            tensor_worst = 0.0
            for c in coords.tolist():
                a = float(analytic[name].view(-1)[c])
                if not math.isfinite(a):
                    flagged.append((name, c))
                    continue
                orig = float(flat[c])
                flat[c] = orig + step
                up = float(loss_fn())
                flat[c] = orig - step
                down = float(loss_fn())
                flat[c] = orig
                numeric = (up - down) / (2.0 * step)
                if not math.isfinite(numeric):
                    flagged.append((name, c))
                    continue
                rel = abs(a - numeric) / max(abs(a), abs(numeric), abs_floor)
                tensor_worst = max(tensor_worst, rel)
                checked += 1
            per_tensor[name] = tensor_worst
            worst = max(worst, tensor_worst)
    return GradCheckResult(worst, per_tensor, flagged, checked)


def model_grad_check(model: SledModel, col: Collated, config: TrainConfig, seed: int = 0,
                     coords_per_tensor: int = 64, step: float = 1e-5, names=None) -> GradCheckResult:
    """Finite-difference check of the full training loss at 64-bit with frozen noise."""
    if model.dtype != torch.float64:
        raise TypeError("convert the model with .double() before checking gradients")
    col = col.to(torch.float64)
    model.eval()
    params = {n: p for n, p in model.named_parameters() if names is None or n in names}

    def loss_fn():
        return compute_losses(model, col, seed, config).total

    return grad_check(loss_fn, params, coords_per_tensor, step, seed)
