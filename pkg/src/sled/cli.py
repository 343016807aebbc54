"""``sled`` command-line entry point.

Failures exit nonzero and print one line to stderr of the form
``error:<category>:<message>``. The only environment variable read is
``SLED_THREADS`` (torch intra-op threads).
"""

from __future__ import annotations

import argparse
import os
import sys
from pathlib import Path

import numpy as np

__all__ = ["main", "build_parser", "CliError"]

EXIT_CODES = {"usage": 2, "config": 3, "io": 4, "format": 5, "input": 6, "runtime": 7}


class CliError(Exception):
    def __init__(self, category: str, message: str):
        super().__init__(message)
        self.category = category


def _threads() -> int:
    raw = os.environ.get("SLED_THREADS")
    if raw is None:
        return os.cpu_count() or 1
    try:
        value = int(raw)
    except ValueError:
        raise CliError("config", f"SLED_THREADS must be a positive integer, got {raw!r}") from None
    if value < 1:
        raise CliError("config", f"SLED_THREADS must be a positive integer, got {raw!r}")
    return value


def _load_config(args):
    from .config import ConfigError, RunConfig

    try:
        cfg = RunConfig.load(args.config) if getattr(args, "config", None) else RunConfig()
    except OSError as exc:
        raise CliError("io", f"cannot read config: {exc}") from None
    except ConfigError as exc:
        raise CliError("config", " | ".join(exc.errors)) from None
    return cfg


def _override(cfg, section, **changes):
    from .config import ConfigError

    changes = {k: v for k, v in changes.items() if v is not None}
    if not changes:
        return cfg
    try:
        return cfg.replace(section, **changes)
    except ConfigError as exc:
        raise CliError("config", " | ".join(exc.errors)) from None


def _sampler_overrides(args, cfg):
    return _override(cfg, "sampler", lam=args.lam, stop_threshold=args.stop_threshold, max_frames=args.max_frames)


def _out_dir(path) -> Path:
    out = Path(path)
    try:
        out.mkdir(parents=True, exist_ok=True)
        probe = out / ".write-probe"
        probe.write_bytes(b"")
        probe.unlink()
    except OSError as exc:
        raise CliError("io", f"output directory not writable: {exc}") from None
    return out


def _load_model(cfg, checkpoint):
    from .model import CheckpointError, load_checkpoint

    path = checkpoint or cfg.paths.checkpoint
    if not path:
        raise CliError("usage", "a checkpoint is required (--checkpoint or paths.checkpoint)")
    try:
        return load_checkpoint(path, cfg.model).model
    except OSError as exc:
        raise CliError("io", f"cannot read checkpoint: {exc}") from None
    except CheckpointError as exc:
        raise CliError("format", str(exc)) from None


def _parse_tokens(text: str) -> list[int]:
    try:
        return [int(t) for t in text.split()]
    except ValueError:
        raise CliError("input", f"token list must be space-separated integers, got {text!r}") from None


def _prompts(args) -> list[list[int]]:
    from .synth import read_token_file

    if args.text is not None:
        return [_parse_tokens(args.text)]
    if args.tokens_file is not None:
        try:
            return read_token_file(args.tokens_file)
        except OSError as exc:
            raise CliError("io", f"cannot read token file: {exc}") from None
        except ValueError as exc:
            raise CliError("input", str(exc)) from None
    raise CliError("usage", "give --text or --tokens-file")


# ---------------------------------------------------------------------------
# commands


def cmd_data_gen(args, cfg):
    from .synth import write_dataset

    cfg = _override(cfg, "data", seed=args.seed, count=args.count)
    out = _out_dir(args.out)
    task = cfg.task.build()
    write_dataset(out, task, cfg.data.count, cfg.data.seed, cfg.data.min_tokens, cfg.data.max_tokens,
                  extra_manifest={"config_sha256": cfg.digest()})
    cfg.write(out / "config.json")
    print(f"wrote {cfg.data.count} utterances to {out}")


def cmd_train(args, cfg):
    from .model import init_params
    from .synth import read_dataset
    from .train import DatasetSource, TaskSource, Trainer

    cfg = _override(cfg, "train", seed=args.seed, loss_mode=args.loss_mode, total_steps=args.steps)
    cfg = _override(cfg, "paths", data_dir=args.data)
    out = _out_dir(args.out)
    task = cfg.task.build()
    if cfg.paths.data_dir:
        try:
            source = DatasetSource(read_dataset(cfg.paths.data_dir), cfg.train.seed)
        except OSError as exc:
            raise CliError("io", f"cannot read dataset: {exc}") from None
    else:
        source = TaskSource(task, cfg.train.seed, cfg.data.min_tokens, cfg.data.max_tokens)
    trainer = Trainer(init_params(cfg.model, cfg.train.seed), cfg.train, source)
    cfg = _override(cfg, "paths", checkpoint=str(out / "checkpoint.slck"))
    cfg.write(out / "config.json")
    (out / "metrics.csv").unlink(missing_ok=True)

    def log(row):
        if row["step"] % max(1, args.log_every) == 0:
            print(f"step={row['step']} loss={row['loss']:.4f} stop={row['stop_loss']:.4f}", flush=True)

    trainer.run(metrics_path=out / "metrics.csv", checkpoint_path=out / "checkpoint.slck",
                checkpoint_every=args.checkpoint_every, log=log if args.log_every else None)
    print(f"checkpoint {out / 'checkpoint.slck'}")


def cmd_generate(args, cfg):
    from .sampler import generate_offline
    from .synth import write_latents
    from .train import _mix_seed

    cfg = _sampler_overrides(args, cfg)
    model = _load_model(cfg, args.checkpoint)
    out = _out_dir(args.out)
    seed = 0 if args.seed is None else args.seed
    for i, prompt in enumerate(_prompts(args)):
        try:
            seq = generate_offline(model, prompt, cfg.sampler.cfg(), _mix_seed(seed, i))
        except ValueError as exc:
            raise CliError("input", str(exc)) from None
        write_latents(out / f"gen_{i:06d}.slat", seq)
        print(f"gen_{i:06d}.slat,{len(seq)},{int(seq.stopped)}")
    cfg.write(out / "config.json")


def cmd_stream(args, cfg):
    from .sampler import StreamSession
    from .synth import SlatStreamWriter

    cfg = _sampler_overrides(args, cfg)
    cfg = _override(cfg, "sampler", schedule=args.schedule)
    model = _load_model(cfg, args.checkpoint)
    out = _out_dir(args.out)
    if args.text is None and args.tokens_file is None:
        # tokens arrive on stdin, whitespace-separated, consumed as each line lands
        prompt = (tok for line in sys.stdin for tok in _parse_tokens(line))
    else:
        prompt = _prompts(args)[0]
    session = StreamSession(model, cfg.sampler.stream_schedule(), cfg.sampler.cfg(),
                            0 if args.seed is None else args.seed)
    print("event,tokens_seen,frames_emitted,wall_ms")
    shown = 0

    def report():
        nonlocal shown
        for ev in session.events[shown:]:
            print(f"{ev[0]},{ev[1]},{ev[2]},{ev[3]:.3f}", flush=True)
        shown = len(session.events)

    with SlatStreamWriter(out / "stream.slat", model.config.latent_dim) as writer:
        try:
            for tok in prompt:
                for frame in session.push_text([tok]):
                    writer.write(frame)
                report()
                if session.phase == "post_eot":
                    break
            if session.phase != "post_eot":
                session.end_text()
        except ValueError as exc:
            raise CliError("input", str(exc)) from None
        for frame in session.drain():
            writer.write(frame)
        report()
    cfg.write(out / "config.json")


def cmd_eval(args, cfg):
    from .evalbench import cfg_sweep, eval_prompts
    from .sampler import StreamSchedule

    cfg = _override(cfg, "eval", seed=args.seed, prompts=args.prompts)
    if args.lambdas:
        try:
            lams = [float(v) for v in args.lambdas.split(",")]
        except ValueError:
            raise CliError("usage", f"--lambdas must be comma-separated numbers, got {args.lambdas!r}") from None
        cfg = _override(cfg, "eval", lams=lams)
    model = _load_model(cfg, args.checkpoint)
    out = _out_dir(args.out)
    task = cfg.task.build()
    prompts = eval_prompts(task, cfg.eval.prompts, cfg.eval.seed, cfg.data.min_tokens, cfg.data.max_tokens)
    min_frames = min(len(p) for p in prompts) * task.frames_per_token
    if max(cfg.eval.positions) >= min_frames:
        raise CliError("input", f"eval position {max(cfg.eval.positions)} is beyond the shortest "
                                f"utterance ({min_frames} frames)")
    report = cfg_sweep(model, task, cfg.eval.lams, prompts, cfg=cfg.sampler.cfg(), seed=cfg.eval.seed,
                       schedule=StreamSchedule.parse(cfg.sampler.schedule), positions=cfg.eval.positions,
                       samples_per_step=cfg.eval.samples_per_step)
    report.write(out / "eval.csv")
    cfg.write(out / "config.json")
    sys.stdout.write(report.to_csv())


def cmd_ged(args, cfg):
    from .metrics import EstimatorError, EstimatorKind, RBFKernel, Semimetric, ged2, mmd2
    from .synth import LatentFormatError, read_latents

    try:
        a = read_latents(args.file_a).frames.astype(np.float64)
        b = read_latents(args.file_b).frames.astype(np.float64)
    except OSError as exc:
        raise CliError("io", str(exc)) from None
    except LatentFormatError as exc:
        raise CliError("format", str(exc)) from None
    kind = EstimatorKind(args.estimator)
    try:
        if args.kernel == "rbf":
            value = mmd2(a, b, RBFKernel(args.bandwidth), kind)
            label = f"rbf(bandwidth={args.bandwidth!r})"
        else:
            value = ged2(a, b, Semimetric(args.beta), kind)
            label = f"energy(beta={args.beta!r})"
    except (EstimatorError, ValueError) as exc:
        raise CliError("input", str(exc)) from None
    print("estimator,kernel_or_metric,value")
    print(f"{kind.value},{label},{value!r}")


def cmd_bench(args, cfg):
    from .evalbench import throughput_bench
    from .model import init_params

    try:
        sizes = [int(v) for v in args.batch_sizes.split(",")]
    except ValueError:
        raise CliError("usage", f"--batch-sizes must be comma-separated integers, got {args.batch_sizes!r}") from None
    if any(s < 1 for s in sizes):
        raise CliError("usage", "batch sizes must be positive")
    if args.checkpoint or cfg.paths.checkpoint:
        model = _load_model(cfg, args.checkpoint)
    else:
        model = init_params(cfg.model, 0 if args.seed is None else args.seed)
    cfg = _override(cfg, "sampler", lam=args.lam)
    report = throughput_bench(model, sizes, args.frames, cfg.sampler.cfg(), threads=args.threads or 1,
                              seed=0 if args.seed is None else args.seed)
    if args.out:
        out = _out_dir(args.out)
        report.write(out / "bench.csv")
        cfg.write(out / "config.json")
    sys.stdout.write(report.to_csv())


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="sled", description="Continuous-latent autoregressive generation toolkit.")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, out_required=True):
        sp.add_argument("--config", help="run configuration JSON")
        sp.add_argument("--seed", type=int)
        sp.add_argument("--out", required=out_required, help="output directory")

    def prompt_args(sp):
        sp.add_argument("--checkpoint")
        sp.add_argument("--text", help="space-separated token ids")
        sp.add_argument("--tokens-file", help="token file, one utterance per line")
        sp.add_argument("--lambda", dest="lam", type=float)
        sp.add_argument("--stop-threshold", type=float)
        sp.add_argument("--max-frames", type=int)

    sp = sub.add_parser("data-gen", help="write a synthetic dataset")
    common(sp)
    sp.add_argument("--count", type=int)
    sp.set_defaults(func=cmd_data_gen)

    sp = sub.add_parser("train", help="train a model")
    common(sp)
    sp.add_argument("--data", help="dataset directory (default: sample from the task on the fly)")
    sp.add_argument("--loss-mode", choices=["energy", "rmse"])
    sp.add_argument("--steps", type=int)
    sp.add_argument("--checkpoint-every", type=int, default=0)
    sp.add_argument("--log-every", type=int, default=0)
    sp.set_defaults(func=cmd_train)

    sp = sub.add_parser("generate", help="offline generation to SLAT files")
    common(sp)
    prompt_args(sp)
    sp.set_defaults(func=cmd_generate)

    sp = sub.add_parser("stream", help="streaming generation with an n:m schedule (tokens from stdin by default)")
    common(sp)
    prompt_args(sp)
    sp.add_argument("--schedule", help="n:m text tokens to frames")
    sp.set_defaults(func=cmd_stream)

    sp = sub.add_parser("eval", help="oracle-based evaluation report")
    common(sp)
    sp.add_argument("--checkpoint")
    sp.add_argument("--lambdas", help="comma-separated guidance scales")
    sp.add_argument("--prompts", type=int)
    sp.set_defaults(func=cmd_eval)

    sp = sub.add_parser("ged", help="squared energy distance or MMD between two SLAT files")
    sp.add_argument("file_a")
    sp.add_argument("file_b")
    sp.add_argument("--config")
    sp.add_argument("--estimator", choices=["biased", "unbiased"], default="unbiased")
    sp.add_argument("--kernel", choices=["energy", "rbf"], default="energy")
    sp.add_argument("--beta", type=float, default=1.0)
    sp.add_argument("--bandwidth", type=float, default=1.0)
    sp.set_defaults(func=cmd_ged)

    sp = sub.add_parser("bench", help="batched decoding throughput")
    common(sp, out_required=False)
    sp.add_argument("--checkpoint")
    sp.add_argument("--batch-sizes", default="1,16,64")
    sp.add_argument("--frames", type=int, default=64)
    sp.add_argument("--threads", type=int, help="threads for the benchmark (default 1)")
    sp.add_argument("--lambda", dest="lam", type=float)
    sp.set_defaults(func=cmd_bench)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        import torch

        torch.set_num_threads(_threads())
        cfg = _load_config(args)
        args.func(args, cfg)
    except CliError as exc:
        print(f"error:{exc.category}:{_one_line(exc)}", file=sys.stderr)
        return EXIT_CODES[exc.category]
    except OSError as exc:
        print(f"error:io:{_one_line(exc)}", file=sys.stderr)
        return EXIT_CODES["io"]
    except (ValueError, RuntimeError, FloatingPointError) as exc:
        print(f"error:runtime:{type(exc).__name__}: {_one_line(exc)}", file=sys.stderr)
        return EXIT_CODES["runtime"]
    return 0


def _one_line(exc) -> str:
    return " ".join(str(exc).split())


if __name__ == "__main__":
    sys.exit(main())
