"""``sepmamba`` command line: train, separate, bench, verify.

Exit codes: 0 success, 2 usage or configuration error, 3 data or checkpoint
error, 4 numerical failure (NaN loss or gradients), 1 property failures in
``verify``.
"""

from __future__ import annotations

import argparse
import configparser
import dataclasses
import logging
import sys
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import bench, datapipe, kernels, objective, trainer, verify
from . import separator as sep
from .checkpoint import load_checkpoint
from .errors import ConfigError, DataError, NumericalError, SepMambaError
from .wavio import AudioBuffer, wav_read, wav_write

log = logging.getLogger("sepmamba")

EXIT_OK, EXIT_FAIL, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3, 4


@dataclass(frozen=True)
class DataConfig:
    manifest: str = ""
    n_mixtures: int = 8
    duration_s: float = 4.0
    seed: int = 0
    dynamic: bool = True
    perturb: bool = True
    snr_min: float = -2.5
    snr_max: float = 2.5
    speed_min: float = 0.95
    speed_max: float = 1.05
    peak_level: float = 0.9  # mixture peak, 0 disables normalisation


PUBLISHED_NOTES = {
    ("model", "base_dim"): "published: 64 (S), 128 (M)",
    ("model", "blocks_per_stage"): "published: 8 (S), 6 (M)",
    ("model", "kernel_size"): "published: 16",
    ("model", "stride"): "published: 2",
    ("model", "n_stages"): "published: 5",
    ("model", "sample_rate"): "published: 8 kHz",
    ("train", "lr"): "published: 15e-5",
    ("train", "weight_decay"): "published: 0.1",
    ("train", "beta1"): "published: 0.9",
    ("train", "beta2"): "published: 0.999",
    ("train", "clip_norm"): "published: 5.0",
    ("train", "gamma"): "published: 0.98 to 0.99",
    ("train", "batch_size"): "published: 1",
    ("train", "clamp_db"): "published: loss floored at -30",
    ("data", "snr_min"): "published: -2.5 dB",
    ("data", "snr_max"): "published: 2.5 dB",
    ("data", "speed_min"): "published: 95%",
    ("data", "speed_max"): "published: 105%",
}

SECTIONS = {"model": sep.SeparatorConfig, "train": trainer.TrainConfig, "data": DataConfig}


def config_keys_help() -> str:
    lines = ["config file keys (key = value, grouped in [model], [train] and [data] sections):"]
    lines.append("  [model] preset = S | M | S-causal | M-causal   (optional starting point; other keys override it)")
    for section, cls in SECTIONS.items():
        for f in dataclasses.fields(cls):
            if f.name.startswith("_"):
                continue
            note = PUBLISHED_NOTES.get((section, f.name))
            default = getattr(cls, f.name)
            lines.append(f"  [{section}] {f.name} = {default!r}" + (f"   ({note})" if note else ""))
    return "\n".join(lines)


@dataclass
class RunConfig:
    model: sep.SeparatorConfig
    train: trainer.TrainConfig
    data: DataConfig


def _coerce_section(cls, values: dict):
    from .separator import _coerce

    names = {f.name for f in dataclasses.fields(cls)}
    unknown = set(values) - names
    if unknown:
        raise ConfigError(f"unknown keys {sorted(unknown)}")
    return cls(**{k: _coerce(v, type(getattr(cls, k)), k) for k, v in values.items()})


def load_run_config(path) -> RunConfig:
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file not found: {path}")
    cp = configparser.ConfigParser(interpolation=None, default_section="__none__")
    cp.optionxform = str
    try:
        cp.read_string(path.read_text(), source=str(path))
    except configparser.Error as exc:
        raise ConfigError(f"{path}: {exc}") from exc
    unknown = set(cp.sections()) - set(SECTIONS)
    if unknown:
        raise ConfigError(f"{path}: unknown sections {sorted(unknown)}")
    model_vals = dict(cp["model"]) if cp.has_section("model") else {}
    preset = model_vals.pop("preset", None)
    try:
        if preset is not None:
            if preset not in sep.PRESETS:
                raise ConfigError(f"unknown preset {preset!r}; choose from {sorted(sep.PRESETS)}")
            base = sep.PRESETS[preset]
            model = _coerce_section(sep.SeparatorConfig, {**base.to_dict(), **model_vals})
        else:
            model = _coerce_section(sep.SeparatorConfig, model_vals)
        train = _coerce_section(trainer.TrainConfig, dict(cp["train"]) if cp.has_section("train") else {})
        data = _coerce_section(DataConfig, dict(cp["data"]) if cp.has_section("data") else {})
    except ConfigError as exc:
        raise ConfigError(f"{path}: {exc}") from exc
    return RunConfig(model, train, data)


def make_dataset(data: DataConfig, model: sep.SeparatorConfig, steps_per_epoch: int) -> datapipe.MixDataset:
    if data.manifest:
        entries = datapipe.load_manifest(data.manifest)
    else:
        entries = datapipe.synthetic_manifest(data.n_mixtures, data.duration_s, data.seed)
    return datapipe.MixDataset(
        entries,
        sample_rate=model.sample_rate,
        seed=data.seed,
        dynamic=data.dynamic,
        perturb=data.perturb,
        steps_per_epoch=steps_per_epoch if data.dynamic else None,
        snr_range=(data.snr_min, data.snr_max),
        speed_range=(data.speed_min, data.speed_max),
        peak_level=data.peak_level or None,
    )


# ---------------------------------------------------------------------------
# commands


def cmd_train(args) -> int:
    run = load_run_config(args.config)
    tcfg, dcfg = run.train, run.data
    if args.seed is not None:
        tcfg = dataclasses.replace(tcfg, seed=args.seed)
        dcfg = dataclasses.replace(dcfg, seed=args.seed)
    if args.deterministic:
        tcfg = dataclasses.replace(tcfg, deterministic=True)
    out_dir = Path(args.out_dir)
    resume = None
    if args.resume:
        resume = trainer.latest_checkpoint(out_dir) if args.resume == "latest" else Path(args.resume)
        if resume is None:
            raise DataError(f"no checkpoint to resume from in {out_dir}")
        done = int(load_checkpoint(resume).train.get("step", 0))
        if args.steps is not None:
            tcfg = dataclasses.replace(tcfg, max_steps=done + args.steps)
    elif args.steps is not None:
        tcfg = dataclasses.replace(tcfg, max_steps=args.steps)
    dataset = make_dataset(dcfg, run.model, tcfg.steps_per_epoch)

    def progress(step, loss, gnorm, lr):
        if step % max(1, args.log_every) == 0:
            log.info("step %d  loss %.3f  grad_norm %.3f  lr %.3g", step, loss, gnorm, lr)

    result = trainer.train(run.model, tcfg, dataset, out_dir, resume=resume, log=progress)
    log.info("finished at step %d; checkpoints and metrics.tsv in %s", result.state.step, out_dir)
    return EXIT_OK


def cmd_separate(args) -> int:
    ck = load_checkpoint(args.checkpoint)
    weights = ck.weights
    cfg = weights.config
    buf = wav_read(args.input)
    n_in, sr_in = len(buf), buf.sample_rate
    if sr_in != cfg.sample_rate:
        log.warning("input is %d Hz; resampling to %d Hz", sr_in, cfg.sample_rate)
        buf = datapipe.resample(buf, cfg.sample_rate)
    x = np.asarray(buf.samples, dtype=weights.dtype)
    if len(x) < cfg.kernel_size:
        raise DataError(f"input has {len(x)} samples; at least {cfg.kernel_size} are needed")
    est = sep.separate(weights, x[None, :]).astype(np.float64)
    outs = []
    for i, s in enumerate(est, 1):
        ob = AudioBuffer(s, cfg.sample_rate)
        if sr_in != cfg.sample_rate:
            ob = datapipe.resample(ob, sr_in)
        samples = np.zeros(n_in)
        m = min(n_in, len(ob))
        samples[:m] = ob.samples[:m]
        path = Path(f"{args.out_prefix}_src{i}.wav")
        wav_write(path, AudioBuffer(samples, sr_in), args.encoding)
        outs.append(samples)
        log.info("wrote %s", path)
    if args.refs:
        refs = [wav_read(p) for p in args.refs]
        if len(refs) != len(outs) or any(len(r) != n_in for r in refs):
            raise DataError("references must match the number of sources and the input length")
        score = objective.si_sdr_improvement(np.stack(outs), np.stack([r.samples for r in refs]), np.asarray(wav_read(args.input).samples))
        print(f"SI-SDRi {score:.2f} dB", file=sys.stderr)
    return EXIT_OK


def _bench_target(args) -> tuple[str, sep.SeparatorConfig, sep.ModelWeights | None]:
    if args.preset:
        if args.preset not in sep.PRESETS:
            raise ConfigError(f"unknown preset {args.preset!r}; choose from {sorted(sep.PRESETS)}")
        return args.preset, sep.PRESETS[args.preset], None
    if args.target is None:
        raise ConfigError("bench needs a config file, a checkpoint or --preset")
    path = Path(args.target)
    if not path.is_file():
        raise ConfigError(f"file not found: {path}")
    with open(path, "rb") as f:
        head = f.read(6)
    if head.startswith(b"SEPM1"):
        ck = load_checkpoint(path)
        return path.stem, ck.config, ck.weights
    return path.stem, load_run_config(path).model, None


def cmd_bench(args) -> int:
    name, cfg, weights = _bench_target(args)
    report = bench.compute_report(cfg, name, args.seconds, args.repeats, 1, args.seed, time_forward=not args.no_timing, weights=weights)
    sys.stdout.write(bench.emit_report([report], args.format))
    return EXIT_OK


def cmd_verify(args) -> int:
    results = verify.run_suite(args.suite, seed=args.seed)
    for r in results:
        print(r.line())
    failed = [r for r in results if not r.passed]
    print(f"{len(results) - len(failed)}/{len(results)} properties passed")
    return EXIT_OK if not failed else EXIT_FAIL


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    fmt = argparse.RawDescriptionHelpFormatter
    p = argparse.ArgumentParser(prog="sepmamba", description="Mamba U-Net speech separation toolkit.", epilog=config_keys_help(), formatter_class=fmt)
    p.add_argument("-v", "--verbose", action="store_true", help="debug logging")
    p.add_argument("--threads", type=int, default=None, help="intra-op threads for the numba kernels (default: SEPM_THREADS or 1)")
    sub = p.add_subparsers(dest="command", required=True)

    t = sub.add_parser("train", help="train a model", epilog=config_keys_help(), formatter_class=fmt)
    t.add_argument("config", help="config file")
    t.add_argument("--out-dir", required=True, help="directory for checkpoints and metrics.tsv")
    t.add_argument("--resume", help="checkpoint path, or 'latest' for the newest one in --out-dir")
    t.add_argument("--seed", type=int, help="overrides [train] seed and [data] seed")
    t.add_argument("--steps", type=int, help="steps to run (on --resume: additional steps)")
    t.add_argument("--deterministic", action="store_true", help="write wall_ms as 0 so metrics files are reproducible")
    t.add_argument("--log-every", type=int, default=50)
    t.set_defaults(func=cmd_train)

    s = sub.add_parser("separate", help="separate a mixture WAV file")
    s.add_argument("checkpoint")
    s.add_argument("input", help="mixture WAV (8 kHz mono; other rates are resampled)")
    s.add_argument("--out-prefix", required=True, help="writes <prefix>_src1.wav, <prefix>_src2.wav, ...")
    s.add_argument("--encoding", choices=("float32", "pcm16"), default="float32")
    s.add_argument("--refs", nargs="+", help="reference WAVs; SI-SDRi is reported on stderr")
    s.set_defaults(func=cmd_separate)

    b = sub.add_parser("bench", help="parameter count, GMAC/s, forward time and memory estimate")
    b.add_argument("target", nargs="?", help="config file or checkpoint")
    b.add_argument("--preset", help="S, M, S-causal or M-causal")
    b.add_argument("--seconds", type=float, default=4.0)
    b.add_argument("--repeats", type=int, default=10)
    b.add_argument("--seed", type=int, default=0)
    b.add_argument("--format", choices=("markdown", "tsv"), default="markdown")
    b.add_argument("--no-timing", action="store_true", help="skip the forward-pass timing")
    b.set_defaults(func=cmd_bench)

    v = sub.add_parser("verify", help="run the property suites")
    v.add_argument("--suite", default="all", help="scan, grads, causality, metrics or all")
    v.add_argument("--seed", type=int, default=0)
    v.set_defaults(func=cmd_verify)
    return p


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO, format="%(levelname)s %(message)s", stream=sys.stderr)
    if getattr(args, "suite", None) is not None and args.suite not in verify.SUITES + ("all",):
        parser.error(f"unknown suite {args.suite!r}; choose from {', '.join(verify.SUITES + ('all',))}")
    try:
        if args.threads is not None:
            kernels.set_threads(args.threads)
        return args.func(args)
    except ConfigError as exc:
        print(f"sepmamba: config error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except DataError as exc:
        print(f"sepmamba: data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except NumericalError as exc:
        print(f"sepmamba: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except SepMambaError as exc:
        print(f"sepmamba: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
