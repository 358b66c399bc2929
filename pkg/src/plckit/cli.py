"""Command-line entry point.

Subcommands: simulate, train, conceal, evaluate, audit, gradcheck. Output is
structured text (key=value pairs, one record per line) so scripts can parse
results. Exit codes: 0 success, 1 usage error, 2 runtime/validation failure.
The PLCKIT_CONFIG_DIR environment variable supplies the default directory for
relative --config paths.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from pathlib import Path

import numpy as np

from . import channel, metrics, signal
from .model import Generator, GeneratorConfig
from .numerics import PaddingMode


class CliError(Exception):
    """Validation/runtime failure -> exit code 2."""


def _kv(label: str, **fields) -> str:
    parts = [label] + [f"{k}={v}" for k, v in fields.items()]
    return " ".join(parts)


def _resolve_config(path_str: str) -> Path:
    path = Path(path_str)
    if not path.is_absolute() and not path.exists():
        base = os.environ.get("PLCKIT_CONFIG_DIR")
        if base and (Path(base) / path).exists():
            return Path(base) / path
    return path


def _load_configs(path_str: str):
    from .training import TrainConfig

    path = _resolve_config(path_str)
    try:
        raw = json.loads(path.read_text())
    except FileNotFoundError:
        raise CliError(f"config not found: {path}")
    except json.JSONDecodeError as exc:
        raise CliError(f"config {path} is not valid JSON: {exc}")
    try:
        gcfg = GeneratorConfig.from_dict(raw.get("generator", {}))
        tcfg = TrainConfig.from_dict(raw.get("train", {}))
    except (TypeError, ValueError) as exc:
        raise CliError(f"bad config {path}: {exc}")
    return gcfg, tcfg


def cmd_simulate(args) -> int:
    sig = signal.read_wav(args.infile)
    if len(sig) == 0:
        raise CliError("input audio is empty")
    try:
        params = channel.GEParams(args.p, args.q)
        rate = channel.expected_loss_rate(params)
    except channel.ChannelError as exc:
        raise CliError(str(exc))
    packets = sig.packet_count()
    trace = channel.sample_trace(params, packets, seed=args.seed)
    lossy = channel.apply_loss(sig, trace)
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    signal.write_wav(out_dir / "lossy.wav", lossy)
    channel.save_trace(out_dir / "trace.txt", trace)
    print(_kv("simulate", packets=packets, expected_rate=f"{rate:.4f}",
              empirical_rate=f"{trace.loss_rate:.4f}", seed=args.seed,
              lossy=out_dir / "lossy.wav", trace=out_dir / "trace.txt"))
    return 0


def cmd_train(args) -> int:
    from .training import checkpoint_load, train_stage1, train_stage2
    import dataclasses

    gcfg, tcfg = _load_configs(args.config)
    stage = args.stage if args.stage is not None else tcfg.stage
    tcfg = dataclasses.replace(tcfg, stage=stage)
    if args.seed is not None:
        tcfg = dataclasses.replace(tcfg, seed=args.seed)

    def log(entry):
        print(_kv("epoch", **{k: entry[k] for k in ("epoch", "stage", "lr",
                                                    "val_loss", "seconds")}))

    if stage == 1:
        result = train_stage1(tcfg, gcfg, out_dir=args.out_dir,
                              resume=args.resume, log=log)
    else:
        if args.resume is None:
            raise CliError("stage 2 requires --resume with a stage-1 checkpoint")
        result = train_stage2(tcfg, args.resume, out_dir=args.out_dir, log=log)
    print(_kv("train_done", stage=stage, epochs=len(result.history),
              checkpoint=result.checkpoint))
    return 0


def cmd_conceal(args) -> int:
    import torch

    from .streaming import StreamingGenerator, conceal_batch
    from .training import checkpoint_load

    ckpt = checkpoint_load(args.ckpt)
    gen = ckpt.build_generator().eval()
    sig = signal.read_wav(args.infile)
    trace, n = channel.load_trace(args.trace)
    expected = sig.packet_count(n)
    if len(trace) != expected:
        raise CliError(f"trace length {len(trace)} != packet count {expected}")
    path = PaddingMode(args.path)
    stage = args.stage
    wave = sig.samples.astype(np.float32)
    out = conceal_batch(gen, wave, stage=stage, path=path)
    result = out["wave"][: len(sig)].numpy()
    if args.streaming:
        if path != PaddingMode.CAUSAL:
            raise CliError("--streaming requires --path causal")
        eng = StreamingGenerator(gen, stage=stage, batch=1)
        chunks = [eng.feed(wave[None, i : i + 480])
                  for i in range(0, len(wave), 480)]
        chunks.append(eng.flush())
        stream = torch.cat(chunks, dim=1)[0, : len(sig)].numpy()
        if not np.array_equal(stream, result):
            raise CliError("streaming output differs from batch output")
        print(_kv("streaming_check", bit_exact=True, frames=eng.frames_done))
    signal.write_wav(args.out, signal.AudioSignal(result.astype(np.float64)))
    print(_kv("conceal", out=args.out, samples=len(result), path=path.value,
              stage=stage))
    return 0


def cmd_evaluate(args) -> int:
    ref = signal.read_wav(args.ref)
    est = signal.read_wav(args.est)
    if len(ref) != len(est):
        raise CliError(f"length mismatch: ref {len(ref)} vs est {len(est)}")
    try:
        global_si_sdr = metrics.si_sdr(est.samples, ref.samples)
    except metrics.MetricsError as exc:
        raise CliError(str(exc))
    global_lsd = metrics.lsd(est, ref)
    print(_kv("evaluate", si_sdr_db=f"{global_si_sdr:.3f}",
              lsd_db=f"{global_lsd:.3f}", samples=len(ref)))
    if args.trace:
        trace, n = channel.load_trace(args.trace)
        if trace.flags.any():
            region = metrics.lost_region_si_sdr(est.samples, ref.samples, trace, n)
            mask = metrics.lost_region_mask(trace, len(ref), n)
            print(_kv("evaluate_lost_regions", si_sdr_db=f"{region:.3f}",
                      lost_packets=int(trace.flags.sum()),
                      region_samples=int(mask.sum())))
        else:
            print(_kv("evaluate_lost_regions", si_sdr_db="nan", lost_packets=0,
                      region_samples=0))
    return 0


def cmd_audit(args) -> int:
    if args.config:
        gcfg, _ = _load_configs(args.config)
    else:
        gcfg = GeneratorConfig()
    gen = None
    if args.ckpt:
        from .training import checkpoint_load

        ckpt = checkpoint_load(args.ckpt)
        gcfg = ckpt.gcfg
        gen = ckpt.build_generator()
    report = metrics.audit_report(gcfg, gen)
    for name, row in report["modules"].items():
        print(_kv("module", name=name, params_train=row["params_train"],
                  params_inference=row["params_inference"],
                  gmacs=f"{row['macs_per_second'] / 1e9:.4f}"))
    s = report["summary"]
    print(_kv("summary",
              stage1_params_inference=s["stage1_params_inference"],
              stage12_params_inference=s["stage12_params_inference"],
              postproc_params=s["postproc_params"],
              dual_path_extra_params=s["dual_path_extra_params"],
              stage1_gmacs=f"{s['stage1_gmacs']:.4f}",
              stage12_gmacs=f"{s['stage12_gmacs']:.4f}",
              postproc_gmacs=f"{s['postproc_gmacs']:.4f}",
              stage12_gflops_2xmac=f"{s['stage12_gflops_2xmac']:.4f}"))
    for key, (got, pub) in report["vs_published"].items():
        print(_kv("vs_published", figure=key, value=f"{got:.4f}",
                  published=pub, ratio=f"{got / pub:.3f}"))
    for note in report["notes"]:
        print(_kv("note", text=json.dumps(note)))
    return 0


def cmd_gradcheck(args) -> int:
    import torch

    from .losses import LossWeights
    from .numerics import primitive_suite
    from .training import stage1_loss_grad_check

    failures = 0
    for name, tol, result in primitive_suite(args.seed):
        ok = result.passed(tol)
        failures += 0 if ok else 1
        print(_kv("primitive", name=name, max_rel_err=f"{result.max_rel_err:.3e}",
                  tol=tol, coords=result.n_checked,
                  status="pass" if ok else "fail"))
    e2e = stage1_loss_grad_check(seed=args.seed, max_coords=args.e2e_coords)
    ok = e2e.passed(1e-3)
    failures += 0 if ok else 1
    print(_kv("end_to_end", name="stage1_total", max_rel_err=f"{e2e.max_rel_err:.3e}",
              tol=1e-3, coords=e2e.n_checked, status="pass" if ok else "fail"))
    print(_kv("gradcheck", failures=failures,
              status="pass" if failures == 0 else "fail"))
    return 0 if failures == 0 else 2


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="plckit",
        description="Packet-loss concealment: channel simulation, band-split "
                    "dual-path model, training, evaluation, audits.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("simulate", help="apply Gilbert-Elliott loss to a WAV")
    p.add_argument("--in", dest="infile", required=True)
    p.add_argument("--p", type=float, required=True)
    p.add_argument("--q", type=float, required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out-dir", required=True)
    p.set_defaults(fn=cmd_simulate)

    p = sub.add_parser("train", help="run one training stage")
    p.add_argument("--config", required=True)
    p.add_argument("--stage", type=int, choices=(1, 2))
    p.add_argument("--resume")
    p.add_argument("--out-dir", default="runs")
    p.add_argument("--seed", type=int)
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("conceal", help="conceal a lossy WAV with a checkpoint")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--in", dest="infile", required=True)
    p.add_argument("--trace", required=True)
    p.add_argument("--path", choices=("causal", "noncausal"), default="causal")
    p.add_argument("--stage", type=int, choices=(1, 2), default=1)
    p.add_argument("--streaming", action="store_true",
                   help="frame-by-frame inference; asserts bit-equality with batch")
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_conceal)

    p = sub.add_parser("evaluate", help="SI-SDR / LSD metrics")
    p.add_argument("--ref", required=True)
    p.add_argument("--est", required=True)
    p.add_argument("--trace", help="trace for per-lost-region metrics")
    p.set_defaults(fn=cmd_evaluate)

    p = sub.add_parser("audit", help="parameter/FLOP table")
    p.add_argument("--config")
    p.add_argument("--ckpt")
    p.set_defaults(fn=cmd_audit)

    p = sub.add_parser("gradcheck", help="finite-difference gradient report")
    p.add_argument("--config")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--e2e-coords", type=int, default=60)
    p.set_defaults(fn=cmd_gradcheck)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return 0 if exc.code == 0 else 1  # argparse usage errors -> 1
    try:
        return args.fn(args)
    except CliError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (signal.SignalError, channel.ChannelError,
            metrics.MetricsError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # runtime failures also exit 2 with one line
        from .training import CheckpointError, TrainingError

        if isinstance(exc, (CheckpointError, TrainingError, ValueError, OSError)):
            print(f"error: {exc}", file=sys.stderr)
            return 2
        raise


if __name__ == "__main__":
    sys.exit(main())
