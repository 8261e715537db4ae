"""Command-line entry point.

Exit codes: 0 success, 1 usage or configuration error, 2 numeric failure
(non-finite loss, failed gradient check), 3 input/output error.
"""

from __future__ import annotations

import argparse
import sys

from .analysis import AnalysisError
from .config import ConfigError, RunConfig, load_config, preset
from .oracle import DatasetError
from .topology import TopologyError
from .training import CheckpointError, NumericError

EXIT_OK, EXIT_USAGE, EXIT_NUMERIC, EXIT_IO = 0, 1, 2, 3


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(message)


def _config(args) -> RunConfig:
    if args.config is None:
        cfg = RunConfig().validate()
    elif args.config.startswith("preset:"):
        cfg = preset(args.config.split(":", 1)[1])
    else:
        cfg = load_config(args.config)
    return cfg


def _with_seed(cfg: RunConfig, args, section: str = "train") -> RunConfig:
    if getattr(args, "seed", None) is None:
        return cfg
    return cfg.replace(**{section: {"seed": args.seed}})


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="rnnlink", description="Recurrent macromodels of high-speed links.")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def common(sp, seed=True):
        sp.add_argument("--config", help="INI file, or preset:pam2_narx / preset:pam4_ernn")
        if seed:
            sp.add_argument("--seed", type=int, help="override the config seed")
        return sp

    common(sub.add_parser("generate", help="write an oracle dataset CSV")) \
        .add_argument("--out", required=True)
    sp = common(sub.add_parser("train", help="train a model, write checkpoint and loss CSV"))
    sp.add_argument("--data", required=True)
    sp.add_argument("--checkpoint", required=True, help="output checkpoint path")
    sp = sub.add_parser("infer", help="predict a waveform from a checkpoint")
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--data", required=True)
    sp.add_argument("--mode", choices=("readout", "batch"), default="readout")
    sp.add_argument("--out", required=True)
    sp = common(sub.add_parser("eye", help="eye diagram PPM and metrics CSV"), seed=False)
    sp.add_argument("--waveform", required=True)
    sp.add_argument("--data", help="ground-truth dataset for comparison")
    sp.add_argument("--out", required=True, help="output prefix")
    common(sub.add_parser("gradcheck", help="finite-difference check of BPTT gradients"))
    sp = common(sub.add_parser("sweep", help="train one model per sweep value"))
    sp.add_argument("--sweep", choices=("k", "optimizer", "cell"), required=True)
    sp.add_argument("--out", required=True)
    sp = sub.add_parser("activation-demo", help="repeated activation passes as CSV")
    sp.add_argument("--passes", type=int, default=3)
    sp.add_argument("--out", required=True, help="output prefix")
    sp = sub.add_parser("benchmark", help="NARX step loop versus ERNN batch throughput")
    sp.add_argument("--narx", required=True, help="NARX checkpoint")
    sp.add_argument("--ernn", required=True, help="ERNN checkpoint")
    sp.add_argument("--samples", type=int, default=100_000)
    sp.add_argument("--out", required=True, help="benchmark log path")
    return p


def run(argv=None) -> int:
    from . import pipeline

    args = build_parser().parse_args(argv)
    cmd = args.command
    if cmd == "generate":
        cfg = _with_seed(_config(args), args, "oracle")
        ds = pipeline.cmd_generate(cfg, args.out)
        print(f"rows={len(ds)} dt={ds.dt!r} symbols={cfg.oracle.n_symbols}")
    elif cmd == "train":
        cfg = _with_seed(_config(args), args)
        res = pipeline.cmd_train(cfg, args.data, args.checkpoint)
        last = res.run.loss_history[-1] if res.run.loss_history else float("nan")
        print(f"epochs={res.run.epoch} final_loss={last!r} seconds={res.seconds:.1f}")
        if res.error is not None:
            print(f"error: {res.error}; checkpoint holds the last good epoch", file=sys.stderr)
            return EXIT_NUMERIC
    elif cmd == "infer":
        wf, scores = pipeline.cmd_infer(args.checkpoint, args.data, args.mode, args.out)
        print(f"rows={len(wf)} predicted={','.join(wf.predicted)}")
        for ch, v in scores.items():
            print(f"nrmse_{ch}={v!r}")
    elif cmd == "eye":
        cmp = pipeline.cmd_eye(args.waveform, _config(args), args.out, args.data)
        m = cmp.prediction
        print(f"height={m.height!r} width={m.width!r} phase={m.optimal_phase!r} "
              f"closed={int(m.closed)}")
        if cmp.truth is not None:
            print(f"height_delta={cmp.height_delta!r} width_delta={cmp.width_delta!r} "
                  f"phase_bins={cmp.phase_bins!r}")
    elif cmd == "gradcheck":
        ok, report = pipeline.cmd_gradcheck(_with_seed(_config(args), args))
        print(report)
        if not ok:
            return EXIT_NUMERIC
    elif cmd == "sweep":
        cfg = _with_seed(_config(args), args)
        rows = pipeline.cmd_sweep(cfg, args.sweep, args.out)
        for r in rows:
            print(f"{r['sweep']}={r['value']} seed={r['seed']} status={r['status']} "
                  f"test_nrmse={r['test_nrmse']} epochs_to_threshold={r['epochs_to_threshold']}")
    elif cmd == "activation-demo":
        if args.passes < 1:
            raise UsageError("--passes must be >= 1")
        pipeline.cmd_activation_demo(args.out, args.passes)
    elif cmd == "benchmark":
        from .training import load_checkpoint
        res = pipeline.benchmark_log(load_checkpoint(args.narx), load_checkpoint(args.ernn),
                                     args.samples, args.out)
        print(f"throughput_ratio={res['throughput_ratio']:.2f}")
    return EXIT_OK


def main(argv=None) -> int:
    try:
        return run(argv)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (ConfigError, TopologyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except NumericError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (DatasetError, CheckpointError, AnalysisError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
