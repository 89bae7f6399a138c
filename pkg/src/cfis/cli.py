"""``cfis`` command line: eval, loss, upsample, bench.

Exit codes: 0 success, 1 usage error, 2 data error.
"""

from __future__ import annotations

import argparse
import csv
import json
import sys
from dataclasses import dataclass, fields
from fractions import Fraction
from pathlib import Path

from .boxloss import BBox, LossConfig, inner_siou_loss
from .carafe import CarafeConfig, carafe_upsample
from .errors import ConfigError, DataError
from .evalkit import evaluate, load_directories, throughput_bench
from .ops import OPERATORS, build_operator
from .tensor import nearest_upsample, read_tensor, tensor_to_bytes

EXIT_OK, EXIT_USAGE, EXIT_DATA = 0, 1, 2


@dataclass
class RunConfig:
    tau: float = 0.5
    gamma: float = 1.25
    lambda1: float = 0.5
    lambda2: float = 0.5
    scale: int = 2
    kup: int = 5
    cm: int = 64
    reps: int = 10
    seed: int = 0

    @classmethod
    def load(cls, path) -> RunConfig:
        try:
            raw = json.loads(Path(path).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise DataError(f"cannot read config: {exc}", str(path)) from None
        known = {f.name for f in fields(cls)}
        unknown = set(raw) - known
        if unknown:
            raise ConfigError(f"unknown config keys: {', '.join(sorted(unknown))}")
        return cls(**raw)


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: error: {message}")


def _shape(text):
    try:
        dims = tuple(int(v) for v in text.split(","))
    except ValueError:
        raise argparse.ArgumentTypeError(f"shape must be comma-separated integers, got {text!r}") from None
    if len(dims) != 4 or min(dims) < 1:
        raise argparse.ArgumentTypeError("shape must be four positive integers N,C,H,W")
    return dims


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON file with default values for the flags below")
    common.add_argument("--seed", type=int)
    common.add_argument("--out", help="output path (stdout when omitted, where applicable)")

    parser = _Parser(prog="cfis", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("eval", parents=[common], help="precision/recall/AP/mAP over label directories")
    p.add_argument("gt_dir")
    p.add_argument("pred_dir")
    p.add_argument("--tau", type=float)
    p.add_argument("--classes", type=int, help="number of classes (default: inferred)")
    p.add_argument("--pr-csv", help="write PR points as class_id,precision,recall")

    p = sub.add_parser("loss", parents=[common], help="Inner-SIoU breakdown for CSV box pairs")
    p.add_argument("csv_in", help="rows xt,yt,wt,ht,xa,ya,wa,ha ('-' for stdin)")
    p.add_argument("--gamma", type=float)
    p.add_argument("--lambda1", type=float)
    p.add_argument("--lambda2", type=float)

    p = sub.add_parser("upsample", parents=[common], help="apply nearest or CARAFE upsampling to a TNSR1 file")
    p.add_argument("tensor_in")
    p.add_argument("--method", choices=("nearest", "carafe"), default="carafe")
    p.add_argument("--scale", type=int)
    p.add_argument("--kup", type=int)
    p.add_argument("--cm", type=int)

    p = sub.add_parser("bench", parents=[common], help="analytic cost and measured latency of an operator")
    p.add_argument("--op", required=True, choices=sorted(OPERATORS))
    p.add_argument("--shape", type=_shape, default=(1, 64, 32, 32))
    p.add_argument("--reps", type=int)
    p.add_argument("--n-blocks", type=int, default=1)
    p.add_argument("--scale", type=int)
    p.add_argument("--kup", type=int)
    p.add_argument("--cm", type=int)
    return parser


def _resolve(args) -> RunConfig:
    cfg = RunConfig.load(args.config) if args.config else RunConfig()
    for f in fields(RunConfig):
        val = getattr(args, f.name, None)
        if val is not None:
            setattr(cfg, f.name, val)
    return cfg


def _emit(text: str, out):
    if out:
        Path(out).write_text(text)
    else:
        sys.stdout.write(text)


def cmd_eval(args, cfg: RunConfig):
    gt_dir = Path(args.gt_dir)
    if not gt_dir.is_dir():
        raise DataError("ground-truth directory not found", str(gt_dir))
    pred_dir = Path(args.pred_dir)
    if not pred_dir.is_dir():
        raise DataError("prediction directory not found", str(pred_dir))
    gts, dets = load_directories(gt_dir, pred_dir)
    report = evaluate(gts, dets, cfg.tau, args.classes)
    _emit(report.to_json(), args.out)
    if args.pr_csv:
        Path(args.pr_csv).write_text(report.pr_csv())
    return report


def _loss_rows(fh, source):
    for lineno, row in enumerate(csv.reader(fh), 1):
        if not row or not "".join(row).strip() or row[0].lstrip().startswith("#"):
            continue
        if len(row) != 8:
            raise DataError(f"expected 8 comma-separated values, got {len(row)}", source, lineno)
        try:
            vals = [float(v) for v in row]
            t, a = BBox(*vals[:4]), BBox(*vals[4:])
        except (ValueError, ConfigError) as exc:
            raise DataError(f"bad row {','.join(row)!r}: {exc}", source, lineno) from None
        yield t, a


def cmd_loss(args, cfg: RunConfig):
    loss_cfg = LossConfig(cfg.gamma, cfg.lambda1, cfg.lambda2)
    if args.csv_in == "-":
        rows = list(_loss_rows(sys.stdin, "<stdin>"))
    else:
        try:
            with open(args.csv_in, newline="", encoding="utf-8") as fh:
                rows = list(_loss_rows(fh, args.csv_in))
        except OSError as exc:
            raise DataError(str(exc.strerror or exc), args.csv_in) from None
    lines = [json.dumps(inner_siou_loss(t, a, loss_cfg).to_dict()) for t, a in rows]
    _emit("".join(line + "\n" for line in lines), args.out)


def cmd_upsample(args, cfg: RunConfig):
    if not args.out:
        raise UsageError("upsample needs --out")
    try:
        x = read_tensor(args.tensor_in)
    except OSError as exc:
        raise DataError(str(exc.strerror or exc), args.tensor_in) from None
    if args.method == "nearest":
        y = nearest_upsample(x, cfg.scale)
    else:
        carafe = CarafeConfig.init(x.channels, cfg.scale, cfg.kup, cfg.cm, cfg.seed)
        y = carafe_upsample(x, carafe)
        sidecar = {
            "seed": cfg.seed,
            "channels": carafe.channels,
            "scale": carafe.scale,
            "k_up": carafe.k_up,
            "c_m": carafe.c_m,
            "compressor": {"weight": carafe.compressor.weight.tolist(), "bias": carafe.compressor.bias.tolist()},
            "encoder": {"weight": carafe.encoder.weight.tolist(), "bias": carafe.encoder.bias.tolist()},
        }
        Path(str(args.out) + ".carafe.json").write_text(json.dumps(sidecar, sort_keys=True) + "\n")
    Path(args.out).write_bytes(tensor_to_bytes(y))


def cmd_bench(args, cfg: RunConfig):
    shape = args.shape
    n, c, h, w = shape
    kwargs = {"scale": cfg.scale, "k_up": cfg.kup, "c_m": cfg.cm, "n_blocks": args.n_blocks}
    op = build_operator(args.op, c, cfg.seed, **kwargs)
    cost = op.cost(h, w)
    result = {"op": args.op, "shape": list(shape), "seed": cfg.seed, "cost": cost.to_dict()}
    baseline = build_operator(op.baseline, c, cfg.seed, **kwargs) if op.baseline else None
    if baseline is not None:
        base_cost = baseline.cost(h, w)
        result["baseline"] = {"op": baseline.name, "cost": base_cost.to_dict()}
        result["comparison"] = {
            "flops_ratio": float(Fraction(cost.total_flops, base_cost.total_flops)) if base_cost.total_flops else None,
            "params_delta": cost.total_params - base_cost.total_params,
        }
    if cfg.reps < 0:
        raise UsageError("--reps must be >= 0")
    result["timing"] = None
    if cfg.reps > 0:
        timing = throughput_bench(op.fn, shape, cfg.reps, seed=cfg.seed)
        result["timing"] = timing.to_dict()
        if baseline is not None:
            base_timing = throughput_bench(baseline.fn, shape, cfg.reps, seed=cfg.seed)
            result["baseline"]["timing"] = base_timing.to_dict()
            result["comparison"]["latency_ratio"] = timing.median_ms / base_timing.median_ms
    _emit(json.dumps(result, indent=2, sort_keys=True) + "\n", args.out)
    return result


COMMANDS = {"eval": cmd_eval, "loss": cmd_loss, "upsample": cmd_upsample, "bench": cmd_bench}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        cfg = _resolve(args)
        COMMANDS[args.command](args, cfg)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return EXIT_USAGE
    except ConfigError as exc:
        print(f"cfis: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except DataError as exc:
        print(f"cfis: data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
