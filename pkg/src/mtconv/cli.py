"""``mtconv`` command line.

Exit codes: 0 success, 1 usage/config error, 2 numeric failure (gradient check
above tolerance, training divergence), 3 I/O error.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from importlib import resources
from pathlib import Path

import numpy as np

from .checkpoint import CheckpointError, atomic_write, load_arrays, save_checkpoint
from .complexity import count_flops, delta_sweep, sweep_csv
from .data import SyntheticSpec, gen_synthetic
from .multitemporal import ConfigError
from .network import NetworkConfig, build_network, multiview_infer
from .pooling import adjacent_cosine, select_frames, triplet_select
from .tensor import TensorFormatError, load_tensor
from .train import TrainConfig, TrainingDiverged, train_loop, write_history

EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC, EXIT_IO = 0, 1, 2, 3

log = logging.getLogger("mtconv")


class CliError(Exception):
    def __init__(self, message: str, code: int):
        super().__init__(message)
        self.code = code


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise CliError(f"{self.prog}: error: {message}", EXIT_CONFIG)


def shipped_config(name: str) -> Path:
    return Path(str(resources.files("mtconv") / "configs" / name))


def _read_json(path) -> dict:
    try:
        with open(path) as fh:
            return json.load(fh)
    except OSError as exc:
        raise CliError(f"cannot read {path}: {exc}", EXIT_IO) from exc
    except json.JSONDecodeError as exc:
        raise CliError(f"{path} is not valid JSON: {exc}", EXIT_CONFIG) from exc


def _network_config(doc: dict) -> NetworkConfig:
    return NetworkConfig.from_json(doc["network"] if "network" in doc else doc)


class Experiment:
    """A training config file: network, optimizer and synthetic train/val data."""

    def __init__(self, doc: dict, seed: int | None = None):
        try:
            self.network = _network_config(doc)
            train = dict(doc.get("train", {}))
            if seed is not None:
                train["seed"] = seed
            self.train = TrainConfig.from_json(train)
            data = doc.get("data", {})
            self.train_data = SyntheticSpec.from_json(data.get("train", {}))
            self.val_data = SyntheticSpec.from_json(data["val"]) if "val" in data else None
            self.init_seed = int(doc.get("init_seed", 0)) if seed is None else seed
        except (TypeError, ValueError, KeyError) as exc:
            raise CliError(f"bad training config: {exc}", EXIT_CONFIG) from exc

    def to_json(self) -> dict:
        doc = {"network": self.network.to_json(), "train": self.train.to_json(),
               "data": {"train": self.train_data.to_json()}, "init_seed": self.init_seed}
        if self.val_data is not None:
            doc["data"]["val"] = self.val_data.to_json()
        return doc


# -- subcommands ----------------------------------------------------------------

def cmd_gradcheck(args) -> int:
    from .suite import TOLERANCE, run_suite
    failed = 0
    for r in run_suite(args.seed):
        print(f"{'PASS' if r.passed else 'FAIL'} {r.name:26s} max_rel_err={r.error:.3e} (tol {TOLERANCE:.0e})")
        failed += not r.passed
    return EXIT_NUMERIC if failed else EXIT_OK


def cmd_train(args) -> int:
    exp = Experiment(_read_json(args.config), args.seed)
    out = Path(args.out)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise CliError(f"cannot create {out}: {exc}", EXIT_IO) from exc
    _, net = build_network(exp.network, exp.init_seed)
    train = gen_synthetic(exp.train_data)
    val = gen_synthetic(exp.val_data) if exp.val_data is not None else None
    try:
        result = train_loop(net, train, exp.train, val=val, out_dir=out)
    except TrainingDiverged as exc:
        print(f"training diverged: {exc}; last finite parameters in {exc.checkpoint}", file=sys.stderr)
        return EXIT_NUMERIC
    atomic_write(out / "config.json", json.dumps(exp.to_json(), indent=2) + "\n")
    write_history(result, out / "history.csv")
    save_checkpoint(net.params, out / "params.mtn")
    save_checkpoint(net.buffer_arrays(), out / "buffers.mtn")
    last = result.history[-1] if result.history else None
    if last is not None:
        print(f"epochs={len(result.history)} loss={last.loss:.4f} train_acc={last.train_acc:.3f} "
              f"val_acc={last.val_acc:.3f}")
    return EXIT_OK


def _parse_views(text: str) -> tuple[int, int]:
    try:
        clips, crops = (int(v) for v in text.lower().split("x"))
    except ValueError:
        raise CliError(f"--views must look like NxM, got {text!r}", EXIT_CONFIG) from None
    if clips < 1 or crops < 1:
        raise CliError("--views needs positive counts", EXIT_CONFIG)
    return clips, crops


def cmd_eval(args) -> int:
    ckpt = Path(args.checkpoint)
    n_clips, n_crops = _parse_views(args.views)
    exp = Experiment(_read_json(args.config or ckpt.parent / "config.json"))
    store, net = build_network(exp.network, exp.init_seed)
    try:
        arrays = load_arrays(ckpt)
        buffers = ckpt.parent / "buffers.mtn"
        if buffers.exists():
            net.load_buffer_arrays(load_arrays(buffers))
    except CheckpointError as exc:
        raise CliError(str(exc), EXIT_IO) from exc
    if set(arrays) != set(store.paths()):
        raise CliError(f"checkpoint {ckpt} does not match the network config", EXIT_CONFIG)
    for path, value in arrays.items():
        store[path].data[...] = value
    spec = exp.val_data or exp.train_data
    videos, labels = gen_synthetic(spec)
    correct = 0
    fallbacks = 0
    for video, label in zip(videos, labels):
        res = multiview_infer(net, video, n_clips, n_crops, exp.train.temporal_stride)
        correct += int(res.predicted == label)
        fallbacks += res.fallback
    report = {"checkpoint": str(ckpt), "views": [n_clips, n_crops], "samples": int(len(labels)),
              "accuracy": correct / max(len(labels), 1), "fallback_views": fallbacks}
    text = json.dumps(report, indent=2) + "\n"
    if args.out:
        atomic_write(args.out, text)
    sys.stdout.write(text)
    return EXIT_OK


def cmd_flops(args) -> int:
    try:
        config = _network_config(_read_json(args.config))
        if args.delta_sweep:
            deltas = [float(v) for v in args.delta_sweep.split(",") if v.strip()]
            text = sweep_csv(delta_sweep(config, deltas))
        else:
            _, net = build_network(config, args.seed)
            text = count_flops(net).to_csv()
    except (ConfigError, ValueError) as exc:
        raise CliError(f"bad config: {exc}", EXIT_CONFIG) from exc
    if args.out:
        atomic_write(args.out, text)
    sys.stdout.write(text)
    return EXIT_OK


def cmd_select_frames(args) -> int:
    try:
        t = load_tensor(args.input).data
    except OSError as exc:
        raise CliError(f"cannot read {args.input}: {exc}", EXIT_IO) from exc
    except TensorFormatError as exc:
        raise CliError(f"{args.input}: {exc}", EXIT_IO) from exc
    if t.ndim == 4:
        sel = select_frames(t)
    elif t.ndim == 2:
        sel = triplet_select(adjacent_cosine(t), t.shape[1])
    else:
        raise CliError(f"expected a C x T or C x T x H x W tensor, got shape {t.shape}", EXIT_CONFIG)
    lines = "".join(json.dumps(row) + "\n" for row in sel.to_json_lines())
    if args.out:
        atomic_write(args.out, lines)
    sys.stdout.write(lines)
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="mtconv", description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", parser_class=_Parser)

    g = sub.add_parser("gradcheck", help="finite-difference gradient suite (exit 2 if any check fails)")
    g.add_argument("--seed", type=int, default=0)
    g.set_defaults(func=cmd_gradcheck)

    t = sub.add_parser("train", help="train on synthetic clips; writes history.csv and a checkpoint")
    t.add_argument("--config", default=str(shipped_config("train_toy.json")))
    t.add_argument("--out", required=True)
    t.add_argument("--seed", type=int)
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="multi-view accuracy of a checkpoint as JSON")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--views", default="10x3")
    e.add_argument("--config")
    e.add_argument("--out")
    e.add_argument("--seed", type=int, default=0)
    e.set_defaults(func=cmd_eval)

    f = sub.add_parser("flops", help="complexity report CSV, or a delta sweep")
    f.add_argument("--config", default=str(shipped_config("toy_net.json")))
    f.add_argument("--delta-sweep")
    f.add_argument("--out")
    f.add_argument("--seed", type=int, default=0)
    f.set_defaults(func=cmd_flops)

    s = sub.add_parser("select-frames", help="frame-selection scores of an MTN1 tensor as JSON lines")
    s.add_argument("--input", required=True)
    s.add_argument("--out")
    s.add_argument("--seed", type=int, default=0)
    s.set_defaults(func=cmd_select_frames)
    return p


def run_command(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if args.command is None:
            parser.print_usage(sys.stderr)
            return EXIT_CONFIG
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
        return args.func(args)
    except CliError as exc:
        print(exc, file=sys.stderr)
        return exc.code
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except OSError as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return EXIT_IO


def main() -> None:
    sys.exit(run_command())
