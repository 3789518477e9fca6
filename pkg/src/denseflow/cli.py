"""Command-line interface: ``denseflow <command> ...``.

Exit status 0 on success, 1 on operational failure (unreadable or corrupt
files, non-finite loss), 2 on usage or configuration errors.  Failures print
one line to stderr::

    denseflow: error[<code>] <Kind>: <message>
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

import numpy as np

from .checkpoint import CheckpointError, load_checkpoint
from .config import ConfigError, build_dataclass, dataclass_lines, parse_overrides, parse_text
from .data import load_dataset, load_sample, sample_ids, save_dataset
from .evaluate import evaluate_network, evaluate_predictions, predict_flow
from .formats import FormatError, read_flo, read_ppm, write_flo, write_ppm
from .gradsuite import run_suite
from .network import NetworkConfig, build, plan_text
from .toy import ToyConfig, gen_toy_dataset
from .trainer import (
    AugmentationConfig,
    LossConfig,
    NonFiniteLossError,
    TrainConfig,
    init_network,
    network_from_checkpoint,
    train,
)
from .visualize import flow_to_color

SECTIONS = ("net", "train", "aug", "loss", "toy")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


# -- configuration ------------------------------------------------------------------


def load_settings(config_path=None, overrides=()):
    """Config file plus ``--set`` overrides -> {section: {field: raw text}}."""
    raw = {}
    if config_path is not None:
        path = Path(config_path)
        try:
            text = path.read_text(encoding="utf-8")
        except OSError as exc:
            raise ConfigError(f"cannot read config file {path}: {exc.strerror}") from None
        raw.update(parse_text(text, str(path)))
    raw.update(parse_overrides(overrides))
    settings = {s: {} for s in SECTIONS}
    for key, value in raw.items():
        section, dot, name = key.partition(".")
        if not dot or section not in settings or not name:
            raise ConfigError(f"unknown config key {key}")
        settings[section][name] = value
    return settings


def make_train_config(settings, seed=None):
    train_fields = dict(settings["train"])
    if seed is not None:
        train_fields["seed"] = str(seed)
    aug = build_dataclass(AugmentationConfig, settings["aug"], "aug")
    loss = build_dataclass(LossConfig, settings["loss"], "loss")
    for nested in ("augmentation", "loss"):
        if nested in train_fields:
            raise ConfigError(f"unknown config key train.{nested}")
    cfg = build_dataclass(TrainConfig, train_fields, "train")
    return TrainConfig(**cfg.scalar_fields(), augmentation=aug, loss=loss)


def make_toy_config(settings, seed=None):
    fields = dict(settings["toy"])
    if seed is not None:
        fields["seed"] = str(seed)
    return build_dataclass(ToyConfig, fields, "toy")


def _reject_unused(settings, used):
    for section in SECTIONS:
        if section not in used and settings[section]:
            key = next(iter(settings[section]))
            raise ConfigError(f"config key {section}.{key} does not apply to this command")


# -- commands -------------------------------------------------------------------------


def cmd_gen_data(args, settings):
    _reject_unused(settings, {"toy"})
    cfg = make_toy_config(settings, args.seed)
    if args.count < 1:
        raise ConfigError("--count must be >= 1")
    samples = gen_toy_dataset(cfg, args.count)
    save_dataset(args.out, samples)
    Path(args.out, "toy.cfg").write_text("\n".join(dataclass_lines(cfg, "toy")) + "\n", encoding="utf-8")
    print(f"wrote {len(samples)} samples to {args.out}")


def cmd_train(args, settings):
    _reject_unused(settings, {"net", "train", "aug", "loss"})
    net_cfg = NetworkConfig.from_mapping(settings["net"])
    cfg = make_train_config(settings, args.seed)
    samples = load_dataset(args.data, with_gt=False)
    heldout = load_dataset(args.heldout, with_gt=True) if args.heldout else None
    if heldout is not None and cfg.eval_every == 0:
        raise ConfigError("--heldout needs train.eval_every > 0")
    net = init_network(net_cfg, cfg.seed)
    lines = [f"net.{line}" for line in net_cfg.to_text().splitlines()] + cfg.to_lines()
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.cfg").write_text("\n".join(lines) + "\n", encoding="utf-8")
    progress = None
    if not args.quiet:
        def progress(rec):
            if rec.iteration % args.print_every == 0 or rec.epe is not None:
                print(rec.format(), flush=True)
    result = train(samples, cfg, net, out, heldout=heldout, resume=args.resume,
                   header_lines=lines, progress=progress)
    print(f"final checkpoint {result.final_checkpoint} at iteration {result.iteration}")


def _load_net(path):
    return network_from_checkpoint(load_checkpoint(path))


def cmd_predict(args, settings):
    _reject_unused(settings, set())
    net = _load_net(args.checkpoint)
    f1 = read_ppm(args.frame1)
    f2 = read_ppm(args.frame2)
    write_flo(args.out, predict_flow(net, f1, f2))
    print(f"wrote {args.out}")


def cmd_predict_dataset(args, settings):
    _reject_unused(settings, set())
    net = _load_net(args.checkpoint)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for sid in sample_ids(args.data):
        s = load_sample(args.data, sid, with_gt=False)
        write_flo(out / f"{sid}_pred.flo", predict_flow(net, s.frame1, s.frame2))
    print(f"wrote predictions to {out}")


def cmd_eval(args, settings):
    _reject_unused(settings, set())
    samples = load_dataset(args.data, with_gt=True)
    if args.checkpoint is not None:
        report = evaluate_network(_load_net(args.checkpoint), samples)
    else:
        preds = [read_flo(Path(args.predictions) / f"{s.sample_id}_pred.flo") for s in samples]
        report = evaluate_predictions(samples, preds)
    text = report.table()
    if args.output:
        Path(args.output).write_text(text, encoding="utf-8")
    sys.stdout.write(text)


def cmd_visualize(args, settings):
    _reject_unused(settings, set())
    flow = read_flo(args.flow)
    image, max_mag = flow_to_color(flow, args.max_mag)
    write_ppm(args.out, image.transpose(2, 0, 1).astype(np.float32) / 255.0)
    Path(args.out).with_suffix(".txt").write_text(f"max_mag = {max_mag!r}\n", encoding="utf-8")
    print(f"wrote {args.out} (max_mag {max_mag:.6g})")


def cmd_gradcheck(args, settings):
    _reject_unused(settings, set())
    reports = run_suite(seed=args.seed or 0, include_network=not args.skip_network)
    for r in reports:
        print(r.summary())
    failed = [r.name for r in reports if not r.passed]
    print(f"{len(reports) - len(failed)}/{len(reports)} checks passed")
    return 1 if failed else 0


def cmd_plan(args, settings):
    _reject_unused(settings, {"net"})
    cfg = NetworkConfig.from_mapping(settings["net"])
    net = build(cfg)
    sys.stdout.write(plan_text(cfg))
    print(f"growth_rate {cfg.growth_rate}")
    print(f"parameters {net.param_count()}")


# -- entry point ------------------------------------------------------------------------


def build_parser():
    parser = _Parser(prog="denseflow", description="Unsupervised optical flow with a fully-convolutional DenseNet.")
    common = _Parser(add_help=False)
    common.add_argument("--config", help="key = value config file")
    common.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                        help="override one config key (repeatable)")
    common.add_argument("--seed", type=int, help="overrides train.seed / toy.seed")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("gen-data", parents=[common], help="write a procedural toy dataset")
    p.add_argument("out")
    p.add_argument("--count", type=int, default=64)
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", parents=[common], help="unsupervised training")
    p.add_argument("data")
    p.add_argument("out", help="run directory for train.log and checkpoints")
    p.add_argument("--heldout", help="dataset with ground truth for periodic EPE")
    p.add_argument("--resume", help="checkpoint to continue from")
    p.add_argument("--print-every", type=int, default=50)
    p.add_argument("--quiet", action="store_true")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("predict", parents=[common], help="flow for one image pair")
    p.add_argument("checkpoint")
    p.add_argument("frame1")
    p.add_argument("frame2")
    p.add_argument("out", help=".flo output path")
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("predict-dataset", parents=[common], help="flow for every pair of a dataset")
    p.add_argument("checkpoint")
    p.add_argument("data")
    p.add_argument("out", help="directory for NNNNN_pred.flo files")
    p.set_defaults(func=cmd_predict_dataset)

    p = sub.add_parser("eval", parents=[common], help="endpoint error table")
    p.add_argument("data")
    src = p.add_mutually_exclusive_group(required=True)
    src.add_argument("--checkpoint")
    src.add_argument("--predictions", help="directory of NNNNN_pred.flo files")
    p.add_argument("--output", help="also write the table here")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("visualize", parents=[common], help="render a .flo file as colour PPM")
    p.add_argument("flow")
    p.add_argument("out")
    p.add_argument("--max-mag", type=float)
    p.set_defaults(func=cmd_visualize)

    p = sub.add_parser("gradcheck", parents=[common], help="finite-difference gradient suite")
    p.add_argument("--skip-network", action="store_true")
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("plan", parents=[common], help="structural plan and parameter count")
    p.set_defaults(func=cmd_plan)
    return parser


def _fail(code, kind, message):
    message = " ".join(str(message).split()) or kind
    print(f"denseflow: error[{code}] {kind}: {message}", file=sys.stderr)
    return code


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        settings = load_settings(args.config, args.set)
        status = args.func(args, settings)
        return 0 if status is None else status
    except (UsageError, ConfigError) as exc:
        return _fail(2, type(exc).__name__, exc)
    except (OSError, FormatError, CheckpointError, NonFiniteLossError, ValueError) as exc:
        return _fail(1, type(exc).__name__, exc)
    except KeyboardInterrupt:
        return _fail(1, "KeyboardInterrupt", "interrupted")


if __name__ == "__main__":
    sys.exit(main())
