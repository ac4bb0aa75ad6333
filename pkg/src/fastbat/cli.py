"""Command-line entry point: ``fastbat {train,eval,ga,landscape,check}``.

Exit codes: 0 success, 1 runtime failure (or a failed check), 2 usage error.
"""

from __future__ import annotations

import argparse
import logging
import sys
from typing import Optional, Sequence


from fastbat import config as cfgmod
from fastbat.errors import ContractViolation
from fastbat.metrics import MetricsWriter, ga_score, loss_landscape, robust_accuracy, standard_accuracy
from fastbat.models import LossPair, ModelSpec, load_checkpoint, save_checkpoint
from fastbat.trainers import train

log = logging.getLogger("fastbat")


def _add_settings(parser: argparse.ArgumentParser) -> None:
    group = parser.add_argument_group("run settings (override the config file)")
    for key, setting in cfgmod.SETTINGS.items():
        group.add_argument("--" + key.replace("_", "-"), dest=key, default=argparse.SUPPRESS,
                           metavar="VALUE", help=f"{setting.help} (default: {setting.default})")
    parser.add_argument("--config", default=None, help="flat key = value settings file")
    parser.add_argument("-v", "--verbose", action="store_true")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="fastbat", description="Fast bi-level adversarial training toolkit")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train a model and write per-epoch metrics")
    _add_settings(p)
    p.add_argument("--metrics-out", default="metrics.csv", help="metrics CSV path")
    p.add_argument("--checkpoint-out", default=None, help="write the selected checkpoint here")

    p = sub.add_parser("eval", help="standard and PGD robust accuracy of a checkpoint")
    _add_settings(p)
    p.add_argument("--checkpoint", required=True)

    p = sub.add_parser("ga", help="gradient-alignment score of a checkpoint")
    _add_settings(p)
    p.add_argument("--checkpoint", required=True)

    p = sub.add_parser("landscape", help="loss landscape grid around one test example")
    _add_settings(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--index", type=int, default=0, help="test-split example index")
    p.add_argument("--extent", type=float, default=None, help="grid half-width (default: epsilon)")
    p.add_argument("--grid-n", type=int, default=21)
    p.add_argument("--r2-seed", type=int, default=0)
    p.add_argument("--out", default="landscape.csv")

    p = sub.add_parser("check", help="run the oracle verification suite")
    p.add_argument("--full", action="store_true", help="full instance counts instead of the quick suite")
    return parser


def _settings(args: argparse.Namespace) -> dict:
    cli_values = {}
    for key in cfgmod.SETTINGS:
        if key in vars(args):
            cli_values[key] = cfgmod.parse_value(key, getattr(args, key))
    file_values = cfgmod.load_config_file(args.config) if args.config else {}
    return cfgmod.merge(file_values, cli_values)


def _spec_from_checkpoint(theta, values: dict) -> ModelSpec:
    tensors = theta.to_dict()
    n_layers = sum(1 for k in tensors if k.endswith(".weight"))
    if n_layers == 0:
        raise ContractViolation("checkpoint holds no layers")
    shapes = [tensors[f"layer{i}.weight"].shape for i in range(n_layers)]
    return ModelSpec(shapes[0][0], shapes[-1][1], tuple(s[1] for s in shapes[:-1]), values["activation"],
                     values["seed"])


def _load(args, values):
    theta = load_checkpoint(args.checkpoint)
    spec = _spec_from_checkpoint(theta, values)
    dataset = cfgmod.build_dataset(values)
    x, y = dataset.test() if len(dataset.test_idx) else dataset.train()
    if values["eval_size"] is not None:
        x, y = x[: values["eval_size"]], y[: values["eval_size"]]
    return spec, theta, x, y


def cmd_train(args) -> int:
    values = _settings(args)
    run_cfg = cfgmod.train_config(values)
    dataset = cfgmod.build_dataset(values)
    writer = MetricsWriter(args.metrics_out)
    result = train(run_cfg, dataset, on_epoch=writer.append)
    if args.checkpoint_out:
        save_checkpoint(args.checkpoint_out, result.theta)
    best = f", selected epoch {result.best_epoch}" if result.best_epoch else ""
    print(f"trained {len(result.history)} epochs{best}; metrics in {args.metrics_out}")
    return 0


def cmd_eval(args) -> int:
    values = _settings(args)
    spec, theta, x, y = _load(args, values)
    pair = LossPair(spec)
    sa = standard_accuracy(spec, theta, x, y)
    ra = robust_accuracy(pair, theta, x, y, cfgmod.pgd_config(values), values["epsilon"])
    print(f"SA {sa:.2f}%  RA-PGD {ra:.2f}%  (n={len(y)}, eps={values['epsilon']:.4g})")
    return 0


def cmd_ga(args) -> int:
    values = _settings(args)
    spec, theta, x, y = _load(args, values)
    score = ga_score(LossPair(spec), theta, x, y, values["epsilon"], values["ga_samples"], values["seed"])
    print(f"GA {score:.6f}  (n={len(y)}, samples={values['ga_samples']})")
    return 0


def cmd_landscape(args) -> int:
    values = _settings(args)
    spec, theta, x, y = _load(args, values)
    if not 0 <= args.index < len(y):
        raise ContractViolation(f"index {args.index} outside the evaluation split of size {len(y)}")
    extent = values["epsilon"] if args.extent is None else args.extent
    grid = loss_landscape(LossPair(spec), theta, x[args.index], int(y[args.index]), extent, args.grid_n,
                          args.r2_seed)
    grid.to_csv(args.out)
    print(f"wrote {args.grid_n}x{args.grid_n} grid to {args.out}; centre loss {grid.center():.6f}")
    return 0


def cmd_check(args) -> int:
    from fastbat.checks import run_suite

    results = run_suite(quick=not args.full)
    for r in results:
        print(r.line())
    gating = [r for r in results if r.gating]
    failed = [r for r in gating if not r.passed]
    print(f"{len(gating) - len(failed)}/{len(gating)} gating checks passed, "
          f"{len(results) - len(gating)} informational")
    return 1 if failed else 0


COMMANDS = {"train": cmd_train, "eval": cmd_eval, "ga": cmd_ga, "landscape": cmd_landscape, "check": cmd_check}


def run_cli(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code) if exc.code is not None else 0
    logging.basicConfig(level=logging.INFO if getattr(args, "verbose", False) else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return COMMANDS[args.command](args)
    except Exception as exc:  # noqa: BLE001 - the CLI reports every runtime failure the same way
        print(f"fastbat {args.command}: error: {exc}", file=sys.stderr)
        return 1


def main() -> None:
    sys.exit(run_cli())


if __name__ == "__main__":
    main()
