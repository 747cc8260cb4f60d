"""Command-line entry point: ``mmgl {generate-data,train,eval,ablate,gradcheck}``."""

import argparse
import json
import logging
import sys
from pathlib import Path

from ..graphdoc import SynthParams, write_dataset
from .ablate import format_table, run_grid
from .config import RunConfig, gradcheck_config, load_config
from .engine import append_result, evaluate, load_data, load_trained, train
from .gradcheck import format_report, run_gradcheck

log = logging.getLogger("mmgl")


def _kv(text):
    if "=" not in text:
        raise argparse.ArgumentTypeError(f"expected key=value, got {text!r}")
    k, v = text.split("=", 1)
    return k.strip(), v


def _common(p):
    p.add_argument("--config", help="JSON run configuration file")
    p.add_argument("--set", dest="overrides", type=_kv, action="append", default=[],
                   metavar="KEY=VALUE", help="override a (dotted) config key; repeatable")
    p.add_argument("--seed", type=int)
    p.add_argument("--out")


def _run_flags(p):
    p.add_argument("--data", help="directory holding train.jsonl, val.jsonl, vocab.txt")
    p.add_argument("--regime")
    p.add_argument("--encoding")
    p.add_argument("--pe")
    p.add_argument("--peft")
    p.add_argument("--steps", type=int)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--lr", type=float)


def resolve_config(args, base=None):
    cfg = load_config(args.config) if args.config else (base or RunConfig())
    flags = {
        "seed": args.seed, "out": args.out,
        "data_dir": getattr(args, "data", None), "regime": getattr(args, "regime", None),
        "encoding": getattr(args, "encoding", None), "pe.kind": getattr(args, "pe", None),
        "peft.kind": getattr(args, "peft", None), "steps": getattr(args, "steps", None),
        "batch_size": getattr(args, "batch_size", None),
        "learning_rate": getattr(args, "lr", None),
    }
    overrides = {k: v for k, v in flags.items() if v is not None}
    overrides.update(dict(args.overrides))
    return cfg.with_overrides(overrides) if overrides else cfg


def cmd_generate_data(args):
    params = SynthParams()
    if args.config:
        with open(args.config, encoding="utf-8") as fh:
            params = SynthParams(**json.load(fh).get("synth", {}))
    for key, value in dict(args.overrides).items():
        key = key.removeprefix("synth.")
        if not hasattr(params, key):
            raise SystemExit(f"unknown synth parameter {key!r}")
        setattr(params, key, type(getattr(params, key))(json.loads(value)))
    for key in ("n_pages", "leak_count", "vocab_size"):
        if getattr(args, key) is not None:
            setattr(params, key, getattr(args, key))
    try:
        paths = write_dataset(args.out or "data", args.seed or 0, params, args.n_val_pages)
    except OSError as exc:
        raise SystemExit(f"cannot write dataset: {exc}") from None
    for name, path in paths.items():
        print(f"{name}: {path}")
    return 0


def cmd_train(args):
    cfg = resolve_config(args).validate()
    _, rows = train(cfg)
    for row in rows:
        print(json.dumps(row))
    print(f"checkpoint: {Path(cfg.out) / 'model.mmgl'}")
    return 0


def cmd_eval(args):
    cfg = resolve_config(args).validate()
    data = load_data(cfg)
    checkpoint = args.checkpoint or Path(cfg.out) / "model.mmgl"
    model = load_trained(cfg, checkpoint, data.vocab)
    row = evaluate(cfg, model, data)
    results = args.results or Path(cfg.out) / "results.csv"
    append_result(results, row)
    print(format_table([row], varied=[]))
    print(f"appended to {results}")
    return 0


def cmd_ablate(args):
    with open(args.grid, encoding="utf-8") as fh:
        grid = json.load(fh)
    base = RunConfig.from_dict(grid.get("base", {}))
    args.config = None
    base = resolve_config(args, base)
    out = args.out or base.out
    rows, rejected = run_grid(base, grid.get("axes", {}), out)
    for overrides, err in rejected:
        print(f"rejected {overrides}: {err}")
    print(format_table(rows))
    print(f"results: {Path(out) / 'results.csv'}")
    return 0


def cmd_gradcheck(args):
    cfg = resolve_config(args, gradcheck_config())
    results = run_gradcheck(cfg, encodings=args.encodings, pes=args.pes)
    report = format_report(results, args.tol)
    print(report)
    if args.out:
        Path(args.out).mkdir(parents=True, exist_ok=True)
        (Path(args.out) / "gradcheck.txt").write_text(report + "\n", encoding="utf-8")
    failed = [r.label for r in results if r.failing(args.tol)]
    if failed:
        print(f"gradcheck FAILED for: {', '.join(failed)}")
        return 1
    print(f"gradcheck passed: {len(results)} combinations, tol {args.tol:g}")
    return 0


def build_parser():
    parser = argparse.ArgumentParser(prog="mmgl", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("generate-data", help="write a synthetic page-graph dataset")
    _common(p)
    p.add_argument("--n-pages", type=int)
    p.add_argument("--n-val-pages", type=int)
    p.add_argument("--leak-count", type=int)
    p.add_argument("--vocab-size", type=int)
    p.set_defaults(func=cmd_generate_data)

    p = sub.add_parser("train", help="train one configuration")
    _common(p)
    _run_flags(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="decode the validation set and append a results row")
    _common(p)
    _run_flags(p)
    p.add_argument("--checkpoint")
    p.add_argument("--results", help="results CSV (appended)")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("ablate", help="train and evaluate a grid of configurations")
    _common(p)
    p.add_argument("--grid", required=True, help='JSON: {"base": {...}, "axes": {"regime": [...], ...}}')
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("gradcheck", help="finite-difference check of all gradients on a tiny model")
    _common(p)
    p.add_argument("--tol", type=float, default=1e-4)
    p.add_argument("--encodings", nargs="*")
    p.add_argument("--pes", nargs="*")
    p.set_defaults(func=cmd_gradcheck)
    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(levelname)s %(message)s")
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
