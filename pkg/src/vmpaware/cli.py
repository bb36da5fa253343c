"""Command-line entry point: ``vmpaware <subcommand> ...``."""

from __future__ import annotations

import argparse
import configparser
import sys

from . import checks
from .dataset import build_dataset, read_dataset
from .errors import VmpError
from .evaluation import (
    cluster_distances,
    format_report,
    mean_distance_by_gap,
    monotonicity_report,
    retrieval_report,
    silhouette,
)
from .hier_mask import DECODER, ENCODER, build_hier_mask, expressivity_check, format_mask, tokenize_vm
from .isa import parse_native, parse_vm, serialize_vm
from .losses import CONFIG_KEYS, LossConfig, loss_config_from_mapping
from .normalizer import normalize_text
from .trainer import RUN_KEYS, TrainRun, embed_records, load_checkpoint, save_checkpoint, train
from .virtualizer import OptLevel, ProtectionLevel, virtualize

MASK_VARIANTS = {"decoder": DECODER, "encoder": ENCODER}


def _read(path):
    with open(path, encoding="utf-8") as fh:
        return fh.read()


def _write(path, text):
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(text)


def _csv(text):
    return [x for x in text.split(",") if x]


def read_config(path):
    """Flat ``key = value`` file mixing loss keys and run keys; ``#`` comments."""
    parser = configparser.ConfigParser(comment_prefixes=("#", ";"))
    parser.optionxform = str
    try:
        parser.read_string("[config]\n" + _read(path))
    except configparser.Error as exc:
        raise VmpError(f"bad config {path}: {' '.join(exc.message.split())}") from None
    if parser.sections() != ["config"]:
        raise VmpError(f"bad config {path}: sections are not supported")
    loss, kwargs = {}, {}
    for key, raw in parser["config"].items():
        if key in CONFIG_KEYS:
            loss[key] = raw
        elif key == "levels":
            kwargs["levels"] = tuple(int(ProtectionLevel.parse(x)) for x in _csv(raw))
        elif key in RUN_KEYS:
            kwargs[key] = RUN_KEYS[key](raw)
        else:
            raise VmpError(f"unknown config key {key!r}")
    return loss_config_from_mapping(loss), TrainRun(**kwargs)


def cmd_virtualize(args):
    level = ProtectionLevel.parse(args.level)
    vm = virtualize(parse_native(_read(args.input)), level, args.seed)
    _write(args.output, serialize_vm(vm))


def cmd_normalize(args):
    _write(args.output, normalize_text(_read(args.input)))


def cmd_mask(args):
    f = tokenize_vm(parse_vm(_read(args.input)))
    mask = build_hier_mask(f, MASK_VARIANTS[args.variant])
    _write(args.output, format_mask(mask) + "\n")
    print(expressivity_check(f, mask).summary())


def cmd_gen_dataset(args):
    opts = [OptLevel(o) for o in _csv(args.opts)]
    levels = [ProtectionLevel.parse(l) for l in _csv(args.levels)]
    if any(l < 0 for l in levels):
        raise VmpError("dataset levels must be VM protection levels L0..L3")
    build_dataset(args.functions, opts, levels, args.seed, path=args.output)


def _trace_line(row):
    return "\t".join([row["stage"], str(row["epoch"])] +
                     [f"{k}={row[k]!r}" for k in ("lm", "fcl", "pcl", "peo")])


def cmd_train(args):
    cfg, run = read_config(args.config) if args.config else (LossConfig(), TrainRun())
    _, records = read_dataset(args.dataset)
    result = train(records, cfg, run)
    for row in result.trace:
        print(_trace_line(row))
    save_checkpoint(result.model, args.out)


def cmd_eval(args):
    cfg = read_config(args.config)[0] if args.config else LossConfig()
    model = load_checkpoint(args.ckpt)
    _, records = read_dataset(args.dataset)
    emb = embed_records(model, records)
    rows = retrieval_report(emb, [int(k) for k in _csv(args.k)], seed=args.seed)
    rows.append(("silhouette", "all", silhouette(emb)))
    intra, inter = cluster_distances(emb)
    rows += [("intra_distance", "all", intra), ("inter_distance", "all", inter)]
    for (s, t), st in monotonicity_report(emb, cfg.beta, cfg.margin_m).items():
        rows.append(("mean_distance", f"{s},{t}", st.mean))
        rows.append(("violation_rate", f"{s},{t}", st.violation_rate))
    for gap, mean in mean_distance_by_gap(emb).items():
        rows.append(("mean_distance", f"gap={gap}", mean))
    _write(args.report, format_report(rows))


def cmd_check(args):
    results = checks.run_all(args.programs, args.states, args.batches, args.seed)
    for r in results:
        print(r.summary())
    return 0 if all(r.ok for r in results) else 1


def build_parser():
    p = argparse.ArgumentParser(prog="vmpaware")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("virtualize", help="native text -> VM text")
    s.add_argument("--level", required=True, choices=["L0", "L1", "L2", "L3"])
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("input")
    s.add_argument("output")
    s.set_defaults(func=cmd_virtualize)

    s = sub.add_parser("normalize", help="canonicalize VM text")
    s.add_argument("input")
    s.add_argument("output")
    s.set_defaults(func=cmd_normalize)

    s = sub.add_parser("mask", help="hierarchical attention mask of a VM function")
    s.add_argument("--variant", choices=sorted(MASK_VARIANTS), default="decoder")
    s.add_argument("input")
    s.add_argument("output")
    s.set_defaults(func=cmd_mask)

    s = sub.add_parser("gen-dataset", help="synthetic paired corpus")
    s.add_argument("--functions", type=int, required=True)
    s.add_argument("--opts", default="O0", help="comma list, e.g. O0,O1,O2")
    s.add_argument("--levels", default="L0,L1,L2,L3", help="comma list of L0..L3")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("output")
    s.set_defaults(func=cmd_gen_dataset)

    s = sub.add_parser("train", help="train embeddings; loss trace on stdout")
    s.add_argument("--config")
    s.add_argument("--dataset", required=True)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("eval", help="retrieval and geometry report")
    s.add_argument("--ckpt", required=True)
    s.add_argument("--dataset", required=True)
    s.add_argument("--k", default="50,100,200,500")
    s.add_argument("--config")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("report")
    s.set_defaults(func=cmd_eval)

    s = sub.add_parser("check", help="run the built-in property suites")
    s.add_argument("--programs", type=int, default=200)
    s.add_argument("--states", type=int, default=10)
    s.add_argument("--batches", type=int, default=20)
    s.add_argument("--seed", type=int, default=0)
    s.set_defaults(func=cmd_check)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args) or 0
    except (VmpError, ValueError, OSError) as exc:
        msg = str(exc).splitlines()[0] if str(exc) else type(exc).__name__
        print(f"vmpaware {args.command}: error: {msg}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
