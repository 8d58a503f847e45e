"""``msvar`` command-line interface.

Subcommands: synth, segment, train, eval, gradcheck. Exit codes: 0 success,
1 usage error, 2 runtime or validation failure, 3 gradient check failure.
"""

from __future__ import annotations

import argparse
import dataclasses
import sys
from pathlib import Path

import numpy as np

from . import config as config_mod
from . import evaluation, gradcheck, segmenter, synth, variational
from .fields import read_pgm, write_pgm, write_ppm
from .maskmap import BINARY
from .metrics import matched_dice

__all__ = ["main", "build_parser"]

EXIT_OK, EXIT_USAGE, EXIT_RUNTIME, EXIT_GRADCHECK = 0, 1, 2, 3


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def _common(p):
    p.add_argument("--config", type=Path, help="INI config file; flags override it")
    p.add_argument("--seed", type=int, help="master seed")
    p.add_argument("--out", type=Path, help="output directory")


def build_parser():
    parser = _Parser(prog="msvar", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", parser_class=_Parser)

    p = sub.add_parser("synth", help="write a synthetic dataset")
    _common(p)
    p.add_argument("--labeled", type=int)
    p.add_argument("--unlabeled", type=int)
    p.add_argument("--test", type=int)
    p.add_argument("--size", type=int)

    p = sub.add_parser("segment", help="segment one image by direct energy minimization")
    _common(p)
    p.add_argument("image", type=Path)
    p.add_argument("--vanilla", action="store_true",
                   help="two-phase energy without mask mapping or inclusion term")
    p.add_argument("--restarts", type=int)
    p.add_argument("--iters", type=int)
    p.add_argument("--labels", type=Path, help="ground-truth label map (8-bit PGM) for scoring")

    p = sub.add_parser("train", help="train the segmenter on a dataset directory")
    _common(p)
    p.add_argument("dataset", type=Path)
    p.add_argument("--iters", type=int, help="total training steps")
    p.add_argument("--pretrain", type=int, help="supervised warm-up steps")
    p.add_argument("--lr", type=float)
    p.add_argument("--batch", type=int)
    p.add_argument("--resume", type=Path, help="checkpoint to continue from")

    p = sub.add_parser("eval", help="score a checkpoint on a dataset's test split")
    _common(p)
    p.add_argument("checkpoint", type=Path)
    p.add_argument("dataset", type=Path)

    p = sub.add_parser("gradcheck", help="finite-difference check of every gradient")
    _common(p)
    p.add_argument("--term", action="append", choices=sorted(gradcheck.TERMS),
                   help="restrict to this term (repeatable)")
    p.add_argument("--corrupt", action="append", default=[], choices=sorted(gradcheck.TERMS),
                   help=argparse.SUPPRESS)
    return parser


def _resolve(args):
    cfg = config_mod.load(args.config)
    if args.seed is not None:
        cfg = cfg.with_seed(args.seed)
    else:
        cfg = cfg.with_seed(cfg.seed)
    return cfg


def _out_dir(args, default):
    out = args.out if args.out is not None else Path(default)
    out.mkdir(parents=True, exist_ok=True)
    return out


def cmd_synth(args):
    cfg = _resolve(args)
    counts = cfg.dataset
    counts = dataclasses.replace(
        counts,
        **{k: v for k, v in (("labeled", args.labeled), ("unlabeled", args.unlabeled),
                             ("test", args.test)) if v is not None})
    scfg = cfg.synth if args.size is None else cfg.synth.replace(size=args.size)
    cfg = cfg.replace(dataset=counts, synth=scfg)
    out = _out_dir(args, "msvar_data")
    bundle = synth.dataset(scfg, counts.labeled, counts.unlabeled, counts.test, seed=cfg.seed)
    synth.save_dataset(bundle, out)
    config_mod.dump(cfg, out / "config.ini")
    print(f"wrote {sum(bundle.sizes())} items to {out} "
          f"(labeled {counts.labeled}, unlabeled {counts.unlabeled}, test {counts.test})")
    return EXIT_OK


def _summary_lines(d):
    return "".join(f"{k} = {v}\n" for k, v in d.items())


def cmd_segment(args):
    cfg = _resolve(args)
    var = cfg.variational
    if args.vanilla:
        var = dataclasses.replace(var, mapping=BINARY, weights=var.weights.with_(eta=0.0))
    if args.restarts is not None:
        var = dataclasses.replace(var, restarts=args.restarts)
    if args.iters is not None:
        var = dataclasses.replace(var, max_iters=args.iters)
    cfg = cfg.replace(variational=var)
    image = read_pgm(args.image)
    out = _out_dir(args, "msvar_segment")

    res = variational.solve(image, var)
    labels = res.labels
    write_pgm(out / "labels.pgm", labels, bits=8, normalized=False)
    for k, mask in enumerate(res.phi):
        write_pgm(out / f"mask_{k}.pgm", mask, bits=16)
    write_pgm(out / "bias.pgm", res.bias, bits=16)
    (out / "energy.txt").write_text("".join(f"{i}\t{e!r}\n" for i, e in
                                            enumerate(res.state.energy_history)))
    write_ppm(out / "overlay.ppm", evaluation.overlay(image, labels))

    names = var.mapping.class_names or tuple(str(k) for k in range(var.mapping.n_classes))
    summary = {
        "mode": "vanilla" if args.vanilla else "full",
        "energy": repr(res.energy),
        "restart_energies": ", ".join(repr(e) for e in res.restart_energies),
        "iterations": res.state.iteration,
        "class_intensities": ", ".join(repr(float(c)) for c in res.state.c),
        "class_areas": ", ".join(str(int((labels == k).sum())) for k in range(len(names))),
        "classes_found": int(len(np.unique(labels))),
    }
    if args.labels is not None:
        truth = read_pgm(args.labels, normalize=False).astype(int)
        if truth.shape != image.shape:
            raise ValueError(f"{args.labels}: label map does not match the image size")
        n_true = int(truth.max()) + 1
        scores, assign = matched_dice(labels, truth, var.mapping.n_classes, n_true)
        summary["matched_dice"] = ", ".join(f"{s:.6f}" for s in scores)
        summary["matched_labels"] = ", ".join(str(a) for a in assign)
        if n_true == synth.N_CLASSES:
            fg = [synth.LV, synth.MYO, synth.RV]
            summary["mean_foreground_dice"] = f"{scores[fg].mean():.6f}"
            # LV and RV share an intensity range on the confusable phantom
            merged = scores[synth.LV] < 0.5 and scores[synth.RV] < 0.5
            summary["confusable_merged"] = "true" if merged else "false"
    (out / "summary.txt").write_text(_summary_lines(summary))
    config_mod.dump(cfg, out / "config.ini")
    sys.stdout.write(_summary_lines(summary))
    return EXIT_OK


def _validate_dataset(bundle, root):
    problems = []
    for item in bundle.labeled:
        name = item.provenance.get("file", "?")
        if not synth.check_mapping_consistency(item.labels):
            problems.append(f"{root / name}: labels are not consistent with the cardiac mapping")
    if not bundle.labeled:
        problems.append(f"{root}: dataset has no labeled items")
    if problems:
        raise ValueError("dataset validation failed:\n  " + "\n  ".join(problems))


def cmd_train(args):
    cfg = _resolve(args)
    tc = cfg.train
    updates = {k: v for k, v in (("total_iters", args.iters), ("pretrain_iters", args.pretrain),
                                 ("learning_rate", args.lr), ("batch_size", args.batch))
               if v is not None}
    tc = dataclasses.replace(tc, **updates, mapping=cfg.variational.mapping)
    cfg = cfg.replace(train=tc)
    bundle = synth.load_dataset(args.dataset)
    _validate_dataset(bundle, args.dataset)
    out = _out_dir(args, "msvar_train")

    if args.resume is not None:
        model, opt, start = segmenter.load_training_state(args.resume)
        if opt is None:
            raise ValueError(f"{args.resume}: checkpoint carries no optimizer state")
    else:
        model = segmenter.SegModel(tc.mapping.n_channels, seed=cfg.seed)
        opt = segmenter.Adam(model.params, tc.learning_rate, tc.beta1, tc.beta2, tc.adam_eps)
        start = 0
    model, log = segmenter.train(model, bundle.labeled, bundle.unlabeled, tc,
                                 log_path=out / "train_log.tsv", optimizer=opt,
                                 start_step=start)
    segmenter.save_checkpoint(model, out / "model.ckpt", opt, max(start, tc.total_iters))
    config_mod.dump(cfg, out / "config.ini")
    if log:
        last = log[-1]
        print(f"step {last['step']}: total {last['total']:.6g} "
              f"(sup {last['sup']:.6g}, un {last['un']:.6g}, ai {last['ai']:.6g})")
    print(f"checkpoint written to {out / 'model.ckpt'}")
    return EXIT_OK


def cmd_eval(args):
    cfg = _resolve(args)
    model = segmenter.load_checkpoint(args.checkpoint)
    bundle = synth.load_dataset(args.dataset)
    bundle.seed = cfg.seed
    spec = cfg.variational.mapping
    report = evaluation.evaluate(model, bundle, spec)
    out = _out_dir(args, "msvar_eval")
    (out / "report.txt").write_text(report.to_text())
    (out / "report.ini").write_text(report.to_keyvalue())
    config_mod.dump(cfg, out / "config.ini")
    sys.stdout.write(report.to_text())
    return EXIT_OK


def cmd_gradcheck(args):
    cfg = _resolve(args)
    results = gradcheck.run_checks(args.term, seed=cfg.seed, corrupt=tuple(args.corrupt))
    lines = [f"{'term':<26}{'max rel. error':>16}{'tolerance':>12}  result"]
    for r in results:
        lines.append(f"{r.term:<26}{r.error:16.3e}{r.tolerance:12.0e}  "
                     f"{'pass' if r.passed else 'FAIL'}")
    text = "\n".join(lines) + "\n"
    sys.stdout.write(text)
    if args.out is not None:
        args.out.mkdir(parents=True, exist_ok=True)
        (args.out / "gradcheck.txt").write_text(text)
    failed = [r.term for r in results if not r.passed]
    if failed:
        sys.stderr.write(f"gradient check failed for: {', '.join(failed)}\n")
        return EXIT_GRADCHECK
    return EXIT_OK


COMMANDS = {
    "synth": cmd_synth,
    "segment": cmd_segment,
    "train": cmd_train,
    "eval": cmd_eval,
    "gradcheck": cmd_gradcheck,
}


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if args.command is None:
            raise UsageError("msvar: a command is required "
                             f"({', '.join(COMMANDS)})")
    except UsageError as exc:
        sys.stderr.write(f"{exc}\n")
        parser.print_usage(sys.stderr)
        return EXIT_USAGE
    try:
        return COMMANDS[args.command](args)
    except (OSError, ValueError, KeyError, RuntimeError) as exc:
        sys.stderr.write(f"msvar {args.command}: error: {exc}\n")
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
