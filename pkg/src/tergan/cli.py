"""Command-line entry point: ``tergan <command> [options]``.

Every failure prints a single line ``error[<kind>]: <message>`` to stderr
and exits with 1 (validation/configuration), 2 (runtime/divergence) or
3 (I/O and checkpoint integrity).
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import applications as apps
from ._validation import ConfigurationError, TerganError, ValidationError
from .config import RunConfig, check_manifest, desk_config, train
from .data import (DatasetManifest, ingest_folder, load_images, make_folds, read_image,
                   synth_generate, write_image)
from .trainer import StageBudgets, load_checkpoint

log = logging.getLogger("tergan")


def _state(args):
    return load_checkpoint(args.checkpoint)


def _manifest_for(state, path, k=None, refold_seed=None):
    m = DatasetManifest.load(path)
    check_manifest(m, state.spec)
    if k is not None and refold_seed is not None:
        m = make_folds(m, k, refold_seed)
    return m


def _images_for(state, m):
    return load_images(m, image_size=state.spec.image_size)


# -- commands -----------------------------------------------------------------


def cmd_synth(args):
    m = synth_generate(args.identities, args.expressions, args.image_size, args.seed)
    m = make_folds(m, args.folds, args.fold_seed)
    out = Path(args.out)
    images = load_images(m)
    for rec, img in zip(m.records, images):
        rel = Path("images") / f"{rec['identity']:03d}" / f"{rec['expression']}.png"
        (out / rel.parent).mkdir(parents=True, exist_ok=True)
        write_image(out / rel, img)
        rec["path"] = rel.as_posix()
    m.root = None
    m.save(out / "manifest.json")
    print(f"wrote {len(m)} images and {out / 'manifest.json'}")


def cmd_ingest(args):
    names = args.expressions.split(",") if args.expressions else None
    kw = {"expression_names": names} if names else {}
    m = ingest_folder(args.root, args.image_size, **kw)
    if args.folds:
        m = make_folds(m, args.folds, args.fold_seed)
    m.save(args.out)
    print(f"ingested {len(m)} images of {m.n_identities} identities "
          f"({len(m.skipped)} undecodable file(s) skipped) -> {args.out}")


def cmd_init_config(args):
    cfg = desk_config(args.output_dir) if args.desk else RunConfig(output_dir=args.output_dir)
    cfg.save(args.out)
    print(f"wrote {args.out}")


def cmd_train(args):
    cfg = RunConfig.load(args.config)
    if args.stages:
        try:
            budgets = [int(v) for v in args.stages.split(",")]
        except ValueError:
            raise ValidationError(f"--stages must be three integers, got {args.stages!r}") from None
        if len(budgets) != 3:
            raise ValidationError(f"--stages must be three integers, got {args.stages!r}")
        cfg.stages = StageBudgets(*budgets)
    if args.output_dir:
        cfg.output_dir = args.output_dir
    state = train(cfg, resume=args.resume, announce=print)
    print(f"done: global step {state.global_step}, checkpoint in {cfg.output_dir}")


def cmd_transfer(args):
    state = _state(args)
    size = state.spec.image_size
    src, tgt = read_image(args.source, size), read_image(args.target, size)
    out = apps.transfer(state, src, tgt)
    write_image(args.out, out)
    if args.grid:
        apps.save_grid(args.grid, [[src, tgt, out]], col_labels=["source", "target", "result"])
    print(f"wrote {args.out}")


def cmd_edit(args):
    state = _state(args)
    size = state.spec.image_size
    tgt, ex = read_image(args.target, size), read_image(args.exemplar, size)
    out = apps.edit(state, tgt, ex)
    write_image(args.out, out)
    if args.grid:
        apps.save_grid(args.grid, [[tgt, ex, out]], col_labels=["target", "exemplar", "edited"])
    print(f"wrote {args.out}")


def cmd_recognize(args):
    state = _state(args)
    m = _manifest_for(state, args.manifest)
    train_idx = m.record_indices(None if args.train_folds is None else
                                 [int(f) for f in args.train_folds.split(",")])
    emb = apps.encode_expressions(state, load_images(m, train_idx, state.spec.image_size))
    probe = apps.make_probe().fit(emb, m.expressions[train_idx])
    images = np.stack([read_image(p, state.spec.image_size) for p in args.images])
    labels = apps.recognize(state, images, probe)
    names = m.expression_names or [str(i) for i in range(m.n_expressions)]
    for path, y in zip(args.images, labels):
        print(f"{path}\t{names[int(y)]}")


def cmd_eval_fer(args):
    state = _state(args)
    m = _manifest_for(state, args.manifest, args.k, args.refold_seed)
    result = apps.evaluate_fer(state, m, args.k, images=_images_for(state, m))
    if args.baseline:
        base = apps.encode_expressions(state, _images_for(state, m), baseline=True)
        result = apps.evaluate_fer(base, m, args.k)
    text = json.dumps(result.to_dict())
    if args.out:
        result.save(args.out)
    print(text)


def cmd_dump_embeddings(args):
    state = _state(args)
    m = _manifest_for(state, args.manifest)
    images = _images_for(state, m)
    out = Path(args.out)
    for baseline, path in ((False, out), (True, out.with_name(out.stem + "_baseline" + out.suffix))):
        dump = apps.dump_embeddings(state, m, project=args.project, baseline=baseline,
                                    images=images, seed=args.seed)
        dump.to_csv(path)
        print(f"wrote {len(dump)} rows to {path}")


# -- parser -------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="tergan", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("synth", help="render the synthetic two-factor face set")
    s.add_argument("--identities", type=int, default=20)
    s.add_argument("--expressions", type=int, default=6)
    s.add_argument("--image-size", type=int, default=64)
    s.add_argument("--folds", type=int, default=5)
    s.add_argument("--seed", type=int, default=7)
    s.add_argument("--fold-seed", type=int, default=0)
    s.add_argument("--out", default="synth")
    s.set_defaults(fn=cmd_synth)

    s = sub.add_parser("ingest", help="index <root>/<identity>/<expression>/<images>")
    s.add_argument("--root", required=True)
    s.add_argument("--out", default="manifest.json")
    s.add_argument("--image-size", type=int, default=64)
    s.add_argument("--expressions", help="comma-separated expression directory names")
    s.add_argument("--folds", type=int, default=0, help="assign k identity folds (0 = none)")
    s.add_argument("--fold-seed", type=int, default=0)
    s.set_defaults(fn=cmd_ingest)

    s = sub.add_parser("init-config", help="write a complete default config")
    s.add_argument("--out", default="config.json")
    s.add_argument("--output-dir", default="run")
    s.add_argument("--desk", action="store_true", help="reduced-width 32 px synthetic setup")
    s.set_defaults(fn=cmd_init_config)

    s = sub.add_parser("train", help="run the training curriculum")
    s.add_argument("--config", required=True)
    s.add_argument("--stages", help="override step budgets: pretrain_expr,pretrain_id,adversarial")
    s.add_argument("--resume", help="checkpoint to continue from")
    s.add_argument("--output-dir", help="override output_dir from the config")
    s.set_defaults(fn=cmd_train)

    for name, fn, roles in (("transfer", cmd_transfer, ("source", "target")),
                            ("edit", cmd_edit, ("target", "exemplar"))):
        s = sub.add_parser(name, help=f"{name} an expression")
        s.add_argument("--checkpoint", required=True)
        for role in roles:
            s.add_argument(f"--{role}", required=True)
        s.add_argument("--out", required=True)
        s.add_argument("--grid", help="also write an image grid PNG")
        s.set_defaults(fn=fn)

    s = sub.add_parser("recognize", help="classify expressions with the detached encoder")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--manifest", required=True, help="labelled images to fit the probe on")
    s.add_argument("--train-folds", help="comma-separated folds to fit on (default: all)")
    s.add_argument("images", nargs="+")
    s.set_defaults(fn=cmd_recognize)

    s = sub.add_parser("eval-fer", help="identity-independent k-fold FER accuracy")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--manifest", required=True)
    s.add_argument("--k", type=int, default=8)
    s.add_argument("--refold-seed", type=int, help="reassign k folds instead of using the manifest's")
    s.add_argument("--baseline", action="store_true", help="evaluate the frozen pre-trained encoder")
    s.add_argument("--out")
    s.set_defaults(fn=cmd_eval_fer)

    s = sub.add_parser("dump-embeddings", help="write f(e) of every record as CSV")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--manifest", required=True)
    s.add_argument("--out", default="embeddings.csv")
    s.add_argument("--project", action="store_true", help="append 2-D t-SNE coordinates")
    s.add_argument("--seed", type=int, default=0)
    s.set_defaults(fn=cmd_dump_embeddings)
    return p


def _fail(kind: str, message: str, code: int) -> int:
    print(f"error[{kind}]: {' '.join(str(message).split())}", file=sys.stderr)
    return code


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        args.fn(args)
    except TerganError as exc:
        return _fail(exc.kind, exc, exc.exit_code)
    except OSError as exc:
        return _fail("io", exc, 3)
    except (ValueError, KeyError) as exc:
        return _fail("validation", exc, 1)
    return 0


if __name__ == "__main__":
    sys.exit(main())
