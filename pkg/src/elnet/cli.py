"""Command-line entry point.

Subcommands cover the full workflow: synthetic data generation, backbone
pretraining, fine-tuning, the enhance/annotate pipelines, label-quality
scoring, mask metrics, the relabeling evaluation protocol, and the
gradient-check suite. Reports go to stdout (or --out FILE); logs and the
resolved effective configuration go to stderr. Exit codes: 0 success,
1 domain error, 2 usage error.

ELNET_THREADS caps the numerical worker pool; it must be read before numpy
loads, so the heavy imports happen inside the command handlers.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys

__all__ = ["main", "dispatch", "build_parser"]

log = logging.getLogger("elnet.cli")


def _apply_thread_cap() -> None:
    cap = os.environ.get("ELNET_THREADS")
    if not cap:
        return
    if not cap.isdigit() or int(cap) < 1:
        raise ValueError(f"ELNET_THREADS must be a positive integer, got {cap!r}")
    for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS", "NUMEXPR_NUM_THREADS"):
        os.environ.setdefault(var, cap)


def _emit(report, out_path: str | None) -> None:
    text = json.dumps(report, indent=2, sort_keys=True) + "\n"
    if out_path:
        with open(out_path, "w", encoding="utf-8") as fh:
            fh.write(text)
    else:
        sys.stdout.write(text)


def _print_effective(sections: dict) -> None:
    log.info("effective config: %s", json.dumps(sections, sort_keys=True))


def _add_report_flag(p: argparse.ArgumentParser) -> None:
    p.add_argument("--out", metavar="FILE", help="write the JSON report here instead of stdout")


def _add_config_flag(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", metavar="FILE", help="TOML or JSON config file")


def _add_train_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--epochs", type=int)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--lr", dest="learning_rate", type=float)
    p.add_argument("--wd", dest="weight_decay", type=float)
    p.add_argument("--lambda", dest="lam", type=float, help="wIoU/wBCE mixing weight")


def _train_overrides(args, seed_required: bool = True) -> dict:
    ov: dict = {"train": {}, "loss": {}, "pipeline": {}}
    for key in ("epochs", "batch_size", "learning_rate", "weight_decay"):
        ov["train"][key] = getattr(args, key, None)
    ov["loss"]["lambda"] = getattr(args, "lam", None)
    seed = getattr(args, "seed", None)
    if seed is not None:
        ov["train"]["seed"] = seed
        ov["pipeline"]["seed"] = seed
    return ov


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="elnet", description=__doc__.split("\n\n")[0])
    parser.add_argument("-v", "--verbose", action="store_true", help="debug logging")
    sub = parser.add_subparsers(dest="command", required=True, metavar="COMMAND")

    synth = sub.add_parser("synth", help="synthetic benchmark data")
    synth_sub = synth.add_subparsers(dest="synth_command", required=True)
    gen = synth_sub.add_parser("gen", help="generate scenes, ground truth, and corrupted labels")
    gen.add_argument("--out-dir", required=True)
    gen.add_argument("--n", type=int, required=True, help="number of scenes")
    gen.add_argument("--size", type=int, default=64)
    gen.add_argument("--seed", type=int, default=0)
    gen.add_argument("--train-fraction", type=float, default=0.7)
    gen.add_argument("--speckle", type=float, default=0.15)
    gen.add_argument("--contrast", type=float, default=0.4)
    gen.add_argument("--tolerance", type=float, default=2.0)
    gen.add_argument("--fp-rate", type=float, default=0.3)
    gen.add_argument("--omission-rate", type=float, default=0.1)
    _add_report_flag(gen)

    pre = sub.add_parser("pretrain", help="denoising pretraining of the backbone")
    pre.add_argument("--data", required=True, metavar="MANIFEST")
    pre.add_argument("--ckpt-out", required=True)
    pre.add_argument("--seed", type=int, required=True)
    pre.add_argument("--noise-sigma", type=float, default=0.1)
    _add_config_flag(pre)
    _add_train_flags(pre)
    _add_report_flag(pre)

    fin = sub.add_parser("finetune", help="fine-tune on a labeled manifest with a frozen backbone")
    fin.add_argument("--data", required=True, metavar="MANIFEST")
    fin.add_argument("--backbone", required=True, metavar="CKPT")
    fin.add_argument("--ckpt-out", required=True)
    fin.add_argument("--seed", type=int, required=True)
    fin.add_argument("--max-steps", type=int)
    _add_config_flag(fin)
    _add_train_flags(fin)
    _add_report_flag(fin)

    for mode in ("enhance", "annotate"):
        mp = sub.add_parser(mode, help=f"run the {mode} pipeline")
        mp.add_argument("--data", required=True, metavar="MANIFEST")
        mp.add_argument("--backbone", required=True, metavar="CKPT")
        mp.add_argument("--out-dir", required=True)
        mp.add_argument("--seed", type=int, required=True)
        mp.add_argument("--loops", type=int, help="filter/refine iterations")
        mp.add_argument("--no-eam", action="store_true", help="disable the edge attention gate")
        _add_config_flag(mp)
        _add_train_flags(mp)
        _add_report_flag(mp)

    lqe = sub.add_parser("lqe", help="score one ensemble of three aligned mask files")
    lqe.add_argument("--pred", nargs=3, required=True, metavar=("M1", "M2", "M3"))
    _add_config_flag(lqe)
    _add_report_flag(lqe)

    met = sub.add_parser("metrics", help="compare mask directories by file name")
    met.add_argument("--pred", required=True, metavar="DIR")
    met.add_argument("--gt", required=True, metavar="DIR")
    _add_report_flag(met)

    ev = sub.add_parser("evalprotocol", help="score a label set by training a reference segmenter")
    ev.add_argument("--train", required=True, metavar="MANIFEST")
    ev.add_argument("--hq", required=True, metavar="MANIFEST")
    ev.add_argument("--orig", required=True, metavar="MANIFEST")
    ev.add_argument("--enh", required=True, metavar="MANIFEST")
    ev.add_argument("--refnet-epochs", type=int, default=40)
    ev.add_argument("--seed", type=int, default=0)
    _add_report_flag(ev)

    pipe = sub.add_parser("pipeline", help="full pipeline control")
    pipe_sub = pipe.add_subparsers(dest="pipeline_command", required=True)
    prun = pipe_sub.add_parser("run", help="run all five stages")
    prun.add_argument("--data", required=True, metavar="MANIFEST")
    prun.add_argument("--backbone", required=True, metavar="CKPT")
    prun.add_argument("--out-dir", required=True)
    prun.add_argument("--seed", type=int, required=True)
    prun.add_argument("--mode", choices=("enhance", "annotate"))
    prun.add_argument("--loops", type=int)
    prun.add_argument("--no-eam", action="store_true")
    _add_config_flag(prun)
    _add_train_flags(prun)
    _add_report_flag(prun)

    gc = sub.add_parser("gradcheck", help="run the full gradient-check suite")
    gc.add_argument("--batch", type=int, default=8)
    gc.add_argument("--hw", type=int, default=16)
    gc.add_argument("--tol", type=float, default=1e-4)
    _add_report_flag(gc)

    return parser


# -- handlers ------------------------------------------------------------------


def _cmd_synth_gen(args) -> int:
    import dataclasses

    from .benchmark import CorruptionSpec, SceneSpec, gen_dataset

    scene = SceneSpec(size=args.size, speckle=args.speckle, contrast=args.contrast, seed=args.seed)
    corr = CorruptionSpec(
        tolerance=args.tolerance, fp_rate=args.fp_rate, omission_rate=args.omission_rate, seed=args.seed
    )
    _print_effective({"scene": dataclasses.asdict(scene), "corruption": dataclasses.asdict(corr)})
    man = gen_dataset(args.n, scene, corr, args.out_dir, train_fraction=args.train_fraction)
    _emit(
        {
            "out_dir": args.out_dir,
            "manifest": os.path.join(args.out_dir, "manifest.jsonl"),
            "n": len(man),
            "train": sum(r.split == "train" for r in man),
            "test": sum(r.split == "test" for r in man),
        },
        args.out,
    )
    return 0


def _cmd_pretrain(args) -> int:
    from .config import effective_config, load_config
    from .manifest import read_manifest
    from .masks import load_image
    from .training import pretrain_backbone, save_checkpoint

    cfg = load_config(args.config, _train_overrides(args))
    _print_effective(effective_config(cfg))
    man = read_manifest(args.data)
    imgs = [load_image(r.image_path) for r in man if r.split == "train"]
    ckpt, losses = pretrain_backbone(imgs, cfg.train, cfg.model, noise_sigma=args.noise_sigma)
    save_checkpoint(ckpt, args.ckpt_out)
    _emit(
        {"checkpoint": args.ckpt_out, "epochs": cfg.train.epochs, "first_loss": losses[0], "final_loss": losses[-1]},
        args.out,
    )
    return 0


def _cmd_finetune(args) -> int:
    from .config import effective_config, load_config
    from .manifest import read_manifest
    from .training import finetune, load_checkpoint, save_checkpoint

    cfg = load_config(args.config, _train_overrides(args))
    _print_effective(effective_config(cfg))
    man = read_manifest(args.data)
    backbone = load_checkpoint(args.backbone)
    result = finetune(
        man.subset(lambda r: r.split == "train" and r.label_path is not None),
        backbone,
        cfg.train,
        cfg.loss,
        cfg.model,
        max_steps=args.max_steps,
    )
    save_checkpoint(result.checkpoints[-1], args.ckpt_out)
    _emit(
        {
            "checkpoint": args.ckpt_out,
            "epochs": len(result.epoch_losses),
            "first_loss": result.epoch_losses[0],
            "final_loss": result.epoch_losses[-1],
            "log": result.log,
        },
        args.out,
    )
    return 0


def _cmd_pipeline(args, mode: str | None) -> int:
    from dataclasses import replace

    from .config import effective_config, load_config
    from .manifest import read_manifest
    from .pipeline import run
    from .training import load_checkpoint

    overrides = _train_overrides(args)
    if mode is not None:
        overrides["pipeline"]["mode"] = mode
    if args.loops is not None:
        overrides["pipeline"]["loop_count"] = args.loops
    cfg = load_config(args.config, overrides)
    if args.no_eam:
        cfg = replace(cfg, model=replace(cfg.model, eam_enabled=False))
    _print_effective(effective_config(cfg))
    man = read_manifest(args.data)
    backbone = load_checkpoint(args.backbone)
    res = run(cfg, man, args.out_dir, backbone)
    _emit(
        {
            "out_dir": args.out_dir,
            "final_manifest": os.path.join(args.out_dir, "manifest_final.jsonl"),
            "flagged_manifest": os.path.join(args.out_dir, "manifest_flagged.jsonl"),
            "stats": res.stats,
            "retained_total": res.stats[-1]["cumulative_retained"],
            "flagged_final": len(res.flagged_manifest),
        },
        args.out,
    )
    return 0


def _cmd_lqe(args) -> int:
    from .config import load_config
    from .masks import load_mask
    from .quality import PredictionEnsemble, evaluate

    cfg = load_config(args.config, None)
    _print_effective({"lqe": cfg.lqe.to_json()})
    masks = tuple(load_mask(p) for p in args.pred)
    rep = evaluate(PredictionEnsemble(predictions=masks), cfg.lqe)
    _emit(rep.to_json(), args.out)
    return 0


def _cmd_metrics(args) -> int:
    from .masks import accuracy, confusion, dice, iou, load_mask, miou

    def mask_files(d: str) -> dict[str, str]:
        if not os.path.isdir(d):
            raise FileNotFoundError(f"not a directory: {d}")
        return {f: os.path.join(d, f) for f in sorted(os.listdir(d)) if f.lower().endswith(".png")}

    preds, gts = mask_files(args.pred), mask_files(args.gt)
    if set(preds) != set(gts):
        only_p = sorted(set(preds) - set(gts))[:3]
        only_g = sorted(set(gts) - set(preds))[:3]
        raise ValueError(f"file sets differ (pred-only {only_p}, gt-only {only_g})")
    if not preds:
        raise ValueError("no .png masks found")
    _print_effective({"metrics": {"pred": args.pred, "gt": args.gt, "n": len(preds)}})
    rows = []
    for name in preds:
        p, g = load_mask(preds[name]), load_mask(gts[name])
        cm = confusion(p, g)
        rows.append(
            {"name": name, "iou": iou(p, g), "dice": dice(p, g), "acc": accuracy(cm), "miou": miou(p, g)}
        )
    report = {
        "n": len(rows),
        "iou": float(sum(r["iou"] for r in rows) / len(rows)),
        "dice": float(sum(r["dice"] for r in rows) / len(rows)),
        "acc": float(sum(r["acc"] for r in rows) / len(rows)),
        "miou": float(sum(r["miou"] for r in rows) / len(rows)),
        "per_image": rows,
    }
    _emit(report, args.out)
    return 0


def _cmd_evalprotocol(args) -> int:
    import dataclasses

    from .benchmark import RefNetConfig, eval_protocol
    from .manifest import read_manifest

    rcfg = RefNetConfig(epochs=args.refnet_epochs, seed=args.seed)
    _print_effective({"refnet": dataclasses.asdict(rcfg)})
    report = eval_protocol(
        read_manifest(args.train),
        read_manifest(args.hq),
        read_manifest(args.orig),
        read_manifest(args.enh),
        rcfg,
    )
    _emit({"rows": report.to_json()}, args.out)
    return 0


def _cmd_gradcheck(args) -> int:
    from .checks import run_gradcheck_suite

    _print_effective({"gradcheck": {"batch": args.batch, "hw": args.hw, "tol": args.tol}})
    results = run_gradcheck_suite(batch=args.batch, hw=args.hw, tol=args.tol)
    ok = all(r.passed for r in results)
    _emit({"passed": ok, "checks": [r.to_json() for r in results]}, args.out)
    return 0 if ok else 1


def dispatch(argv: list[str] | None = None) -> int:
    """Parse argv and run one subcommand; returns the process exit code."""
    try:
        _apply_thread_cap()
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:  # argparse exits 0 for --help, 2 for usage errors
        return int(exc.code or 0)
    logging.basicConfig(
        stream=sys.stderr,
        level=logging.DEBUG if args.verbose else logging.INFO,
        format="%(levelname)s %(name)s: %(message)s",
    )
    try:
        if args.command == "synth":
            return _cmd_synth_gen(args)
        if args.command == "pretrain":
            return _cmd_pretrain(args)
        if args.command == "finetune":
            return _cmd_finetune(args)
        if args.command == "enhance":
            return _cmd_pipeline(args, "enhance")
        if args.command == "annotate":
            return _cmd_pipeline(args, "annotate")
        if args.command == "pipeline":
            return _cmd_pipeline(args, args.mode)
        if args.command == "lqe":
            return _cmd_lqe(args)
        if args.command == "metrics":
            return _cmd_metrics(args)
        if args.command == "evalprotocol":
            return _cmd_evalprotocol(args)
        if args.command == "gradcheck":
            return _cmd_gradcheck(args)
        parser.error(f"unknown command {args.command!r}")
    except (ValueError, FileNotFoundError, NotADirectoryError, KeyError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    return 0


def main() -> None:
    sys.exit(dispatch())


if __name__ == "__main__":
    main()
