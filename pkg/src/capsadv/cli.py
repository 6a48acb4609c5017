"""Command-line entry point: capsadv {train,attack,transfer,universal,embed,report}.

Exit status: 0 success, 1 usage error (bad flag, missing file, invalid
combination), 2 runtime failure. Every run writes config.json into its
output directory with the argv and the resolved settings.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import attacks as A
from . import datasets as D
from . import harness as H
from . import models as M

log = logging.getLogger("capsadv")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _common(p):
    p.add_argument("--dataset", default="mnist", choices=["mnist", "fashion"], help="dataset name (subdirectory of the data dir)")
    p.add_argument("--data-dir", default=None, help=f"data root; defaults to ${D.DATA_ENV}, then ./data")
    p.add_argument("--seed", type=int, default=0, help="root seed for every random choice")
    p.add_argument("--out", required=True, help="output directory (created if missing)")
    p.add_argument("--workers", type=int, default=1, help="worker processes for per-sample jobs")
    p.add_argument("--log-level", default="INFO", help="logging level")


def build_parser() -> argparse.ArgumentParser:
    ap = _Parser(prog="capsadv", description="Adversarial attacks on ConvNets and CapsNets.")
    sub = ap.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("train", help="train a model and write a checkpoint plus history")
    _common(p)
    p.add_argument("--model", required=True, choices=list(H.MODEL_KINDS), help="architecture")
    p.add_argument("--preset", default="desk", choices=["desk", "full"], help="architecture size")
    p.add_argument("--epochs", type=int, default=15, help="training epochs")
    p.add_argument("--batch-size", type=int, default=128, help="minibatch size")
    p.add_argument("--lr", type=float, default=1e-3, help="Adam learning rate")
    p.add_argument("--train-images", type=int, default=10000, help="use the first N training images (0 = all)")

    p = sub.add_parser("attack", help="run a per-sample attack on random test images")
    _common(p)
    p.add_argument("--attack", required=True, choices=list(H.ATTACKS), help="attack name")
    p.add_argument("--model-ckpt", required=True, help="checkpoint of the attacked model")
    p.add_argument("--count", type=int, default=None, help="samples to attack (default 50 for cw, else 100)")
    p.add_argument("--kappa", type=float, default=1.0, help="cw logit margin")
    p.add_argument("--cw-steps", type=int, default=1000, help="cw optimiser steps per constant")
    p.add_argument("--cw-binary-steps", type=int, default=9, help="cw bisection rounds")
    p.add_argument("--cw-initial-c", type=float, default=1e-2, help="cw starting constant")
    p.add_argument("--cw-lr", type=float, default=5e-3, help="cw Adam learning rate")
    p.add_argument("--boundary-steps", type=int, default=5000, help="boundary attack steps")
    p.add_argument("--deepfool-max-iter", type=int, default=100, help="deepfool iterations")
    p.add_argument("--chunk-size", type=int, default=10, help="samples per job")
    p.add_argument("--export", type=int, default=0, help="write image triptychs for the first N successes")

    p = sub.add_parser("transfer", help="evaluate stored perturbations on another model")
    _common(p)
    p.add_argument("--results", required=True, help="output directory of an attack or universal run")
    p.add_argument("--model-ckpt", required=True, help="checkpoint of the target model")

    p = sub.add_parser("universal", help="one universal perturbation per test fold")
    _common(p)
    p.add_argument("--model-ckpt", required=True, help="checkpoint of the attacked model")
    p.add_argument("--eps", type=float, default=0.02, help="FGSM step size")
    p.add_argument("--batch-size", type=int, default=64, help="images averaged per update")
    p.add_argument("--max-iter", type=int, default=500, help="update cap per fold")
    p.add_argument("--eval-every", type=int, default=1, help="re-evaluate fold accuracy every N updates")
    p.add_argument("--threshold", type=float, default=0.5, help="stop once fold accuracy is below this")

    p = sub.add_parser("embed", help="t-SNE of universal perturbations")
    _common(p)
    p.add_argument("--inputs", nargs="+", required=True, help="universal run directories")
    p.add_argument("--perplexity", type=float, default=5.0, help="target perplexity")
    p.add_argument("--iterations", type=int, default=1000, help="gradient steps")

    p = sub.add_parser("report", help="collect run directories into report.json and report.txt")
    _common(p)
    p.add_argument("--inputs", nargs="+", required=True, help="run directories from the other commands")
    return ap


def _config(args, argv, **extra) -> dict:
    cfg = {k: v for k, v in vars(args).items()}
    cfg["argv"] = list(argv)
    cfg.update(extra)
    return cfg


def _need_file(path, what="file"):
    if not Path(path).exists():
        raise UsageError(f"{what} not found: {path}")
    return Path(path)


def _load_model(path):
    m = M.load_checkpoint(_need_file(path, "checkpoint"))
    m.require_trained()
    return m


def _load_test(args):
    try:
        return D.load_dataset(args.dataset, "test", args.data_dir)
    except FileNotFoundError as e:
        raise UsageError(str(e)) from e


def _read_config(directory) -> dict:
    return json.loads(_need_file(Path(directory) / "config.json", "run config").read_text())


def cmd_train(args, out):
    try:
        train = D.load_dataset(args.dataset, "train", args.data_dir)
    except FileNotFoundError as e:
        raise UsageError(str(e)) from e
    test = _load_test(args)
    if args.train_images:
        train = train.head(args.train_images)
    cfg = M.TrainConfig(epochs=args.epochs, batch_size=args.batch_size, lr=args.lr, seed=args.seed)
    model = M.build_model(args.model, args.dataset, args.preset, seed=args.seed)
    hist = M.train(model, train, cfg, test_set=test)
    M.save_checkpoint(model, out / "model.bin")
    H.dump_json(hist, out / "history.json")
    return {"train": cfg}


def _attack_cfg(args):
    if args.attack == "cw":
        return A.CwConfig(kappa=args.kappa, binary_steps=args.cw_binary_steps, initial_c=args.cw_initial_c,
                          steps=args.cw_steps, lr=args.cw_lr)
    if args.attack == "deepfool":
        return A.DeepFoolConfig(max_iter=args.deepfool_max_iter)
    return A.BoundaryConfig(max_steps=args.boundary_steps)


def cmd_attack(args, out):
    model = _load_model(args.model_ckpt)
    test = _load_test(args)
    count = args.count if args.count is not None else (50 if args.attack == "cw" else 100)
    if not 0 < count <= len(test):
        raise UsageError(f"--count must lie in 1..{len(test)}")
    try:
        acfg = _attack_cfg(args)
    except ValueError as e:
        raise UsageError(str(e)) from e
    idx, targets = D.sample_attack_set(test, count, args.seed)
    res = H.run_attack(model, args.attack, test.images[idx], test.labels[idx], idx,
                       targets if args.attack == "cw" else None, acfg, args.seed, args.workers, args.chunk_size)
    A.write_records(res, out / "records.jsonl")
    A.write_deltas([r.index for r in res], [r.delta for r in res], out / "deltas.bin")
    summary = H.summarize(res)
    summary.update(attack=args.attack, model=model.kind, seed=args.seed)
    H.dump_json(summary, out / "summary.json")
    if args.attack == "boundary":
        H.dump_json({r.index: r.extra["distances"] for r in res}, out / "distances.json")
    if args.export:
        (out / "images").mkdir(exist_ok=True)
        for r in [r for r in res if r.success][:args.export]:
            H.export_images(r, out / "images")
    log.info("%s: success %d/%d mean norm %s", args.attack, summary["successes"], summary["count"], summary["mean_norm"])
    return {"attack_config": acfg, "model_kind": model.kind, "count": count}


def cmd_transfer(args, out):
    src = Path(args.results)
    src_cfg = _read_config(src)
    model = _load_model(args.model_ckpt)
    test = _load_test(args)
    if (src / "universal.delta").exists():
        _, deltas = A.read_deltas(src / "universal.delta")
        try:
            accs = A.universal_transfer_accuracy(deltas, model, test.images, test.labels)
        except ValueError as e:
            raise UsageError(str(e)) from e
        result = {"kind": "universal", "test_accuracy": accs, "mean_test_accuracy": float(np.mean(accs)),
                  "fooling_rate": 1.0 - float(np.mean(accs))}
    else:
        records = A.read_records(_need_file(src / "records.jsonl", "record file"))
        deltas = A.read_deltas(_need_file(src / "deltas.bin", "delta sidecar"))
        if src_cfg.get("attack") == "cw" and any(r["target"] is None for r in records):
            raise UsageError("targeted transfer needs target labels in the record file")
        if deltas[1] and deltas[1][0].shape != test.images.shape[1:]:
            raise UsageError(f"perturbation shape {deltas[1][0].shape} does not match images {test.images.shape[1:]}")
        results = [r for r in A.results_from_files(records, deltas, test.images) if r.success]
        rate = A.transfer_evaluate(results, model) if results else None
        result = {"kind": src_cfg.get("attack"), "fooling_rate": rate, "count": len(results)}
    result.update(source=src_cfg.get("model_kind"), target=model.kind)
    H.dump_json(result, out / "transfer.json")
    log.info("transfer %s -> %s: %s", result["source"], result["target"], result["fooling_rate"])
    return {"source_config": src_cfg}


def cmd_universal(args, out):
    model = _load_model(args.model_ckpt)
    test = _load_test(args)
    try:
        ucfg = A.UniversalConfig(threshold=args.threshold, eps=args.eps, batch_size=args.batch_size,
                                 max_iter=args.max_iter, eval_every=args.eval_every)
    except ValueError as e:
        raise UsageError(str(e)) from e
    section, deltas = H.run_universal_experiment({model.kind: model}, test, ucfg, args.seed, args.workers)
    A.write_deltas(range(len(deltas[model.kind])), deltas[model.kind], out / "universal.delta")
    H.dump_json(section[model.kind], out / "universal.json")
    return {"universal": ucfg, "model_kind": model.kind}


def cmd_embed(args, out):
    points, labels = [], []
    for d in args.inputs:
        cfg = _read_config(d)
        _, ds = A.read_deltas(_need_file(Path(d) / "universal.delta", "universal sidecar"))
        points += ds
        labels += [(cfg.get("model_kind", Path(d).name), k) for k in range(len(ds))]
    try:
        tcfg = H.TsneConfig(perplexity=args.perplexity, iterations=args.iterations)
        emb = H.tsne_embed(points, tcfg, args.seed, labels)
    except ValueError as e:
        raise UsageError(str(e)) from e
    emb.write_csv(out / "embedding.csv")
    H.dump_json({"kl": emb.kl, "trace": emb.trace,
                 "separation": H.cluster_separation(emb.coords, [lab[0] for lab in labels])},
                out / "embedding.json")
    return {"tsne": tcfg}


def cmd_report(args, out):
    rep = H.ExperimentReport(config={"inputs": list(args.inputs), "seed": args.seed})
    for d in map(Path, args.inputs):
        cfg = _read_config(d)
        cmd = cfg.get("command")
        if cmd == "train":
            ckpt = d / "model.bin"
            m = _load_model(ckpt)
            rep.accuracy[m.kind] = m.accuracy(*_eval_set(args))
        elif cmd == "attack":
            s = json.loads((d / "summary.json").read_text())
            rep.norms.setdefault(s["attack"], {})[s["model"]] = s
        elif cmd == "transfer":
            t = json.loads((d / "transfer.json").read_text())
            key = f"{t['source']}->{t['target']}"
            if t["kind"] == "universal":
                rep.universal_transfer[key] = t
            else:
                rep.transfer.setdefault(t["kind"], {})[key] = t
        elif cmd == "universal":
            rep.universal[cfg["model_kind"]] = json.loads((d / "universal.json").read_text())
        elif cmd == "embed":
            rep.embedding = json.loads((d / "embedding.json").read_text())
        else:
            raise UsageError(f"{d} is not a run directory")
    rep.save(out)
    print(rep.table(), end="")
    return {}


_EVAL_CACHE = {}


def _eval_set(args):
    key = (args.dataset, args.data_dir)
    if key not in _EVAL_CACHE:
        t = _load_test(args)
        _EVAL_CACHE[key] = (t.images, t.labels)
    return _EVAL_CACHE[key]


COMMANDS = {"train": cmd_train, "attack": cmd_attack, "transfer": cmd_transfer,
            "universal": cmd_universal, "embed": cmd_embed, "report": cmd_report}


def main(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as e:
        print(f"capsadv: error: {e}", file=sys.stderr)
        return 1
    except SystemExit as e:  # --help
        return int(e.code or 0)
    logging.basicConfig(level=getattr(logging, str(args.log_level).upper(), logging.INFO),
                        format="%(asctime)s %(name)s %(message)s")
    out = Path(args.out)
    try:
        if args.workers < 1:
            raise UsageError("--workers must be >= 1")
        out.mkdir(parents=True, exist_ok=True)
        H.dump_json(_config(args, argv), out / "config.json")
        extra = COMMANDS[args.command](args, out)
        H.dump_json(_config(args, argv, **extra), out / "config.json")
    except UsageError as e:
        print(f"capsadv: error: {e}", file=sys.stderr)
        return 1
    except Exception as e:  # noqa: BLE001 - one-line cause, nonzero status
        print(f"capsadv: failed: {type(e).__name__}: {e}", file=sys.stderr)
        log.debug("traceback", exc_info=True)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
