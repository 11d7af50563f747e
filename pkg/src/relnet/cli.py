"""Command-line entry point: ``python -m relnet <command>``.

Exit codes: 0 success, 1 failed check, 2 configuration error, 3 divergence.
"""
from __future__ import annotations

import argparse
import json
import sys

from . import harness as hz
from .checks import MODELS as CHECK_MODELS, TOLERANCE, gradcheck_model
from .numerics import ParameterError, RngStream
from .scenegen import CapacityError, DatasetParseError, build_class_pool, dataset_read, dataset_write, make_dataset, \
    make_permutation

EXIT_OK, EXIT_FAIL, EXIT_CONFIG, EXIT_DIVERGED = 0, 1, 2, 3


def _print(obj):
    print(json.dumps(obj, sort_keys=True))


def cmd_gen(a) -> int:
    rng = RngStream(a.seed)
    pool = build_class_pool(a.classes, rng.split(1), a.relation)
    ds = make_dataset(pool, a.samples, rng.split(2), a.target_mode, a.relation)
    dataset_write(ds, a.out)
    _print({"out": a.out, "classes": a.classes, "samples": len(ds)})
    return EXIT_OK


def cmd_train(a) -> int:
    cfg = hz.load_config(a.config)
    out = a.out or cfg.out_dir
    if cfg.task == "one_shot":
        res = hz.train_one_shot(cfg, out)
        _print({"metrics": str(res.metrics_path), **_final(res.history[-1])})
    else:
        res = hz.train_scene_classifier(cfg, out)
        _print({"metrics": str(res.metrics_path), "checkpoint": str(res.checkpoint_path), **_final(res.final)})
    return EXIT_OK


def cmd_oneshot(a) -> int:
    cfg = hz.load_config(a.config)
    res = hz.train_one_shot(cfg, a.out or cfg.out_dir)
    it, curve = res.curves[-1]
    _print({"metrics": str(res.metrics_path), "instance_accuracy": [None if c != c else round(float(c), 4)
                                                                    for c in curve], **_final(res.history[-1])})
    return EXIT_OK


def _final(rec):
    return {"iteration": rec.iteration, "train_loss": rec.train_loss, "test_loss": rec.test_loss,
            "test_accuracy": rec.test_accuracy}


def cmd_eval(a) -> int:
    model, header = hz.load_model(a.checkpoint)
    ds = dataset_read(a.dataset)
    trained = hz.classes_from_header(header)
    trained_keys = [c.key() for c in trained]
    keys = [c.key() for c in ds.classes]
    mode = header.get("target_mode", "adjacency")
    if mode == "one_hot" and keys != trained_keys:
        raise hz.ConfigError("a one-hot model can only be evaluated on its own training classes, in order")
    if ds.relation != header.get("relation", ds.relation):
        raise hz.ConfigError(f"dataset relation {ds.relation!r} differs from checkpoint {header.get('relation')!r}")
    ds.target_mode = mode
    loss, acc = hz.evaluate(model, ds)
    unseen = not set(keys) & set(trained_keys)
    _print({"loss": loss, "accuracy": acc, "samples": len(ds), "unseen_classes": unseen})
    return EXIT_OK


def cmd_gradcheck(a) -> int:
    err = gradcheck_model(a.model, a.probes, a.eps, a.seed)
    ok = err < TOLERANCE[a.model]
    _print({"model": a.model, "max_relative_error": err, "tolerance": TOLERANCE[a.model], "pass": ok})
    return EXIT_OK if ok else EXIT_FAIL


def cmd_ub(a) -> int:
    model, _ = hz.load_model(a.checkpoint)
    B = make_permutation(a.b_seed)
    score, mass = hz.run_ub_analysis(model, B)
    base, sd = hz.random_ub_baseline(B, a.baseline_samples)
    _print({"score": score, "random_baseline": base, "random_std": sd})
    if a.out:
        hz.dump_json({"score": score, "block_mass": mass.tolist()}, a.out)
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="relnet", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen", help="generate a scene dataset (JSON lines)")
    g.add_argument("--classes", type=int, required=True)
    g.add_argument("--samples", type=int, required=True, help="samples per class")
    g.add_argument("--relation", choices=("position", "color"), default="position")
    g.add_argument("--target-mode", choices=("adjacency", "one_hot"), default="adjacency")
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--out", required=True)
    g.set_defaults(fn=cmd_gen)

    t = sub.add_parser("train", help="train from a key = value config file")
    t.add_argument("--config", required=True)
    t.add_argument("--out", help="output directory (default: out_dir from the config)")
    t.set_defaults(fn=cmd_train)

    e = sub.add_parser("eval", help="evaluate a checkpoint on a dataset file")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--dataset", required=True)
    e.set_defaults(fn=cmd_eval)

    o = sub.add_parser("oneshot", help="episodic one-shot training")
    o.add_argument("--config", required=True)
    o.add_argument("--out")
    o.set_defaults(fn=cmd_oneshot)

    c = sub.add_parser("gradcheck", help="finite-difference check of a model's gradients")
    c.add_argument("--model", choices=CHECK_MODELS, required=True)
    c.add_argument("--probes", type=int, default=100)
    c.add_argument("--eps", type=float, default=1e-5)
    c.add_argument("--seed", type=int, default=0)
    c.set_defaults(fn=cmd_gradcheck)

    u = sub.add_parser("ub", help="block-structure score of a trained disentangling layer")
    u.add_argument("--checkpoint", required=True)
    u.add_argument("--b-seed", type=int, required=True)
    u.add_argument("--baseline-samples", type=int, default=200)
    u.add_argument("--out", help="write the 16x16 block-mass matrix here as JSON")
    u.set_defaults(fn=cmd_ub)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code == 0 else EXIT_CONFIG
    try:
        return args.fn(args)
    except hz.DivergenceError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    except (hz.ConfigError, ParameterError, CapacityError, DatasetParseError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
