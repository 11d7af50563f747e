#!/usr/bin/env python3
"""Run one experiment config and print a JSON summary.

Besides training, this runs the follow-up analysis that belongs to the task:
held-out-class evaluation for ``unseen_gen``, the |UB| block score for
``entangled`` and instance-accuracy curves for ``one_shot``.

    python3 scripts/run_experiment.py configs/desk_unseen.txt
"""
import argparse
import json
import sys
import time

import numpy as np

from relnet import harness as hz
from relnet.numerics import RngStream
from relnet.scenegen import make_permutation


def summarize(cfg: hz.TrainConfig, out: str) -> dict:
    t0 = time.perf_counter()
    if cfg.task == "one_shot":
        res = hz.train_one_shot(cfg, out)
        it, curve = res.curves[-1]
        summary = {"instance_accuracy": [None if np.isnan(c) else round(float(c), 4) for c in curve],
                   "oracle": [None if np.isnan(c) else float(c) for c in hz.oracle_instance_accuracy(res.eval_episodes)]}
        final = res.history[-1]
    else:
        res = hz.train_scene_classifier(cfg, out)
        final = res.final
        summary = {"checkpoint": str(res.checkpoint_path),
                   "best_test_loss": min(r.test_loss for r in res.history)}
        if cfg.task == "unseen_gen":
            summary["unseen"] = hz.eval_unseen(res.model, res.train.classes, res.unseen_classes,
                                               cfg.samples_per_class, RngStream(cfg.seed).split(7), cfg.relation,
                                               cfg.generator)
        if cfg.task == "entangled":
            B = make_permutation(cfg.b_seed)
            base, sd = hz.random_ub_baseline(B)
            score, mass = hz.run_ub_analysis(res.model, B)
            hz.dump_json({"score": score, "block_mass": mass.tolist()}, f"{out}/block_mass.json")
            summary.update(ub_score=score, ub_random_baseline=base, ub_random_std=sd)
    summary.update(metrics=str(res.metrics_path), iteration=final.iteration, train_loss=final.train_loss,
                   test_loss=final.test_loss, test_accuracy=final.test_accuracy,
                   seconds=round(time.perf_counter() - t0, 1))
    return summary


def main(argv=None) -> int:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("config")
    ap.add_argument("--out", help="output directory (default: out_dir from the config)")
    a = ap.parse_args(argv)
    try:
        cfg = hz.load_config(a.config)
        print(json.dumps(summarize(cfg, a.out or cfg.out_dir), indent=1))
    except hz.ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except hz.DivergenceError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3
    return 0


if __name__ == "__main__":
    sys.exit(main())
