#!/usr/bin/env python3
"""RN versus parameter-matched MLP on the position and color tasks.

Prints one row per (relation, model) with final and best test BCE.
"""
import argparse
import dataclasses

from relnet import harness as hz
from relnet.models import param_count


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--iterations", type=int, default=20000)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--out", default="runs/separation")
    a = ap.parse_args(argv)
    print("relation  model  params  final_test_bce  best_test_bce")
    for relation in ("position", "color"):
        for model in ("rn", "mlp"):
            cfg = dataclasses.replace(hz.TrainConfig(), relation=relation, model=model, iterations=a.iterations,
                                      seed=a.seed)
            res = hz.train_scene_classifier(cfg, f"{a.out}/{relation}_{model}")
            best = min(r.test_loss for r in res.history)
            print(f"{relation:9s} {model:5s} {param_count(res.model.params):7d}  {res.final.test_loss:14.4f}  {best:13.4f}",
                  flush=True)


if __name__ == "__main__":
    main()
