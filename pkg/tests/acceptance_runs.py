"""Long-running training protocols behind the heavy acceptance criteria.

Each protocol returns a plain dict and can also be run from the command line
so the numbers can be produced once and archived:

    python tests/acceptance_runs.py overfit --seed 0 --out results/overfit0.json
"""

import argparse
import json
import statistics
import time
from pathlib import Path

import numpy as np

from imdnet.degradation import make_test_suite, make_training_set, procedural_textures
from imdnet.metrics import probe_embeddings, suite_embeddings
from imdnet.network import ModelConfig
from imdnet.train import TrainConfig, Trainer, mean_psnr, pairs_abs_cosine

OVERFIT_SEEDS = (0, 1, 2)


def overfit_pairs():
    """8 fixed 64x64 pairs, each carrying all three degradations."""
    return make_training_set(procedural_textures(8, 64, seed=100), seed=7, combos=("H+R+N",))


def tiny_overfit(seed, iterations=2000, gamma_d=None, log_every=100):
    from imdnet.losses import LossWeights

    data = overfit_pairs()
    weights = LossWeights() if gamma_d is None else LossWeights(gamma_d=gamma_d)
    t = Trainer(TrainConfig(iterations=iterations, seed=seed), ModelConfig(base_width=16),
                data, weights)
    cos0 = pairs_abs_cosine(t.model, data)
    psnr0 = mean_psnr(t.model, data)
    curve = []
    start = time.time()
    while t.step < iterations:
        t.run(until=min(t.step + log_every, iterations))
        curve.append({"step": t.step, "psnr": mean_psnr(t.model, data),
                      "total": t.history[-1]["total"]})
    totals = [r["total"] for r in t.history]
    return {
        "seed": seed,
        "iterations": iterations,
        "psnr_init": psnr0,
        "psnr_final": mean_psnr(t.model, data),
        "abs_cosine_init": cos0,
        "abs_cosine_final": pairs_abs_cosine(t.model, data),
        "loss_median_first100": float(np.median(totals[:100])),
        "loss_median_last100": float(np.median(totals[-100:])),
        "curve": curve,
        "seconds": time.time() - start,
    }


def probe_protocol(seed=0, iterations=10_000, n_train=500, n_test=100, variant="full"):
    """Toy multi-combo training, then a linear probe on middle-level DI."""
    clean = procedural_textures(n_train, 64, seed=200)
    data = make_training_set(clean, seed=seed)
    t = Trainer(TrainConfig(iterations=iterations, seed=seed, ablation_variant=variant),
                ModelConfig(base_width=16), data)
    start = time.time()
    t.run()
    suite = make_test_suite(procedural_textures(n_test, 64, seed=300), 11)
    vecs, labels = suite_embeddings(t.model, suite)
    return {
        "seed": seed,
        "variant": variant,
        "iterations": iterations,
        "probe_accuracy": probe_embeddings(vecs, labels, seed=seed),
        "test_psnr": mean_psnr(t.model, [p for v in suite.values() for p in v]),
        "seconds": time.time() - start,
    }


def ablation_order(rows, tol=0.05):
    """full >= did_tab >= max(did_only, tab_only) >= baseline on the
    median over seeds, ties within ``tol`` allowed."""
    med = {}
    for r in rows:
        med.setdefault(r["variant"], []).append(r["test_psnr"])
    m = {k: statistics.median(v) for k, v in med.items()}
    mid = max(m["did_only"], m["tab_only"])
    ok = (m["full"] + tol >= m["did_tab"] and m["did_tab"] + tol >= mid
          and mid + tol >= m["baseline"])
    return ok, m


def main():
    p = argparse.ArgumentParser()
    p.add_argument("protocol", choices=["overfit", "probe"])
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--iterations", type=int)
    p.add_argument("--variant", default="full")
    p.add_argument("--out", required=True)
    args = p.parse_args()
    if args.protocol == "overfit":
        res = tiny_overfit(args.seed, args.iterations or 2000)
    else:
        res = probe_protocol(args.seed, args.iterations or 10_000, variant=args.variant)
    Path(args.out).parent.mkdir(parents=True, exist_ok=True)
    Path(args.out).write_text(json.dumps(res, indent=2))
    print(json.dumps({k: v for k, v in res.items() if k != "curve"}))


if __name__ == "__main__":
    main()
