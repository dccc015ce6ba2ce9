"""Command-line entry points: ``imdnet <verb>`` and ``degrade synth``.

Configuration comes from an optional YAML file whose keys mirror
``TrainConfig`` / ``ModelConfig`` (either flat or nested under ``train:`` and
``model:``).  Any flag given on the command line overrides its config key.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import json
import logging
import sys
from pathlib import Path

import numpy as np
import yaml

from .checkpoint import load_model, read_metadata
from .degradation import (
    COMBOS,
    load_suite,
    make_test_suite,
    make_training_set,
    procedural_textures,
    read_png,
    synthesize_directory,
)
from .metrics import (
    evaluate_suite,
    export_gate_heatmap,
    format_table,
    probe_embeddings,
    suite_embeddings,
    write_results_csv,
)
from .network import IMDNet, ModelConfig, summary
from .train import (
    PROFILES,
    TrainConfig,
    Trainer,
    run_ablation,
    run_fusion_ablation,
    run_skip_ablation,
)

log = logging.getLogger("imdnet")

_TRAIN_FIELDS = {f.name for f in dataclasses.fields(TrainConfig)}
_MODEL_FIELDS = {f.name for f in dataclasses.fields(ModelConfig)}

# flag dest -> config key, for flags whose names differ from the field
_ALIASES = {"variant": "ablation_variant"}


def load_config(path) -> dict:
    if path is None:
        return {}
    with open(path) as fh:
        raw = yaml.safe_load(fh) or {}
    flat = {}
    for key, val in raw.items():
        if key in ("train", "model") and isinstance(val, dict):
            flat.update(val)
        else:
            flat[key] = val
    unknown = set(flat) - _TRAIN_FIELDS - _MODEL_FIELDS - {"profile"}
    if unknown:
        raise SystemExit(f"unknown config keys: {sorted(unknown)}")
    return flat


def build_configs(args):
    values = {}
    profile = getattr(args, "profile", None)
    cfg_file = load_config(getattr(args, "config", None))
    profile = profile or cfg_file.pop("profile", None)
    if profile:
        values.update(PROFILES[profile])
    values.update(cfg_file)
    for dest, val in vars(args).items():
        key = _ALIASES.get(dest, dest)
        if val is not None and (key in _TRAIN_FIELDS or key in _MODEL_FIELDS):
            values[key] = val
    train_cfg = TrainConfig(**{k: v for k, v in values.items() if k in _TRAIN_FIELDS})
    model_cfg = ModelConfig(**{k: v for k, v in values.items() if k in _MODEL_FIELDS})
    return train_cfg, model_cfg


def load_training_data(args):
    if args.data:
        suite = load_suite(args.data)
        return [p for pairs in suite.values() for p in pairs]
    if args.clean_dir:
        clean = [read_png(p) for p in sorted(Path(args.clean_dir).glob("*.png"))]
    else:
        clean = procedural_textures(args.procedural, args.size, seed=args.data_seed)
    return make_training_set(clean, seed=args.data_seed)


def load_eval_suite(args):
    if args.suite:
        return load_suite(args.suite)
    clean = procedural_textures(args.procedural, args.size, seed=args.data_seed + 1)
    return make_test_suite(clean, args.data_seed + 1)


# ---------------------------------------------------------------------------
# verbs
# ---------------------------------------------------------------------------


def cmd_train(args):
    train_cfg, model_cfg = build_configs(args)
    data = load_training_data(args)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    if args.resume:
        trainer = Trainer.resume(args.resume, data, log_path=out / "train_log.jsonl",
                                 ckpt_dir=out)
    else:
        trainer = Trainer(train_cfg, model_cfg, data, log_path=out / "train_log.jsonl",
                          ckpt_dir=out)
    log.info("training %s for %d steps on %d pairs", trainer.model_cfg.variant,
             trainer.cfg.iterations, len(data))
    trainer.run()
    print(f"final checkpoint: {out / 'final.safetensors'}")
    return 0


def cmd_eval(args):
    model = load_model(args.ckpt)
    suite = load_eval_suite(args)
    combos = [c for c in COMBOS if c in suite]
    rows = evaluate_suite(model, suite, args.mode, combos)
    print(format_table(rows))
    if args.out:
        write_results_csv(args.out, rows)
    if args.heatmap_csv or args.heatmap_png:
        export_gate_heatmap(model, suite, args.heatmap_csv, args.heatmap_png, combos)
    return 0


def cmd_synth(args):
    recs = synthesize_directory(args.clean_dir, args.out_dir, args.combo, args.count, args.seed)
    print(f"wrote {len(recs)} pairs to {args.out_dir}")
    return 0


def cmd_ablate(args):
    train_cfg, model_cfg = build_configs(args)
    data = load_training_data(args)
    test = load_eval_suite(args)
    rows = []
    for seed in args.seeds or [train_cfg.seed]:
        cfg = dataclasses.replace(train_cfg, seed=seed)
        if args.kind == "variants":
            rows += run_ablation(args.variants, cfg, model_cfg, data, test)
        elif args.kind == "skip":
            rows += run_skip_ablation(cfg, model_cfg, data, test)
        else:
            rows += run_fusion_ablation(cfg, model_cfg, data, test)
    for r in rows:
        print(json.dumps(r))
    if args.out:
        with open(args.out, "w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=list(rows[0]))
            w.writeheader()
            w.writerows(rows)
    return 0


def cmd_probe(args):
    model = load_model(args.ckpt)
    suite = load_eval_suite(args)
    combos = [c for c in COMBOS if c in suite]
    vecs, labels = suite_embeddings(model, suite, combos)
    if args.out:
        np.savez(args.out, embeddings=vecs, labels=labels, combos=np.asarray(combos))
    acc = probe_embeddings(vecs, labels, seed=args.seed)
    print(f"probe accuracy {acc:.4f} (chance {1 / len(combos):.4f})")
    return 0


def cmd_info(args):
    if args.ckpt:
        meta = read_metadata(args.ckpt)
        model = load_model(args.ckpt)
        print(f"step {meta['step']}")
    else:
        _, model_cfg = build_configs(args)
        model = IMDNet(model_cfg)
    print(summary(model))
    return 0


# ---------------------------------------------------------------------------
# parsers
# ---------------------------------------------------------------------------


def _tuple_of_ints(text):
    return tuple(int(v) for v in text.split(","))


def _add_config_flags(p):
    p.add_argument("--config", help="YAML file with TrainConfig/ModelConfig keys")
    p.add_argument("--profile", choices=sorted(PROFILES))
    g = p.add_argument_group("training")
    g.add_argument("--iterations", type=int)
    g.add_argument("--batch", type=int)
    g.add_argument("--patch", type=int)
    g.add_argument("--seed", type=int)
    g.add_argument("--lr-init", dest="lr_init", type=float)
    g.add_argument("--lr-final", dest="lr_final", type=float)
    g.add_argument("--variant", choices=["baseline", "did_only", "tab_only", "did_tab", "full"])
    g.add_argument("--grad-clip", dest="grad_clip", type=float)
    g.add_argument("--log-every", dest="log_every", type=int)
    g.add_argument("--ckpt-every", dest="ckpt_every", type=int)
    g.add_argument("--no-augment", dest="augment", action="store_const", const=False)
    m = p.add_argument_group("model")
    m.add_argument("--base-width", dest="base_width", type=int)
    m.add_argument("--enc-blocks", dest="enc_blocks", type=_tuple_of_ints)
    m.add_argument("--mid-blocks", dest="mid_blocks", type=int)
    m.add_argument("--dec-blocks", dest="dec_blocks", type=_tuple_of_ints)
    m.add_argument("--tau", type=float)
    m.add_argument("--fusion", choices=["fblock", "sum", "concat"])
    m.add_argument("--skip", choices=["cf", "e"])


def _add_data_flags(p, train=True):
    if train:
        p.add_argument("--data", help="directory written by 'synth' (training pairs)")
        p.add_argument("--clean-dir", help="clean PNGs, degraded round-robin over combos")
    p.add_argument("--procedural", type=int, default=8,
                   help="number of procedural images when no directory is given")
    p.add_argument("--size", type=int, default=64)
    p.add_argument("--data-seed", type=int, default=0)


def _add_suite_flags(p):
    p.add_argument("--suite", help="directory written by 'synth' (test suite)")


def _add_synth_flags(p):
    p.add_argument("--clean-dir", required=True)
    p.add_argument("--out-dir", required=True)
    p.add_argument("--combo", default="H+R+N", choices=COMBOS)
    p.add_argument("--count", type=int)
    p.add_argument("--seed", type=int, default=0)


def build_parser():
    parser = argparse.ArgumentParser(prog="imdnet", description="Multi-degradation restoration")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="verb", required=True)

    p = sub.add_parser("train", help="train a model")
    _add_config_flags(p)
    _add_data_flags(p)
    p.add_argument("--out", default="runs/train")
    p.add_argument("--resume", help="checkpoint to resume from")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="PSNR/SSIM per combo")
    p.add_argument("--ckpt", required=True)
    _add_suite_flags(p)
    _add_data_flags(p, train=False)
    p.add_argument("--mode", choices=["rgb", "y"], default="rgb")
    p.add_argument("--out", help="results CSV")
    p.add_argument("--heatmap-csv")
    p.add_argument("--heatmap-png")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("synth", help="synthesize degraded pairs")
    _add_synth_flags(p)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("ablate", help="train and compare variants")
    _add_config_flags(p)
    _add_data_flags(p)
    _add_suite_flags(p)
    p.add_argument("--kind", choices=["variants", "skip", "fusion"], default="variants")
    p.add_argument("--variants", nargs="+",
                   default=["baseline", "did_only", "tab_only", "did_tab", "full"])
    p.add_argument("--seeds", type=int, nargs="+")
    p.add_argument("--out", help="CSV of result rows")
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("probe", help="linear probe on middle-level DI embeddings")
    p.add_argument("--ckpt", required=True)
    _add_suite_flags(p)
    _add_data_flags(p, train=False)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", help="npz file for the embeddings")
    p.set_defaults(func=cmd_probe)

    p = sub.add_parser("info", help="architecture summary and parameter count")
    p.add_argument("--ckpt")
    _add_config_flags(p)
    p.set_defaults(func=cmd_info)
    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    return args.func(args)


def degrade_main(argv=None):
    parser = argparse.ArgumentParser(prog="degrade", description="Synthetic degradations")
    sub = parser.add_subparsers(dest="verb", required=True)
    _add_synth_flags(sub.add_parser("synth", help="degrade a directory of clean PNGs"))
    args = parser.parse_args(argv)
    return cmd_synth(args)


if __name__ == "__main__":
    sys.exit(main())
