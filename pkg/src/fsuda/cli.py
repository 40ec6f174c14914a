"""Command-line harness: train, eval, ablate, gen-data.

All randomness funnels through the single master seed, split into named
streams (data generation, class split, episode sampler, parameter init,
evaluation), so ablation cells see identical episode streams and reruns
are reproducible. Every artifact embeds the config digest and seed;
wall-clock measurements go to `*.timing.json` sidecars, which are the
only outputs excluded from the byte-for-byte determinism contract.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import trainer
from .config import ConfigError, RunConfig, load_config
from .episodes import DomainShiftSpec, FeaturePool, split_classes, synth_domains
from .promptnet import (
    CheckpointError,
    build_backbone,
    params_from_checkpoint,
    save_checkpoint,
)

log = logging.getLogger(__name__)

STREAM_SPLIT = 0xDD

EXIT_OK = 0
EXIT_CONFIG = 1
EXIT_RUNTIME = 2


def build_pools(config: RunConfig):
    """Materialize (source pool, target pool, class split) per the config."""
    if config.data_mode == "synthetic":
        shift = DomainShiftSpec(
            rotation_seed=config.seed,
            rotation_strength=config.shift_rotation_strength,
            translation_scale=config.shift_translation,
            noise_sigma=config.shift_noise_sigma,
            signal_leak=config.shift_signal_leak,
        )
        src, tgt = synth_domains(
            config.synth_classes, config.synth_per_class, config.raw_dim,
            shift, config.seed,
            class_sep=config.synth_class_sep,
            sigma_within=config.synth_sigma_within,
            signal_dim=config.synth_signal_dim,
            sigma_complement=config.synth_sigma_complement,
        )
    else:
        src = FeaturePool.load(config.source_file, "source")
        tgt = FeaturePool.load(config.target_file, "target")
        if src.raw_dim != config.raw_dim:
            raise ConfigError(
                f"raw_dim = {config.raw_dim} does not match source file dim {src.raw_dim}"
            )
    universe = src.classes()
    want = config.split_train_classes + config.split_val_classes + config.split_test_classes
    if want != universe.size:
        raise ConfigError(
            "split_train_classes + split_val_classes + split_test_classes "
            f"= {want} must cover the {universe.size} source classes"
        )
    rng = np.random.default_rng(np.random.SeedSequence([config.seed, STREAM_SPLIT]))
    split = split_classes(
        universe, config.split_train_classes, config.split_val_classes,
        config.split_test_classes, rng,
    )
    return src, tgt, split


def _write(path: Path, text: str) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(text, encoding="utf-8")


def _train_once(config: RunConfig, out_dir: Path):
    src, tgt, split = build_pools(config)
    params, history = trainer.meta_train(config, src, tgt, split.train_classes)
    out_dir.mkdir(parents=True, exist_ok=True)
    save_checkpoint(out_dir / "checkpoint.e2ck", params, config.seed, config.digest())
    _write(out_dir / "history.ndjson", history.to_ndjson())
    _write(out_dir / "history.timing.json", history.timing_sidecar())
    _write(out_dir / "config.txt", config.to_text() + f"# digest: {config.digest()}\n")
    return params, history, (src, tgt, split)


def cmd_train(args) -> int:
    config = _load(args)
    out_dir = Path(config.out_dir)
    _, history, _ = _train_once(config, out_dir)
    final = history.records[-1].total if history.records else float("nan")
    print(f"trained {len(history.records)} episodes "
          f"(skipped {history.skipped_episodes}), final total loss {final:.6f}")
    print(f"artifacts in {out_dir} (digest {config.digest()[:12]})")
    return EXIT_OK


def cmd_eval(args) -> int:
    config = _load(args)
    if not args.checkpoint:
        raise ConfigError("checkpoint is required for eval")
    params, backbone, ckpt_digest = params_from_checkpoint(args.checkpoint, config)
    src, tgt, split = build_pools(config)
    num_tasks = args.num_tasks if args.num_tasks else config.num_test_tasks
    summary, timing, results = trainer.evaluate_suite(
        params, backbone, src, tgt, split.test_classes, config,
        num_tasks=num_tasks,
    )
    out_dir = Path(config.out_dir)
    _write(out_dir / "eval.json", summary.to_json())
    _write(out_dir / "eval.timing.json", timing.to_json())
    _write(out_dir / "per_task.csv", trainer.per_task_csv(results, config.digest(), summary.seed))
    print(f"mean accuracy {summary.mean_accuracy:.4f} over {summary.num_tasks} tasks "
          f"(median {summary.median_accuracy:.4f}, IQR {summary.iqr_accuracy:.4f})")
    if ckpt_digest != config.digest():
        print(f"note: checkpoint was trained under digest {ckpt_digest[:12]}, "
              f"evaluating under {config.digest()[:12]}")
    return EXIT_OK


ABLATION_CELLS = [
    ("prompt", "shared+task", {}),
    ("prompt", "shared_only", {"disable_task_prompt": True}),
    ("prompt", "task_only", {"disable_shared_prompt": True}),
    ("prompt", "none", {"disable_shared_prompt": True, "disable_task_prompt": True}),
    ("loss", "Lc_only", {"disable_ld": True, "disable_lf": True}),
    ("loss", "Lc_Ld", {"disable_lf": True}),
    ("loss", "full", {}),
]


def cmd_ablate(args) -> int:
    base = _load(args)
    out_dir = Path(base.out_dir)
    rows = []
    for group, name, switches in ABLATION_CELLS:
        config = base.replace(**switches).validate()
        src, tgt, split = build_pools(config)
        params, history = trainer.meta_train(config, src, tgt, split.train_classes)
        backbone = build_backbone(config, config.seed)
        summary, _, _ = trainer.evaluate_suite(
            params, backbone, src, tgt, split.test_classes, config,
        )
        rows.append({
            "group": group,
            "cell": name,
            "mean_accuracy": summary.mean_accuracy,
            "median_accuracy": summary.median_accuracy,
            "iqr_accuracy": summary.iqr_accuracy,
            "accuracy_variance": summary.accuracy_variance,
            "num_tasks": summary.num_tasks,
            "seed": summary.seed,
            "config_digest": config.digest(),
        })
        print(f"[{group}/{name}] mean accuracy {summary.mean_accuracy:.4f}")
    out_dir.mkdir(parents=True, exist_ok=True)
    _write(out_dir / "ablation.json", json.dumps(rows, sort_keys=True, indent=2) + "\n")
    buf = io.StringIO()
    writer = csv.DictWriter(buf, fieldnames=list(rows[0].keys()))
    writer.writeheader()
    writer.writerows(rows)
    _write(out_dir / "ablation.csv", buf.getvalue())
    return EXIT_OK


def cmd_gen_data(args) -> int:
    config = _load(args)
    src, tgt, _ = build_pools(config)
    out_dir = Path(config.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    src.save(out_dir / "source.e2fv")
    tgt.save(out_dir / "target.e2fv")
    _write(out_dir / "gen_data.json", json.dumps({
        "config_digest": config.digest(),
        "seed": config.seed,
        "num_classes": int(config.synth_classes),
        "per_class": int(config.synth_per_class),
        "raw_dim": int(config.raw_dim),
    }, sort_keys=True, indent=2) + "\n")
    print(f"wrote {out_dir}/source.e2fv and {out_dir}/target.e2fv")
    return EXIT_OK


def _load(args) -> RunConfig:
    config = load_config(args.config, args.set or [])
    replacements = {}
    if args.seed is not None:
        replacements["seed"] = args.seed
    if args.out is not None:
        replacements["out_dir"] = args.out
    if getattr(args, "workers", None) is not None:
        replacements["workers"] = args.workers
    if replacements:
        config = config.replace(**replacements).validate()
    return config


def _add_common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", default=None, help="flat key = value config file")
    p.add_argument("--set", action="append", metavar="KEY=VALUE",
                   help="override a single config key (repeatable)")
    p.add_argument("--seed", type=int, default=None, help="master seed override")
    p.add_argument("--out", default=None, help="output directory override")
    p.add_argument("--workers", type=int, default=None,
                   help="evaluation parallelism (0 = all cores)")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="fsuda",
        description="few-shot unsupervised domain adaptation with meta prompt learning",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p_train = sub.add_parser("train", help="meta-train and write a checkpoint")
    _add_common(p_train)
    p_train.set_defaults(func=cmd_train)

    p_eval = sub.add_parser("eval", help="evaluate a checkpoint over sampled tasks")
    _add_common(p_eval)
    p_eval.add_argument("--checkpoint", required=True, help="path to a .e2ck checkpoint")
    p_eval.add_argument("--num-tasks", type=int, default=None, dest="num_tasks")
    p_eval.set_defaults(func=cmd_eval)

    p_ablate = sub.add_parser("ablate", help="run the prompt grid and loss-knockout cells")
    _add_common(p_ablate)
    p_ablate.set_defaults(func=cmd_ablate)

    p_gen = sub.add_parser("gen-data", help="materialize synthetic pools to feature files")
    _add_common(p_gen)
    p_gen.set_defaults(func=cmd_gen_data)

    return parser


def main(argv=None) -> int:
    logging.basicConfig(level=logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (ConfigError, CheckpointError, FileNotFoundError) as err:
        print(f"error: {err}", file=sys.stderr)
        return EXIT_CONFIG
    except Exception as err:  # noqa: BLE001 - CLI boundary
        print(f"runtime error: {err}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
