"""Command-line entry points.

Subcommands: score (descriptiveness table), synth (synthetic dataset),
train, eval, gradcheck.  Every option can also come from a JSON config
file (--config); explicit flags override the file, unknown config keys
are rejected.  Commands that write outputs echo their effective config
next to them.  Exit codes: 0 success, 1 failed check or aborted run,
2 usage, config, or IO errors.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from . import corpus as corpus_mod
from . import datagen, evaluation, losses, trainer

_REQUIRED = {
    "score": ("corpus", "out"),
    "synth": ("out",),
    "train": ("corpus", "table", "image_features", "text_features", "out"),
    "eval": ("corpus", "table", "image_features", "text_features",
             "checkpoint", "out"),
    "gradcheck": (),
}

_DEFAULTS = {
    "score": {"corpus": None, "out": None, "pool_split": "train"},
    "synth": {"out": None, "images": 200, "levels": 4, "shared_vocab": 12,
              "rare_vocab": 600, "dim": 48, "noise_sigma": 0.25, "seed": 0},
    "train": {"corpus": None, "table": None, "image_features": None,
              "text_features": None, "out": None, "split": "train",
              "val_split": "auto", "variant": "full", "embed_dim": 64,
              "batch_size": 128, "epochs": 25, "lr": 5e-4,
              "weight_decay": 1e-4, "warmup_epochs": 2, "decay_epoch": 15,
              "decay_factor": 0.1, "seed": 0, "alpha": 0.2, "tau": 6.0,
              "lambda_": 0.07, "resume": None},
    "eval": {"corpus": None, "table": None, "image_features": None,
             "text_features": None, "checkpoint": None, "out": None,
             "split": "train", "folds": None, "points": 50},
    "gradcheck": {"seed": 0, "trials": 20, "step": 1e-5, "tol": 1e-4},
}


def _merge_config(args: argparse.Namespace, command: str) -> dict:
    """Defaults, then config-file values, then explicit flags."""
    defaults = _DEFAULTS[command]
    cfg = dict(defaults)
    if getattr(args, "config", None):
        with open(args.config, "r", encoding="utf-8") as fh:
            loaded = json.load(fh)
        if not isinstance(loaded, dict):
            raise ValueError(f"{args.config}: config must be a JSON object")
        for key, value in loaded.items():
            dest = "lambda_" if key == "lambda" else key.replace("-", "_")
            if dest not in defaults:
                raise ValueError(f"{args.config}: unknown config key {key!r}")
            cfg[dest] = value
    for key, value in vars(args).items():
        if key in defaults and value is not None:
            cfg[key] = value
    for name in _REQUIRED[command]:
        if cfg[name] is None:
            raise ValueError(f"missing required option --{name.replace('_', '-')}")
    return cfg


def _write_config_echo(out_dir, cfg: dict) -> None:
    pretty = {("lambda" if k == "lambda_" else k): v for k, v in cfg.items()}
    with open(Path(out_dir) / "config.json", "w", encoding="utf-8") as fh:
        json.dump(pretty, fh, indent=2, sort_keys=True)
        fh.write("\n")


def _cmd_score(args: argparse.Namespace) -> int:
    cfg = _merge_config(args, "score")
    records = corpus_mod.read_corpus_jsonl(cfg["corpus"])
    _, table = corpus_mod.build_table(records, pool_split=cfg["pool_split"])
    corpus_mod.write_table_jsonl(cfg["out"], table)
    print(f"scored {len(table.scores)} sentences "
          f"(pool split {cfg['pool_split']!r}, raw range "
          f"[{table.raw_min:.6f}, {table.raw_max:.6f}]) -> {cfg['out']}")
    return 0


def _cmd_synth(args: argparse.Namespace) -> int:
    cfg = _merge_config(args, "synth")
    spec = datagen.SynthSpec(
        n_images=cfg["images"], levels=cfg["levels"],
        shared_vocab=cfg["shared_vocab"], rare_vocab=cfg["rare_vocab"],
        feature_dim=cfg["dim"], noise_sigma=cfg["noise_sigma"],
        seed=cfg["seed"])
    paths = datagen.write_dataset(cfg["out"], spec)
    _write_config_echo(cfg["out"], cfg)
    for role in sorted(paths):
        print(f"{role}: {paths[role]}")
    return 0


def _train_config(cfg: dict) -> trainer.TrainConfig:
    return trainer.TrainConfig(
        embed_dim=cfg["embed_dim"], batch_size=cfg["batch_size"],
        epochs=cfg["epochs"], lr=cfg["lr"], weight_decay=cfg["weight_decay"],
        warmup_epochs=cfg["warmup_epochs"], decay_epoch=cfg["decay_epoch"],
        decay_factor=cfg["decay_factor"], seed=cfg["seed"],
        variant=cfg["variant"],
        loss=losses.LossConfig(alpha=cfg["alpha"], tau=cfg["tau"],
                               lam=cfg["lambda_"]))


def _cmd_train(args: argparse.Namespace) -> int:
    cfg = _merge_config(args, "train")
    dataset = trainer.load_dataset(cfg["corpus"], cfg["table"],
                                   cfg["image_features"], cfg["text_features"],
                                   split=cfg["split"])
    val_split = cfg["val_split"]
    if val_split == "auto":
        present = {r.split for r in corpus_mod.read_corpus_jsonl(cfg["corpus"])}
        val_split = "val" if ("val" in present and cfg["split"] != "val") else "none"
    val_dataset = None
    if val_split != "none":
        val_dataset = trainer.load_dataset(cfg["corpus"], cfg["table"],
                                           cfg["image_features"],
                                           cfg["text_features"], split=val_split)
    out = Path(cfg["out"])
    out.mkdir(parents=True, exist_ok=True)
    _write_config_echo(out, cfg)

    def log(rec):
        print(f"epoch {rec['epoch']:3d} lr {rec['lr']:.2e} "
              f"loss {rec['loss']:.6f} triplet {rec['triplet']:.6f} "
              f"ordering {rec['ordering']:.6f} val_rsum {rec['val_rsum']:.2f}")

    result = trainer.train(dataset, _train_config(cfg), val_dataset=val_dataset,
                           checkpoint_path=out / "checkpoint.bin",
                           resume_from=cfg["resume"], log_fn=log)
    with open(out / "history.json", "w", encoding="utf-8") as fh:
        json.dump(result.history, fh, indent=2, sort_keys=True)
        fh.write("\n")
    print(f"checkpoint: {out / 'checkpoint.bin'}")
    return 0


def _cmd_eval(args: argparse.Namespace) -> int:
    cfg = _merge_config(args, "eval")
    dataset = trainer.load_dataset(cfg["corpus"], cfg["table"],
                                   cfg["image_features"], cfg["text_features"],
                                   split=cfg["split"])
    saved = trainer.load_checkpoint(cfg["checkpoint"])
    img_e, txt_e = trainer.embed_dataset(saved["params"], dataset)
    levels = dataset.levels if (dataset.levels >= 0).any() else None
    report = evaluation.evaluate(img_e, txt_e, dataset.image_of_text,
                                 levels=levels, n_points=cfg["points"],
                                 n_folds=cfg["folds"])
    out = Path(cfg["out"])
    out.mkdir(parents=True, exist_ok=True)
    _write_config_echo(out, cfg)
    evaluation.write_report_json(out / "report.json", report)
    if "distance_by_level" in report:
        evaluation.write_distance_csv(out / "distance_by_level.csv",
                                      report["distance_by_level"])
    line = (f"rsum {report['rsum']:.2f} "
            f"i2t@1 {report['recall']['i2t'][1]:.2f} "
            f"t2i@1 {report['recall']['t2i'][1]:.2f}")
    if "d_corr" in report:
        line += f" d_corr {report['d_corr']:.2f}"
    print(line)
    print(f"report: {out / 'report.json'}")
    return 0


def _cmd_gradcheck(args: argparse.Namespace) -> int:
    cfg = _merge_config(args, "gradcheck")
    result = losses.run_gradcheck(seed=cfg["seed"], trials=cfg["trials"],
                                  h=cfg["step"], tol=cfg["tol"])
    worst_by_loss: dict[str, float] = {}
    for rec in result["trials"]:
        worst_by_loss[rec["loss"]] = max(worst_by_loss.get(rec["loss"], 0.0),
                                         rec["rel_err"])
    for name in sorted(worst_by_loss):
        print(f"{name:16s} max_rel_err {worst_by_loss[name]:.3e}")
    verdict = "PASSED" if result["passed"] else "FAILED"
    print(f"gradcheck {verdict} (trials={cfg['trials']}, h={cfg['step']:g}, "
          f"tol={cfg['tol']:g})")
    return 0 if result["passed"] else 1


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="descmatch",
        description="Descriptiveness-weighted cross-modal retrieval toolkit")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", help="JSON config file; flags override it")

    p = sub.add_parser("score", help="build a descriptiveness table")
    common(p)
    p.add_argument("--corpus", help="corpus JSONL path")
    p.add_argument("--out", help="output table JSONL path")
    p.add_argument("--pool-split", help="split defining the pool (default train)")
    p.set_defaults(func=_cmd_score)

    p = sub.add_parser("synth", help="generate a synthetic dataset")
    common(p)
    p.add_argument("--out", help="output directory")
    p.add_argument("--images", type=int, help="number of images")
    p.add_argument("--levels", type=int, help="hierarchy depth")
    p.add_argument("--shared-vocab", type=int, help="common-word vocabulary size")
    p.add_argument("--rare-vocab", type=int, help="level-word vocabulary size")
    p.add_argument("--dim", type=int, help="feature dimension")
    p.add_argument("--noise-sigma", type=float, help="per-level feature noise")
    p.add_argument("--seed", type=int, help="rng seed")
    p.set_defaults(func=_cmd_synth)

    p = sub.add_parser("train", help="train the shared embedding")
    common(p)
    p.add_argument("--corpus", help="corpus JSONL path")
    p.add_argument("--table", help="descriptiveness table JSONL path")
    p.add_argument("--image-features", help="image feature manifest/stem")
    p.add_argument("--text-features", help="text feature manifest/stem")
    p.add_argument("--out", help="output directory")
    p.add_argument("--split", help="training split (default train)")
    p.add_argument("--val-split",
                   help="validation split, 'auto' (default) or 'none'")
    p.add_argument("--variant", choices=sorted(trainer.LOSS_VARIANTS),
                   help="loss variant (default full)")
    p.add_argument("--embed-dim", type=int, help="shared embedding dimension")
    p.add_argument("--batch-size", type=int)
    p.add_argument("--epochs", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--weight-decay", type=float)
    p.add_argument("--warmup-epochs", type=int,
                   help="epochs using mean-of-hinges instead of mining")
    p.add_argument("--decay-epoch", type=int, help="epoch the lr decays at")
    p.add_argument("--decay-factor", type=float)
    p.add_argument("--seed", type=int)
    p.add_argument("--alpha", type=float, help="fixed margin (baseline variant)")
    p.add_argument("--tau", type=float, help="adaptive margin divisor")
    p.add_argument("--lambda", dest="lambda_", type=float,
                   help="ordering loss weight")
    p.add_argument("--resume", help="checkpoint to resume from")
    p.set_defaults(func=_cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint")
    common(p)
    p.add_argument("--corpus", help="corpus JSONL path")
    p.add_argument("--table", help="descriptiveness table JSONL path")
    p.add_argument("--image-features", help="image feature manifest/stem")
    p.add_argument("--text-features", help="text feature manifest/stem")
    p.add_argument("--checkpoint", help="trained checkpoint path")
    p.add_argument("--out", help="output directory")
    p.add_argument("--split", help="split to evaluate (default train)")
    p.add_argument("--folds", type=int, help="also report fold-averaged recalls")
    p.add_argument("--points", type=int,
                   help="stations on the specific-to-generic walk (default 50)")
    p.set_defaults(func=_cmd_eval)

    p = sub.add_parser("gradcheck", help="finite-difference gradient audit")
    common(p)
    p.add_argument("--seed", type=int)
    p.add_argument("--trials", type=int, help="random batches per loss")
    p.add_argument("--step", type=float, help="central-difference step")
    p.add_argument("--tol", type=float, help="relative-error threshold")
    p.set_defaults(func=_cmd_gradcheck)
    return parser


def main(argv=None) -> int:
    args = _build_parser().parse_args(argv)
    try:
        return args.func(args)
    except RuntimeError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except (OSError, ValueError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
