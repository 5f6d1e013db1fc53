"""Command-line front end: generate | train | infer | eval | gradcheck | ablate.

Runs are driven by a JSON config whose keys mirror the training, inference
and scene-generation options; any flag overrides its config key. The
effective merged config is echoed into each run's output directory so a
run can be reproduced from its artifacts alone.

Exit codes: 0 success, 1 usage error, 2 data error, 3 numeric failure.
"""

import argparse
import copy
import json
import sys
from pathlib import Path

import numpy as np

from . import gradsuite, metrics, net, synthdata
from .errors import DataError, NumericError, UsageError
from .infer import InferenceConfig, infer_video, run_manifest, write_run_manifest
from .netpbm import read_pgm, write_pgm
from .train import TrainConfig, train, write_loss_log

DEFAULT_CONFIG = {
    "seed": 7,
    "variant": "symmetric",
    "channel_mode": "se",
    "paths": {
        "corpus": "corpus",
        "out": None,
        "checkpoint": None,
        "pred": None,
    },
    "train": {
        "learning_rate": 2.5e-4,
        "batch_size": 8,
        "ortho_lambda": 1e-4,
        "epochs": 17,
        "seed": None,
        "alternation_ratio": [1, 1],
    },
    "infer": {
        "n_refs": 5,
        "strategy": "global_uniform",
        "fusion": "summary",
        "threshold": 0.5,
        "seed": None,
        "split": "test",
    },
    "scene": {
        "frame_size": [96, 96],
        "t_frames": 24,
        "n_train": 5,
        "n_test": 3,
        "n_static": 48,
        "n_distractors": 2,
        "noise_sigma": 0.02,
    },
}

_STRATEGY_ALIASES = {"uniform": "global_uniform", "random": "global_random", "local": "local_consecutive"}

_ABLATE_N_SWEEP = (0, 1, 2, 5, 7)


def _merge_config(base: dict, override: dict, path: str = "") -> dict:
    merged = copy.deepcopy(base)
    for key, value in override.items():
        where = f"{path}.{key}" if path else key
        if key not in base:
            raise UsageError(f"unknown config key: {where}")
        if isinstance(base[key], dict):
            if not isinstance(value, dict):
                raise UsageError(f"config key {where} must be an object")
            merged[key] = _merge_config(base[key], value, where)
        else:
            merged[key] = value
    return merged


def load_config(args) -> dict:
    config = copy.deepcopy(DEFAULT_CONFIG)
    if args.config:
        path = Path(args.config)
        if not path.exists():
            raise UsageError(f"config file not found: {path}")
        try:
            user = json.loads(path.read_text())
        except json.JSONDecodeError as exc:
            raise DataError(f"config file {path} is not valid JSON: {exc}") from None
        config = _merge_config(config, user)
    if args.seed is not None:
        config["seed"] = args.seed
    if getattr(args, "variant", None):
        config["variant"] = args.variant
    if getattr(args, "out", None):
        config["paths"]["out"] = args.out
    if getattr(args, "checkpoint", None):
        config["paths"]["checkpoint"] = args.checkpoint
    if getattr(args, "corpus", None):
        config["paths"]["corpus"] = args.corpus
    if getattr(args, "pred", None):
        config["paths"]["pred"] = args.pred
    if getattr(args, "n_refs", None) is not None:
        config["infer"]["n_refs"] = args.n_refs
    if getattr(args, "strategy", None):
        config["infer"]["strategy"] = _STRATEGY_ALIASES[args.strategy]
    if getattr(args, "fusion", None):
        config["infer"]["fusion"] = args.fusion
    return config


def _echo_config(config: dict, out_dir: Path) -> None:
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "effective_config.json").write_text(json.dumps(config, indent=1, sort_keys=True))


def _out_dir(config: dict, command: str) -> Path:
    out = config["paths"]["out"]
    if not out:
        raise UsageError(f"{command} needs an output directory (--out or paths.out)")
    return Path(out)


def _train_config(config: dict) -> TrainConfig:
    section = config["train"]
    seed = section["seed"] if section["seed"] is not None else config["seed"]
    return TrainConfig(
        learning_rate=section["learning_rate"],
        batch_size=section["batch_size"],
        ortho_lambda=section["ortho_lambda"],
        epochs=section["epochs"],
        seed=seed,
        alternation_ratio=tuple(section["alternation_ratio"]),
    )


def _infer_config(config: dict) -> InferenceConfig:
    section = config["infer"]
    seed = section["seed"] if section["seed"] is not None else config["seed"]
    cfg = InferenceConfig(
        n_refs=section["n_refs"],
        strategy=section["strategy"],
        fusion=section["fusion"],
        threshold=section["threshold"],
        seed=seed,
    )
    cfg.validate()
    return cfg


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------

def cmd_generate(args) -> int:
    config = load_config(args)
    out = config["paths"]["out"] or config["paths"]["corpus"]
    if not out:
        raise UsageError("generate needs a corpus directory (--out or paths.corpus)")
    scene = config["scene"]
    synthdata.build_corpus(
        Path(out),
        seed=config["seed"],
        n_train=scene["n_train"],
        n_test=scene["n_test"],
        t_frames=scene["t_frames"],
        frame_size=tuple(scene["frame_size"]),
        n_static=scene["n_static"],
        n_distractors=scene["n_distractors"],
        noise_sigma=scene["noise_sigma"],
    )
    _echo_config(config, Path(out))
    print(f"corpus written to {out}")
    return 0


def _train_model(config: dict, corpus: synthdata.Corpus, out_dir: Path, variant: str) -> Path:
    train_cfg = _train_config(config)
    rng = np.random.default_rng(train_cfg.seed)
    params = net.init_model_params(
        rng,
        variant=variant,
        channel_mode=config["channel_mode"],
        ortho_lambda=train_cfg.ortho_lambda,
    )
    result = train(corpus, train_cfg, params=params)
    checkpoint_dir = out_dir / "checkpoint"
    net.save_checkpoint(
        params,
        checkpoint_dir,
        hyperparameters={
            "learning_rate": train_cfg.learning_rate,
            "batch_size": train_cfg.batch_size,
            "ortho_lambda": train_cfg.ortho_lambda,
            "epochs": train_cfg.epochs,
            "alternation_ratio": list(train_cfg.alternation_ratio),
        },
        seed=train_cfg.seed,
    )
    write_loss_log(result.log, out_dir / "loss_log.csv")
    return checkpoint_dir


def cmd_train(args) -> int:
    config = load_config(args)
    out_dir = _out_dir(config, "train")
    corpus = synthdata.Corpus(Path(config["paths"]["corpus"]))
    _echo_config(config, out_dir)
    checkpoint_dir = _train_model(config, corpus, out_dir, config["variant"])
    print(f"checkpoint written to {checkpoint_dir}")
    print(f"loss log written to {out_dir / 'loss_log.csv'}")
    return 0


def _infer_split(params, corpus: synthdata.Corpus, infer_cfg: InferenceConfig, out_dir: Path, split: str) -> list:
    names = []
    for seq in corpus.sequences(split):
        frames = seq.load_frames()
        rng = np.random.default_rng([infer_cfg.seed, len(names)])
        result = infer_video(params, frames, infer_cfg, rng=rng)
        for i, mask in enumerate(result.masks):
            write_pgm(out_dir / seq.name / "masks" / f"{i:05d}.pgm", mask)
        names.append(seq.name)
    return names


def cmd_infer(args) -> int:
    config = load_config(args)
    out_dir = _out_dir(config, "infer")
    checkpoint = config["paths"]["checkpoint"]
    if not checkpoint:
        raise UsageError("infer needs a checkpoint (--checkpoint or paths.checkpoint)")
    params, _ = net.load_checkpoint(Path(checkpoint))
    corpus = synthdata.Corpus(Path(config["paths"]["corpus"]))
    infer_cfg = _infer_config(config)
    _echo_config(config, out_dir)
    names = _infer_split(params, corpus, infer_cfg, out_dir, config["infer"]["split"])
    write_run_manifest(run_manifest(infer_cfg, Path(checkpoint), names), out_dir / "run_manifest.json")
    print(f"masks for {len(names)} sequences written to {out_dir}")
    return 0


def _eval_split(pred_root: Path, corpus: synthdata.Corpus, split: str) -> dict:
    scores = {}
    for seq in corpus.sequences(split):
        gts = seq.load_masks()
        preds = []
        for i in range(len(seq)):
            mask_path = pred_root / seq.name / "masks" / f"{i:05d}.pgm"
            if not mask_path.exists():
                raise DataError(f"missing predicted mask {mask_path}")
            preds.append(read_pgm(mask_path) > 0)
        scores[seq.name] = metrics.score_sequence(preds, gts)
    return scores


def cmd_eval(args) -> int:
    config = load_config(args)
    out_dir = _out_dir(config, "eval")
    pred = config["paths"]["pred"]
    if not pred:
        raise UsageError("eval needs a prediction directory (--pred or paths.pred)")
    corpus = synthdata.Corpus(Path(config["paths"]["corpus"]))
    scores = _eval_split(Path(pred), corpus, config["infer"]["split"])
    _echo_config(config, out_dir)
    metrics.write_report_json(scores, out_dir / "scores.json")
    metrics.write_report_csv(scores, out_dir / "scores.csv")
    print(metrics.format_table(scores))
    return 0


def cmd_gradcheck(args) -> int:
    config = load_config(args)
    reports = gradsuite.run_suite()
    print(gradsuite.format_reports(reports))
    if not all(r.passed for r in reports):
        raise NumericError("gradient check failed")
    return 0


def cmd_ablate(args) -> int:
    config = load_config(args)
    out_dir = _out_dir(config, "ablate")
    corpus = synthdata.Corpus(Path(config["paths"]["corpus"]))
    _echo_config(config, out_dir)
    split = config["infer"]["split"]

    checkpoints = {}
    for variant in ("vanilla", "symmetric", "channelwise"):
        ckpt_dir = out_dir / "checkpoints" / variant
        if not (ckpt_dir / "manifest.json").exists():
            print(f"training {variant} ...")
            run_dir = out_dir / "runs" / variant
            run_dir.mkdir(parents=True, exist_ok=True)
            trained = _train_model(config, corpus, run_dir, variant)
            net_params, _ = net.load_checkpoint(trained)
            net.save_checkpoint(net_params, ckpt_dir, seed=config["seed"])
        checkpoints[variant] = ckpt_dir

    def mean_j(variant: str, n_refs: int, strategy: str, fusion: str) -> float:
        params, _ = net.load_checkpoint(checkpoints[variant])
        cfg = InferenceConfig(
            n_refs=n_refs,
            strategy=strategy,
            fusion=fusion,
            threshold=config["infer"]["threshold"],
            seed=config["infer"]["seed"] if config["infer"]["seed"] is not None else config["seed"],
        )
        cfg.validate()
        scores = {}
        for i, seq in enumerate(corpus.sequences(split)):
            frames = seq.load_frames()
            rng = np.random.default_rng([cfg.seed, i])
            result = infer_video(params, frames, cfg, rng=rng)
            scores[seq.name] = metrics.score_sequence([m > 0 for m in result.masks], seq.load_masks())
        return metrics.aggregate_mean_j(scores)

    base = dict(n_refs=config["infer"]["n_refs"], strategy="global_uniform", fusion="summary")
    rows = []
    for variant in ("vanilla", "symmetric", "channelwise"):
        rows.append(("co-attention variant", variant, mean_j(variant, **base)))
    for fusion in ("summary", "prediction"):
        rows.append(("fusion", fusion, mean_j("symmetric", base["n_refs"], "global_uniform", fusion)))
    for strategy in ("global_uniform", "global_random", "local_consecutive"):
        rows.append(("reference sampling", strategy, mean_j("symmetric", base["n_refs"], strategy, "summary")))
    for n in _ABLATE_N_SWEEP:
        rows.append(("reference count", f"N={n}", mean_j("symmetric", n, "global_uniform", "summary")))

    lines = [f"{'axis':<22}{'setting':<22}{'mean J':>8}", "-" * 52]
    lines += [f"{axis:<22}{setting:<22}{value * 100:>8.2f}" for axis, setting, value in rows]
    table = "\n".join(lines)
    (out_dir / "ablation.txt").write_text(table + "\n")
    with open(out_dir / "ablation.csv", "w") as fh:
        fh.write("axis,setting,mean_j\n")
        for axis, setting, value in rows:
            fh.write(f"{axis},{setting},{value!r}\n")
    print(table)
    return 0


# ---------------------------------------------------------------------------
# argument parsing
# ---------------------------------------------------------------------------

class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="coattseg", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)
    for name, fn in (
        ("generate", cmd_generate),
        ("train", cmd_train),
        ("infer", cmd_infer),
        ("eval", cmd_eval),
        ("gradcheck", cmd_gradcheck),
        ("ablate", cmd_ablate),
    ):
        p = sub.add_parser(name)
        p.set_defaults(fn=fn)
        p.add_argument("--config", type=str, help="JSON run config")
        p.add_argument("--seed", type=int, help="master seed override")
        p.add_argument("--out", type=str, help="output directory")
        p.add_argument("--checkpoint", type=str, help="checkpoint directory")
        p.add_argument("--corpus", type=str, help="corpus root (overrides paths.corpus)")
        p.add_argument("--pred", type=str, help="predicted-masks root (overrides paths.pred)")
        p.add_argument("--n-refs", type=int, dest="n_refs", help="number of reference frames")
        p.add_argument("--variant", choices=("vanilla", "symmetric", "channelwise"))
        p.add_argument("--strategy", choices=tuple(_STRATEGY_ALIASES))
        p.add_argument("--fusion", choices=("summary", "prediction"))
    return parser


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
        return args.fn(args)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return 1
    except DataError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return 2
    except NumericError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
