"""Command-line entry point: sample, split, train, eval, bench, describe.

Exit status: 0 ok, 1 domain error, 2 configuration error.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from fractions import Fraction
from pathlib import Path

import torch

from . import bench as bench_mod
from .config import RunConfig, load_config
from .dataset import (
    DatasetManifest,
    SamplingSpec,
    balanced_sample,
    compute_balanced_n,
    load_affectnet,
    load_ckplus,
    load_fer2013,
    load_jaffe,
    stratified_split,
    synthetic_manifest,
)
from .errors import ConfigError, FerError
from .metrics import evaluate
from .model import FERModel, ModelConfig, build_model, describe, load_weights, save_weights
from .training import TensorData, fit, load_checkpoint, make_fit_state, predict_logits, save_checkpoint

log = logging.getLogger("fertransfer")


def _ratio(value) -> Fraction:
    if isinstance(value, str) and ":" in value:
        a, b = value.split(":")
        return Fraction(int(a), int(b))
    return Fraction(str(value))


def _prepare_output(cfg: RunConfig) -> Path:
    out = cfg.output_dir
    out.mkdir(parents=True, exist_ok=True)
    cfg.save(out / "resolved_config.yaml")
    return out


def _source_manifest(cfg: RunConfig) -> DatasetManifest:
    if cfg.data.get("manifest"):
        return DatasetManifest.load(cfg.data_path("manifest"))
    if cfg.data.get("synthetic_per_class"):
        return synthetic_manifest(int(cfg.data["synthetic_per_class"]), seed=int(cfg.sampling["seed"]))
    return load_affectnet(cfg.data_path("affectnet"), "train", cfg.data.get("affectnet_partition", "manual"))


def cmd_sample(cfg: RunConfig, args) -> int:
    if not any(cfg.data.get(k) for k in ("manifest", "synthetic_per_class")):
        cfg.data_path("affectnet")
    manifest = _source_manifest(cfg)
    n = cfg.sampling.get("n") or compute_balanced_n(manifest)
    sampled = balanced_sample(manifest, SamplingSpec(int(n), int(cfg.sampling["seed"])))
    out = _prepare_output(cfg)
    sampled.save(out / "sampled.jsonl")
    if cfg.data.get("affectnet") and cfg.data.get("affectnet_partition", "manual") == "manual":
        load_affectnet(cfg.data_path("affectnet"), "test").save(out / "test.jsonl")
    print(f"sampled n={n} per class, {len(sampled)} total -> {out / 'sampled.jsonl'}")
    return 0


def cmd_split(cfg: RunConfig, args) -> int:
    src = cfg.data_path("manifest", required=False) or cfg.output_dir / "sampled.jsonl"
    if not src.is_file():
        raise ConfigError("data.manifest", f"no manifest to split at {src}")
    train, val = stratified_split(DatasetManifest.load(src), _ratio(cfg.split["train_ratio"]),
                                  int(cfg.split["seed"]))
    out = _prepare_output(cfg)
    train.save(out / "train.jsonl")
    val.save(out / "val.jsonl")
    print(f"train {len(train)} / val {len(val)} -> {out}")
    return 0


def _train_val(cfg: RunConfig) -> tuple[DatasetManifest, DatasetManifest]:
    if cfg.data.get("synthetic_per_class"):
        full = synthetic_manifest(int(cfg.data["synthetic_per_class"]), seed=int(cfg.sampling["seed"]))
        return stratified_split(full, _ratio(cfg.split["train_ratio"]), int(cfg.split["seed"]))
    return (DatasetManifest.load(cfg.data_path("train_manifest")),
            DatasetManifest.load(cfg.data_path("val_manifest")))


def cmd_train(cfg: RunConfig, args) -> int:
    out = _prepare_output(cfg)
    model = build_model(cfg.model, seed=cfg.train.seed)
    if args.backbone:
        from .model import load_backbone_weights
        load_backbone_weights(model, args.backbone)
    if cfg.train.epochs == 0 and not args.resume:
        state = make_fit_state(model, cfg.train, 1)
        state.best_state = model.state_dict()
        save_checkpoint(state, out / "checkpoint.pt", {"resolved_config": cfg.tree})
        save_weights(model, out / "model.npz")
        state.log.save(out / "train_log.jsonl")
        print(f"epochs=0: wrote initial state to {out}")
        return 0
    train_m, val_m = _train_val(cfg)
    train = TensorData.from_manifest(train_m, cfg.preprocess)
    val = TensorData.from_manifest(val_m, cfg.preprocess)
    torch.manual_seed(cfg.train.seed)
    state = make_fit_state(model, cfg.train, len(train))
    if args.resume:
        load_checkpoint(state, args.resume)

    def checkpoint(s):
        save_checkpoint(s, out / "checkpoint.pt", {"resolved_config": cfg.tree})
        s.log.save(out / "train_log.jsonl")

    model, train_log = fit(model, train, val, cfg.train, state=state, on_epoch_end=checkpoint)
    save_weights(model, out / "model.npz")
    train_log.save(out / "train_log.jsonl")
    print(f"best epoch {train_log.best_epoch}; weights -> {out / 'model.npz'}")
    return 0


def _load_model(cfg: RunConfig, checkpoint: str | None) -> FERModel:
    if checkpoint is None:
        raise ConfigError("--checkpoint", "a checkpoint is required")
    path = Path(checkpoint)
    if not path.is_file():
        raise ConfigError("--checkpoint", f"file not found: {path}")
    if path.suffix == ".pt":
        ck = torch.load(path, weights_only=False)
        model = FERModel(ModelConfig.from_dict(ck["model_config"]))
        model.load_state_dict(ck["best_state"] or ck["model"])
    else:
        model = load_weights(FERModel(cfg.model), path)
    return model.eval()


def cmd_eval(cfg: RunConfig, args) -> int:
    model = _load_model(cfg, args.checkpoint)
    manifest = DatasetManifest.load(cfg.data_path("test_manifest"))
    data = TensorData.from_manifest(manifest, cfg.preprocess)
    report = evaluate(predict_logits(model, data).double().numpy(), data.labels.numpy(), "test")
    out = _prepare_output(cfg)
    (out / "eval_report.json").write_text(json.dumps(report.to_record(), indent=2))
    print(json.dumps({k: v for k, v in report.to_record().items() if k not in ("per_class", "confusion")}))
    return 0


def _adapter(cfg: RunConfig, name: str):
    if name == "affectnet":
        path = cfg.data_path("affectnet")
        return lambda: load_affectnet(path, "test", cfg.data.get("affectnet_partition", "manual"))
    if name == "jaffe":
        path = cfg.data_path("jaffe")
        return lambda: load_jaffe(path)
    if name == "ckplus":
        path = cfg.data_path("ckplus")
        return lambda: load_ckplus(path)
    if name == "fer2013":
        path = cfg.data_path("fer2013")
        return lambda: load_fer2013(path, cfg.data.get("fer2013_usage"))
    if name.startswith("synthetic"):
        per_class = int(name.split(":")[1]) if ":" in name else 10
        return lambda: synthetic_manifest(per_class, seed=1)
    raise ConfigError("--datasets", f"unknown dataset {name!r}")


def cmd_bench(cfg: RunConfig, args) -> int:
    model = _load_model(cfg, args.checkpoint)
    names = [n.strip() for n in args.datasets.split(",") if n.strip()]
    adapters = [(n, _adapter(cfg, n)) for n in names]
    rows = bench_mod.benchmark(model, adapters, cfg.preprocess)
    out = _prepare_output(cfg)
    bench_mod.write_reports(rows, out / "bench_reports.jsonl")
    table = bench_mod.render_table(rows) + "\n\n" + bench_mod.render_comparison(rows)
    (out / "bench_table.txt").write_text(table + "\n")
    print(table)
    return 1 if all(r.error for r in rows) else 0


def cmd_describe(cfg: RunConfig, args) -> int:
    print(f"preset: {cfg.preset}")
    print(describe(cfg.model))
    return 0


COMMANDS = {
    "sample": cmd_sample,
    "split": cmd_split,
    "train": cmd_train,
    "eval": cmd_eval,
    "bench": cmd_bench,
    "describe": cmd_describe,
}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="YAML run configuration")
    common.add_argument("--preset", choices=["toy", "full"])
    common.add_argument("--output-dir")
    common.add_argument("--seed", type=int, help="overrides train, sampling and split seeds")
    common.add_argument("--set", dest="sets", action="append", default=[], metavar="KEY=VALUE",
                        help="override any config value, e.g. train.lr_decoder=1e-4")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="fertransfer", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name, parents=[common])
        if name == "train":
            p.add_argument("--epochs", type=int)
            p.add_argument("--resume", help="checkpoint.pt to continue from")
            p.add_argument("--backbone", help="encoder weight file (.npz)")
        if name in ("eval", "bench"):
            p.add_argument("--checkpoint", help="model.npz or checkpoint.pt")
        if name == "bench":
            p.add_argument("--datasets", default="jaffe,ckplus,fer2013,affectnet")
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    overrides: dict = {}
    if args.preset:
        overrides["preset"] = args.preset
    if args.output_dir:
        overrides["output_dir"] = args.output_dir
    if getattr(args, "epochs", None) is not None:
        overrides.setdefault("train", {})["epochs"] = args.epochs
    if args.seed is not None:
        overrides.setdefault("train", {})["seed"] = args.seed
        overrides["sampling"] = {"seed": args.seed}
        overrides["split"] = {"seed": args.seed}
    try:
        cfg = load_config(args.config, args.sets, overrides)
        return COMMANDS[args.command](cfg, args)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return 2
    except (FerError, ValueError, OSError) as e:
        print(f"error: {type(e).__name__}: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
