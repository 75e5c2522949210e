"""Run configuration: YAML file with sections, overridden by command-line values.

Precedence, lowest to highest: built-in defaults, the preset's model
geometry, the config file, ``--set section.key=value`` flags, dedicated flags
such as ``--epochs``. Relative dataset paths resolve against ``$FER_DATA_ROOT``
when it is set.
"""

from __future__ import annotations

import copy
import json
import os
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

import yaml

from .errors import ConfigError
from .model import DecoderConfig, EncoderConfig, ModelConfig, PRESETS
from .preprocess import NormalizationSpec, PreprocessConfig
from .training import TrainConfig

DATA_ROOT_ENV = "FER_DATA_ROOT"
DATA_KEYS = (
    "affectnet", "affectnet_partition", "manifest", "train_manifest", "val_manifest",
    "test_manifest", "jaffe", "ckplus", "fer2013", "fer2013_usage", "synthetic_per_class",
)


def default_tree() -> dict:
    return {
        "preset": "toy",
        "output_dir": "runs/default",
        "data": {k: None for k in DATA_KEYS} | {"affectnet_partition": "manual", "fer2013_usage": "PrivateTest"},
        "sampling": {"n": None, "seed": 42},
        "split": {"train_ratio": "8:10", "seed": 42},
        "train": json.loads(json.dumps(asdict(TrainConfig()))),
        "model": {"encoder": {}, "decoder": {}},
        "preprocess": {"mean": list(NormalizationSpec().mean), "std": list(NormalizationSpec().std),
                       "pad_value": None, "resize": None, "height": None},
    }


def _merge(base: dict, override: dict, path: str = "") -> dict:
    for key, val in override.items():
        where = f"{path}{key}"
        if key not in base and not where.startswith("model."):
            raise ConfigError(where, "unknown key")
        if isinstance(val, dict) and isinstance(base.get(key), dict):
            _merge(base[key], val, where + ".")
        else:
            base[key] = val
    return base


def set_dotted(tree: dict, assignment: str) -> None:
    if "=" not in assignment:
        raise ConfigError(assignment, "expected section.key=value")
    key, raw = assignment.split("=", 1)
    parts = key.strip().split(".")
    node = tree
    for p in parts[:-1]:
        node = node.setdefault(p, {})
        if not isinstance(node, dict):
            raise ConfigError(key, "not a section")
    override: dict = {}
    cur = override
    for p in parts[:-1]:
        cur = cur.setdefault(p, {})
    value = yaml.safe_load(raw)
    if isinstance(value, int) and ":" in raw:
        value = raw.strip()  # YAML 1.1 would read 8:10 as a base-60 integer
    cur[parts[-1]] = value
    _merge(tree, override)


@dataclass
class RunConfig:
    preset: str
    output_dir: Path
    data: dict
    sampling: dict
    split: dict
    train: TrainConfig
    model: ModelConfig
    preprocess: PreprocessConfig
    tree: dict = field(repr=False, default_factory=dict)

    def data_path(self, key: str, required: bool = True) -> Path | None:
        val = self.data.get(key)
        if val in (None, ""):
            if required:
                raise ConfigError(f"data.{key}", "dataset path is required for this command")
            return None
        p = Path(str(val)).expanduser()
        root = os.environ.get(DATA_ROOT_ENV)
        if root and not p.is_absolute():
            p = Path(root) / p
        return p

    def dump(self) -> str:
        return yaml.safe_dump(self.tree, sort_keys=True)

    def save(self, path: Path) -> None:
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(self.dump(), encoding="utf-8")


def _build(cls, values: dict, section: str):
    known = {f.name for f in fields(cls)}
    for key in values:
        if key not in known:
            raise ConfigError(f"{section}.{key}", "unknown key")
    try:
        return cls(**values)
    except (TypeError, ValueError) as e:
        raise ConfigError(section, str(e)) from e


def resolve(tree: dict) -> RunConfig:
    preset = tree.get("preset")
    if preset not in PRESETS:
        raise ConfigError("preset", f"must be one of {sorted(PRESETS)}, got {preset!r}")
    base = PRESETS[preset]
    enc_over = dict(tree["model"].get("encoder") or {})
    if "image_size" in enc_over:
        enc_over["image_size"] = tuple(enc_over["image_size"])
    enc = _build(EncoderConfig, asdict(base.encoder) | enc_over, "model.encoder")
    dec = _build(DecoderConfig, asdict(base.decoder) | dict(tree["model"].get("decoder") or {}), "model.decoder")
    model = ModelConfig(enc, dec)

    train = _build(TrainConfig, dict(tree["train"]), "train")

    pp = tree["preprocess"]
    try:
        norm = NormalizationSpec(tuple(pp["mean"]), tuple(pp["std"]))
    except (TypeError, ValueError) as e:
        raise ConfigError("preprocess.mean", str(e)) from e
    height, width = enc.image_size
    prep = PreprocessConfig(
        resize=int(pp.get("resize") or width),
        height=int(pp.get("height") or height),
        norm=norm,
        pad_value=pp.get("pad_value"),
    )
    if (prep.height, prep.resize) != enc.image_size:
        raise ConfigError("preprocess.height", f"pipeline output {prep.height}x{prep.resize} "
                          f"does not match model input {enc.image_size[0]}x{enc.image_size[1]}")
    ratio = tree["split"].get("train_ratio")
    if not (isinstance(ratio, str) and ":" in ratio) and not (
        isinstance(ratio, (int, float)) and 0 < ratio < 1
    ):
        raise ConfigError("split.train_ratio", f"expected a quoted 'a:b' string or a number in (0, 1), got {ratio!r}")
    sampling = dict(tree["sampling"])
    if sampling.get("n") is not None and int(sampling["n"]) < 1:
        raise ConfigError("sampling.n", "must be positive")
    return RunConfig(preset, Path(tree["output_dir"]), dict(tree["data"]), sampling,
                     dict(tree["split"]), train, model, prep, tree)


def load_config(path: str | Path | None = None, sets: list[str] | None = None,
                overrides: dict | None = None) -> RunConfig:
    tree = default_tree()
    if path is not None:
        path = Path(path)
        if not path.is_file():
            raise ConfigError("--config", f"file not found: {path}")
        try:
            loaded = yaml.safe_load(path.read_text(encoding="utf-8")) or {}
        except yaml.YAMLError as e:
            raise ConfigError("--config", f"invalid YAML: {e}") from e
        if not isinstance(loaded, dict):
            raise ConfigError("--config", "top level must be a mapping")
        # a saved resolved config carries full sections; merge them as-is
        _merge(tree, loaded)
    for s in sets or []:
        set_dotted(tree, s)
    if overrides:
        _merge(tree, copy.deepcopy(overrides))
    return resolve(tree)
