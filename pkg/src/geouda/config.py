"""Run configuration file: parse, validate, resolve, echo.

The file is YAML with sections mirroring the module configs (`train` with
nested `network`, `encoding`, `geo_head`, `time_head`, `dcs`, `components`,
plus `synthetic` and top-level run keys). Every key has a default, so an empty
file is a valid full configuration. Unknown keys and type mismatches are
errors that name the key and its line. The resolved configuration can be
echoed back to YAML; the echo re-parses to an equal `RunConfig`.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass
from pathlib import Path

import yaml

from . import class_balance as cb
from .data import SyntheticConfig
from .encoding import EncodingConfig
from .network import GeoHeadConfig, SegNetConfig, TimeHeadConfig
from .training import ComponentFlags, TrainConfig


class ConfigError(ValueError):
    """A configuration file problem, phrased for the CLI user."""


# Leaf value kinds; parsing coerces YAML scalars to these and nothing else.
_KINDS = {
    "int",
    "float",
    "bool",
    "str",
    "int_tuple",
    "float_tuple_or_none",
    "int_or_none",
    "str_or_none",
}

# section -> field -> kind. Mirrors the config dataclasses; a test pins the
# correspondence so schema drift fails loudly.
SCHEMA: dict[str, dict[str, str]] = {
    "run": {
        "seed": "int_or_none",
        "data_root": "str_or_none",
        "out_dir": "str_or_none",
    },
    "train": {
        "batch_size": "int",
        "max_epochs": "int",
        "learning_rate": "float",
        "patience": "int",
        "seed": "int",
        "val_fraction": "float",
        "crop_size": "int_or_none",
        "augment": "bool",
    },
    "components": {
        "geo_mt": "bool",
        "dcs": "bool",
        "time_mt": "bool",
    },
    "network": {
        "in_bands": "int",
        "num_classes": "int",
        "encoder_channels": "int_tuple",
        "input_size": "int",
    },
    "encoding": {
        "dim": "int",
        "base_frequency": "float",
        "noise_radius_m": "float",
        "origin_lon_m": "float",
        "origin_lat_m": "float",
    },
    "geo_head": {
        "pool_output": "int",
        "hidden_widths": "int_tuple",
        "out_dim": "int",
        "feature_source": "str",
    },
    "time_head": {
        "pool_output": "int",
        "hidden_width": "int",
        "use_month": "bool",
        "use_hour": "bool",
        "noise": "bool",
    },
    "dcs": {
        "num_classes": "int_or_none",
        "temperature": "float",
        "decay": "float",
        "ignore_index": "int_or_none",
    },
    "synthetic": {
        "num_source_domains": "int",
        "num_target_domains": "int",
        "patches_per_domain": "int",
        "image_size": "int",
        "num_classes": "int",
        "class_fractions": "float_tuple_or_none",
        "radiometric_shift": "float",
        "band_mixing": "float",
        "pixel_noise": "float",
        "position_gain": "float",
        "seasonal_gain": "float",
        "box_size_m": "float",
        "box_spacing_m": "float",
        "origin_lon_m": "float",
        "origin_lat_m": "float",
        "seed": "int",
    },
}

# Sections nested under `train` in the file, in echo order.
_TRAIN_SUBSECTIONS = ("components", "network", "encoding", "geo_head", "time_head", "dcs")


@dataclass(frozen=True)
class RunConfig:
    """Everything one run needs: training setup, generator setup, run paths.

    `seed`, when set, overrides the seeds inside `train` and `synthetic`; the
    CLI applies the same rule to its `--seed` flag.
    """

    train: TrainConfig = TrainConfig()
    synthetic: SyntheticConfig = SyntheticConfig()
    seed: int | None = None
    data_root: str | None = None
    out_dir: str | None = None

    def resolved(self) -> "RunConfig":
        """Push a top-level seed down into the per-module seeds."""
        if self.seed is None:
            return self
        return dataclasses.replace(
            self,
            train=dataclasses.replace(self.train, seed=self.seed),
            synthetic=dataclasses.replace(self.synthetic, seed=self.seed),
        )


def _construct_scalar(node: yaml.Node):
    loader = yaml.SafeLoader("")
    try:
        return loader.construct_object(node, deep=True)
    finally:
        loader.dispose()


def _line(node: yaml.Node) -> int:
    return node.start_mark.line + 1


def _coerce(value, kind: str, key: str, line: int):
    def fail(expected: str):
        raise ConfigError(
            f"line {line}: key '{key}' expects {expected}, got {value!r}"
        )

    if kind not in _KINDS:
        raise AssertionError(f"unknown schema kind {kind!r}")
    if kind == "int_or_none" and value is None:
        return None
    if kind == "str_or_none" and value is None:
        return None
    if kind == "float_tuple_or_none" and value is None:
        return None
    if kind in ("int", "int_or_none"):
        if isinstance(value, bool) or not isinstance(value, int):
            fail("an integer")
        return value
    if kind == "float":
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            fail("a number")
        return float(value)
    if kind == "bool":
        if not isinstance(value, bool):
            fail("a boolean")
        return value
    if kind in ("str", "str_or_none"):
        if not isinstance(value, str):
            fail("a string")
        return value
    if kind == "int_tuple":
        if not isinstance(value, list) or not value or any(
            isinstance(v, bool) or not isinstance(v, int) for v in value
        ):
            fail("a non-empty list of integers")
        return tuple(value)
    if kind == "float_tuple_or_none":
        if not isinstance(value, list) or not value or any(
            isinstance(v, bool) or not isinstance(v, (int, float)) for v in value
        ):
            fail("a non-empty list of numbers")
        return tuple(float(v) for v in value)
    raise AssertionError(f"unhandled kind {kind!r}")


def _expect_mapping(node: yaml.Node, where: str) -> yaml.MappingNode:
    if not isinstance(node, yaml.MappingNode):
        raise ConfigError(f"line {_line(node)}: {where} must be a mapping")
    return node


def _read_section(node: yaml.MappingNode, section: str) -> dict:
    """Validate and coerce one flat section mapping."""
    fields = SCHEMA[section]
    out: dict = {}
    for key_node, value_node in node.value:
        key = key_node.value
        if key in out:
            raise ConfigError(f"line {_line(key_node)}: duplicate key '{key}'")
        if key not in fields:
            raise ConfigError(
                f"line {_line(key_node)}: unknown key '{key}' in section '{section}'"
            )
        out[key] = _coerce(
            _construct_scalar(value_node), fields[key], key, _line(value_node)
        )
    return out


def _read_train(node: yaml.MappingNode) -> dict:
    """The train section: scalar fields plus nested subsections."""
    out: dict = {"train": {}}
    for key_node, value_node in node.value:
        key = key_node.value
        if key in SCHEMA["train"]:
            if key in out["train"]:
                raise ConfigError(f"line {_line(key_node)}: duplicate key '{key}'")
            out["train"][key] = _coerce(
                _construct_scalar(value_node), SCHEMA["train"][key], key, _line(value_node)
            )
        elif key in _TRAIN_SUBSECTIONS:
            if key in out:
                raise ConfigError(f"line {_line(key_node)}: duplicate section '{key}'")
            out[key] = _read_section(_expect_mapping(value_node, f"'{key}'"), key)
        else:
            raise ConfigError(
                f"line {_line(key_node)}: unknown key '{key}' in section 'train'"
            )
    return out


def build_train_config(sections: dict) -> TrainConfig:
    """Assemble a TrainConfig from validated section dicts.

    The class-weighting size defaults to the network's real-class count; a
    num_classes given explicitly in the dcs section must agree with it.
    """
    network = SegNetConfig(**sections.get("network", {}))
    encoding = EncodingConfig(**sections.get("encoding", {}))
    geo_kwargs = dict(sections.get("geo_head", {}))
    geo_kwargs.setdefault("out_dim", encoding.dim)
    dcs_kwargs = dict(sections.get("dcs", {}))
    if dcs_kwargs.get("num_classes") is None:
        dcs_kwargs["num_classes"] = network.num_classes - 1
    if dcs_kwargs.get("ignore_index", "unset") is None:
        del dcs_kwargs["ignore_index"]
    return TrainConfig(
        **sections.get("train", {}),
        components=ComponentFlags(**sections.get("components", {})),
        network=network,
        encoding=encoding,
        geo_head=GeoHeadConfig(**geo_kwargs),
        time_head=TimeHeadConfig(**sections.get("time_head", {})),
        dcs=cb.DcsConfig(**dcs_kwargs),
    )


def parse_config(path: str | Path) -> RunConfig:
    """Read, validate, and resolve a YAML run configuration.

    An empty file (or one with any subset of keys) yields the defaults for
    everything unspecified.
    """
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config file {path}: {exc}") from exc
    try:
        root = yaml.compose(text)
    except yaml.YAMLError as exc:
        raise ConfigError(f"invalid YAML in {path}: {exc}") from exc
    if root is None:
        return RunConfig()
    root = _expect_mapping(root, "the configuration")

    sections: dict = {}
    run: dict = {}
    for key_node, value_node in root.value:
        key = key_node.value
        if key in SCHEMA["run"]:
            if key in run:
                raise ConfigError(f"line {_line(key_node)}: duplicate key '{key}'")
            run[key] = _coerce(
                _construct_scalar(value_node), SCHEMA["run"][key], key, _line(value_node)
            )
        elif key == "train":
            if "train" in sections:
                raise ConfigError(f"line {_line(key_node)}: duplicate section 'train'")
            sections.update(_read_train(_expect_mapping(value_node, "'train'")))
        elif key == "synthetic":
            if "synthetic" in sections:
                raise ConfigError(f"line {_line(key_node)}: duplicate section 'synthetic'")
            sections["synthetic"] = _read_section(
                _expect_mapping(value_node, "'synthetic'"), "synthetic"
            )
        else:
            raise ConfigError(f"line {_line(key_node)}: unknown key '{key}'")

    try:
        train = build_train_config(sections)
        synthetic = SyntheticConfig(**sections.get("synthetic", {}))
    except (ValueError, TypeError) as exc:
        raise ConfigError(f"in {path}: {exc}") from exc
    return RunConfig(train=train, synthetic=synthetic, **run).resolved()


def _plain(value):
    if isinstance(value, tuple):
        return list(value)
    return value


def config_to_dict(cfg: RunConfig) -> dict:
    """Nested plain-python dict with every field explicit, echo layout."""
    train = cfg.train
    doc = {
        "seed": cfg.seed,
        "data_root": cfg.data_root,
        "out_dir": cfg.out_dir,
        "train": {
            k: _plain(getattr(train, k)) for k in SCHEMA["train"]
        },
        "synthetic": {
            k: _plain(getattr(cfg.synthetic, k)) for k in SCHEMA["synthetic"]
        },
    }
    subobjects = {
        "components": train.components,
        "network": train.network,
        "encoding": train.encoding,
        "geo_head": train.geo_head,
        "time_head": train.time_head,
        "dcs": train.dcs,
    }
    for name in _TRAIN_SUBSECTIONS:
        obj = subobjects[name]
        doc["train"][name] = {k: _plain(getattr(obj, k)) for k in SCHEMA[name]}
    return doc


def write_config_echo(cfg: RunConfig, path: str | Path):
    """Write the resolved configuration; parsing it back yields `cfg` again."""
    with open(path, "w") as fh:
        yaml.safe_dump(config_to_dict(cfg), fh, default_flow_style=False, sort_keys=False)
