"""Run configuration files: strict YAML with unknown keys rejected.

A silent typo in a gate or temperature setting would invalidate every
downstream comparison, so parsing is strict: any key the schema does not
know is fatal, and the error names the key and its line. Every run writes
back a resolved copy of the config it actually used, plus a short
fingerprint hash that all output files carry for provenance.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass

import yaml

from .errors import ConfigError
from .training import TrainConfig
from .vit import ViTConfig


@dataclass(frozen=True)
class DataConfig:
    path: str = ""
    n: int = 500
    depth: int = 0
    noise: float = 0.1
    seed: int = 0
    split_fraction: float = 0.8

    def __post_init__(self):
        if self.n < 1:
            raise ConfigError(f"data.n must be positive, got {self.n}")
        if not 0.0 < self.split_fraction < 1.0:
            raise ConfigError(f"data.split_fraction must lie in (0, 1), got {self.split_fraction}")


@dataclass(frozen=True)
class CompareConfig:
    modes: tuple[str, ...] = ("shallow", "gated")
    shaping: tuple[bool, ...] = (False, True)
    gates: tuple[str, ...] = ("soft",)


@dataclass(frozen=True)
class RunConfig:
    model: ViTConfig
    train: TrainConfig
    data: DataConfig
    compare: CompareConfig
    output_dir: str = "runs/out"

    def resolved_dict(self) -> dict:
        return {
            "model": dataclasses.asdict(self.model),
            "train": dataclasses.asdict(self.train),
            "data": dataclasses.asdict(self.data),
            "compare": {"modes": list(self.compare.modes),
                        "shaping": list(self.compare.shaping),
                        "gates": list(self.compare.gates)},
            "output_dir": self.output_dir,
        }

    def fingerprint(self) -> str:
        """Hash of the run parameters. The output directory is excluded so
        the same run written elsewhere produces byte-identical artifacts."""
        payload = {k: v for k, v in self.resolved_dict().items() if k != "output_dir"}
        canonical = json.dumps(payload, sort_keys=True)
        return hashlib.sha256(canonical.encode()).hexdigest()[:12]

    def resolved_yaml(self) -> str:
        return yaml.safe_dump(self.resolved_dict(), sort_keys=True)


_SECTIONS = {
    "model": ViTConfig,
    "train": TrainConfig,
    "data": DataConfig,
    "compare": CompareConfig,
}


def _mapping_with_lines(node, path=""):
    """Flatten a YAML mapping node to {key: (value_node, line)} with 1-based lines."""
    if not isinstance(node, yaml.MappingNode):
        raise ConfigError(f"config section '{path or '<root>'}' must be a mapping")
    out = {}
    for key_node, value_node in node.value:
        out[str(key_node.value)] = (value_node, key_node.start_mark.line + 1)
    return out


def _construct(value_node):
    return yaml.safe_load(yaml.serialize(value_node))


def parse_run_config(text: str, source: str = "<config>") -> RunConfig:
    """Parse and validate a run config document, rejecting unknown keys."""
    try:
        root = yaml.compose(text)
    except yaml.YAMLError as exc:
        raise ConfigError(f"{source}: not valid YAML: {exc}") from exc
    if root is None:
        raise ConfigError(f"{source}: config file is empty")
    top = _mapping_with_lines(root)

    known_top = set(_SECTIONS) | {"output_dir"}
    for key, (_, line) in top.items():
        if key not in known_top:
            raise ConfigError(f"{source}: unknown key '{key}' at line {line}")

    sections: dict[str, object] = {}
    for name, cls in _SECTIONS.items():
        fields = {f.name: f for f in dataclasses.fields(cls)}
        kwargs = {}
        if name in top:
            node, _ = top[name]
            for key, (value_node, line) in _mapping_with_lines(node, name).items():
                if key not in fields:
                    raise ConfigError(f"{source}: unknown key '{name}.{key}' at line {line}")
                value = _construct(value_node)
                if isinstance(value, list):
                    value = tuple(value)
                kwargs[key] = value
        try:
            sections[name] = cls(**kwargs)
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"{source}: invalid '{name}' section: {exc}") from exc

    output_dir = "runs/out"
    if "output_dir" in top:
        output_dir = str(_construct(top["output_dir"][0]))

    return RunConfig(model=sections["model"], train=sections["train"],
                     data=sections["data"], compare=sections["compare"],
                     output_dir=output_dir)


def load_run_config(path) -> RunConfig:
    try:
        with open(path, encoding="utf-8") as fh:
            text = fh.read()
    except OSError as exc:
        raise ConfigError(f"cannot read config file {path}: {exc}") from exc
    return parse_run_config(text, source=str(path))
