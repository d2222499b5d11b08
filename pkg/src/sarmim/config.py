"""Run configuration: one YAML file with nested sections, validated strictly.

Precedence, lowest first: built-in defaults, the config file, the
``SARMIM_OUT_DIR`` / ``SARMIM_WORKERS`` environment variables, command-line
flags.  Unknown keys anywhere are an error.  ``out_dir`` and ``workers`` never
change results, so they are left out of the config hash.
"""

from __future__ import annotations

import copy
import dataclasses
import os
from pathlib import Path

import yaml

from . import __version__
from .backbone import EncoderConfig
from .datakit import TilePolicy
from .errors import ConfigError, SarmimError
from .evaluation import ProbeConfig
from .pretrain import PretrainConfig
from .reporting import stable_hash
from .specklesim import CorpusConfig

ENV_OUT_DIR = "SARMIM_OUT_DIR"
ENV_WORKERS = "SARMIM_WORKERS"


def _fields(cls, drop=()):
    return {f.name for f in dataclasses.fields(cls)} - set(drop)


SECTIONS = {
    "paths": {"manifest", "generic_manifest", "checkpoint", "init_checkpoint", "input", "resume"},
    "corpus": _fields(CorpusConfig, ("seed", "out_dir", "workers", "extra")),
    "features": {"kind", "scales", "params"},
    "encoder": _fields(EncoderConfig),
    "pretrain": _fields(PretrainConfig, ("seed", "workers")),
    "stage_a": _fields(PretrainConfig, ("seed", "workers")) | {"num_images"},
    "probe": _fields(ProbeConfig, ("seed",)),
    "fewshot": {"n_way", "shots", "episodes"},
    "partialft": {"k_blocks"},
    "attndist": {"num_images", "split"},
    "tiling": {"threshold", "tile", "overlap", "overrides"},
    "ingest": {"max_failure_rate"},
    "rebalance": {"strategy"},
    "sweep": {"fractions", "dims", "epochs"},
}
TOP_LEVEL = {"out_dir", "seed", "workers"}
UNHASHED = ("out_dir", "workers")


def unknown_keys(raw: dict) -> list[str]:
    bad = []
    for key, value in raw.items():
        if key in TOP_LEVEL:
            continue
        if key not in SECTIONS:
            bad.append(key)
        elif value is not None and not isinstance(value, dict):
            bad.append(f"{key} (expected a mapping)")
        else:
            bad.extend(f"{key}.{k}" for k in (value or {}) if k not in SECTIONS[key])
    return bad


class RunConfig:
    """Validated configuration plus helpers that build the per-module config objects."""

    def __init__(self, raw: dict | None = None):
        raw = copy.deepcopy(raw or {})
        bad = unknown_keys(raw)
        if bad:
            raise ConfigError("unknown config keys: " + ", ".join(bad))
        self.raw = {k: (v if k in TOP_LEVEL else dict(v or {})) for k, v in raw.items()}
        self.seed = int(self.raw.get("seed", 0))
        self.workers = int(self.raw.get("workers", 1))
        self.out_dir = Path(self.raw.get("out_dir", "runs"))
        if self.workers < 1:
            raise ConfigError("workers must be >= 1")

    @classmethod
    def load(cls, path=None, overrides: dict | None = None, env=None) -> "RunConfig":
        env = os.environ if env is None else env
        raw = {}
        if path is not None:
            try:
                text = Path(path).read_text(encoding="utf-8")
            except OSError as exc:
                raise ConfigError(f"cannot read config file {path}: {exc}") from exc
            try:
                raw = yaml.safe_load(text) or {}
            except yaml.YAMLError as exc:
                raise ConfigError(f"{path}: invalid YAML ({exc})") from exc
            if not isinstance(raw, dict):
                raise ConfigError(f"{path}: the top level must be a mapping")
        if env.get(ENV_OUT_DIR):
            raw["out_dir"] = env[ENV_OUT_DIR]
        if env.get(ENV_WORKERS):
            try:
                raw["workers"] = int(env[ENV_WORKERS])
            except ValueError as exc:
                raise ConfigError(f"{ENV_WORKERS} must be an integer, got {env[ENV_WORKERS]!r}") from exc
        for dotted, value in (overrides or {}).items():
            if value is None:
                continue
            if "." in dotted:
                section, key = dotted.split(".", 1)
                raw.setdefault(section, {})
                if raw[section] is None:
                    raw[section] = {}
                raw[section][key] = value
            else:
                raw[dotted] = value
        cfg = cls(raw)
        cfg.validate()
        return cfg

    def section(self, name) -> dict:
        return dict(self.raw.get(name) or {})

    def get(self, section, key, default=None):
        return self.section(section).get(key, default)

    def _build(self, name, factory):
        try:
            return factory()
        except (SarmimError, TypeError, ValueError) as exc:
            raise ConfigError(f"invalid [{name}] settings: {exc}") from exc

    def validate(self):
        self.corpus_config()
        self.encoder_config()
        self.pretrain_config()
        self.stage_a_config()
        self.probe_config()
        self.tile_policy().validate()

    def corpus_config(self, kind=None) -> CorpusConfig:
        def make():
            d = self.section("corpus")
            if kind is not None:
                d["kind"] = kind
            for key in ("looks", "contrast_range"):
                if key in d:
                    d[key] = tuple(d[key])
            cfg = CorpusConfig(seed=self.seed, workers=self.workers, out_dir=str(self.out_dir / "corpus"), **d)
            cfg.validate()
            return cfg

        return self._build("corpus", make)

    def encoder_config(self) -> EncoderConfig:
        """Encoder settings; ``input_size`` follows ``corpus.size`` unless given."""
        d = self.section("encoder")
        d.setdefault("input_size", int(self.get("corpus", "size", CorpusConfig.size)))
        return self._build("encoder", lambda: EncoderConfig(**d))

    def pretrain_config(self) -> PretrainConfig:
        return self._build("pretrain", lambda: PretrainConfig(seed=self.seed, workers=self.workers,
                                                               **self.section("pretrain")))

    def stage_a_config(self) -> PretrainConfig:
        def make():
            d = self.section("pretrain")
            d["target"] = "pixel"
            d.update({k: v for k, v in self.section("stage_a").items() if k != "num_images"})
            return PretrainConfig(seed=self.seed, workers=self.workers, **d)

        return self._build("stage_a", make)

    def probe_config(self) -> ProbeConfig:
        return self._build("probe", lambda: ProbeConfig(seed=self.seed, **self.section("probe")))

    def tile_policy(self) -> TilePolicy:
        def make():
            d = self.section("tiling")
            if "overrides" in d:
                d["overrides"] = {k: tuple(v) for k, v in d["overrides"].items()}
            return TilePolicy(**d)

        return self._build("tiling", make)

    def hashed(self) -> dict:
        d = {k: v for k, v in self.raw.items() if k not in UNHASHED}
        d["seed"] = self.seed
        return d

    def config_hash(self) -> str:
        return stable_hash(self.hashed())

    def snapshot(self, command, resolved=None) -> str:
        """Frozen, human-readable record of what a command ran with."""
        doc = {"tool": "sarmim", "tool_version": __version__, "command": command,
               "config_hash": self.config_hash(), "seed": self.seed, "config": self.hashed(),
               "resolved": {k: str(v) for k, v in (resolved or {}).items()}}
        return yaml.safe_dump(doc, sort_keys=True)

    # default locations that tie the subcommands together
    def path(self, key, default=None) -> Path | None:
        value = self.get("paths", key)
        if value is not None:
            return Path(value)
        return Path(default) if default is not None else None

    @property
    def manifest_path(self) -> Path:
        return self.path("manifest", self.out_dir / "corpus" / "manifest.jsonl")

    @property
    def checkpoint_path(self):
        value = self.get("paths", "checkpoint")
        if value == "random":
            return "random"
        return Path(value) if value is not None else self.out_dir / "pretrain" / "final"
