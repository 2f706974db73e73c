"""Run configuration: a flat INI file with sections, resolved into dataclasses.

    [run]        name, family (embedding | prototype | rs | baseline:<method>), seed, output_dir
    [data]       task (synth | files), root, synthetic-corpus parameters
    [embedding]  EmbedConfig fields, term toggles, epochs
    [prototype]  ProtoConfig fields
    [baseline]   BaselineConfig fields (the infiller reuses [prototype])
    [eval]       evaluator and validation settings

Only the output root may come from the environment (STYLEVAR_OUTPUT_ROOT).
"""
from __future__ import annotations

import configparser
import dataclasses
import io
import os
from dataclasses import dataclass, field
from pathlib import Path

from .attribution import METHODS, BaselineConfig
from .data import SynthSpec
from .embedding import EmbedConfig, TermToggles
from .errors import ConfigError, ValidationError
from .prototype import ProtoConfig

OUTPUT_ROOT_ENV = "STYLEVAR_OUTPUT_ROOT"
FAMILIES = ("embedding", "prototype", "rs") + tuple(f"baseline:{m}" for m in METHODS)


@dataclass
class EvalSettings:
    classifier_epochs: int = 3
    lm_order: int = 3
    valid_every: int = 1
    valid_limit: int = 200
    beam: int = 0                  # 0 = greedy


@dataclass
class RunConfig:
    name: str
    family: str
    seed: int
    output_dir: str = "runs"
    task: str = "synth"
    data_root: str = ""
    synth: SynthSpec = field(default_factory=SynthSpec)
    embed: EmbedConfig = field(default_factory=EmbedConfig)
    toggles: TermToggles = field(default_factory=TermToggles)
    embed_epochs: int = 30
    proto: ProtoConfig = field(default_factory=ProtoConfig)
    baseline: BaselineConfig = field(default_factory=BaselineConfig)
    eval: EvalSettings = field(default_factory=EvalSettings)

    @property
    def run_dir(self) -> Path:
        return Path(self.output_dir) / self.name

    @property
    def data_dir(self) -> Path:
        return Path(self.data_root) if self.data_root else Path(self.output_dir) / "data" / self.task

    @property
    def beam(self) -> int | None:
        return self.eval.beam or None


def _coerce(raw: str, default, key: str):
    try:
        if isinstance(default, bool):
            low = raw.strip().lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(raw)
        if isinstance(default, int):
            return int(raw)
        if isinstance(default, float):
            return float(raw)
        return raw.strip()
    except ValueError:
        raise ConfigError(f"cannot parse {key} = {raw!r} as {type(default).__name__}", key) from None


def _fill(obj, section: configparser.SectionProxy | None, prefix: str):
    """Copy matching keys from ``section`` onto a dataclass instance (by default-value type)."""
    if section is None:
        return obj
    names = {f.name for f in dataclasses.fields(obj)}
    updates = {}
    for key, raw in section.items():
        if key in names:
            updates[key] = _coerce(raw, getattr(obj, key), f"{prefix}.{key}")
    try:
        return dataclasses.replace(obj, **updates)
    except (ValidationError, ValueError) as exc:
        raise ConfigError(f"{prefix}: {exc}", prefix) from None


_KNOWN = {
    "run": {"name", "family", "seed", "output_dir"},
    "data": {"task", "root"} | {f.name for f in dataclasses.fields(SynthSpec)},
    "embedding": ({f.name for f in dataclasses.fields(EmbedConfig)} | {f.name for f in dataclasses.fields(TermToggles)}
                  | {"epochs"}),
    "prototype": {f.name for f in dataclasses.fields(ProtoConfig)},
    "baseline": {f.name for f in dataclasses.fields(BaselineConfig)} - {"infill"},
    "eval": {f.name for f in dataclasses.fields(EvalSettings)},
}


def parse_config(text: str, seed: int | None = None, output_dir: str | None = None) -> RunConfig:
    cp = configparser.ConfigParser(interpolation=None, inline_comment_prefixes=(";", "#"))
    try:
        cp.read_string(text)
    except configparser.Error as exc:
        raise ConfigError(f"malformed config: {exc}") from None
    for sec in cp.sections():
        if sec not in _KNOWN:
            raise ConfigError(f"unknown section [{sec}]", sec)
        for key in cp[sec]:
            if key not in _KNOWN[sec]:
                raise ConfigError(f"unknown key {sec}.{key}", f"{sec}.{key}")
    if "run" not in cp:
        raise ConfigError("missing [run] section", "run")
    run = cp["run"]
    for key in ("name", "family"):
        if not run.get(key):
            raise ConfigError(f"run.{key} is required", f"run.{key}")
    if seed is None:
        if "seed" not in run:
            raise ConfigError("run.seed is required", "run.seed")
        seed = _coerce(run["seed"], 0, "run.seed")
    family = run["family"].strip()
    if family not in FAMILIES:
        raise ConfigError(f"run.family must be one of {', '.join(FAMILIES)}", "run.family")
    out = output_dir or os.environ.get(OUTPUT_ROOT_ENV) or run.get("output_dir", "runs")

    data = cp["data"] if "data" in cp else None
    task = data.get("task", "synth").strip() if data is not None else "synth"
    if task not in ("synth", "files"):
        raise ConfigError("data.task must be synth or files", "data.task")
    root = data.get("root", "").strip() if data is not None else ""
    if task == "files" and (not root or not Path(root).is_dir()):
        raise ConfigError(f"data.root {root!r} is not a directory", "data.root")

    proto = _fill(ProtoConfig(), cp["prototype"] if "prototype" in cp else None, "prototype")
    emb_sec = cp["embedding"] if "embedding" in cp else None
    baseline = _fill(BaselineConfig(infill=proto), cp["baseline"] if "baseline" in cp else None, "baseline")
    if family.startswith("baseline:"):
        baseline = dataclasses.replace(baseline, method=family.split(":", 1)[1])
    cfg = RunConfig(
        name=run["name"].strip(), family=family, seed=seed, output_dir=out, task=task, data_root=root,
        synth=_fill(SynthSpec(), data, "data"),
        embed=_fill(EmbedConfig(), emb_sec, "embedding"),
        toggles=_fill(TermToggles(), emb_sec, "embedding"),
        embed_epochs=_coerce(emb_sec.get("epochs", "30"), 0, "embedding.epochs") if emb_sec is not None else 30,
        proto=proto, baseline=baseline,
        eval=_fill(EvalSettings(), cp["eval"] if "eval" in cp else None, "eval"),
    )
    if cfg.eval.beam < 0:
        raise ConfigError("eval.beam must be >= 0", "eval.beam")
    return cfg


def load_config(path, seed: int | None = None, output_dir: str | None = None) -> RunConfig:
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file {path} not found", "--config")
    return parse_config(path.read_text(), seed, output_dir)


def to_ini(cfg: RunConfig) -> str:
    """Fully resolved snapshot; parsing it back gives an equal RunConfig."""
    cp = configparser.ConfigParser(interpolation=None)
    cp["run"] = {"name": cfg.name, "family": cfg.family, "seed": str(cfg.seed), "output_dir": cfg.output_dir}
    data = {"task": cfg.task, "root": cfg.data_root}
    data.update({k: str(v) for k, v in dataclasses.asdict(cfg.synth).items()})
    cp["data"] = data
    emb = {k: str(v) for k, v in dataclasses.asdict(cfg.embed).items()}
    emb.update({k: str(v) for k, v in dataclasses.asdict(cfg.toggles).items()})
    emb["epochs"] = str(cfg.embed_epochs)
    cp["embedding"] = emb
    cp["prototype"] = {k: str(v) for k, v in dataclasses.asdict(cfg.proto).items()}
    cp["baseline"] = {k: str(getattr(cfg.baseline, k)) for k in _KNOWN["baseline"]}
    cp["eval"] = {k: str(v) for k, v in dataclasses.asdict(cfg.eval).items()}
    buf = io.StringIO()
    cp.write(buf)
    return buf.getvalue()
