"""Run configuration: one YAML document driving every subcommand.

A RunConfig bundles the model, corpus, injection, training and FLOPs
settings with an output directory and a single global seed. Per-stage
seeds are always derived from the global one by hashing (seed, purpose
label) into a 64-bit stream seed; explicit seed keys inside sections are
rejected so there is exactly one knob to vary.

Unknown keys anywhere in the document fail fast with the offending path,
and dotted --set overrides are applied to the raw document before any
validation runs.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field, fields, replace
from fractions import Fraction
from pathlib import Path

import yaml

from .balancing import AuxConfig
from .corpus import CorpusSpec
from .errors import ConfigError
from .flops import FlopsConfig
from .injection import InjectionSpec
from .model import ModelConfig
from .training import AdaptConfig, OpdConfig, SftConfig, TeacherConfig


def derive_seed(seed, label):
    """64-bit stream seed from the global seed and a purpose label."""
    digest = hashlib.sha256(f"{int(seed)}/{label}".encode()).digest()
    return int.from_bytes(digest[:8], "little")


@dataclass
class AnalyzeConfig:
    num_rollouts: int = 16
    prompt_len: int = 16
    gen_len: int = 32
    temperature: float = 1.0
    chunk_size: int = 8
    num_bins: int = 8

    def __post_init__(self):
        if min(self.num_rollouts, self.prompt_len, self.gen_len,
               self.chunk_size, self.num_bins) < 1:
            raise ConfigError("analyze settings must be positive")
        if self.temperature < 0:
            raise ConfigError("temperature must be >= 0")


def _build(cls, data, path, banned=("seed",)):
    """Construct a config dataclass from a mapping, rejecting unknown or
    banned keys with the dotted path of the offender."""
    if data is None:
        data = {}
    if not isinstance(data, dict):
        raise ConfigError(f"{path} must be a mapping, got {type(data).__name__}")
    allowed = {f.name for f in fields(cls)}
    for key in data:
        if key in banned:
            raise ConfigError(
                f"{path}.{key} is not settable; it is derived from the "
                "global seed"
            )
        if key not in allowed:
            raise ConfigError(f"unknown key {path}.{key}")
    return cls(**data)


def _build_flops(data, path):
    if data is None:
        data = {}
    data = dict(data)
    if "g_kv" in data and isinstance(data["g_kv"], str):
        data["g_kv"] = Fraction(data["g_kv"])
    if "r_ze" in data and isinstance(data["r_ze"], str):
        data["r_ze"] = Fraction(data["r_ze"])
    return _build(FlopsConfig, data, path, banned=())


def _build_injection(data, path):
    if data is None:
        data = {}
    if not isinstance(data, dict):
        raise ConfigError(f"{path} must be a mapping, got {type(data).__name__}")
    # n_new has no dataclass default; the desk run injects 8 candidates
    return _build(InjectionSpec, {"n_new": 8, **data}, path)


def _build_adapt_parts(data, path):
    if data is None:
        data = {}
    if not isinstance(data, dict):
        raise ConfigError(f"{path} must be a mapping")
    known = {"stages", "aux", "sft", "opd"}
    for key in data:
        if key not in known:
            raise ConfigError(f"unknown key {path}.{key}")
    return {
        "stages": data.get("stages", "sft->opd"),
        "aux": _build(AuxConfig, data.get("aux"), f"{path}.aux"),
        "sft": _build(SftConfig, data.get("sft"), f"{path}.sft"),
        "opd": _build(OpdConfig, data.get("opd"), f"{path}.opd"),
    }


TOP_KEYS = ("seed", "out_dir", "model", "corpus", "teacher", "injection",
            "adapt", "flops", "analyze")


@dataclass
class RunConfig:
    seed: int = 0
    out_dir: str = "runs/desk"
    model: ModelConfig = field(default_factory=ModelConfig)
    corpus: CorpusSpec = field(default_factory=CorpusSpec)
    teacher: TeacherConfig = field(default_factory=TeacherConfig)
    injection: InjectionSpec = field(
        default_factory=lambda: InjectionSpec(n_new=8)
    )
    adapt_stages: str = "sft->opd"
    aux: AuxConfig = field(default_factory=AuxConfig)
    sft: SftConfig = field(default_factory=SftConfig)
    opd: OpdConfig = field(default_factory=OpdConfig)
    flops: FlopsConfig = field(default_factory=FlopsConfig)
    analyze: AnalyzeConfig = field(default_factory=AnalyzeConfig)

    # -- seeded section views ---------------------------------------------

    def corpus_spec(self):
        return replace(self.corpus, seed=derive_seed(self.seed, "corpus"))

    def teacher_config(self):
        return replace(self.teacher, seed=derive_seed(self.seed, "teacher"))

    def injection_spec(self):
        return replace(self.injection,
                       seed=derive_seed(self.seed, "injection"))

    def adapt_config(self):
        return AdaptConfig(
            injection=self.injection_spec(),
            aux=self.aux,
            stages=self.adapt_stages,
            sft=self.sft,
            opd=self.opd,
            seed=derive_seed(self.seed, "adapt"),
        )

    def analyze_seed(self):
        return derive_seed(self.seed, "analyze")

    # -- construction -------------------------------------------------------

    @staticmethod
    def from_dict(data):
        if data is None:
            data = {}
        if not isinstance(data, dict):
            raise ConfigError("run config must be a mapping at top level")
        for key in data:
            if key not in TOP_KEYS:
                raise ConfigError(f"unknown key {key}")
        seed = data.get("seed", 0)
        if not isinstance(seed, int) or seed < 0:
            raise ConfigError(f"seed must be a nonnegative integer, got {seed!r}")
        adapt_parts = _build_adapt_parts(data.get("adapt"), "adapt")
        cfg = RunConfig(
            seed=seed,
            out_dir=str(data.get("out_dir", "runs/desk")),
            model=_build(ModelConfig, data.get("model"), "model", banned=()),
            corpus=_build(CorpusSpec, data.get("corpus"), "corpus"),
            teacher=_build(TeacherConfig, data.get("teacher"), "teacher"),
            injection=_build_injection(data.get("injection"), "injection"),
            adapt_stages=adapt_parts["stages"],
            aux=adapt_parts["aux"],
            sft=adapt_parts["sft"],
            opd=adapt_parts["opd"],
            flops=_build_flops(data.get("flops"), "flops"),
            analyze=_build(AnalyzeConfig, data.get("analyze"), "analyze",
                           banned=()),
        )
        # surfaces stage-name typos immediately
        cfg.adapt_config()
        return cfg

    def to_dict(self):
        """Fully-defaulted canonical form used for hashing and manifests."""

        def clean(obj):
            if isinstance(obj, Fraction):
                return str(obj)
            if dataclasses.is_dataclass(obj):
                return {k: clean(v)
                        for k, v in dataclasses.asdict(obj).items()}
            if isinstance(obj, dict):
                return {k: clean(v) for k, v in obj.items()}
            if isinstance(obj, (list, tuple)):
                return [clean(v) for v in obj]
            return obj

        def seedless(obj):
            # section seeds are derived, never stored, so the canonical
            # form re-validates through from_dict
            out = clean(obj)
            out.pop("seed", None)
            return out

        return {
            "seed": self.seed,
            "out_dir": self.out_dir,
            "model": clean(self.model),
            "corpus": seedless(self.corpus),
            "teacher": seedless(self.teacher),
            "injection": seedless(self.injection),
            "adapt": {
                "stages": self.adapt_stages,
                "aux": clean(self.aux),
                "sft": clean(self.sft),
                "opd": clean(self.opd),
            },
            "flops": clean(self.flops),
            "analyze": clean(self.analyze),
        }

    def config_hash(self):
        blob = json.dumps(self.to_dict(), sort_keys=True,
                          separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()


def apply_overrides(data, overrides):
    """Apply key=value items with dotted paths to a raw config mapping.

    Values parse as YAML scalars, so --set model.hidden=128 yields an int
    and --set adapt.stages=sft an unquoted string.
    """
    data = dict(data or {})
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"override {item!r} is not of the form key=value")
        key, _, raw = item.partition("=")
        key = key.strip()
        if not key:
            raise ConfigError(f"override {item!r} has an empty key")
        try:
            value = yaml.safe_load(raw)
        except yaml.YAMLError as exc:
            raise ConfigError(f"override {item!r}: unparseable value ({exc})")
        parts = key.split(".")
        cursor = data
        for part in parts[:-1]:
            nxt = cursor.get(part)
            if nxt is None:
                nxt = cursor[part] = {}
            elif not isinstance(nxt, dict):
                raise ConfigError(
                    f"override {key}: {part} is not a section"
                )
            cursor = nxt
        cursor[parts[-1]] = value
    return data


def load_run_config(path=None, overrides=(), seed=None, out_dir=None):
    """Parse the YAML document (if any), fold in overrides and flag
    values, and validate everything. Returns a RunConfig."""
    data = {}
    if path is not None:
        text = Path(path).read_text()
        try:
            data = yaml.safe_load(text)
        except yaml.YAMLError as exc:
            raise ConfigError(f"config {path} is not valid YAML: {exc}")
        if data is None:
            data = {}
    data = apply_overrides(data, overrides)
    if seed is not None:
        data["seed"] = seed
    if out_dir is not None:
        data["out_dir"] = str(out_dir)
    return RunConfig.from_dict(data)


def write_manifest(out_dir, subcommand, config: RunConfig, artifacts):
    """Record (or update) the manifest entry for one subcommand.

    Entries carry the config hash, the global seed and the artifact
    names; no timestamps, so reruns rewrite identical bytes.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    path = out_dir / "manifest.json"
    manifest = {}
    if path.exists():
        manifest = json.loads(path.read_text())
    manifest[subcommand] = {
        "config_hash": config.config_hash(),
        "seed": config.seed,
        "artifacts": sorted(str(a) for a in artifacts),
    }
    path.write_text(json.dumps(manifest, sort_keys=True, indent=2) + "\n")
    return path
