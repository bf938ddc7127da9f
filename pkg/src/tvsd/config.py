"""Flat ``key = value`` configuration with namespaced keys and strict validation.

Keys live in five namespaces (``corpus.``, ``codec.``, ``diffusion.``,
``distill.``, ``bench.``).  Most keys mirror fields of the module dataclasses and
take their defaults from there; unknown keys are rejected.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, fields
from pathlib import Path
from typing import Any, Iterable

from .codec import CodecConfig
from .corpus import CorpusConfig
from .diffusion import DiffusionConfig, DiffusionTrainConfig
from .distill import DistillConfig
from .training import CodecTrainConfig


@dataclass(frozen=True)
class Key:
    name: str
    default: Any
    doc: str


# fields that are derived elsewhere and therefore not user-settable
_DERIVED = {"codec.vocab", "diffusion.vocab", "diffusion.latent_dim", "diffusion.K"}

_SECTIONS = (
    ("corpus", CorpusConfig),
    ("codec", CodecConfig),
    ("codec", CodecTrainConfig),
    ("diffusion", DiffusionConfig),
    ("diffusion", DiffusionTrainConfig),
    ("distill", DistillConfig),
)

_EXTRA = (
    Key("corpus.holdout_speakers", 2, "speakers withheld from training for evaluation"),
    Key("codec.seed", 0, "codec initialisation and training seed"),
    Key("diffusion.seed", 0, "denoiser initialisation and training seed"),
    Key("distill.seed", 0, "student, distill-set and baseline seed"),
    Key("distill.methods", "with_init,without_init,pretrained,cd,add", "methods run by 'bench distill'"),
    Key("distill.sizes", "", "comma-separated distill-set sizes for 'bench distill' (empty: distill.count)"),
    Key("bench.seed", 0, "seed for sweeps, evaluation noise and timing"),
    Key("bench.codebook_sizes", "64,256,1024,none", "codebook axis of the sweep; 'none' bypasses the quantiser"),
    Key("bench.K_values", "", "latent-length axis of the sweep; 0 bypasses fixed-length compression"),
    Key("bench.codec_steps", 600, "codec steps per sweep point"),
    Key("bench.diffusion_steps", 1000, "diffusion steps per sweep point"),
    Key("bench.sample_steps", 50, "DDIM steps for sweep samples"),
    Key("bench.sample_omega", 1.0, "guidance scale for sweep samples"),
    Key("bench.sample_repeats", 1, "samples drawn per training condition in the sweep"),
    Key("bench.eval_utts", 32, "held-out utterances used by eval and timing"),
    Key("bench.timing_repeats", 3, "repeats per timed stage (minimum kept)"),
)


def _schema() -> dict[str, Key]:
    out: dict[str, Key] = {}
    for ns, cls in _SECTIONS:
        for f in fields(cls):
            name = f"{ns}.{f.name}"
            if name in _DERIVED:
                continue
            if name in out:
                raise RuntimeError(f"duplicate config key {name}")
            out[name] = Key(name, f.default, f"{cls.__name__}.{f.name}")
    for k in _EXTRA:
        out[k.name] = k
    return out


SCHEMA = _schema()


class ConfigError(ValueError):
    pass


def _coerce(key: Key, raw: str) -> Any:
    d = key.default
    raw = raw.strip()
    try:
        if isinstance(d, bool):
            low = raw.lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(raw)
        if isinstance(d, int):
            return int(raw)
        if isinstance(d, float):
            return float(raw)
    except ValueError:
        raise ConfigError(f"{key.name}: cannot parse {raw!r} as {type(d).__name__}") from None
    return raw


def parse_lines(lines: Iterable[str], source: str = "<config>") -> dict[str, str]:
    out = {}
    for no, line in enumerate(lines, 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{no}: expected key = value")
        k, v = (s.strip() for s in line.split("=", 1))
        if k not in SCHEMA:
            raise ConfigError(f"{source}:{no}: unknown key {k!r}")
        out[k] = v
    return out


class Config:
    """Resolved values for every schema key."""

    def __init__(self, values: dict[str, Any] | None = None):
        self.values = {k: key.default for k, key in SCHEMA.items()}
        for k, v in (values or {}).items():
            self.set(k, v)

    @classmethod
    def load(cls, path: str | Path | None = None, overrides: Iterable[str] = ()) -> Config:
        cfg = cls()
        if path is not None:
            text = Path(path).read_text(encoding="utf-8")
            for k, v in parse_lines(text.splitlines(), str(path)).items():
                cfg.set(k, v)
        for k, v in parse_lines(overrides, "--set").items():
            cfg.set(k, v)
        return cfg

    def set(self, key: str, value: Any) -> None:
        if key not in SCHEMA:
            raise ConfigError(f"unknown key {key!r}")
        self.values[key] = _coerce(SCHEMA[key], value) if isinstance(value, str) else value

    def __getitem__(self, key: str) -> Any:
        return self.values[key]

    def section(self, ns: str) -> dict[str, Any]:
        pre = ns + "."
        return {k[len(pre):]: v for k, v in self.values.items() if k.startswith(pre)}

    def build(self, ns: str, cls):
        sec = self.section(ns)
        names = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in sec.items() if k in names})

    def corpus(self) -> CorpusConfig:
        return self.build("corpus", CorpusConfig)

    def codec(self) -> CodecConfig:
        return self.build("codec", CodecConfig)

    def codec_train(self) -> CodecTrainConfig:
        return self.build("codec", CodecTrainConfig)

    def diffusion(self) -> DiffusionConfig:
        c = self.codec()
        return dataclasses.replace(self.build("diffusion", DiffusionConfig), latent_dim=c.d_model, K=c.K)

    def diffusion_train(self) -> DiffusionTrainConfig:
        return self.build("diffusion", DiffusionTrainConfig)

    def distill(self) -> DistillConfig:
        return self.build("distill", DistillConfig)

    def snapshot(self) -> dict[str, Any]:
        return dict(self.values)

    def dumps(self) -> str:
        lines = []
        for k, v in self.values.items():
            lines.append(f"{k} = {str(v).lower() if isinstance(v, bool) else v}")
        return "\n".join(lines) + "\n"


def parse_list(raw: str, cast=int, none_token: str = "none") -> list:
    out = []
    for tok in str(raw).split(","):
        tok = tok.strip()
        if not tok:
            continue
        out.append(None if tok.lower() == none_token else cast(tok))
    return out


def describe() -> str:
    """Every key with its default, one per line, for ``--help``-style listings."""
    return "\n".join(f"{k} = {key.default}    # {key.doc}" for k, key in SCHEMA.items())
