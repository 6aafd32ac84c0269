"""Flat dotted-key experiment configuration.

One text file drives a whole run: `model.n_blocks=2`, `ttt.eta=0.005`,
`recipe.peak_lr=5e-3`, and so on.  Round-trips are lossless, and a stable
hash of the serialized form identifies each run.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field, fields

from .model import ModelSpec
from .train import TrainRecipe
from .ttt import TTTConfig


@dataclass
class EvalSettings:
    n_eval_sequences: int = 512
    context_T: int = 128
    niah_per_kind: int = 25
    haystack_len: int = 400
    temperature: float = 1.0
    top_p: float = 0.95
    repetition_penalty: float = 1.1


@dataclass
class ExperimentConfig:
    model: ModelSpec = field(default_factory=ModelSpec)
    ttt: TTTConfig = field(default_factory=TTTConfig)
    recipe: TrainRecipe = field(default_factory=TrainRecipe)
    eval: EvalSettings = field(default_factory=EvalSettings)
    output_dir: str = "runs"

    _sections = ("model", "ttt", "recipe", "eval")

    def to_text(self):
        lines = [f"output_dir={self.output_dir}"]
        for section in self._sections:
            obj = getattr(self, section)
            for f in fields(obj):
                lines.append(f"{section}.{f.name}={getattr(obj, f.name)}")
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text):
        cfg = cls()
        for lineno, line in enumerate(text.splitlines(), 1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            key, sep, value = line.partition("=")
            if not sep:
                raise ValueError(f"line {lineno}: expected key=value, got {line!r}")
            key, value = key.strip(), value.strip()
            if key == "output_dir":
                cfg.output_dir = value
                continue
            section, dot, name = key.partition(".")
            if not dot or section not in cls._sections:
                raise ValueError(f"line {lineno}: unknown key {key!r}")
            obj = getattr(cfg, section)
            try:
                f = next(f for f in fields(obj) if f.name == name)
            except StopIteration:
                raise ValueError(f"line {lineno}: unknown key {key!r}") from None
            setattr(obj, name, _cast(f, value))
        return cfg

    def config_hash(self):
        return hashlib.sha256(self.to_text().encode()).hexdigest()[:16]


def _cast(f, value):
    if f.name == "fast_fraction":
        return "final" if value == "final" else (int(value) if value == "1" else float(value))
    if f.type in ("bool", bool):
        return value in ("True", "true", "1")
    if f.type in ("int", int):
        return int(value)
    if f.type in ("float", float):
        return float(value)
    return value


def load_config(path):
    with open(path) as fh:
        return ExperimentConfig.from_text(fh.read())


def save_config(cfg, path):
    with open(path, "w") as fh:
        fh.write(cfg.to_text())
    return path
