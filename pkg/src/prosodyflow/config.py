"""Run configuration: strict JSON with defaults, unknown keys rejected.

Every artifact a command writes embeds the hash of the normalized config
(defaults applied, keys sorted), so outputs are traceable to the exact
settings that produced them.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field, fields

from .synthdata import ToyCorpusSpec


class ConfigError(Exception):
    pass


def _from_dict(cls, obj: dict, section: str):
    if not isinstance(obj, dict):
        raise ConfigError(f"section {section!r} must be an object")
    known = {f.name for f in fields(cls)}
    unknown = set(obj) - known
    if unknown:
        raise ConfigError(
            f"unknown key {sorted(unknown)[0]!r} in section {section!r} "
            f"(known: {sorted(known)})"
        )
    return cls(**obj)


@dataclass
class CorpusConfig:
    """Either a path to an existing corpus file or generation settings."""

    path: str | None = None
    n_token_classes: int = 16
    tokens_min: int = 5
    tokens_max: int = 20
    n_utterances: int = 200
    n_realizations_per_utterance: int = 24
    condition_dim: int = 32
    seed: int = 2024
    bimodal_fraction: float = 0.25
    pitch_duration_coupling: float = 0.35

    def spec(self) -> ToyCorpusSpec:
        return ToyCorpusSpec(
            n_token_classes=self.n_token_classes,
            tokens_min=self.tokens_min,
            tokens_max=self.tokens_max,
            n_utterances=self.n_utterances,
            n_realizations_per_utterance=self.n_realizations_per_utterance,
            condition_dim=self.condition_dim,
            seed=self.seed,
            bimodal_fraction=self.bimodal_fraction,
            pitch_duration_coupling=self.pitch_duration_coupling,
        )


@dataclass
class ModelConfig:
    kind: str = "CFM"
    noise_dim: int = 8
    hidden: int = 8
    n_layers: int = 6
    kernel: int = 5
    sigma_min: float = 1e-4
    solver_steps: int = 12

    def validate(self):
        if self.kind not in ("NF", "CFM", "DET"):
            raise ConfigError(
                f"model.kind must be NF, CFM or DET (RF comes from reflow), "
                f"got {self.kind!r}"
            )


@dataclass
class CascadeConfig:
    mode: str = "cascade"
    order: list = field(default_factory=lambda: ["energy", "pitch"])

    def validate(self):
        if self.mode not in ("cascade", "joint"):
            raise ConfigError(f"cascade.mode must be cascade or joint, got {self.mode!r}")
        if self.mode == "cascade" and sorted(self.order) != ["energy", "pitch"]:
            raise ConfigError(
                f"cascade.order must permute [energy, pitch] (duration is "
                f"always last), got {self.order}"
            )


@dataclass
class TrainingConfig:
    steps: int = 5000  # desk scale; the published setup used 100k
    batch_size: int = 32
    lr: float = 1e-3
    seed: int = 1234
    nf_dequant_sigma: float = 0.05


@dataclass
class SamplerSection:
    temperature: float = 1.0
    solver_steps: int = 12
    tau_grid: list = field(default_factory=lambda: [0.2, 0.4, 0.6, 0.8, 1.0])
    n_draws: int = 200
    sweep_utterances: int = 40
    seed: int = 777


@dataclass
class EvalConfig:
    n_draws: int = 24
    reference: str = "realizations"
    min_samples: int = 32
    seed: int = 555

    def validate(self):
        if self.reference not in ("realizations", "analytic"):
            raise ConfigError(
                f"eval.reference must be realizations or analytic, got {self.reference!r}"
            )


@dataclass
class ReflowConfig:
    extra_steps: int | None = None  # None: 10% of the teacher's steps
    ode_steps_teacher: int = 100
    expected_teacher_hash: str | None = None


@dataclass
class RunConfig:
    corpus: CorpusConfig = field(default_factory=CorpusConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    cascade: CascadeConfig = field(default_factory=CascadeConfig)
    training: TrainingConfig = field(default_factory=TrainingConfig)
    sampler: SamplerSection = field(default_factory=SamplerSection)
    eval: EvalConfig = field(default_factory=EvalConfig)
    reflow: ReflowConfig = field(default_factory=ReflowConfig)
    out_dir: str = "out"

    def validate(self) -> "RunConfig":
        self.model.validate()
        self.cascade.validate()
        self.eval.validate()
        return self

    def config_hash(self) -> str:
        """Hash of the semantic settings; out_dir (artifact location) is
        excluded so runs into different directories stay byte-identical."""
        obj = asdict(self)
        obj.pop("out_dir", None)
        return hashlib.sha256(json.dumps(obj, sort_keys=True).encode()).hexdigest()


_SECTIONS = {
    "corpus": CorpusConfig,
    "model": ModelConfig,
    "cascade": CascadeConfig,
    "training": TrainingConfig,
    "sampler": SamplerSection,
    "eval": EvalConfig,
    "reflow": ReflowConfig,
}


def parse_config(obj: dict) -> RunConfig:
    if not isinstance(obj, dict):
        raise ConfigError("config root must be a JSON object")
    unknown = set(obj) - set(_SECTIONS) - {"out_dir"}
    if unknown:
        raise ConfigError(
            f"unknown config key {sorted(unknown)[0]!r} "
            f"(known: {sorted([*_SECTIONS, 'out_dir'])})"
        )
    kwargs = {}
    for name, cls in _SECTIONS.items():
        if name in obj:
            kwargs[name] = _from_dict(cls, obj[name], name)
    if "out_dir" in obj:
        if not isinstance(obj["out_dir"], str):
            raise ConfigError("out_dir must be a string")
        kwargs["out_dir"] = obj["out_dir"]
    return RunConfig(**kwargs).validate()


def load_config(path) -> RunConfig:
    try:
        with open(path, "r", encoding="utf-8") as f:
            obj = json.load(f)
    except FileNotFoundError:
        raise
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc})") from exc
    return parse_config(obj)
