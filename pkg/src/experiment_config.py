"""
Experiment configuration: a JSON document with the sections dataset,
victim, oracle, attack, evaluation and output. Unknown sections or keys
are rejected; ``section.key=value`` overrides are applied on top.
"""

import json
import logging
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Union

from src.config import Config
from src.errors import ConfigError

logger = logging.getLogger(__name__)

PRESET_DIR = Path(__file__).resolve().parents[1] / "presets"


@dataclass
class DatasetSection:
    kind: str = "blobs"
    classes: int = 10
    dim: int = 64
    n_train: int = 2000
    n_test: int = 500
    spread: float = 0.3
    noise: float = 0.25
    aux_shift: float = 0.5
    seed: int = 0
    train_path: Optional[str] = None
    test_path: Optional[str] = None
    export_csv: bool = False


@dataclass
class VictimSection:
    arch: str = "mlp-small"
    optimizer: str = "sgd"
    lr: float = 0.1
    momentum: float = 0.0
    milestones: List[int] = field(default_factory=list)
    epochs: int = 30
    batch_size: int = 64
    seed: int = 0
    checkpoint: Optional[str] = None


@dataclass
class OracleSection:
    endpoint: Optional[str] = None
    host: str = Config.ORACLE_HOST
    port: int = Config.ORACLE_PORT
    rounding: Optional[int] = None
    topk: Optional[int] = None
    detection: bool = False
    detection_threshold: float = 0.9
    budget: Optional[int] = None
    price_per_1k: float = Config.PRICE_PER_1K
    record_queries: bool = False
    sweep_round: List[int] = field(default_factory=list)
    sweep_topk: List[int] = field(default_factory=list)


@dataclass
class AttackSection:
    mode: str = "opt_syn"
    substitute: str = "mlp-small"
    N: int = 50
    M: int = 10
    m: int = 30
    S: int = 256
    synth_lr: float = 0.01
    kd_lr: float = 0.001
    lambda_ms: float = 1.0
    generator_steps: int = 1
    generator_lr: float = 0.001
    generator_batch: int = 64
    latent_dim: int = 16
    generator_hidden: int = 128
    reinit_generator: bool = False
    augment: bool = True
    replay_all: bool = False
    fillup: bool = True
    batch_size: int = 64
    seed: int = 0
    resume: Optional[str] = None


@dataclass
class EvaluationSection:
    pgd_preset: Optional[str] = None
    epsilon: float = 0.3
    step_size: float = 0.01
    iterations: int = 40
    random_start: bool = False
    pgd_samples: int = 500
    substitute_checkpoint: Optional[str] = None
    stream: Optional[str] = None
    inputs: List[str] = field(default_factory=list)
    detection_threshold: float = 0.9
    report_every: int = 10_000


@dataclass
class OutputSection:
    dir: str = str(Path(Config.OUTPUT_DIR) / "default")


SECTIONS = {
    "dataset": DatasetSection,
    "victim": VictimSection,
    "oracle": OracleSection,
    "attack": AttackSection,
    "evaluation": EvaluationSection,
    "output": OutputSection,
}


def _section_from_dict(name: str, raw: Any):
    cls = SECTIONS[name]
    if not isinstance(raw, dict):
        raise ConfigError(f"section {name!r} must be an object")
    known = {f.name for f in fields(cls)}
    unknown = sorted(set(raw) - known)
    if unknown:
        raise ConfigError(f"unknown key(s) in {name}: {', '.join(unknown)}")
    return cls(**raw)


@dataclass
class ExperimentConfig:
    dataset: DatasetSection = field(default_factory=DatasetSection)
    victim: VictimSection = field(default_factory=VictimSection)
    oracle: OracleSection = field(default_factory=OracleSection)
    attack: AttackSection = field(default_factory=AttackSection)
    evaluation: EvaluationSection = field(default_factory=EvaluationSection)
    output: OutputSection = field(default_factory=OutputSection)

    @classmethod
    def from_dict(cls, raw: Dict[str, Any]) -> "ExperimentConfig":
        if not isinstance(raw, dict):
            raise ConfigError("experiment config must be a JSON object")
        unknown = sorted(set(raw) - set(SECTIONS) - {"description"})
        if unknown:
            raise ConfigError(f"unknown section(s): {', '.join(unknown)}")
        try:
            return cls(**{name: _section_from_dict(name, raw[name]) for name in SECTIONS if name in raw})
        except TypeError as e:
            raise ConfigError(str(e)) from e

    @classmethod
    def load(cls, path: Union[str, Path]) -> "ExperimentConfig":
        path = Path(path)
        try:
            raw = json.loads(path.read_text())
        except FileNotFoundError as e:
            raise ConfigError(f"config file not found: {path}") from e
        except json.JSONDecodeError as e:
            raise ConfigError(f"{path}: invalid JSON ({e})") from e
        logger.info("Loaded experiment config %s", path)
        return cls.from_dict(raw)

    @classmethod
    def preset(cls, name: str) -> "ExperimentConfig":
        path = PRESET_DIR / f"{name}.json"
        if not path.exists():
            available = sorted(p.stem for p in PRESET_DIR.glob("*.json"))
            raise ConfigError(f"unknown preset {name!r}; available: {', '.join(available)}")
        return cls.load(path)

    def override(self, assignments: Sequence[str]) -> "ExperimentConfig":
        """Apply ``section.key=value`` strings; values parse as JSON, else as plain strings."""
        for assignment in assignments:
            target, sep, text = assignment.partition("=")
            section_name, dot, key = target.strip().partition(".")
            if not sep or not dot:
                raise ConfigError(f"override must look like section.key=value, got {assignment!r}")
            if section_name not in SECTIONS:
                raise ConfigError(f"unknown section {section_name!r} in override")
            section = getattr(self, section_name)
            if key not in {f.name for f in fields(section)}:
                raise ConfigError(f"unknown key {key!r} in section {section_name}")
            try:
                value = json.loads(text)
            except json.JSONDecodeError:
                value = text
            setattr(section, key, value)
        return self

    def set(self, section: str, key: str, value: Any) -> None:
        if value is not None:
            setattr(getattr(self, section), key, value)

    def to_dict(self) -> Dict[str, Any]:
        return {name: asdict(getattr(self, name)) for name in SECTIONS}

    @property
    def output_dir(self) -> Path:
        return Path(self.output.dir)

    def write_resolved(self) -> Path:
        self.output_dir.mkdir(parents=True, exist_ok=True)
        path = self.output_dir / "resolved_config.json"
        path.write_text(json.dumps(self.to_dict(), indent=2) + "\n")
        return path
