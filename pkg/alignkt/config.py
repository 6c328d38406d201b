"""Run configuration: typed models, presets and the flat key = value file format."""

import hashlib
import json
from pathlib import Path
from typing import Any, Dict, List, Mapping, Optional, Union

from pydantic import BaseModel, ConfigDict, Field, ValidationError, model_validator


class ConfigError(ValueError):
    """Raised for unknown keys, unparseable lines or out-of-range values."""


PRESETS: Dict[str, Dict[str, Any]] = {
    # best settings from the hyperparameter study on each dataset
    'as09': {'a1': 0.8, 'a2': 0.5, 'L': 40},
    'al05': {'a1': 0.4, 'a2': 0.4, 'L': 70},
}


class ModelConfig(BaseModel):
    """Architecture hyperparameters plus vocabulary sizes; stored with checkpoints."""
    model_config = ConfigDict(extra='forbid')

    n_concepts: int = Field(ge=1)
    n_exercises: int = Field(ge=1)
    d: int = Field(default=64, ge=1)
    heads: int = Field(default=8, ge=1)
    n_blocks: int = Field(default=1, ge=1)
    ffn_mult: int = Field(default=4, ge=1)
    dropout: float = Field(default=0.1, ge=0.0, lt=1.0)
    a1: float = Field(default=0.8, ge=0.0, le=1.0)
    a2: float = Field(default=0.5, ge=0.0, le=1.0)
    memory_capacity: int = Field(default=40, ge=1)
    gamma_init: float = Field(default=1.0, gt=0.0)
    max_len: int = Field(default=200, ge=2)
    disable_tcba: bool = False
    disable_mrme: bool = False
    contrastive: bool = True

    @model_validator(mode='after')
    def _check(self) -> 'ModelConfig':
        if self.d % self.heads != 0:
            raise ValueError(f"d={self.d} is not divisible by heads={self.heads}")
        if self.disable_mrme:
            self.a1 = 0.0
            self.a2 = 0.0
        return self


class TrainConfig(BaseModel):
    """
    Every key a run accepts. Short aliases (L, lambda, tau) mirror the
    notation used for the loss and attention hyperparameters.
    """
    model_config = ConfigDict(extra='forbid', populate_by_name=True)

    epochs: int = Field(default=200, ge=1)
    batch_size: int = Field(default=64, ge=1)
    lr: float = Field(default=1e-3, gt=0.0)
    seed: int = Field(default=0, ge=0)
    patience: int = Field(default=10, ge=1)
    workers: int = Field(default=1, ge=1)

    d: int = Field(default=64, ge=1)
    heads: int = Field(default=8, ge=1)
    n_blocks: int = Field(default=1, ge=1)
    ffn_mult: int = Field(default=4, ge=1)
    dropout: float = Field(default=0.1, ge=0.0, lt=1.0)
    max_len: int = Field(default=200, ge=2)

    a1: float = Field(default=0.8, ge=0.0, le=1.0)
    a2: float = Field(default=0.5, ge=0.0, le=1.0)
    memory_capacity: int = Field(default=40, ge=1, alias='L')
    gamma_init: float = Field(default=1.0, gt=0.0)
    temperature: float = Field(default=0.05, gt=0.0, alias='tau')
    cl_weight: float = Field(default=0.1, ge=0.0, alias='lambda')
    rho_mask: float = Field(default=0.2, ge=0.0, le=0.5)
    rho_swap: float = Field(default=0.1, ge=0.0, le=0.5)

    disable_tcba: bool = False
    disable_cl: bool = False
    disable_mrme: bool = False

    @model_validator(mode='after')
    def _apply_ablations(self) -> 'TrainConfig':
        if self.d % self.heads != 0:
            raise ValueError(f"d={self.d} is not divisible by heads={self.heads}")
        if self.disable_mrme:
            self.a1 = 0.0
            self.a2 = 0.0
        if self.disable_cl:
            self.cl_weight = 0.0
        return self

    @property
    def cl_active(self) -> bool:
        return not self.disable_cl and self.cl_weight > 0.0

    @classmethod
    def valid_keys(cls) -> List[str]:
        keys = []
        for name, info in cls.model_fields.items():
            keys.append(name)
            if info.alias:
                keys.append(info.alias)
        return sorted(keys)

    @classmethod
    def from_mapping(cls, values: Mapping[str, Any]) -> 'TrainConfig':
        """
        Build a config from a flat mapping.

        Raises:
            ConfigError: On an unknown key or an invalid value.
        """
        valid = set(cls.valid_keys())
        unknown = sorted(k for k in values if k not in valid)
        if unknown:
            raise ConfigError(f"Unknown config key(s) {unknown}. Valid keys: {', '.join(sorted(valid))}")
        try:
            return cls.model_validate(dict(values))
        except ValidationError as e:
            raise ConfigError(str(e))

    def updated(self, overrides: Mapping[str, Any]) -> 'TrainConfig':
        merged = self.flat()
        merged.update(_canonical(overrides))
        return TrainConfig.from_mapping(merged)

    def flat(self) -> Dict[str, Any]:
        """Field-name keyed dict with every default materialized."""
        return self.model_dump(by_alias=False)

    def to_model_config(self, n_concepts: int, n_exercises: int) -> ModelConfig:
        return ModelConfig(n_concepts=n_concepts, n_exercises=n_exercises, d=self.d,
                           heads=self.heads, n_blocks=self.n_blocks, ffn_mult=self.ffn_mult,
                           dropout=self.dropout, a1=self.a1, a2=self.a2,
                           memory_capacity=self.memory_capacity, gamma_init=self.gamma_init,
                           max_len=self.max_len, disable_tcba=self.disable_tcba,
                           disable_mrme=self.disable_mrme, contrastive=self.cl_active)


def _canonical(values: Mapping[str, Any]) -> Dict[str, Any]:
    """Translate aliases to field names so later keys override earlier ones."""
    alias_to_field = {info.alias: name for name, info in TrainConfig.model_fields.items() if info.alias}
    valid = set(TrainConfig.valid_keys())
    unknown = sorted(k for k in values if k not in valid)
    if unknown:
        raise ConfigError(f"Unknown config key(s) {unknown}. Valid keys: {', '.join(sorted(valid))}")
    return {alias_to_field.get(k, k): v for k, v in values.items()}


class ConfigParser:
    """
    Parses flat `key = value` config text.

    Blank lines and `#` comments are ignored. Values are typed as bool,
    quoted string, int, float or bare string.
    """

    def parse(self, text: str) -> Dict[str, Any]:
        """
        Parse config text.

        Args:
            text: File contents

        Returns:
            Dictionary of key to typed value

        Raises:
            ConfigError: If a line has no '=' or a key repeats
        """
        values: Dict[str, Any] = {}
        for number, raw in enumerate(text.splitlines(), start=1):
            line = raw.split('#', 1)[0].strip()
            if not line:
                continue
            if '=' not in line:
                raise ConfigError(f"line {number}: expected 'key = value', got '{raw.strip()}'")
            key, val = line.split('=', 1)
            key = key.strip()
            if not key:
                raise ConfigError(f"line {number}: missing key")
            if key in values:
                raise ConfigError(f"line {number}: duplicate key '{key}'")
            values[key] = self.parse_value(val)
        return values

    def parse_assignment(self, assignment: str) -> Dict[str, Any]:
        """Parse a single `key=value` override."""
        if '=' not in assignment:
            raise ConfigError(f"Invalid override '{assignment}', expected key=value")
        key, val = assignment.split('=', 1)
        return {key.strip(): self.parse_value(val)}

    def parse_value(self, val_str: str) -> Any:
        """Parse a single value (bool, quoted string, int, float or bare string)."""
        val_str = val_str.strip()

        if val_str.lower() == 'true':
            return True
        elif val_str.lower() == 'false':
            return False

        if len(val_str) >= 2 and val_str[0] == val_str[-1] and val_str[0] in ("'", '"'):
            return val_str[1:-1]

        try:
            return int(val_str)
        except ValueError:
            pass

        try:
            return float(val_str)
        except ValueError:
            pass

        return val_str


def resolve_config(preset: Optional[str] = None, config_path: Optional[Union[str, Path]] = None,
                   overrides: Optional[List[str]] = None,
                   extra: Optional[Mapping[str, Any]] = None) -> TrainConfig:
    """
    Merge defaults < preset < config file < --set overrides < explicit options.

    Raises:
        ConfigError: On an unknown preset, key or invalid value.
    """
    merged: Dict[str, Any] = {}
    if preset is not None:
        if preset not in PRESETS:
            raise ConfigError(f"Unknown preset '{preset}'. Valid presets: {', '.join(sorted(PRESETS))}")
        merged.update(_canonical(PRESETS[preset]))
    parser = ConfigParser()
    if config_path is not None:
        merged.update(_canonical(parser.parse(Path(config_path).read_text(encoding='utf-8'))))
    for assignment in overrides or []:
        merged.update(_canonical(parser.parse_assignment(assignment)))
    if extra:
        merged.update(_canonical({k: v for k, v in extra.items() if v is not None}))
    return TrainConfig.from_mapping(merged)


def file_sha256(path: Union[str, Path]) -> str:
    digest = hashlib.sha256()
    with open(path, 'rb') as f:
        for chunk in iter(lambda: f.read(1 << 16), b''):
            digest.update(chunk)
    return digest.hexdigest()


MANIFEST_FILE = 'manifest.json'
MANIFEST_SUFFIX = '.manifest.json'


def manifest_path(output: Union[str, Path]) -> Path:
    """Where the manifest of a command output lives: inside a directory, beside a file."""
    output = Path(output)
    if output.is_dir():
        return output / MANIFEST_FILE
    return output.with_name(output.name + MANIFEST_SUFFIX)


class RunManifest(BaseModel):
    """
    Everything needed to reproduce a command: its resolved options, the
    seed and the sha256 of every input. Seedless commands record None.
    """
    command: str
    config: Dict[str, Any]
    seed: Optional[int] = None
    input_hashes: Dict[str, str] = Field(default_factory=dict)
    artifacts: Dict[str, str] = Field(default_factory=dict)

    def write(self, path: Union[str, Path]) -> None:
        Path(path).parent.mkdir(parents=True, exist_ok=True)
        with open(path, 'w') as f:
            json.dump(self.model_dump(), f, indent=2, sort_keys=True)

    @classmethod
    def read(cls, path: Union[str, Path]) -> 'RunManifest':
        with open(path, 'r') as f:
            return cls.model_validate(json.load(f))
