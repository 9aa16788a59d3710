"""Run configuration: model hyperparameters plus run-level paths.

Config files are plain ``key = value`` text, one pair per line, ``#``
comments allowed. Unknown keys are rejected. Every run writes its fully
resolved config next to its outputs so it can be replayed exactly.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from pathlib import Path


class ConfigError(ValueError):
    pass


MODALITIES = ("manometry", "impedance", "patient")


@dataclass
class ModelConfig:
    gnn_variant: str = "generalized"        # attention | generalized
    temporal_variant: str = "tcn"           # tcn | transformer
    gnn_layers: int = 2
    gnn_hidden: int = 32
    tcn_channels: int = 32
    tcn_kernel: int = 3
    transformer_blocks: int = 2
    transformer_heads: int = 4
    transformer_width: int = 64
    transformer_ff: int = 128
    category_dim: int = 64                  # d_c, per-category embedding width
    patient_dim: int = 32                   # d_p, patient embedding width
    patient_hidden: int = 32
    head_hidden: int = 64
    label_smoothing: float = 0.1            # epsilon
    contrastive_temperature: float = 0.1    # tau
    contrastive_weight: float = 0.1         # lambda_con
    learning_rate: float = 1e-3
    epochs: int = 30
    batch_size: int = 16
    folds: int = 5
    seed: int = 0
    use_manometry: bool = True             # modality toggles: False zeroes that input stream
    use_impedance: bool = True
    use_patient: bool = True

    def validate(self):
        if self.gnn_variant not in ("attention", "generalized"):
            raise ConfigError(f"unknown gnn_variant '{self.gnn_variant}'")
        if self.temporal_variant not in ("tcn", "transformer"):
            raise ConfigError(f"unknown temporal_variant '{self.temporal_variant}'")
        if not (0.0 <= self.label_smoothing < 1.0):
            raise ConfigError("label_smoothing must be in [0, 1)")
        if self.contrastive_temperature <= 0:
            raise ConfigError("contrastive_temperature must be > 0")
        if self.contrastive_weight < 0:
            raise ConfigError("contrastive_weight must be >= 0")
        if self.transformer_width % self.transformer_heads != 0:
            raise ConfigError("transformer_width must divide by transformer_heads")
        if not self.enabled_modalities():
            raise ConfigError("at least one modality must be enabled")
        if self.folds < 2:
            raise ConfigError("folds must be >= 2")
        return self

    def enabled_modalities(self):
        out = []
        if self.use_manometry:
            out.append("manometry")
        if self.use_impedance:
            out.append("impedance")
        if self.use_patient:
            out.append("patient")
        return tuple(out)

    def with_modalities(self, enabled):
        unknown = set(enabled) - set(MODALITIES)
        if unknown:
            raise ConfigError(f"unknown modalities: {sorted(unknown)}")
        return dataclasses.replace(
            self,
            use_manometry="manometry" in enabled,
            use_impedance="impedance" in enabled,
            use_patient="patient" in enabled,
        )


@dataclass
class RunConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    dataset: str = ""
    out_dir: str = "runs"
    parallel_folds: int = 1
    # generator options (synth command)
    synth_patients: int = 60
    synth_swallows: int = 10
    synth_classes: str = "3,4,2"
    synth_noise: float = 0.05

    def validate(self):
        self.model.validate()
        if self.parallel_folds < 1:
            raise ConfigError("parallel_folds must be >= 1")
        return self


_BOOL = {"true": True, "false": False, "1": True, "0": False, "yes": True, "no": False}


def _coerce(value, target):
    if isinstance(target, bool):
        v = value.strip().lower()
        if v not in _BOOL:
            raise ConfigError(f"expected boolean, got '{value}'")
        return _BOOL[v]
    if isinstance(target, int):
        return int(value)
    if isinstance(target, float):
        return float(value)
    return value.strip()


def _flat_fields():
    """Map flat config key -> ('model'|'run', dataclass field)."""
    out = {}
    for f in dataclasses.fields(ModelConfig):
        out[f.name] = ("model", f)
    for f in dataclasses.fields(RunConfig):
        if f.name != "model":
            out[f.name] = ("run", f)
    return out


def parse_config_text(text):
    fields = _flat_fields()
    model_kwargs, run_kwargs = {}, {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value', got '{raw}'")
        key, value = (part.strip() for part in line.split("=", 1))
        if key not in fields:
            raise ConfigError(f"line {lineno}: unknown key '{key}'")
        section, f = fields[key]
        default = f.default if f.default is not dataclasses.MISSING else f.default_factory()
        coerced = _coerce(value, default)
        (model_kwargs if section == "model" else run_kwargs)[key] = coerced
    cfg = RunConfig(model=ModelConfig(**model_kwargs), **run_kwargs)
    return cfg.validate()


def load_config(path):
    return parse_config_text(Path(path).read_text())


def config_to_text(cfg):
    lines = []
    for f in dataclasses.fields(ModelConfig):
        lines.append(f"{f.name} = {getattr(cfg.model, f.name)}")
    for f in dataclasses.fields(RunConfig):
        if f.name != "model":
            lines.append(f"{f.name} = {getattr(cfg, f.name)}")
    return "\n".join(lines) + "\n"


def save_resolved_config(cfg, path):
    Path(path).write_text(config_to_text(cfg))
