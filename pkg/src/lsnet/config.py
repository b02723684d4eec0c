"""Declarative model description and its TOML form.

A model config is a TOML document with three tables::

    [backbone]
    stage_blocks = [3, 3, 8, 12]
    stage_channels = [32, 64, 128, 256]
    stage_dilations = [2, 2, 4, 4]
    attention_reduction = 16
    stem_kernel = 3

    [fpn]
    variant = "diff"            # or "dense"
    fusion_channels = [16, 32, 64, 128]   # one width per stride 2/4/8/16

    [head]
    out_channels = 1

Unknown keys are rejected so typos do not silently fall back to defaults.
"""
from dataclasses import asdict, dataclass, field, fields
from importlib import resources
from pathlib import Path

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

import tomli_w


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class BackboneSpec:
    stage_blocks: tuple = (3, 3, 8, 12)
    stage_channels: tuple = (32, 64, 128, 256)
    stage_dilations: tuple = (2, 2, 4, 4)
    attention_reduction: int = 16
    stem_kernel: int = 3

    def __post_init__(self):
        for name in ("stage_blocks", "stage_channels", "stage_dilations"):
            val = tuple(int(v) for v in getattr(self, name))
            object.__setattr__(self, name, val)
            if len(val) != 4:
                raise ConfigError(f"backbone.{name} needs 4 entries, got {len(val)}")
        if any(b < 1 for b in self.stage_blocks):
            raise ConfigError("backbone.stage_blocks must all be >= 1")
        for c in self.stage_channels:
            if c % 2 or c % self.attention_reduction:
                raise ConfigError(f"stage width {c} must be even and divisible by "
                                  f"attention_reduction={self.attention_reduction}")
        if any(r < 2 for r in self.stage_dilations):
            raise ConfigError("backbone.stage_dilations must all be >= 2")

    @property
    def n_levels(self):
        """Depth in the two-levels-per-block convention (52 for 3/3/8/12)."""
        return 2 * sum(self.stage_blocks)

    @property
    def strides(self):
        return tuple(2 ** (s + 1) for s in range(4))


@dataclass(frozen=True)
class FpnSpec:
    variant: str = "diff"
    fusion_channels: tuple = (16, 32, 64, 128)

    def __post_init__(self):
        object.__setattr__(self, "fusion_channels", tuple(int(v) for v in self.fusion_channels))
        if self.variant not in ("dense", "diff"):
            raise ConfigError(f"fpn.variant must be 'dense' or 'diff', got {self.variant!r}")
        if len(self.fusion_channels) != 4 or min(self.fusion_channels) < 1:
            raise ConfigError("fpn.fusion_channels needs 4 positive widths (strides 2/4/8/16)")


@dataclass(frozen=True)
class HeadSpec:
    out_channels: int = 1

    def __post_init__(self):
        if self.out_channels != 1:
            raise ConfigError("head.out_channels must be 1 (single change-probability map)")


@dataclass(frozen=True)
class ModelSpec:
    backbone: BackboneSpec = field(default_factory=BackboneSpec)
    fpn: FpnSpec = field(default_factory=FpnSpec)
    head: HeadSpec = field(default_factory=HeadSpec)

    def with_fpn(self, variant):
        return ModelSpec(self.backbone, FpnSpec(variant, self.fpn.fusion_channels), self.head)

    def to_dict(self):
        d = asdict(self)
        for section in d.values():
            for k, v in section.items():
                if isinstance(v, tuple):
                    section[k] = list(v)
        return d

    def to_toml(self):
        return tomli_w.dumps(self.to_dict())

    @classmethod
    def from_dict(cls, doc):
        sections = {"backbone": BackboneSpec, "fpn": FpnSpec, "head": HeadSpec}
        unknown = set(doc) - set(sections)
        if unknown:
            raise ConfigError(f"unknown config section(s): {sorted(unknown)}")
        parts = {}
        for name, klass in sections.items():
            body = doc.get(name, {})
            allowed = {f.name for f in fields(klass)}
            extra = set(body) - allowed
            if extra:
                raise ConfigError(f"unknown key(s) in [{name}]: {sorted(extra)}")
            try:
                parts[name] = klass(**body)
            except TypeError as exc:
                raise ConfigError(f"[{name}]: {exc}") from exc
        return cls(**parts)

    @classmethod
    def from_toml(cls, text):
        try:
            doc = tomllib.loads(text)
        except tomllib.TOMLDecodeError as exc:
            raise ConfigError(f"invalid TOML: {exc}") from exc
        return cls.from_dict(doc)


def load_model_spec(path):
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read model config {path}: {exc.strerror}") from exc
    try:
        doc = tomllib.loads(text)
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"{path}: invalid TOML: {exc}") from exc
    # model configs may sit inside a larger run config next to [train]
    doc = {k: v for k, v in doc.items() if k in ("backbone", "fpn", "head")}
    return ModelSpec.from_dict(doc)


def builtin_config_text(name):
    return resources.files("lsnet").joinpath("configs").joinpath(f"{name}.toml").read_text()


def builtin_spec(name="canonical"):
    """Committed configs: ``canonical`` (calibrated LightSiamese-52) and ``desk`` (reduced width)."""
    doc = tomllib.loads(builtin_config_text(name))
    return ModelSpec.from_dict({k: v for k, v in doc.items() if k in ("backbone", "fpn", "head")})
