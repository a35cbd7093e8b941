"""
Print configuration split into design choices (sent by the client) and
machine choices (private to the manufacturer), plus the ``key=value``
text format shared by config files and wire payloads.
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, fields, replace

# Design-choice keys: the only ones a client may send or put in its config.
DESIGN_KEYS = ("layer_height", "fill_density", "fill_angle", "fill_pattern", "perimeter_count")

# Published in SPEC_REPLY: the minimum a client needs to plan a job.
PUBLIC_MACHINE_KEYS = (
    "bed_x", "bed_y", "max_z", "nozzle_diameter", "filament_diameter",
    "layer_height_min", "layer_height_max", "max_hotend_temp", "max_bed_temp",
)

DEFAULT_ALLOWED = frozenset({
    "G0", "G1", "G4", "G12", "G28", "G90", "G91", "G92",
    "M82", "M83", "M84", "M104", "M105", "M106", "M107", "M109", "M140", "M190",
})

# Never executable regardless of the allow-list: SD file select, firmware
# update, restart.
FORBIDDEN = frozenset({"M23", "M997", "M999"})


class ConfigError(ValueError):
    """Raised for malformed or disallowed configuration content."""


def parse_kv(text: str) -> dict[str, str]:
    """
    Parse UTF-8 ``key=value`` lines. Blank lines and ``#`` comments are
    skipped; duplicate keys are an error.
    """
    out: dict[str, str] = {}
    for n, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {n}: expected key=value, got {raw!r}")
        key, value = (part.strip() for part in line.split("=", 1))
        if not key:
            raise ConfigError(f"line {n}: empty key")
        if key in out:
            raise ConfigError(f"line {n}: duplicate key {key!r}")
        out[key] = value
    return out


def format_kv(pairs: dict) -> str:
    lines = []
    for k, v in pairs.items():
        if isinstance(v, (set, frozenset, list, tuple)):
            v = ",".join(sorted(v))
        elif isinstance(v, float):
            v = repr(v)
        lines.append(f"{k}={v}")
    return "\n".join(lines) + "\n"


def _number(key, value, kind=float):
    try:
        x = kind(value)
    except (TypeError, ValueError):
        raise ConfigError(f"{key}: not a number: {value!r}") from None
    if isinstance(x, float) and not math.isfinite(x):
        raise ConfigError(f"{key}: must be finite")
    return x


@dataclass(frozen=True)
class PrintConfig:
    """Design choices; ``z_offset`` is set per layer by the manufacturer session."""

    layer_height: float = 0.3
    fill_density: float = 1.0
    fill_angle: float = 45.0
    fill_pattern: str = "rectilinear"
    perimeter_count: int = 2
    z_offset: float = 0.0
    seam_preference: str = "nearest"

    def __post_init__(self):
        if not self.layer_height > 0:
            raise ConfigError("layer_height must be positive")
        if not 0.0 <= self.fill_density <= 1.0:
            raise ConfigError("fill_density must be within [0, 1]")
        if self.fill_pattern != "rectilinear":
            raise ConfigError(f"unsupported fill_pattern {self.fill_pattern!r}")
        if self.perimeter_count < 0:
            raise ConfigError("perimeter_count must be non-negative")
        if self.z_offset < 0:
            raise ConfigError("z_offset must be non-negative")
        k = self.z_offset / self.layer_height
        if abs(k - round(k)) * self.layer_height > 1e-9:
            raise ConfigError("z_offset must be a multiple of layer_height")
        if self.seam_preference not in ("nearest", "fixed"):
            raise ConfigError(f"unknown seam_preference {self.seam_preference!r}")

    def at_layer(self, index: int) -> "PrintConfig":
        return replace(self, z_offset=index * self.layer_height)

    def design_payload(self) -> dict:
        return {k: getattr(self, k) for k in DESIGN_KEYS}

    def to_text(self) -> str:
        return format_kv(self.design_payload())

    @classmethod
    def from_mapping(cls, kv: dict[str, str], strict: bool = True) -> "PrintConfig":
        """
        Build from design-choice keys. Machine-choice keys are refused with
        an explicit error; other unknown keys are refused when ``strict``.
        """
        machine = sorted(k for k in kv if k in MACHINE_KEYS and k not in DESIGN_KEYS)
        if machine:
            raise ConfigError(f"machine-choice parameter not allowed in client config: {', '.join(machine)}")
        unknown = sorted(k for k in kv if k not in DESIGN_KEYS)
        if unknown and strict:
            raise ConfigError(f"unknown config keys: {', '.join(unknown)}")
        args = {}
        for k in DESIGN_KEYS:
            if k not in kv:
                continue
            if k == "fill_pattern":
                args[k] = kv[k]
            elif k == "perimeter_count":
                args[k] = _number(k, kv[k], int)
            else:
                args[k] = _number(k, kv[k])
        return cls(**args)

    @classmethod
    def from_text(cls, text: str) -> "PrintConfig":
        return cls.from_mapping(parse_kv(text))


@dataclass(frozen=True)
class MachineSpec:
    """Machine choices and limits; only ``PUBLIC_MACHINE_KEYS`` ever leave the manufacturer."""

    bed_x: float = 220.0
    bed_y: float = 220.0
    max_z: float = 280.0
    nozzle_diameter: float = 0.4
    filament_diameter: float = 1.75
    max_hotend_temp: float = 260.0
    max_bed_temp: float = 100.0
    hotend_temp: float = 210.0
    bed_temp: float = 60.0
    fan_speed: int = 255
    travel_feed: float = 6000.0
    print_feed: float = 1800.0
    first_layer_feed: float = 1200.0
    layer_height_min: float = 0.1
    layer_height_max: float = 0.4
    allowed_commands: frozenset = DEFAULT_ALLOWED
    # shrinkage / overflow allowance added to every layer's nozzle height
    z_allowance: float = 0.0
    # cumulative E may drop by at most this much (mm of filament)
    retraction_allowance: float = 0.0
    # hotend temperature from which the nozzle oozes when idle
    extrude_min_temp: float = 170.0
    extrusion_width_factor: float = 1.125

    def __post_init__(self):
        allowed = frozenset(c.upper() for c in self.allowed_commands) - FORBIDDEN
        object.__setattr__(self, "allowed_commands", allowed)
        if self.hotend_temp > self.max_hotend_temp:
            raise ConfigError("hotend_temp exceeds max_hotend_temp")
        if self.bed_temp > self.max_bed_temp:
            raise ConfigError("bed_temp exceeds max_bed_temp")
        if self.layer_height_min > self.layer_height_max:
            raise ConfigError("layer_height_min exceeds layer_height_max")
        if not 0 <= self.fan_speed <= 255:
            raise ConfigError("fan_speed must be within 0..255")
        for k in ("bed_x", "bed_y", "max_z", "nozzle_diameter", "filament_diameter",
                  "travel_feed", "print_feed", "first_layer_feed"):
            if not getattr(self, k) > 0:
                raise ConfigError(f"{k} must be positive")

    @property
    def extrusion_width(self) -> float:
        return self.extrusion_width_factor * self.nozzle_diameter

    @property
    def filament_area(self) -> float:
        return math.pi * (self.filament_diameter / 2) ** 2

    @property
    def layer_range(self) -> tuple[float, float]:
        return (self.layer_height_min, self.layer_height_max)

    def accepts_layer_height(self, h: float) -> bool:
        return self.layer_height_min - 1e-12 <= h <= self.layer_height_max + 1e-12

    def public(self) -> "MachineLimits":
        return MachineLimits(**{k: getattr(self, k) for k in PUBLIC_MACHINE_KEYS})

    def to_text(self) -> str:
        return format_kv(asdict(self))

    @classmethod
    def from_mapping(cls, kv: dict[str, str]) -> "MachineSpec":
        known = {f.name: f for f in fields(cls)}
        unknown = sorted(set(kv) - set(known))
        if unknown:
            raise ConfigError(f"unknown machine keys: {', '.join(unknown)}")
        args = {}
        for k, v in kv.items():
            if k == "allowed_commands":
                args[k] = frozenset(c.strip().upper() for c in v.split(",") if c.strip())
            elif k == "fan_speed":
                args[k] = _number(k, v, int)
            else:
                args[k] = _number(k, v)
        return cls(**args)

    @classmethod
    def from_text(cls, text: str) -> "MachineSpec":
        return cls.from_mapping(parse_kv(text))


MACHINE_KEYS = frozenset(f.name for f in fields(MachineSpec)) | {
    # machine-choice rows of the usual slicer settings table
    "temperature", "bridge_fan_speed", "disable_fan",
}


@dataclass(frozen=True)
class MachineLimits:
    """What the client learns about the machine during the handshake."""

    bed_x: float
    bed_y: float
    max_z: float
    nozzle_diameter: float
    filament_diameter: float
    layer_height_min: float
    layer_height_max: float
    max_hotend_temp: float
    max_bed_temp: float

    def accepts_layer_height(self, h: float) -> bool:
        return self.layer_height_min - 1e-12 <= h <= self.layer_height_max + 1e-12

    def to_text(self) -> str:
        return format_kv(asdict(self))

    @classmethod
    def from_text(cls, text: str) -> "MachineLimits":
        kv = parse_kv(text)
        missing = [k for k in PUBLIC_MACHINE_KEYS if k not in kv]
        extra = sorted(set(kv) - set(PUBLIC_MACHINE_KEYS))
        if missing or extra:
            raise ConfigError(f"bad machine specification: missing {missing}, unexpected {extra}")
        return cls(**{k: _number(k, kv[k]) for k in PUBLIC_MACHINE_KEYS})

