"""
G-code text handling: parsing into commands with section markers,
printing back, stripping per-layer redundant start/end blocks and
validating programs against a machine's limits before they reach the
printer.
"""
from __future__ import annotations

import re
from dataclasses import dataclass, field, replace

import numpy as np

from .config import FORBIDDEN, MachineSpec

MARKERS = ("HEADER_START", "HEADER_END", "LAYER", "FOOTER_START", "FOOTER_END")
GUIDE = "GUIDE"
POSITIONS = ("first", "intermediate", "last")

# commands whose argument is free text rather than letter/number words
TEXT_ARG = frozenset({"M23", "M28", "M30", "M32", "M117"})

_CODE = re.compile(r"([GMT])\s*(\d+(?:\.\d+)?)", re.IGNORECASE)
_WORD = re.compile(r"([A-Z])\s*([^A-Z\s]*)", re.IGNORECASE)
_NUMBER = re.compile(r"[-+]?(?:\d+\.?\d*|\.\d+)")
_LINENO = re.compile(r"^N\s*\d+\s*", re.IGNORECASE)


class GcodeError(ValueError):
    """Raised for malformed G-code or inconsistent section markers."""


def fmt(value: float) -> str:
    """Shortest positional decimal that reads back to the same float."""
    value = float(value)
    s = repr(value)
    if "e" in s or "n" in s:
        s = np.format_float_positional(value, trim="-")
    elif s.endswith(".0"):
        s = s[:-2]
    return "0" if s == "-0" else s


@dataclass(frozen=True)
class GcodeCommand:
    code: str
    params: dict = field(default_factory=dict)
    comment: str | None = None
    source_line: int = 0
    text: str | None = None

    def get(self, letter: str, default=None):
        return self.params.get(letter, default)

    @property
    def is_guide(self) -> bool:
        return self.comment == GUIDE

    def to_text(self) -> str:
        parts = [self.code]
        if self.text is not None:
            parts.append(self.text)
        for k, v in self.params.items():
            parts.append(k if v is None else f"{k}{fmt(v)}")
        line = " ".join(parts)
        if self.comment is not None:
            line += f" ;{self.comment}"
        return line

    def same(self, other: "GcodeCommand") -> bool:
        """Equality ignoring source line numbers and comments."""
        return (self.code, self.params, self.text) == (other.code, other.params, other.text)


@dataclass(frozen=True)
class Marker:
    kind: str
    index: int
    arg: int | None = None


@dataclass(frozen=True)
class GcodeProgram:
    commands: tuple = ()
    markers: tuple = ()

    def __len__(self) -> int:
        return len(self.commands)

    def __iter__(self):
        return iter(self.commands)

    def to_text(self) -> str:
        by_index: dict[int, list[Marker]] = {}
        for m in self.markers:
            by_index.setdefault(m.index, []).append(m)
        lines = []
        for i in range(len(self.commands) + 1):
            for m in by_index.get(i, ()):
                lines.append(f";{m.kind}" if m.arg is None else f";{m.kind} {m.arg}")
            if i < len(self.commands):
                lines.append(self.commands[i].to_text())
        return "\n".join(lines) + "\n"

    def lines(self) -> list[str]:
        """Command lines without comments, as sent to a printer."""
        return [replace(c, comment=None).to_text() for c in self.commands]

    def marker(self, kind: str) -> list[Marker]:
        return [m for m in self.markers if m.kind == kind]

    @property
    def guide_indices(self) -> list[int]:
        return [i for i, c in enumerate(self.commands) if c.is_guide]

    def same_commands(self, other: "GcodeProgram") -> bool:
        return len(self) == len(other) and all(a.same(b) for a, b in zip(self.commands, other.commands))

    def __add__(self, other: "GcodeProgram") -> "GcodeProgram":
        shift = len(self.commands)
        moved = tuple(replace(m, index=m.index + shift) for m in other.markers)
        return GcodeProgram(self.commands + other.commands, self.markers + moved)


def parse_line(raw: str, lineno: int = 0) -> GcodeCommand | Marker | None:
    """Parse one line; returns a command, a standalone marker, or None."""
    body, _, comment = raw.partition(";")
    comment = comment.strip() if _ else None
    body = body.strip()
    if "*" in body:
        body = body.split("*", 1)[0].strip()
    body = _LINENO.sub("", body)
    if not body:
        if comment:
            word, _, arg = comment.partition(" ")
            if word in MARKERS:
                n = None
                if arg.strip():
                    try:
                        n = int(arg)
                    except ValueError:
                        raise GcodeError(f"line {lineno}: bad marker argument {arg!r}") from None
                return Marker(word, -1, n)
        return None
    m = _CODE.match(body)
    if m is None:
        raise GcodeError(f"line {lineno}: unrecognised command {body!r}")
    letter, number = m.group(1).upper(), m.group(2)
    number = number.rstrip("0").rstrip(".") if "." in number else str(int(number))
    code = f"{letter}{number}"
    rest = body[m.end():].strip()
    if code in TEXT_ARG:
        return GcodeCommand(code, {}, comment, lineno, rest or None)
    params: dict[str, float | None] = {}
    pos = 0
    for w in _WORD.finditer(rest):
        if rest[pos:w.start()].strip():
            raise GcodeError(f"line {lineno}: unexpected text {rest[pos:w.start()]!r}")
        pos = w.end()
        key, val = w.group(1).upper(), w.group(2)
        if key in params:
            raise GcodeError(f"line {lineno}: repeated parameter {key}")
        if val == "":
            params[key] = None
        elif _NUMBER.fullmatch(val):
            params[key] = float(val)
        else:
            raise GcodeError(f"line {lineno}: malformed number {key}{val}")
    if rest[pos:].strip():
        raise GcodeError(f"line {lineno}: unexpected text {rest[pos:]!r}")
    return GcodeCommand(code, params, comment, lineno)


def parse_gcode(text: str) -> GcodeProgram:
    commands, markers = [], []
    for n, raw in enumerate(text.splitlines(), start=1):
        item = parse_line(raw, n)
        if item is None:
            continue
        if isinstance(item, Marker):
            markers.append(replace(item, index=len(commands)))
        else:
            commands.append(item)
    program = GcodeProgram(tuple(commands), tuple(markers))
    check_markers(program)
    return program


def check_markers(program: GcodeProgram) -> None:
    """Raise ``GcodeError`` unless HEADER/FOOTER markers pair up in order."""
    for start, end in (("HEADER_START", "HEADER_END"), ("FOOTER_START", "FOOTER_END")):
        s, e = program.marker(start), program.marker(end)
        if len(s) != len(e) or len(s) > 1:
            raise GcodeError(f"unbalanced {start}/{end} markers")
        if s and s[0].index > e[0].index:
            raise GcodeError(f"{end} before {start}")
    hs, fs = program.marker("HEADER_END"), program.marker("FOOTER_START")
    if hs and fs and hs[0].index > fs[0].index:
        raise GcodeError("footer starts before header ends")


# redundant start/end commands ----------------------------------------------

def _is_header_class(c: GcodeCommand) -> bool:
    if c.code in ("G28", "M104", "M109", "M140", "M190", "M82", "M83"):
        return True
    return c.code == "G92" and "E" in c.params


def _is_footer_class(c: GcodeCommand) -> bool:
    if c.code in ("M104", "M109", "M140", "M190", "M106"):
        return c.get("S") == 0.0
    if c.code in ("M107", "M84"):
        return True
    if c.code in ("G0", "G1"):
        return "E" not in c.params and c.get("X") == 0.0 and c.get("Y") == 0.0
    return False


def _region(program: GcodeProgram, start: str, end: str) -> tuple[int, int] | None:
    s, e = program.marker(start), program.marker(end)
    if not s:
        return None
    return s[0].index, e[0].index


def _cut(program: GcodeProgram, spans: list[tuple[int, int]], drop_kinds: set[str]) -> GcodeProgram:
    keep = np.ones(len(program.commands), dtype=bool)
    for a, b in spans:
        keep[a:b] = False
    new_index = np.concatenate([[0], np.cumsum(keep)])
    commands = tuple(c for c, k in zip(program.commands, keep) if k)
    markers = tuple(
        replace(m, index=int(new_index[m.index]))
        for m in program.markers
        if m.kind not in drop_kinds
    )
    return GcodeProgram(commands, markers)


def remove_redundant(program: GcodeProgram, position: str, mode: str = "auto") -> GcodeProgram:
    """
    Strip the start block from every layer program but the first and the
    end block from every program but the last.

    ``mode`` is ``markers`` (use the HEADER/FOOTER regions), ``classes``
    (strip the leading run of warm-up/homing commands and the trailing
    run of shutdown commands) or ``auto`` (markers when present).
    """
    if position not in POSITIONS:
        raise ValueError(f"position must be one of {POSITIONS}")
    check_markers(program)
    strip_header = position != "first"
    strip_footer = position != "last"
    has_markers = bool(program.marker("HEADER_START") or program.marker("FOOTER_START"))
    if mode == "markers" or (mode == "auto" and has_markers):
        spans, drop = [], set()
        header = _region(program, "HEADER_START", "HEADER_END")
        footer = _region(program, "FOOTER_START", "FOOTER_END")
        if strip_header and header:
            spans.append(header)
            drop |= {"HEADER_START", "HEADER_END"}
        if strip_footer and footer:
            spans.append(footer)
            drop |= {"FOOTER_START", "FOOTER_END"}
        return _cut(program, spans, drop)
    if mode not in ("classes", "auto"):
        raise ValueError(f"unknown mode {mode!r}")
    cmds = program.commands
    spans, drop = [], set()
    if strip_header:
        drop |= {"HEADER_START", "HEADER_END"}
        i = 0
        while i < len(cmds) and _is_header_class(cmds[i]) and not _is_footer_class(cmds[i]):
            i += 1
        spans.append((0, i))
    if strip_footer:
        drop |= {"FOOTER_START", "FOOTER_END"}
        j = len(cmds)
        while j > 0 and _is_footer_class(cmds[j - 1]):
            j -= 1
        spans.append((j, len(cmds)))
    return _cut(program, spans, drop)


def footer_of(program: GcodeProgram) -> GcodeProgram:
    """Only the end block (marker region, or trailing shutdown run)."""
    footer = _region(program, "FOOTER_START", "FOOTER_END")
    if footer is None:
        j = len(program.commands)
        while j > 0 and _is_footer_class(program.commands[j - 1]):
            j -= 1
        footer = (j, len(program.commands))
    a, b = footer
    return GcodeProgram(program.commands[a:b], (Marker("FOOTER_START", 0), Marker("FOOTER_END", b - a)))


# validation ------------------------------------------------------------------

@dataclass(frozen=True)
class Violation:
    source_line: int
    rule: str
    detail: str


@dataclass(frozen=True)
class ValidationReport:
    violations: tuple = ()

    @property
    def verdict(self) -> str:
        return "accept" if not self.violations else "reject"

    @property
    def accepted(self) -> bool:
        return not self.violations

    def rules(self) -> list[str]:
        return [v.rule for v in self.violations]

    def summary(self) -> str:
        if not self.violations:
            return "accept"
        return "reject: " + "; ".join(f"line {v.source_line} {v.rule} ({v.detail})" for v in self.violations)


def validate(program: GcodeProgram, machine: MachineSpec) -> ValidationReport:
    """
    Check every command against the machine's allow-list and limits.

    Motion is tracked through G90/G91, M82/M83 and G92 so targets are
    checked in machine coordinates. All violations are collected.
    """
    out: list[Violation] = []
    bounds = {"X": machine.bed_x, "Y": machine.bed_y, "Z": machine.max_z}
    pos: dict[str, float | None] = {"X": None, "Y": None, "Z": None}
    shift = {"X": 0.0, "Y": 0.0, "Z": 0.0}
    relative = False
    relative_e = False
    e_last: float | None = None

    def bad(c, rule, detail):
        out.append(Violation(c.source_line, rule, detail))

    for c in program.commands:
        code = c.code
        if code in FORBIDDEN:
            bad(c, "forbidden-command", f"{code} is never allowed")
            continue
        if code not in machine.allowed_commands:
            bad(c, "not-allowed", f"{code} is not in the machine allow-list")
            continue
        s = c.get("S")
        if code in ("M104", "M109") and s is not None and s > machine.max_hotend_temp:
            bad(c, "hotend-limit", f"S{fmt(s)} > {fmt(machine.max_hotend_temp)}")
        elif code in ("M140", "M190") and s is not None and s > machine.max_bed_temp:
            bad(c, "bed-limit", f"S{fmt(s)} > {fmt(machine.max_bed_temp)}")
        elif code == "M106" and s is not None and not 0 <= s <= 255:
            bad(c, "fan-limit", f"S{fmt(s)} outside 0..255")
        elif code == "G90":
            relative = False
        elif code == "G91":
            relative = True
        elif code == "M82":
            relative_e = False
        elif code == "M83":
            relative_e = True
        elif code == "G28":
            axes = [a for a in "XYZ" if a in c.params] or list("XYZ")
            for a in axes:
                pos[a] = 0.0
                shift[a] = 0.0
        elif code == "G92":
            for a in "XYZ":
                if a in c.params and c.params[a] is not None and pos[a] is not None:
                    shift[a] = pos[a] - c.params[a]
            if c.get("E") is not None:
                e_last = c.params["E"]
        elif code in ("G0", "G1"):
            for a in "XYZ":
                v = c.get(a)
                if v is None:
                    continue
                if relative:
                    if pos[a] is None:
                        continue
                    target = pos[a] + v
                else:
                    target = v + shift[a]
                if not -1e-9 <= target <= bounds[a] + 1e-9:
                    bad(c, "out-of-volume", f"{a}={fmt(target)} outside [0, {fmt(bounds[a])}]")
                else:
                    pos[a] = target
            e = c.get("E")
            if e is not None:
                if relative_e or relative:
                    if e < -machine.retraction_allowance:
                        bad(c, "extrusion-decrease", f"E{fmt(e)}")
                else:
                    if e_last is not None and e < e_last - machine.retraction_allowance - 1e-9:
                        bad(c, "extrusion-decrease", f"E{fmt(e)} < {fmt(e_last)}")
                    e_last = e
    return ValidationReport(tuple(out))


# analysis helpers --------------------------------------------------------------

@dataclass
class LayerStats:
    index: int
    z: float | None = None
    extruded_length: float = 0.0
    guide_length: float = 0.0
    filament: float = 0.0
    z_values: set = field(default_factory=set)
    xy_min: np.ndarray | None = None
    xy_max: np.ndarray | None = None

    def _grow(self, p):
        p = np.asarray(p, dtype=np.float64)
        self.xy_min = p if self.xy_min is None else np.minimum(self.xy_min, p)
        self.xy_max = p if self.xy_max is None else np.maximum(self.xy_max, p)


def layer_stats(program: GcodeProgram) -> list[LayerStats]:
    """
    Per-layer extrusion figures for an absolute-coordinate program.

    Layers follow the ``;LAYER n`` markers. Extruded length is the XY
    length of E-increasing moves; ``;GUIDE`` moves are counted separately.
    """
    starts = {m.index: m.arg for m in program.marker("LAYER")}
    layers: list[LayerStats] = []
    cur = None
    x = y = z = None
    e = 0.0
    for i, c in enumerate(program.commands):
        if i in starts:
            cur = LayerStats(starts[i])
            layers.append(cur)
        if c.code == "G92" and c.get("E") is not None:
            e = c.params["E"]
        if c.code == "G28":
            x = y = z = 0.0
        if c.code not in ("G0", "G1"):
            continue
        nx, ny, nz = c.get("X", x), c.get("Y", y), c.get("Z", z)
        ne = c.get("E")
        if cur is not None and ne is not None and ne > e and x is not None and nx is not None:
            length = float(np.hypot(nx - x, ny - y))
            if c.is_guide:
                cur.guide_length += length
            else:
                cur.extruded_length += length
            cur.filament += ne - e
            cur.z_values.add(nz)
            if not c.is_guide:
                cur.z = nz
            cur._grow((x, y))
            cur._grow((nx, ny))
        if ne is not None:
            e = ne
        x, y, z = nx, ny, nz
    return layers
