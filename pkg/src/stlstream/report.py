"""Job reports written by both ends of a session, as JSON Lines."""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field

# fields that legitimately differ between identical runs
TIMING_FIELDS = ("wall_seconds",)


@dataclass
class LayerReport:
    index: int
    z: float | None = None
    extruded_length: float = 0.0
    guide_length: float = 0.0
    bytes: int = 0
    t_request: float | None = None
    t_available: float | None = None
    t_start: float | None = None
    t_end: float | None = None


@dataclass
class JobReport:
    role: str
    status: str = "running"
    exit_code: int = 0
    error: str | None = None
    layers_total: int = 0
    layers_printed: int = 0
    bytes_sent: int = 0
    bytes_received: int = 0
    layers: list = field(default_factory=list)
    validation: list = field(default_factory=list)
    dwell: dict = field(default_factory=dict)
    ledger_digest: str | None = None
    max_resident: dict = field(default_factory=dict)
    extruded_length: float = 0.0
    wall_seconds: float = 0.0

    def __post_init__(self):
        if self.layers_printed > self.layers_total and self.layers_total:
            raise ValueError("layers_printed exceeds layers_total")

    @property
    def ok(self) -> bool:
        return self.exit_code == 0

    def fail(self, status: str, code: int, error: str) -> "JobReport":
        self.status, self.exit_code, self.error = status, code, error
        return self

    def layer(self, index: int) -> LayerReport:
        for rec in self.layers:
            if rec.index == index:
                return rec
        rec = LayerReport(index)
        self.layers.append(rec)
        return rec

    def to_jsonl(self, timing: bool = True) -> str:
        head = asdict(self)
        layers = head.pop("layers")
        if not timing:
            for k in TIMING_FIELDS:
                head.pop(k, None)
        lines = [json.dumps({"record": "job", **head}, sort_keys=True)]
        lines += [json.dumps({"record": "layer", **rec}, sort_keys=True) for rec in layers]
        return "\n".join(lines) + "\n"

    def write(self, path) -> None:
        with open(path, "w", encoding="utf-8") as f:
            f.write(self.to_jsonl())

    @classmethod
    def from_jsonl(cls, text: str) -> "JobReport":
        head, layers = None, []
        for line in text.splitlines():
            if not line.strip():
                continue
            obj = json.loads(line)
            kind = obj.pop("record")
            if kind == "job":
                head = obj
            else:
                layers.append(LayerReport(**obj))
        if head is None:
            raise ValueError("report has no job record")
        return cls(**head, layers=layers)
