"""Training/architecture configuration and its flat ``key=value`` file format."""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Dict

VARIANTS = ("full", "uni_gru", "no_rnn", "no_caps", "conv_caps")

# GaitSet-style stacks. ``cOUTkKpP`` is a conv layer, ``P`` a 2x2 max-pool.
CONV_SPECS = {
    "desk": "c16k3p1,P,c16k3p1,P,c32k3p1,c32k3p1",
    "full": "c32k5p2,c32k3p1,P,c64k3p1,c64k3p1,P,c128k3p1,c128k3p1",
}


@dataclass
class TrainConfig:
    scale: str = "desk"
    conv_spec: str = ""
    bin_dim: int = 64
    hidden: int = 128
    n_caps: int = 6
    caps_dim: int = 128
    n_digit: int = 8
    digit_dim: int = 16
    routings: int = 3
    dropout: float = 0.25
    leaky_slope: float = 0.01
    conv_caps_kernels: int = 32
    variant: str = "full"
    pretrain_steps: int = 500
    train_steps: int = 1500
    lr: float = 1e-4
    p: int = 4
    k: int = 4
    frames_per_sample: int = 16
    margin: float = 0.2
    freeze_pfe: bool = False
    seed: int = 42
    log_every: int = 0

    def __post_init__(self):
        if not self.conv_spec:
            if self.scale not in CONV_SPECS:
                raise ValueError(f"unknown scale {self.scale!r}")
            self.conv_spec = CONV_SPECS[self.scale]
        if self.scale == "full" and self.bin_dim == 64:
            self.bin_dim = 256
        self.validate()

    def validate(self) -> None:
        if self.variant not in VARIANTS:
            raise ValueError(f"unknown variant {self.variant!r}; expected one of {VARIANTS}")
        for name in ("bin_dim", "hidden", "n_caps", "caps_dim", "n_digit", "digit_dim",
                     "routings", "p", "k", "frames_per_sample", "conv_caps_kernels"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")
        for name in ("pretrain_steps", "train_steps", "log_every"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be non-negative")
        if self.lr <= 0:
            raise ValueError("lr must be positive")
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError("dropout must lie in [0, 1)")

    def replace(self, **changes) -> "TrainConfig":
        return dataclasses.replace(self, **changes)

    # -- serialisation -----------------------------------------------------

    def to_text(self) -> str:
        lines = []
        for f in fields(self):
            v = getattr(self, f.name)
            if isinstance(v, bool):
                v = "true" if v else "false"
            lines.append(f"{f.name}={v}")
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text: str) -> "TrainConfig":
        return cls(**parse_kv(text))

    @classmethod
    def from_file(cls, path) -> "TrainConfig":
        return cls.from_text(Path(path).read_text(encoding="utf-8"))


def parse_kv(text: str) -> Dict[str, object]:
    types = {f.name: f.type for f in fields(TrainConfig)}
    out: Dict[str, object] = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ValueError(f"line {lineno}: expected key=value, got {raw!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        if key not in types:
            raise ValueError(f"line {lineno}: unknown config key {key!r}")
        typ = types[key]
        if typ == "bool":
            if value.lower() not in ("true", "false", "1", "0"):
                raise ValueError(f"line {lineno}: {key} expects true/false")
            out[key] = value.lower() in ("true", "1")
        elif typ == "int":
            out[key] = int(value)
        elif typ == "float":
            out[key] = float(value)
        else:
            out[key] = value
    return out


def parse_conv_spec(spec: str):
    """``"c16k3p1,P"`` -> ``[("conv", 16, 3, 1), ("pool",)]``."""
    layers = []
    for tok in spec.split(","):
        tok = tok.strip()
        if tok == "P":
            layers.append(("pool",))
            continue
        if not tok.startswith("c") or "k" not in tok or "p" not in tok:
            raise ValueError(f"bad conv layer token {tok!r}")
        out_ch, rest = tok[1:].split("k")
        ksize, pad = rest.split("p")
        layers.append(("conv", int(out_ch), int(ksize), int(pad)))
    return layers
