"""Flat ``key = value`` run configuration with optional ``[section]`` headers.

Inside ``[seq2seq]`` the line ``hidden = 64`` sets ``seq2seq.hidden``. Unknown
keys are rejected; the resolved configuration is written next to every output.
"""

from __future__ import annotations

import dataclasses
import hashlib

from .errors import ContractError, ParseError
from .estimator import RescalConfig
from .models import GraphForecasterConfig, Seq2seqConfig

AUTO = "auto"


def _section(prefix: str, cls) -> dict:
    return {f"{prefix}.{f.name}": f.default for f in dataclasses.fields(cls)}


def defaults() -> dict:
    d = {
        "seed": 0,
        "synthetic.length": 10000,
        "synthetic.period": 50,
        "synthetic.p_zero": 0.1,
        "synthetic.nodes": 1,
        "synthetic.propagation_lag": 5,
        "data.speed_csv": "",
        "data.distance_csv": "",
        "data.vocab": "",
        "data.zero_is_missing": True,
        "data.kappa": 0.1,
        "data.day_length": 288,
        "data.ratios": (0.7, 0.1, 0.2),
        "base.kind": AUTO,
        "calibrate.split": "test",
        "calibrate.gumbel_mode": "sample",
        "calibrate.rescal": "trained",
        "diagnose.split": "test",
        "diagnose.q": 0.8,
        "diagnose.max_lag": 12,
        "diagnose.acf_horizon": 1,
        "diagnose.horizons": (1, 6, 12, 24),
        "pattern.share": 0.05,
    }
    d.update(_section("seq2seq", Seq2seqConfig))
    d.update(_section("graph", GraphForecasterConfig))
    d.update(_section("rescal", RescalConfig))
    d["rescal.window"] = AUTO
    return d


def _parse_value(raw: str, default, key: str):
    raw = raw.strip()
    if isinstance(default, bool):
        low = raw.lower()
        if low in ("true", "yes", "1"):
            return True
        if low in ("false", "no", "0"):
            return False
        raise ValueError(f"{key}: expected a boolean, got {raw!r}")
    if isinstance(default, int) and not isinstance(default, bool):
        return int(raw)
    if isinstance(default, float):
        return float(raw)
    if isinstance(default, tuple):
        kind = type(default[0]) if default else int
        return tuple(kind(x) for x in raw.strip("()").split(",") if x.strip())
    if default == AUTO and key == "rescal.window":
        return AUTO if raw == AUTO else int(raw)
    return raw


def _format(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, tuple):
        return ", ".join(repr(x) for x in v)
    return str(v) if not isinstance(v, float) else repr(v)


class RunConfig:
    def __init__(self, values: dict | None = None):
        self.values = defaults()
        if values:
            for k, v in values.items():
                self.set(k, v)

    def set(self, key: str, value) -> None:
        if key not in self.values:
            raise ContractError(f"unknown config key {key!r}")
        if isinstance(value, str):
            try:
                value = _parse_value(value, defaults()[key], key)
            except ValueError as exc:
                raise ContractError(f"bad value for {key}: {exc}") from None
        self.values[key] = value

    def __getitem__(self, key):
        return self.values[key]

    def section(self, prefix: str) -> dict:
        p = prefix + "."
        return {k[len(p):]: v for k, v in self.values.items() if k.startswith(p)}

    def seq2seq(self) -> Seq2seqConfig:
        return Seq2seqConfig(**self.section("seq2seq"))

    def graph(self) -> GraphForecasterConfig:
        return GraphForecasterConfig(**self.section("graph"))

    def rescal(self, window: int) -> RescalConfig:
        s = self.section("rescal")
        if s["window"] not in (AUTO, window):
            raise ContractError(f"rescal.window = {s['window']} but the base model uses T = {window}")
        s["window"] = window
        return RescalConfig(**s)

    def dumps(self) -> str:
        return "".join(f"{k} = {_format(v)}\n" for k, v in sorted(self.values.items()))

    def digest(self) -> str:
        return hashlib.sha256(self.dumps().encode()).hexdigest()[:16]

    @classmethod
    def loads(cls, text: str, path=None) -> "RunConfig":
        cfg = cls()
        section = ""
        for lineno, line in enumerate(text.splitlines(), 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if line.startswith("[") and line.endswith("]"):
                section = line[1:-1].strip()
                continue
            if "=" not in line:
                raise ParseError(f"expected 'key = value', got {line!r}", path, lineno)
            k, v = (x.strip() for x in line.split("=", 1))
            key = f"{section}.{k}" if section and "." not in k else k
            try:
                cfg.set(key, v)
            except ContractError as exc:
                raise ParseError(str(exc), path, lineno) from None
        return cfg

    @classmethod
    def load(cls, path) -> "RunConfig":
        with open(path) as fh:
            return cls.loads(fh.read(), path)
