"""TOML run configuration for the command-line pipeline.

Layout::

    seed = 0              # governs every random stream
    threads = 1           # worker cap; results do not depend on it
    out = "out"
    panel = "panel.csv"   # estimate input (and optional diagnose input)
    params = "params.json"  # diagnose input
    init = "default"

    [dgp]          # DgpSpec fields except seed
    [msem]         # MsemConfig fields except seed and threads
    [diagnostics]  # DiagnosticsOptions fields except seed
    [replicate]
    kinds = ["canonical", "nonlinear_sieve"]

Command-line flags override the file, which overrides the defaults.
"""

from __future__ import annotations

import sys
from dataclasses import dataclass, field, fields
from pathlib import Path

import tomli_w

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

from . import rng
from .diagnostics import DiagnosticsOptions
from .msem import INITS, MsemConfig
from .simulator import KINDS, DgpSpec

TOP_LEVEL = ("seed", "threads", "out", "panel", "params", "init")
SECTIONS = {"dgp": DgpSpec, "msem": MsemConfig, "diagnostics": DiagnosticsOptions}
# set only through the top-level seed / threads
RESERVED = {"seed", "threads"}
# where and how fast a run happens cannot change any artifact; left out of
# the echo so runs into different directories stay byte-identical
RUNTIME_ONLY = {"threads", "out"}


class ConfigError(ValueError):
    """Invalid or unreadable run configuration."""


def _section_defaults(cls) -> dict:
    return {f.name: getattr(cls(), f.name) for f in fields(cls) if f.name not in RESERVED}


def _coerce(section: str, key: str, value, default):
    name = f"{section}.{key}" if section else key
    if isinstance(default, bool):
        ok = isinstance(value, bool)
    elif isinstance(default, int):
        ok = isinstance(value, int) and not isinstance(value, bool)
    elif isinstance(default, float):
        ok = isinstance(value, (int, float)) and not isinstance(value, bool)
        value = float(value) if ok else value
    elif isinstance(default, tuple):
        ok = isinstance(value, list)
        value = tuple(value) if ok else value
    elif isinstance(default, str):
        ok = isinstance(value, str)
    else:  # optional numbers default to None
        ok = isinstance(value, (int, float)) and not isinstance(value, bool)
    if not ok:
        raise ConfigError(f"invalid value for {name!r}: {value!r}")
    return value


@dataclass
class RunConfig:
    seed: int = 0
    threads: int = 1
    out: str = "out"
    panel: str | None = None
    params: str | None = None
    init: str = "default"
    dgp: dict = field(default_factory=lambda: _section_defaults(DgpSpec))
    msem: dict = field(default_factory=lambda: _section_defaults(MsemConfig))
    diagnostics: dict = field(default_factory=lambda: _section_defaults(DiagnosticsOptions))
    replicate_kinds: tuple = ("canonical", "nonlinear_sieve")

    def __post_init__(self):
        if not 0 <= self.seed < 2**64:
            raise ConfigError("invalid value for 'seed': must lie in [0, 2^64)")
        if self.threads < 1:
            raise ConfigError("invalid value for 'threads': must be >= 1")
        if self.init not in INITS:
            raise ConfigError(f"invalid value for 'init': {self.init!r} (expected one of {sorted(INITS)})")
        bad = [k for k in self.replicate_kinds if k not in KINDS or k == "fitted"]
        if bad or not self.replicate_kinds:
            raise ConfigError(f"invalid value for 'replicate.kinds': {list(self.replicate_kinds)!r}")
        # build once so field validation errors surface before any work
        for name in SECTIONS:
            try:
                getattr(self, name + "_config")()
            except (TypeError, ValueError) as exc:
                raise ConfigError(f"invalid [{name}] settings: {exc}") from exc

    def dgp_config(self, kind: str | None = None) -> DgpSpec:
        spec = dict(self.dgp, seed=rng.derive_seed(self.seed, rng.STAGE_DGP))
        if kind is not None:
            spec["kind"] = kind
        return DgpSpec(**spec)

    def msem_config(self) -> MsemConfig:
        return MsemConfig(**self.msem, seed=rng.derive_seed(self.seed, rng.STAGE_MSEM), threads=self.threads)

    def diagnostics_config(self) -> DiagnosticsOptions:
        return DiagnosticsOptions(**self.diagnostics, seed=rng.derive_seed(self.seed, rng.DIAGNOSTICS))

    def to_toml_dict(self) -> dict:
        out = {k: getattr(self, k) for k in TOP_LEVEL if k not in RUNTIME_ONLY and getattr(self, k) is not None}
        for name in SECTIONS:
            out[name] = {k: list(v) if isinstance(v, tuple) else v
                         for k, v in getattr(self, name).items() if v is not None}
        out["replicate"] = {"kinds": list(self.replicate_kinds)}
        return out

    def to_toml(self) -> str:
        return tomli_w.dumps(self.to_toml_dict())


def parse_config(data: dict) -> RunConfig:
    """Validate a parsed TOML mapping and fill defaults."""
    defaults = RunConfig()
    kwargs = {}
    for key, value in data.items():
        if key in SECTIONS:
            if not isinstance(value, dict):
                raise ConfigError(f"[{key}] must be a table")
            base = getattr(defaults, key)
            section = dict(base)
            for sub, sub_value in value.items():
                if sub in RESERVED:
                    raise ConfigError(f"key '{key}.{sub}' is not allowed: set the top-level {sub!r}")
                if sub not in base:
                    raise ConfigError(f"unknown key '{key}.{sub}'")
                section[sub] = _coerce(key, sub, sub_value, base[sub])
            kwargs[key] = section
        elif key == "replicate":
            if not isinstance(value, dict):
                raise ConfigError("[replicate] must be a table")
            for sub in value:
                if sub != "kinds":
                    raise ConfigError(f"unknown key 'replicate.{sub}'")
            kwargs["replicate_kinds"] = _coerce("replicate", "kinds", value.get("kinds", []), ())
        elif key in TOP_LEVEL:
            default = getattr(defaults, key)
            kwargs[key] = _coerce("", key, value, "" if default is None else default)
        else:
            raise ConfigError(f"unknown key {key!r}")
    return RunConfig(**kwargs)


def load_config(path) -> RunConfig:
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc.strerror or exc}") from exc
    try:
        data = tomllib.loads(text)
    except tomllib.TOMLDecodeError as exc:
        # the decoder message carries "(at line L, column C)"
        raise ConfigError(f"cannot parse {path}: {exc}") from exc
    return parse_config(data)
