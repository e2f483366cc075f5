"""Run configuration read from an INI file with one section per stage.

Every key has a typed default; unknown sections or keys are rejected.
"""
from __future__ import annotations

import configparser
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

from .errors import ConfigError
from .synthgen import DgpParams

_BOOL = {"true": True, "yes": True, "1": True, "on": True, "false": False, "no": False, "0": False, "off": False}


@dataclass(frozen=True)
class RunSection:
    seed: int = 20240611
    threads: int = 1


@dataclass(frozen=True)
class PrepareSection:
    base_year: int = 0  # 0: the later of the two panel years
    error_budget: int = 0
    min_age: int = 18
    max_age: int = 65
    min_annual_wage: float = 100.0
    use_precomputed_hourly: bool = False
    residualize: bool = True


@dataclass(frozen=True)
class DecomposeSection:
    dvs: str = "level,log,growth"
    samples: str = "all,stayers"
    controls: str = "baseline,firm_fe,coworkers,coworkers_firm_fe"
    moments: bool = False
    tol: float = 1e-10
    max_iter: int = 10_000
    coworker_singletons: str = "zero"
    ee_fixed_effects: str = "none"
    n_bins: int = 50

    def items(self, name: str) -> list[str]:
        return [s.strip() for s in getattr(self, name).split(",") if s.strip()]


@dataclass(frozen=True)
class VerifySection:
    kernel_teams: int = 5000
    fwl_instances: int = 200
    scaling_rows: int = 5_000_000
    recovery_workers: int = 520_000
    skip_scaling: bool = False


@dataclass(frozen=True)
class RunConfig:
    run: RunSection = field(default_factory=RunSection)
    generate: DgpParams = field(default_factory=DgpParams)
    prepare: PrepareSection = field(default_factory=PrepareSection)
    decompose: DecomposeSection = field(default_factory=DecomposeSection)
    verify: VerifySection = field(default_factory=VerifySection)

    def echo(self) -> dict:
        """Configuration as nested plain data. The thread count is left out on
        purpose: outputs must not depend on it."""
        out = {name: asdict(getattr(self, name)) for name in SECTIONS}
        out["run"].pop("threads")
        return out

    def with_seed(self, seed: int) -> RunConfig:
        return replace(self, run=replace(self.run, seed=seed), generate=replace(self.generate, seed=seed))

    def with_threads(self, threads: int) -> RunConfig:
        if threads < 1:
            raise ConfigError("threads must be at least 1")
        return replace(self, run=replace(self.run, threads=threads))


SECTIONS = {"run": RunSection, "generate": DgpParams, "prepare": PrepareSection, "decompose": DecomposeSection, "verify": VerifySection}


def _convert(text: str, kind: type, key: str):
    text = text.strip()
    try:
        if kind is bool:
            return _BOOL[text.lower()]
        if kind is int:
            return int(float(text)) if "e" in text.lower() else int(text)
        if kind is float:
            return float(text)
    except (KeyError, ValueError) as exc:
        raise ConfigError(f"{key}: cannot parse {text!r} as {kind.__name__}") from exc
    return text


def parse_config(text: str, source: str = "<config>") -> RunConfig:
    cp = configparser.ConfigParser(interpolation=None, default_section="__none__")
    cp.optionxform = str
    try:
        cp.read_string(text, source=source)
    except configparser.Error as exc:
        raise ConfigError(f"{source}: {exc}") from exc
    values = {}
    for section in cp.sections():
        if section not in SECTIONS:
            raise ConfigError(f"{source}: unknown section [{section}]")
        cls = SECTIONS[section]
        defaults = cls()
        kinds = {f.name: type(getattr(defaults, f.name)) for f in fields(cls)}
        kw = {}
        for key, raw in cp.items(section):
            if key not in kinds:
                raise ConfigError(f"{source}: unknown key {key!r} in [{section}]")
            kw[key] = _convert(raw, kinds[key], f"[{section}] {key}")
        values[section] = replace(defaults, **kw)
    cfg = RunConfig(**values)
    run_seed = "run" in values and "seed" in cp["run"]
    gen_seed = "generate" in values and "seed" in cp["generate"]
    if run_seed and not gen_seed:
        cfg = cfg.with_seed(cfg.run.seed)
    validate(cfg)
    return cfg


def load_config(path: str | Path | None) -> RunConfig:
    if path is None:
        cfg = RunConfig()
        validate(cfg)
        return cfg
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file not found: {path}")
    return parse_config(path.read_text(encoding="utf-8"), str(path))


def validate(cfg: RunConfig) -> None:
    from .decomposition import CONTROLS, DVS, SAMPLES

    cfg.generate.validate()
    d = cfg.decompose
    for name, allowed in (("dvs", DVS), ("samples", SAMPLES), ("controls", CONTROLS)):
        items = d.items(name)
        if not items:
            raise ConfigError(f"[decompose] {name} is empty")
        bad = [x for x in items if x not in allowed]
        if bad:
            raise ConfigError(f"[decompose] {name}: unknown value(s) {bad}; allowed {list(allowed)}")
    if d.coworker_singletons not in ("zero", "flag", "drop"):
        raise ConfigError("[decompose] coworker_singletons must be zero, flag or drop")
    if d.ee_fixed_effects not in ("none", "cz", "firm"):
        raise ConfigError("[decompose] ee_fixed_effects must be none, cz or firm")
    if not 0 < d.tol < 1e-3 or d.max_iter < 1 or d.n_bins < 1:
        raise ConfigError("[decompose] tol must lie in (0, 1e-3); max_iter and n_bins must be positive")
    p = cfg.prepare
    if p.error_budget < 0 or p.min_age > p.max_age:
        raise ConfigError("[prepare] error_budget must be >= 0 and min_age <= max_age")
    if cfg.run.threads < 1:
        raise ConfigError("[run] threads must be at least 1")
