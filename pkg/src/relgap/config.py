"""Experiment configuration: flat ``key = value`` text with ``[section]`` headers.

Keys before the first header belong to the top level. ``#`` starts a comment.
Any key can be overridden on the command line as ``--key=value`` (top level)
or ``--section.key=value``.
"""
from __future__ import annotations

import math
import os
from dataclasses import dataclass, field, fields, replace

from .envs.cartpole import CartPoleParams
from .transfer import TransferConfig

KINDS = ("verify", "pretrain", "tabular-transfer", "cartpole-rpo", "cartpole-rto", "cartpole-rpto", "cartpole-sac-warm")
TRANSFER_KINDS = KINDS[2:]
CARTPOLE_METHOD = {"cartpole-rpo": "rpo", "cartpole-rto": "rto", "cartpole-rpto": "rpto", "cartpole-sac-warm": "sac_warm"}


class ConfigError(ValueError):
    def __init__(self, msg, lineno=None, path=None):
        where = ""
        if path is not None:
            where = f"{path}:{lineno}: " if lineno else f"{path}: "
        elif lineno:
            where = f"line {lineno}: "
        super().__init__(where + msg)
        self.lineno = lineno


def parse_config(text: str, path=None) -> dict:
    """Parse into {section: {key: raw string}}; the top level is section ''."""
    out = {"": {}}
    section = ""
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if line.startswith("["):
            if not line.endswith("]") or len(line) < 3:
                raise ConfigError(f"malformed section header {line!r}", lineno, path)
            section = line[1:-1].strip()
            out.setdefault(section, {})
            continue
        if "=" not in line:
            raise ConfigError(f"expected 'key = value', got {line!r}", lineno, path)
        key, value = (p.strip() for p in line.split("=", 1))
        if not key:
            raise ConfigError("empty key", lineno, path)
        if key in out[section]:
            raise ConfigError(f"duplicate key {key!r}", lineno, path)
        out[section][key] = value
    return out


def read_config(path) -> dict:
    try:
        with open(path, encoding="utf-8") as fh:
            text = fh.read()
    except OSError as exc:
        raise ConfigError(f"cannot read config: {exc.strerror}", path=path) from None
    return parse_config(text, path=str(path))


def apply_overrides(raw: dict, overrides) -> dict:
    """Fold ``--key=value`` / ``--section.key=value`` flags into a parsed config."""
    out = {k: dict(v) for k, v in raw.items()}
    for flag in overrides:
        if not flag.startswith("--") or "=" not in flag:
            raise ConfigError(f"unrecognized argument {flag!r}; overrides look like --section.key=value")
        key, value = flag[2:].split("=", 1)
        section, _, name = key.rpartition(".")
        if not name:
            raise ConfigError(f"empty key in {flag!r}")
        out.setdefault(section, {})[name.replace("-", "_")] = value
    return out


# ---------------------------------------------------------------- typed blocks

def _num(value, kind, key):
    try:
        if kind is int:
            v = int(value)
        else:
            v = float(value)
            if not math.isfinite(v):
                raise ValueError
    except ValueError:
        raise ConfigError(f"{key}: expected {'an integer' if kind is int else 'a number'}, got {value!r}") from None
    return v


def _floats(value, key):
    return tuple(_num(v.strip(), float, key) for v in value.split(",") if v.strip())


def parse_seeds(items) -> tuple:
    """Seeds from strings like '0,1,2' or '0-7' (inclusive); order kept, duplicates rejected."""
    seeds = []
    for item in items:
        for tok in str(item).split(","):
            tok = tok.strip()
            if not tok:
                continue
            lo, sep, hi = tok.partition("-")
            if sep and lo:
                a, b = _num(lo, int, "seeds"), _num(hi, int, "seeds")
                if b < a:
                    raise ConfigError(f"seeds: empty range {tok!r}")
                seeds.extend(range(a, b + 1))
            else:
                seeds.append(_num(tok, int, "seeds"))
    if not seeds:
        raise ConfigError("seeds: at least one seed is required")
    if len(set(seeds)) != len(seeds):
        raise ConfigError("seeds must be distinct")
    return tuple(seeds)


def _block(cls, block: dict, section: str, extra=()):
    known = {f.name: f for f in fields(cls)}
    unknown = sorted(set(block) - set(known) - set(extra))
    if unknown:
        raise ConfigError(f"[{section}] unknown keys: {', '.join(unknown)}")
    kw = {}
    for k, v in block.items():
        if k in extra:
            continue
        t = known[k].type
        if t == "int":
            kw[k] = _num(v, int, f"{section}.{k}")
        elif t == "float":
            kw[k] = _num(v, float, f"{section}.{k}")
        elif t == "int | None":
            kw[k] = None if v.lower() == "none" else _num(v, int, f"{section}.{k}")
        elif t == "float | None":
            kw[k] = None if v.lower() == "none" else _num(v, float, f"{section}.{k}")
        elif t == "tuple":
            kw[k] = _floats(v, f"{section}.{k}")
        else:
            kw[k] = v
    try:
        return cls(**kw)
    except ValueError as exc:
        raise ConfigError(f"[{section}] {exc}") from None


@dataclass(frozen=True)
class VerifyConfig:
    instances: int = 200
    states_min: int = 2
    states_max: int = 10
    actions_min: int = 2
    actions_max: int = 4
    gammas: tuple = (0.5, 0.9, 0.95)
    mix_min: float = 0.0
    mix_max: float = 1.0
    model_step_min: float = 0.0
    model_step_max: float = 0.2
    t_max: int = 50

    def __post_init__(self):
        if self.instances < 1:
            raise ValueError("instances must be >= 1")
        if not (1 <= self.states_min <= self.states_max and 1 <= self.actions_min <= self.actions_max):
            raise ValueError("size ranges must satisfy 1 <= min <= max")
        if not self.gammas or any(not 0 <= g < 1 for g in self.gammas):
            raise ValueError("gammas must lie in [0, 1)")
        if not (0 <= self.mix_min <= self.mix_max <= 1 and 0 <= self.model_step_min <= self.model_step_max <= 1):
            raise ValueError("mix and model step ranges must lie in [0, 1]")
        if self.t_max < 0:
            raise ValueError("t_max must be >= 0")

    def instance_kw(self):
        return dict(state_range=(self.states_min, self.states_max), action_range=(self.actions_min, self.actions_max),
                    gammas=self.gammas, mix_range=(self.mix_min, self.mix_max),
                    model_step_range=(self.model_step_min, self.model_step_max))


@dataclass(frozen=True)
class PretrainConfig:
    """Soft Q-learning settings; ``None`` fields take per-environment defaults."""

    env: str = "cartpole"
    steps: int | None = None
    alpha: float | None = None
    gamma: float | None = None
    lr: float | None = None
    polyak: float = 0.995
    batch_size: int = 32
    q_init: float | None = None
    eval_every: int = 10_000
    eval_episodes: int = 20
    log_every: int = 1_000

    def __post_init__(self):
        if self.env not in ("cartpole", "tabular"):
            raise ValueError("env must be cartpole or tabular")
        if self.steps is not None and self.steps < 0:
            raise ValueError("steps must be >= 0")
        if self.batch_size < 1 or self.eval_every < 1 or self.eval_episodes < 1 or self.log_every < 0:
            raise ValueError("batch size and evaluation settings must be positive")
        if not 0 <= self.polyak < 1:
            raise ValueError("polyak must lie in [0, 1)")

    def resolved(self, env=None) -> "PretrainConfig":
        env = env or self.env
        if env == "cartpole":
            d = dict(steps=200_000, alpha=0.05, gamma=0.99, lr=0.1)
        else:
            d = dict(steps=30_000, alpha=0.2, gamma=0.9, lr=0.02)
        kw = {k: v for k, v in d.items() if getattr(self, k) is None}
        out = replace(self, env=env, **kw)
        if not (out.alpha > 0 and 0 <= out.gamma < 1 and out.lr > 0):
            raise ConfigError("[pretrain] need alpha > 0, 0 <= gamma < 1 and lr > 0")
        if out.q_init is None:
            # Optimistic start for the balancing task, neutral for tabular MDPs.
            out = replace(out, q_init=1.0 / (1.0 - out.gamma) if env == "cartpole" else 0.0)
        return out


@dataclass(frozen=True)
class TabularSetup:
    pair: str = "random"
    n_states: int = 5
    n_actions: int = 2
    gamma: float = 0.9
    mix: float = 0.3
    horizon: int = 50
    method: str = "rpto"

    def __post_init__(self):
        if self.pair not in ("random", "gridworld"):
            raise ValueError("pair must be random or gridworld")
        if self.n_states < 1 or self.n_actions < 1 or self.horizon < 1:
            raise ValueError("sizes must be positive")
        if not 0 <= self.gamma < 1 or not 0 <= self.mix <= 1:
            raise ValueError("need 0 <= gamma < 1 and 0 <= mix <= 1")
        if self.method not in ("rpto", "rpo", "rto", "sac_warm"):
            raise ValueError("method must be one of rpto, rpo, rto, sac_warm")


@dataclass(frozen=True)
class ExperimentConfig:
    kind: str
    seeds: tuple
    out: str | None = None
    checkpoint: str | None = None
    threshold_fraction: float = 0.9
    reference_episodes: int = 50
    target_pole_length: float = 1.2
    verify: VerifyConfig = field(default_factory=VerifyConfig)
    pretrain: PretrainConfig = field(default_factory=PretrainConfig)
    transfer: TransferConfig = field(default_factory=TransferConfig)
    cartpole: CartPoleParams = field(default_factory=CartPoleParams)
    tabular: TabularSetup = field(default_factory=TabularSetup)

    @property
    def env(self) -> str:
        if self.kind == "tabular-transfer":
            return "tabular"
        if self.kind.startswith("cartpole"):
            return "cartpole"
        return self.pretrain.env

    def checkpoint_path(self, out_dir, seed) -> str:
        pattern = self.checkpoint or os.path.join(out_dir, "checkpoint_seed{seed}.txt")
        return pattern.format(seed=seed)


SECTIONS = ("", "verify", "pretrain", "transfer", "cartpole", "tabular")
TOP_KEYS = ("kind", "seeds", "out", "checkpoint", "threshold_fraction", "reference_episodes")


def build_config(raw: dict, kind: str | None = None) -> ExperimentConfig:
    """Validate a parsed config; ``kind`` (from the subcommand) must agree with the file."""
    unknown_sections = sorted(set(raw) - set(SECTIONS))
    if unknown_sections:
        raise ConfigError(f"unknown sections: {', '.join('[' + s + ']' for s in unknown_sections)}")
    top = raw.get("", {})
    bad = sorted(set(top) - set(TOP_KEYS))
    if bad:
        raise ConfigError(f"unknown top-level keys: {', '.join(bad)}")
    file_kind = top.get("kind")
    if kind is None:
        kind = file_kind
    elif file_kind is not None and file_kind != kind:
        # A transfer config can also drive pretraining for its environment.
        if not (kind in ("transfer", "pretrain") and file_kind in TRANSFER_KINDS):
            raise ConfigError(f"config kind {file_kind!r} does not match command {kind!r}")
        kind = file_kind
    if kind == "transfer":
        raise ConfigError(f"transfer needs kind = one of {', '.join(TRANSFER_KINDS)}")
    if kind not in KINDS:
        raise ConfigError(f"kind must be one of {', '.join(KINDS)}, got {kind!r}")

    cart_block = dict(raw.get("cartpole", {}))
    target_len = _num(cart_block.pop("target_pole_length", "1.2"), float, "cartpole.target_pole_length")
    if target_len <= 0:
        raise ConfigError("cartpole.target_pole_length must be positive")
    try:
        cartpole = CartPoleParams.from_config(cart_block)
    except ValueError as exc:
        raise ConfigError(f"[cartpole] {exc}") from None
    try:
        transfer = TransferConfig.from_config(raw.get("transfer", {}))
    except ValueError as exc:
        raise ConfigError(f"[transfer] {exc}") from None

    cfg = ExperimentConfig(
        kind=kind,
        seeds=parse_seeds([top.get("seeds", "0")]),
        out=top.get("out"),
        checkpoint=top.get("checkpoint"),
        threshold_fraction=_num(top.get("threshold_fraction", "0.9"), float, "threshold_fraction"),
        reference_episodes=_num(top.get("reference_episodes", "50"), int, "reference_episodes"),
        target_pole_length=target_len,
        verify=_block(VerifyConfig, raw.get("verify", {}), "verify"),
        pretrain=_block(PretrainConfig, raw.get("pretrain", {}), "pretrain"),
        transfer=transfer,
        cartpole=cartpole,
        tabular=_block(TabularSetup, raw.get("tabular", {}), "tabular"),
    )
    if cfg.reference_episodes < 1:
        raise ConfigError("reference_episodes must be >= 1")
    if not 0 < cfg.threshold_fraction <= 1:
        raise ConfigError("threshold_fraction must lie in (0, 1]")
    return cfg
