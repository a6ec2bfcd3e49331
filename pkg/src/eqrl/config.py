"""Run configuration: defaults, `key = value` config files, CLI overrides."""

from __future__ import annotations

from dataclasses import dataclass, field, fields, replace

from .agents import AgentConfig


class ConfigError(ValueError):
    """Malformed run configuration."""


ENVIRONMENTS = ("snake", "gridpacman")
MODELS = ("vanilla", "equivariant")
VARIANTS = ("ddqn", "prioritized", "dueling")

ENV_PLANES = {"snake": 3, "gridpacman": 4}
ENV_GRID_DEFAULT = {"snake": 12, "gridpacman": 15}

# Smallest observation side each conv stack accepts.
MIN_OBS = {
    ("snake", "vanilla"): 15,
    ("snake", "equivariant"): 15,
    ("gridpacman", "vanilla"): 19,
    ("gridpacman", "equivariant"): 15,
}

# Dueling heads blow up at the shared learning rate; use the common lower one.
DUELING_LR = 2.5e-5


@dataclass
class RunConfig:
    env: str = "snake"
    model: str = "equivariant"
    variant: str = "ddqn"
    grid_size: int = 0    # 0 picks the per-environment default
    obs_size: int = 0     # 0 picks the smallest size both models accept
    restrict: bool | None = None  # subgroup restriction, gridpacman equivariant only
    seeds: tuple = (0,)
    episodes: int = 500
    train_freq: int = 4   # environment steps between optimizer updates
    eval_episodes: int = 50
    out: str = "runs/run"
    agent: AgentConfig = field(default_factory=AgentConfig)


def default_obs_size(env: str, grid_size: int) -> int:
    """Smallest side every builder for this environment accepts.

    The margin over the board must be even so zero padding stays centered;
    paired vanilla/equivariant runs then share identical preprocessing.
    """
    size = max(grid_size, *(MIN_OBS[(env, m)] for m in MODELS))
    if (size - grid_size) % 2:
        size += 1
    return size


def parse_config_text(text: str, source: str = "<config>") -> dict:
    """Parse `key = value` lines into a flat string dict.

    Blank lines and everything after '#' are ignored.
    """
    out = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected 'key = value', got {raw.strip()!r}")
        key, val = (part.strip() for part in line.split("=", 1))
        if not key or not val:
            raise ConfigError(f"{source}:{lineno}: empty key or value")
        out[key] = val
    return out


def load_config_file(path) -> dict:
    try:
        with open(path) as fh:
            text = fh.read()
    except OSError as exc:
        raise ConfigError(f"cannot read config file {path}: {exc}") from None
    return parse_config_text(text, str(path))


_BOOLS = {"true": True, "yes": True, "1": True, "false": False, "no": False, "0": False}


def _convert(key: str, val, target_type):
    if target_type is bool:
        if isinstance(val, bool):
            return val
        try:
            return _BOOLS[str(val).strip().lower()]
        except KeyError:
            raise ConfigError(f"{key} expects true/false, got {val!r}") from None
    try:
        return target_type(val)
    except (TypeError, ValueError):
        raise ConfigError(f"{key} expects {target_type.__name__}, got {val!r}") from None


def _convert_seeds(val) -> tuple:
    if isinstance(val, (tuple, list)):
        parts = list(val)
    else:
        parts = [p for p in str(val).replace(",", " ").split() if p]
    seeds = tuple(_convert("seeds", p, int) for p in parts)
    if not seeds:
        raise ConfigError("seeds must list at least one integer")
    return seeds


_RUN_TYPES = {
    "env": str, "model": str, "variant": str, "grid_size": int, "obs_size": int,
    "restrict": bool, "episodes": int, "train_freq": int, "eval_episodes": int,
    "out": str,
}
_AGENT_TYPES = {f.name: type(f.default) for f in fields(AgentConfig)}


def make_config(values: dict) -> RunConfig:
    """Build and validate a RunConfig from a flat mapping.

    Agent hyperparameters use an `agent.` prefix.  The replay flavor is
    driven by `variant`, so `agent.prioritized` is not accepted directly.
    """
    run_kw, agent_kw = {}, {}
    for key, val in values.items():
        if key == "seeds":
            run_kw["seeds"] = _convert_seeds(val)
        elif key in _RUN_TYPES:
            run_kw[key] = _convert(key, val, _RUN_TYPES[key])
        elif key.startswith("agent."):
            name = key[len("agent."):]
            if name == "prioritized":
                raise ConfigError("set 'variant = prioritized' instead of agent.prioritized")
            if name not in _AGENT_TYPES:
                raise ConfigError(f"unknown agent setting {name!r}")
            agent_kw[name] = _convert(key, val, _AGENT_TYPES[name])
        else:
            raise ConfigError(f"unknown config key {key!r}")
    if run_kw.get("variant") == "dueling":
        agent_kw.setdefault("lr", DUELING_LR)
    agent = AgentConfig(**agent_kw)
    return validate_config(RunConfig(agent=agent, **run_kw))


def validate_config(cfg: RunConfig) -> RunConfig:
    """Check invariants and fill in derived defaults; returns the resolved config."""
    if cfg.env not in ENVIRONMENTS:
        raise ConfigError(f"env must be one of {ENVIRONMENTS}, got {cfg.env!r}")
    if cfg.model not in MODELS:
        raise ConfigError(f"model must be one of {MODELS}, got {cfg.model!r}")
    if cfg.variant not in VARIANTS:
        raise ConfigError(f"variant must be one of {VARIANTS}, got {cfg.variant!r}")
    if cfg.episodes < 1:
        raise ConfigError("episodes must be at least 1")
    if cfg.train_freq < 1 or cfg.eval_episodes < 1:
        raise ConfigError("train_freq and eval_episodes must be at least 1")
    if not cfg.seeds:
        raise ConfigError("seeds must list at least one integer")

    grid = cfg.grid_size or ENV_GRID_DEFAULT[cfg.env]
    if cfg.env == "snake" and grid < 5:
        raise ConfigError(f"snake needs grid_size >= 5, got {grid}")
    if cfg.env == "gridpacman" and (grid < 9 or grid % 2 == 0):
        raise ConfigError(f"gridpacman needs an odd grid_size >= 9, got {grid}")

    obs = cfg.obs_size or default_obs_size(cfg.env, grid)
    if obs < grid or (obs - grid) % 2:
        raise ConfigError(f"obs_size {obs} needs an even, non-negative margin over grid {grid}")
    minimum = MIN_OBS[(cfg.env, cfg.model)]
    if obs < minimum:
        raise ConfigError(f"obs_size {obs} is below the minimum {minimum} for {cfg.env}/{cfg.model}")

    if cfg.restrict is not None:
        if cfg.model != "equivariant":
            raise ConfigError("restrict applies only to equivariant models")
        if cfg.env == "snake":
            raise ConfigError("the snake build keeps the full symmetry group; restrict is for gridpacman")

    agent = cfg.agent
    wanted = cfg.variant == "prioritized"
    if agent.prioritized != wanted:
        agent = replace(agent, prioritized=wanted)
    return replace(cfg, grid_size=grid, obs_size=obs, agent=agent)


def builder_manifest(cfg: RunConfig) -> dict:
    """Network-builder arguments implied by a resolved config."""
    prefix = "snake" if cfg.env == "snake" else "pacman"
    man = {
        "builder": f"{prefix}_{cfg.model}",
        "m": ENV_PLANES[cfg.env],
        "d": cfg.obs_size,
        "n_actions": 4,
        "head": "dueling" if cfg.variant == "dueling" else "linear",
    }
    if cfg.env == "gridpacman" and cfg.model == "equivariant":
        man["restrict"] = True if cfg.restrict is None else cfg.restrict
    return man


def _fmt(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    return str(value)


def config_to_text(cfg: RunConfig) -> str:
    """Round-trippable echo of a resolved config."""
    lines = [
        f"env = {cfg.env}",
        f"model = {cfg.model}",
        f"variant = {cfg.variant}",
        f"grid_size = {cfg.grid_size}",
        f"obs_size = {cfg.obs_size}",
        f"seeds = {','.join(str(s) for s in cfg.seeds)}",
        f"episodes = {cfg.episodes}",
        f"train_freq = {cfg.train_freq}",
        f"eval_episodes = {cfg.eval_episodes}",
        f"out = {cfg.out}",
    ]
    if cfg.restrict is not None:
        lines.insert(5, f"restrict = {_fmt(cfg.restrict)}")
    for f in fields(AgentConfig):
        if f.name == "prioritized":
            continue  # derived from variant
        lines.append(f"agent.{f.name} = {_fmt(getattr(cfg.agent, f.name))}")
    return "\n".join(lines) + "\n"
