"""Run configuration: one flat key-value namespace, file-loadable.

The config file format is plain text, one ``key = value`` per line, ``#``
comments allowed. Keys mirror the dataclass fields below; ``lambda`` is
accepted as an alias for ``lam``.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass


class ConfigError(ValueError):
    pass


@dataclass
class RunConfig:
    # model dimensions
    img: int = 64
    patch: int = 8
    dim: int = 64
    heads: int = 4
    sem_blocks: int = 2
    geo_enc_blocks: int = 2
    geo_dec_blocks: int = 2
    policy_blocks: int = 2
    max_instr_len: int = 64
    point_hidden: int = 128

    # memory capacities (global defaults; per-module overrides, -1 = inherit)
    n_init: int = 8
    n_slide: int = 48
    n_init_sem: int = -1
    n_slide_sem: int = -1
    n_init_geo: int = -1
    n_slide_geo: int = -1
    n_init_policy: int = -1
    n_slide_policy: int = -1

    # fusion
    lam: float = 0.2
    fusion: str = "add"  # add | concat | cross_attn

    # architecture toggles (ablations)
    semantic_memory: bool = True
    spatial_encoder: str = "geometric"  # geometric | semantic_copy | none

    # simulator
    cell: float = 0.05
    agent_radius: float = 0.1
    fov_deg: float = 90.0
    success_radius: float = 0.5
    max_steps: int = 200
    cam_height: float = 0.8
    wall_height: float = 1.6
    landmark_height: float = 0.9

    # episode suites
    easy_bounds: float = 6.0
    easy_rooms_max: int = 4
    easy_max_len: int = 40
    memory_bounds: float = 9.0
    memory_rooms_max: int = 6
    memory_min_len: int = 80

    # training
    lr_policy: float = 2e-5
    lr_projection: float = 1e-5
    lr_encoder: float = 1e-4
    epochs: int = 1
    batch_episodes: int = 4
    bc_easy: int = 2000
    bc_memory: int = 1000
    dagger_rounds: int = 2
    dagger_episodes: int = 200
    dagger_epochs: int = 1
    dagger_expert_mix: float = 0.0
    pretrain_steps: int = 2000
    pretrain_lr: float = 1e-3
    pretrain_clip_len: int = 4
    eval_episodes: int = 100

    def cap(self, module: str) -> tuple[int, int]:
        ni = getattr(self, f"n_init_{module}")
        ns = getattr(self, f"n_slide_{module}")
        return (self.n_init if ni < 0 else ni, self.n_slide if ns < 0 else ns)

    def validate(self):
        if self.img % (2 * self.patch):
            raise ConfigError("img must be divisible by 2*patch")
        if self.dim % self.heads:
            raise ConfigError("dim must be divisible by heads")
        if self.lam < 0:
            raise ConfigError("lambda must be >= 0")
        if self.fusion not in ("add", "concat", "cross_attn"):
            raise ConfigError(f"unknown fusion strategy: {self.fusion}")
        if self.spatial_encoder not in ("geometric", "semantic_copy", "none"):
            raise ConfigError(f"unknown spatial encoder: {self.spatial_encoder}")
        if self.lr_policy <= 0 or self.lr_projection <= 0:
            raise ConfigError("learning rates must be positive")
        for m in ("sem", "geo", "policy"):
            ni, ns = self.cap(m)
            if ni < 0 or ns < 1:
                raise ConfigError(f"{m} memory needs n_init >= 0 and n_slide >= 1")
        return self


_FIELDS = {f.name: f for f in dataclasses.fields(RunConfig)}
_ALIASES = {"lambda": "lam"}


def _coerce(name: str, raw: str):
    kind = _FIELDS[name].type
    raw = raw.strip()
    if kind == "bool" or isinstance(_FIELDS[name].default, bool):
        if raw.lower() in ("1", "true", "yes", "on"):
            return True
        if raw.lower() in ("0", "false", "no", "off"):
            return False
        raise ConfigError(f"bad boolean for {name}: {raw!r}")
    if isinstance(_FIELDS[name].default, int) and not isinstance(_FIELDS[name].default, bool):
        try:
            return int(raw)
        except ValueError as e:
            raise ConfigError(f"bad integer for {name}: {raw!r}") from e
    if isinstance(_FIELDS[name].default, float):
        try:
            return float(raw)
        except ValueError as e:
            raise ConfigError(f"bad float for {name}: {raw!r}") from e
    return raw


def parse_config_text(text: str, base: RunConfig | None = None) -> RunConfig:
    cfg = dataclasses.replace(base) if base else RunConfig()
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value'")
        key, _, raw = line.partition("=")
        key = key.strip()
        key = _ALIASES.get(key, key)
        if key not in _FIELDS:
            raise ConfigError(f"line {lineno}: unknown config key {key!r}")
        setattr(cfg, key, _coerce(key, raw))
    return cfg.validate()


def load_config(path: str, base: RunConfig | None = None) -> RunConfig:
    try:
        with open(path) as fh:
            text = fh.read()
    except OSError as e:
        raise ConfigError(f"cannot read config file {path}: {e}") from e
    return parse_config_text(text, base)


def format_config(cfg: RunConfig) -> str:
    lines = []
    for f in dataclasses.fields(RunConfig):
        key = "lambda" if f.name == "lam" else f.name
        val = getattr(cfg, f.name)
        if isinstance(val, bool):
            val = "true" if val else "false"
        lines.append(f"{key} = {val}")
    return "\n".join(lines)
