"""Experiment configuration: nested dataclasses loaded from YAML.

Every key is optional; missing keys take the defaults below.  Errors are
reported as ``ConfigError`` with ``file:line:`` prefixes taken from the YAML
node positions.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import math
import re
import types
import typing
from dataclasses import dataclass, field
from pathlib import Path

import yaml


class ConfigError(ValueError):
    """Malformed or invalid configuration."""


def _triple(name, x, positive=True):
    if isinstance(x, (int, float)):
        x = (float(x),) * 3
    x = tuple(float(v) for v in x)
    if len(x) != 3:
        raise ValueError(f"{name} needs one value or three (one per joint)")
    if positive and not all(v > 0 for v in x):
        raise ValueError(f"{name} must be positive")
    return x


def _range(name, r, lo=-math.inf):
    r = tuple(float(v) for v in r)
    if len(r) != 2 or not (lo <= r[0] <= r[1]):
        raise ValueError(f"{name} must be [min, max] with {lo} <= min <= max")
    return r


@dataclass(frozen=True)
class ArmConfig:
    """Surrogate arm: base yaw, elevation of the shoulder-to-hand line, elbow bend."""

    base_offset: float = 0.8  # distance from the shoulder axis to the plane (m)
    shoulder_height: float = 1.15
    link_length: float = 0.8
    v_max: float | tuple[float, ...] = 4.0
    a_max: float | tuple[float, ...] = 30.0
    j_max: float | tuple[float, ...] = 300.0
    q_min: tuple[float, ...] = (-1.6, -1.4, 0.0)
    q_max: tuple[float, ...] = (1.6, 1.4, 2.9)

    def __post_init__(self):
        for name in ("v_max", "a_max", "j_max"):
            object.__setattr__(self, name, _triple(name, getattr(self, name)))
        object.__setattr__(self, "q_min", _triple("q_min", self.q_min, positive=False))
        object.__setattr__(self, "q_max", _triple("q_max", self.q_max, positive=False))
        if not all(a < b for a, b in zip(self.q_min, self.q_max)):
            raise ValueError("q_min must be below q_max")
        if not (self.base_offset > 0 and self.link_length > 0):
            raise ValueError("base_offset and link_length must be positive")


@dataclass(frozen=True)
class GoalGridConfig:
    y: tuple[float, ...] = (-0.75, 0.0, 0.75)
    z: tuple[float, ...] = (0.4, 1.15, 1.9)
    half_extents: tuple[float, ...] = (0.45, 0.45)
    home: tuple[float, ...] = (0.0, 1.15)

    def __post_init__(self):
        if not self.y or not self.z:
            raise ValueError("goal grid needs at least one y and one z value")
        if len(self.half_extents) != 2 or min(self.half_extents) <= 0:
            raise ValueError("half_extents must be two positive numbers")
        if len(self.home) != 2:
            raise ValueError("home must be a (y, z) pair")


@dataclass(frozen=True)
class KeepOutConfig:
    lo: tuple[float, ...]
    hi: tuple[float, ...]


@dataclass(frozen=True)
class TreeParams:
    eps: float = 0.05
    d_max: int = 2
    grid: tuple[int, ...] = (3, 3, 3)
    kappa_v: float = 0.6
    goal_connect_radius: float | None = None
    keep_out: tuple[KeepOutConfig, ...] = ()

    def __post_init__(self):
        if not self.eps > 0 or self.d_max < 1:
            raise ValueError("tree needs eps > 0 and d_max >= 1")
        if len(self.grid) != 3 or min(self.grid) < 1:
            raise ValueError("grid needs three positive counts")


@dataclass(frozen=True)
class FilterParams:
    q: float = 0.1
    sigma0: float = 0.1
    alpha: float = 0.95
    window: int = 20
    n_min: int = 20
    adaptive: bool = True

    def __post_init__(self):
        if not self.q >= 0:
            raise ValueError("q must be non-negative")
        if not self.sigma0 > 0:
            raise ValueError("sigma0 must be positive")


@dataclass(frozen=True)
class NoiseConfig:
    sigma_near: float = 0.01
    sigma_far: float = 0.10
    near: float = 1.0
    far: float = 9.0
    scale: tuple[float, ...] = (0.5, 2.0)
    axis_factor: tuple[float, ...] = (1.0, 1.0, 1.0)
    outlier_rate: float = 0.0
    outlier_magnitude: float = 1.0

    def __post_init__(self):
        object.__setattr__(self, "scale", _range("noise.scale", self.scale, 0.0))
        object.__setattr__(self, "axis_factor", _triple("axis_factor", self.axis_factor, positive=False))
        if min(self.sigma_near, self.sigma_far) < 0 or not self.far > self.near:
            raise ValueError("noise needs non-negative sigmas and far > near")
        if not 0.0 <= self.outlier_rate <= 1.0:
            raise ValueError("outlier_rate must lie in [0, 1]")


@dataclass(frozen=True)
class ThrowConfig:
    distance: tuple[float, ...] = (6.0, 8.0)
    flight_time: tuple[float, ...] = (0.4, 0.8)
    launch_y: tuple[float, ...] = (-1.0, 1.0)
    launch_z: tuple[float, ...] = (0.8, 1.8)
    camera_x: float = 0.8
    rate: float = 50.0

    def __post_init__(self):
        for name in ("distance", "flight_time", "launch_y", "launch_z"):
            object.__setattr__(self, name, _range(name, getattr(self, name)))
        if not self.distance[0] > 0 or not self.flight_time[0] > 0 or not self.rate > 0:
            raise ValueError("distance, flight_time and rate must be positive")


@dataclass(frozen=True)
class SimParams:
    tick: float = 0.01
    plane_x: float = 0.0
    g: float = -9.81
    latency_coupled: bool = False
    workers: int = 1
    save_streams: bool = False
    noise_bins: int = 6
    tree_path: str | None = None

    def __post_init__(self):
        if not self.tick > 0 or self.workers < 1 or self.noise_bins < 1:
            raise ValueError("sim needs tick > 0, workers >= 1, noise_bins >= 1")


@dataclass(frozen=True)
class ExperimentConfig:
    seed: int = 0
    trials: int = 100
    policy: str = "both"
    arm: ArmConfig = field(default_factory=ArmConfig)
    goals: GoalGridConfig = field(default_factory=GoalGridConfig)
    tree: TreeParams = field(default_factory=TreeParams)
    filter: FilterParams = field(default_factory=FilterParams)
    noise: NoiseConfig = field(default_factory=NoiseConfig)
    throws: ThrowConfig = field(default_factory=ThrowConfig)
    sim: SimParams = field(default_factory=SimParams)

    def __post_init__(self):
        if self.trials < 0:
            raise ValueError("trials must be non-negative")
        if self.policy not in ("qmdp", "naive", "both"):
            raise ValueError("policy must be qmdp, naive or both")

    @property
    def policies(self) -> tuple[str, ...]:
        return ("qmdp", "naive") if self.policy == "both" else (self.policy,)

    def replace(self, **kw) -> "ExperimentConfig":
        return dataclasses.replace(self, **kw)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def tree_key(self) -> str:
        """Hash of everything the action tree depends on."""
        d = {"arm": dataclasses.asdict(self.arm), "goals": dataclasses.asdict(self.goals),
             "tree": dataclasses.asdict(self.tree)}
        return hashlib.sha256(json.dumps(d, sort_keys=True).encode()).hexdigest()[:16]


# -- loading -----------------------------------------------------------------

def _where(source, node) -> str:
    return f"{source}:{node.start_mark.line + 1}"


def _coerce(tp, node, source, loader):
    origin = typing.get_origin(tp)
    if origin in (typing.Union, types.UnionType):
        args = typing.get_args(tp)
        if type(None) in args and isinstance(node, yaml.ScalarNode) and node.tag.endswith(":null"):
            return None
        errors = []
        for a in args:
            if a is type(None):
                continue
            try:
                return _coerce(a, node, source, loader)
            except ConfigError as exc:
                errors.append(str(exc))
        raise ConfigError(errors[0])
    if dataclasses.is_dataclass(tp):
        if not isinstance(node, yaml.MappingNode):
            raise ConfigError(f"{_where(source, node)}: expected a mapping for {tp.__name__}")
        hints = typing.get_type_hints(tp)
        kwargs = {}
        for knode, vnode in node.value:
            key = loader.construct_object(knode)
            if key not in hints:
                raise ConfigError(f"{_where(source, knode)}: unknown key '{key}'")
            kwargs[key] = _coerce(hints[key], vnode, source, loader)
        try:
            return tp(**kwargs)
        except (TypeError, ValueError) as exc:
            at = node
            for knode, _ in node.value:  # point at the key the message names, if any
                if re.search(rf"\b{re.escape(str(loader.construct_object(knode)))}\b", str(exc)):
                    at = knode
                    break
            raise ConfigError(f"{_where(source, at)}: {exc}") from None
    if origin is tuple:
        if not isinstance(node, yaml.SequenceNode):
            raise ConfigError(f"{_where(source, node)}: expected a list")
        (inner, *_) = typing.get_args(tp)
        return tuple(_coerce(inner, n, source, loader) for n in node.value)
    if not isinstance(node, yaml.ScalarNode):
        raise ConfigError(f"{_where(source, node)}: expected a {tp.__name__}")
    value = loader.construct_object(node)
    if tp is float and isinstance(value, (int, float)) and not isinstance(value, bool):
        return float(value)
    if tp is int and isinstance(value, int) and not isinstance(value, bool):
        return value
    if tp is bool and isinstance(value, bool):
        return value
    if tp is str and isinstance(value, str):
        return value
    raise ConfigError(f"{_where(source, node)}: expected {tp.__name__}, got {value!r}")


def config_from_text(text: str, source: str = "<config>") -> ExperimentConfig:
    loader = yaml.SafeLoader(text)
    try:
        node = loader.get_single_node()
    except yaml.MarkedYAMLError as exc:
        mark = exc.problem_mark or exc.context_mark
        line = mark.line + 1 if mark else 0
        raise ConfigError(f"{source}:{line}: {exc.problem or exc}") from None
    except yaml.YAMLError as exc:
        raise ConfigError(f"{source}: {exc}") from None
    finally:
        loader.dispose()
    if node is None:
        return ExperimentConfig()
    return _coerce(ExperimentConfig, node, source, loader)


def load_config(path) -> ExperimentConfig:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigError(f"{path}: {exc.strerror}") from None
    return config_from_text(text, str(path))


def dump_config(cfg: ExperimentConfig) -> str:
    def plain(x):
        if isinstance(x, dict):
            return {k: plain(v) for k, v in x.items()}
        if isinstance(x, (list, tuple)):
            return [plain(v) for v in x]
        return x

    return yaml.safe_dump(plain(cfg.to_dict()), sort_keys=False)
