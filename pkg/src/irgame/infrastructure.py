"""Game configuration: infrastructure tree, zones, workflows and game parameters.

Configurations are stored as INI-style text files (schema in the README)::

    [schema]
    version = 1

    [zones]
    0 = shutdown S
    1 = redirect R

    [nodes]
    # id = parent initial_zone workflow
    1 = gw 1 main
    2 = 1 1 main

    [game]
    gamma = 0.9
    ...

    [costs]
    null = 0
    zone.0 = 10
    access_control = 2
"""
from __future__ import annotations

import configparser
import enum
from dataclasses import dataclass, field
from functools import cached_property
from importlib import resources
from pathlib import Path
from typing import Iterable, Mapping

SCHEMA_VERSION = 1
GATEWAY = "gw"


class ConfigError(ValueError):
    """Raised when a configuration file is malformed or violates an invariant."""


class ZoneKind(enum.Enum):
    ORDINARY = "ordinary"
    SHUTDOWN = "shutdown"
    REDIRECT = "redirect"


@dataclass(frozen=True)
class Zone:
    id: int
    kind: ZoneKind
    name: str = ""

    @property
    def active(self) -> bool:
        # a node in the shutdown zone is not functional
        return self.kind is not ZoneKind.SHUTDOWN


@dataclass(frozen=True)
class InfrastructureGraph:
    """Rooted tree over the nodes; the gateway is a sentinel outside ``nodes``."""

    nodes: tuple[int, ...]
    parent: Mapping[int, int | str]
    workflows: Mapping[str, tuple[int, ...]]
    initial_zone: Mapping[int, int]
    gateway: str = GATEWAY

    def __post_init__(self):
        _validate_graph(self)

    @cached_property
    def index(self) -> dict[int, int]:
        return {node: k for k, node in enumerate(self.nodes)}

    @cached_property
    def parent_index(self) -> tuple[int, ...]:
        """Position of each node's parent in ``nodes``; -1 for children of the gateway."""
        return tuple(
            -1 if self.parent[n] == self.gateway else self.index[self.parent[n]]
            for n in self.nodes
        )

    @cached_property
    def topological_order(self) -> tuple[int, ...]:
        """Node positions ordered so every parent precedes its children."""
        depth = {k: len(self.ancestors_of_index(k)) for k in range(len(self.nodes))}
        return tuple(sorted(range(len(self.nodes)), key=lambda k: (depth[k], k)))

    def ancestors_of_index(self, k: int) -> tuple[int, ...]:
        chain = []
        while k != -1:
            chain.append(k)
            k = self.parent_index[k]
        return tuple(chain)

    @cached_property
    def workflow_of(self) -> dict[int, str]:
        return {n: w for w, members in self.workflows.items() for n in members}

    @property
    def workflow_names(self) -> tuple[str, ...]:
        return tuple(self.workflows)


def _validate_graph(g: InfrastructureGraph) -> None:
    nodes = set(g.nodes)
    if len(nodes) != len(g.nodes):
        raise ConfigError("duplicate node id")
    if g.gateway in nodes:
        raise ConfigError("gateway id collides with a node id")
    for n in g.nodes:
        if n not in g.parent:
            raise ConfigError(f"not a tree: node {n} has no parent")
        p = g.parent[n]
        if p != g.gateway and p not in nodes:
            raise ConfigError(f"not a tree: node {n} has unknown parent {p}")
    # every node must reach the gateway without revisiting a node
    for n in g.nodes:
        seen = {n}
        cur = g.parent[n]
        while cur != g.gateway:
            if cur in seen:
                raise ConfigError(f"not a tree: cycle detected through node {n}")
            seen.add(cur)
            cur = g.parent[cur]

    owner: dict[int, str] = {}
    for w, members in g.workflows.items():
        if not members:
            raise ConfigError(f"workflow {w} is empty")
        for n in members:
            if n not in nodes:
                raise ConfigError(f"workflow {w} lists unknown node {n}")
            if n in owner:
                raise ConfigError(f"node {n} in two workflows ({owner[n]}, {w})")
            owner[n] = w
    missing = nodes - set(owner)
    if missing:
        raise ConfigError(f"nodes without a workflow: {sorted(missing)}")
    for w, members in g.workflows.items():
        member_set = set(members)
        for n in members:
            p = g.parent[n]
            if p != g.gateway and p not in member_set:
                raise ConfigError(
                    f"workflow {w} is not a connected subtree: parent {p} of node {n} "
                    "lies outside the workflow"
                )
    for n in g.nodes:
        if n not in g.initial_zone:
            raise ConfigError(f"node {n} has no initial zone")


@dataclass(frozen=True)
class ObservationSpec:
    """Reference to the observation model: synthetic parameters or an empirical CSV."""

    kind: str = "negbin"
    shape: float = 4.0
    means: tuple[float, float, float] = (1.0, 2.0, 6.0)
    path: Path | None = None


@dataclass(frozen=True)
class GameConfig:
    graph: InfrastructureGraph
    zones: tuple[Zone, ...]
    gamma: float = 0.9
    eta: float = 0.4
    utility_scale: float = 1.0
    action_cost: Mapping[str, float] = field(default_factory=dict)
    p_brute: float = 0.3
    p_exploit: float = 0.4
    obs_space_size: int = 1000
    obs_model_spec: ObservationSpec = field(default_factory=ObservationSpec)
    # retained for provenance only, clients are folded into the observation model
    client_arrival_rate: float = 50.0
    client_service_mean: float = 4.0
    source: Path | None = None

    def __post_init__(self):
        if not 0.0 <= self.gamma < 1.0:
            raise ConfigError(f"gamma must lie in [0, 1), got {self.gamma}")
        if self.eta < 0:
            raise ConfigError(f"eta must be nonnegative, got {self.eta}")
        if self.utility_scale <= 0:
            raise ConfigError("utility_scale must be positive")
        for name in ("p_brute", "p_exploit"):
            if not 0.0 <= getattr(self, name) <= 1.0:
                raise ConfigError(f"{name} must be a probability")
        if self.obs_space_size < 1:
            raise ConfigError("obs_space_size must be positive")
        kinds = [z.kind for z in self.zones]
        if kinds.count(ZoneKind.SHUTDOWN) != 1 or kinds.count(ZoneKind.REDIRECT) != 1:
            raise ConfigError("exactly one shutdown zone and one redirect zone are required")
        if [z.id for z in self.zones] != list(range(len(self.zones))):
            raise ConfigError("zone ids must be 0..|Z|-1 in order")
        for n, z in self.graph.initial_zone.items():
            if not 0 <= z < len(self.zones):
                raise ConfigError(f"node {n} starts in undeclared zone {z}")
        if self.action_cost.get("null", 0.0) != 0.0:
            raise ConfigError("the null action must have zero cost")
        for key, value in self.action_cost.items():
            if value < 0:
                raise ConfigError(f"action cost {key} is negative")

    @property
    def n_nodes(self) -> int:
        return len(self.graph.nodes)

    @property
    def n_zones(self) -> int:
        return len(self.zones)

    @property
    def n_defender_actions(self) -> int:
        # null, one move per zone, access control
        return len(self.zones) + 2

    @cached_property
    def zone_active(self) -> tuple[bool, ...]:
        return tuple(z.active for z in self.zones)

    @cached_property
    def cost_vector(self) -> tuple[float, ...]:
        """Cost of each defender action code (see :mod:`irgame.dynamics`)."""
        costs = [0.0]
        costs += [float(self.action_cost.get(f"zone.{z.id}", 0.0)) for z in self.zones]
        costs.append(float(self.action_cost.get("access_control", 0.0)))
        return tuple(costs)

    @cached_property
    def initial_zones(self) -> tuple[int, ...]:
        return tuple(self.graph.initial_zone[n] for n in self.graph.nodes)


def ancestors(graph: InfrastructureGraph, i: int) -> tuple[int, ...]:
    """Return ``i`` followed by its ancestors up to (excluding) the gateway."""
    if i not in graph.index:
        raise KeyError(f"unknown node id {i}")
    return tuple(graph.nodes[k] for k in graph.ancestors_of_index(graph.index[i]))


def cardinalities(
    n_nodes: int, n_zones: int, n_obs: int, n_def_actions: int, n_att_actions: int
) -> tuple[int, int, int, int]:
    """Sizes of the joint state, observation and action spaces (exact integers)."""
    for v in (n_nodes, n_zones, n_obs, n_def_actions, n_att_actions):
        if int(v) < 1:
            raise ValueError("all inputs must be >= 1")
    n = int(n_nodes)
    return (
        (int(n_zones) * 4) ** n,
        int(n_obs) ** n,
        int(n_def_actions) ** n,
        int(n_att_actions) ** n,
    )


def _parse_number(section: str, key: str, raw: str) -> float:
    try:
        return float(raw)
    except ValueError:
        raise ConfigError(f"[{section}] {key}: expected a number, got {raw!r}") from None


def parse_config(text: str, source: Path | None = None) -> GameConfig:
    parser = configparser.ConfigParser(
        interpolation=None, strict=True, inline_comment_prefixes=("#",)
    )
    parser.optionxform = str
    try:
        parser.read_string(text)
    except configparser.DuplicateOptionError as exc:
        if exc.section == "nodes":
            raise ConfigError(
                f"not a tree: node {exc.option} is declared with more than one parent"
            ) from None
        raise ConfigError(f"parse error: {exc}") from None
    except configparser.Error as exc:
        raise ConfigError(f"parse error: {exc}") from None

    for section in ("schema", "zones", "nodes", "game", "costs"):
        if not parser.has_section(section):
            raise ConfigError(f"missing section [{section}]")
    version = parser.get("schema", "version", fallback=None)
    if version is None or int(version) != SCHEMA_VERSION:
        raise ConfigError(f"unsupported schema version {version!r}")

    zones = []
    for key, value in parser.items("zones"):
        parts = value.split()
        if not parts:
            raise ConfigError(f"[zones] {key}: missing kind")
        try:
            kind = ZoneKind(parts[0])
        except ValueError:
            raise ConfigError(f"[zones] {key}: unknown kind {parts[0]!r}") from None
        zones.append(Zone(int(key), kind, " ".join(parts[1:])))
    zones.sort(key=lambda z: z.id)

    nodes: list[int] = []
    parent: dict[int, int | str] = {}
    initial_zone: dict[int, int] = {}
    workflows: dict[str, list[int]] = {}
    for key, value in parser.items("nodes"):
        parts = value.split()
        if len(parts) != 3:
            raise ConfigError(f"[nodes] {key}: expected 'parent initial_zone workflow'")
        try:
            node = int(key)
            p: int | str = GATEWAY if parts[0] == GATEWAY else int(parts[0])
            zone = int(parts[1])
        except ValueError:
            raise ConfigError(f"[nodes] {key}: malformed entry {value!r}") from None
        nodes.append(node)
        parent[node] = p
        initial_zone[node] = zone
        workflows.setdefault(parts[2], []).append(node)

    graph = InfrastructureGraph(
        nodes=tuple(nodes),
        parent=parent,
        workflows={w: tuple(m) for w, m in workflows.items()},
        initial_zone=initial_zone,
    )

    game = dict(parser.items("game"))
    known = {
        "gamma", "eta", "utility_scale", "p_brute", "p_exploit", "obs_space_size",
        "client_arrival_rate", "client_service_mean",
    }
    unknown = set(game) - known
    if unknown:
        raise ConfigError(f"[game] unknown keys {sorted(unknown)}")
    numbers = {k: _parse_number("game", k, v) for k, v in game.items()}
    if "obs_space_size" in numbers:
        numbers["obs_space_size"] = int(numbers["obs_space_size"])

    costs = {k: _parse_number("costs", k, v) for k, v in parser.items("costs")}
    allowed = {"null", "access_control"} | {f"zone.{z.id}" for z in zones}
    if set(costs) - allowed:
        raise ConfigError(f"[costs] unknown keys {sorted(set(costs) - allowed)}")

    obs = ObservationSpec()
    if parser.has_section("observation"):
        sec = dict(parser.items("observation"))
        kind = sec.get("kind", "negbin")
        if kind == "negbin":
            means = tuple(float(x) for x in sec.get("means", "1, 2, 6").split(","))
            if len(means) != 3:
                raise ConfigError("[observation] means needs three values")
            obs = ObservationSpec("negbin", float(sec.get("shape", 4.0)), means)
        elif kind == "empirical":
            path = Path(sec["path"])
            if source is not None and not path.is_absolute():
                path = source.parent / path
            obs = ObservationSpec("empirical", path=path)
        else:
            raise ConfigError(f"[observation] unknown kind {kind!r}")

    return GameConfig(
        graph=graph,
        zones=tuple(zones),
        action_cost=costs,
        obs_model_spec=obs,
        source=source,
        **numbers,
    )


def load_config(path: str | Path) -> GameConfig:
    """Read and validate a configuration file.

    Bare names of bundled fixtures (``tiny2.cfg``, ``target64.cfg``) are resolved
    against the package data when no such file exists on disk.
    """
    path = Path(path)
    if not path.exists():
        bundled = resources.files("irgame") / "data" / path.name
        if path.parent == Path(".") and bundled.is_file():
            path = Path(str(bundled))
        else:
            raise FileNotFoundError(f"config not found: {path}")
    return parse_config(path.read_text(), source=path)


def bundled_config(name: str) -> GameConfig:
    return load_config(Path(str(resources.files("irgame") / "data" / name)))


def workflow_sizes(cfg: GameConfig) -> list[int]:
    return [len(m) for m in cfg.graph.workflows.values()]


def format_nodes(nodes: Iterable[int]) -> str:
    return ",".join(str(n) for n in nodes)
