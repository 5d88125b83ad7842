"""Scenario files: schema, presets, overrides and diagnostics.

A scenario is a TOML document with nested tables::

    schema_version = 1
    preset = "atlas_bw"     # optional base
    scale = 0.025           # used with preset

    [cluster]
    nodes = 500
    [overlay]
    mode = "glidein"
    [data.credential]
    auto_renew = false
    [htc.runtime_h]
    dist = "uniform"
    lo = 1.0
    hi = 3.0

Keys left out keep the preset (or built-in) defaults.
"""

from __future__ import annotations

import copy
import dataclasses
import hashlib
import json
import math
import typing
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Optional

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

from .cluster import Placement
from .overlay import OsgPolicy
from .topology import Torus, torus_dims
from .workload import Dist, HpcBackgroundSpec, HtcSpec, InvalidSpec

SCHEMA_VERSION = 1
PRESETS = ("ligo", "atlas_bw", "titan_backfill")


class UnknownPreset(KeyError):
    pass


class ScenarioError(ValueError):
    """Invalid scenario; ``diagnostics`` lists every problem with its key path."""

    def __init__(self, diagnostics: list[str]):
        super().__init__("; ".join(diagnostics))
        self.diagnostics = diagnostics


@dataclass
class ClusterConfig:
    nodes: int = 64
    cores_per_node: int = 32
    memory_gb: float = 64.0
    torus: Optional[list] = None  # [X, Y, Z]; derived from nodes when absent
    placement: str = "transparent"
    compactness_limit: float = 2.0
    scheduler_period_s: float = 60.0
    backfill: bool = True


@dataclass
class OverlayConfig:
    enabled: bool = True
    mode: str = "glidein"
    target_pilots: int = 4
    pilot_nodes: int = 1
    pilot_walltime_h: float = 12.0
    pilot_priority: int = -100
    pilot_placement: str = "transparent"
    checkpoint_interval_min: float = 30.0  # 0 keeps all progress, inf never checkpoints
    osg_policy: bool = True
    startup_latency_s: float = 60.0
    broker_period_s: float = 60.0
    max_wrapper_walltime_h: float = 12.0
    wrapper_priority: int = -100
    wrapper_slack_min: float = 10.0


@dataclass
class CredentialConfig:
    lifetime_days: float = 11.0
    renewal_days: float = 7.0
    auto_renew: bool = True


@dataclass
class DataConfig:
    dtn_count: int = 12
    per_dtn_gbps: float = 10.0
    stream_cap_gbps: float = 10.0
    fs_bw_gbps: float = 100.0
    cache_gb: float = 0.0
    prepopulate_cache: bool = False
    credential: CredentialConfig = field(default_factory=CredentialConfig)


@dataclass
class Scenario:
    schema_version: int = SCHEMA_VERSION
    name: str = "custom"
    seed: int = 0
    duration_h: float = 48.0
    warmup_h: float = 2.0
    sample_period_s: float = 300.0
    stop_when_drained: bool = False
    cluster: ClusterConfig = field(default_factory=ClusterConfig)
    overlay: OverlayConfig = field(default_factory=OverlayConfig)
    data: DataConfig = field(default_factory=DataConfig)
    htc: HtcSpec = field(default_factory=HtcSpec)
    hpc: HpcBackgroundSpec = field(default_factory=HpcBackgroundSpec)

    def to_dict(self) -> dict:
        return _to_dict(self)

    def digest(self) -> str:
        """Hash of every setting except the seed."""
        d = self.to_dict()
        d.pop("seed", None)
        blob = json.dumps(d, sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()[:16]

    def osg(self) -> Optional[OsgPolicy]:
        return OsgPolicy() if self.overlay.osg_policy else None


# -- dict conversion -----------------------------------------------------

def _to_dict(obj) -> Any:
    if isinstance(obj, Dist):
        return obj.to_dict()
    if dataclasses.is_dataclass(obj):
        out = {}
        for f in dataclasses.fields(obj):
            v = getattr(obj, f.name)
            if v is not None:
                out[f.name] = _to_dict(v)
        return out
    if isinstance(obj, (list, tuple)):
        return [_to_dict(v) for v in obj]
    return obj


def _coerce(value, hint, path: str, diags: list[str]):
    origin = typing.get_origin(hint)
    if origin is typing.Union:  # Optional[X]
        inner = [a for a in typing.get_args(hint) if a is not type(None)][0]
        return _coerce(value, inner, path, diags)
    if hint is Dist:
        try:
            d = Dist.from_value(value)
            d.check()
            return d
        except InvalidSpec as exc:
            diags.append(f"{path}: {exc}")
            return None
    if dataclasses.is_dataclass(hint):
        if not isinstance(value, dict):
            diags.append(f"{path}: expected a table")
            return None
        obj = hint()
        _apply(obj, value, path, diags)
        return obj
    if hint is bool:
        if not isinstance(value, bool):
            diags.append(f"{path}: expected true or false, got {value!r}")
            return None
        return value
    if hint is int:
        if isinstance(value, bool) or not isinstance(value, (int, float)) or value != int(value):
            diags.append(f"{path}: expected an integer, got {value!r}")
            return None
        return int(value)
    if hint is float:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            diags.append(f"{path}: expected a number, got {value!r}")
            return None
        return float(value)
    if hint is str:
        if not isinstance(value, str):
            diags.append(f"{path}: expected a string, got {value!r}")
            return None
        return value
    if hint is list or origin is list:
        if not isinstance(value, list) or not all(isinstance(v, int) and not isinstance(v, bool) for v in value):
            diags.append(f"{path}: expected a list of integers, got {value!r}")
            return None
        return list(value)
    return value


def _apply(obj, table: dict, prefix: str, diags: list[str]) -> None:
    hints = typing.get_type_hints(type(obj))
    names = {f.name for f in dataclasses.fields(obj)}
    for key, value in table.items():
        path = f"{prefix}.{key}" if prefix else key
        if key not in names:
            diags.append(f"{path}: unknown key")
            continue
        v = _coerce(value, hints[key], path, diags)
        if v is not None:
            setattr(obj, key, v)


def _merge(base: dict, extra: dict) -> dict:
    out = copy.deepcopy(base)
    for k, v in extra.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict) and "dist" not in v:
            out[k] = _merge(out[k], v)
        else:
            out[k] = copy.deepcopy(v)
    return out


def parse_override(text: str) -> tuple[list[str], Any]:
    """``"cluster.nodes=128"`` to ``(["cluster", "nodes"], 128)``.

    Values are read as TOML; anything TOML rejects is kept as a string.
    """
    if "=" not in text:
        raise ScenarioError([f"--set {text!r}: expected key=value"])
    key, raw = text.split("=", 1)
    key, raw = key.strip(), raw.strip()
    if not key:
        raise ScenarioError([f"--set {text!r}: empty key"])
    try:
        value = tomllib.loads(f"v = {raw}")["v"]
    except tomllib.TOMLDecodeError:
        value = raw
    return key.split("."), value


def _set_path(d: dict, path: list[str], value) -> None:
    for part in path[:-1]:
        nxt = d.get(part)
        if not isinstance(nxt, dict):
            nxt = {}
            d[part] = nxt
        d = nxt
    d[path[-1]] = value


def from_dict(data: dict, overrides: Optional[list[str]] = None, preset_name: Optional[str] = None,
              scale: Optional[float] = None) -> Scenario:
    """Build and check a scenario; raises :class:`ScenarioError` with all diagnostics."""
    data = copy.deepcopy(data)
    for item in overrides or []:
        path, value = parse_override(item)
        _set_path(data, path, value)
    diags: list[str] = []
    name = preset_name if preset_name is not None else data.pop("preset", None)
    data.pop("preset", None)
    sc = data.pop("scale", None)
    if scale is not None:
        sc = scale
    if sc is not None and (isinstance(sc, bool) or not isinstance(sc, (int, float)) or sc <= 0):
        raise ScenarioError([f"scale: expected a positive number, got {sc!r}"])
    if name is not None:
        try:
            base = preset(name, 1.0 if sc is None else float(sc)).to_dict()
        except UnknownPreset as exc:
            raise ScenarioError([f"preset: {exc.args[0]}"]) from None
    elif sc is not None:
        raise ScenarioError(["scale: only meaningful together with preset"])
    else:
        base = Scenario().to_dict()
    merged = _merge(base, data)
    scenario = Scenario()
    _apply(scenario, merged, "", diags)
    # rejected keys keep their defaults, so the semantic checks still apply
    diags += check(scenario)
    if diags:
        raise ScenarioError(diags)
    return scenario


def load(path: str | Path, overrides: Optional[list[str]] = None, preset_name: Optional[str] = None,
         scale: Optional[float] = None) -> Scenario:
    """Read a scenario file.  ``OSError`` propagates; bad content raises ScenarioError."""
    text = Path(path).read_text()
    try:
        data = tomllib.loads(text)
    except tomllib.TOMLDecodeError as exc:
        raise ScenarioError([f"{path}: {exc}"]) from None
    return from_dict(data, overrides, preset_name, scale)


def dumps(scenario: Scenario) -> str:
    """Render as TOML (enough of the format for our own schema)."""
    d = scenario.to_dict()
    lines = []
    tables = []
    for k, v in d.items():
        if isinstance(v, dict):
            tables.append((k, v))
        else:
            lines.append(f"{k} = {_toml_value(v)}")

    def emit(prefix: str, table: dict) -> None:
        sub = []
        lines.append("")
        lines.append(f"[{prefix}]")
        for k, v in table.items():
            if isinstance(v, dict):
                sub.append((f"{prefix}.{k}", v))
            else:
                lines.append(f"{k} = {_toml_value(v)}")
        for p, t in sub:
            emit(p, t)

    for k, v in tables:
        emit(k, v)
    return "\n".join(lines) + "\n"


def _toml_value(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, float):
        if math.isinf(v):
            return "inf" if v > 0 else "-inf"
        return repr(v)
    if isinstance(v, str):
        return json.dumps(v)
    if isinstance(v, list):
        return "[" + ", ".join(_toml_value(x) for x in v) + "]"
    return str(v)


# -- semantic checks -------------------------------------------------------

def check(s: Scenario) -> list[str]:
    """Every consistency problem, each prefixed by the offending key path(s)."""
    d: list[str] = []
    c, o, data, cred = s.cluster, s.overlay, s.data, s.data.credential

    if s.schema_version != SCHEMA_VERSION:
        d.append(f"schema_version: unsupported version {s.schema_version} (expected {SCHEMA_VERSION})")
    if s.duration_h <= 0:
        d.append("duration_h: must be positive")
    if s.warmup_h < 0 or s.warmup_h >= max(s.duration_h, 0):
        d.append(f"warmup_h: must be in [0, duration_h) (warmup_h={s.warmup_h}, duration_h={s.duration_h})")
    if s.sample_period_s <= 0:
        d.append("sample_period_s: must be positive")
    if s.seed < 0:
        d.append("seed: must be nonnegative")

    if c.nodes <= 0:
        d.append("cluster.nodes: must be positive")
    if c.cores_per_node <= 0:
        d.append("cluster.cores_per_node: must be positive")
    if c.memory_gb <= 0:
        d.append("cluster.memory_gb: must be positive")
    if c.torus is not None:
        if len(c.torus) != 3 or any(x <= 0 for x in c.torus):
            d.append(f"cluster.torus: expected three positive extents, got {c.torus}")
        elif math.prod(c.torus) != c.nodes:
            d.append(f"cluster.torus: {c.torus} holds {math.prod(c.torus)} nodes but cluster.nodes is {c.nodes}")
    if c.placement not in {p.value for p in Placement}:
        d.append(f"cluster.placement: unknown placement {c.placement!r}")
    if c.compactness_limit < 1:
        d.append("cluster.compactness_limit: must be >= 1")
    if c.scheduler_period_s <= 0:
        d.append("cluster.scheduler_period_s: must be positive")

    if o.mode not in ("glidein", "backfill_broker"):
        d.append(f"overlay.mode: unknown mode {o.mode!r}")
    if o.target_pilots < 0:
        d.append("overlay.target_pilots: must be nonnegative")
    if o.pilot_nodes <= 0:
        d.append("overlay.pilot_nodes: must be positive")
    elif c.nodes > 0 and o.pilot_nodes > c.nodes:
        d.append(f"overlay.pilot_nodes: {o.pilot_nodes} exceeds cluster.nodes {c.nodes}")
    if o.pilot_walltime_h <= 0:
        d.append("overlay.pilot_walltime_h: must be positive")
    if o.pilot_placement not in {p.value for p in Placement}:
        d.append(f"overlay.pilot_placement: unknown placement {o.pilot_placement!r}")
    if math.isnan(o.checkpoint_interval_min) or o.checkpoint_interval_min < 0:
        d.append("overlay.checkpoint_interval_min: must be >= 0 (inf disables checkpoints)")
    for key in ("startup_latency_s", "wrapper_slack_min"):
        if getattr(o, key) < 0:
            d.append(f"overlay.{key}: must be nonnegative")
    for key in ("broker_period_s", "max_wrapper_walltime_h"):
        if getattr(o, key) <= 0:
            d.append(f"overlay.{key}: must be positive")

    for key in ("dtn_count", "per_dtn_gbps", "stream_cap_gbps", "fs_bw_gbps"):
        if getattr(data, key) <= 0:
            d.append(f"data.{key}: must be positive")
    if data.cache_gb < 0:
        d.append("data.cache_gb: must be nonnegative")
    if data.prepopulate_cache and data.cache_gb <= 0:
        d.append("data.prepopulate_cache: needs data.cache_gb > 0")
    if cred.lifetime_days <= 0:
        d.append("data.credential.lifetime_days: must be positive")
    if cred.renewal_days <= 0:
        d.append("data.credential.renewal_days: must be positive")

    try:
        s.htc.check(s.osg())
    except InvalidSpec as exc:
        d.append(f"htc: {exc}")
    if s.htc.memory_gb > c.memory_gb:
        d.append(f"htc.memory_gb: {s.htc.memory_gb} exceeds cluster.memory_gb {c.memory_gb}")
    try:
        s.hpc.check()
    except InvalidSpec as exc:
        d.append(f"hpc: {exc}")
    if not d and c.placement == Placement.TOPOLOGY_AWARE.value:
        dims = tuple(c.torus) if c.torus else torus_dims(c.nodes)
        torus = Torus(dims)
        for size in s.hpc.sizes(c.nodes):
            if not torus.fits_when_empty(size, c.compactness_limit):
                d.append(f"hpc.nodes_max_fraction: {size}-node jobs never fit cluster.torus {list(dims)} "
                         f"within cluster.compactness_limit {c.compactness_limit}")
                break
    if not d and o.enabled and o.pilot_placement == Placement.TOPOLOGY_AWARE.value:
        dims = tuple(c.torus) if c.torus else torus_dims(c.nodes)
        if not Torus(dims).fits_when_empty(o.pilot_nodes, c.compactness_limit):
            d.append(f"overlay.pilot_nodes: {o.pilot_nodes}-node pilots never fit cluster.torus {list(dims)} "
                     f"within cluster.compactness_limit {c.compactness_limit}")
    return d


# -- presets ---------------------------------------------------------------

def _nodes(base: int, scale: float, minimum: int = 4) -> int:
    return max(minimum, int(round(base * scale)))


def preset(name: str, scale: float = 1.0) -> Scenario:
    """Named starting points.  ``scale`` multiplies node and task counts."""
    if scale <= 0:
        raise ValueError("scale must be positive")
    if name == "ligo":
        nodes = _nodes(20_000, scale)
        hpc = HpcBackgroundSpec(nodes_max_fraction=0.125)
        # Poisson load of about 70% of the machine
        mean_nodes = sum(hpc.sizes(nodes)) / len(hpc.sizes(nodes))
        hpc.arrival_per_h = round(0.7 * nodes / (mean_nodes * hpc.walltime_h.mean()), 6)
        return Scenario(
            name="ligo", duration_h=72.0, warmup_h=2.0,
            cluster=ClusterConfig(nodes=nodes, placement="topology_aware"),
            overlay=OverlayConfig(mode="glidein", target_pilots=max(1, nodes // 4), pilot_walltime_h=24.0,
                                  pilot_priority=0),
            data=DataConfig(dtn_count=12, per_dtn_gbps=10.0, stream_cap_gbps=10.0, cache_gb=100.0),
            htc=HtcSpec(n_tasks=max(1, int(round(100_000 * scale))), input_gb=Dist.constant(0.4),
                        output_gb=Dist.constant(0.01), n_datasets=0),
            hpc=hpc)
    if name == "atlas_bw":
        nodes = _nodes(20_000, scale)
        return Scenario(
            name="atlas_bw", duration_h=72.0, warmup_h=2.0,
            cluster=ClusterConfig(nodes=nodes, placement="topology_aware", compactness_limit=1.1),
            overlay=OverlayConfig(mode="glidein", target_pilots=max(1, nodes // 5), pilot_walltime_h=2.0,
                                  pilot_priority=-100, pilot_placement="transparent"),
            data=DataConfig(dtn_count=4, per_dtn_gbps=10.0, stream_cap_gbps=10.0, cache_gb=500.0),
            htc=HtcSpec(n_tasks=max(1, int(round(4_000_000 * scale))), runtime_h=Dist.uniform(0.25, 1.0),
                        input_gb=Dist.constant(0.5), output_gb=Dist.constant(0.1), n_datasets=100),
            hpc=HpcBackgroundSpec(target_backlog_nodes=4 * nodes, nodes_max_fraction=0.25, size_grid="any",
                                  size_exponent=0.3))
    if name == "titan_backfill":
        nodes = _nodes(18_688, scale)
        return Scenario(
            name="titan_backfill", duration_h=24.0, warmup_h=2.0,
            cluster=ClusterConfig(nodes=nodes, cores_per_node=16, memory_gb=32.0, placement="transparent"),
            overlay=OverlayConfig(mode="backfill_broker", startup_latency_s=0.0, max_wrapper_walltime_h=12.0),
            data=DataConfig(dtn_count=8, per_dtn_gbps=10.0, stream_cap_gbps=10.0, cache_gb=500.0),
            htc=HtcSpec(n_tasks=max(1, int(round(200_000 * scale))), runtime_h=Dist.uniform(0.5, 2.0),
                        input_gb=Dist.constant(0.2), output_gb=Dist.constant(0.05), n_datasets=200),
            hpc=HpcBackgroundSpec(target_backlog_nodes=2 * nodes, nodes_max_fraction=0.25))
    raise UnknownPreset(f"unknown preset {name!r}; choose one of {', '.join(PRESETS)}")
