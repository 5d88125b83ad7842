import math
from pathlib import Path

import pytest

from htcsim.scenario import (PRESETS, Scenario, ScenarioError, dumps, from_dict, load, parse_override, preset,
                             tomllib)
from htcsim.workload import Dist

SCENARIOS = sorted((Path(__file__).parent.parent / "scenarios").glob("*.toml"))


def test_shipped_scenarios_validate():
    assert len(SCENARIOS) >= 6
    for path in SCENARIOS:
        s = load(path)
        assert s.name == path.stem


def test_defaults_are_valid():
    s = from_dict({})
    assert s == Scenario()


def test_dumps_round_trip():
    for path in SCENARIOS:
        s = load(path)
        assert from_dict(tomllib.loads(dumps(s))) == s
    s = from_dict({"overlay": {"checkpoint_interval_min": math.inf}})
    assert from_dict(tomllib.loads(dumps(s))).overlay.checkpoint_interval_min == math.inf


def test_every_problem_is_reported_with_its_path():
    with pytest.raises(ScenarioError) as exc:
        from_dict({"duration_h": -1, "cluster": {"nodes": 4, "colour": "red"}, "overlay": {"pilot_nodes": 8},
                   "data": {"dtn_count": 0}})
    text = "\n".join(exc.value.diagnostics)
    for key in ("duration_h", "cluster.colour", "overlay.pilot_nodes", "cluster.nodes", "data.dtn_count"):
        assert key in text


def test_type_errors():
    with pytest.raises(ScenarioError) as exc:
        from_dict({"cluster": {"nodes": "many", "backfill": 1}, "htc": {"runtime_h": {"dist": "uniform"}}})
    assert len(exc.value.diagnostics) == 3


def test_torus_must_match_nodes():
    with pytest.raises(ScenarioError, match="cluster.torus"):
        from_dict({"cluster": {"nodes": 8, "torus": [2, 2, 3]}})
    assert from_dict({"cluster": {"nodes": 12, "torus": [2, 2, 3]}}).cluster.torus == [2, 2, 3]


def test_unplaceable_job_sizes_are_rejected():
    # 7 nodes on a 5x5x4 torus has no box within 1.1x its size
    with pytest.raises(ScenarioError, match="hpc.nodes_max_fraction"):
        from_dict({}, preset_name="atlas_bw", scale=0.005)


def test_overrides():
    assert parse_override("cluster.nodes=128") == (["cluster", "nodes"], 128)
    assert parse_override("name=plain words") == (["name"], "plain words")
    assert parse_override("overlay.enabled=false") == (["overlay", "enabled"], False)
    s = from_dict({}, ["cluster.nodes=16", 'htc.runtime_h={dist="uniform",lo=1,hi=2}'])
    assert s.cluster.nodes == 16 and s.htc.runtime_h == Dist.uniform(1, 2)
    with pytest.raises(ScenarioError):
        parse_override("cluster.nodes")


def test_preset_and_file_merge(tmp_path):
    f = tmp_path / "s.toml"
    f.write_text('preset = "titan_backfill"\nscale = 0.01\n[cluster]\nbackfill = false\n')
    s = load(f)
    assert s.name == "titan_backfill" and s.cluster.nodes == 187 and not s.cluster.backfill
    assert s.overlay.mode == "backfill_broker"
    with pytest.raises(ScenarioError, match="preset"):
        from_dict({"preset": "summit"})
    with pytest.raises(ScenarioError, match="scale"):
        from_dict({"scale": 0.5})


def test_bad_toml(tmp_path):
    f = tmp_path / "s.toml"
    f.write_text("[cluster\n")
    with pytest.raises(ScenarioError):
        load(f)


def test_digest_ignores_seed():
    a, b = from_dict({"seed": 1}), from_dict({"seed": 2})
    assert a.digest() == b.digest()
    assert a.digest() != from_dict({"cluster": {"nodes": 32}}).digest()


def test_presets_validate_at_small_scales():
    for name in PRESETS:
        for scale in (0.01, 0.025):
            from_dict({}, preset_name=name, scale=scale)
    assert preset("atlas_bw", 0.025).hpc.size_grid == "any"
