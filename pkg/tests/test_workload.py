import math

import pytest
from hypothesis import given, settings, strategies as st

from htcsim.cluster import BatchJob, Cluster, JobKind
from htcsim.core import Engine, RngStreams, hours
from htcsim.overlay import OsgPolicy, validate
from htcsim.scenario import UnknownPreset, preset
from htcsim.workload import (Dist, HpcBackgroundSpec, HtcSpec, InvalidSpec, generate_hpc, generate_tasks,
                             maintain_backlog)


def shape(task):
    return (task.est_runtime, task.actual_runtime, task.input_gb, task.output_gb, task.memory_gb, task.dataset)


def test_constant_spec_gives_identical_tasks():
    spec = HtcSpec(n_tasks=100, runtime_h=Dist.constant(1.0), input_gb=Dist.constant(0.4),
                   output_gb=Dist.constant(0.0), n_datasets=1)
    tasks = generate_tasks(spec, RngStreams(0))
    assert len(tasks) == 100
    assert len({shape(t) for _, t in tasks}) == 1
    assert tasks[0][1].actual_runtime == hours(1) and tasks[0][1].input_gb == 0.4
    assert [t.id for _, t in tasks] == list(range(1, 101))


def test_generation_is_deterministic_per_seed():
    spec = HtcSpec(n_tasks=200, est_error=0.2, input_gb=Dist.uniform(0.1, 1.0), arrival_per_h=50)
    a = [(t, shape(x)) for t, x in generate_tasks(spec, RngStreams(3))]
    b = [(t, shape(x)) for t, x in generate_tasks(spec, RngStreams(3))]
    c = [(t, shape(x)) for t, x in generate_tasks(spec, RngStreams(4))]
    assert a == b and a != c
    hpc = HpcBackgroundSpec(arrival_per_h=5)
    ja = [(t, j.nodes_requested, j.walltime_req) for t, j in generate_hpc(hpc, RngStreams(3), 64, hours(48))]
    jb = [(t, j.nodes_requested, j.walltime_req) for t, j in generate_hpc(hpc, RngStreams(3), 64, hours(48))]
    assert ja == jb and len(ja) > 100


def test_new_stream_does_not_perturb_others():
    base = HtcSpec(n_tasks=50)
    noisy = HtcSpec(n_tasks=50, est_error=0.3)
    a = [t.actual_runtime for _, t in generate_tasks(base, RngStreams(9))]
    b = [t.actual_runtime for _, t in generate_tasks(noisy, RngStreams(9))]
    assert a == b


@pytest.mark.parametrize("bad", [
    HtcSpec(runtime_h=Dist.uniform(2, 1)),
    HtcSpec(n_tasks=-1),
    HtcSpec(est_error=1.0),
    HtcSpec(input_gb=Dist("weibull", 1, 1)),
])
def test_invalid_specs(bad):
    with pytest.raises(InvalidSpec):
        generate_tasks(bad, RngStreams(0))


def test_invalid_under_osg_policy():
    with pytest.raises(InvalidSpec):
        generate_tasks(HtcSpec(memory_gb=2.5), RngStreams(0), OsgPolicy())
    with pytest.raises(InvalidSpec):
        HpcBackgroundSpec(size_grid="odd").check()


def test_dist_round_trip():
    for d in (Dist.constant(2.0), Dist.uniform(1, 3), Dist.lognormal(0.5, 0.2)):
        assert Dist.from_value(d.to_dict()) == d
    assert Dist.from_value(3) == Dist.constant(3.0)
    with pytest.raises(InvalidSpec):
        Dist.from_value({"dist": "uniform", "lo": 1})
    assert Dist.lognormal(math.log(4), 0.5).mean() == pytest.approx(4 * math.exp(0.125))


def test_osg_draws_respect_bounds():
    policy = OsgPolicy()
    spec = HtcSpec(n_tasks=10_000, runtime_h=Dist.lognormal(math.log(6), 0.8), input_gb=Dist.uniform(0, 8),
                   output_gb=Dist.uniform(0, 6), memory_gb=1.9)
    tasks = generate_tasks(spec, RngStreams(1), policy)
    assert len(tasks) == 10_000
    assert all(not validate(t, policy) for _, t in tasks)
    assert max(t.actual_runtime for _, t in tasks) <= hours(12)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**32), st.floats(0.5, 8), st.floats(0.1, 2.0))
def test_osg_property_any_seed(seed, mean_h, sigma):
    policy = OsgPolicy()
    spec = HtcSpec(n_tasks=300, runtime_h=Dist.lognormal(math.log(mean_h), sigma), est_error=0.5,
                   input_gb=Dist.uniform(0, 9), output_gb=Dist.uniform(0, 9))
    assert all(not validate(t, policy) for _, t in generate_tasks(spec, RngStreams(seed), policy))


def test_hpc_sizes():
    assert HpcBackgroundSpec(nodes_max_fraction=0.125).sizes(64) == [1, 2, 4, 8]
    assert HpcBackgroundSpec(nodes_max_fraction=0.1, size_grid="any", min_nodes=3).sizes(50) == [3, 4, 5]
    assert HpcBackgroundSpec(min_nodes=16).sizes(8) == [8]


def backlog_cluster(queued_nodes):
    eng = Engine()
    cl = Cluster(eng, 4)
    cl.submit(BatchJob(4, hours(100)))
    eng.run_until(0)
    for n in queued_nodes:
        cl.submit(BatchJob(n, hours(1)))
    return cl


def test_maintain_backlog_injects_to_target():
    cl = backlog_cluster([4, 4, 2])
    spec = HpcBackgroundSpec(target_backlog_nodes=16)
    injected = maintain_backlog(cl, spec, RngStreams(0))
    assert sum(j.nodes_requested for j in injected) >= 6
    assert cl.queued_node_demand() >= 16
    assert all(j.kind is JobKind.HPC for j in injected)


def test_maintain_backlog_noop_above_target():
    cl = backlog_cluster([4, 4, 4, 4, 4])
    assert maintain_backlog(cl, HpcBackgroundSpec(target_backlog_nodes=16), RngStreams(0)) == []


def test_presets():
    ligo = preset("ligo", 0.001)
    tasks = generate_tasks(ligo.htc, RngStreams(0), ligo.osg())
    assert len(tasks) == 100 and {t.input_gb for _, t in tasks} == {0.4}
    assert ligo.overlay.mode == "glidein"
    atlas = preset("atlas_bw", 0.025)
    assert atlas.cluster.nodes == 500 and atlas.hpc.target_backlog_nodes == 4 * 500
    assert atlas.cluster.placement == "topology_aware" and atlas.overlay.mode == "glidein"
    titan = preset("titan_backfill", 0.01)
    assert titan.overlay.mode == "backfill_broker" and titan.cluster.placement == "transparent"
    assert titan.overlay.startup_latency_s == 0
    with pytest.raises(UnknownPreset):
        preset("summit")
