import asyncio
import time
from dataclasses import replace

import numpy as np
import pytest

from balancedfmm import FmmConfig, FmmEngine, brute_force, run_serial, run_serial_forest
from balancedfmm.core import (
    audit_pair_coverage,
    connection_factors,
    count_connections,
    run_distributed,
    run_memory,
    run_tcp_rank,
)
from balancedfmm.datasets import GeneratorSpec, generate, generate_targets
from balancedfmm.direct import write_potentials
from balancedfmm.errors import ConfigMismatchError, GeometryError, PartitionError, TransportError
from balancedfmm.geometry import Connection, partition_sources
from balancedfmm.harmonics import truncation_bound
from balancedfmm.stage_objects import STAGES
from balancedfmm.transport import MemoryFabric
from balancedfmm.transport.launcher import local_roster

from conftest import run_async


def relative_gap(a, b) -> float:
    return float(np.max(np.abs(a.values - b.values)) / np.max(np.abs(b.values)))


def test_single_level_is_the_direct_sum_bit_for_bit(uniform_sources):
    sources = uniform_sources(100)
    run = run_serial(sources, config=FmmConfig(levels=1, order=4))
    reference = brute_force(sources)
    assert np.array_equal(run.potentials.ids, reference.ids)
    assert np.array_equal(run.potentials.values, reference.values)
    assert run.n_far == 0


def test_thousand_points_meet_tolerance(thousand_points):
    config = FmmConfig(theta=0.5, eta=0.5, levels=3, tol=1e-6)
    run = run_serial(thousand_points, config=config)
    assert run.potentials.relative_error(brute_force(thousand_points)) <= 1e-5
    report = run.reports[0]
    assert report.order == 21
    assert report.n_far > 0
    assert set(report.times) == set(STAGES)


def test_direct_m2l_path_agrees_with_rotation(uniform_sources):
    sources = uniform_sources(600)
    base = FmmConfig(levels=3, order=8)
    rotation = run_serial(sources, config=base)
    direct = run_serial(sources, config=replace(base, m2l="direct"))
    assert relative_gap(rotation.potentials, direct.potentials) < 1e-11


def test_convergence_stays_under_bound(thousand_points):
    reference = brute_force(thousand_points)
    errors = []
    for k in range(1, 7):
        config = FmmConfig(theta=0.5, levels=3, tol=10.0 ** -k)
        error = run_serial(thousand_points, config=config).potentials.relative_error(reference)
        assert error <= truncation_bound(0.5, config.expansion_order, 10.0)
        errors.append(error)
    assert errors[-1] < errors[0]


def test_all_strong_tree_is_pure_direct_sum(uniform_sources):
    sources = uniform_sources(400)
    run = run_serial(sources, config=FmmConfig(theta=0.1, levels=2))
    assert run.n_far == 0
    assert run.potentials.relative_error(brute_force(sources)) < 1e-12


def test_external_targets(uniform_sources):
    sources = uniform_sources(800)
    targets = generate_targets(GeneratorSpec("uniform", 300, seed=11), after=sources)
    run = run_serial(sources, targets, FmmConfig(levels=3, order=16))
    assert run.potentials.ids.min() == 800
    assert run.potentials.relative_error(brute_force(sources, targets)) < 1e-4


def test_eight_ranks_match_serial_forest(uniform_sources):
    sources = uniform_sources(2000)
    config = FmmConfig(ranks=8, levels=2, order=14)
    distributed = run_async(run_memory(sources, config=config))
    forest = run_serial_forest(sources, config=config)
    assert distributed.ranks == 8
    assert np.array_equal(distributed.potentials.ids, np.arange(2000))
    assert relative_gap(distributed.potentials, forest.potentials) < 1e-12
    assert distributed.potentials.relative_error(brute_force(sources)) < 1e-4
    assert distributed.n_near == forest.n_near
    assert distributed.n_far == forest.n_far


@pytest.mark.parametrize("eta", [0.0, 1.0])
def test_eight_ranks_within_bound_for_any_split(uniform_sources, eta):
    sources = uniform_sources(1500)
    run = run_async(run_memory(sources, config=FmmConfig(ranks=8, levels=2, eta=eta, order=10)))
    assert run.potentials.relative_error(brute_force(sources)) < truncation_bound(0.5, 10)


def test_sparse_ranks_skip_empty_boxes_without_losing_pairs(uniform_sources):
    sources = uniform_sources(300, seed=4)
    targets = generate_targets(GeneratorSpec("uniform", 120, seed=5), after=sources)
    config = FmmConfig(ranks=8, levels=3, eta=0.0, order=10)
    distributed = run_async(run_memory(sources, targets, config=config))
    forest = run_serial_forest(sources, targets, config=config)
    assert relative_gap(distributed.potentials, forest.potentials) < 1e-12
    reference = brute_force(sources, targets)
    assert distributed.potentials.relative_error(reference) < truncation_bound(0.5, 10)


def test_orb_partition():
    sources = generate(GeneratorSpec("gaussian", 1200, seed=2))
    run = run_async(run_memory(sources, config=FmmConfig(ranks=4, partition="orb", levels=2, order=14)))
    assert run.potentials.relative_error(brute_force(sources)) < 1e-4


def test_single_leaf_per_rank_is_distributed_direct_sum(uniform_sources):
    sources = uniform_sources(500)
    run = run_async(run_memory(sources, config=FmmConfig(ranks=8, levels=1, order=4)))
    assert run.n_far == 0
    assert run.potentials.relative_error(brute_force(sources)) < 1e-12


def test_completion_order_draining_is_deterministic(uniform_sources):
    sources = uniform_sources(1500)
    config = FmmConfig(ranks=8, levels=2, order=6)
    by_rank = run_async(run_memory(sources, config=config))
    by_arrival = run_async(run_memory(sources, config=replace(config, halo_wait="any"), delays={0: 0.05, 5: 0.02}))
    again = run_async(run_memory(sources, config=replace(config, halo_wait="any"), delays={3: 0.04}))
    assert np.array_equal(by_rank.potentials.values, by_arrival.potentials.values)
    assert np.array_equal(by_arrival.potentials.values, again.potentials.values)


@pytest.mark.parametrize("ranks, levels", [(1, 3), (8, 2), (8, 3)])
def test_every_pair_is_covered_exactly_once(uniform_sources, ranks, levels):
    sources = uniform_sources(400)
    run = run_async(run_memory(sources, config=FmmConfig(ranks=ranks, levels=levels, order=2), keep_state=True))
    audit = audit_pair_coverage(run.results)
    assert audit["pairs"] == 400 * 399
    assert audit["uncovered"] == 0
    assert audit["multiply_covered"] == 0
    assert audit["covered_once"] == audit["pairs"]


def test_reported_counts_match_structures(uniform_sources):
    sources = uniform_sources(1000)
    run = run_async(run_memory(sources, config=FmmConfig(ranks=8, levels=3, order=2), keep_state=True))
    near = sum(r.connectivity.count(3, Connection.STRONG) + r.halos.count(3, Connection.STRONG) for r in run.results)
    far = sum(
        r.connectivity.count(l, Connection.WEAK) + r.halos.count(l, Connection.WEAK)
        for r in run.results for l in (1, 2, 3)
    )
    assert (run.n_near, run.n_far) == (near, far)


def test_config_mismatch_is_detected(uniform_sources):
    sources = uniform_sources(200)
    mine = FmmConfig(ranks=2, partition="orb", levels=2, order=3)
    theirs = replace(mine, theta=0.6)
    partition = partition_sources(sources, 2, "orb", mine.eta)
    fabric = MemoryFabric(2, 5.0)

    async def both():
        return await asyncio.gather(
            run_distributed(partition.sources[0], [partition.boxes[0]], mine, fabric.endpoint(0)),
            run_distributed(partition.sources[1], [partition.boxes[1]], theirs, fabric.endpoint(1)),
            return_exceptions=True,
        )

    results = run_async(both())
    assert all(isinstance(r, ConfigMismatchError) for r in results)


def test_tcp_ranks_match_memory_run(uniform_sources, tmp_path):
    sources = uniform_sources(600)
    config = FmmConfig(ranks=2, partition="orb", levels=2, order=6, watchdog_timeout=20.0)

    async def both():
        roster = local_roster(2)
        return await asyncio.gather(*(run_tcp_rank(sources, None, config, r, roster) for r in range(2)))

    gathered, nothing = run_async(both())
    assert nothing is None
    assert gathered.ranks == 2
    memory = run_async(run_memory(sources, config=config))
    assert np.array_equal(gathered.potentials.values, memory.potentials.values)
    assert gathered.n_far == memory.n_far
    write_potentials(tmp_path / "tcp.fmmp", gathered.potentials)
    write_potentials(tmp_path / "memory.fmmp", memory.potentials)
    assert (tmp_path / "tcp.fmmp").read_bytes() == (tmp_path / "memory.fmmp").read_bytes()


def test_weak_scaling_connection_factors_on_eight_ranks(uniform_sources):
    # midpoint splits make the counts a function of the box geometry alone
    config = FmmConfig(theta=0.5, eta=0.0, levels=4, order=2)
    reference = run_async(count_connections(uniform_sources(1000), config))
    scaled = run_async(count_connections(uniform_sources(8000, seed=1), replace(config, ranks=8)))
    c_near, c_far = connection_factors(scaled, reference)
    assert 1.1 <= c_near <= 1.4
    assert 1.4 <= c_far <= 2.2
    assert connection_factors(reference, reference) == (1.0, 1.0)


def test_smaller_theta_means_more_weak_connections(uniform_sources):
    sources = uniform_sources(20000)
    tight = run_async(count_connections(sources, FmmConfig(theta=0.3, eta=0.0, levels=4, order=2)))
    loose = run_async(count_connections(sources, FmmConfig(theta=0.6, eta=0.0, levels=4, order=2)))
    assert tight.n_far / loose.n_far > 1.0


def test_levels_auto_resolves_from_leaf_target(uniform_sources):
    sources = uniform_sources(6400)
    config = FmmConfig(levels="auto", leaf_target=100, order=2)
    assert config.resolved(len(sources)).levels == 3
    with pytest.raises(GeometryError):
        config.checksum()


@pytest.mark.parametrize("kwargs, error", [
    ({"theta": 1.0}, GeometryError),
    ({"eta": 1.5}, GeometryError),
    ({"levels": 0}, GeometryError),
    ({"ranks": 0}, PartitionError),
    ({"partition": "slab"}, PartitionError),
    ({"halo_wait": "random"}, ValueError),
    ({"m2l": "fft"}, ValueError),
])
def test_config_validation(kwargs, error):
    with pytest.raises(error):
        FmmConfig(**kwargs)


def test_cubic_partition_needs_a_cube_number(uniform_sources):
    with pytest.raises(PartitionError):
        run_async(run_memory(uniform_sources(100), config=FmmConfig(ranks=6, order=2)))


def test_engine_dispatch(uniform_sources):
    sources = uniform_sources(300)
    engine = FmmEngine(p=8, levels=2, order=4, backend="serial", warmup=False)
    assert engine.config.ranks == 8
    serial = engine.evaluate(sources)
    assert serial.backend == "serial"
    memory = FmmEngine(p=8, levels=2, order=4, backend="memory").evaluate(sources)
    assert memory.backend == "memory"
    assert relative_gap(serial.potentials, memory.potentials) < 1e-12


def test_engine_rejects_bad_backend_and_incomplete_tcp_setup(uniform_sources):
    with pytest.raises(ValueError):
        FmmEngine(backend="mpi")
    with pytest.raises(TransportError):
        FmmEngine(backend="tcp", order=2, warmup=False).evaluate(uniform_sources(10))


def test_stage_report_is_serializable(uniform_sources):
    run = run_async(run_memory(uniform_sources(500), config=FmmConfig(ranks=8, levels=2, order=3)))
    payload = run.to_dict()
    assert payload["ranks"] == 8
    assert set(payload["stages"]) == set(STAGES)
    assert "M2L" in payload["reports"][0]["messages"]["sent"]
    assert run.p2p_variance.value >= 0.0
    assert run.to_json()


def random_configs(seed: int, count: int, n_range, theta_range, shapes):
    rng = np.random.default_rng(seed)
    for _ in range(count):
        ranks, levels = shapes[rng.integers(len(shapes))]
        config = FmmConfig(
            theta=float(rng.uniform(*theta_range)),
            eta=float(rng.choice([0.0, 0.5, 1.0])),
            levels=int(levels),
            tol=1e-6,
            ranks=int(ranks),
            watchdog_timeout=120.0,
        )
        yield generate(GeneratorSpec("uniform", int(rng.integers(*n_range)), seed=int(rng.integers(2**31)))), config


def test_random_configurations_meet_tolerance():
    shapes = [(1, 1), (1, 2), (1, 3), (8, 1), (8, 2)]
    for sources, config in random_configs(11, 8, (100, 1500), (0.3, 0.6), shapes):
        run = run_async(run_memory(sources, config=config))
        assert run.potentials.relative_error(brute_force(sources)) <= 10 * config.tol, config


@pytest.mark.bench
def test_twenty_random_configurations_in_two_minutes():
    shapes = [(ranks, levels) for ranks in (1, 8) for levels in (1, 2, 3, 4)]
    problems = list(random_configs(2024, 20, (100, 5001), (0.3, 0.7), shapes))
    elapsed = 0.0
    for sources, config in problems:
        started = time.perf_counter()
        run = run_async(run_memory(sources, config=config))
        elapsed += time.perf_counter() - started
        assert run.potentials.relative_error(brute_force(sources)) <= 10 * config.tol, config
    assert elapsed < 120.0


@pytest.mark.bench
def test_convergence_to_twelve_digits(thousand_points):
    reference = brute_force(thousand_points)
    envelope = []
    for k in range(1, 13):
        config = FmmConfig(theta=0.5, levels=3, tol=10.0 ** -k)
        error = run_serial(thousand_points, config=config).potentials.relative_error(reference)
        assert error <= truncation_bound(0.5, config.expansion_order, 10.0)
        envelope.append(error)
    tail = np.maximum.accumulate(envelope[::-1])[::-1]
    assert np.all(np.diff(tail) <= 0)


@pytest.mark.bench
def test_eight_ranks_at_desk_scale():
    sources = generate(GeneratorSpec("uniform", 100_000, seed=3))
    config = FmmConfig(ranks=8, levels=4, order=8)
    distributed = run_async(run_memory(sources, config=config))
    forest = run_serial_forest(sources, config=config)
    assert relative_gap(distributed.potentials, forest.potentials) < 1e-12
