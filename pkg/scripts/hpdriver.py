#!/usr/bin/env python3
"""
hp adaptation driver for the L-shaped domain.
Each cycle marks and adapts the mesh, smooths degrees, repartitions by weight,
moves per-cell data to the new owners and enumerates DoFs on a simulated fabric.
Writes metrics.csv, summary.json and optional dumps to the output directory.
"""

import argparse
import csv
import json
import logging
import os
import sys
import time
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Dict, List, NamedTuple, Optional, Sequence, Tuple

from dotenv import load_dotenv

from scripts.cell_data_transfer import (
    STAGE_DATA,
    STAGE_OFFSETS,
    PackedCellData,
    load_shards,
    merge_packed,
    pack,
    repartition_transfer,
    save_shards,
)
from scripts.comm_fabric import DEFAULT_TIMEOUT, Fabric
from scripts.constraint_builder import (
    close,
    count_by_kind,
    identity_constraints_naive,
    merge,
    view_constraints,
    write_constraints,
)
from scripts.dof_enumerator import ActiveFeMap, STAGE_GHOSTS, STAGE_GHOSTS_AGAIN, build_views, run_distribution
from scripts.element_collection import MAX_DEGREE, MIN_DEGREE, ElementCollection
from scripts.errors import CheckpointFormatError, ConfigError, HpError
from scripts.hp_adaptation import (
    MarkingPolicy,
    apply_decisions,
    decode_nodal_payload,
    encode_nodal_payload,
    gather_and_mark,
    smooth_degrees,
)
from scripts.mesh_forest import L_MAX, CellKey, Forest, l_shaped_forest, write_mesh_dump
from scripts.partitioner import DEFAULT_EXPONENT, WeightPolicy, cell_weights, partition_by_weight, weight_imbalance
from scripts.sequential_oracle import naive_enumerate

load_dotenv('.env.local')
load_dotenv()  # Also try default .env file

logger = logging.getLogger(__name__)

FIXTURES_FILE = Path(__file__).parent.parent / 'data' / 'fixtures.json'
FIXTURES = ('fig1', 'fig2')
START_DEGREE = 2

METRICS_FILE = 'metrics.csv'
SWEEP_FILE = 'exponent_sweep.csv'
SUMMARY_FILE = 'summary.json'

METRICS_COLUMNS = [
    'cycle', 'cells', 'dofs', 'min_rank_dofs', 'max_rank_dofs', 'weight_imbalance',
    'hp_constraints', 'hanging_constraints', 'identity_constraints', 'repartition_bytes',
    't_enumerate_ms', 't_adapt_ms', 't_partition_ms',
]
SWEEP_COLUMNS = ['exponent', 'ranks', 'weight_imbalance', 'min_rank_dofs', 'max_rank_dofs', 'dofs']


@dataclass(frozen=True)
class DriverConfig:
    ranks: int = 1
    cycles: int = 5
    initial_refines: int = 3
    exponent: float = DEFAULT_EXPONENT
    min_degree: int = 2
    max_degree: int = 7
    refine_fraction: float = 0.30
    coarsen_fraction: float = 0.03
    p_fraction: float = 0.90
    output_dir: str = 'output'
    checkpoint: Optional[str] = None
    restart: Optional[str] = None
    dump_mesh: bool = False
    dump_constraints: bool = False
    fixture: Optional[str] = None
    timings: bool = False
    sweep_exponents: Tuple[float, ...] = ()
    barrier_timeout: float = DEFAULT_TIMEOUT

    def __post_init__(self):
        if self.ranks < 1:
            raise ConfigError(f"ranks must be at least 1, got {self.ranks}")
        if self.cycles < 0:
            raise ConfigError(f"cycles must be non-negative, got {self.cycles}")
        if not 0 <= self.initial_refines <= L_MAX:
            raise ConfigError(f"initial refinements must lie in [0, {L_MAX}], got {self.initial_refines}")
        if not MIN_DEGREE <= self.min_degree <= self.max_degree <= MAX_DEGREE:
            raise ConfigError(
                f"degree range {self.min_degree}..{self.max_degree} must lie within {MIN_DEGREE}..{MAX_DEGREE}"
            )
        if self.fixture is not None and self.fixture not in FIXTURES:
            raise ConfigError(f"unknown fixture '{self.fixture}', expected one of {', '.join(FIXTURES)}")
        if self.fixture is not None and self.restart is not None:
            raise ConfigError("--fixture and --restart cannot be combined")
        if self.barrier_timeout <= 0:
            raise ConfigError("barrier timeout must be positive")
        try:
            self.weight_policy()
            self.marking_policy()
            for exponent in self.sweep_exponents:
                WeightPolicy(exponent=exponent)
        except ValueError as e:
            raise ConfigError(str(e)) from e

    def weight_policy(self) -> WeightPolicy:
        return WeightPolicy(exponent=self.exponent)

    def marking_policy(self) -> MarkingPolicy:
        return MarkingPolicy(self.refine_fraction, self.coarsen_fraction, self.p_fraction)

    def collection(self) -> ElementCollection:
        return ElementCollection.from_range(self.min_degree, self.max_degree)


class MeshState(NamedTuple):
    forest: Forest
    active_fe: ActiveFeMap
    owners: Dict[CellKey, int]


@dataclass
class CycleMetrics:
    cycle: int
    cells: int
    dofs: int
    rank_dofs: Tuple[int, ...]
    weight_imbalance: float
    hp_constraints: int
    hanging_constraints: int
    identity_constraints: int
    repartition_bytes: int
    naive_dofs: int
    t_enumerate_ms: float = 0.0
    t_adapt_ms: float = 0.0
    t_partition_ms: float = 0.0

    def row(self) -> Dict[str, str]:
        return {
            'cycle': str(self.cycle),
            'cells': str(self.cells),
            'dofs': str(self.dofs),
            'min_rank_dofs': str(min(self.rank_dofs)),
            'max_rank_dofs': str(max(self.rank_dofs)),
            'weight_imbalance': f"{self.weight_imbalance:.6f}",
            'hp_constraints': str(self.hp_constraints),
            'hanging_constraints': str(self.hanging_constraints),
            'identity_constraints': str(self.identity_constraints),
            'repartition_bytes': str(self.repartition_bytes),
            't_enumerate_ms': f"{self.t_enumerate_ms:.3f}",
            't_adapt_ms': f"{self.t_adapt_ms:.3f}",
            't_partition_ms': f"{self.t_partition_ms:.3f}",
        }


class _Stopwatch:
    """Milliseconds of wall time, or always 0 when timings are off."""

    def __init__(self, enabled: bool):
        self.enabled = enabled
        self._start = 0.0

    def start(self):
        self._start = time.perf_counter()

    def elapsed_ms(self) -> float:
        if not self.enabled:
            return 0.0
        return (time.perf_counter() - self._start) * 1000.0


def load_fixture(name: str, collection: ElementCollection) -> Tuple[Forest, ActiveFeMap]:
    if not FIXTURES_FILE.exists():
        raise ConfigError(f"fixtures file not found at {FIXTURES_FILE}")
    with open(FIXTURES_FILE, 'r', encoding='utf-8') as f:
        fixtures = json.load(f)
    if name not in fixtures:
        raise ConfigError(f"fixture '{name}' not found in {FIXTURES_FILE}")
    entry = fixtures[name]
    forest = Forest.uniform([tuple(t) for t in entry['trees']], level=entry['level'])
    degrees = entry['degrees']
    if len(degrees) != len(forest.leaves):
        raise ConfigError(f"fixture '{name}' lists {len(degrees)} degrees for {len(forest.leaves)} cells")
    return forest, {cell: collection.index_of_degree(d) for cell, d in zip(forest.leaves, degrees)}


def pack_owned(state: MeshState, collection: ElementCollection, ranks: int) -> List[PackedCellData]:
    """Per-rank payloads: FE index plus exact solution samples at the support points."""
    origins = state.forest.tree_origins
    held = []
    for rank in range(ranks):
        cells = [c for c in state.forest.leaves if state.owners[c] == rank]
        held.append(pack(cells, lambda c: encode_nodal_payload(c, state.active_fe[c], collection, origins)))
    return held


def initial_state(config: DriverConfig, collection: ElementCollection):
    """Mesh, payloads held per rank, first cycle number and domain name."""
    if config.restart:
        meta, shards = load_shards(Path(config.restart))
        # shard FE indices refer to the collection they were written with
        saved = meta.get('degrees')
        if saved is not None and list(saved) != [config.min_degree, config.max_degree]:
            raise ConfigError(
                f"checkpoint under {config.restart} uses degrees {saved[0]}..{saved[1]}, "
                f"got {config.min_degree}..{config.max_degree}"
            )
        merged = merge_packed(shards)
        origins = tuple(tuple(o) for o in meta['tree_origins'])
        forest = Forest((), origins).with_leaves(merged.cell_order)
        if forest.covered_area() != len(origins) * 4 ** L_MAX:
            raise CheckpointFormatError(f"shards under {config.restart} do not cover the domain")
        active_fe = {cell: decode_nodal_payload(payload, collection)[0] for cell, payload in merged.items()}
        owners = {cell: 0 for cell in forest.leaves}
        held = [merged] + [PackedCellData.empty() for _ in range(config.ranks - 1)]
        print(f"📂 Restarting from {config.restart}: {len(forest.leaves)} cells after cycle {meta['cycle']}")
        return MeshState(forest, active_fe, owners), held, int(meta['cycle']), meta.get('domain', 'l-shape')

    if config.fixture:
        forest, active_fe = load_fixture(config.fixture, collection)
        domain = config.fixture
    else:
        forest = l_shaped_forest(config.initial_refines)
        start = collection.index_at_least(START_DEGREE)
        active_fe = {cell: start for cell in forest.leaves}
        domain = 'l-shape'
    state = MeshState(forest, active_fe, {cell: 0 for cell in forest.leaves})
    return state, pack_owned(state, collection, config.ranks), 0, domain


def _mark_program(comm, views, active_fe, collection, policy):
    return gather_and_mark(comm, views[comm.rank], active_fe, collection, policy)


def _smooth_program(comm, views, active_fe, collection):
    view = views[comm.rank]
    return smooth_degrees(comm, view, {c: active_fe[c] for c in view.owned}, collection)


def _transfer_program(comm, held, owners, new_owners, collection):
    received = repartition_transfer(held[comm.rank], owners.__getitem__, new_owners.__getitem__, comm)
    active_fe = {cell: decode_nodal_payload(payload, collection)[0] for cell, payload in received.items()}
    return received, active_fe


def adapt(fabric: Fabric, state: MeshState, collection: ElementCollection, policy: MarkingPolicy) -> MeshState:
    views = build_views(state.forest, state.owners, fabric.size)
    decisions = {}
    for part in fabric.run(_mark_program, views, state.active_fe, collection, policy):
        decisions.update(part)
    forest, active_fe, owners = apply_decisions(state.forest, state.active_fe, state.owners, decisions, collection)

    views = build_views(forest, owners, fabric.size)
    smoothed = {}
    for part in fabric.run(_smooth_program, views, active_fe, collection):
        smoothed.update(part)
    return MeshState(forest, smoothed, owners)


def repartition(fabric: Fabric, state: MeshState, held: List[PackedCellData], collection: ElementCollection,
                policy: WeightPolicy):
    """Weighted partition of the current mesh and the payload transfer to the new owners."""
    leaves = state.forest.leaves
    weights = cell_weights([collection.dofs_per_cell(state.active_fe[c]) for c in leaves], policy)
    assignment = partition_by_weight(weights, fabric.size)
    new_owners = {cell: int(rank) for cell, rank in zip(leaves, assignment)}

    fabric.clear_history()
    outcome = fabric.run(_transfer_program, held, state.owners, new_owners, collection)
    moved = fabric.bytes_sent(STAGE_OFFSETS) + fabric.bytes_sent(STAGE_DATA)
    active_fe = {}
    for _, part in outcome:
        active_fe.update(part)
    imbalance = weight_imbalance(weights, assignment, fabric.size)
    return MeshState(state.forest, active_fe, new_owners), [packed for packed, _ in outcome], moved, imbalance


def exponent_sweep(fabric: Fabric, state: MeshState, collection: ElementCollection,
                   exponents: Sequence[float]) -> List[Dict[str, str]]:
    """Repartition the final mesh for each exponent and re-enumerate."""
    rows = []
    leaves = state.forest.leaves
    counts = [collection.dofs_per_cell(state.active_fe[c]) for c in leaves]
    for exponent in exponents:
        weights = cell_weights(counts, WeightPolicy(exponent=exponent))
        assignment = partition_by_weight(weights, fabric.size)
        owners = {cell: int(rank) for cell, rank in zip(leaves, assignment)}
        run = run_distribution(fabric, state.forest, owners, state.active_fe, collection)
        rank_dofs = [d.numbers.n_owned for d in run.results]
        rows.append({
            'exponent': f"{exponent:g}",
            'ranks': str(fabric.size),
            'weight_imbalance': f"{weight_imbalance(weights, assignment, fabric.size):.6f}",
            'min_rank_dofs': str(min(rank_dofs)),
            'max_rank_dofs': str(max(rank_dofs)),
            'dofs': str(run.n_global),
        })
        print(f"   c={exponent:g}: imbalance {rows[-1]['weight_imbalance']}, DoFs per rank {rank_dofs}")
    return rows


def write_csv(path: Path, columns: List[str], rows: List[Dict[str, str]]):
    with open(path, 'w', encoding='utf-8', newline='') as f:
        writer = csv.DictWriter(f, fieldnames=columns, lineterminator='\n')
        writer.writeheader()
        writer.writerows(rows)


def write_summary(path: Path, config: DriverConfig, domain: str, metrics: List[CycleMetrics]):
    summary = {
        'config': asdict(config),
        'domain': domain,
        'cycles': [
            {
                'cycle': m.cycle,
                'cells': m.cells,
                'dofs': m.dofs,
                'naive_dofs': m.naive_dofs,
                'identity_constraints': m.identity_constraints,
                'identity_fraction': m.identity_constraints / m.naive_dofs if m.naive_dofs else 0.0,
            }
            for m in metrics
        ],
    }
    with open(path, 'w', encoding='utf-8') as f:
        json.dump(summary, f, indent=2, ensure_ascii=False)


def run(config: DriverConfig) -> List[CycleMetrics]:
    collection = config.collection()
    fabric = Fabric(config.ranks, timeout=config.barrier_timeout)
    output = Path(config.output_dir)
    output.mkdir(parents=True, exist_ok=True)
    clock = _Stopwatch(config.timings)

    state, held, first_cycle, domain = initial_state(config, collection)
    metrics: List[CycleMetrics] = []
    for cycle in range(first_cycle, first_cycle + config.cycles + 1):
        t_adapt = 0.0
        if cycle > first_cycle:
            clock.start()
            state = adapt(fabric, state, collection, config.marking_policy())
            t_adapt = clock.elapsed_ms()
            held = pack_owned(state, collection, config.ranks)

        clock.start()
        state, held, moved, imbalance = repartition(fabric, state, held, collection, config.weight_policy())
        t_partition = clock.elapsed_ms()

        clock.start()
        dist = run_distribution(fabric, state.forest, state.owners, state.active_fe, collection)
        t_enumerate = clock.elapsed_ms()
        logger.debug("cycle %d ghost traffic: %d bytes, then %d bytes",
                     cycle, dist.traffic[STAGE_GHOSTS], dist.traffic[STAGE_GHOSTS_AGAIN])

        parts = [
            view_constraints(view, fe, collection, result.store)
            for view, fe, result in zip(dist.views, dist.active_fe, dist.results)
        ]
        hp_count, hanging_count = count_by_kind(parts)
        naive_store, naive_dofs = naive_enumerate(state.forest, state.active_fe, collection)
        identities = identity_constraints_naive(naive_store, state.forest, state.active_fe, collection)

        m = CycleMetrics(
            cycle=cycle,
            cells=len(state.forest.leaves),
            dofs=dist.n_global,
            rank_dofs=tuple(d.numbers.n_owned for d in dist.results),
            weight_imbalance=imbalance,
            hp_constraints=hp_count,
            hanging_constraints=hanging_count,
            identity_constraints=len(identities),
            repartition_bytes=moved,
            naive_dofs=naive_dofs,
            t_enumerate_ms=t_enumerate,
            t_adapt_ms=t_adapt,
            t_partition_ms=t_partition,
        )
        metrics.append(m)

        print(f"\n🔁 Cycle {cycle}: {m.cells} cells, {m.dofs} DoFs (naive {naive_dofs})")
        print(f"   📊 DoFs per rank: {list(m.rank_dofs)}")
        print(f"   ⚖️  Weight imbalance: {imbalance:.3f}, moved {moved} bytes")
        print(f"   🔗 Constraints: {hp_count} hp, {hanging_count} hanging, {len(identities)} naive identities")

        if config.dump_mesh:
            degrees = {c: collection.degree(state.active_fe[c]) for c in state.forest.leaves}
            write_mesh_dump(output / f"mesh_cycle{cycle:02d}.txt", state.forest, degrees, state.owners)
        if config.dump_constraints:
            closed = close(merge(*(p.hp + p.hanging for p in parts)))
            write_constraints(output / f"constraints_cycle{cycle:02d}.txt", closed)

    write_csv(output / METRICS_FILE, METRICS_COLUMNS, [m.row() for m in metrics])
    write_summary(output / SUMMARY_FILE, config, domain, metrics)

    if config.checkpoint:
        save_shards(Path(config.checkpoint), held, {
            'cycle': metrics[-1].cycle,
            'domain': domain,
            'tree_origins': [list(o) for o in state.forest.tree_origins],
            'degrees': [config.min_degree, config.max_degree],
        })
        print(f"\n💾 Saved checkpoint: {config.checkpoint} ({config.ranks} shards)")

    if config.sweep_exponents:
        print(f"\n🧪 Exponent sweep on the final mesh ({len(config.sweep_exponents)} exponents)")
        rows = exponent_sweep(fabric, state, collection, config.sweep_exponents)
        write_csv(output / SWEEP_FILE, SWEEP_COLUMNS, rows)
    return metrics


def parse_degree_range(text: str) -> Tuple[int, int]:
    try:
        low, high = text.split('..')
        return int(low), int(high)
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected MIN..MAX, got '{text}'") from None


def parse_exponents(text: str) -> Tuple[float, ...]:
    if not text:
        return ()
    try:
        return tuple(float(part) for part in text.split(','))
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated exponents, got '{text}'") from None


def build_parser() -> argparse.ArgumentParser:
    env = os.getenv
    parser = argparse.ArgumentParser(prog='hpdriver', description=__doc__.strip().splitlines()[0])
    parser.add_argument('--ranks', type=int, default=env('HPDRIVER_RANKS', '1'))
    parser.add_argument('--cycles', type=int, default=env('HPDRIVER_CYCLES', '5'))
    parser.add_argument('--initial-refines', type=int, default=env('HPDRIVER_INITIAL_REFINES', '3'))
    parser.add_argument('--exponent', type=float, default=env('HPDRIVER_EXPONENT', str(DEFAULT_EXPONENT)))
    parser.add_argument('--degrees', type=parse_degree_range, default=env('HPDRIVER_DEGREES', '2..7'))
    parser.add_argument('--refine-frac', type=float, default=0.30)
    parser.add_argument('--coarsen-frac', type=float, default=0.03)
    parser.add_argument('--p-frac', type=float, default=0.90)
    parser.add_argument('--output', default=env('HPDRIVER_OUTPUT_DIR', 'output'))
    parser.add_argument('--checkpoint', help='write per-rank checkpoint shards under this prefix')
    parser.add_argument('--restart', help='continue from checkpoint shards under this prefix')
    parser.add_argument('--dump-mesh', action='store_true')
    parser.add_argument('--dump-constraints', action='store_true')
    parser.add_argument('--fixture', choices=FIXTURES)
    parser.add_argument('--timings', action='store_true', help='record wall times instead of zeros')
    parser.add_argument('--sweep-exponents', type=parse_exponents, default=())
    parser.add_argument('--barrier-timeout', type=float,
                        default=env('HPDRIVER_BARRIER_TIMEOUT', str(DEFAULT_TIMEOUT)))
    parser.add_argument('--verbose', action='store_true')
    return parser


def config_from_args(args: argparse.Namespace) -> DriverConfig:
    min_degree, max_degree = args.degrees
    return DriverConfig(
        ranks=args.ranks,
        cycles=args.cycles,
        initial_refines=args.initial_refines,
        exponent=args.exponent,
        min_degree=min_degree,
        max_degree=max_degree,
        refine_fraction=args.refine_frac,
        coarsen_fraction=args.coarsen_frac,
        p_fraction=args.p_frac,
        output_dir=args.output,
        checkpoint=args.checkpoint,
        restart=args.restart,
        dump_mesh=args.dump_mesh,
        dump_constraints=args.dump_constraints,
        fixture=args.fixture,
        timings=args.timings,
        sweep_exponents=args.sweep_exponents,
        barrier_timeout=args.barrier_timeout,
    )


def main(argv: Optional[Sequence[str]] = None) -> int:
    """Parse options, run all cycles and report where the results went."""
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.DEBUG if args.verbose else logging.WARNING,
        format='%(asctime)s %(levelname)s %(name)s: %(message)s',
    )
    try:
        config = config_from_args(args)
        print(f"🚀 hp driver: {config.ranks} ranks, {config.cycles} cycles, c={config.exponent:g}")
        metrics = run(config)
    except HpError as e:
        print(f"Error: {e}")
        return 1

    output = Path(config.output_dir)
    print(f"\nSaved metrics for {len(metrics)} cycles to: {output / METRICS_FILE}")
    print(f"Saved summary to: {output / SUMMARY_FILE}")
    return 0


if __name__ == '__main__':
    sys.exit(main())
