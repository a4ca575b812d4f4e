"""Iteration-time estimation for distributed programs on heterogeneous clusters.

A program is a flat instruction list split into *stages*: every communication
instruction opens a new stage (the first stage may lack one).  Devices
synchronize at stage boundaries, so one iteration costs

    t(Q, B) = sum_i ( comm_i(B) + max_j comp_{i,j}(B_j) )

with per-device computation affine in the device's sharding ratio and
communication priced by a fitted latency/bandwidth model per collective kind.
Sharded collectives (AllGather, ReduceScatter, AllToAll) are padded to the
largest shard, so their cost is linear in max_j B[j]; GroupedBroadcast is m
back-to-back broadcasts of the actual shards, which beats padding under
skewed ratios and pays m latencies under even ones; AllReduce always moves
the full tensor.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass

import numpy as np

from .graph_ir import Graph, SegmentAssignment, node_flops
from .theory import Instruction

COLLECTIVE_KINDS = ("all_reduce", "all_gather", "reduce_scatter", "all_to_all", "grouped_broadcast")


class ClusterFormatError(ValueError):
    pass


@dataclass(frozen=True)
class DeviceSpec:
    flops_per_second: float


@dataclass(frozen=True)
class CollectiveModel:
    latency_s: float
    bytes_per_second: float


@dataclass(frozen=True)
class ClusterSpec:
    devices: tuple[DeviceSpec, ...]
    collectives: dict[str, CollectiveModel]
    bytes_per_element: int

    @property
    def m(self) -> int:
        return len(self.devices)

    @property
    def total_rate(self) -> float:
        return sum(d.flops_per_second for d in self.devices)

    @classmethod
    def from_dict(cls, doc: dict) -> "ClusterSpec":
        if not isinstance(doc, dict):
            raise ClusterFormatError("cluster spec must be an object")
        unknown = set(doc) - {"devices", "collectives", "bytes_per_element"}
        if unknown:
            raise ClusterFormatError(f"unknown fields {sorted(unknown)}")
        raw_devices = doc.get("devices")
        if not isinstance(raw_devices, list) or not raw_devices:
            raise ClusterFormatError("'devices' must be a non-empty list")
        devices = []
        for i, d in enumerate(raw_devices):
            if not isinstance(d, dict) or set(d) != {"flops"} or not isinstance(d["flops"], (int, float)) \
                    or d["flops"] <= 0:
                raise ClusterFormatError(f"devices[{i}] must be {{\"flops\": positive number}}")
            devices.append(DeviceSpec(flops_per_second=float(d["flops"])))
        raw_coll = doc.get("collectives")
        if not isinstance(raw_coll, dict):
            raise ClusterFormatError("'collectives' must be an object")
        missing = set(COLLECTIVE_KINDS) - set(raw_coll)
        if missing:
            raise ClusterFormatError(f"missing collective models for {sorted(missing)}")
        unknown = set(raw_coll) - set(COLLECTIVE_KINDS)
        if unknown:
            raise ClusterFormatError(f"unknown collective kinds {sorted(unknown)}")
        collectives = {}
        for kind, entry in raw_coll.items():
            if not isinstance(entry, dict) or set(entry) != {"latency_s", "bw_Bps"}:
                raise ClusterFormatError(f"collectives[{kind!r}] must be {{latency_s, bw_Bps}}")
            lat, bw = entry["latency_s"], entry["bw_Bps"]
            if not isinstance(lat, (int, float)) or lat < 0:
                raise ClusterFormatError(f"collectives[{kind!r}].latency_s must be >= 0")
            if not isinstance(bw, (int, float)) or bw <= 0:
                raise ClusterFormatError(f"collectives[{kind!r}].bw_Bps must be > 0")
            collectives[kind] = CollectiveModel(latency_s=float(lat), bytes_per_second=float(bw))
        bpe = doc.get("bytes_per_element")
        if not isinstance(bpe, int) or bpe <= 0:
            raise ClusterFormatError("'bytes_per_element' must be a positive integer")
        return cls(devices=tuple(devices), collectives=collectives, bytes_per_element=bpe)

    @classmethod
    def from_json(cls, text: str) -> "ClusterSpec":
        try:
            doc = json.loads(text)
        except json.JSONDecodeError as e:
            raise ClusterFormatError(f"invalid JSON at line {e.lineno} col {e.colno}: {e.msg}") from e
        return cls.from_dict(doc)

    def to_dict(self) -> dict:
        return {
            "devices": [{"flops": d.flops_per_second} for d in self.devices],
            "collectives": {k: {"latency_s": v.latency_s, "bw_Bps": v.bytes_per_second}
                            for k, v in sorted(self.collectives.items())},
            "bytes_per_element": self.bytes_per_element,
        }


@dataclass(frozen=True)
class ShardingRatios:
    """g x m row-stochastic matrix; row k shards segment k+1 across devices."""
    rows: tuple[tuple[float, ...], ...]

    def __post_init__(self):
        if not self.rows:
            raise ValueError("ratios need at least one row")
        width = len(self.rows[0])
        for k, row in enumerate(self.rows):
            if len(row) != width:
                raise ValueError("ragged ratio matrix")
            if any(x < 0.0 for x in row):
                raise ValueError(f"negative ratio in row {k}: {row}")
            if abs(sum(row) - 1.0) > 1e-9:
                raise ValueError(f"row {k} sums to {sum(row)!r}, not 1")

    @property
    def g(self) -> int:
        return len(self.rows)

    @property
    def m(self) -> int:
        return len(self.rows[0])

    def row(self, k: int) -> tuple[float, ...]:
        return self.rows[k]

    @classmethod
    def uniform(cls, m: int, g: int = 1) -> "ShardingRatios":
        return cls(tuple(tuple(1.0 / m for _ in range(m)) for _ in range(g)))

    @classmethod
    def proportional_to_flops(cls, spec: ClusterSpec, g: int = 1) -> "ShardingRatios":
        total = spec.total_rate
        row = tuple(d.flops_per_second / total for d in spec.devices)
        return cls(tuple(row for _ in range(g)))

    def to_lists(self) -> list[list[float]]:
        return [list(r) for r in self.rows]


def single_segment(g: Graph) -> SegmentAssignment:
    return SegmentAssignment(segment_of={t: 1 for t in g.tensor_ids}, count=1)


@dataclass(frozen=True)
class Stage:
    comm: Instruction | None
    comps: tuple[Instruction, ...]


def decompose_stages(instrs: tuple[Instruction, ...]) -> list[Stage]:
    """Split a program at communication instructions; each comm opens a stage."""
    stages: list[Stage] = []
    cur_comm: Instruction | None = None
    cur_comps: list[Instruction] = []
    started = False
    for instr in instrs:
        if instr.is_comm:
            if started:
                stages.append(Stage(cur_comm, tuple(cur_comps)))
            cur_comm, cur_comps, started = instr, [], True
        else:
            cur_comps.append(instr)
            started = True
    if started:
        stages.append(Stage(cur_comm, tuple(cur_comps)))
    return stages


def comp_seconds(instr: Instruction, ratio: float, rate: float) -> float:
    """Seconds device with speed `rate` spends on one computation instruction."""
    work = instr.flops * ratio if instr.sharded else float(instr.flops)
    return work / rate


def comp_time(stage: Stage, j: int, b_j: float, spec: ClusterSpec) -> float:
    """Device j's computation seconds for one stage; affine in b_j."""
    rate = spec.devices[j].flops_per_second
    total = 0.0
    for instr in stage.comps:
        total += comp_seconds(instr, b_j, rate)
    return total


def comm_time(instr: Instruction, row: tuple[float, ...], spec: ClusterSpec,
              max_ratio: float | None = None) -> float:
    """Seconds for one collective on a tensor sharded by `row`."""
    if not instr.is_comm:
        raise ValueError(f"{instr.kind} is not a communication instruction")
    model = spec.collectives[instr.kind]
    nbytes = instr.elements * spec.bytes_per_element
    if instr.kind == "grouped_broadcast":
        # m separate broadcasts of the actual (unpadded) shards.
        total = 0.0
        for b in row:
            total += model.latency_s + nbytes * b / model.bytes_per_second
        return total
    if instr.kind == "all_reduce":
        return model.latency_s + nbytes / model.bytes_per_second
    x = max(row) if max_ratio is None else max_ratio
    return model.latency_s + nbytes * x / model.bytes_per_second


def stage_row_index(stage: Stage, assignment: SegmentAssignment) -> int:
    """A stage is priced at the ratio row of its first produced tensor's
    segment (the opening collective's tensor if the stage is pure
    communication)."""
    if stage.comps:
        return assignment.row_index(stage.comps[0].ref)
    assert stage.comm is not None
    return assignment.row_index(stage.comm.ref)


def stage_comm_seconds(stage: Stage, B: ShardingRatios, spec: ClusterSpec,
                       assignment: SegmentAssignment) -> float:
    if stage.comm is None:
        return 0.0
    row_idx = stage_row_index(stage, assignment)
    row = B.row(row_idx)
    comm_idx = assignment.row_index(stage.comm.ref)
    if stage.comm.kind == "all_to_all" and comm_idx != row_idx:
        # Segment-boundary reshard: pad to the larger of the two rows' maxima.
        return comm_time(stage.comm, row, spec,
                         max_ratio=max(max(row), max(B.row(comm_idx))))
    return comm_time(stage.comm, row, spec)


@dataclass(frozen=True)
class StageCost:
    comm_s: float
    comp_s: tuple[float, ...]


@dataclass(frozen=True)
class CostBreakdown:
    stages: tuple[StageCost, ...]
    total_s: float


def iteration_time(instrs: tuple[Instruction, ...], B: ShardingRatios, spec: ClusterSpec,
                   assignment: SegmentAssignment) -> CostBreakdown:
    """Exact model time for one iteration of the program."""
    out: list[StageCost] = []
    total = 0.0
    for stage in decompose_stages(tuple(instrs)):
        row = B.row(stage_row_index(stage, assignment))
        comm_s = stage_comm_seconds(stage, B, spec, assignment)
        comp = [comp_time(stage, j, row[j], spec) for j in range(spec.m)]
        out.append(StageCost(comm_s=comm_s, comp_s=tuple(comp)))
        total += comm_s + (max(comp) if comp else 0.0)
    return CostBreakdown(stages=tuple(out), total_s=total)


def ecost(partial, g: Graph, spec: ClusterSpec, B: ShardingRatios,
          assignment: SegmentAssignment | None = None) -> float:
    """Admissible estimate of the cost still missing from a partial program.

    Counts (a) flops already accrued in the open trailing stage and (b) the
    single-device flops of every loss ancestor without a realized property,
    both charged at the aggregate cluster rate (best-case full sharding);
    communication is charged as zero.  Complete programs cost nothing more.
    """
    if getattr(partial, "complete", False):
        return 0.0
    assignment = assignment or single_segment(g)
    open_work = 0.0
    stages = decompose_stages(tuple(partial.instrs))
    if stages:
        trailing = stages[-1]
        row = B.row(stage_row_index(trailing, assignment))
        for instr in trailing.comps:
            if instr.sharded:
                for b in row:
                    open_work += instr.flops * b
            else:
                open_work += float(instr.flops) * spec.m
    remaining = 0.0
    computed = partial.computed
    for node in g.nodes:
        if node.id in g.loss_ancestors and node.id not in computed:
            remaining += node_flops(g, node)
    return (open_work + remaining) / spec.total_rate


@dataclass(frozen=True)
class FitResult:
    latency_s: float
    bytes_per_second: float
    residual: float


def fit_linear(samples: list[tuple[float, float]]) -> FitResult:
    """Least-squares affine fit time = latency + bytes/bandwidth over
    (bytes, seconds) samples."""
    if len(samples) < 2:
        raise ValueError("need at least two profile samples")
    x = np.array([s[0] for s in samples], dtype=float)
    y = np.array([s[1] for s in samples], dtype=float)
    if np.unique(x).size < 2:
        raise ValueError("need at least two distinct transfer sizes")
    slope, intercept = np.polyfit(x, y, 1)
    if slope <= 0:
        raise ValueError(f"non-positive fitted slope {slope!r}; samples are not bandwidth-limited")
    residual = math.sqrt(float(np.mean((intercept + slope * x - y) ** 2)))
    return FitResult(latency_s=float(intercept), bytes_per_second=1.0 / float(slope),
                     residual=residual)
