"""Reference semantics: run graphs on one device and programs on m simulated ones.

The distributed runner keeps, per distributed tensor, the list of per-device
numpy arrays and executes instructions in lock step.  Sharding always takes
contiguous slices: device j owns the slice from sum(sizes[:j]) to
sum(sizes[:j+1]) along the shard axis, where the sizes come from the plan's
shard table.  Zero-size shards are legal.  All arithmetic is float64; the
equivalence check passes at 1e-9 relative error.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .graph_ir import Graph
from .theory import (ALL_GATHER, ALL_REDUCE, IDENTITY, Instruction, Property,
                     form_of_dist_id)

UNARY_FNS = {
    "exp": np.exp,
    "neg": np.negative,
    "relu": lambda x: np.maximum(x, 0.0),
    "sigmoid": lambda x: 1.0 / (1.0 + np.exp(-x)),
    "tanh": np.tanh,
}


class ExecutionError(RuntimeError):
    """Raised when a program is not executable (an unsound plan)."""


def eval_reference(g: Graph, inputs: dict[str, np.ndarray]) -> dict[str, np.ndarray]:
    """Evaluate every tensor of the graph on a single device."""
    env: dict[str, np.ndarray] = {}
    for node in g.nodes:
        if node.op in ("Placeholder", "Parameter"):
            try:
                value = np.asarray(inputs[node.id], dtype=np.float64)
            except KeyError:
                raise ExecutionError(f"no binding for source tensor {node.id!r}") from None
            if value.shape != node.shape:
                raise ExecutionError(f"binding for {node.id!r} has shape {value.shape}, "
                                     f"want {node.shape}")
            env[node.id] = value
        elif node.op == "MatMul":
            env[node.id] = env[node.inputs[0]] @ env[node.inputs[1]]
        elif node.op == "ElemwiseUnary":
            env[node.id] = UNARY_FNS[node.tag](env[node.inputs[0]])
        elif node.op == "ElemwiseBinary":
            a, b = env[node.inputs[0]], env[node.inputs[1]]
            env[node.id] = a + b if node.tag == "add" else a * b
        elif node.op == "Reduce":
            env[node.id] = np.sum(env[node.inputs[0]], axis=node.dims)
        elif node.op == "Identity":
            env[node.id] = env[node.inputs[0]]
        else:  # pragma: no cover
            raise ExecutionError(f"unsupported op {node.op}")
    return env


def run_single(g: Graph, inputs: dict[str, np.ndarray]) -> np.ndarray:
    return eval_reference(g, inputs)[g.loss]


# ---------------------------------------------------------------------------
# Collective primitives (simulated; device order is the concatenation order).

def coll_all_gather(instances: list[np.ndarray], axis: int) -> list[np.ndarray]:
    full = np.concatenate(instances, axis=axis)
    return [full for _ in instances]


def coll_all_reduce(instances: list[np.ndarray]) -> list[np.ndarray]:
    total = instances[0]
    for inst in instances[1:]:
        total = total + inst
    return [total for _ in instances]


def slice_by_sizes(value: np.ndarray, axis: int, sizes: list[int]) -> list[np.ndarray]:
    if sum(sizes) != value.shape[axis]:
        raise ExecutionError(f"shard sizes {sizes} do not cover extent {value.shape[axis]}")
    out = []
    offset = 0
    for s in sizes:
        index = [slice(None)] * value.ndim
        index[axis] = slice(offset, offset + s)
        out.append(value[tuple(index)])
        offset += s
    return out


def coll_reduce_scatter(instances: list[np.ndarray], axis: int, sizes: list[int]) -> list[np.ndarray]:
    total = coll_all_reduce(instances)[0]
    return slice_by_sizes(total, axis, sizes)


def coll_all_to_all(instances: list[np.ndarray], d1: int, d2: int, sizes_d2: list[int]) -> list[np.ndarray]:
    full = np.concatenate(instances, axis=d1)
    return slice_by_sizes(full, d2, sizes_d2)


# ---------------------------------------------------------------------------


def table_sizes(shard_table: dict, ref: str, axis: int, m: int) -> list[int]:
    try:
        sizes = shard_table[(ref, axis)]
    except KeyError:
        raise ExecutionError(f"shard table lacks sizes for tensor {ref!r} axis {axis}") from None
    if len(sizes) != m:
        raise ExecutionError(f"shard table entry for {ref!r} axis {axis} has {len(sizes)} "
                             f"entries for {m} devices")
    return list(sizes)


def execute_instruction(instr: Instruction, env: dict[str, list[np.ndarray]], m: int,
                        inputs: dict[str, np.ndarray], shard_table: dict) -> None:
    """Run one instruction on all devices, updating env[instr.output]."""

    def operand(i: int = 0) -> list[np.ndarray]:
        did = instr.operands[i]
        try:
            return env[did]
        except KeyError:
            raise ExecutionError(f"instruction {instr.canonical()} reads unrealized "
                                 f"tensor {did!r}") from None

    kind = instr.kind
    try:
        if kind in ("placeholder", "parameter"):
            value = np.asarray(inputs[instr.ref], dtype=np.float64)
            env[instr.output] = [value for _ in range(m)]
        elif kind in ("placeholder_shard", "parameter_shard"):
            value = np.asarray(inputs[instr.ref], dtype=np.float64)
            sizes = table_sizes(shard_table, instr.ref, instr.axis, m)
            env[instr.output] = slice_by_sizes(value, instr.axis, sizes)
        elif kind == "matmul":
            env[instr.output] = [a @ b for a, b in zip(operand(0), operand(1))]
        elif kind == "elemwise_unary":
            fn = UNARY_FNS[instr.tag]
            env[instr.output] = [fn(x) for x in operand(0)]
        elif kind == "elemwise_binary":
            if instr.tag == "add":
                env[instr.output] = [a + b for a, b in zip(operand(0), operand(1))]
            else:
                env[instr.output] = [a * b for a, b in zip(operand(0), operand(1))]
        elif kind == "reduce":
            env[instr.output] = [np.sum(x, axis=instr.dims) for x in operand(0)]
        elif kind == "identity":
            env[instr.output] = list(operand(0))
        elif kind == "all_reduce":
            env[instr.output] = coll_all_reduce(operand(0))
        elif kind in ("all_gather", "grouped_broadcast"):
            env[instr.output] = coll_all_gather(operand(0), instr.axis)
        elif kind == "reduce_scatter":
            sizes = table_sizes(shard_table, instr.ref, instr.axis, m)
            env[instr.output] = coll_reduce_scatter(operand(0), instr.axis, sizes)
        elif kind == "all_to_all":
            sizes = table_sizes(shard_table, instr.ref, instr.axis2, m)
            env[instr.output] = coll_all_to_all(operand(0), instr.axis, instr.axis2, sizes)
        else:
            raise ExecutionError(f"unsupported instruction kind {kind!r}")
    except ValueError as e:
        # numpy shape mismatches mean the plan slices tensors inconsistently
        raise ExecutionError(f"shape mismatch executing {instr.canonical()}: {e}") from e
    except KeyError as e:
        raise ExecutionError(f"missing binding executing {instr.canonical()}: {e}") from e


def check_form(prop: Property, instances: list[np.ndarray], reference: np.ndarray,
               rtol: float = 0.0) -> bool:
    """Does the distributed tensor satisfy property `prop` w.r.t. `reference`?"""
    if prop.kind == IDENTITY:
        realized = instances[0]
        if not all(np.array_equal(inst, instances[0]) for inst in instances[1:]):
            return False
    elif prop.kind == ALL_GATHER:
        realized = np.concatenate(instances, axis=prop.axis)
    elif prop.kind == ALL_REDUCE:
        realized = coll_all_reduce(instances)[0]
    else:
        raise ValueError(f"cannot check guard property {prop}")
    if realized.shape != reference.shape:
        return False
    if rtol == 0.0:
        return bool(np.array_equal(realized, reference))
    scale = np.maximum(np.abs(reference), 1.0)
    return bool(np.all(np.abs(realized - reference) <= rtol * scale))


def materialize_loss(env: dict[str, list[np.ndarray]], loss_ref: str, m: int) -> list[np.ndarray]:
    """Per-device loss values, applying the completing collective if the final
    loss property is AllReduce-form (the no-op closure for m=1)."""
    full = f"{loss_ref}@full"
    if full in env:
        return env[full]
    partial = f"{loss_ref}@partial"
    if partial in env:
        return coll_all_reduce(env[partial])
    raise ExecutionError(f"program realizes no property of the loss tensor {loss_ref!r}")


def build_shard_table(g: Graph, B, assignment) -> dict[tuple[str, int], list[int]]:
    """Integer shard sizes for every (tensor, axis) pair, rounded from the
    tensor's segment's ratio row."""
    from .load_balancer import round_shards
    table: dict[tuple[str, int], list[int]] = {}
    for t in g.tensors.values():
        row = B.row(assignment.row_index(t.id))
        for axis, extent in enumerate(t.shape):
            table[(t.id, axis)] = round_shards(extent, row)
    return table


def run_distributed(program, m: int, inputs: dict[str, np.ndarray], shard_table: dict,
                    debug: bool = False, reference: dict[str, np.ndarray] | None = None
                    ) -> list[np.ndarray]:
    """Execute a distributed program; returns the per-device loss values.

    With debug=True (and reference values from eval_reference) the declared
    property of every produced distributed tensor is re-checked after each
    instruction.
    """
    if hasattr(program, "instrs"):
        instrs, loss_ref = program.instrs, program.loss
    else:
        instrs = tuple(program)
        if not instrs:
            raise ExecutionError("cannot run an empty program")
        loss_ref = instrs[-1].ref
    env: dict[str, list[np.ndarray]] = {}
    for instr in instrs:
        execute_instruction(instr, env, m, inputs, shard_table)
        if debug:
            assert reference is not None, "debug mode needs reference values"
            prop = form_of_dist_id(instr.output)
            if not check_form(prop, env[instr.output], reference[prop.ref], rtol=1e-9):
                raise ExecutionError(f"{instr.canonical()} violates its declared "
                                     f"property {prop}")
    return materialize_loss(env, loss_ref, m)


@dataclass(frozen=True)
class EquivalenceReport:
    trials: int
    max_rel_err: float
    passed: bool


def random_inputs(g: Graph, rng: np.random.Generator, integer: bool = False
                  ) -> dict[str, np.ndarray]:
    out = {}
    for node in g.nodes:
        if node.op in ("Placeholder", "Parameter"):
            if integer:
                out[node.id] = rng.integers(-4, 5, size=node.shape).astype(np.float64)
            else:
                out[node.id] = rng.standard_normal(node.shape)
    return out


def check_equivalence(g: Graph, program, m: int, shard_table: dict, trials: int = 5,
                      seed: int = 0, rtol: float = 1e-9) -> EquivalenceReport:
    """Compare run_single against every device's loss over seeded random inputs."""
    max_err = 0.0
    for trial in range(trials):
        rng = np.random.default_rng(seed + trial)
        inputs = random_inputs(g, rng)
        expected = run_single(g, inputs)
        losses = run_distributed(program, m, inputs, shard_table)
        scale = max(abs(float(expected)), 1.0)
        for value in losses:
            err = abs(float(value) - float(expected)) / scale
            max_err = max(max_err, err)
    return EquivalenceReport(trials=trials, max_rel_err=max_err, passed=max_err <= rtol)
