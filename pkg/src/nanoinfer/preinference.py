"""Pre-inference: pick a scheme and backend per operator and plan all memory.

Everything here runs once per session.  The resulting ExecutionPlan is
immutable: per-op algorithm choice, backend assignment, explicit transfer
steps at backend boundaries, pre-transformed weights, and byte offsets into
one pre-sized pool per backend, so the execution loop never allocates.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from enum import Enum

from .errors import GraphValidationError
from .graph import Graph, OpKind, OpNode, infer_shapes
from .kernels import (
    ConvParams, MatDims, strassen_scratch_elems,
)
from .tensor import LANES, Shape, channel_blocks
from .winograd import (
    DEFAULT_SPACING, WeightCache, choose_tile, generate_transforms,
    weight_transform, winograd_supported,
)

CPU_FLOPS = 2e9  # default capability when no frequency table is available
UNKNOWN_GPU_FLOPS = 4e9  # unlisted GPUs are assumed faster than CPU
T_SCHEDULE_OPENCL_MS = 0.05  # average cost of one kernel-enqueue API call
T_SCHEDULE_VULKAN_MS = 0.01  # command-buffer submission is cheaper

# measured capabilities (multiplies per second) of common mobile GPUs
GPU_FLOPS = {
    "Mali-T860": 6.83e9,
    "Mali-T880": 6.83e9,
    "Mali-G51": 6.83e9,
    "Mali-G52": 6.83e9,
    "Mali-G71": 31.61e9,
    "Mali-G72": 31.61e9,
    "Mali-G76": 31.61e9,
    "Adreno (TM) 505": 3.19e9,
    "Adreno (TM) 506": 4.74e9,
    "Adreno (TM) 512": 14.23e9,
    "Adreno (TM) 530": 25.40e9,
    "Adreno (TM) 540": 42.74e9,
    "Adreno (TM) 615": 16.77e9,
    "Adreno (TM) 616": 18.77e9,
    "Adreno (TM) 618": 18.77e9,
    "Adreno (TM) 630": 42.74e9,
    "Adreno (TM) 640": 42.74e9,
}


@dataclass(frozen=True)
class CostModel:
    """Capability constants of one backend."""

    flops: float
    t_schedule_ms: float = 0.0

    def __post_init__(self):
        if not self.flops > 0:
            raise GraphValidationError(f"flops must be positive, got {self.flops}")
        if self.t_schedule_ms < 0:
            raise GraphValidationError("t_schedule_ms must be >= 0")


CPU_COST = CostModel(flops=CPU_FLOPS, t_schedule_ms=0.0)


def gpu_cost_model(name: str, api: str = "opencl") -> CostModel:
    """Cost entry for a named GPU under a graphics API's dispatch overhead."""
    t = T_SCHEDULE_VULKAN_MS if api.lower() == "vulkan" else T_SCHEDULE_OPENCL_MS
    return CostModel(flops=GPU_FLOPS.get(name, UNKNOWN_GPU_FLOPS), t_schedule_ms=t)


def load_cost_models(path) -> dict[str, CostModel]:
    """Read {backend_name: {flops, t_schedule_ms}} overrides from JSON."""
    with open(path, "r", encoding="utf-8") as fh:
        raw = json.load(fh)
    return {
        name: CostModel(flops=float(entry["flops"]),
                        t_schedule_ms=float(entry.get("t_schedule_ms", 0.0)))
        for name, entry in raw.items()
    }


def op_cost(mul: int, model: CostModel) -> float:
    """Milliseconds to run an operator of `mul` multiplies on a backend.

    mul / flops * 1000, plus the backend's fixed dispatch overhead (zero
    on CPU, t_schedule on GPU-like backends).
    """
    if mul < 0:
        raise GraphValidationError(f"negative multiply count {mul}")
    return mul / model.flops * 1000.0 + model.t_schedule_ms


def mul_count(node: OpNode, shapes: dict[str, Shape]) -> int:
    """Multiply count of one operator; the complexity input of op_cost."""
    out = shapes[node.outputs[0]]
    if node.kind is OpKind.CONV2D:
        _, out_c, oh, ow = out.dims
        (kh, kw), _, _ = node.conv_geometry()
        in_c = int(node.attrs["in_c"])
        group = int(node.attrs.get("group", 1))
        return oh * ow * out_c * (in_c // group) * kh * kw
    if node.kind is OpKind.MATMUL:
        n = out.dims[0]
        return n * int(node.attrs["in_features"]) * int(node.attrs["out_features"])
    return out.element_count


class SchemeKind(Enum):
    MATMUL_STRASSEN = "matmul"
    SLIDING_WINDOW = "sliding"
    WINOGRAD = "winograd"


@dataclass(frozen=True)
class SchemeChoice:
    kind: SchemeKind
    tile: int | None = None  # output tile size for the winograd scheme

    def label(self) -> str:
        if self.kind is SchemeKind.WINOGRAD:
            return f"winograd{self.tile}"
        return self.kind.value


def _conv_params(node: OpNode) -> ConvParams:
    (kh, kw), (sh, sw), (ph, pw) = node.conv_geometry()
    return ConvParams(kh, kw, sh, sw, ph, pw, int(node.attrs["in_c"]),
                      int(node.attrs["out_c"]), int(node.attrs.get("group", 1)),
                      node.attrs.get("activation", "none") == "relu")


def select_scheme_for(node: OpNode, shapes: dict[str, Shape]) -> SchemeChoice:
    p = _conv_params(node)
    out = shapes[node.outputs[0]]
    _, _, oh, ow = out.dims
    if p.kh == 1 and p.kw == 1:
        if p.stride_h == 1 and p.stride_w == 1 and p.pad_h == 0 \
                and p.pad_w == 0 and p.group == 1:
            return SchemeChoice(SchemeKind.MATMUL_STRASSEN)
        return SchemeChoice(SchemeKind.SLIDING_WINDOW)
    if not winograd_supported(p):
        return SchemeChoice(SchemeKind.SLIDING_WINDOW)
    n_hat = choose_tile(p.kh, p.in_c, p.out_c, ow, oh)
    if n_hat == 1:
        return SchemeChoice(SchemeKind.SLIDING_WINDOW)
    return SchemeChoice(SchemeKind.WINOGRAD, tile=n_hat)


def select_schemes(g: Graph) -> dict[str, SchemeChoice]:
    """Scheme per Conv2D node: k = 1 goes to Strassen matmul, otherwise the
    tile chooser decides between sliding window and Winograd."""
    return {node.id: select_scheme_for(node, g.tensor_shapes)
            for node in g.nodes if node.kind is OpKind.CONV2D}


@dataclass(frozen=True)
class BackendSpec:
    """Planning view of a backend: name, cost constants, supported op kinds."""

    name: str
    cost: CostModel
    supported: frozenset[OpKind] | None = None  # None means everything

    def supports(self, kind: OpKind) -> bool:
        return self.supported is None or kind in self.supported


@dataclass
class BackendPlan:
    candidate: str
    assignment: dict[str, str]  # node id -> backend name
    op_costs: dict[str, float]
    total_cost_ms: float


def plan_for_candidate(g: Graph, candidate: BackendSpec,
                       cpu: BackendSpec) -> BackendPlan:
    assignment = {}
    costs = {}
    total = 0.0
    for node in g.nodes:
        target = candidate if candidate.supports(node.kind) else cpu
        mul = mul_count(node, g.tensor_shapes)
        cost = op_cost(mul, target.cost)
        assignment[node.id] = target.name
        costs[node.id] = cost
        total += cost
    return BackendPlan(candidate.name, assignment, costs, total)


def select_backend(g: Graph, backends: list[BackendSpec]) -> BackendPlan:
    """Minimal-total-cost plan over candidate backends with CPU fallback.

    Each candidate plan sums per-op cost, billing ops it cannot run at CPU
    rates (hybrid).  Ties go to CPU, which must be first and support all ops.
    """
    cpu = backends[0]
    if cpu.supported is not None:
        raise GraphValidationError("first backend must be CPU supporting all ops")
    best = plan_for_candidate(g, cpu, cpu)
    for candidate in backends[1:]:
        plan = plan_for_candidate(g, candidate, cpu)
        if plan.total_cost_ms < best.total_cost_ms:
            best = plan
    return best


def _align(n: int, alignment: int) -> int:
    return -(-n // alignment) * alignment


@dataclass
class MemoryPlan:
    pool_size: int
    offsets: dict[str, int]
    sizes: dict[str, int]
    lifetimes: dict[str, tuple[int, int]]


def plan_intervals(items: list[tuple[str, int, int, int]],
                   alignment: int = 64) -> MemoryPlan:
    """First-fit offsets for (tensor, bytes, first_write, last_read) items.

    Walks the op timeline: at each step, buffers whose last reader has
    executed are freed, then new buffers go to the lowest free gap that
    fits.  Sizes are rounded up to the alignment so every offset stays
    aligned; pool_size is the peak watermark.
    """
    sizes = {tid: _align(max(size, 0), alignment) or 0
             for tid, size, _, _ in items}
    by_start: dict[int, list[tuple[str, int, int, int]]] = {}
    for item in items:
        by_start.setdefault(item[2], []).append(item)
    live: list[tuple[int, int, str, int]] = []  # (offset, size, tid, last_read)
    offsets: dict[str, int] = {}
    lifetimes = {tid: (first, last) for tid, _, first, last in items}
    pool = 0
    steps = sorted(by_start)
    for step in steps:
        live = [entry for entry in live if entry[3] >= step]
        live.sort()
        for tid, _, first, last in by_start[step]:
            size = sizes[tid]
            if size == 0:
                offsets[tid] = 0
                continue
            cursor = 0
            for off, sz, _, _ in live:
                if cursor + size <= off:
                    break
                cursor = max(cursor, off + sz)
            offsets[tid] = cursor
            live.append((cursor, size, tid, last))
            live.sort()
            pool = max(pool, cursor + size)
    return MemoryPlan(pool_size=pool, offsets=offsets, sizes=sizes,
                      lifetimes=lifetimes)


def packed_bytes(shape: Shape) -> int:
    """Bytes of a shape stored as packed float32 (NC4HW4 for rank 4)."""
    dims = shape.dims
    if len(dims) == 4:
        n, c, h, w = dims
        return n * channel_blocks(c) * h * w * LANES * 4
    return shape.element_count * 4


def _scratch_elems_for(node: OpNode, scheme: SchemeChoice | None,
                       shapes: dict[str, Shape]) -> int:
    """Working-memory elements an op needs beyond inputs and outputs."""
    if node.kind is OpKind.MATMUL:
        n, c, h, w = shapes[node.inputs[0]].dims
        in_f = int(node.attrs["in_features"])
        out_f = int(node.attrs["out_features"])
        dims = MatDims(n, in_f, out_f)
        return (n * c * h * w + n * in_f + n * out_f
                + strassen_scratch_elems(dims))
    if node.kind is not OpKind.CONV2D or scheme is None:
        return 0
    p = _conv_params(node)
    n, c, h, w = shapes[node.inputs[0]].dims
    _, out_c, oh, ow = shapes[node.outputs[0]].dims
    cpad = channel_blocks(c) * LANES
    opad = channel_blocks(out_c) * LANES
    if scheme.kind is SchemeKind.MATMUL_STRASSEN:
        # per-image products over unpacked channels, plus the repack staging
        dims = MatDims(out_c, c, h * w)
        return (n * c * h * w + n * out_c * oh * ow + out_c * oh * ow
                + strassen_scratch_elems(dims))
    if scheme.kind is SchemeKind.WINOGRAD:
        nh = scheme.tile
        alpha = nh + p.kh - 1
        tiles_h, tiles_w = -(-oh // nh), -(-ow // nh)
        batch = max((ow * oh) // (nh * nh), 1)
        padded_in = n * cpad * ((tiles_h - 1) * nh + alpha) * ((tiles_w - 1) * nh + alpha)
        per_batch = batch * (cpad + cpad + opad + opad) * alpha * alpha
        ybuf = n * tiles_h * nh * tiles_w * nh * opad
        return padded_in + per_batch + ybuf
    # sliding window: padded input, gathered windows, and the accumulators
    hp, wp = h + 2 * p.pad_h, w + 2 * p.pad_w
    windows = p.kh * p.kw * n * oh * ow * cpad if p.group == 1 else 0
    return n * cpad * hp * wp + windows + n * oh * ow * opad


@dataclass
class TransferStep:
    tensor: str
    src: str
    dst: str


@dataclass
class OpStep:
    node: OpNode
    scheme: SchemeChoice | None
    backend: str
    scratch_id: str | None


@dataclass
class ExecutionPlan:
    """Immutable output of pre-inference, shared by all sessions over it."""

    graph: Graph
    steps: list[TransferStep | OpStep]
    schemes: dict[str, SchemeChoice]
    assignment: dict[str, str]
    op_costs: dict[str, float]
    total_cost_ms: float
    muls: dict[str, int]
    memory: dict[str, MemoryPlan]  # backend name -> plan over "tid@backend"
    weight_cache: WeightCache
    spacing: float
    tensor_homes: dict[str, str]  # tensor id -> producing backend

    @property
    def pool_sizes(self) -> dict[str, int]:
        return {name: plan.pool_size for name, plan in self.memory.items()}

    def transfers(self) -> list[TransferStep]:
        return [s for s in self.steps if isinstance(s, TransferStep)]

    def dump(self) -> dict:
        ops = []
        for step in self.steps:
            if isinstance(step, OpStep):
                node = step.node
                ops.append({
                    "id": node.id,
                    "kind": node.kind.value,
                    "scheme": step.scheme.label() if step.scheme else None,
                    "backend": step.backend,
                    "mul": self.muls[node.id],
                    "cost_ms": self.op_costs[node.id],
                })
        return {
            "ops": ops,
            "transfers": [{"tensor": t.tensor, "from": t.src, "to": t.dst}
                          for t in self.transfers()],
            "pool_size": sum(self.pool_sizes.values()),
            "total_cost_ms": self.total_cost_ms,
        }


def build_steps(g: Graph, assignment: dict[str, str],
                schemes: dict[str, SchemeChoice], cpu_name: str,
                order: list[OpNode] | None = None,
                ) -> tuple[list[TransferStep | OpStep], dict[str, str]]:
    """Op sequence with explicit transfers at backend boundaries.

    Graph inputs start on CPU; outputs are delivered on CPU at the end.
    """
    homes = {tid: cpu_name for tid in g.inputs}
    placed: set[tuple[str, str]] = {(tid, cpu_name) for tid in g.inputs}
    steps: list[TransferStep | OpStep] = []
    for node in (order if order is not None else g.nodes):
        backend = assignment[node.id]
        for tid in node.inputs:
            if (tid, backend) not in placed:
                steps.append(TransferStep(tid, homes[tid], backend))
                placed.add((tid, backend))
        steps.append(OpStep(node, schemes.get(node.id), backend,
                            scratch_id=f"{node.id}#scratch"))
        for tid in node.outputs:
            homes[tid] = backend
            placed.add((tid, backend))
    for tid in g.outputs:
        if (tid, cpu_name) not in placed:
            steps.append(TransferStep(tid, homes[tid], cpu_name))
            placed.add((tid, cpu_name))
    return steps, homes


def plan_memory(g: Graph, order: list[OpNode] | None = None, *,
                schemes: dict[str, SchemeChoice] | None = None,
                alignment: int = 64,
                assignment: dict[str, str] | None = None,
                steps: list[TransferStep | OpStep] | None = None,
                cpu_name: str = "cpu") -> dict[str, MemoryPlan]:
    """Pool layout per backend namespace for the given execution order.

    Graph inputs live in caller-provided staging buffers and are not pooled;
    everything produced by a step is, including per-op scratch, which lives
    only for its own step.  Copies of a tensor on another backend are pooled
    in that backend's namespace from the transfer step to their last reader.
    """
    nodes = order if order is not None else g.nodes
    if schemes is None:
        schemes = select_schemes(g)
    if steps is None:
        if assignment is None:
            assignment = {node.id: cpu_name for node in nodes}
        steps, _ = build_steps(g, assignment, schemes, cpu_name, order=nodes)

    # last step index reading each (tensor, backend) residency
    last_read: dict[tuple[str, str], int] = {}
    first_write: dict[tuple[str, str], int] = {}
    for idx, step in enumerate(steps):
        if isinstance(step, TransferStep):
            last_read[(step.tensor, step.src)] = idx
            first_write[(step.tensor, step.dst)] = idx
        else:
            for tid in step.node.inputs:
                last_read[(tid, step.backend)] = idx
            for tid in step.node.outputs:
                first_write[(tid, step.backend)] = idx
    end = len(steps)
    for tid in g.outputs:
        last_read[(tid, cpu_name)] = end  # outputs survive the whole run

    items_by_backend: dict[str, list[tuple[str, int, int, int]]] = {}
    for (tid, backend), start in first_write.items():
        if tid in g.inputs and backend == cpu_name:
            continue
        size = packed_bytes(g.tensor_shapes[tid])
        last = last_read.get((tid, backend), start)
        items_by_backend.setdefault(backend, []).append((tid, size, start, last))
    for idx, step in enumerate(steps):
        if isinstance(step, OpStep):
            scratch = _scratch_elems_for(step.node, step.scheme, g.tensor_shapes)
            if scratch:
                items_by_backend.setdefault(step.backend, []).append(
                    (step.scratch_id, scratch * 4, idx, idx))
    return {backend: plan_intervals(items, alignment)
            for backend, items in items_by_backend.items()}


def pre_infer(g: Graph, backends: list[BackendSpec],
              spacing: float = DEFAULT_SPACING,
              alignment: int = 64,
              force_backend: str | None = None) -> ExecutionPlan:
    """Compose scheme selection, backend selection, weight transforms, and
    the memory plan into one immutable execution plan.

    ``force_backend`` skips the cost comparison and plans for that candidate
    (unsupported ops still fall back to CPU).
    """
    if not g.tensor_shapes:
        g = infer_shapes(g)
    schemes = select_schemes(g)
    if force_backend is None:
        backend_plan = select_backend(g, backends)
    else:
        by_name = {b.name: b for b in backends}
        backend_plan = plan_for_candidate(g, by_name[force_backend],
                                          backends[0])
    steps, homes = build_steps(g, backend_plan.assignment, schemes,
                               backends[0].name)
    memory = plan_memory(g, schemes=schemes, steps=steps,
                         alignment=alignment, cpu_name=backends[0].name)
    muls = {node.id: mul_count(node, g.tensor_shapes) for node in g.nodes}

    cache = WeightCache()
    for node in g.nodes:
        scheme = schemes.get(node.id)
        if scheme is not None and scheme.kind is SchemeKind.WINOGRAD:
            t = generate_transforms(scheme.tile, int(node.conv_geometry()[0][0]),
                                    spacing)
            cache.put(node.id, weight_transform(node.weights, t))
    return ExecutionPlan(
        graph=g,
        steps=steps,
        schemes=schemes,
        assignment=backend_plan.assignment,
        op_costs=backend_plan.op_costs,
        total_cost_ms=backend_plan.total_cost_ms,
        muls=muls,
        memory=memory,
        weight_cache=cache,
        spacing=spacing,
        tensor_homes=homes,
    )
