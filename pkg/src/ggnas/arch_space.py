"""Candidate operation set, cell DAG topology, network macro-layout, genotypes.

Node numbering inside a cell: 0 and 1 are the two input nodes, 2..N+1 the
intermediate nodes. Edges are listed grouped by target node with sources in
topological order, so for N=2 the five edges are
(0->2), (1->2), (0->3), (1->3), (2->3).
"""

import json
from dataclasses import dataclass
from enum import Enum


class OpKind(Enum):
    MAX_POOL_3X3 = "max_pool_3x3"
    SKIP_CONNECT = "skip_connect"
    CONV_3X3 = "conv_3x3"
    ZERO = "zero"
    SEP_CONV_3X3 = "sep_conv_3x3"
    DIL_SEP_CONV_3X3_R2 = "dil_sep_conv_3x3_r2"
    DIL_SEP_CONV_3X3_R4 = "dil_sep_conv_3x3_r4"
    DIL_SEP_CONV_3X3_R8 = "dil_sep_conv_3x3_r8"

    @property
    def kernel_size(self):
        return _OP_META[self][0]

    @property
    def dilation(self):
        return _OP_META[self][1]

    @property
    def is_parameterless(self):
        return _OP_META[self][2]


# (kernel size, dilation, parameterless)
_OP_META = {
    OpKind.MAX_POOL_3X3: (3, 1, True),
    OpKind.SKIP_CONNECT: (1, 1, True),
    OpKind.CONV_3X3: (3, 1, False),
    OpKind.ZERO: (0, 1, True),
    OpKind.SEP_CONV_3X3: (3, 1, False),
    OpKind.DIL_SEP_CONV_3X3_R2: (3, 2, False),
    OpKind.DIL_SEP_CONV_3X3_R4: (3, 4, False),
    OpKind.DIL_SEP_CONV_3X3_R8: (3, 8, False),
}

NUM_OPS = len(OpKind)
ZERO_INDEX = list(OpKind).index(OpKind.ZERO)


def candidate_ops():
    """The 8 candidate operations in their fixed index order.

    This order indexes the operation axis of every logit matrix, sampled
    distribution, and latency-table slice.
    """
    return list(OpKind)


def op_index(kind):
    return list(OpKind).index(kind)


@dataclass(frozen=True)
class CellSpec:
    num_intermediate: int
    edges: tuple  # ((src, dst), ...) grouped by dst
    is_reduction: bool
    num_inputs: int = 2

    @property
    def num_edges(self):
        return len(self.edges)

    def edge_stride(self, edge_idx):
        src, _ = self.edges[edge_idx]
        return 2 if self.is_reduction and src < self.num_inputs else 1

    def incoming(self, node):
        """Edge indices whose target is `node`."""
        return tuple(i for i, (_, dst) in enumerate(self.edges) if dst == node)

    def intermediate_nodes(self):
        return tuple(range(self.num_inputs, self.num_inputs + self.num_intermediate))


def build_cell_topology(num_intermediate, is_reduction=False):
    if num_intermediate < 1:
        raise ValueError(f"num_intermediate must be >= 1, got {num_intermediate}")
    edges = []
    for i in range(num_intermediate):
        dst = 2 + i
        for src in range(2 + i):
            edges.append((src, dst))
    return CellSpec(num_intermediate=num_intermediate, edges=tuple(edges),
                    is_reduction=is_reduction)


def num_edges_for(num_intermediate):
    """p = N(N+3)/2 for N intermediate nodes."""
    return num_intermediate * (num_intermediate + 3) // 2


@dataclass(frozen=True)
class StemSpec:
    # Three 3x3 convolutions; strides 2,1,2 give the backbone its stride-4 entry.
    channels: tuple
    strides: tuple = (2, 1, 2)


@dataclass(frozen=True)
class HeadSpec:
    rates: tuple
    branch_channels: int
    num_classes: int


@dataclass(frozen=True)
class NetworkLayout:
    stem: StemSpec
    cells: tuple            # CellSpec per position
    cell_channels: tuple    # width of each cell
    reductions: tuple
    head: HeadSpec
    initial_channels: int
    num_classes: int
    input_size: int

    @property
    def num_cells(self):
        return len(self.cells)

    @property
    def num_intermediate(self):
        return self.cells[0].num_intermediate

    @property
    def num_edges(self):
        return self.cells[0].num_edges

    @property
    def total_stride(self):
        return 4 * 2 ** len(self.reductions)

    def cell_input_resolution(self, k):
        """Spatial size of the (preprocessed) inputs entering cell k."""
        res = self.input_size // 4
        for r in self.reductions:
            if r < k:
                res //= 2
        return res

    def cell_output_resolution(self, k):
        res = self.cell_input_resolution(k)
        return res // 2 if self.cells[k].is_reduction else res

    def fingerprint(self):
        return Fingerprint(
            num_cells=self.num_cells,
            num_intermediate=self.num_intermediate,
            reductions=self.reductions,
            initial_channels=self.initial_channels,
        )


def build_network_layout(config):
    """Assemble the macro layout (stem, K cells, head) from a SearchConfig."""
    k = config.num_cells
    if k < 1:
        raise ValueError(f"num_cells must be >= 1, got {k}")
    reductions = tuple(config.resolved_reductions())
    if list(reductions) != sorted(set(reductions)):
        raise ValueError(f"reduction positions must be strictly increasing: {reductions}")
    if any(r < 0 or r >= k for r in reductions):
        raise ValueError(f"reduction positions out of range [0, {k}): {reductions}")
    half = max(config.initial_channels // 2, 1)
    stem = StemSpec(channels=(half, half, config.initial_channels))
    cells = []
    channels = []
    width = config.initial_channels
    for i in range(k):
        is_red = i in reductions
        if is_red:
            width *= 2
        cells.append(build_cell_topology(config.num_intermediate, is_red))
        channels.append(width)
    head = HeadSpec(rates=tuple(config.aspp_rates),
                    branch_channels=config.aspp_channels,
                    num_classes=config.num_classes)
    return NetworkLayout(
        stem=stem,
        cells=tuple(cells),
        cell_channels=tuple(channels),
        reductions=reductions,
        head=head,
        initial_channels=config.initial_channels,
        num_classes=config.num_classes,
        input_size=config.image_size,
    )


GENOTYPE_VERSION = 1


@dataclass(frozen=True)
class Fingerprint:
    num_cells: int
    num_intermediate: int
    reductions: tuple
    initial_channels: int


@dataclass(frozen=True)
class CellGenotype:
    index: int
    # ((edge_idx, OpKind), ...) for the kept edges, sorted by edge index.
    edges: tuple

    def chosen(self):
        return dict(self.edges)


@dataclass(frozen=True)
class Genotype:
    fingerprint: Fingerprint
    cells: tuple
    version: int = GENOTYPE_VERSION

    def pruned_edges(self, cell_index):
        total = num_edges_for(self.fingerprint.num_intermediate)
        kept = {e for e, _ in self.cells[cell_index].edges}
        return tuple(i for i in range(total) if i not in kept)


class GenotypeFormatError(ValueError):
    pass


def validate_genotype(genotype, layout):
    """Return the full list of violations (empty means valid)."""
    violations = []
    fp = genotype.fingerprint
    lfp = layout.fingerprint()
    if fp != lfp:
        violations.append(f"fingerprint mismatch: genotype {fp} vs layout {lfp}")
    if len(genotype.cells) != layout.num_cells:
        violations.append(
            f"cell count {len(genotype.cells)} does not match layout {layout.num_cells}")
    topo = build_cell_topology(layout.num_intermediate)
    p = topo.num_edges
    for cell in genotype.cells:
        if not 0 <= cell.index < layout.num_cells:
            violations.append(f"cell index {cell.index} out of range")
            continue
        seen = set()
        for edge_idx, op in cell.edges:
            if not 0 <= edge_idx < p:
                violations.append(f"cell {cell.index}: edge index {edge_idx} out of range")
                continue
            if edge_idx in seen:
                violations.append(f"cell {cell.index}: duplicate edge {edge_idx}")
            seen.add(edge_idx)
            if not isinstance(op, OpKind):
                violations.append(f"cell {cell.index}: edge {edge_idx} has non-op {op!r}")
            elif op is OpKind.ZERO:
                violations.append(f"cell {cell.index}: edge {edge_idx} carries zero op")
        for node in topo.intermediate_nodes():
            if not any(e in seen for e in topo.incoming(node)):
                violations.append(f"cell {cell.index}: node x{node - 1} disconnected")
    indices = [c.index for c in genotype.cells]
    if indices != sorted(set(indices)):
        violations.append("cell indices must be unique and sorted")
    return violations


def serialize(genotype):
    doc = {
        "version": genotype.version,
        "fingerprint": {
            "num_cells": genotype.fingerprint.num_cells,
            "num_intermediate": genotype.fingerprint.num_intermediate,
            "reductions": list(genotype.fingerprint.reductions),
            "initial_channels": genotype.fingerprint.initial_channels,
        },
        "cells": [
            {
                "index": cell.index,
                "edges": [{"edge": e, "op": op.value} for e, op in cell.edges],
            }
            for cell in genotype.cells
        ],
    }
    return json.dumps(doc, indent=2, sort_keys=True) + "\n"


def deserialize(text):
    if not text or not text.strip():
        raise GenotypeFormatError("empty genotype text")
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise GenotypeFormatError(f"malformed genotype text: {exc}") from exc
    if not isinstance(doc, dict):
        raise GenotypeFormatError("genotype root must be a mapping")
    for key in ("version", "fingerprint", "cells"):
        if key not in doc:
            raise GenotypeFormatError(f"missing field {key!r}")
    if doc["version"] != GENOTYPE_VERSION:
        raise GenotypeFormatError(
            f"unsupported genotype version {doc['version']!r} (expected {GENOTYPE_VERSION})")
    fp = doc["fingerprint"]
    for key in ("num_cells", "num_intermediate", "reductions", "initial_channels"):
        if key not in fp:
            raise GenotypeFormatError(f"missing fingerprint field {key!r}")
    by_value = {k.value: k for k in OpKind}
    cells = []
    for cell in doc["cells"]:
        for key in ("index", "edges"):
            if key not in cell:
                raise GenotypeFormatError(f"missing cell field {key!r}")
        edges = []
        for item in cell["edges"]:
            if "edge" not in item or "op" not in item:
                raise GenotypeFormatError("edge entries need 'edge' and 'op'")
            if item["op"] not in by_value:
                raise GenotypeFormatError(f"unknown op {item['op']!r}")
            edges.append((int(item["edge"]), by_value[item["op"]]))
        edges.sort(key=lambda t: t[0])
        cells.append(CellGenotype(index=int(cell["index"]), edges=tuple(edges)))
    cells.sort(key=lambda c: c.index)
    return Genotype(
        fingerprint=Fingerprint(
            num_cells=int(fp["num_cells"]),
            num_intermediate=int(fp["num_intermediate"]),
            reductions=tuple(fp["reductions"]),
            initial_channels=int(fp["initial_channels"]),
        ),
        cells=tuple(cells),
        version=int(doc["version"]),
    )


def _node_name(cell_index, node):
    if node == "out":
        return f"c{cell_index}_out"
    if node == 0:
        return f"c{cell_index}_in1"
    if node == 1:
        return f"c{cell_index}_in2"
    return f"c{cell_index}_x{node - 1}"


def export_dot(genotype, layout):
    """Render the genotype as DOT text, one cluster per cell.

    Parameterless (light-weight) ops use dashed edges; dilation >= 4 ops are
    drawn bold in a distinct color.
    """
    lines = ["digraph genotype {", "  rankdir=LR;", "  node [shape=box, style=rounded];"]
    for cell in genotype.cells:
        spec = layout.cells[cell.index]
        kind = "reduction" if spec.is_reduction else "normal"
        lines.append(f"  subgraph cluster_cell{cell.index} {{")
        lines.append(f'    label="cell {cell.index} ({kind})";')
        for node in range(2):
            lines.append(f'    {_node_name(cell.index, node)} [label="in{node + 1}"];')
        for node in spec.intermediate_nodes():
            lines.append(f'    {_node_name(cell.index, node)} [label="x{node - 1}"];')
        lines.append(f'    {_node_name(cell.index, "out")} [label="out"];')
        for edge_idx, op in cell.edges:
            src, dst = spec.edges[edge_idx]
            style = []
            if op.is_parameterless:
                style.append("style=dashed")
            if op.dilation >= 4:
                style.append('color="darkgreen"')
                style.append("penwidth=2")
            attr = f' [label="{op.value}"' + ("" if not style else ", " + ", ".join(style)) + "]"
            lines.append(
                f"    {_node_name(cell.index, src)} -> {_node_name(cell.index, dst)}{attr};")
        for node in spec.intermediate_nodes():
            lines.append(
                f'    {_node_name(cell.index, node)} -> {_node_name(cell.index, "out")} '
                "[style=dotted];")
        lines.append("  }")
    lines.append("}")
    return "\n".join(lines) + "\n"


def op_census(genotype):
    """Count light-weight and large-receptive-field ops, total and per cell."""
    census = {
        "per_cell": [],
        "parameterless_total": 0,
        "dilation_ge4_total": 0,
        "op_counts": {k.value: 0 for k in OpKind},
    }
    for cell in genotype.cells:
        light = sum(1 for _, op in cell.edges if op.is_parameterless)
        wide = sum(1 for _, op in cell.edges if op.dilation >= 4)
        census["per_cell"].append(
            {"cell": cell.index, "parameterless": light, "dilation_ge4": wide})
        census["parameterless_total"] += light
        census["dilation_ge4_total"] += wide
        for _, op in cell.edges:
            census["op_counts"][op.value] += 1
    return census
