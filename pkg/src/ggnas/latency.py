"""Latency lookup table and the differentiable expected-latency loss.

Entries are keyed by (operation, execution context) because cost depends on
resolution, channels, and stride, which differ per stage. The expected
latency of a sampled architecture is linear in the sampled distribution, so
the latency loss beta * log(LAT) is differentiable end to end.

The synthetic mode is a deterministic cost model for hardware-free testing:

    usec = BASE_USEC + kappa_op * MACs(op, context)

with MACs the multiply-accumulate count of the op at the context's shape and
BASE_USEC a small floor shared by every entry. skip_connect and zero carry
zero MACs, so they cost exactly BASE_USEC, keeping the zero op the minimum
entry of its context and log(LAT) well-defined.
"""

import json
import math
import platform
import statistics
import time
from dataclasses import dataclass

import torch

from .arch_space import OpKind, candidate_ops

LUT_VERSION = 1

BASE_USEC = 0.2          # floor shared by all entries (skip/zero cost exactly this)
KAPPA_CONV = 2.0e-4      # microseconds per convolution MAC
KAPPA_POOL = 2.0e-5      # microseconds per pooling comparison


class LatencyError(ValueError):
    pass


@dataclass(frozen=True)
class OpContext:
    cell: int
    edge: int
    height: int
    width: int
    channels: int
    stride: int

    def __post_init__(self):
        if self.height < 1 or self.width < 1 or self.channels < 1:
            raise ValueError(f"context dims must be positive: {self}")
        if self.stride not in (1, 2):
            raise ValueError(f"stride must be 1 or 2: {self}")

    def key(self):
        return (self.cell, self.edge, self.height, self.width, self.channels, self.stride)


def layout_contexts(layout):
    """Every (cell, edge) execution context reachable in the layout."""
    contexts = []
    for k, spec in enumerate(layout.cells):
        res_in = layout.cell_input_resolution(k)
        res_out = layout.cell_output_resolution(k)
        width = layout.cell_channels[k]
        for e in range(spec.num_edges):
            stride = spec.edge_stride(e)
            src, _ = spec.edges[e]
            if spec.is_reduction and src >= spec.num_inputs:
                h = w = res_out  # intermediate sources are already reduced
            else:
                h = w = res_in
            contexts.append(OpContext(cell=k, edge=e, height=h, width=w,
                                      channels=width, stride=stride))
    return contexts


def op_macs(op, ctx):
    """Multiply-accumulate count of one op at a context (0 for skip/zero)."""
    h_out = -(-ctx.height // ctx.stride)
    w_out = -(-ctx.width // ctx.stride)
    c = ctx.channels
    spatial = h_out * w_out
    if op in (OpKind.SKIP_CONNECT, OpKind.ZERO):
        return 0
    if op is OpKind.MAX_POOL_3X3:
        return 9 * c * spatial
    if op is OpKind.CONV_3X3:
        return 9 * c * c * spatial
    depthwise = 9 * c * spatial
    pointwise = c * c * spatial
    if op is OpKind.SEP_CONV_3X3:
        return 2 * (depthwise + pointwise)
    # dilated separable convs: one depthwise (dilated) + pointwise round
    return depthwise + pointwise


def synthetic_latency(op, ctx):
    kappa = KAPPA_POOL if op is OpKind.MAX_POOL_3X3 else KAPPA_CONV
    return BASE_USEC + kappa * op_macs(op, ctx)


@dataclass
class LatencyTable:
    entries: dict            # (OpKind, context key) -> microseconds
    provenance: str          # profiled | synthetic
    hardware: str
    input_size: int

    def get(self, op, ctx):
        key = (op, ctx.key())
        if key not in self.entries:
            raise LatencyError(f"missing latency entry for {op.value} at {ctx}")
        return self.entries[key]

    def cell_slice(self, layout, cell_index, dtype=torch.float32):
        """p x q latency matrix for one cell, aligned with the op order."""
        spec = layout.cells[cell_index]
        ops = candidate_ops()
        rows = []
        for ctx in layout_contexts(layout):
            if ctx.cell != cell_index:
                continue
            rows.append([self.get(op, ctx) for op in ops])
        if len(rows) != spec.num_edges:
            raise LatencyError(
                f"cell {cell_index}: expected {spec.num_edges} edges, found {len(rows)}")
        return torch.tensor(rows, dtype=dtype)

    def missing_for(self, layout):
        missing = []
        for ctx in layout_contexts(layout):
            for op in candidate_ops():
                if (op, ctx.key()) not in self.entries:
                    missing.append((op, ctx))
        return missing

    def to_json(self):
        doc = {
            "version": LUT_VERSION,
            "hardware": self.hardware,
            "mode": self.provenance,
            "input_size": self.input_size,
            "entries": [
                {
                    "op": op.value,
                    "cell": key[0], "edge": key[1],
                    "h": key[2], "w": key[3],
                    "channels": key[4], "stride": key[5],
                    "usec": usec,
                }
                for (op, key), usec in sorted(
                    self.entries.items(), key=lambda t: (t[0][1], t[0][0].value))
            ],
        }
        return json.dumps(doc, indent=2) + "\n"

    def save(self, path):
        with open(path, "w") as fh:
            fh.write(self.to_json())

    @classmethod
    def load(cls, path):
        with open(path) as fh:
            doc = json.load(fh)
        if doc.get("version") != LUT_VERSION:
            raise LatencyError(f"unsupported LUT version {doc.get('version')!r}")
        by_value = {k.value: k for k in OpKind}
        entries = {}
        for item in doc["entries"]:
            if item["op"] not in by_value:
                raise LatencyError(f"unknown op {item['op']!r} in LUT")
            key = (item["cell"], item["edge"], item["h"], item["w"],
                   item["channels"], item["stride"])
            entries[(by_value[item["op"]], key)] = float(item["usec"])
        return cls(entries=entries, provenance=doc["mode"], hardware=doc["hardware"],
                   input_size=int(doc["input_size"]))


def _profile_entry(op, ctx, trials, device):
    from .supernet import build_operation

    module = build_operation(op, ctx.channels, ctx.stride).to(device).eval()
    x = torch.randn(1, ctx.channels, ctx.height, ctx.width, device=device)
    times = []
    with torch.no_grad():
        for _ in range(3):
            module(x)
        for _ in range(trials):
            if device.type == "cuda":
                torch.cuda.synchronize(device)
            t0 = time.perf_counter()
            module(x)
            if device.type == "cuda":
                torch.cuda.synchronize(device)
            times.append((time.perf_counter() - t0) * 1e6)
    return statistics.median(times)


def build_lut(layout, mode="synthetic", trials=50, device=None):
    """Build the table for every (op, context) pair reachable in the layout.

    Profiled mode runs warmup plus `trials` timed executions of the lone op
    and records the median in microseconds; it never falls back to synthetic.
    """
    contexts = layout_contexts(layout)
    ops = candidate_ops()
    if mode == "synthetic":
        entries = {(op, ctx.key()): synthetic_latency(op, ctx)
                   for ctx in contexts for op in ops}
        return LatencyTable(entries=entries, provenance="synthetic",
                            hardware="synthetic-cost-model", input_size=layout.input_size)
    if mode != "profiled":
        raise LatencyError(f"unknown LUT mode {mode!r}")
    if trials < 1:
        raise ValueError(f"profiled mode needs trials >= 1, got {trials}")
    if device is None:
        raise LatencyError("profiled mode requires an explicit device")
    device = torch.device(device)
    if device.type == "cuda" and not torch.cuda.is_available():
        raise LatencyError("profiling backend unavailable: CUDA device requested "
                           "but not present")
    entries = {}
    for ctx in contexts:
        for op in ops:
            entries[(op, ctx.key())] = _profile_entry(op, ctx, trials, device)
        # timing noise must not let another op undercut the zero op
        floor = min(entries[(op, ctx.key())] for op in ops)
        entries[(OpKind.ZERO, ctx.key())] = floor
    hardware = f"{platform.machine()}/{device.type}"
    if device.type == "cuda":
        hardware += f":{torch.cuda.get_device_name(device)}"
    return LatencyTable(entries=entries, provenance="profiled", hardware=hardware,
                        input_size=layout.input_size)


def cell_expected_latency(z, lut_slice):
    """Expected microseconds of one cell: sum of z * latency, linear in z."""
    if tuple(z.shape) != tuple(lut_slice.shape):
        raise ValueError(f"shape mismatch: z {tuple(z.shape)} vs lut {tuple(lut_slice.shape)}")
    if not torch.is_tensor(lut_slice):
        lut_slice = torch.as_tensor(lut_slice, dtype=z.dtype)
    return (z * lut_slice.to(z.dtype)).sum()


def network_expected_latency(z_list, lut, layout):
    """Sum of per-cell expected latencies (stem/head constants excluded)."""
    if len(z_list) != layout.num_cells:
        raise ValueError(f"expected {layout.num_cells} samples, got {len(z_list)}")
    total = None
    for k, z in enumerate(z_list):
        term = cell_expected_latency(z, lut.cell_slice(layout, k, dtype=z.dtype))
        total = term if total is None else total + term
    return total


def latency_loss(lat, beta):
    """beta * log(latency in microseconds); natural log."""
    if torch.is_tensor(lat):
        if bool((lat <= 0).any()):
            raise ValueError(f"latency must be > 0, got {lat}")
        return beta * torch.log(lat)
    if lat <= 0:
        raise ValueError(f"latency must be > 0, got {lat}")
    return beta * math.log(lat)


def genotype_latency(genotype, lut, layout):
    """Exact table sum for a discrete genotype (pruned edges cost the zero op)."""
    total = 0.0
    chosen = {cell.index: dict(cell.edges) for cell in genotype.cells}
    for ctx in layout_contexts(layout):
        op = chosen.get(ctx.cell, {}).get(ctx.edge, OpKind.ZERO)
        total += lut.get(op, ctx)
    return total
