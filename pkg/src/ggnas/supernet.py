"""One-shot network: mixed-operation edges weighted by sampled distributions,
plus the discrete derived network used for retraining.

Parameterized ops are pre-activation (ReLU -> conv -> norm); normalization
uses per-batch statistics so search and the one-hot collapse comparison are
exact. Separable convs are two depthwise+pointwise rounds; the dilated
variants use one round with dilation in the depthwise stage.
"""

import torch
import torch.nn.functional as F
from torch import nn

from .arch_space import OpKind, candidate_ops, op_index


def _bn(channels):
    return nn.BatchNorm2d(channels, affine=True, track_running_stats=False)


class ReLUConvBN(nn.Module):
    def __init__(self, c_in, c_out, kernel, stride=1, padding=0, dilation=1):
        super().__init__()
        self.op = nn.Sequential(
            nn.ReLU(inplace=False),
            nn.Conv2d(c_in, c_out, kernel, stride=stride, padding=padding,
                      dilation=dilation, bias=False),
            _bn(c_out),
        )

    def forward(self, x):
        return self.op(x)


class SepConv(nn.Module):
    """Two rounds of ReLU -> depthwise 3x3 -> pointwise -> norm."""

    def __init__(self, channels, stride):
        super().__init__()
        self.op = nn.Sequential(
            nn.ReLU(inplace=False),
            nn.Conv2d(channels, channels, 3, stride=stride, padding=1,
                      groups=channels, bias=False),
            nn.Conv2d(channels, channels, 1, bias=False),
            _bn(channels),
            nn.ReLU(inplace=False),
            nn.Conv2d(channels, channels, 3, stride=1, padding=1,
                      groups=channels, bias=False),
            nn.Conv2d(channels, channels, 1, bias=False),
            _bn(channels),
        )

    def forward(self, x):
        return self.op(x)


class DilSepConv(nn.Module):
    """ReLU -> dilated depthwise 3x3 -> pointwise -> norm."""

    def __init__(self, channels, stride, dilation):
        super().__init__()
        self.op = nn.Sequential(
            nn.ReLU(inplace=False),
            nn.Conv2d(channels, channels, 3, stride=stride, padding=dilation,
                      dilation=dilation, groups=channels, bias=False),
            nn.Conv2d(channels, channels, 1, bias=False),
            _bn(channels),
        )

    def forward(self, x):
        return self.op(x)


class FactorizedReduce(nn.Module):
    """Stride-2 identity replacement: two offset 1x1 convs concatenated."""

    def __init__(self, c_in, c_out):
        super().__init__()
        self.relu = nn.ReLU(inplace=False)
        self.conv1 = nn.Conv2d(c_in, c_out // 2, 1, stride=2, bias=False)
        self.conv2 = nn.Conv2d(c_in, c_out - c_out // 2, 1, stride=2, bias=False)
        self.bn = _bn(c_out)

    def forward(self, x):
        if x.shape[2] % 2 or x.shape[3] % 2:
            raise ValueError(f"factorized reduce needs even spatial dims, got {tuple(x.shape)}")
        x = self.relu(x)
        out = torch.cat([self.conv1(x), self.conv2(x[:, :, 1:, 1:])], dim=1)
        return self.bn(out)


class Zero(nn.Module):
    def __init__(self, stride):
        super().__init__()
        self.stride = stride

    def forward(self, x):
        if self.stride == 1:
            return x * 0.0
        return x[:, :, ::self.stride, ::self.stride] * 0.0


class SkipConnect(nn.Module):
    def forward(self, x):
        return x


def build_operation(kind, channels, stride):
    if kind is OpKind.MAX_POOL_3X3:
        return nn.MaxPool2d(3, stride=stride, padding=1)
    if kind is OpKind.SKIP_CONNECT:
        return SkipConnect() if stride == 1 else FactorizedReduce(channels, channels)
    if kind is OpKind.CONV_3X3:
        return ReLUConvBN(channels, channels, 3, stride=stride, padding=1)
    if kind is OpKind.ZERO:
        return Zero(stride)
    if kind is OpKind.SEP_CONV_3X3:
        return SepConv(channels, stride)
    if kind in (OpKind.DIL_SEP_CONV_3X3_R2, OpKind.DIL_SEP_CONV_3X3_R4,
                OpKind.DIL_SEP_CONV_3X3_R8):
        return DilSepConv(channels, stride, kind.dilation)
    raise ValueError(f"unknown op kind {kind!r}")


class MixedEdge(nn.Module):
    """Every candidate op instantiated at one edge; output is the z-weighted sum."""

    def __init__(self, channels, stride):
        super().__init__()
        self.branches = nn.ModuleList(
            build_operation(kind, channels, stride) for kind in candidate_ops())

    def forward(self, x, z_row):
        out = None
        for weight, branch in zip(z_row, self.branches):
            term = weight * branch(x)
            out = term if out is None else out + term
        return out


class SearchCell(nn.Module):
    def __init__(self, spec, c_prev_prev, c_prev, width, reduction_prev):
        super().__init__()
        self.spec = spec
        if reduction_prev:
            self.pre0 = FactorizedReduce(c_prev_prev, width)
        else:
            self.pre0 = ReLUConvBN(c_prev_prev, width, 1)
        self.pre1 = ReLUConvBN(c_prev, width, 1)
        self.edges = nn.ModuleList(
            MixedEdge(width, spec.edge_stride(e)) for e in range(spec.num_edges))

    def forward(self, s0, s1, z):
        states = [self.pre0(s0), self.pre1(s1)]
        idx = 0
        for i in range(self.spec.num_intermediate):
            acc = None
            for src in range(2 + i):
                out = self.edges[idx](states[src], z[idx])
                acc = out if acc is None else acc + out
                idx += 1
            states.append(acc)
        return torch.cat(states[2:], dim=1)


class Stem(nn.Module):
    def __init__(self, spec):
        super().__init__()
        layers = []
        c_in = 3
        for c_out, stride in zip(spec.channels, spec.strides):
            layers += [
                nn.Conv2d(c_in, c_out, 3, stride=stride, padding=1, bias=False),
                _bn(c_out),
                nn.ReLU(inplace=False),
            ]
            c_in = c_out
        self.op = nn.Sequential(*layers)

    def forward(self, x):
        return self.op(x)


class AsppHead(nn.Module):
    """Parallel dilated branches plus image pooling, then 1x1 class projection."""

    def __init__(self, c_in, head_spec):
        super().__init__()
        branch_c = head_spec.branch_channels
        self.branches = nn.ModuleList()
        for rate in head_spec.rates:
            if rate == 1:
                conv = nn.Conv2d(c_in, branch_c, 1, bias=False)
            else:
                conv = nn.Conv2d(c_in, branch_c, 3, padding=rate, dilation=rate, bias=False)
            self.branches.append(nn.Sequential(conv, _bn(branch_c), nn.ReLU(inplace=False)))
        # no norm here: the pooled map is 1x1 and must stay batch-size robust
        self.pool = nn.Sequential(
            nn.AdaptiveAvgPool2d(1),
            nn.Conv2d(c_in, branch_c, 1, bias=False),
            nn.ReLU(inplace=False),
        )
        total = branch_c * (len(head_spec.rates) + 1)
        self.project = nn.Conv2d(total, head_spec.num_classes, 1)

    def forward(self, x):
        outs = [branch(x) for branch in self.branches]
        pooled = self.pool(x)
        outs.append(F.interpolate(pooled, size=x.shape[2:], mode="bilinear",
                                  align_corners=False))
        return self.project(torch.cat(outs, dim=1))


def _check_input(layout, x):
    if x.shape[2] % layout.total_stride or x.shape[3] % layout.total_stride:
        raise ValueError(
            f"input {tuple(x.shape[2:])} not divisible by total stride {layout.total_stride}")


class SuperNetwork(nn.Module):
    def __init__(self, layout):
        super().__init__()
        self.layout = layout
        self.stem = Stem(layout.stem)
        self.cells = nn.ModuleList()
        c_prev_prev = c_prev = layout.stem.channels[-1]
        reduction_prev = False
        for spec, width in zip(layout.cells, layout.cell_channels):
            cell = SearchCell(spec, c_prev_prev, c_prev, width, reduction_prev)
            self.cells.append(cell)
            reduction_prev = spec.is_reduction
            c_prev_prev, c_prev = c_prev, width * spec.num_intermediate
        self.head = AsppHead(c_prev, layout.head)

    def forward(self, x, z_list):
        _check_input(self.layout, x)
        if len(z_list) != len(self.cells):
            raise ValueError(f"expected {len(self.cells)} samples, got {len(z_list)}")
        s0 = s1 = self.stem(x)
        for cell, z in zip(self.cells, z_list):
            s0, s1 = s1, cell(s0, s1, z)
        logits = self.head(s1)
        return F.interpolate(logits, size=x.shape[2:], mode="bilinear",
                             align_corners=False)


class DerivedCell(nn.Module):
    def __init__(self, spec, chosen, c_prev_prev, c_prev, width, reduction_prev):
        super().__init__()
        self.spec = spec
        if reduction_prev:
            self.pre0 = FactorizedReduce(c_prev_prev, width)
        else:
            self.pre0 = ReLUConvBN(c_prev_prev, width, 1)
        self.pre1 = ReLUConvBN(c_prev, width, 1)
        self.edge_ops = nn.ModuleDict({
            str(e): build_operation(op, width, spec.edge_stride(e))
            for e, op in chosen.items()
        })

    def forward(self, s0, s1):
        states = [self.pre0(s0), self.pre1(s1)]
        idx = 0
        for i in range(self.spec.num_intermediate):
            acc = None
            for src in range(2 + i):
                if str(idx) in self.edge_ops:
                    out = self.edge_ops[str(idx)](states[src])
                    acc = out if acc is None else acc + out
                idx += 1
            if acc is None:
                raise ValueError(f"node x{i + 1} has no incoming edges")
            states.append(acc)
        return torch.cat(states[2:], dim=1)


class DerivedNetwork(nn.Module):
    """Discrete network for a genotype: each edge runs only its chosen op."""

    def __init__(self, genotype, layout):
        super().__init__()
        fp = genotype.fingerprint
        if fp != layout.fingerprint():
            raise ValueError(f"genotype fingerprint {fp} does not match layout")
        self.layout = layout
        self.stem = Stem(layout.stem)
        self.cells = nn.ModuleList()
        c_prev_prev = c_prev = layout.stem.channels[-1]
        reduction_prev = False
        for cell_geno, spec, width in zip(genotype.cells, layout.cells,
                                          layout.cell_channels):
            cell = DerivedCell(spec, dict(cell_geno.edges), c_prev_prev, c_prev,
                               width, reduction_prev)
            self.cells.append(cell)
            reduction_prev = spec.is_reduction
            c_prev_prev, c_prev = c_prev, width * spec.num_intermediate
        self.head = AsppHead(c_prev, layout.head)

    def forward(self, x):
        _check_input(self.layout, x)
        s0 = s1 = self.stem(x)
        for cell in self.cells:
            s0, s1 = s1, cell(s0, s1)
        logits = self.head(s1)
        return F.interpolate(logits, size=x.shape[2:], mode="bilinear",
                             align_corners=False)


def transfer_supernet_weights(supernet, derived, genotype):
    """Copy shared weights so one-hot mixed and derived forwards coincide."""
    derived.stem.load_state_dict(supernet.stem.state_dict())
    derived.head.load_state_dict(supernet.head.state_dict())
    for cell_geno, scell, dcell in zip(genotype.cells, supernet.cells, derived.cells):
        dcell.pre0.load_state_dict(scell.pre0.state_dict())
        dcell.pre1.load_state_dict(scell.pre1.state_dict())
        for edge_idx, op in cell_geno.edges:
            branch = scell.edges[edge_idx].branches[op_index(op)]
            dcell.edge_ops[str(edge_idx)].load_state_dict(branch.state_dict())


def one_hot_samples(genotype, layout, dtype=torch.float32):
    """Exact one-hot z matrices encoding a genotype (pruned edges -> zero op)."""
    from .arch_space import ZERO_INDEX

    z_list = []
    for cell_geno, spec in zip(genotype.cells, layout.cells):
        z = torch.zeros(spec.num_edges, len(candidate_ops()), dtype=dtype)
        chosen = dict(cell_geno.edges)
        for e in range(spec.num_edges):
            z[e, op_index(chosen[e]) if e in chosen else ZERO_INDEX] = 1.0
        z_list.append(z)
    return z_list


def count_parameters(module):
    return sum(p.numel() for p in module.parameters())
