import numpy as np
import pytest

from ggnas.arch_space import (CellGenotype, Fingerprint, Genotype, OpKind,
                              build_cell_topology, build_network_layout,
                              candidate_ops, deserialize, export_dot,
                              GenotypeFormatError, num_edges_for, op_census,
                              op_index, serialize, validate_genotype)
from ggnas.config import SearchConfig
from ggnas.search import random_genotype


def make_layout(**kw):
    defaults = dict(num_cells=4, reductions=[1], image_size=32, num_classes=3)
    defaults.update(kw)
    return build_network_layout(SearchConfig(**defaults))


def all_op_genotype(layout, kind):
    cells = tuple(
        CellGenotype(index=k, edges=tuple((e, kind) for e in range(spec.num_edges)))
        for k, spec in enumerate(layout.cells))
    return Genotype(fingerprint=layout.fingerprint(), cells=cells)


class TestCandidateOps:
    def test_eight_ops_with_zero_at_fixed_index(self):
        ops = candidate_ops()
        assert len(ops) == 8
        assert ops.index(OpKind.ZERO) == 3

    def test_deterministic_ordering(self):
        assert candidate_ops() == candidate_ops()
        assert [op.value for op in candidate_ops()] == [
            "max_pool_3x3", "skip_connect", "conv_3x3", "zero", "sep_conv_3x3",
            "dil_sep_conv_3x3_r2", "dil_sep_conv_3x3_r4", "dil_sep_conv_3x3_r8"]

    def test_zero_unique_and_metadata(self):
        assert OpKind.ZERO.is_parameterless
        assert OpKind.SKIP_CONNECT.is_parameterless
        assert OpKind.MAX_POOL_3X3.is_parameterless
        assert not OpKind.CONV_3X3.is_parameterless
        assert OpKind.DIL_SEP_CONV_3X3_R8.dilation == 8
        assert OpKind.DIL_SEP_CONV_3X3_R4.dilation == 4
        assert OpKind.DIL_SEP_CONV_3X3_R2.dilation == 2


class TestCellTopology:
    def test_n2_edge_list(self):
        spec = build_cell_topology(2)
        assert spec.num_edges == 5
        assert spec.edges == ((0, 2), (1, 2), (0, 3), (1, 3), (2, 3))

    def test_n1(self):
        assert build_cell_topology(1).num_edges == 2

    def test_n3(self):
        # enumeration oracle: node i has i+1 incoming edges -> 2+3+4
        assert build_cell_topology(3).num_edges == 9

    def test_rejects_zero_nodes(self):
        with pytest.raises(ValueError):
            build_cell_topology(0)

    @pytest.mark.parametrize("n", [1, 2, 3, 4])
    def test_edge_count_formula(self, n):
        spec = build_cell_topology(n)
        explicit = sum(2 + i for i in range(n))
        assert spec.num_edges == explicit == num_edges_for(n) == n * (n + 3) // 2

    def test_incoming_edges_per_node(self):
        spec = build_cell_topology(3)
        for i, node in enumerate(spec.intermediate_nodes()):
            assert len(spec.incoming(node)) == 2 + i

    def test_reduction_strides(self):
        spec = build_cell_topology(2, is_reduction=True)
        assert [spec.edge_stride(e) for e in range(5)] == [2, 2, 2, 2, 1]
        normal = build_cell_topology(2)
        assert all(normal.edge_stride(e) == 1 for e in range(5))


class TestNetworkLayout:
    def test_paper_scale_layout(self):
        layout = make_layout(num_cells=14, reductions=None, image_size=64)
        assert layout.num_cells == 14
        assert layout.cell_channels[0] == 8
        assert layout.reductions == (4, 9)
        assert layout.total_stride == 16

    def test_single_cell_constant_channels(self):
        layout = make_layout(num_cells=1, reductions=[], image_size=32)
        assert layout.cell_channels == (8,)
        assert layout.total_stride == 4

    def test_toy_doubling_sequence(self):
        # hand-applied doubling rule for K=6, reductions {1,3}
        layout = make_layout(num_cells=6, reductions=[1, 3], image_size=64)
        assert layout.cell_channels == (8, 16, 16, 32, 32, 32)

    def test_rejects_bad_reductions(self):
        with pytest.raises(ValueError):
            make_layout(reductions=[1, 1])
        with pytest.raises(ValueError):
            make_layout(reductions=[9])

    def test_resolutions(self):
        layout = make_layout(num_cells=4, reductions=[1], image_size=32)
        assert layout.cell_input_resolution(0) == 8
        assert layout.cell_input_resolution(1) == 8
        assert layout.cell_input_resolution(2) == 4
        assert layout.cell_output_resolution(1) == 4


class TestGenotypeValidation:
    def test_all_skip_ok(self):
        layout = make_layout()
        g = all_op_genotype(layout, OpKind.SKIP_CONNECT)
        assert validate_genotype(g, layout) == []

    def test_disconnected_node(self):
        layout = make_layout()
        # x1's inputs are edges 0 and 1; keep only x2's edges
        cells = list(all_op_genotype(layout, OpKind.SKIP_CONNECT).cells)
        cells[0] = CellGenotype(index=0, edges=((2, OpKind.SKIP_CONNECT),
                                                (3, OpKind.SKIP_CONNECT),
                                                (4, OpKind.SKIP_CONNECT)))
        g = Genotype(fingerprint=layout.fingerprint(), cells=tuple(cells))
        violations = validate_genotype(g, layout)
        assert any("x1 disconnected" in v for v in violations)

    def test_fingerprint_mismatch(self):
        layout6 = make_layout(num_cells=6, reductions=[1, 3], image_size=64)
        layout = make_layout()
        g = all_op_genotype(layout6, OpKind.SKIP_CONNECT)
        violations = validate_genotype(g, layout)
        assert any("fingerprint" in v for v in violations)

    def test_zero_op_rejected(self):
        layout = make_layout()
        cells = list(all_op_genotype(layout, OpKind.SKIP_CONNECT).cells)
        edges = list(cells[0].edges)
        edges[0] = (0, OpKind.ZERO)
        cells[0] = CellGenotype(index=0, edges=tuple(edges))
        g = Genotype(fingerprint=layout.fingerprint(), cells=tuple(cells))
        assert any("zero" in v for v in validate_genotype(g, layout))


class TestSerialization:
    def test_round_trip(self):
        layout = make_layout()
        g = all_op_genotype(layout, OpKind.CONV_3X3)
        assert deserialize(serialize(g)) == g

    def test_unknown_op_rejected(self):
        layout = make_layout()
        text = serialize(all_op_genotype(layout, OpKind.CONV_3X3))
        bad = text.replace("conv_3x3", "conv_5x5")
        with pytest.raises(GenotypeFormatError):
            deserialize(bad)

    def test_empty_text_rejected(self):
        with pytest.raises(GenotypeFormatError):
            deserialize("")

    def test_version_mismatch(self):
        layout = make_layout()
        text = serialize(all_op_genotype(layout, OpKind.CONV_3X3))
        bad = text.replace('"version": 1', '"version": 99')
        with pytest.raises(GenotypeFormatError):
            deserialize(bad)

    def test_missing_field(self):
        with pytest.raises(GenotypeFormatError):
            deserialize('{"version": 1, "cells": []}')

    def test_round_trip_random_genotypes(self):
        # serialize/deserialize identity over 1000 random valid genotypes
        layout = make_layout()
        rng = np.random.default_rng(7)
        for _ in range(1000):
            g = random_genotype(layout, rng)
            assert validate_genotype(g, layout) == []
            assert deserialize(serialize(g)) == g


class TestDotExport:
    def test_edge_statements_present(self):
        layout = make_layout(num_cells=1, reductions=[], image_size=32)
        g = all_op_genotype(layout, OpKind.CONV_3X3)
        dot = export_dot(g, layout)
        assert dot.count('label="conv_3x3"') == 5

    def test_pruned_edge_absent(self):
        layout = make_layout(num_cells=1, reductions=[], image_size=32)
        full = all_op_genotype(layout, OpKind.CONV_3X3)
        kept = tuple(e for e in full.cells[0].edges if e[0] != 2)
        g = Genotype(fingerprint=layout.fingerprint(),
                     cells=(CellGenotype(index=0, edges=kept),))
        dot = export_dot(g, layout)
        assert "c0_in1 -> c0_x2" not in dot
        assert "c0_in2 -> c0_x2" in dot

    def test_all_skip_dashed(self):
        # parameterless metadata drives the dashed style
        layout = make_layout(num_cells=1, reductions=[], image_size=32)
        g = all_op_genotype(layout, OpKind.SKIP_CONNECT)
        dot = export_dot(g, layout)
        for line in dot.splitlines():
            if "skip_connect" in line:
                assert "style=dashed" in line

    def test_dilated_style_and_parse_shape(self):
        layout = make_layout(num_cells=1, reductions=[], image_size=32)
        g = all_op_genotype(layout, OpKind.DIL_SEP_CONV_3X3_R8)
        dot = export_dot(g, layout)
        assert 'color="darkgreen"' in dot
        # structural grammar check: balanced braces, edges inside a digraph
        assert dot.startswith("digraph")
        assert dot.count("{") == dot.count("}")
        assert dot.count("->") >= 5


class TestOpCensus:
    def test_counts(self):
        layout = make_layout(num_cells=2, reductions=[], image_size=32)
        g = all_op_genotype(layout, OpKind.SKIP_CONNECT)
        census = op_census(g)
        assert census["parameterless_total"] == 10
        assert census["dilation_ge4_total"] == 0
        g = all_op_genotype(layout, OpKind.DIL_SEP_CONV_3X3_R4)
        assert op_census(g)["dilation_ge4_total"] == 10
