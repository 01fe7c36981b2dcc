import numpy as np
import pytest
import torch
import torch.nn.functional as F

from ggnas.arch_space import (OpKind, ZERO_INDEX, build_cell_topology,
                              build_network_layout, candidate_ops, op_index)
from ggnas.config import SearchConfig
from ggnas.latency import build_lut, cell_expected_latency, latency_loss
from ggnas.relaxation import gumbel_sample
from ggnas.search import random_genotype
from ggnas.supernet import (DerivedNetwork, MixedEdge, SearchCell, SuperNetwork,
                            count_parameters, one_hot_samples,
                            transfer_supernet_weights)


def make_layout(**kw):
    defaults = dict(num_cells=4, reductions=[1], image_size=32, num_classes=3)
    defaults.update(kw)
    return build_network_layout(SearchConfig(**defaults))


def one_hot_row(index, q=8):
    row = torch.zeros(q)
    row[index] = 1.0
    return row


class TestMixedEdge:
    def test_one_hot_skip_is_identity(self):
        torch.manual_seed(0)
        edge = MixedEdge(channels=4, stride=1)
        x = torch.randn(2, 4, 8, 8)
        out = edge(x, one_hot_row(op_index(OpKind.SKIP_CONNECT)))
        assert torch.allclose(out, x)

    def test_one_hot_zero_is_zero(self):
        torch.manual_seed(0)
        edge = MixedEdge(channels=4, stride=1)
        out = edge(torch.randn(2, 4, 8, 8), one_hot_row(ZERO_INDEX))
        assert torch.equal(out, torch.zeros_like(out))

    def test_uniform_z_is_branch_mean(self):
        torch.manual_seed(1)
        edge = MixedEdge(channels=4, stride=1)
        x = torch.ones(1, 4, 8, 8)
        z = torch.full((8,), 1 / 8)
        mixed = edge(x, z)
        # per-branch oracle: run every branch independently and average
        with torch.no_grad():
            oracle = sum(branch(x) for branch in edge.branches) / 8
        assert torch.allclose(mixed, oracle, atol=1e-6)

    def test_branch_output_shapes_agree(self):
        for stride in (1, 2):
            edge = MixedEdge(channels=4, stride=stride)
            x = torch.randn(1, 4, 8, 8)
            shapes = {tuple(branch(x).shape) for branch in edge.branches}
            assert len(shapes) == 1

    def test_every_parameterized_branch_reaches_output(self):
        torch.manual_seed(2)
        edge = MixedEdge(channels=4, stride=1)
        # random input: a constant map would zero every conv branch through
        # the batch-statistics normalization
        x = torch.randn(1, 4, 8, 8)
        z = torch.full((8,), 1 / 8)
        base = edge(x, z)
        for m, branch in enumerate(edge.branches):
            params = list(branch.parameters())
            if not params:
                continue
            saved = [p.detach().clone() for p in params]
            with torch.no_grad():
                for p in params:
                    p.zero_()
            changed = edge(x, z)
            assert not torch.allclose(changed, base), f"branch {m} disconnected"
            with torch.no_grad():
                for p, s in zip(params, saved):
                    p.copy_(s)


class TestSearchCell:
    def test_all_skip_one_hot_algebra(self):
        torch.manual_seed(3)
        spec = build_cell_topology(2)
        cell = SearchCell(spec, 8, 8, 8, reduction_prev=False)
        s0 = torch.randn(1, 8, 8, 8)
        s1 = torch.randn(1, 8, 8, 8)
        z = torch.stack([one_hot_row(op_index(OpKind.SKIP_CONNECT))] * 5)
        out = cell(s0, s1, z)
        p0, p1 = cell.pre0(s0), cell.pre1(s1)
        x1 = p0 + p1
        x2 = p0 + p1 + x1
        assert torch.allclose(out, torch.cat([x1, x2], dim=1), atol=1e-6)

    def test_reduction_halves_spatial(self):
        torch.manual_seed(0)
        spec = build_cell_topology(2, is_reduction=True)
        cell = SearchCell(spec, 8, 8, 16, reduction_prev=False)
        z = torch.full((5, 8), 1 / 8)
        out = cell(torch.randn(1, 8, 8, 8), torch.randn(1, 8, 8, 8), z)
        assert out.shape == (1, 32, 4, 4)

    def test_output_channels_2x_width(self):
        torch.manual_seed(0)
        spec = build_cell_topology(2)
        cell = SearchCell(spec, 8, 8, 12, reduction_prev=False)
        z = torch.full((5, 8), 1 / 8)
        out = cell(torch.randn(1, 8, 8, 8), torch.randn(1, 8, 8, 8), z)
        assert out.shape[1] == 24


class TestSuperNetwork:
    def test_toy_logits_shape(self):
        torch.manual_seed(0)
        layout = make_layout(num_cells=6, reductions=[1, 3], image_size=32)
        net = SuperNetwork(layout)
        z = [torch.full((5, 8), 1 / 8) for _ in range(6)]
        out = net(torch.randn(2, 3, 32, 32), z)
        assert out.shape == (2, 3, 32, 32)

    def test_inference_determinism(self):
        torch.manual_seed(0)
        layout = make_layout()
        net = SuperNetwork(layout)
        x = torch.randn(1, 3, 32, 32)
        z = [torch.softmax(torch.randn(5, 8), dim=-1) for _ in range(4)]
        assert torch.equal(net(x, z), net(x, z))

    def test_rejects_indivisible_input(self):
        torch.manual_seed(0)
        layout = make_layout()
        net = SuperNetwork(layout)
        z = [torch.full((5, 8), 1 / 8) for _ in range(4)]
        with pytest.raises(ValueError):
            net(torch.randn(1, 3, 30, 30), z)

    def test_end_to_end_alpha_gradient_matches_fd(self):
        # loss gradient for a probed logit entry vs central differences,
        # fixed noise, double precision
        torch.manual_seed(4)
        layout = make_layout(num_cells=2, reductions=[], image_size=16)
        net = SuperNetwork(layout).double()
        lut = build_lut(layout, mode="synthetic")
        slices = [lut.cell_slice(layout, k, dtype=torch.float64) for k in range(2)]
        x = torch.randn(2, 3, 16, 16, dtype=torch.float64)
        y = torch.randint(0, 3, (2, 16, 16))
        gen = torch.Generator().manual_seed(7)
        noises = [torch.randn(5, 8, generator=gen, dtype=torch.float64)
                  for _ in range(2)]

        def loss_of(alphas):
            z = [gumbel_sample(a, 0.5, noise=n).z for a, n in zip(alphas, noises)]
            ce = F.cross_entropy(net(x, z), y)
            lat = sum(cell_expected_latency(zk, s) for zk, s in zip(z, slices))
            return ce + latency_loss(lat, 0.005)

        alphas = [torch.zeros(5, 8, dtype=torch.float64, requires_grad=True)
                  for _ in range(2)]
        loss_of(alphas).backward()
        probe_grad = alphas[0].grad[2, 4].item()
        eps = 1e-4
        hi = [a.detach().clone() for a in alphas]
        lo = [a.detach().clone() for a in alphas]
        hi[0][2, 4] += eps
        lo[0][2, 4] -= eps
        fd = (loss_of(hi).item() - loss_of(lo).item()) / (2 * eps)
        assert probe_grad == pytest.approx(fd, rel=1e-2)


class TestDerivedNetwork:
    def test_one_hot_collapse_per_edge_and_end_to_end(self):
        torch.manual_seed(5)
        layout = make_layout()
        supernet = SuperNetwork(layout)
        rng = np.random.default_rng(11)
        genotype = random_genotype(layout, rng)
        derived = DerivedNetwork(genotype, layout)
        transfer_supernet_weights(supernet, derived, genotype)
        x = torch.randn(2, 3, 32, 32)
        z = one_hot_samples(genotype, layout)
        mixed_out = supernet(x, z)
        derived_out = derived(x)
        assert torch.allclose(mixed_out, derived_out, atol=1e-5)
        # per-edge collapse on the first cell
        scell, dcell = supernet.cells[0], derived.cells[0]
        feat = scell.pre0(supernet.stem(x))
        for edge_idx, op in genotype.cells[0].edges:
            mixed_edge = scell.edges[edge_idx](feat, z[0][edge_idx])
            single = dcell.edge_ops[str(edge_idx)](feat)
            assert torch.allclose(mixed_edge, single, atol=1e-5)

    def test_all_skip_genotype_finite(self):
        from ggnas.arch_space import CellGenotype, Genotype

        torch.manual_seed(0)
        layout = make_layout()
        cells = tuple(
            CellGenotype(index=k, edges=tuple(
                (e, OpKind.SKIP_CONNECT) for e in range(spec.num_edges)))
            for k, spec in enumerate(layout.cells))
        g = Genotype(fingerprint=layout.fingerprint(), cells=cells)
        net = DerivedNetwork(g, layout)
        out = net(torch.randn(1, 3, 32, 32))
        assert bool(torch.isfinite(out).all())

    def test_derived_has_fewer_parameters(self):
        torch.manual_seed(0)
        layout = make_layout()
        supernet = SuperNetwork(layout)
        genotype = random_genotype(layout, np.random.default_rng(0))
        derived = DerivedNetwork(genotype, layout)
        assert count_parameters(derived) < count_parameters(supernet)

    def test_fingerprint_mismatch_rejected(self):
        layout = make_layout()
        other = make_layout(num_cells=6, reductions=[1, 3])
        genotype = random_genotype(other, np.random.default_rng(0))
        with pytest.raises(ValueError):
            DerivedNetwork(genotype, layout)

    def test_shape_algebra_stride(self):
        torch.manual_seed(0)
        layout = make_layout(num_cells=6, reductions=[1, 3], image_size=64)
        net = SuperNetwork(layout)
        x = torch.randn(1, 3, 64, 64)
        feats = net.stem(x)
        assert feats.shape[-1] == 16  # stem stride 4
        s0 = s1 = feats
        z = [torch.full((5, 8), 1 / 8) for _ in range(6)]
        for cell, zk in zip(net.cells, z):
            s0, s1 = s1, cell(s0, s1, zk)
        assert s1.shape[-1] == 64 // layout.total_stride
        assert s1.shape[1] == 2 * layout.cell_channels[-1]
