"""Architecture parameters and their stochastic relaxation.

Per-edge operation choices are sampled with the Gumbel-softmax trick: rows of
Z are softmax((logits + G) / temperature) with G standard Gumbel noise, which
keeps the sample differentiable in the logits for fixed noise. Logits are
stored unconstrained (they stand in for log of the positive parameters).
"""

from dataclasses import dataclass

import torch

_U_EPS = 1e-20


@dataclass
class ArchParams:
    """One independent p x q logit matrix per cell; each is a learnable leaf."""

    cells: list

    @property
    def num_cells(self):
        return len(self.cells)

    @property
    def shape(self):
        return (len(self.cells),) + tuple(self.cells[0].shape)

    def parameters(self):
        return list(self.cells)

    def all_finite(self):
        return all(bool(torch.isfinite(a).all()) for a in self.cells)

    def detach_copy(self):
        return ArchParams([a.detach().clone() for a in self.cells])

    def state_dict(self):
        return {f"cell_{i}": a.detach().clone() for i, a in enumerate(self.cells)}

    def load_state_dict(self, state):
        for i, a in enumerate(self.cells):
            with torch.no_grad():
                a.copy_(state[f"cell_{i}"])


def init_arch_params(num_cells, num_edges, num_ops, scale=1e-3, generator=None,
                     dtype=torch.float32):
    """I.i.d. zero-mean normal logits with stddev `scale` (0 -> exact zeros)."""
    if num_cells < 1 or num_edges < 1 or num_ops < 1:
        raise ValueError(
            f"dimensions must be positive, got ({num_cells}, {num_edges}, {num_ops})")
    if scale < 0:
        raise ValueError(f"scale must be >= 0, got {scale}")
    cells = []
    for _ in range(num_cells):
        if scale == 0:
            block = torch.zeros(num_edges, num_ops, dtype=dtype)
        else:
            block = torch.empty(num_edges, num_ops, dtype=dtype).normal_(
                0.0, scale, generator=generator)
        block.requires_grad_(True)
        cells.append(block)
    return ArchParams(cells)


@dataclass
class TemperatureSchedule:
    total_steps: int
    initial: float = 1.0
    minimum: float = 0.03
    shape: str = "linear"  # linear | exponential

    def __post_init__(self):
        if self.initial <= 0 or self.minimum <= 0:
            raise ValueError("temperatures must be > 0")
        if self.minimum > self.initial:
            raise ValueError("minimum must not exceed initial temperature")
        if self.total_steps < 1:
            raise ValueError("total_steps must be >= 1")
        if self.shape not in ("linear", "exponential"):
            raise ValueError(f"unknown schedule shape {self.shape!r}")


def temperature(step, schedule):
    """Monotone interpolation from initial to minimum with exact endpoints."""
    if step < 0 or step > schedule.total_steps:
        raise ValueError(f"step {step} outside [0, {schedule.total_steps}]")
    t = step / schedule.total_steps
    if schedule.shape == "linear":
        return schedule.initial + (schedule.minimum - schedule.initial) * t
    return schedule.initial * (schedule.minimum / schedule.initial) ** t


@dataclass
class GumbelSample:
    z: torch.Tensor      # p x q rows on the simplex
    noise: torch.Tensor  # the Gumbel noise that produced z
    temperature: float


def gumbel_noise(shape, generator=None, dtype=torch.float32):
    u = torch.rand(shape, generator=generator, dtype=dtype)
    return -torch.log(-torch.log(u + _U_EPS) + _U_EPS)


def gumbel_sample(logits, temp, noise=None, generator=None):
    """Sample soft one-hot rows: softmax((logits + noise) / temp).

    `noise` may be supplied for reproducible tests; otherwise it is drawn
    internally from the standard Gumbel distribution.
    """
    if temp <= 0:
        raise ValueError(f"temperature must be > 0, got {temp}")
    if noise is None:
        noise = gumbel_noise(logits.shape, generator=generator, dtype=logits.dtype)
    else:
        if noise.shape != logits.shape:
            raise ValueError(f"noise shape {tuple(noise.shape)} != logits {tuple(logits.shape)}")
        if not bool(torch.isfinite(noise).all()):
            raise ValueError("noise contains non-finite values")
    z = torch.softmax((logits + noise) / temp, dim=-1)
    return GumbelSample(z=z, noise=noise, temperature=float(temp))


def sample_all(cell_logits, temp, rng):
    """One independent GumbelSample per cell; deterministic given the seed.

    `cell_logits` is an ArchParams or a list of p x q tensors (raw or
    communication-updated); `rng` is an int seed or torch.Generator.
    """
    if isinstance(cell_logits, ArchParams):
        cell_logits = cell_logits.cells
    if isinstance(rng, torch.Generator):
        generator = rng
    else:
        generator = torch.Generator()
        generator.manual_seed(int(rng))
    return [gumbel_sample(logits, temp, generator=generator) for logits in cell_logits]


def mean_edge_entropy(cell_logits):
    """Mean per-edge softmax entropy; a search-health diagnostic."""
    total = 0.0
    rows = 0
    for logits in cell_logits:
        probs = torch.softmax(logits.detach(), dim=-1)
        ent = -(probs * torch.log(probs.clamp_min(1e-12))).sum(dim=-1)
        total += float(ent.sum())
        rows += ent.numel()
    return total / rows
