"""Search orchestration: communication-updated logits -> Gumbel sampling ->
supernet loss with the latency term -> one joint update of network weights,
architecture logits, and communication weights. Also derivation of the final
discrete genotype, random-search baselines, and the ablation suites.
"""

import dataclasses
import math
import time
from dataclasses import dataclass, field

import numpy as np
import torch
import torch.nn.functional as F

from .arch_space import (Genotype, CellGenotype, OpKind, ZERO_INDEX, build_network_layout,
                         candidate_ops, num_edges_for, validate_genotype)
from .bench import IGNORE_LABEL, finetune, measure_fps
from .ggm import build_coupler, propagate_chain
from .latency import cell_expected_latency, genotype_latency, latency_loss
from .relaxation import (ArchParams, TemperatureSchedule, gumbel_sample, init_arch_params,
                         mean_edge_entropy, temperature)
from .supernet import SuperNetwork, count_parameters

CHECKPOINT_VERSION = 1


class SearchDiverged(RuntimeError):
    """Non-finite loss during search; carries a diagnostic state dump."""

    def __init__(self, step, dump):
        self.step = step
        self.dump = dump
        super().__init__(f"non-finite loss at step {step}")


@dataclass
class SeedPack:
    arch: int
    ggm: int
    weights: int
    sample: int
    data: int


def derive_seeds(seed):
    def mix(i):
        return (seed * 2654435761 + i * 40503) % (2 ** 31 - 1)

    return SeedPack(arch=mix(1), ggm=mix(2), weights=mix(3), sample=mix(4), data=mix(5))


def _step_seed(base, step):
    return (base * 1000003 + step) % (2 ** 63 - 1)


@dataclass
class SearchState:
    config: object
    layout: object
    net: SuperNetwork
    arch: ArchParams
    coupler: object
    opt_w: torch.optim.Optimizer
    opt_alpha: torch.optim.Optimizer
    schedule: TemperatureSchedule
    lut: object
    lut_slices: list
    seeds: SeedPack
    step: int = 0
    trajectory: list = field(default_factory=list)


def init_search(config, dataset, lut):
    layout = build_network_layout(config)
    if dataset.images.shape[1] != config.image_size:
        raise ValueError(
            f"dataset size {dataset.images.shape[1]} != config image_size {config.image_size}")
    if dataset.num_classes != config.num_classes:
        raise ValueError("dataset/config class count mismatch")
    missing = lut.missing_for(layout)
    if missing:
        op, ctx = missing[0]
        raise ValueError(
            f"latency table incomplete: {len(missing)} entries missing "
            f"(first: {op.value} at {ctx})")
    seeds = derive_seeds(config.seed)
    torch.manual_seed(seeds.weights)
    net = SuperNetwork(layout)
    p = num_edges_for(config.num_intermediate)
    q = len(candidate_ops())
    gen_arch = torch.Generator()
    gen_arch.manual_seed(seeds.arch)
    arch = init_arch_params(config.num_cells, p, q, scale=config.init_scale,
                            generator=gen_arch)
    gen_ggm = torch.Generator()
    gen_ggm.manual_seed(seeds.ggm)
    coupler = build_coupler(config.ggm, config.num_cells, p, q, generator=gen_ggm)
    opt_w = torch.optim.SGD(net.parameters(), lr=config.optim.w_lr,
                            momentum=config.optim.w_momentum,
                            weight_decay=config.optim.w_weight_decay)
    alpha_params = arch.parameters()
    if coupler is not None:
        alpha_params = alpha_params + list(coupler.parameters())
    opt_alpha = torch.optim.Adam(alpha_params, lr=config.optim.alpha_lr,
                                 betas=tuple(config.optim.alpha_betas),
                                 weight_decay=config.optim.alpha_weight_decay)
    schedule = TemperatureSchedule(total_steps=config.total_steps,
                                   initial=config.temp_init, minimum=config.temp_min,
                                   shape=config.temp_shape)
    slices = [lut.cell_slice(layout, k) for k in range(layout.num_cells)]
    return SearchState(config=config, layout=layout, net=net, arch=arch,
                       coupler=coupler, opt_w=opt_w, opt_alpha=opt_alpha,
                       schedule=schedule, lut=lut, lut_slices=slices, seeds=seeds)


def _batch_for_step(dataset, split, batch_size, data_seed, step):
    images, masks = dataset.split_arrays(split)
    rng = np.random.default_rng([data_seed, step])
    idx = rng.choice(len(images), size=min(batch_size, len(images)), replace=False)
    x = torch.from_numpy(images[idx]).permute(0, 3, 1, 2).contiguous()
    y = torch.from_numpy(masks[idx])
    return x, y


def _w_lr(config, step):
    t = min(step / config.total_steps, 1.0)
    lo, hi = config.optim.w_lr_min, config.optim.w_lr
    return lo + 0.5 * (hi - lo) * (1 + math.cos(math.pi * t))


def _state_dump(state, extras):
    dump = {
        "step": state.step,
        "alpha": state.arch.state_dict(),
        "alpha_finite": state.arch.all_finite(),
    }
    dump.update(extras)
    return dump


def search_step(state, batch, step):
    """One joint update of w, the architecture logits, and the communication
    weights; returns the step metrics."""
    cfg = state.config
    x, y = batch
    lam = temperature(step, state.schedule)
    updated = propagate_chain(state.arch.cells, state.coupler)
    gen = torch.Generator()
    gen.manual_seed(_step_seed(state.seeds.sample, step))
    samples = [gumbel_sample(a, lam, generator=gen) for a in updated]
    z_list = [s.z for s in samples]
    logits = state.net(x, z_list)
    ce = F.cross_entropy(logits, y, ignore_index=IGNORE_LABEL)
    lat = None
    for z, lut_slice in zip(z_list, state.lut_slices):
        term = cell_expected_latency(z, lut_slice)
        lat = term if lat is None else lat + term
    if cfg.beta != 0:
        lat_term = latency_loss(lat, cfg.beta)
        loss = ce + lat_term
    else:
        lat_term = torch.zeros(())
        loss = ce
    if not bool(torch.isfinite(loss)):
        raise SearchDiverged(step, _state_dump(state, {
            "ce": ce.item(), "lat_usec": lat.item(), "temperature": lam}))
    # entropy of the distribution that produced this step's samples (the
    # in-place optimizer update below would otherwise leak into it)
    entropy = mean_edge_entropy(updated)
    lr = _w_lr(cfg, step)
    for group in state.opt_w.param_groups:
        group["lr"] = lr
    state.opt_w.zero_grad(set_to_none=True)
    state.opt_alpha.zero_grad(set_to_none=True)
    loss.backward()
    state.opt_w.step()
    state.opt_alpha.step()
    if not state.arch.all_finite():
        raise SearchDiverged(step, _state_dump(state, {"ce": ce.item()}))
    return {
        "step": step,
        "loss": loss.item(),
        "ce": ce.item(),
        "lat_usec": lat.item(),
        "lat_loss": lat_term.item(),
        "temperature": lam,
        "entropy": entropy,
        "w_lr": lr,
    }


@dataclass
class SearchResult:
    config: dict
    genotype: Genotype
    trajectory: list
    final_alpha: list      # raw logits per cell
    final_updated: list    # communication-updated logits per cell
    coupler_state: dict
    wall_seconds: float

    def trajectory_csv(self):
        cols = ["step", "loss", "ce", "lat_usec", "lat_loss", "temperature",
                "entropy", "w_lr"]
        lines = [",".join(cols)]
        for row in self.trajectory:
            lines.append(",".join(repr(row[c]) for c in cols))
        return "\n".join(lines) + "\n"


def save_checkpoint(state, path):
    torch.save({
        "version": CHECKPOINT_VERSION,
        "step": state.step,
        "config": state.config.to_dict(),
        "alpha": state.arch.state_dict(),
        "coupler": None if state.coupler is None else state.coupler.state_dict(),
        "net": state.net.state_dict(),
        "opt_w": state.opt_w.state_dict(),
        "opt_alpha": state.opt_alpha.state_dict(),
        "trajectory": state.trajectory,
    }, path)


def load_checkpoint(state, path):
    data = torch.load(path, weights_only=False)
    if data.get("version") != CHECKPOINT_VERSION:
        raise ValueError(f"unsupported checkpoint version {data.get('version')!r}")
    state.arch.load_state_dict(data["alpha"])
    if state.coupler is not None:
        if data["coupler"] is None:
            raise ValueError("checkpoint has no communication weights but config enables them")
        state.coupler.load_state_dict(data["coupler"])
    state.net.load_state_dict(data["net"])
    state.opt_w.load_state_dict(data["opt_w"])
    state.opt_alpha.load_state_dict(data["opt_alpha"])
    state.step = data["step"]
    state.trajectory = list(data["trajectory"])
    return state


def final_logits(state):
    """(raw, updated) logits after search, detached."""
    with torch.no_grad():
        updated = propagate_chain(state.arch.cells, state.coupler)
        return ([a.detach().clone() for a in state.arch.cells],
                [a.detach().clone() for a in updated])


def run_search(config, dataset, lut, checkpoint_dir=None, resume_from=None,
               progress=None):
    """Execute total_steps of search with temperature annealing.

    Deterministic given (config, seed); checkpoints periodically when
    `checkpoint_dir` is set and resumes exactly from `resume_from`.
    """
    t0 = time.time()
    state = init_search(config, dataset, lut)
    if resume_from is not None:
        load_checkpoint(state, resume_from)
    split = "search-val" if config.arch_on_held_out else "search-train"
    try:
        while state.step < config.total_steps:
            step = state.step
            batch = _batch_for_step(dataset, split, config.batch_size,
                                    state.seeds.data, step)
            metrics = search_step(state, batch, step)
            state.trajectory.append(metrics)
            state.step = step + 1
            if progress is not None and (step % config.log_every == 0
                                         or state.step == config.total_steps):
                progress(metrics)
            if checkpoint_dir is not None and config.checkpoint_every > 0 and \
                    state.step % config.checkpoint_every == 0:
                save_checkpoint(state, f"{checkpoint_dir}/checkpoint.pt")
    except SearchDiverged as exc:
        if checkpoint_dir is not None:
            torch.save(exc.dump, f"{checkpoint_dir}/diverged_step{exc.step}.pt")
        raise
    if checkpoint_dir is not None:
        save_checkpoint(state, f"{checkpoint_dir}/checkpoint.pt")
    raw, updated = final_logits(state)
    source = updated if config.derive_from_updated else raw
    genotype = derive_genotype(source, state.layout)
    violations = validate_genotype(genotype, state.layout)
    if violations:
        raise RuntimeError(f"derived genotype failed validation: {violations}")
    return SearchResult(
        config=config.to_dict(),
        genotype=genotype,
        trajectory=state.trajectory,
        final_alpha=raw,
        final_updated=updated,
        coupler_state=None if state.coupler is None else {
            k: v.detach().clone() for k, v in state.coupler.state_dict().items()},
        wall_seconds=time.time() - t0,
    )


def derive_genotype(alphas, layout):
    """Discrete genotype from logits: per-edge argmax (ties -> lowest op index),
    zero selections prune the edge, and a disconnected node gets its
    highest-logit non-zero edge reinstated with its best non-zero op."""
    if isinstance(alphas, ArchParams):
        alphas = alphas.cells
    cells = []
    ops = candidate_ops()
    for k, alpha in enumerate(alphas):
        a = np.asarray(alpha.detach().numpy() if torch.is_tensor(alpha) else alpha,
                       dtype=np.float64)
        spec = layout.cells[k]
        chosen = {}
        for e in range(spec.num_edges):
            m = int(np.argmax(a[e]))
            if m != ZERO_INDEX:
                chosen[e] = ops[m]
        for node in spec.intermediate_nodes():
            incoming = spec.incoming(node)
            if any(e in chosen for e in incoming):
                continue
            best_edge, best_val = None, None
            for e in incoming:
                row = a[e].copy()
                row[ZERO_INDEX] = -np.inf
                val = row.max()
                if best_val is None or val > best_val:
                    best_edge, best_val = e, val
            row = a[best_edge].copy()
            row[ZERO_INDEX] = -np.inf
            chosen[best_edge] = ops[int(np.argmax(row))]
        cells.append(CellGenotype(
            index=k, edges=tuple(sorted(chosen.items()))))
    return Genotype(fingerprint=layout.fingerprint(), cells=tuple(cells))


def random_genotype(layout, rng):
    """Uniform i.i.d. op per edge; zero prunes; disconnected nodes repaired by
    a uniform re-draw over the node's edges and the non-zero ops."""
    ops = candidate_ops()
    nonzero = [op for op in ops if op is not OpKind.ZERO]
    cells = []
    for k, spec in enumerate(layout.cells):
        chosen = {}
        for e in range(spec.num_edges):
            op = ops[int(rng.integers(0, len(ops)))]
            if op is not OpKind.ZERO:
                chosen[e] = op
        for node in spec.intermediate_nodes():
            incoming = spec.incoming(node)
            if not any(e in chosen for e in incoming):
                e = incoming[int(rng.integers(0, len(incoming)))]
                chosen[e] = nonzero[int(rng.integers(0, len(nonzero)))]
        cells.append(CellGenotype(index=k, edges=tuple(sorted(chosen.items()))))
    return Genotype(fingerprint=layout.fingerprint(), cells=tuple(cells))


class RandomSearchError(RuntimeError):
    pass


def random_search(setting, n, lut, layout, latency_budget=None, seed=0,
                  max_rejections=20000):
    """Random baselines: setting 'a' samples freely; setting 'b' rejection-
    samples until the table latency fits the budget."""
    if n < 1:
        raise ValueError(f"n must be >= 1, got {n}")
    if setting not in ("a", "b"):
        raise ValueError(f"unknown setting {setting!r}")
    if setting == "b" and latency_budget is None:
        raise ValueError("setting 'b' requires a latency budget")
    rng = np.random.default_rng(seed)
    out = []
    for _ in range(n):
        if setting == "a":
            out.append(random_genotype(layout, rng))
            continue
        for attempt in range(max_rejections):
            g = random_genotype(layout, rng)
            if genotype_latency(g, lut, layout) <= latency_budget:
                out.append(g)
                break
        else:
            raise RandomSearchError(
                f"budget {latency_budget} usec infeasible after {max_rejections} rejections")
    return out


def _variant_configs(suite, config):
    def with_ggm(**kw):
        return dataclasses.replace(config, ggm=dataclasses.replace(config.ggm, **kw))

    if suite == "ggm":
        return [("independent", with_ggm(mode="off")),
                ("fully-connected", with_ggm(mode="fc")),
                ("graph-guided", with_ggm(mode="ggm"))]
    if suite == "d":
        return [(f"d={d}", with_ggm(mode="ggm", d=d)) for d in (16, 32, 64, 128, 256)]
    if suite == "graph":
        return [("edge-similarity", with_ggm(mode="ggm", graph="edge_similarity")),
                ("operation-identity", with_ggm(mode="ggm", graph="operation_identity"))]
    if suite == "beta":
        return [(f"beta={b}", dataclasses.replace(config, beta=b))
                for b in (0.0005, 0.005, 0.05)]
    raise ValueError(f"unknown ablation suite {suite!r}")


def run_ablation(suite, seeds, config, dataset, lut, finetune_cfg=None,
                 progress=None):
    """Run the suite's configs over the seeds and aggregate mean/variance.

    With a finetune config each searched genotype is retrained and scored;
    otherwise only search-side quantities are reported.
    """
    if not seeds:
        raise ValueError("need at least one seed")
    layout = build_network_layout(config)
    rows = []
    for label, variant in _variant_configs(suite, config):
        per_seed = []
        for seed in seeds:
            cfg = dataclasses.replace(variant, seed=seed)
            result = run_search(cfg, dataset, lut, progress=progress)
            entry = {
                "seed": seed,
                "final_lat_usec": result.trajectory[-1]["lat_usec"],
                "genotype_lat_usec": genotype_latency(result.genotype, lut, layout),
            }
            if finetune_cfg is not None:
                ft = dataclasses.replace(finetune_cfg, seed=seed)
                net, report, _ = finetune(result.genotype, layout, dataset, ft)
                entry["miou"] = report.miou
                entry["fps"] = report.fps
                entry["num_parameters"] = count_parameters(net)
            per_seed.append(entry)
            if progress is not None:
                progress({"suite": suite, "variant": label, "seed": seed, **entry})
        row = {"label": label, "per_seed": per_seed}
        for key in ("final_lat_usec", "genotype_lat_usec", "miou", "fps",
                    "num_parameters"):
            values = [e[key] for e in per_seed if key in e]
            if values:
                row[f"{key}_mean"] = float(np.mean(values))
                row[f"{key}_var"] = float(np.var(values))
        rows.append(row)
    return {"suite": suite, "seeds": list(seeds), "rows": rows}
