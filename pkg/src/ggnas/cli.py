"""Command-line entry point wiring all modules together.

Exit codes: 0 success, 1 usage/config error, 2 runtime failure. Errors are
emitted as a JSON payload on stderr. Every command appends one manifest line
to manifests.jsonl next to its primary output. The only environment variable
consulted is GGNAS_DEVICE (device selection).
"""

import argparse
import dataclasses
import json
import os
import shutil
import subprocess
import sys
import time
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

from . import __version__
from .arch_space import (build_network_layout, deserialize, export_dot, op_census,
                         serialize, validate_genotype)
from .bench import (ToyDataset, finetune, format_report_table, make_toy_dataset,
                    measure_fps, miou, evaluate_network, EvalReport)
from .config import (ConfigError, DatasetConfig, FinetuneConfig, SearchConfig,
                     dump_config, load_config_file, validate_search_config)
from .latency import LatencyTable, build_lut, genotype_latency
from .search import (RandomSearchError, SearchDiverged, derive_genotype, random_search,
                     run_ablation, run_search)
from .supernet import DerivedNetwork, count_parameters


class UsageError(Exception):
    pass


class OutputConflict(RuntimeError):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _emit_error(kind, message, details=None):
    payload = {"error": message, "kind": kind}
    if details:
        payload["details"] = details
    print(json.dumps(payload), file=sys.stderr)


def _device_from(args):
    return getattr(args, "device", None) or os.environ.get("GGNAS_DEVICE")


def write_output(path, text, force=False):
    """Idempotent text output: identical rewrites pass, conflicts need --force."""
    path = Path(path)
    if path.exists() and not force:
        existing = path.read_text()
        if existing == text:
            return
        raise OutputConflict(f"{path} exists with different content (use --force)")
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(text)


def _append_manifest(primary_path, record):
    primary = Path(primary_path)
    directory = primary if primary.is_dir() else primary.parent
    directory.mkdir(parents=True, exist_ok=True)
    record = {"version": __version__, **record}
    with open(directory / "manifests.jsonl", "a") as fh:
        fh.write(json.dumps(record, sort_keys=True) + "\n")


def _manifest(command, args, outputs, config=None, seed=None, started=None,
              status="ok"):
    return {
        "command": command,
        "argv": getattr(args, "_argv", sys.argv[1:]),
        "outputs": [str(o) for o in outputs],
        "config": config,
        "seed": seed,
        "started": started,
        "finished": time.strftime("%Y-%m-%dT%H:%M:%S"),
        "status": status,
    }


def _load_configs(args):
    if getattr(args, "config", None):
        search, dataset, ft = load_config_file(args.config)
    else:
        search, dataset, ft = SearchConfig(), DatasetConfig(), FinetuneConfig()
        dataset.image_size = search.image_size
        dataset.num_classes = search.num_classes
    for flag, field in (("beta", "beta"), ("seed", "seed"), ("steps", "total_steps")):
        value = getattr(args, flag, None)
        if value is not None:
            search = dataclasses.replace(search, **{field: value})
    if getattr(args, "comm_mode", None):
        search = dataclasses.replace(
            search, ggm=dataclasses.replace(search.ggm, mode=args.comm_mode))
    if getattr(args, "seed", None) is not None:
        dataset = dataclasses.replace(dataset)
        ft = dataclasses.replace(ft, seed=args.seed)
    if getattr(args, "epochs", None) is not None:
        ft = dataclasses.replace(ft, epochs=args.epochs)
    violations = validate_search_config(search)
    if violations:
        raise ConfigError(violations)
    return search, dataset, ft


def _make_dataset(search, dataset_cfg):
    layout = build_network_layout(search)
    return make_toy_dataset(dataset_cfg.seed, dataset_cfg.n_images,
                            dataset_cfg.image_size, dataset_cfg.num_classes,
                            total_stride=layout.total_stride)


def _read_genotype(path):
    try:
        return deserialize(Path(path).read_text())
    except FileNotFoundError as exc:
        raise UsageError(f"genotype file not found: {path}") from exc


def cmd_lut(args):
    started = time.strftime("%Y-%m-%dT%H:%M:%S")
    if args.action != "build":
        raise UsageError(f"unknown lut action {args.action!r}")
    search, _, _ = _load_configs(args)
    layout = build_network_layout(search)
    device = None
    if args.mode == "profiled":
        device = _device_from(args)
        if device is None:
            raise UsageError("profiled mode requires --device or GGNAS_DEVICE")
    lut = build_lut(layout, mode=args.mode, trials=args.trials, device=device)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    if args.mode == "synthetic":
        write_output(out, lut.to_json(), force=args.force)
    else:
        # profiled timings differ run to run; idempotency applies to
        # deterministic artifacts only
        lut.save(out)
    _append_manifest(out, _manifest("lut", args, [out], config=search.to_dict(),
                                    started=started))
    print(f"wrote {out} ({len(lut.entries)} entries, mode={lut.provenance})")
    return 0


def _plot_curves(trajectory, path):
    steps = [m["step"] for m in trajectory]
    fig, ax1 = plt.subplots(figsize=(7, 4))
    ax1.plot(steps, [m["loss"] for m in trajectory], label="loss", color="tab:blue")
    ax1.plot(steps, [m["ce"] for m in trajectory], label="cross-entropy",
             color="tab:cyan", alpha=0.7)
    ax1.set_xlabel("step")
    ax1.set_ylabel("loss")
    ax2 = ax1.twinx()
    ax2.plot(steps, [m["lat_usec"] for m in trajectory], label="expected latency",
             color="tab:red")
    ax2.set_ylabel("expected latency (usec)")
    lines, labels = ax1.get_legend_handles_labels()
    lines2, labels2 = ax2.get_legend_handles_labels()
    ax1.legend(lines + lines2, labels + labels2, loc="upper right", fontsize=8)
    fig.tight_layout()
    fig.savefig(path, dpi=110)
    plt.close(fig)


def cmd_search(args):
    started = time.strftime("%Y-%m-%dT%H:%M:%S")
    search, dataset_cfg, _ = _load_configs(args)
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    lut = LatencyTable.load(args.lut)
    dataset = _make_dataset(search, dataset_cfg)

    def progress(metrics):
        print(f"step {metrics['step'] + 1}/{search.total_steps} "
              f"loss={metrics['loss']:.4f} ce={metrics['ce']:.4f} "
              f"lat={metrics['lat_usec']:.1f}us temp={metrics['temperature']:.3f}",
              flush=True)

    resume_from = None
    if args.resume and (out_dir / "checkpoint.pt").exists():
        resume_from = str(out_dir / "checkpoint.pt")
        print(f"resuming from {resume_from}")
    result = run_search(search, dataset, lut, checkpoint_dir=str(out_dir),
                        resume_from=resume_from, progress=progress)
    write_output(out_dir / "genotype.json", serialize(result.genotype),
                 force=args.force or bool(resume_from))
    write_output(out_dir / "trajectory.csv", result.trajectory_csv(),
                 force=args.force or bool(resume_from))
    write_output(out_dir / "config.json", dump_config(search, dataset_cfg),
                 force=True)
    _plot_curves(result.trajectory, out_dir / "curves.png")
    outputs = [out_dir / n for n in
               ("genotype.json", "trajectory.csv", "checkpoint.pt", "curves.png")]
    _append_manifest(out_dir, _manifest("search", args, outputs,
                                        config=search.to_dict(), seed=search.seed,
                                        started=started))
    final = result.trajectory[-1]
    print(f"done: loss={final['loss']:.4f} expected latency={final['lat_usec']:.1f}us "
          f"genotype={out_dir / 'genotype.json'}")
    return 0


def cmd_derive(args):
    import torch

    started = time.strftime("%Y-%m-%dT%H:%M:%S")
    data = torch.load(args.checkpoint, weights_only=False)
    cfg_doc = data["config"]
    search, _, _ = load_config_from_dict(cfg_doc)
    layout = build_network_layout(search)
    alphas = [data["alpha"][f"cell_{k}"] for k in range(search.num_cells)]
    if not args.from_raw and data.get("coupler") is not None:
        from .arch_space import candidate_ops, num_edges_for
        from .ggm import build_coupler, propagate_chain

        coupler = build_coupler(search.ggm, search.num_cells,
                                num_edges_for(search.num_intermediate),
                                len(candidate_ops()))
        coupler.load_state_dict(data["coupler"])
        with torch.no_grad():
            alphas = propagate_chain(alphas, coupler)
    genotype = derive_genotype(alphas, layout)
    write_output(args.out, serialize(genotype), force=args.force)
    _append_manifest(args.out, _manifest("derive", args, [args.out],
                                         started=started))
    print(f"wrote {args.out}")
    return 0


def load_config_from_dict(doc):
    import tempfile

    with tempfile.NamedTemporaryFile("w", suffix=".json", delete=False) as fh:
        json.dump({"search": doc} if "search" not in doc else doc, fh)
        path = fh.name
    try:
        return load_config_file(path)
    finally:
        os.unlink(path)


def cmd_train(args):
    import torch

    started = time.strftime("%Y-%m-%dT%H:%M:%S")
    search, dataset_cfg, ft = _load_configs(args)
    genotype = _read_genotype(args.genotype)
    layout = build_network_layout(search)
    violations = validate_genotype(genotype, layout)
    if violations:
        raise UsageError("invalid genotype: " + "; ".join(violations))
    dataset = _make_dataset(search, dataset_cfg)
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    net, report, trajectory = finetune(genotype, layout, dataset, ft)
    torch.save({"version": 1, "state_dict": net.state_dict(),
                "genotype": serialize(genotype)}, out_dir / "weights.pt")
    report_text = format_report_table(report, label="toy-finetuned")
    write_output(out_dir / "report.txt", report_text, force=args.force)
    write_output(out_dir / "report.json",
                 json.dumps(report.to_dict(), indent=2, sort_keys=True) + "\n",
                 force=args.force)
    _append_manifest(out_dir, _manifest("train", args,
                                        [out_dir / "weights.pt", out_dir / "report.json"],
                                        seed=ft.seed, started=started))
    print(report_text)
    return 0


def cmd_eval(args):
    import torch

    started = time.strftime("%Y-%m-%dT%H:%M:%S")
    search, dataset_cfg, ft = _load_configs(args)
    genotype = _read_genotype(args.genotype)
    layout = build_network_layout(search)
    violations = validate_genotype(genotype, layout)
    if violations:
        raise UsageError("invalid genotype: " + "; ".join(violations))
    net = DerivedNetwork(genotype, layout)
    payload = torch.load(args.weights, weights_only=False)
    net.load_state_dict(payload["state_dict"])
    dataset = _make_dataset(search, dataset_cfg)
    images, masks = dataset.split_arrays("test")
    confusion = evaluate_network(net, images, masks, dataset.num_classes,
                                 batch_size=ft.eval_batch_size)
    result = miou(confusion)
    latency_ms, fps = measure_fps(net, dataset_cfg.image_size, trials=20)
    report = EvalReport(per_class_iou=result.per_class, miou=result.miou,
                        confusion=confusion.tolist(), latency_ms=latency_ms, fps=fps,
                        input_size=dataset_cfg.image_size,
                        num_parameters=count_parameters(net))
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    report_text = format_report_table(report, label="toy-eval")
    write_output(out_dir / "report.txt", report_text, force=args.force)
    write_output(out_dir / "report.json",
                 json.dumps(report.to_dict(), indent=2, sort_keys=True) + "\n",
                 force=args.force)
    _append_manifest(out_dir, _manifest("eval", args, [out_dir / "report.json"],
                                        started=started))
    print(report_text)
    return 0


def _plot_ablation(report, path):
    rows = report["rows"]
    labels = [r["label"] for r in rows]
    fig, ax = plt.subplots(figsize=(7, 4))
    if report["suite"] == "beta":
        lat = [r["final_lat_usec_mean"] for r in rows]
        ax.plot(labels, lat, marker="o", color="tab:red", label="expected latency (usec)")
        if "miou_mean" in rows[0]:
            ax2 = ax.twinx()
            ax2.plot(labels, [r["miou_mean"] * 100 for r in rows], marker="s",
                     color="tab:blue", label="mIoU (%)")
            ax2.set_ylabel("mIoU (%)")
        ax.set_ylabel("expected latency (usec)")
    else:
        key = "miou_mean" if "miou_mean" in rows[0] else "final_lat_usec_mean"
        values = [r[key] for r in rows]
        errs = None
        if f"{key.rsplit('_', 1)[0]}_var" in rows[0]:
            errs = [r[key.replace("_mean", "_var")] ** 0.5 for r in rows]
        ax.bar(labels, values, yerr=errs, capsize=4, color="tab:blue")
        ax.set_ylabel(key)
    ax.set_xlabel(report["suite"])
    fig.tight_layout()
    fig.savefig(path, dpi=110)
    plt.close(fig)


def _ablation_table(report):
    rows = report["rows"]
    keys = [k for k in ("miou_mean", "miou_var", "fps_mean", "final_lat_usec_mean",
                        "genotype_lat_usec_mean", "num_parameters_mean")
            if k in rows[0]]
    header = f"{'variant':<22}" + "".join(f"{k:>24}" for k in keys)
    lines = [header, "-" * len(header)]
    for r in rows:
        lines.append(f"{r['label']:<22}" + "".join(f"{r[k]:>24.4f}" for k in keys))
    return "\n".join(lines) + "\n"


def cmd_ablate(args):
    started = time.strftime("%Y-%m-%dT%H:%M:%S")
    search, dataset_cfg, ft = _load_configs(args)
    lut = LatencyTable.load(args.lut)
    dataset = _make_dataset(search, dataset_cfg)
    seeds = [int(s) for s in args.seeds.split(",")]
    finetune_cfg = None if args.no_finetune else ft

    def progress(info):
        print(json.dumps({k: v for k, v in info.items() if not isinstance(v, dict)}),
              flush=True)

    report = run_ablation(args.suite, seeds, search, dataset, lut,
                          finetune_cfg=finetune_cfg, progress=progress)
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    write_output(out_dir / f"{args.suite}_report.json",
                 json.dumps(report, indent=2, sort_keys=True) + "\n", force=args.force)
    table = _ablation_table(report)
    write_output(out_dir / f"{args.suite}_table.txt", table, force=args.force)
    _plot_ablation(report, out_dir / f"{args.suite}_plot.png")
    _append_manifest(out_dir, _manifest("ablate", args,
                                        [out_dir / f"{args.suite}_report.json"],
                                        config=search.to_dict(), started=started))
    print(table)
    return 0


def cmd_viz(args):
    started = time.strftime("%Y-%m-%dT%H:%M:%S")
    search, _, _ = _load_configs(args)
    genotype = _read_genotype(args.genotype)
    layout = build_network_layout(search)
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    dot_text = export_dot(genotype, layout)
    write_output(out_dir / "genotype.dot", dot_text, force=args.force)
    census = op_census(genotype)
    write_output(out_dir / "op_census.json",
                 json.dumps(census, indent=2, sort_keys=True) + "\n", force=args.force)
    outputs = [out_dir / "genotype.dot", out_dir / "op_census.json"]
    renderer = shutil.which("dot")
    if renderer:
        png = out_dir / "genotype.png"
        subprocess.run([renderer, "-Tpng", str(out_dir / "genotype.dot"),
                        "-o", str(png)], check=True)
        outputs.append(png)
    else:
        print("warning: graphviz 'dot' not found; wrote DOT only", file=sys.stderr)
    _append_manifest(out_dir, _manifest("viz", args, outputs, started=started))
    print(f"light-weight ops: {census['parameterless_total']}, "
          f"dilation>=4 ops: {census['dilation_ge4_total']}")
    return 0


def cmd_random_baseline(args):
    started = time.strftime("%Y-%m-%dT%H:%M:%S")
    search, _, _ = _load_configs(args)
    layout = build_network_layout(search)
    lut = LatencyTable.load(args.lut) if args.lut else None
    if args.setting == "b" and lut is None:
        raise UsageError("setting 'b' requires --lut")
    genotypes = random_search(args.setting, args.n, lut, layout,
                              latency_budget=args.budget, seed=args.seed or 0)
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    summary = []
    for i, g in enumerate(genotypes):
        path = out_dir / f"genotype_{i:03d}.json"
        write_output(path, serialize(g), force=args.force)
        entry = {"file": path.name}
        if lut is not None:
            entry["lat_usec"] = genotype_latency(g, lut, layout)
        summary.append(entry)
    write_output(out_dir / "summary.json",
                 json.dumps({"setting": args.setting, "genotypes": summary},
                            indent=2, sort_keys=True) + "\n", force=args.force)
    _append_manifest(out_dir, _manifest("random-baseline", args,
                                        [out_dir / "summary.json"],
                                        seed=args.seed, started=started))
    print(f"wrote {len(genotypes)} genotypes to {out_dir}")
    return 0


def build_parser():
    parser = _Parser(prog="ggnas", description=__doc__)
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    def add_common(p, config=True, force=True):
        if config:
            p.add_argument("--config", help="YAML/JSON config file")
        if force:
            p.add_argument("--force", action="store_true",
                           help="overwrite conflicting outputs")

    p = sub.add_parser("lut", help="build the latency lookup table")
    p.add_argument("action", choices=["build"])
    p.add_argument("--mode", choices=["profiled", "synthetic"], required=True)
    p.add_argument("--trials", type=int, default=50)
    p.add_argument("--device", help="device for profiled mode (or GGNAS_DEVICE)")
    p.add_argument("--out", required=True)
    add_common(p)
    p.set_defaults(func=cmd_lut)

    p = sub.add_parser("search", help="run the architecture search")
    p.add_argument("--lut", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--beta", type=float)
    p.add_argument("--seed", type=int)
    p.add_argument("--steps", type=int)
    p.add_argument("--mode", dest="comm_mode", choices=["ggm", "fc", "off"],
                   help="inter-cell communication mode")
    p.add_argument("--resume", action="store_true")
    add_common(p)
    p.set_defaults(func=cmd_search)

    p = sub.add_parser("derive", help="derive a genotype from a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--from-raw", action="store_true",
                   help="use raw logits instead of communication-updated ones")
    add_common(p, config=False)
    p.set_defaults(func=cmd_derive)

    p = sub.add_parser("train", help="finetune a derived genotype from scratch")
    p.add_argument("--genotype", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--epochs", type=int)
    p.add_argument("--seed", type=int)
    add_common(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate trained weights")
    p.add_argument("--genotype", required=True)
    p.add_argument("--weights", required=True)
    p.add_argument("--out", required=True)
    add_common(p)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("ablate", help="run an ablation suite")
    p.add_argument("--suite", choices=["ggm", "d", "graph", "beta"], required=True)
    p.add_argument("--lut", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--seeds", default="0,1,2,3,4")
    p.add_argument("--epochs", type=int)
    p.add_argument("--no-finetune", action="store_true",
                   help="skip retraining; report search-side quantities only")
    add_common(p)
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("viz", help="export DOT visualization and op census")
    p.add_argument("--genotype", required=True)
    p.add_argument("--out", required=True)
    add_common(p)
    p.set_defaults(func=cmd_viz)

    p = sub.add_parser("random-baseline", help="sample random-search baselines")
    p.add_argument("--setting", choices=["a", "b"], required=True)
    p.add_argument("-n", type=int, default=10)
    p.add_argument("--lut")
    p.add_argument("--budget", type=float)
    p.add_argument("--seed", type=int)
    p.add_argument("--out", required=True)
    add_common(p)
    p.set_defaults(func=cmd_random_baseline)
    return parser


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        args._argv = list(argv) if argv is not None else sys.argv[1:]
    except UsageError as exc:
        _emit_error("usage", str(exc))
        return 1
    try:
        return args.func(args)
    except UsageError as exc:
        _emit_error("usage", str(exc))
        return 1
    except ConfigError as exc:
        _emit_error("config", "configuration invalid", details=exc.violations)
        return 1
    except OutputConflict as exc:
        _emit_error("runtime", str(exc))
        return 2
    except SearchDiverged as exc:
        _emit_error("runtime", f"search diverged at step {exc.step}")
        return 2
    except RandomSearchError as exc:
        _emit_error("runtime", str(exc))
        return 2
    except (OSError, RuntimeError, ValueError) as exc:
        _emit_error("runtime", f"{type(exc).__name__}: {exc}")
        return 2


def entry():
    sys.exit(main())


if __name__ == "__main__":
    entry()
