"""Command-line entry point: ``mddm {simulate,train,enhance,evaluate,sweep,plot}``.

Exit codes: 0 success, 1 partial per-file failure or missing outputs,
2 configuration / input error, 3 training divergence. Every subcommand
writes only under its ``--out`` directory and echoes its resolved settings
to ``<out>/resolved.json``.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
import time
from pathlib import Path

from .errors import ConfigError, InputError, MddmError, TrainingDiverged

log = logging.getLogger("mddm")

EXIT_OK, EXIT_PARTIAL, EXIT_INPUT, EXIT_DIVERGED = 0, 1, 2, 3
SWEEP_STEPS = (0, 10, 20, 30, 40, 50)
RECORDS_VERSION = 1


def _echo(out: Path, args: argparse.Namespace, **extra) -> dict:
    resolved = {k: (str(v) if isinstance(v, Path) else v) for k, v in vars(args).items() if k != "func"}
    resolved.update(extra)
    out.mkdir(parents=True, exist_ok=True)
    (out / "resolved.json").write_text(json.dumps(resolved, indent=2, sort_keys=True, default=str) + "\n")
    print(json.dumps(resolved, sort_keys=True, default=str))
    return resolved


def _parse_overrides(items) -> dict:
    out = {}
    for item in items or []:
        key, sep, value = item.partition("=")
        if not sep:
            raise ConfigError(f"override {item!r} must look like section.key=value")
        out[key.strip()] = value.strip()
    return out


# --- simulate --------------------------------------------------------------------

def cmd_simulate(args) -> int:
    from .data import build_manifest, example_from_record, read_manifest
    from .signal import write_wav

    out = Path(args.out)
    _echo(out, args)
    summary = build_manifest(args.clean, args.noise, out / "manifest.jsonl", tuple(args.split_ratios),
                             args.seed, args.n, args.crop_seconds)
    if args.render:
        _, records = read_manifest(out / "manifest.jsonl")
        for rec in records:
            ex = example_from_record(rec)
            write_wav(out / "mixtures" / f"{rec['id']}.wav", ex.mixture, 24000)
            write_wav(out / "targets" / f"{rec['id']}.wav", ex.clean, 24000)
    n = max(1, summary["examples"])
    summary["fractions"] = {c: round(v / n, 4) for c, v in summary["conditions"].items()}
    print(json.dumps(summary, sort_keys=True))
    return EXIT_OK


# --- train -----------------------------------------------------------------------

def cmd_train(args) -> int:
    from .config import dump_config, load_config
    from .train import init_state, load_state, manifest_dataset, synthetic_dataset, train_joint, train_stage1

    out = Path(args.out)
    overrides = _parse_overrides(args.set)
    if args.seed is not None:
        overrides["train.seed"] = str(args.seed)
    cfg = load_config(args.config, overrides, args.profile)
    _echo(out, args)
    (out / "config.txt").write_text(dump_config(cfg))
    print(dump_config(cfg), end="")
    if args.data:
        data = manifest_dataset(args.data)
    else:
        data = synthetic_dataset(args.synthetic, args.synthetic_val, args.synthetic_seconds, seed=cfg.seed)

    ckpt_dir = out / "checkpoints"
    if args.resume:
        latest = ckpt_dir / "latest.npz" if args.resume == "auto" else Path(args.resume)
        if not latest.exists():
            raise InputError(f"no checkpoint to resume from at {latest}")
        state = load_state(latest)
    else:
        state = init_state(cfg)
    log_path = out / "train_log.jsonl"
    if args.stage in ("disc", "both"):
        state = train_stage1(cfg, data, state, log_path, ckpt_dir)
    if args.stage in ("joint", "both"):
        state = train_joint(state, cfg, data, log_path, ckpt_dir)
    print(json.dumps({"step": state.step, "stage": state.stage, "checkpoint": state.last_checkpoint}))
    return EXIT_OK


# --- enhance ---------------------------------------------------------------------

def _input_files(inputs) -> list[Path]:
    files = []
    for item in inputs:
        p = Path(item)
        files.extend(sorted(p.glob("*.wav")) if p.is_dir() else [p])
    return files


def _enhance_files(state, files, out_dir: Path, k_steps: int, seed: int, corrector: bool):
    from .signal import read_wav, write_wav
    from .train import enhance

    out_dir.mkdir(parents=True, exist_ok=True)
    records, failures = [], 0
    for path in files:
        rec = {"input": str(path), "k_steps": k_steps, "seed": seed}
        try:
            noisy = read_wav(path)
            t0 = time.perf_counter()
            y = enhance(noisy, k_steps, seed, state, corrector=corrector)
            rec["runtime_s"] = time.perf_counter() - t0
            rec["output"] = str(out_dir / f"{path.stem}.wav")
            write_wav(rec["output"], y)
            rec["status"] = "ok"
        except (OSError, MddmError, ValueError) as exc:
            failures += 1
            rec.update(status="failed", error=str(exc))
            log.error("%s: %s", path, exc)
        records.append(rec)
    return records, failures


def cmd_enhance(args) -> int:
    from .data import write_jsonl
    from .train import load_state

    out = Path(args.out)
    _echo(out, args)
    state = load_state(args.checkpoint)
    records, failures = _enhance_files(state, _input_files(args.inputs), out, args.steps, args.seed,
                                       args.corrector)
    write_jsonl(out / "enhance_records.jsonl", records)
    return EXIT_PARTIAL if failures else EXIT_OK


# --- evaluate --------------------------------------------------------------------

def cmd_evaluate(args) -> int:
    from .metrics import evaluate_set

    out = Path(args.out)
    _echo(out, args)
    report = evaluate_set(args.manifest, args.outputs, args.split)
    report.write(out / "metrics.jsonl")
    print(report.table())
    if report.missing:
        print(f"{len(report.missing)} manifest rows have no output", file=sys.stderr)
        return EXIT_PARTIAL
    return EXIT_OK


# --- sweep -----------------------------------------------------------------------

def cmd_sweep(args) -> int:
    from .data import example_from_record, read_manifest, write_jsonl
    from .metrics import evaluate_set
    from .signal import write_wav
    from .train import load_state

    out = Path(args.out)
    _echo(out, args)
    state = load_state(args.checkpoint)
    _, records = read_manifest(args.manifest)
    records = [r for r in records if args.split is None or r["split"] == args.split]
    mix_dir = out / "mixtures"
    for rec in records:
        write_wav(mix_dir / f"{rec['id']}.wav", example_from_record(rec).mixture, 24000)
    dataset = f"{Path(args.manifest).stem}:{args.split or 'all'}"
    rows, failures = [], 0
    for k in args.steps:
        k_dir = out / f"k{k:02d}"
        _, n_failed = _enhance_files(state, sorted(mix_dir.glob("*.wav")), k_dir, k, args.seed, args.corrector)
        failures += n_failed
        report = evaluate_set(args.manifest, k_dir, args.split)
        for metric, agg in report.aggregates.items():
            rows.append({"version": RECORDS_VERSION, "k": k, "dataset": dataset, "metric": metric,
                         "mean": agg["mean"], "ci95": agg["ci95"], "n": agg["n"], "missing": len(report.missing)})
    records_path = out / "sweep_records.jsonl"
    write_jsonl(records_path, rows)
    render_sweep_plot(records_path, out / "sweep.png")
    return EXIT_PARTIAL if failures else EXIT_OK


def render_sweep_plot(records_path, png_path) -> None:
    """Plot mean metric against k for each dataset, from the records file alone."""
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    with open(records_path) as fh:
        rows = [json.loads(line) for line in fh if line.strip()]
    metrics = sorted({r["metric"] for r in rows})
    fig, axes = plt.subplots(1, len(metrics), figsize=(5 * len(metrics), 3.5), squeeze=False)
    for ax, metric in zip(axes[0], metrics):
        for dataset in sorted({r["dataset"] for r in rows}):
            sel = sorted((r for r in rows if r["metric"] == metric and r["dataset"] == dataset and
                          r["mean"] is not None), key=lambda r: r["k"])
            ks = [r["k"] for r in sel]
            ax.errorbar(ks, [r["mean"] for r in sel], yerr=[r["ci95"] or 0.0 for r in sel], marker="o",
                        capsize=3, label=dataset)
        ax.set_xlabel("reverse steps k (0 = MDM only)")
        ax.set_ylabel({"si_sdr_db": "SI-SDR [dB]", "estoi": "ESTOI"}.get(metric, metric))
        ax.grid(alpha=0.3)
        ax.legend(fontsize=8)
    fig.tight_layout()
    fig.savefig(png_path, dpi=100, metadata={"Software": None})
    plt.close(fig)


def cmd_plot(args) -> int:
    out = Path(args.out)
    _echo(out, args)
    render_sweep_plot(args.records, out / "sweep.png")
    return EXIT_OK


# --- parser ----------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(
        prog="mddm", description="Speech enhancement: multi-view discriminative model plus truncated diffusion.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("simulate", help="build a mixture manifest from clean and noise directories")
    s.add_argument("--clean", required=True, type=Path)
    s.add_argument("--noise", required=True, type=Path)
    s.add_argument("--n", type=int, default=None, help="number of mixtures (default: one per clean file)")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--split-ratios", type=float, nargs=3, default=(0.8, 0.1, 0.1))
    s.add_argument("--crop-seconds", type=float, default=2.0)
    s.add_argument("--render", action="store_true", help="also write mixture and target WAVs")
    s.add_argument("--out", required=True, type=Path)
    s.set_defaults(func=cmd_simulate)

    t = sub.add_parser("train", help="two-stage training")
    t.add_argument("--config", type=Path, default=None)
    t.add_argument("--profile", choices=("desk", "paper"), default="paper")
    t.add_argument("--set", action="append", metavar="SECTION.KEY=VALUE", help="config override (repeatable)")
    t.add_argument("--stage", choices=("disc", "joint", "both"), default="both")
    t.add_argument("--data", type=Path, default=None, help="manifest; synthetic data if omitted")
    t.add_argument("--synthetic", type=int, default=10, help="synthetic training utterances")
    t.add_argument("--synthetic-val", type=int, default=0)
    t.add_argument("--synthetic-seconds", type=float, default=1.0)
    t.add_argument("--resume", nargs="?", const="auto", default=None,
                   help="checkpoint path, or <out>/checkpoints/latest.npz if given without a value")
    t.add_argument("--seed", type=int, default=None)
    t.add_argument("--out", required=True, type=Path)
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("enhance", help="enhance WAV files")
    e.add_argument("--checkpoint", required=True, type=Path)
    e.add_argument("--steps", type=int, default=30, help="reverse diffusion steps (0 = MDM only)")
    e.add_argument("--seed", type=int, default=0)
    e.add_argument("--corrector", action="store_true", help="add an annealed Langevin corrector per step")
    e.add_argument("--out", required=True, type=Path)
    e.add_argument("inputs", nargs="+", help="WAV files or directories")
    e.set_defaults(func=cmd_enhance)

    v = sub.add_parser("evaluate", help="score system outputs against a manifest")
    v.add_argument("--manifest", required=True, type=Path)
    v.add_argument("--outputs", required=True, type=Path)
    v.add_argument("--split", default=None)
    v.add_argument("--seed", type=int, default=0, help="unused; accepted for a uniform interface")
    v.add_argument("--out", required=True, type=Path)
    v.set_defaults(func=cmd_evaluate)

    w = sub.add_parser("sweep", help="metrics as a function of reverse steps k")
    w.add_argument("--checkpoint", required=True, type=Path)
    w.add_argument("--manifest", required=True, type=Path)
    w.add_argument("--split", default="test")
    w.add_argument("--steps", type=int, nargs="+", default=list(SWEEP_STEPS))
    w.add_argument("--seed", type=int, default=0)
    w.add_argument("--corrector", action="store_true")
    w.add_argument("--out", required=True, type=Path)
    w.set_defaults(func=cmd_sweep)

    q = sub.add_parser("plot", help="re-render the sweep plot from a records file")
    q.add_argument("--records", required=True, type=Path)
    q.add_argument("--out", required=True, type=Path)
    q.set_defaults(func=cmd_plot)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except TrainingDiverged as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    except (ConfigError, InputError, MddmError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT


if __name__ == "__main__":
    sys.exit(main())
