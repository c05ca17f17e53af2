"""Command line entry point: ``coic <subcommand> ...``.

Exit codes: 0 success, 1 runtime failure, 2 usage/config error,
3 nothing to evaluate.
"""
from __future__ import annotations

import argparse
import json
import logging
import platform
import sys
from dataclasses import fields
from pathlib import Path

import numpy as np
import torch

from . import __version__
from .trainer import ConfigError, TrainConfig, config_hash, load_config_file

log = logging.getLogger("coic")

EXIT_OK, EXIT_FAIL, EXIT_USAGE, EXIT_EMPTY = 0, 1, 2, 3


class UsageError(Exception):
    pass


def _flag(key: str) -> str:
    return "--" + key.replace("_", "-")


def add_config_flags(p: argparse.ArgumentParser) -> None:
    """One flag per TrainConfig key; unset flags fall through to the config file."""
    g = p.add_argument_group("training config (override --config values)")
    for f in fields(TrainConfig):
        key = "lambda" if f.name == "lam" else f.name
        if key == "seed":
            continue
        default = f.default
        if isinstance(default, bool):
            g.add_argument(_flag(key), dest=f"cfg_{key}", default=None,
                           action=argparse.BooleanOptionalAction)
        elif key == "sigma_range":
            g.add_argument(_flag(key), dest=f"cfg_{key}", default=None, metavar="LO,HI")
        else:
            g.add_argument(_flag(key), dest=f"cfg_{key}", default=None, type=type(default),
                           metavar=type(default).__name__.upper())


def resolve_config(args) -> TrainConfig:
    d = {}
    if getattr(args, "config", None):
        d.update(load_config_file(args.config))
    for key in TrainConfig.keys():
        v = getattr(args, f"cfg_{key}", None)
        if v is not None:
            d[key] = v
    if args.seed is not None:
        d["seed"] = args.seed
    return TrainConfig.from_dict(d)


def write_run_record(out: Path, args, argv, cfg: TrainConfig | None = None, extra=None) -> Path:
    rec = {
        "subcommand": args.command,
        "argv": list(argv),
        "seed": args.seed,
        "versions": {
            "coic": __version__,
            "python": platform.python_version(),
            "torch": torch.__version__,
            "numpy": np.__version__,
        },
    }
    if cfg is not None:
        rec["config"] = cfg.to_dict()
        rec["config_hash"] = config_hash(cfg)
    if extra:
        rec.update(extra)
    out.mkdir(parents=True, exist_ok=True)
    path = out / "run.json"
    path.write_text(json.dumps(rec, indent=2, sort_keys=True), encoding="utf-8")
    return path


def _manifests(path):
    from .rainsim import find_manifests
    p = Path(path)
    if not p.exists():
        raise UsageError(f"data path not found: {p}")
    return find_manifests(p)


def _load_networks(args):
    from .models import IdentityModel
    from .trainer import load_state
    if getattr(args, "identity", False):
        return IdentityModel(), None
    if not args.checkpoint:
        raise UsageError("--checkpoint is required (or --identity)")
    if not Path(args.checkpoint).exists():
        raise UsageError(f"checkpoint not found: {args.checkpoint}")
    state = load_state(args.checkpoint)
    return state.model, state.encoder


# ---------------------------------------------------------------------------
# subcommands


def cmd_gen_data(args, argv) -> int:
    from .rainsim import PRESETS, gen_mixed_dataset
    regimes = [r.strip() for r in args.regimes.split(",") if r.strip()]
    bad = [r for r in regimes if r not in PRESETS]
    if bad:
        raise UsageError(f"unknown regimes {bad}; choose from {sorted(PRESETS)}")
    seed = 0 if args.seed is None else args.seed
    out = Path(args.out)
    ms = gen_mixed_dataset(regimes, args.n, out, seed, image_size=args.image_size, clean_dir=args.clean_dir)
    write_run_record(out, args, argv, extra={"datasets": [m.dataset_id for m in ms]})
    print(f"wrote {sum(len(m.pairs) for m in ms)} pairs in {len(ms)} datasets to {out}")
    return EXIT_OK


def cmd_train(args, argv) -> int:
    from .plotting import plot_losses
    from .trainer import load_state, train
    cfg = resolve_config(args)
    manifests = _manifests(args.data)
    out = Path(args.out)
    state = None
    if args.resume:
        state = load_state(args.resume)
        if state.cfg.to_dict() != cfg.to_dict():
            log.warning("resuming with the checkpoint's config; command-line config ignored")
        cfg = state.cfg
    write_run_record(out, args, argv, cfg)
    state = train(cfg, manifests, out_dir=out, state=state, workers=args.workers, log_every=args.log_every)
    plot_losses(state.history, out / "loss.png")
    h = state.history[-1] if state.history else {}
    print(f"trained {state.step} steps; final fidelity {h.get('fidelity', float('nan')):.5f}; "
          f"checkpoint {out / 'checkpoint.coic'}")
    return EXIT_OK


def cmd_eval(args, argv) -> int:
    from .plotting import plot_eval
    from .trainer import evaluate, write_eval_csv
    model, encoder = _load_networks(args)
    manifests = _manifests(args.data)
    out = Path(args.out)
    rep = evaluate(model, encoder, manifests)
    out.mkdir(parents=True, exist_ok=True)
    write_eval_csv(rep, out / "eval.csv")
    (out / "eval.json").write_text(json.dumps({"rows": rep.rows, "missing": rep.missing}, indent=2),
                                   encoding="utf-8")
    write_run_record(out, args, argv, extra={"checkpoint": args.checkpoint, "identity": args.identity})
    for name, files in rep.missing.items():
        print(f"skipped {name}: {len(files)} missing files", file=sys.stderr)
    if not rep.rows:
        print("nothing to evaluate", file=sys.stderr)
        return EXIT_EMPTY
    plot_eval(rep.rows, out / "eval.png")
    for r in rep.rows:
        print(f"{r['dataset_id']:>20s}  n={r['n']:<4d} PSNR {r['psnr']:.3f}  SSIM {r['ssim']:.4f}")
    return EXIT_OK


def cmd_analyze(args, argv) -> int:
    from . import analysis as an
    from .plotting import plot_awareness, plot_projection, plot_similarity
    model, encoder = _load_networks(args)
    if encoder is None:
        raise UsageError("analysis needs a checkpoint with an encoder (modulated model)")
    manifests = _manifests(args.data)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    seed = 0 if args.seed is None else args.seed
    aw = an.awareness_table(encoder, manifests)
    an.write_rows_csv(aw, out / "awareness.csv", ["dataset_id", "index", "density", "zeta_B", "zeta_R"])
    sm = an.similarity_matrix(encoder, manifests, args.n_per_dataset, seed)
    an.write_similarity_csv(sm, out / "similarity.csv")
    labels, embs = [], []
    for m in manifests:
        pairs, _ = m.load_pairs()
        embs.append(an.embed_images(encoder, [p.x for p in pairs]))
        labels += [m.dataset_id] * len(pairs)
    pts = an.project_2d(np.concatenate(embs))
    an.write_rows_csv([{"dataset_id": l, "x": p[0], "y": p[1]} for l, p in zip(labels, pts)],
                      out / "projection.csv")
    summary = {
        "datasets": sm.ids,
        "similarity": sm.matrix.tolist(),
        "awareness_mean": {
            d: {k: float(np.mean([r[k] for r in aw if r["dataset_id"] == d])) for k in ("zeta_B", "zeta_R")}
            for d in sm.ids
        },
    }
    (out / "summary.json").write_text(json.dumps(summary, indent=2), encoding="utf-8")
    plot_awareness(aw, out / "awareness.png")
    plot_similarity(sm, out / "similarity.png")
    plot_projection(pts, labels, out / "projection.png")
    write_run_record(out, args, argv, extra={"checkpoint": args.checkpoint})
    print(json.dumps(summary["awareness_mean"], indent=2))
    return EXIT_OK


def cmd_sweep(args, argv) -> int:
    from .analysis import write_rows_csv
    from .plotting import plot_sweep
    from .trainer import lambda_sweep
    cfg = resolve_config(args)
    try:
        values = [float(v) for v in args.lambdas.split(",") if v.strip()]
    except ValueError as e:
        raise UsageError(f"bad --lambdas: {e}") from e
    out = Path(args.out)
    write_run_record(out, args, argv, cfg, extra={"lambdas": values})
    rows = lambda_sweep(cfg, values, _manifests(args.data), _manifests(args.eval_data), workers=args.workers)
    cols = ["lambda"] + sorted({k for r in rows for k in r if k.startswith("psnr_")}) + ["error"]
    write_rows_csv(rows, out / "sweep.csv", cols)
    plot_sweep(rows, out / "sweep.png")
    for r in rows:
        print(f"lambda={r['lambda']:<6g} mean PSNR {r['psnr_mean']:.3f} {r['error']}")
    return EXIT_OK if all(not r["error"] for r in rows) else EXIT_FAIL


def cmd_temp_report(args, argv) -> int:
    from .analysis import temperature_report, write_rows_csv
    from .coim import write_profile_csv
    from .plotting import plot_temperature
    model, encoder = _load_networks(args)
    if encoder is None:
        raise UsageError("temperature report needs a modulated checkpoint")
    probes = []
    for m in _manifests(args.data):
        pairs, _ = m.load_pairs()
        rng = np.random.default_rng([0 if args.seed is None else args.seed, len(probes)])
        pick = rng.choice(len(pairs), size=min(args.n_probes, len(pairs)), replace=False)
        probes += [pairs[i].x for i in sorted(pick)]
    try:
        rows, profile = temperature_report(model, probes, encoder)
    except TypeError as e:
        raise UsageError(str(e)) from e
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    write_rows_csv(rows, out / "temperature.csv")
    write_profile_csv(out / "temperature_profile.csv", profile)
    plot_temperature(rows, out / "temperature.png")
    write_run_record(out, args, argv, extra={"checkpoint": args.checkpoint, "n_probes": len(probes)})
    for r in rows:
        flag = " (infinite: constant Z)" if r["infinite"] else ""
        print(f"{r['layer_index']:>2d} {r['layer']:<8s} mean log T {r['mean_log_T']:.4f}{flag}")
    return EXIT_OK


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", metavar="PATH", help="TOML file of training config keys")
    common.add_argument("--seed", type=int, default=None, metavar="INT")
    common.add_argument("--workers", type=int, default=1, metavar="INT",
                        help="background data-loading threads (default 1 = serial)")
    common.add_argument("--out", metavar="DIR", default="out")
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="coic", description="Contrastive instance-level modulation for deraining.")
    p.add_argument("--version", action="version", version=__version__)
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", parents=[common], help="synthesize mixed paired rain datasets")
    g.add_argument("--regimes", default="light,heavy", help="comma list from light,heavy,accumulated")
    g.add_argument("--n", type=int, default=64, help="pairs per regime")
    g.add_argument("--image-size", type=int, default=64)
    g.add_argument("--clean-dir", default=None, help="directory of PNG backgrounds (default: procedural)")
    g.set_defaults(func=cmd_gen_data)

    t = sub.add_parser("train", parents=[common], help="train a derainer")
    t.add_argument("--data", required=True, help="gen-data output directory or manifest")
    t.add_argument("--resume", default=None, metavar="CKPT")
    t.add_argument("--log-every", type=int, default=100)
    add_config_flags(t)
    t.set_defaults(func=cmd_train)

    def with_model(sp):
        sp.add_argument("--checkpoint", default=None, metavar="CKPT")
        sp.add_argument("--data", required=True)

    e = sub.add_parser("eval", parents=[common], help="per-dataset PSNR/SSIM")
    with_model(e)
    e.add_argument("--identity", action="store_true", help="evaluate the identity model (output = input)")
    e.set_defaults(func=cmd_eval)

    a = sub.add_parser("analyze", parents=[common], help="awareness scores, similarities, 2D projection")
    with_model(a)
    a.add_argument("--n-per-dataset", type=int, default=32)
    a.set_defaults(func=cmd_analyze, identity=False)

    s = sub.add_parser("sweep-lambda", parents=[common], help="train one model per lambda and compare")
    s.add_argument("--data", required=True)
    s.add_argument("--eval-data", required=True)
    s.add_argument("--lambdas", default="0,0.05,0.1,0.2,0.4,0.8")
    add_config_flags(s)
    s.set_defaults(func=cmd_sweep)

    r = sub.add_parser("temp-report", parents=[common], help="layer-wise induced temperatures")
    with_model(r)
    r.add_argument("--n-probes", type=int, default=8, help="probe images per dataset")
    r.set_defaults(func=cmd_temp_report, identity=False)
    return p


def main(argv=None) -> int:
    argv = sys.argv[1:] if argv is None else list(argv)
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args, argv)
    except (UsageError, ConfigError) as e:
        print(f"coic {args.command}: error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except Exception as e:
        log.debug("failure", exc_info=True)
        print(f"coic {args.command}: failed: {type(e).__name__}: {e}", file=sys.stderr)
        return EXIT_FAIL


if __name__ == "__main__":
    sys.exit(main())
