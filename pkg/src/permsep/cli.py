"""Command-line interface.

Subcommands: gen (dataset), train, eval, gradcheck, sweep. Every
command takes --config pointing at a YAML experiment file; --seed and
--out override the config's seed and io.out_dir without editing it.

Exit codes: 0 success, 2 configuration or geometry problem, 3 IO
problem (missing/unreadable files), 4 non-finite loss abort during
training, 5 gradient check failure.

Reports embed the config hash; wall-clock timings stay in log.csv so
reports from identical (config, seed) runs are byte-identical.
"""

import argparse
import csv
import json
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np

from ._recurrence import BACKEND
from .bsseval import score as bss_score
from .config import config_hash, load_config, validate_config
from .dsp import frame_length_for, magnitude_phase, read_wav, stft
from .errors import (
    CheckpointError,
    ConfigurationError,
    DegenerateSourceError,
    GeometryError,
    IngestionError,
    NonFiniteLossError,
    UndefinedScoreError,
)
from .gradcheck import run_gradcheck
from .losses import GammaParam, select_test_permutation
from .mixgen import DatasetManifest, build_dataset
from .permutation import Permutation, error_table
from .separator import SeparatorModel, forward, load_checkpoint, reconstruct
from .trainer import EpochRecord, export_error_pairs, load_split, resume_training, train

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_IO = 3
EXIT_NONFINITE = 4
EXIT_GRADCHECK = 5

_REPORT_RECORD_FIELDS = tuple(f for f in EpochRecord.FIELDS if f != "wall_time_s")


def _apply_overrides(cfg, args):
    updates = {}
    if getattr(args, "seed", None) is not None:
        updates["seed"] = args.seed
    if getattr(args, "out", None):
        updates["io.out_dir"] = args.out
    return cfg.with_updates(updates) if updates else cfg


def _write_json(path, payload):
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w") as fh:
        json.dump(payload, fh, sort_keys=True, indent=1)
        fh.write("\n")


def _write_csv(path, rows, fieldnames):
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=fieldnames)
        writer.writeheader()
        writer.writerows(rows)


def _build_model(cfg, gamma=None):
    n_freq = frame_length_for(cfg.features["frame_ms"], cfg.data["sample_rate"]) // 2 + 1
    if gamma is None:
        gamma = GammaParam(
            cfg.train["gamma_init"],
            trainable=(cfg.train["loss_mode"] == "softmin_trainable"),
        )
    return SeparatorModel(
        n_freq=n_freq,
        hidden=cfg.model["hidden"],
        n_sources=cfg.model["sources"],
        softmax_after_recurrent=cfg.model["softmax_after_recurrent"],
        dropout_rate=cfg.model["dropout"],
        init_seed=cfg.seed,
        gamma=gamma,
    )


def _load_manifest(cfg):
    path = Path(cfg.io["out_dir"]) / "dataset" / "manifest.json"
    manifest = DatasetManifest.load(path)
    if manifest.sample_rate != cfg.data["sample_rate"]:
        raise ConfigurationError(
            f"dataset was generated at {manifest.sample_rate} Hz, "
            f"config says {cfg.data['sample_rate']}"
        )
    return manifest


def cmd_gen(args):
    cfg = _apply_overrides(load_config(args.config), args)
    out = Path(cfg.io["out_dir"])
    manifest = build_dataset(cfg.dataset_config(out / "dataset"))
    counts = {split: len(entries) for split, entries in manifest.splits.items()}
    _write_json(out / "gen_report.json", {
        "config_hash": config_hash(cfg),
        "sample_rate": manifest.sample_rate,
        "counts": counts,
        "manifest_path": "dataset/manifest.json",
        "seed": cfg.seed,
    })
    print(f"generated {counts} at {manifest.sample_rate} Hz under {out / 'dataset'}")
    return EXIT_OK


def _checkpoint_for_eval(args, cfg):
    if args.checkpoint:
        return Path(args.checkpoint)
    ck_dir = Path(cfg.io["out_dir"]) / "train" / "checkpoints"
    candidates = sorted(ck_dir.glob("epoch*.json"))
    if not candidates:
        raise IngestionError(
            f"no checkpoint given and none found under {ck_dir}", files=[str(ck_dir)]
        )
    return candidates[-1]


def _evaluate_split(cfg, manifest, split, model, masks):
    """Per-example BSS-EVAL rows plus summary means for one split."""
    frame_ms = cfg.features["frame_ms"]
    entries = manifest.splits.get(split, [])
    if not entries:
        raise ConfigurationError(f"split {split!r} is empty")
    chash = config_hash(cfg)
    rows = []
    for entry in entries:
        mixture = read_wav(manifest.resolve(entry.mixture_path),
                           expected_rate=manifest.sample_rate)
        spec = stft(mixture, frame_ms)
        mix_mag, mix_phase = magnitude_phase(spec)
        sources = [read_wav(manifest.resolve(p), expected_rate=manifest.sample_rate)
                   for p in entry.source_paths]
        source_mags = [magnitude_phase(stft(w, frame_ms))[0] for w in sources]

        if masks == "model":
            outputs, _ = forward(model, mix_mag, mode="eval")
        else:
            denom = sum(m.frames for m in source_mags) + 1e-12
            outputs = [
                mix_mag.with_frames(mix_mag.frames * (m.frames / denom))
                for m in source_mags
            ]
        table = error_table([m.frames for m in source_mags],
                            [o.frames for o in outputs])
        perm = select_test_permutation(table)
        estimates = reconstruct(outputs, mix_phase)

        scores = bss_score([w.samples for w in estimates],
                           [w.samples for w in sources], perm)
        identity = Permutation(tuple(range(len(sources))))
        baseline = bss_score([mixture.samples] * len(sources),
                             [w.samples for w in sources], identity)

        row = {
            "example_id": entry.example_id,
            "speakers": "|".join(entry.speaker_ids),
            "permutation": table.argmin_index,
            "config_hash": chash,
        }
        for s in range(len(sources)):
            row[f"sdr{s}_db"] = scores.per_source[s].sdr_db
            row[f"sir{s}_db"] = scores.per_source[s].sir_db
            row[f"sar{s}_db"] = scores.per_source[s].sar_db
            row[f"baseline_sdr{s}_db"] = baseline.per_source[s].sdr_db
            row[f"clipped{s}"] = int(scores.per_source[s].clipped)
        rows.append(row)

    n_sources = len(entries[0].source_paths)
    def _mean(prefix):
        return float(np.mean([
            row[f"{prefix}{s}_db"] for row in rows for s in range(n_sources)
        ]))
    summary = {
        "split": split,
        "masks": masks,
        "n_examples": len(rows),
        "mean_sdr_db": _mean("sdr"),
        "mean_sir_db": _mean("sir"),
        "mean_sar_db": _mean("sar"),
        "baseline_mean_sdr_db": _mean("baseline_sdr"),
        "config_hash": chash,
    }
    return rows, summary


def cmd_train(args):
    cfg = _apply_overrides(load_config(args.config), args)
    out = Path(cfg.io["out_dir"])
    chash = config_hash(cfg)
    manifest = _load_manifest(cfg)
    frame_ms = cfg.features["frame_ms"]
    train_set = load_split(manifest, "train", frame_ms)
    dev_set = load_split(manifest, "dev", frame_ms)
    tcfg = cfg.train_config()
    ck_dir = out / "train" / "checkpoints"
    ck_dir.mkdir(parents=True, exist_ok=True)
    log_path = out / "train" / "log.csv"

    resume_path = getattr(args, "resume", None)
    log_mode = "a" if resume_path else "w"
    log_fields = list(EpochRecord.FIELDS) + ["config_hash"]
    records = []
    with open(log_path, log_mode, newline="") as log_fh:
        writer = csv.DictWriter(log_fh, fieldnames=log_fields)
        if log_mode == "w":
            writer.writeheader()

        def log_cb(record):
            row = record.to_dict()
            row["config_hash"] = chash
            writer.writerow(row)
            log_fh.flush()
            print(f"epoch {record.epoch:3d}  train {record.train_objective:12.4f}  "
                  f"cv {record.cv_objective:12.4f}  lr {record.learning_rate:.6g}  "
                  f"gamma {record.gamma:.4f}  flips {record.flip_rate:.3f}  "
                  f"({record.wall_time_s:.1f}s)")

        if resume_path:
            stored = load_checkpoint(resume_path)
            if stored["config_hash"] is not None and stored["config_hash"] != chash:
                raise ConfigurationError(
                    "checkpoint was written under a different config "
                    f"({stored['config_hash'][:12]}... vs {chash[:12]}...)"
                )
            model, records = resume_training(
                resume_path, train_set, dev_set, tcfg,
                checkpoint_dir=str(ck_dir), config_hash=chash, log_cb=log_cb,
            )
        else:
            model = _build_model(cfg)
            records = train(model, train_set, dev_set, tcfg,
                            checkpoint_dir=str(ck_dir), config_hash=chash,
                            log_cb=log_cb)

    pairs = []
    if model.n_sources == 2:
        pairs = [
            {"example_id": ex, "error_identity": e0, "error_swap": e1}
            for ex, e0, e1 in export_error_pairs(model, dev_set, tcfg.reduction)
        ]
    _write_json(out / "train" / "train_report.json", {
        "config_hash": chash,
        "loss_mode": tcfg.loss_mode,
        "backend": BACKEND,
        "n_params": model.n_params,
        "final_gamma": model.gamma.value,
        "records": [
            {k: r.to_dict()[k] for k in _REPORT_RECORD_FIELDS} for r in records
        ],
        "error_pairs_dev": pairs,
    })
    print(f"trained {len(records)} epoch(s); checkpoints in {ck_dir}")
    return EXIT_OK


def cmd_eval(args):
    cfg = _apply_overrides(load_config(args.config), args)
    out = Path(cfg.io["out_dir"])
    chash = config_hash(cfg)
    masks = args.masks or cfg.eval["masks"]
    split = args.split or cfg.eval["split"]
    manifest = _load_manifest(cfg)

    model = None
    if masks == "model":
        ck_path = _checkpoint_for_eval(args, cfg)
        stored = load_checkpoint(ck_path)
        if stored["config_hash"] is not None and stored["config_hash"] != chash:
            raise ConfigurationError(
                "refusing to evaluate: checkpoint config hash "
                f"{stored['config_hash'][:12]}... != current {chash[:12]}..."
            )
        model = stored["model"]

    rows, summary = _evaluate_split(cfg, manifest, split, model, masks)
    _write_csv(out / "eval" / f"scores_{split}.csv", rows, list(rows[0]))
    _write_json(out / "eval" / f"eval_report_{split}.json", summary)
    print(f"{split}/{masks}: mean SDR {summary['mean_sdr_db']:.3f} dB "
          f"(baseline {summary['baseline_mean_sdr_db']:.3f} dB) "
          f"over {summary['n_examples']} examples")
    return EXIT_OK


def cmd_gradcheck(args):
    results = run_gradcheck(n_seeds=args.seeds, corrupt=args.corrupt)
    ok = True
    for r in results:
        status = "PASS" if r.passed else "FAIL"
        ok = ok and r.passed
        print(f"{r.suite:16s} {r.mode:20s} seeds={r.n_seeds:<4d} "
              f"max_err={r.max_error:.3e} tol={r.tolerance:.0e} {status}")
    return EXIT_OK if ok else EXIT_GRADCHECK


def _sweep_run(raw_cfg, manifest_path, run_dir):
    """One sweep cell: train on the shared dataset, evaluate on test."""
    cfg = validate_config(raw_cfg)
    chash = config_hash(cfg)
    manifest = DatasetManifest.load(manifest_path)
    frame_ms = cfg.features["frame_ms"]
    train_set = load_split(manifest, "train", frame_ms)
    dev_set = load_split(manifest, "dev", frame_ms)
    tcfg = cfg.train_config()
    model = _build_model(cfg)
    records = train(model, train_set, dev_set, tcfg)
    run_dir = Path(run_dir)
    run_dir.mkdir(parents=True, exist_ok=True)
    log_fields = list(EpochRecord.FIELDS) + ["config_hash"]
    _write_csv(run_dir / "log.csv",
               [dict(r.to_dict(), config_hash=chash) for r in records], log_fields)
    _, summary = _evaluate_split(cfg, manifest, "test", model, "model")
    last = records[-1]
    return {
        "mode": tcfg.loss_mode,
        "gamma_init": tcfg.gamma_init,
        "seed": cfg.seed,
        "final_gamma": model.gamma.value,
        "train_objective": last.train_objective,
        "cv_objective": last.cv_objective,
        "mean_sdr_db": summary["mean_sdr_db"],
        "mean_sir_db": summary["mean_sir_db"],
        "mean_sar_db": summary["mean_sar_db"],
        "baseline_mean_sdr_db": summary["baseline_mean_sdr_db"],
        "config_hash": chash,
    }


def cmd_sweep(args):
    cfg = _apply_overrides(load_config(args.config), args)
    out = Path(cfg.io["out_dir"])
    sweep_dir = out / "sweep"
    gammas = [float(v) for v in args.gammas.split(",") if v != ""]
    modes = [m.strip() for m in args.modes.split(",") if m.strip()]
    if not gammas or not modes:
        raise ConfigurationError("sweep needs at least one gamma and one mode")

    base_manifest = build_dataset(cfg.dataset_config(sweep_dir / "dataset"))
    manifest_path = str(sweep_dir / "dataset" / "manifest.json")
    del base_manifest

    runs = []
    for mode in modes:
        grid = [0.0] if mode == "pit" else gammas
        for gamma in grid:
            for k in range(args.seeds):
                run_cfg = cfg.with_updates({
                    "train.loss_mode": mode,
                    "train.gamma_init": gamma,
                    "seed": cfg.seed + k,
                })
                tag = f"{mode}_g{gamma:g}_s{cfg.seed + k}"
                runs.append((run_cfg, tag))

    workers = int(os.environ.get("PERMSEP_THREADS", "1") or "1")
    workers = max(1, min(workers, len(runs)))
    payloads = [
        (rc.to_dict(), manifest_path, str(sweep_dir / "runs" / tag))
        for rc, tag in runs
    ]
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            rows = list(pool.map(_sweep_run, *zip(*payloads)))
    else:
        rows = [_sweep_run(*p) for p in payloads]

    for (run_cfg, tag), row in zip(runs, rows):
        expected = config_hash(run_cfg)
        if row["config_hash"] != expected:
            raise ConfigurationError(
                f"run {tag} returned hash {row['config_hash'][:12]}..., "
                f"expected {expected[:12]}...; refusing to aggregate"
            )

    _write_csv(sweep_dir / "sweep.csv", rows, list(rows[0]))
    groups = {}
    for row in rows:
        groups.setdefault((row["mode"], row["gamma_init"]), []).append(row)
    aggregates = []
    for (mode, gamma), cell in sorted(groups.items()):
        sdr = np.array([r["mean_sdr_db"] for r in cell])
        aggregates.append({
            "mode": mode,
            "gamma_init": gamma,
            "n_seeds": len(cell),
            "mean_sdr_db": float(sdr.mean()),
            "std_sdr_db": float(sdr.std()),
            "mean_final_gamma": float(np.mean([r["final_gamma"] for r in cell])),
        })
    _write_json(sweep_dir / "sweep_report.json", {
        "base_config_hash": config_hash(cfg),
        "gammas": gammas,
        "modes": modes,
        "seeds": args.seeds,
        "aggregates": aggregates,
    })
    for agg in aggregates:
        print(f"{agg['mode']:20s} gamma={agg['gamma_init']:<6g} "
              f"SDR {agg['mean_sdr_db']:7.3f} +/- {agg['std_sdr_db']:.3f} dB "
              f"(final gamma {agg['mean_final_gamma']:.3f})")
    return EXIT_OK


def _parser():
    parser = argparse.ArgumentParser(
        prog="permsep",
        description="Two-talker separation: data generation, training, evaluation.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    gen = sub.add_parser("gen", help="generate a mixture dataset")
    train_p = sub.add_parser("train", help="train a separator")
    train_p.add_argument("--resume", default=None,
                         help="checkpoint to continue from (same config)")
    eval_p = sub.add_parser("eval", help="score separated sources with BSS-EVAL")
    eval_p.add_argument("--checkpoint", default=None,
                        help="checkpoint to evaluate (default: latest in out dir)")
    eval_p.add_argument("--split", default=None, choices=["train", "dev", "test"])
    eval_p.add_argument("--masks", default=None, choices=["model", "oracle"])
    sweep = sub.add_parser("sweep", help="gamma grid x seeds characterization")
    sweep.add_argument("--gammas", default="0,1,2")
    sweep.add_argument("--modes", default="softmin_const",
                       help="comma-separated loss modes")
    sweep.add_argument("--seeds", type=int, default=5,
                       help="seeds per grid cell (config seed + 0..N-1)")

    for p in (gen, train_p, eval_p, sweep):
        p.add_argument("--config", required=True, help="YAML experiment config")
        p.add_argument("--seed", type=int, default=None, help="override config seed")
        p.add_argument("--out", default=None, help="override io.out_dir")

    grad = sub.add_parser("gradcheck", help="finite-difference gradient audit")
    grad.add_argument("--seeds", type=int, default=100)
    grad.add_argument("--corrupt", default=None, choices=["sign_flip"],
                      help=argparse.SUPPRESS)
    grad.set_defaults(func=cmd_gradcheck)

    gen.set_defaults(func=cmd_gen)
    train_p.set_defaults(func=cmd_train)
    eval_p.set_defaults(func=cmd_eval)
    sweep.set_defaults(func=cmd_sweep)
    return parser


def main(argv=None):
    args = _parser().parse_args(argv)
    try:
        return int(args.func(args))
    except (ConfigurationError, GeometryError, DegenerateSourceError,
            UndefinedScoreError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except NonFiniteLossError as exc:
        where = f" (example {exc.example_id})" if exc.example_id else ""
        print(f"error: {exc}{where}", file=sys.stderr)
        return EXIT_NONFINITE
    except (IngestionError, CheckpointError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
