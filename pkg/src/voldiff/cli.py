"""Command-line front end: preprocess, split, train, generate, eval, bench.

Exit codes: 0 success, 1 partial data failure, 2 usage error.
"""
from __future__ import annotations

import argparse
import csv
import json
import sys
import time
import traceback
from pathlib import Path

import numpy as np

from . import denoiser as dn
from . import evaluation as ev
from .manifest import Manifest, split_subjects
from .param import PredictionKind
from .sampler import SamplerConfig, generate, sidecar_metadata
from .schedule import build_linear_schedule
from .volume import (TARGET_SHAPE, Volume, brain_mask_fallback, center_of_mass,
                     extract_slices, normalize_quantize, pad_crop, read_nifti,
                     reorient_axial, resample_isotropic, write_nifti)

EXIT_OK = 0
EXIT_PARTIAL = 1
EXIT_USAGE = 2


def _write_run_manifest(out_dir: Path, args: argparse.Namespace) -> None:
    doc = {k: (str(v) if isinstance(v, Path) else v) for k, v in vars(args).items()
           if k != "func"}
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "run_manifest.json").write_text(json.dumps(doc, indent=2) + "\n")


def cmd_preprocess(args) -> int:
    manifest = Manifest.load(args.manifest)
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    _write_run_manifest(out_dir, args)
    processed = []
    failures = 0
    log_path = out_dir / "preprocess.log"
    with open(log_path, "w") as log:
        for rec in manifest:
            if not rec.qa_passed:
                log.write(f"SKIP {rec.path} qa={rec.qa_status} reason={rec.qa_reason}\n")
                continue
            try:
                v = read_nifti(rec.path)
                v = reorient_axial(v)
                v = resample_isotropic(v, 1.0)
                if rec.mask_path:
                    mask = read_nifti(rec.mask_path)
                    mask = reorient_axial(mask)
                else:
                    mask = brain_mask_fallback(v)
                center = center_of_mass(mask)
                v = pad_crop(v, center, TARGET_SHAPE)
                v = normalize_quantize(v)
                out_path = out_dir / (Path(rec.path).stem + "_proc.nii")
                write_nifti(v, out_path)
                new_rec = type(rec)(**{**rec.__dict__, "path": str(out_path)})
                processed.append(new_rec)
                log.write(f"OK {rec.path} -> {out_path}\n")
            except Exception as exc:
                failures += 1
                log.write(f"FAIL {rec.path}: {exc}\n")
    Manifest(processed).save(out_dir / "manifest.jsonl")
    print(f"preprocessed {len(processed)} volumes, {failures} failures "
          f"(log: {log_path})")
    return EXIT_PARTIAL if failures else EXIT_OK


def cmd_split(args) -> int:
    manifest = Manifest.load(args.manifest)
    withheld = [d for d in (args.withhold or "").split(",") if d]
    result = split_subjects(manifest, test_fraction=args.test_fraction,
                            withheld_datasets=withheld, seed=args.seed)
    result.save(args.out)
    counts = {}
    for r in result:
        counts[r.split] = counts.get(r.split, 0) + 1
    print(f"split written to {args.out}: {counts}")
    return EXIT_OK


def cmd_train(args) -> int:
    manifest = Manifest.load(args.manifest)
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    _write_run_manifest(out_dir, args)
    dataset = []
    for rec in manifest:
        if rec.split in (None, "train") and rec.qa_passed:
            v = read_nifti(rec.path)
            data = np.asarray(v.data, dtype=np.float64)
            if v.data.dtype == np.uint16:
                data = data / 65535.0
            dataset.append(Volume(data=data.astype(np.float32),
                                  spacing=v.spacing, direction=v.direction,
                                  origin=v.origin))
    if not dataset:
        print("no training records in manifest", file=sys.stderr)
        return EXIT_USAGE
    kind = PredictionKind.from_str(args.kind)
    schedule = build_linear_schedule(args.timesteps, args.beta_start, args.beta_end)
    cfg = dn.TrainConfig(learning_rate=args.lr, batch_size=args.batch_size,
                         epochs=args.epochs, seed=args.seed,
                         widths=tuple(int(w) for w in args.widths.split(",")),
                         rotation_deg=args.rotation, translation_mm=args.translation,
                         schedule=schedule)
    result = dn.train(dataset, kind, cfg)
    dn.save_weights(out_dir / "weights.bin", result.ema.shadow, kind, cfg.widths,
                    schedule, epoch=result.last_good_epoch,
                    ema_momentum=cfg.ema_momentum, time_dim=cfg.time_dim)
    dn.save_loss_history(out_dir / "loss_history.csv", result.loss_history,
                         result.diverged)
    status = "diverged" if result.diverged else "completed"
    print(f"training {status} at epoch {result.last_good_epoch}; "
          f"final loss {result.loss_history[-1]:.6g}")
    return EXIT_PARTIAL if result.diverged else EXIT_OK


def cmd_generate(args) -> int:
    den = dn.load_denoiser(args.weights)
    schedule = den.schedule
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    _write_run_manifest(out_dir, args)
    shape = tuple(int(s) for s in args.shape.split(","))
    for i in range(args.count):
        cfg = SamplerConfig(steps=args.steps, eta=args.eta,
                            seed=args.seed + i, shape=shape)
        vol = generate(den, schedule, cfg)
        stem = out_dir / f"synth_{cfg.seed:08d}"
        write_nifti(vol, f"{stem}.nii")
        meta = sidecar_metadata(cfg, den.kind, schedule, vol)
        Path(f"{stem}.json").write_text(json.dumps(meta, indent=2) + "\n")
    print(f"generated {args.count} volumes in {out_dir}")
    return EXIT_OK


def _load_group(path: str, seed: int) -> np.ndarray:
    """Features from a feature file, or extracted from a directory of volumes."""
    p = Path(path)
    if p.is_file():
        feats, _ = ev.load_features(p)
        return feats
    slices = []
    for nii in sorted(p.glob("*.nii")):
        slices.extend(extract_slices(read_nifti(nii)))
    return ev.extract_features(slices, seed=seed)


def cmd_eval(args) -> int:
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    _write_run_manifest(out_dir, args)
    if args.mode == "fid":
        real = _load_group(args.real, args.seed)
        synth = _load_group(args.synth, args.seed)
        fd = ev.frechet_distance(ev.fit_stats(real), ev.fit_stats(synth))
        report = {"mode": "fid", "extractor": "randproj64", "fid": fd,
                  "n_real": int(real.shape[0]), "n_synth": int(synth.shape[0])}
        (out_dir / "fid.json").write_text(json.dumps(report, indent=2) + "\n")
        with open(out_dir / "fid.csv", "w", newline="") as f:
            w = csv.writer(f)
            w.writerow(["extractor", "fid", "n_real", "n_synth"])
            w.writerow(["randproj64", fd, real.shape[0], synth.shape[0]])
        print(f"FID (randproj64): {fd:.6g}")
    elif args.mode == "ks":
        real = ev.regional_series(ev.load_regional_volumes(args.real))
        synth = ev.regional_series(ev.load_regional_volumes(args.synth))
        report = ev.permutation_protocol(real, synth, reps=args.reps,
                                         subsample=args.subsample, seed=args.seed)
        (out_dir / "ks.json").write_text(report.to_json() + "\n")
        with open(out_dir / "ks.csv", "w", newline="") as f:
            w = csv.writer(f)
            w.writerow(["structure", "fraction_p_ge_alpha"])
            for structure, frac in report.fractions.items():
                w.writerow([structure, frac])
        for structure, frac in report.fractions.items():
            print(f"{structure}: {100.0 * frac:.1f}% of reps with p >= {report.alpha}")
    elif args.mode == "nn":
        queries = sorted(Path(args.synth).glob("*.nii"))
        cands = sorted(Path(args.real).glob("*.nii"))
        if not queries or not cands:
            print("nn mode needs volume directories", file=sys.stderr)
            return EXIT_USAGE
        cand_arrays = [read_nifti(p).data.astype(np.float64) for p in cands]
        rows = []
        for q in queries:
            hits = ev.nn_search(read_nifti(q).data.astype(np.float64),
                                cand_arrays, k=2)
            rows.append({"query": q.name,
                         "neighbors": [{"path": cands[i].name, "mse": mse}
                                       for i, mse in hits]})
        (out_dir / "nn.json").write_text(json.dumps(rows, indent=2) + "\n")
        with open(out_dir / "nn.csv", "w", newline="") as f:
            w = csv.writer(f)
            w.writerow(["query", "rank", "neighbor", "mse"])
            for row in rows:
                for rank, nb in enumerate(row["neighbors"], start=1):
                    w.writerow([row["query"], rank, nb["path"], nb["mse"]])
        print(f"nearest-neighbor report for {len(rows)} queries in {out_dir}")
    return EXIT_OK


def _mmss(seconds: float) -> str:
    total = int(round(seconds))
    return f"{total // 60}:{total % 60:02d}"


def cmd_bench(args) -> int:
    den = dn.load_denoiser(args.weights)
    schedule = den.schedule
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    _write_run_manifest(out_dir, args)
    shape = tuple(int(s) for s in args.shape.split(","))
    steps_list = [int(s) for s in args.steps.split(",")]
    # round-robin over step counts so a transient load spike inflates every
    # bucket about equally instead of distorting one row's median
    times: dict[int, list[float]] = {steps: [] for steps in steps_list}
    for rep in range(args.reps):
        offset = rep % len(steps_list)    # rotate order to balance drift
        for steps in steps_list[offset:] + steps_list[:offset]:
            cfg = SamplerConfig(steps=steps, seed=args.seed + rep, shape=shape)
            start = time.perf_counter()
            generate(den, schedule, cfg)
            times[steps].append(time.perf_counter() - start)
    rows = [(steps, float(np.median(times[steps]))) for steps in steps_list]
    with open(out_dir / "bench.csv", "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["steps", "median_seconds", "median_mmss"])
        for steps, median in rows:
            w.writerow([steps, f"{median:.6f}", _mmss(median)])
    print(f"{'Steps':>6}  {'Time':>8}")
    for steps, median in rows:
        print(f"{steps:>6}  {_mmss(median):>8}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="voldiff",
                                     description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("preprocess", help="run the image preprocessing chain")
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_preprocess)

    p = sub.add_parser("split", help="assign subject-level train/test splits")
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--test-fraction", type=float, default=0.10)
    p.add_argument("--withhold", default="", help="comma-separated dataset names")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_split)

    p = sub.add_parser("train", help="train a denoiser at desk scale")
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--kind", choices=["sample", "velocity", "flow"], default="sample")
    p.add_argument("--epochs", type=int, default=100)
    p.add_argument("--batch-size", type=int, default=4)
    p.add_argument("--lr", type=float, default=1e-4)
    p.add_argument("--widths", default="8,16")
    p.add_argument("--rotation", type=float, default=10.0)
    p.add_argument("--translation", type=float, default=5.0)
    p.add_argument("--timesteps", type=int, default=1000)
    p.add_argument("--beta-start", type=float, default=1e-4)
    p.add_argument("--beta-end", type=float, default=0.02)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("generate", help="sample volumes with DDIM")
    p.add_argument("--weights", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--count", type=int, default=1)
    p.add_argument("--steps", type=int, default=64)
    p.add_argument("--eta", type=float, default=0.0)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--shape", default="16,16,16")
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("eval", help="FID / KS / nearest-neighbor reports")
    p.add_argument("--mode", choices=["fid", "ks", "nn"], required=True)
    p.add_argument("--real", required=True)
    p.add_argument("--synth", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--reps", type=int, default=1000)
    p.add_argument("--subsample", type=int, default=1000)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("bench", help="inference timing by step count")
    p.add_argument("--weights", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--steps", default="16,32,64")
    p.add_argument("--reps", type=int, default=3)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--shape", default="16,16,16")
    p.set_defaults(func=cmd_bench)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    if getattr(args, "steps", None) is not None and args.command in ("generate",):
        if args.steps < 1:
            parser.error("--steps must be >= 1")
    try:
        return args.func(args)
    except (FileNotFoundError, IOError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except Exception:
        traceback.print_exc()
        return EXIT_PARTIAL


if __name__ == "__main__":
    sys.exit(main())
