"""Command-line pipeline: generate, fit, select, extract, eval, sweep, report.

Each verb reads prior-stage files from the output directory, so any stage can
be re-run in isolation.  The ``--reversed`` variants of fit/select/extract
work on the input/output-swapped dataset and produce the inverse-map
artifacts (suffix ``_reversed``, matrix ``t_inv_inf``).  Exit codes: 0
success, 1 validation error (bad config, checksum/fingerprint mismatch,
scope misuse), 2 runtime failure.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import sys
from pathlib import Path

import numpy as np

from . import io as tio
from .experiments import (
    SweepConfig,
    focus_contrast,
    focusing_experiment,
    gaussian_spot,
    glyph_image,
    image_reconstruction,
    run_sweep,
)
from .extraction import extract_gramian, extract_tm
from .model import NoiseSpec, TransmissionMatrix, build_random_tm, generate_dataset, reverse_dataset
from .optimize import dataset_fingerprint, fit_all_rows
from .selection import run_decimation


def _add_common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", required=True, help="JSON run configuration")
    p.add_argument("--out", required=True, help="artifact directory")
    p.add_argument("--seed", type=int, default=None, help="override config seed")
    p.add_argument("--threads", type=int, default=None,
                   help="row-fit parallelism (default: config, then TMINFER_THREADS, then 1)")
    p.add_argument("--scope", choices=("output", "all"), default=None,
                   help="override config fit scope")
    p.add_argument("--binary-io", action="store_true", help="write arrays as .npy")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="tminfer",
        description="Infer direct/inverse intensity transmission matrices from "
                    "random input/output samples.")
    sub = parser.add_subparsers(dest="command", required=True)
    for name, fn in _COMMANDS.items():
        p = sub.add_parser(name, help=fn.__doc__)
        _add_common(p)
        if name in ("fit", "select", "extract"):
            p.add_argument("--reversed", action="store_true", dest="reversed_data",
                           help="work on the input/output-swapped dataset "
                                "(inverse-map inference)")
        if name == "extract":
            p.add_argument("--gramian", action="store_true",
                           help="also extract the input Gramian and balance "
                                "(needs an all-sites estimate)")
    return parser


def _load(args) -> tuple[tio.RunConfig, Path, str]:
    cfg = tio.RunConfig.from_file(args.config)
    if args.seed is not None:
        cfg = dataclasses.replace(cfg, seed=args.seed)
    return cfg, Path(args.out), tio.config_fingerprint(cfg)


def _suffix(args) -> str:
    return "_reversed" if getattr(args, "reversed_data", False) else ""


def cmd_generate(args) -> int:
    """Draw a ground-truth channel and a synthetic dataset."""
    cfg, out, fp = _load(args)
    binary = args.binary_io or cfg.binary_io
    tm = build_random_tm(cfg.dims, cfg.density, seed=cfg.seed)
    ds = generate_dataset(tm, cfg.m_samples, NoiseSpec(sigma=cfg.sigma),
                          seed=cfg.seed + 1,
                          source=f"tminfer generate w={cfg.w} density={cfg.density}")
    out.mkdir(parents=True, exist_ok=True)
    tio.write_dataset(ds, out, fingerprint=fp, binary=binary)
    t_name = "t_true.npy" if binary else "t_true.csv"
    tio.write_matrix(tm, out / t_name, binary=binary)
    tio.register_artifacts(out, t_name)
    print(f"wrote {out}/dataset.{'npy' if binary else 'csv'}, dataset.meta.json, {t_name}")
    return 0


def _read_dataset(cfg, out, fp, reversed_data: bool):
    ds = tio.read_dataset(out, fingerprint=fp)
    return reverse_dataset(ds) if reversed_data else ds


def cmd_fit(args) -> int:
    """Fit all rows under the full support mask."""
    cfg, out, fp = _load(args)
    scope = args.scope or cfg.scope
    sfx = _suffix(args)
    ds = _read_dataset(cfg, out, fp, bool(sfx))
    est = fit_all_rows(ds, scope=scope, opts=cfg.optim_options(),
                       threads=cfg.resolve_threads(args.threads))
    meta = json.loads((out / "dataset.meta.json").read_text())
    name = f"estimate_full{sfx}.json"
    tio.write_estimate(est, out / name, fingerprint=fp,
                       dataset_sha256=meta["data_sha256"])
    tio.register_artifacts(out, name)
    print(f"fit {len(est.rows)} rows, total_pl={est.total_pl:.6g}")
    return 0


def cmd_select(args) -> int:
    """Decimate from the full fit and pick the BIC-optimal support."""
    cfg, out, fp = _load(args)
    scope = args.scope or cfg.scope
    sfx = _suffix(args)
    ds = _read_dataset(cfg, out, fp, bool(sfx))
    full_name = f"estimate_full{sfx}.json"
    tio.verify_artifact(out, full_name)
    initial = tio.read_estimate(out / full_name, fingerprint=fp)
    if initial.dataset_fingerprint != dataset_fingerprint(ds):
        raise tio.ChainError(f"{full_name} was fitted on different data")
    path, best = run_decimation(ds, scope=scope, fit_opts=cfg.optim_options(),
                                decim_opts=cfg.decimation_options(),
                                initial=initial,
                                threads=cfg.resolve_threads(args.threads))
    meta = json.loads((out / "dataset.meta.json").read_text())
    tio.write_path(path, out / f"path{sfx}.json", fingerprint=fp, sigma=cfg.sigma,
                   dataset_sha256=meta["data_sha256"])
    tio.write_estimate(best, out / f"estimate_selected{sfx}.json", fingerprint=fp,
                       dataset_sha256=meta["data_sha256"])
    tio.register_artifacts(out, f"path{sfx}.json", f"estimate_selected{sfx}.json")
    rec = path.selected_record
    print(f"selected {rec.n_couplings} couplings (k_free={rec.k_free}, "
          f"bic={rec.bic:.6g}) out of {path.records[0].n_couplings}")
    return 0


def cmd_extract(args) -> int:
    """Extract the channel matrix and per-channel noise from an estimate."""
    cfg, out, fp = _load(args)
    binary = args.binary_io or cfg.binary_io
    sfx = _suffix(args)
    name = f"estimate_selected{sfx}.json"
    if not (out / name).exists():
        name = f"estimate_full{sfx}.json"
    tio.verify_artifact(out, name)
    est = tio.read_estimate(out / name, fingerprint=fp)
    if args.gramian and est.scope != "all":
        raise tio.ChainError("Gramian extraction requires an all-sites estimate; "
                             "re-run fit/select with --scope all")
    tm, noise = extract_tm(est)
    stem = "t_inv_inf" if est.direction == "reversed" else "t_inf"
    t_name = f"{stem}.npy" if binary else f"{stem}.csv"
    tio.write_matrix(tm, out / t_name, binary=binary)
    doc = {
        "format": "tminfer-extract",
        "source_estimate": name,
        "role": tm.role,
        "sigma_hat": [float(s) for s in noise.sigma_hat],
        "beta_hat": [float(b) for b in noise.beta_hat],
        "rows_converged": [bool(c) for c in noise.converged],
    }
    extra = []
    if args.gramian:
        u, balance = extract_gramian(est)
        doc["balance"] = balance
        u_tm = TransmissionMatrix(dims=est.dims, entries=u, role="direct")
        g_name = "gramian_inf.npy" if binary else "gramian_inf.csv"
        tio.write_matrix(u_tm, out / g_name, binary=binary)
        extra.append(g_name)
    tio.write_json_artifact(doc, out / f"extract{sfx}.json", fingerprint=fp)
    tio.register_artifacts(out, t_name, f"extract{sfx}.json", *extra)
    print(f"extracted {t_name} ({tm.role}), mean sigma_hat="
          f"{float(np.mean(noise.sigma_hat)):.4g}")
    return 0


def _read_registered_matrix(out: Path, names) -> TransmissionMatrix:
    for n in names:
        if (out / n).exists():
            tio.verify_artifact(out, n)
            return tio.read_matrix(out / n)
    raise tio.ChainError(f"none of {names} found in {out}; run the producing stage")


def cmd_eval(args) -> int:
    """Run focusing and image-reconstruction experiments on extracted matrices."""
    cfg, out, fp = _load(args)
    t_true = _read_registered_matrix(out, ("t_true.csv", "t_true.npy"))
    t_inf = _read_registered_matrix(out, ("t_inf.csv", "t_inf.npy"))
    noise = NoiseSpec(sigma=cfg.sigma)
    target = gaussian_spot(cfg.dims, width=cfg.spot_width,
                           amplitude=cfg.spot_amplitude,
                           background=cfg.spot_background)
    achieved, q_focus = focusing_experiment(
        t_true, t_inf, target, noise, np.random.default_rng(cfg.seed + 101))
    obj = glyph_image(cfg.dims)
    t_pinv = TransmissionMatrix(dims=cfg.dims,
                                entries=np.linalg.pinv(t_inf.entries),
                                role="inverse")
    _, q_img_pinv = image_reconstruction(
        t_pinv, t_true, obj, noise, np.random.default_rng(cfg.seed + 102))
    doc = {
        "format": "tminfer-eval",
        "sigma": cfg.sigma,
        "q_focus": q_focus.q,
        "focus_peak_ratio": focus_contrast(achieved, target),
        "q_image_pinv": q_img_pinv.q,
    }
    t_inv_name = next((n for n in ("t_inv_inf.csv", "t_inv_inf.npy")
                       if (out / n).exists()), None)
    if t_inv_name is not None:
        tio.verify_artifact(out, t_inv_name)
        t_inv = tio.read_matrix(out / t_inv_name)
        _, q_img_inv = image_reconstruction(
            t_inv, t_true, obj, noise, np.random.default_rng(cfg.seed + 102))
        doc["q_image_inverse"] = q_img_inv.q
    tio.write_json_artifact(doc, out / "eval.json", fingerprint=fp)
    tio.register_artifacts(out, "eval.json")
    print(f"eval: q_focus={doc['q_focus']:.4g}, q_image_pinv={doc['q_image_pinv']:.4g}")
    return 0


def cmd_sweep(args) -> int:
    """Full pipeline over the sigma grid, one record per (sigma, replicate)."""
    cfg, out, fp = _load(args)
    grid = cfg.sigma_grid if cfg.sigma_grid is not None else (cfg.sigma,)
    sweep_cfg = SweepConfig(
        dims=cfg.dims, density=cfg.density, m_samples=cfg.m_samples,
        sigma_grid=grid, master_seed=cfg.seed, replicates=cfg.replicates,
        scope=cfg.scope, fit_opts=cfg.optim_options(),
        decim_opts=cfg.decimation_options(), include_balance=cfg.include_balance,
        threads=cfg.resolve_threads(args.threads))
    report = run_sweep(sweep_cfg)
    # Wall-clock timings are the one nondeterministic field; they stay out of
    # the artifact so identical configs produce identical bytes.
    records = [{k: v for k, v in r.__dict__.items() if k != "runtime_seconds"}
               for r in report.records]
    doc = {"format": "tminfer-sweep", "sigma_grid": list(grid),
           "replicates": cfg.replicates, "records": records}
    out.mkdir(parents=True, exist_ok=True)
    tio.write_json_artifact(doc, out / "sweep.json", fingerprint=fp)
    tio.register_artifacts(out, "sweep.json")
    n_fail = sum(1 for r in records if r["failure"])
    print(f"sweep complete: {len(records)} records, {n_fail} failures")
    return 0


def cmd_report(args) -> int:
    """Export plot-ready CSV tables from path/sweep artifacts."""
    cfg, out, fp = _load(args)
    wrote = []
    for sfx in ("", "_reversed"):
        pname = f"path{sfx}.json"
        if not (out / pname).exists():
            continue
        tio.verify_artifact(out, pname)
        doc = tio.read_json_artifact(out / pname, fingerprint=fp)
        lines = ["k_active,sigma,total_pl,bic,selected_flag"]
        for i, rec in enumerate(doc["records"]):
            lines.append(",".join([
                str(rec["k_free"]), tio._fmt(doc["sigma"]),
                tio._fmt(rec["total_pl"]), tio._fmt(rec["bic"]),
                str(int(i == doc["selected"])),
            ]))
        tname = f"path_table{sfx}.csv"
        tio._atomic_write_text(out / tname, "\n".join(lines) + "\n")
        tio.register_artifacts(out, tname)
        wrote.append(tname)
    if (out / "sweep.json").exists():
        tio.verify_artifact(out, "sweep.json")
        doc = tio.read_json_artifact(out / "sweep.json", fingerprint=fp)
        cols = ["sigma", "replicate", "q_bic", "q_true_support", "q_focus",
                "q_image_inverse", "q_image_pinv", "selected_couplings",
                "true_couplings", "balance"]
        lines = [",".join(cols)]
        for rec in doc["records"]:
            lines.append(",".join(
                "" if rec.get(c) is None else
                (str(rec[c]) if isinstance(rec[c], int) else tio._fmt(rec[c]))
                for c in cols))
        tio._atomic_write_text(out / "sweep_table.csv", "\n".join(lines) + "\n")
        tio.register_artifacts(out, "sweep_table.csv")
        wrote.append("sweep_table.csv")
    if not wrote:
        raise tio.ChainError("nothing to report: no path.json or sweep.json in out dir")
    print(f"wrote {', '.join(wrote)}")
    return 0


_COMMANDS = {
    "generate": cmd_generate,
    "fit": cmd_fit,
    "select": cmd_select,
    "extract": cmd_extract,
    "eval": cmd_eval,
    "sweep": cmd_sweep,
    "report": cmd_report,
}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return _COMMANDS[args.command](args)
    except (tio.ConfigError, tio.ChainError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:  # runtime failure
        print(f"runtime failure: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
