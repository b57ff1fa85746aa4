"""Bit-stable file formats for datasets, matrices, estimates, paths, reports.

Text formats are comma-separated with reals printed at 17 significant digits
(exact float64 round trip); the optional binary variant stores arrays as .npy.
Every artifact embeds the run-config fingerprint, and a per-directory manifest
records content hashes so chained stages can refuse tampered or mismatched
inputs.  All writes go through a temp file plus atomic rename.
"""

from __future__ import annotations

import hashlib
import json
import os
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import __version__
from .model import Dataset, Dimensions, TransmissionMatrix
from .optimize import CouplingEstimate, OptimOptions
from .pseudolikelihood import RowMask, RowParams
from .selection import DecimationOptions, DecimationPath

__all__ = [
    "ChainError",
    "ConfigError",
    "RunConfig",
    "config_fingerprint",
    "write_dataset",
    "read_dataset",
    "write_matrix",
    "read_matrix",
    "write_estimate",
    "read_estimate",
    "write_path",
    "write_json_artifact",
    "read_json_artifact",
]

MANIFEST = "MANIFEST.json"


class ConfigError(ValueError):
    """Invalid or inconsistent run configuration."""


class ChainError(ValueError):
    """Artifact fails checksum or fingerprint validation."""


def _fmt(x: float) -> str:
    return format(float(x), ".17g")


def _sha256_bytes(data: bytes) -> str:
    return hashlib.sha256(data).hexdigest()


def _sha256_file(path: Path) -> str:
    return _sha256_bytes(Path(path).read_bytes())


def _atomic_write_bytes(path: Path, data: bytes) -> None:
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(data)
    os.replace(tmp, path)


def _atomic_write_text(path: Path, text: str) -> None:
    _atomic_write_bytes(path, text.encode())


def _canonical_json(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"))


def config_fingerprint(config: "RunConfig") -> str:
    """Short stable hash of the validated configuration."""
    return _sha256_bytes(_canonical_json(config.to_dict()).encode())[:16]


def _manifest_path(out_dir: Path) -> Path:
    return Path(out_dir) / MANIFEST


def _load_manifest(out_dir: Path) -> dict:
    p = _manifest_path(out_dir)
    if not p.exists():
        return {}
    return json.loads(p.read_text())


def _register(out_dir: Path, *names: str) -> None:
    man = _load_manifest(out_dir)
    for name in names:
        man[name] = _sha256_file(Path(out_dir) / name)
    _atomic_write_text(_manifest_path(out_dir), _canonical_json(man) + "\n")


def _verify(out_dir: Path, name: str) -> None:
    man = _load_manifest(out_dir)
    if name not in man:
        raise ChainError(f"{name} is not registered in {MANIFEST}; "
                         "run the producing stage first")
    actual = _sha256_file(Path(out_dir) / name)
    if actual != man[name]:
        raise ChainError(f"{name} fails checksum validation (file was modified "
                         "after it was produced)")


def _check_fingerprint(artifact: dict, expected: str, name: str) -> None:
    got = artifact.get("config_fingerprint")
    if got != expected:
        raise ChainError(
            f"{name} was produced under config fingerprint {got!r}, "
            f"current config is {expected!r}; refusing to mix runs")


# ---------------------------------------------------------------------------
# Run configuration


_OPT_KEYS = {"max_iters", "grad_tol", "memory", "a_floor"}
_DEC_KEYS = {"batch_fraction", "min_batch", "count_curvatures", "pl_in_bic"}
_TOP_KEYS = {
    "w", "density", "m_samples", "sigma", "sigma_grid", "seed", "replicates",
    "scope", "threads", "binary_io", "include_balance",
    "spot_width", "spot_amplitude", "spot_background",
    "optimizer", "decimation",
}


@dataclass(frozen=True)
class RunConfig:
    """Validated knobs for a whole run; unknown keys are rejected."""

    w: int
    density: float = 0.20
    m_samples: int = 500
    sigma: float = 0.0
    sigma_grid: tuple[float, ...] | None = None
    seed: int = 0
    replicates: int = 3
    scope: str = "output"
    threads: int | None = None
    binary_io: bool = False
    include_balance: bool = False
    spot_width: float = 1.2
    spot_amplitude: float = 0.004
    spot_background: float = 0.5
    optimizer: dict = field(default_factory=dict)
    decimation: dict = field(default_factory=dict)

    def __post_init__(self) -> None:
        if self.scope not in ("output", "all"):
            raise ConfigError(f"scope must be 'output' or 'all', got {self.scope!r}")
        if self.w < 2:
            raise ConfigError("w must be >= 2")
        if not 0.0 < self.density <= 1.0:
            raise ConfigError("density must lie in (0, 1]")
        if self.m_samples < 1:
            raise ConfigError("m_samples must be >= 1")
        if self.sigma < 0:
            raise ConfigError("sigma must be nonnegative")
        if self.replicates < 1:
            raise ConfigError("replicates must be >= 1")
        bad = set(self.optimizer) - _OPT_KEYS
        if bad:
            raise ConfigError(f"unknown optimizer keys: {sorted(bad)}")
        bad = set(self.decimation) - _DEC_KEYS
        if bad:
            raise ConfigError(f"unknown decimation keys: {sorted(bad)}")
        if self.sigma_grid is not None:
            object.__setattr__(self, "sigma_grid",
                               tuple(float(s) for s in self.sigma_grid))

    @classmethod
    def from_file(cls, path: str | Path) -> "RunConfig":
        try:
            raw = json.loads(Path(path).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        if not isinstance(raw, dict):
            raise ConfigError("config must be a JSON object")
        unknown = set(raw) - _TOP_KEYS
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        if "w" not in raw:
            raise ConfigError("config needs a 'w' entry")
        try:
            return cls(**raw)
        except TypeError as exc:
            raise ConfigError(str(exc)) from exc

    def to_dict(self) -> dict:
        d = asdict(self)
        if d["sigma_grid"] is not None:
            d["sigma_grid"] = list(d["sigma_grid"])
        d.pop("threads")  # execution detail, not part of the result identity
        return d

    @property
    def dims(self) -> Dimensions:
        return Dimensions(w=self.w)

    def optim_options(self) -> OptimOptions:
        return OptimOptions(**self.optimizer)

    def decimation_options(self) -> DecimationOptions:
        return DecimationOptions(**self.decimation)

    def resolve_threads(self, cli_value: int | None = None) -> int:
        if cli_value is not None:
            return max(1, cli_value)
        if self.threads is not None:
            return max(1, self.threads)
        env = os.environ.get("TMINFER_THREADS")
        if env:
            try:
                return max(1, int(env))
            except ValueError as exc:
                raise ConfigError(f"TMINFER_THREADS must be an integer, got {env!r}") from exc
        return 1


# ---------------------------------------------------------------------------
# Datasets


def write_dataset(ds: Dataset, out_dir: str | Path, fingerprint: str,
                  binary: bool = False) -> None:
    """Write dataset data + sidecar metadata into ``out_dir``."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    table = np.hstack([ds.inputs, ds.outputs])
    if binary:
        data_name = "dataset.npy"
        import io as _io

        buf = _io.BytesIO()
        np.save(buf, table)
        _atomic_write_bytes(out / data_name, buf.getvalue())
    else:
        data_name = "dataset.csv"
        lines = [",".join(_fmt(v) for v in row) for row in table]
        _atomic_write_text(out / data_name, "\n".join(lines) + "\n")
    meta = {
        "format": "tminfer-dataset",
        "versions": {"tminfer": __version__, "numpy": np.__version__},
        "w": ds.dims.w,
        "m_samples": ds.m_samples,
        "direction": ds.direction,
        "meta": ds.meta,
        "data_file": data_name,
        "data_sha256": _sha256_file(out / data_name),
        "config_fingerprint": fingerprint,
    }
    _atomic_write_text(out / "dataset.meta.json", json.dumps(meta, indent=1) + "\n")
    _register(out, data_name, "dataset.meta.json")


def read_dataset(out_dir: str | Path, fingerprint: str | None = None) -> Dataset:
    """Read a dataset back, verifying checksums (and fingerprint if given)."""
    out = Path(out_dir)
    _verify(out, "dataset.meta.json")
    meta = json.loads((out / "dataset.meta.json").read_text())
    if fingerprint is not None:
        _check_fingerprint(meta, fingerprint, "dataset.meta.json")
    data_name = meta["data_file"]
    _verify(out, data_name)
    if _sha256_file(out / data_name) != meta["data_sha256"]:
        raise ChainError(f"{data_name} does not match the checksum in its metadata")
    if data_name.endswith(".npy"):
        table = np.load(out / data_name)
    else:
        table = np.loadtxt(out / data_name, delimiter=",", ndmin=2)
    nh = meta["w"] ** 2
    return Dataset(
        dims=Dimensions(w=meta["w"]),
        inputs=table[:, :nh],
        outputs=table[:, nh:],
        direction=meta["direction"],
        meta=meta["meta"],
    )


# ---------------------------------------------------------------------------
# Matrices


def write_matrix(tm: TransmissionMatrix, path: str | Path,
                 binary: bool = False) -> None:
    """One row per line, comma separated, '#'-prefixed shape/role header."""
    path = Path(path)
    if binary:
        import io as _io

        buf = _io.BytesIO()
        np.save(buf, tm.entries)
        _atomic_write_bytes(path, buf.getvalue())
        return
    m = tm.entries
    lines = [f"# {m.shape[0]} {m.shape[1]} {tm.role}"]
    lines += [",".join(_fmt(v) for v in row) for row in m]
    _atomic_write_text(path, "\n".join(lines) + "\n")


def read_matrix(path: str | Path) -> TransmissionMatrix:
    path = Path(path)
    if path.suffix == ".npy":
        entries = np.load(path)
        role = "direct"
    else:
        with open(path) as fh:
            header = fh.readline()
        if not header.startswith("#"):
            raise ChainError(f"{path} lacks the '#' shape header")
        parts = header[1:].split()
        role = parts[2] if len(parts) > 2 else "direct"
        entries = np.loadtxt(path, delimiter=",", comments="#", ndmin=2)
    w = int(round(entries.shape[0] ** 0.5))
    return TransmissionMatrix(dims=Dimensions(w=w), entries=entries, role=role)


# ---------------------------------------------------------------------------
# Estimates and decimation paths


def write_estimate(est: CouplingEstimate, path: str | Path, fingerprint: str,
                   dataset_sha256: str) -> None:
    rows = []
    for r, site in enumerate(est.fitted_sites):
        active = np.flatnonzero(est.masks[r].active)
        rows.append({
            "site": int(site),
            "a": est.rows[r].a,
            "positions": [int(p) for p in active],
            "values": [est.rows[r].k[p] for p in active],
            "converged": bool(est.converged[r]),
            "iterations": int(est.iterations[r]),
            "objective": est.row_objectives[r],
        })
    doc = {
        "format": "tminfer-estimate",
        "versions": {"tminfer": __version__, "numpy": np.__version__},
        "w": est.dims.w,
        "scope": est.scope,
        "direction": est.direction,
        "total_pl": est.total_pl,
        "dataset_fingerprint": est.dataset_fingerprint,
        "dataset_sha256": dataset_sha256,
        "config_fingerprint": fingerprint,
        "rows": rows,
    }
    _atomic_write_text(Path(path), json.dumps(doc, indent=1) + "\n")


def read_estimate(path: str | Path, fingerprint: str | None = None) -> CouplingEstimate:
    doc = json.loads(Path(path).read_text())
    if doc.get("format") != "tminfer-estimate":
        raise ChainError(f"{path} is not an estimate artifact")
    if fingerprint is not None:
        _check_fingerprint(doc, fingerprint, Path(path).name)
    dims = Dimensions(w=doc["w"])
    n = dims.n
    rows, masks, conv, iters, objs, sites = [], [], [], [], [], []
    for rec in doc["rows"]:
        k = np.zeros(n - 1)
        act = np.zeros(n - 1, dtype=bool)
        pos = np.asarray(rec["positions"], dtype=int)
        if pos.size:
            k[pos] = rec["values"]
            act[pos] = True
        sites.append(rec["site"])
        rows.append(RowParams(site=rec["site"], a=rec["a"], k=k))
        masks.append(RowMask(site=rec["site"], active=act))
        conv.append(rec["converged"])
        iters.append(rec["iterations"])
        objs.append(rec["objective"])
    return CouplingEstimate(
        dims=dims,
        scope=doc["scope"],
        direction=doc["direction"],
        fitted_sites=tuple(sites),
        rows=tuple(rows),
        masks=tuple(masks),
        converged=tuple(conv),
        iterations=tuple(iters),
        row_objectives=tuple(objs),
        total_pl=doc["total_pl"],
        dataset_fingerprint=doc["dataset_fingerprint"],
    )


def write_path(path_obj: DecimationPath, path: str | Path, fingerprint: str,
               sigma: float, dataset_sha256: str) -> None:
    """Scalar decimation-path columns; the selected estimate is stored apart."""
    records = [{
        "n_couplings": r.n_couplings,
        "k_free": r.k_free,
        "total_pl": r.total_pl,
        "bic": r.bic,
        "all_converged": r.all_converged,
    } for r in path_obj.records]
    doc = {
        "format": "tminfer-path",
        "versions": {"tminfer": __version__, "numpy": np.__version__},
        "sigma": sigma,
        "selected": path_obj.selected,
        "records": records,
        "dataset_sha256": dataset_sha256,
        "config_fingerprint": fingerprint,
    }
    _atomic_write_text(Path(path), json.dumps(doc, indent=1) + "\n")


# ---------------------------------------------------------------------------
# Generic JSON artifacts (extraction results, eval reports, sweep reports)


def write_json_artifact(doc: dict, path: str | Path, fingerprint: str) -> None:
    doc = dict(doc)
    doc.setdefault("versions", {"tminfer": __version__, "numpy": np.__version__})
    doc["config_fingerprint"] = fingerprint
    _atomic_write_text(Path(path), json.dumps(doc, indent=1) + "\n")


def read_json_artifact(path: str | Path, fingerprint: str | None = None) -> dict:
    doc = json.loads(Path(path).read_text())
    if fingerprint is not None:
        _check_fingerprint(doc, fingerprint, Path(path).name)
    return doc


def register_artifacts(out_dir: str | Path, *names: str) -> None:
    """Record content hashes of freshly written artifacts in the manifest."""
    _register(Path(out_dir), *names)


def verify_artifact(out_dir: str | Path, name: str) -> None:
    """Raise ChainError unless the named artifact matches its manifest hash."""
    _verify(Path(out_dir), name)
