"""Command-line front end.

Subcommands ``synth``, ``run``, ``eval``, ``spectrum`` and ``sweep``.  Every
output directory holds a ``manifest.json`` with the config, its hash and the
seed; matrices use the binary format of :mod:`geomancer.io`.
"""
from __future__ import annotations

import argparse
import csv
import io as _stdio
import json
import logging
import math
import os
import sys
from dataclasses import asdict, dataclass, fields
from pathlib import Path

import numpy as np

from . import io
from .connection import BlockSparseOperator
from .evaluate import align_to_ground_truth, chance_baseline, disentangling_error, estimated_subspaces
from .factorize import Factorization, GeomancerConfig, StageError, run_geomancer
from .graph import build_knn_graph, laplacian_eigenmaps_embed
from .spectral import SpectrumResult, smallest_eigenpairs
from .synth import GroundTruth, parse_spec, sample_product

__all__ = ["ExperimentConfig", "ConfigError", "main", "dispatch"]

logger = logging.getLogger("geomancer")

OUTPUT_ENV = "GEOMANCER_OUTPUT_DIR"
DEFAULT_OUTPUT = "geomancer_output"


class ConfigError(ValueError):
    """Invalid experiment configuration (exit code 2)."""


@dataclass
class ExperimentConfig:
    """Everything one CLI invocation needs; validated before any compute.

    ``k_neighbors`` defaults to ``2 * k``.  ``lem_dim`` switches ``run`` to
    factor a Laplacian-eigenmaps embedding of the input instead of the input
    itself, using the ``lem_neighbors``-NN graph of the input points.
    """

    spec: str | None = None
    input: str | None = None
    t: int | None = None
    k: int | None = None
    k_neighbors: int | None = None
    n_eigenpairs: int = 10
    gamma: object = "auto"
    min_gap_ratio: float = 5.0
    eig_tol: float = 1e-7
    ffdiag_tol: float = 1e-12
    cluster_threshold: float = 0.5
    seed: int = 0
    output_dir: str | None = None
    cache_spectrum: bool = True
    cache_operator: bool = False
    lem_dim: int | None = None
    lem_neighbors: int = 10

    @classmethod
    def from_dict(cls, values: dict) -> "ExperimentConfig":
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(values) - known)
        if unknown:
            raise ConfigError(f"unknown config keys: {unknown}")
        return cls(**values)

    def validate(self) -> "ExperimentConfig":
        if self.spec is not None:
            try:
                parse_spec(self.spec)
            except ValueError as exc:
                raise ConfigError(str(exc)) from exc
        for name in ("t", "k", "k_neighbors", "lem_dim"):
            v = getattr(self, name)
            if v is not None and (not isinstance(v, int) or isinstance(v, bool) or v < 1):
                raise ConfigError(f"{name} must be a positive integer, got {v!r}")
        if self.k is not None and self.k < 2:
            raise ConfigError("k must be at least 2")
        if self.k_neighbors is not None and self.k is not None and self.k_neighbors < self.k:
            raise ConfigError(f"k_neighbors ({self.k_neighbors}) must be at least k ({self.k})")
        if not isinstance(self.n_eigenpairs, int) or self.n_eigenpairs < 1:
            raise ConfigError(f"n_eigenpairs must be a positive integer, got {self.n_eigenpairs!r}")
        if self.gamma != "auto":
            if not isinstance(self.gamma, (int, float)) or isinstance(self.gamma, bool) or self.gamma <= 0:
                raise ConfigError(f"gamma must be 'auto' or a positive number, got {self.gamma!r}")
        for name in ("min_gap_ratio", "eig_tol", "ffdiag_tol"):
            v = getattr(self, name)
            if not isinstance(v, (int, float)) or not math.isfinite(v) or v <= 0:
                raise ConfigError(f"{name} must be a positive number, got {v!r}")
        if not 0 < self.cluster_threshold < 1:
            raise ConfigError("cluster_threshold must lie in (0, 1)")
        if not isinstance(self.seed, int) or self.seed < 0:
            raise ConfigError(f"seed must be a nonnegative integer, got {self.seed!r}")
        if not isinstance(self.lem_neighbors, int) or self.lem_neighbors < 1:
            raise ConfigError("lem_neighbors must be a positive integer")
        return self

    def geomancer_config(self) -> GeomancerConfig:
        return GeomancerConfig(
            k_neighbors=self.k_neighbors,
            n_eigenpairs=self.n_eigenpairs,
            gamma=self.gamma,
            min_gap_ratio=self.min_gap_ratio,
            eig_tol=self.eig_tol,
            ffdiag_tol=self.ffdiag_tol,
            cluster_threshold=self.cluster_threshold,
            seed=self.seed,
        )

    def to_dict(self) -> dict:
        return asdict(self)


# ---------------------------------------------------------------- artifacts

def _out_dir(cfg: ExperimentConfig, command: str) -> Path:
    if cfg.output_dir:
        path = Path(cfg.output_dir)
    else:
        path = Path(os.environ.get(OUTPUT_ENV, DEFAULT_OUTPUT)) / command
    path.mkdir(parents=True, exist_ok=True)
    return path


def write_synth(directory, spec: str, t: int, seed: int, csv_copy: bool = False) -> dict:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    manifold = parse_spec(spec)
    points, truth = sample_product(manifold, t, seed)
    files = ["points.bin"]
    io.write_matrix(directory / "points.bin", points)
    for j, b in enumerate(truth.bases):
        name = f"truth_{j}.bin"
        io.write_matrix(directory / name, b.reshape(t, -1))
        files.append(name)
    if csv_copy:
        io.write_matrix_csv(directory / "points.csv", points)
        files.append("points.csv")
    config = {"spec": str(manifold), "t": t, "seed": seed}
    extra = {"dims": list(manifold.dims), "k": manifold.dim, "ambient_dim": manifold.ambient_dim,
             "factor_ambient_dims": [f.ambient_dim for f in manifold.factors]}
    return io.write_manifest(directory, "synth", config, files, extra)


def read_synth(directory):
    """Points and ground truth of a ``synth`` directory, plus its manifest."""
    directory = Path(directory)
    man = io.read_manifest(directory)
    if man.get("kind") != "synth":
        raise ConfigError(f"{directory} is not a synth output (kind={man.get('kind')!r})")
    points = io.read_matrix(directory / "points.bin")
    t, n = points.shape
    bases = []
    for j, d in enumerate(man["dims"]):
        flat = io.read_matrix(directory / f"truth_{j}.bin")
        bases.append(flat.reshape(t, n, d))
    return points, GroundTruth(bases=bases, dims=tuple(man["dims"])), man


def _spectrum_key(cfg: ExperimentConfig, input_hash: str) -> str:
    parts = {"input": input_hash, "k": cfg.k, "k_neighbors": cfg.k_neighbors, "n_eigenpairs": cfg.n_eigenpairs,
             "eig_tol": cfg.eig_tol, "seed": cfg.seed, "lem_dim": cfg.lem_dim, "lem_neighbors": cfg.lem_neighbors}
    return io.config_hash(parts)


def _operator_key(cfg: ExperimentConfig, input_hash: str) -> str:
    parts = {"input": input_hash, "k": cfg.k, "k_neighbors": cfg.k_neighbors,
             "lem_dim": cfg.lem_dim, "lem_neighbors": cfg.lem_neighbors}
    return io.config_hash(parts)


def _save_spectrum(directory: Path, spectrum: SpectrumResult) -> None:
    io.write_matrix(directory / "eigenvectors.bin", spectrum.eigenvectors)
    (directory / "spectrum.json").write_text(json.dumps(spectrum.to_dict(), indent=2, sort_keys=True) + "\n")


def _load_spectrum(directory: Path) -> SpectrumResult:
    meta = json.loads((directory / "spectrum.json").read_text())
    return SpectrumResult(
        eigenvalues=np.asarray(meta["eigenvalues"], dtype=float),
        eigenvectors=io.read_matrix(directory / "eigenvectors.bin"),
        residuals=np.asarray(meta["residuals"], dtype=float),
        norm_bound=float(meta["norm_bound"]),
        n_matvec=int(meta["n_matvec"]),
    )


def execute_run(cfg: ExperimentConfig, out: Path) -> dict:
    """The ``run`` subcommand body; returns the written manifest."""
    if not cfg.input:
        raise ConfigError("run needs --input (a synth output directory)")
    points, _, in_man = read_synth(cfg.input)
    if cfg.k is None:
        cfg.k = int(in_man["k"])
    if cfg.k_neighbors is None:
        cfg.k_neighbors = 2 * cfg.k
    cfg.validate()

    graph = None
    data = points
    if cfg.lem_dim is not None:
        graph = build_knn_graph(points, cfg.lem_neighbors)
        try:
            data = laplacian_eigenmaps_embed(graph, cfg.lem_dim, seed=cfg.seed)
        except Exception as exc:  # noqa: BLE001
            raise StageError("embedding", exc) from exc

    cache_root = out / "cache"
    skey = cache_root / f"spectrum-{_spectrum_key(cfg, in_man['config_hash'])}"
    okey = cache_root / f"operator-{_operator_key(cfg, in_man['config_hash'])}.bin"
    spectrum = None
    if cfg.cache_spectrum and (skey / "spectrum.json").exists():
        logger.info("using cached spectrum %s", skey.name)
        spectrum = _load_spectrum(skey)
    elif cfg.cache_operator and okey.exists():
        logger.info("using cached operator %s", okey.name)
        op = BlockSparseOperator.load(okey)
        try:
            spectrum = smallest_eigenpairs(op, min(cfg.n_eigenpairs, op.shape[0] - 1), cfg.eig_tol, None, cfg.seed)
        except Exception as exc:  # noqa: BLE001
            raise StageError("eigensolver", exc) from exc

    fact, extra = run_geomancer(data, cfg.k, cfg.geomancer_config(), graph=graph,
                                return_intermediates=True, spectrum=spectrum)
    spectrum = extra["spectrum"]
    if cfg.cache_spectrum or cfg.cache_operator:
        cache_root.mkdir(exist_ok=True)
    if cfg.cache_spectrum and not (skey / "spectrum.json").exists():
        skey.mkdir(parents=True, exist_ok=True)
        _save_spectrum(skey, spectrum)
    if cfg.cache_operator and not okey.exists() and extra["operator"] is not None:
        extra["operator"].save(okey)

    t = fact.n_points
    files = ["frames.bin", "rotations.bin", "labels.bin", "diagnostics.bin", "eigenvectors.bin", "spectrum.json"]
    io.write_matrix(out / "frames.bin", fact.frames.reshape(t, -1))
    io.write_matrix(out / "rotations.bin", fact.rotations.reshape(t, -1))
    io.write_matrix(out / "labels.bin", fact.labels.astype(float))
    diag = np.column_stack([fact.offdiag_residual, fact.ffdiag_converged.astype(float), fact.cluster_margin])
    io.write_matrix(out / "diagnostics.bin", diag)
    _save_spectrum(out, spectrum)
    if cfg.lem_dim is not None:
        io.write_matrix(out / "embedding.bin", data)
        files.append("embedding.bin")

    run_cfg = cfg.to_dict()
    for key in ("output_dir", "cache_spectrum", "cache_operator"):
        run_cfg.pop(key)
    run_cfg["input"] = None
    run_cfg["input_hash"] = in_man["config_hash"]
    extra_meta = {"summary": fact.summary(), "n_eigenpairs_used": int(len(fact.eigenvalues)),
                  "frame_dim": int(fact.frames.shape[1])}
    return io.write_manifest(out, "run", run_cfg, files, extra_meta)


def read_run(directory) -> tuple:
    directory = Path(directory)
    man = io.read_manifest(directory)
    if man.get("kind") != "run":
        raise ConfigError(f"{directory} is not a run output (kind={man.get('kind')!r})")
    k = int(man["config"]["k"])
    n = int(man["frame_dim"])
    frames = io.read_matrix(directory / "frames.bin")
    t = frames.shape[0]
    diag = io.read_matrix(directory / "diagnostics.bin")
    spectrum = _load_spectrum(directory)
    summary = man["summary"]
    fact = Factorization(
        n_factors=int(summary["n_factors"]),
        gap_index=int(summary["gap_index"]),
        eigenvalues=spectrum.eigenvalues,
        frames=frames.reshape(t, n, k),
        rotations=io.read_matrix(directory / "rotations.bin").reshape(t, k, k),
        labels=io.read_matrix(directory / "labels.bin").astype(np.int64),
        offdiag_residual=diag[:, 0],
        ffdiag_converged=diag[:, 1].astype(bool),
        cluster_margin=diag[:, 2],
        residuals=spectrum.residuals,
    )
    return fact, man


def _fmt(mean, std) -> str:
    if mean is None or not math.isfinite(mean):
        return "n/a"
    return f"{mean:.3f} ± {std:.3f}"


def render_table(columns: list, rows: list) -> str:
    """Plain-text table; ``rows`` are ``(label, [cell, ...])``."""
    widths = [max(len(r[0]) for r in rows + [("", [])])] + [
        max(len(c), *(len(r[1][j]) for r in rows)) for j, c in enumerate(columns)
    ]
    line = lambda cells: "  ".join(c.ljust(w) for c, w in zip(cells, widths)).rstrip()  # noqa: E731
    out = [line([""] + columns), line(["-" * w for w in widths])]
    out += [line([label] + cells) for label, cells in rows]
    return "\n".join(out) + "\n"


def execute_eval(run_dir, truth_dir, out: Path, chance_samples: int = 10000, seed: int = 0) -> dict:
    fact, run_man = read_run(run_dir)
    latent, truth, truth_man = read_synth(truth_dir)
    if run_man["config"].get("input_hash") != truth_man["config_hash"]:
        raise ConfigError(
            f"hash mismatch: run was computed from input {run_man['config'].get('input_hash')} "
            f"but ground truth has {truth_man['config_hash']}"
        )
    cfg = run_man["config"]
    excluded = None
    if cfg.get("lem_dim") is not None:
        embedding = io.read_matrix(Path(run_dir) / "embedding.bin")
        graph = build_knn_graph(latent, int(cfg["lem_neighbors"]))
        latent_frames = np.concatenate(truth.bases, axis=2)
        alignment, valid = align_to_ground_truth(latent, latent_frames, embedding, fact.frames, graph)
        est = estimated_subspaces(fact, latent_frames, alignment)
        excluded = ~valid
    else:
        est = estimated_subspaces(fact)
    dims = truth_man["dims"]
    chance = chance_baseline(truth_man["k"], dims, chance_samples, seed) if len(dims) > 1 else None
    report = disentangling_error(est, truth, excluded=excluded, chance=chance)
    result = {
        "spec": truth_man["config"]["spec"],
        "n_factors": fact.n_factors,
        "true_n_factors": len(dims),
        "report": report.to_dict(),
        "run_hash": run_man["config_hash"],
        "truth_hash": truth_man["config_hash"],
    }
    (out / "report.json").write_text(json.dumps(result, indent=2, sort_keys=True) + "\n")
    label = "GEOMANCER (LEM)" if cfg.get("lem_dim") is not None else "GEOMANCER"
    rows = [(label, [_fmt(report.mean_error, report.per_point_std), f"{report.shape_accuracy:.3f}",
                     str(fact.n_factors)])]
    if chance is not None:
        rows.append(("Chance", [_fmt(*chance), "", ""]))
    table = render_table([result["spec"], "shape acc.", "m"], rows)
    (out / "report.txt").write_text(table)
    return result


def spectrum_svg(values: np.ndarray, rescaled: np.ndarray) -> str:
    """Two bar charts (raw and rescaled eigenvalues) as a static SVG."""
    w_panel, h, pad = 320, 200, 30
    bars = []

    def panel(x0, vals, title):
        top = float(vals.max()) if len(vals) and vals.max() > 0 else 1.0
        n = max(len(vals), 1)
        bw = (w_panel - 2 * pad) / n
        bars.append(f'<text x="{x0 + w_panel / 2:.1f}" y="18" text-anchor="middle" font-size="12">{title}</text>')
        bars.append(f'<line x1="{x0 + pad}" y1="{h - pad}" x2="{x0 + w_panel - pad}" y2="{h - pad}" stroke="black"/>')
        for i, v in enumerate(vals):
            bh = (h - 2 * pad) * max(float(v), 0.0) / top
            x = x0 + pad + i * bw
            bars.append(f'<rect x="{x + 0.1 * bw:.2f}" y="{h - pad - bh:.2f}" width="{0.8 * bw:.2f}" '
                        f'height="{bh:.2f}" fill="steelblue"/>')
            bars.append(f'<text x="{x + bw / 2:.2f}" y="{h - pad + 12}" text-anchor="middle" '
                        f'font-size="9">{i + 1}</text>')
        bars.append(f'<text x="{x0 + pad}" y="{pad - 4}" font-size="9">max {top:.4g}</text>')

    panel(0, values, "eigenvalues")
    panel(w_panel, rescaled, "rescaled (first = 1)")
    body = "\n".join(bars)
    return (f'<svg xmlns="http://www.w3.org/2000/svg" width="{2 * w_panel}" height="{h}" '
            f'viewBox="0 0 {2 * w_panel} {h}">\n{body}\n</svg>\n')


def execute_spectrum(run_dir, out: Path) -> np.ndarray:
    run_dir = Path(run_dir)
    man = io.read_manifest(run_dir)
    if man.get("kind") != "run":
        raise ConfigError(f"{run_dir} is not a run output")
    vals = _load_spectrum(run_dir).eigenvalues
    first = vals[0]
    rescaled = vals / first if first > 0 else np.full_like(vals, np.nan)
    buf = _stdio.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["index", "eigenvalue", "rescaled"])
    for i, (v, r) in enumerate(zip(vals, rescaled)):
        writer.writerow([i + 1, repr(float(v)), repr(float(r))])
    (out / "spectrum.csv").write_text(buf.getvalue())
    (out / "spectrum.svg").write_text(spectrum_svg(vals, rescaled))
    return vals


def sweep_svg(t_values, means, stds) -> str:
    w, h, pad = 420, 260, 40
    lt = np.log10(np.asarray(t_values, dtype=float))
    m = np.asarray(means, dtype=float)
    finite = np.isfinite(m)
    y_top = float(np.nanmax(m + np.nan_to_num(stds))) if finite.any() else 1.0
    y_top = y_top if y_top > 0 else 1.0
    span = lt.max() - lt.min() if len(lt) > 1 else 1.0

    def xy(a, b):
        x = pad + (w - 2 * pad) * ((a - lt.min()) / span if span else 0.5)
        return x, h - pad - (h - 2 * pad) * b / y_top

    parts = [f'<line x1="{pad}" y1="{h - pad}" x2="{w - pad}" y2="{h - pad}" stroke="black"/>',
             f'<line x1="{pad}" y1="{pad}" x2="{pad}" y2="{h - pad}" stroke="black"/>',
             f'<text x="{w / 2}" y="{h - 8}" text-anchor="middle" font-size="11">points (log scale)</text>',
             f'<text x="12" y="{pad - 10}" font-size="11">error (rad), max {y_top:.3g}</text>']
    pts = [xy(a, b) for a, b, f in zip(lt, m, finite) if f]
    if len(pts) > 1:
        parts.append('<polyline fill="none" stroke="steelblue" points="'
                     + " ".join(f"{x:.2f},{y:.2f}" for x, y in pts) + '"/>')
    for (x, y), tv in zip(pts, np.asarray(t_values)[finite]):
        parts.append(f'<circle cx="{x:.2f}" cy="{y:.2f}" r="3" fill="steelblue"/>')
        parts.append(f'<text x="{x:.2f}" y="{h - pad + 12}" text-anchor="middle" font-size="9">{int(tv)}</text>')
    return (f'<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" viewBox="0 0 {w} {h}">\n'
            + "\n".join(parts) + "\n</svg>\n")


def execute_sweep(cfg: ExperimentConfig, t_values, seeds, out: Path) -> list:
    if not cfg.spec:
        raise ConfigError("sweep needs --spec")
    manifold = parse_spec(cfg.spec)
    rows = []
    for t in t_values:
        for seed in seeds:
            points, truth = sample_product(manifold, t, seed)
            run_cfg = ExperimentConfig(**{**cfg.to_dict(), "t": t, "seed": seed}).geomancer_config()
            fact = run_geomancer(points, manifold.dim, run_cfg)
            rep = disentangling_error(fact, truth)
            rows.append({"t": t, "seed": seed, "n_factors": fact.n_factors, "shape_accuracy": rep.shape_accuracy,
                         "mean_error": rep.mean_error, "per_point_std": rep.per_point_std})
            logger.info("t=%d seed=%d m=%d error=%.4f", t, seed, fact.n_factors, rep.mean_error)
    keys = ["t", "seed", "n_factors", "shape_accuracy", "mean_error", "per_point_std"]
    buf = _stdio.StringIO()
    writer = csv.DictWriter(buf, keys, lineterminator="\n")
    writer.writeheader()
    for r in rows:
        writer.writerow({k: (repr(float(v)) if isinstance(v, float) else v) for k, v in r.items()})
    (out / "sweep.csv").write_text(buf.getvalue())

    buf = _stdio.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["t", "n_seeds", "mean_error", "seed_std", "mean_shape_accuracy"])
    means, stds = [], []
    for t in t_values:
        errs = np.array([r["mean_error"] for r in rows if r["t"] == t], dtype=float)
        acc = np.array([r["shape_accuracy"] for r in rows if r["t"] == t], dtype=float)
        mean = float(np.nanmean(errs)) if np.isfinite(errs).any() else math.nan
        std = float(np.nanstd(errs)) if np.isfinite(errs).any() else math.nan
        means.append(mean)
        stds.append(std)
        writer.writerow([t, len(errs), repr(mean), repr(std), repr(float(acc.mean()))])
    (out / "sweep_summary.csv").write_text(buf.getvalue())
    (out / "sweep.svg").write_text(sweep_svg(t_values, means, stds))
    io.write_manifest(out, "sweep", {**cfg.to_dict(), "output_dir": None, "t_values": list(t_values),
                                     "seeds": list(seeds)}, ["sweep.csv", "sweep_summary.csv", "sweep.svg"])
    return rows


# ---------------------------------------------------------------- argparse

def _int_list(text: str) -> list:
    try:
        values = [int(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None
    if not values:
        raise argparse.ArgumentTypeError("empty list")
    return values


def _gamma(text: str):
    if text == "auto":
        return "auto"
    try:
        return float(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"gamma must be 'auto' or a number, got {text!r}") from None


def _add_common(p):
    p.add_argument("--config", help="JSON file with ExperimentConfig fields; flags override it")
    p.add_argument("--out", dest="output_dir", help=f"output directory (default ${OUTPUT_ENV}/<command>)")
    p.add_argument("--seed", type=int)


def _add_pipeline(p):
    p.add_argument("--k", type=int, help="manifold dimension (read from the input manifest if omitted)")
    p.add_argument("--k-neighbors", type=int, help="nearest neighbors for the graph (default 2k)")
    p.add_argument("--n-eigenpairs", type=int, help="eigenpairs to compute (default 10)")
    p.add_argument("--gamma", type=_gamma, help="'auto' or a fixed eigenvalue threshold")
    p.add_argument("--min-gap-ratio", type=float)
    p.add_argument("--eig-tol", type=float)
    p.add_argument("--ffdiag-tol", type=float)
    p.add_argument("--cluster-threshold", type=float)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="geomancer", description="Factor tangent spaces of product manifolds.")
    parser.add_argument("--threads", type=int, default=None, help="BLAS/OpenMP thread limit")
    parser.add_argument("--log-level", default="WARNING", choices=["DEBUG", "INFO", "WARNING", "ERROR"])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="sample a product manifold with ground-truth tangent factors")
    _add_common(p)
    p.add_argument("--spec", help="factors joined by 'x', e.g. S2xS3xSO3")
    p.add_argument("--t", type=int, help="number of points")
    p.add_argument("--csv", action="store_true", help="also write points.csv")

    p = sub.add_parser("run", help="run the factorization on a synth output")
    _add_common(p)
    _add_pipeline(p)
    p.add_argument("--input", help="synth output directory")
    p.add_argument("--no-cache", dest="cache_spectrum", action="store_false", default=None,
                   help="do not read or write the cached spectrum")
    p.add_argument("--cache-operator", dest="cache_operator", action="store_true", default=None,
                   help="also cache the assembled operator (large)")
    p.add_argument("--lem-dim", type=int, help="factor a Laplacian-eigenmaps embedding of this dimension")
    p.add_argument("--lem-neighbors", type=int, help="neighbors of the embedding graph (default 10)")

    p = sub.add_parser("eval", help="score a run against ground truth")
    p.add_argument("--run", required=True, help="run output directory")
    p.add_argument("--truth", required=True, help="synth output directory")
    p.add_argument("--out", dest="output_dir")
    p.add_argument("--chance-samples", type=int, default=10000)
    p.add_argument("--seed", type=int, default=0)

    p = sub.add_parser("spectrum", help="eigenvalue CSV and bar chart of a run")
    p.add_argument("--run", required=True, help="run output directory")
    p.add_argument("--out", dest="output_dir")

    p = sub.add_parser("sweep", help="error versus number of points")
    _add_common(p)
    _add_pipeline(p)
    p.add_argument("--spec", help="factors joined by 'x'")
    p.add_argument("--t-values", type=_int_list, required=True, help="comma-separated point counts")
    p.add_argument("--seeds", type=_int_list, default=[0], help="comma-separated seeds")
    return parser


_FLAG_FIELDS = ("spec", "input", "t", "k", "k_neighbors", "n_eigenpairs", "gamma", "min_gap_ratio", "eig_tol",
                "ffdiag_tol", "cluster_threshold", "seed", "output_dir", "cache_spectrum", "cache_operator",
                "lem_dim", "lem_neighbors")


def config_from_args(args) -> ExperimentConfig:
    values = {}
    if getattr(args, "config", None):
        try:
            values = json.loads(Path(args.config).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read config {args.config}: {exc}") from exc
        if not isinstance(values, dict):
            raise ConfigError("config file must hold a JSON object")
    for name in _FLAG_FIELDS:
        v = getattr(args, name, None)
        if v is not None:
            values[name] = v
    try:
        cfg = ExperimentConfig.from_dict(values)
    except TypeError as exc:
        raise ConfigError(str(exc)) from exc
    return cfg.validate()


def dispatch(argv=None) -> int:
    """Parse ``argv``, run one subcommand, return the exit code."""
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=args.log_level, format="%(levelname)s %(name)s: %(message)s")
    if args.threads is not None and args.threads < 1:
        print("error: --threads must be positive", file=sys.stderr)
        return 2
    try:
        if args.threads is not None:
            from threadpoolctl import threadpool_limits

            with threadpool_limits(limits=args.threads):
                return _execute(args)
        return _execute(args)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except StageError as exc:
        print(f"error: stage '{exc.stage}' failed: {exc.cause}", file=sys.stderr)
        return 1
    except FileNotFoundError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


def _simple_out(output_dir, command) -> Path:
    return _out_dir(ExperimentConfig(output_dir=output_dir), command)


def _execute(args) -> int:
    if args.command == "synth":
        cfg = config_from_args(args)
        if cfg.spec is None or cfg.t is None:
            raise ConfigError("synth needs --spec and --t")
        out = _out_dir(cfg, "synth")
        try:
            write_synth(out, cfg.spec, cfg.t, cfg.seed, csv_copy=args.csv)
        except ValueError as exc:
            raise StageError("synth", exc) from exc
        print(out)
    elif args.command == "run":
        cfg = config_from_args(args)
        out = _out_dir(cfg, "run")
        man = execute_run(cfg, out)
        print(f"m = {man['summary']['n_factors']}  ({out})")
    elif args.command == "eval":
        if args.chance_samples < 1:
            raise ConfigError("--chance-samples must be positive")
        out = _simple_out(args.output_dir, "eval")
        execute_eval(args.run, args.truth, out, args.chance_samples, args.seed)
        sys.stdout.write((out / "report.txt").read_text())
    elif args.command == "spectrum":
        out = _simple_out(args.output_dir, "spectrum")
        vals = execute_spectrum(args.run, out)
        print(" ".join(f"{v:.6g}" for v in vals))
    elif args.command == "sweep":
        cfg = config_from_args(args)
        if cfg.spec is None:
            raise ConfigError("sweep needs --spec")
        out = _out_dir(cfg, "sweep")
        try:
            execute_sweep(cfg, args.t_values, args.seeds, out)
        except ValueError as exc:
            raise StageError("sweep", exc) from exc
        sys.stdout.write((out / "sweep_summary.csv").read_text())
    return 0


def main() -> None:
    sys.exit(dispatch())


if __name__ == "__main__":
    main()
