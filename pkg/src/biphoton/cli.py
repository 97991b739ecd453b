"""Command-line pipeline: model, ring, simulate, analyze, schmidt, report.

Every command writes its artifacts into ``--out-dir`` together with
``report.json`` (always valid JSON, with an ``errors`` list) and
``manifest.json`` (SHA-256 of every artifact).  The exit status is 0 only
when no error was recorded.  Wall-clock timings go to stdout so that the
written files depend only on the inputs.
"""

from __future__ import annotations

import argparse
import hashlib
import math
import os
import sys
import time
import traceback
from pathlib import Path

import numpy as np

from . import correlation as corr
from . import formats
from .config import Config, load_config
from .errors import ConfigError, FitError, FormatError
from .framesim import PairSampler, SimulationTotals, build_pair_sampler, run_simulation
from .spdc import (
    amplitude_grid,
    ring_map,
    ring_wavevector,
    schmidt_spectrum,
    summed_intensity_kk,
    summed_intensity_ll,
    theory_mode_sizes,
)

SEPARABLE_SCALES = (1, 4, 16, 64)


def _threads(args) -> int:
    if args.threads is not None:
        return max(1, args.threads)
    env = os.environ.get("BIPHOTON_THREADS")
    try:
        return max(1, int(env)) if env else 1
    except ValueError:
        return 1


def _config(args) -> Config:
    overrides = list(args.set or [])
    if args.seed is not None:
        overrides.append(f"simulation.seed={args.seed}")
    return load_config(args.config, overrides)


def _sha256(path: Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


class Outputs:
    """Tracks artifacts written below the output directory."""

    def __init__(self, out_dir: Path):
        self.dir = out_dir
        self.dir.mkdir(parents=True, exist_ok=True)
        self.files: list[Path] = []

    def path(self, name: str) -> Path:
        p = self.dir / name
        self.files.append(p)
        return p

    def manifest(self) -> dict:
        out = {}
        for p in self.files:
            if p.exists():
                out[p.relative_to(self.dir).as_posix()] = _sha256(p)
            sidecar = Path(str(p) + ".txt")
            if p.suffix == ".pgm" and sidecar.exists():
                out[sidecar.relative_to(self.dir).as_posix()] = _sha256(sidecar)
        return out


def _panels(prefix, family: dict, rows, cols, out: Outputs, labels):
    for (a, b), m in sorted(family.items()):
        name = f"{prefix}_s{a}_i{b}"
        formats.write_map_csv(out.path(name + ".csv"), m, rows, cols, *labels)
        peak = float(np.max(m))
        formats.write_pgm(out.path(name + ".pgm"), m / peak if peak > 0 else m)


def _theory_panels(ag, parts, out: Outputs):
    g = ag.grid
    lr = corr.default_subregions(g.n_lambda, parts)
    kr = corr.default_subregions(g.n_k, parts)
    kk = {(a, b): summed_intensity_kk(ag, ra, rb) for a, ra in enumerate(lr) for b, rb in enumerate(lr)}
    ll = {(a, b): summed_intensity_ll(ag, ra, rb) for a, ra in enumerate(kr) for b, rb in enumerate(kr)}
    _panels("kk", kk, g.k_axis("signal"), g.k_axis("idler"), out, ("k_s", "k_i"))
    _panels("ll", ll, g.lambda_axis("signal"), g.lambda_axis("idler"), out, ("lambda_s", "lambda_i"))


# ---------------------------------------------------------------- commands


def cmd_model(args, cfg: Config, out: Outputs, report: dict):
    t0 = time.perf_counter()
    ag = amplitude_grid(cfg.params, cfg.grid)
    report["grid_seconds"] = time.perf_counter() - t0
    formats.write_grid(out.path("amplitude.bpag"), ag)
    _theory_panels(ag, cfg.analysis["subregions"], out)
    t1 = time.perf_counter()
    spec = schmidt_spectrum(ag)
    report["schmidt_seconds"] = time.perf_counter() - t1
    report["schmidt"] = spec.to_dict()
    report["schmidt_number"] = spec.schmidt_number
    report["k_ring"] = ring_wavevector(cfg.params)
    try:
        tm = theory_mode_sizes(ag)
        report["theory_mode_sizes"] = {
            "sigma_k_plus": tm.k_fit.sigma,
            "sigma_k_mode": tm.sigma_k_mode,
            "sigma_lambda_plus": tm.lambda_fit.sigma,
            "sigma_lambda_mode": tm.sigma_lambda_mode,
        }
    except FitError as exc:
        report["errors"].append(f"theory mode-size fit: {exc}")
    if args.separable_scan:
        report["separable_scan"] = separable_scan(cfg)
    formats.write_json(out.path("schmidt.json"), report["schmidt"])
    report["seconds"] = time.perf_counter() - t0


def separable_scan(cfg: Config, scales=SEPARABLE_SCALES) -> dict:
    """Schmidt number as the source is pushed toward the separable limit.

    Each step widens the pump spectrum and shrinks waist and crystal by the
    same factor ``s``.
    """
    p = cfg.params
    values = []
    for s in scales:
        q = p.with_(
            pump_spectral_width=p.pump_spectral_width * s,
            pump_waist_um=p.pump_waist_um / s,
            crystal_length_mm=p.crystal_length_mm / s,
        )
        values.append(schmidt_spectrum(amplitude_grid(q, cfg.grid)).schmidt_number)
    diffs = np.diff(values)
    return {
        "scales": list(scales),
        "schmidt_numbers": values,
        "decreasing": bool(np.all(diffs < 0)),
        "distance_to_one_ratio": (values[-1] - 1.0) / (values[0] - 1.0) if values[0] > 1 else None,
    }


def cmd_schmidt(args, cfg: Config, out: Outputs, report: dict):
    t0 = time.perf_counter()
    ag = formats.read_grid(args.grid) if args.grid else amplitude_grid(cfg.params, cfg.grid)
    spec = schmidt_spectrum(ag)
    report["schmidt"] = spec.to_dict(args.coefficients)
    report["schmidt_number"] = spec.schmidt_number
    formats.write_json(out.path("schmidt.json"), report["schmidt"])
    report["seconds"] = time.perf_counter() - t0


def cmd_ring(args, cfg: Config, out: Outputs, report: dict):
    p = cfg.params
    k_ring = ring_wavevector(p)
    half = args.extent if args.extent else 1.5 * k_ring
    ax = np.linspace(-half, half, args.points)
    m = ring_map(p, ax, ax, oversample=args.oversample)
    formats.write_map_csv(out.path("ring.csv"), m, ax, ax, "k_y", "k_x")
    formats.write_pgm(out.path("ring.pgm"), m)
    c = args.points // 2
    radial = np.linspace(0.0, half, 4 * args.points)
    along_x = ring_map(p, radial, [0.0])[0]
    along_y = ring_map(p, [0.0], radial)[:, 0]
    report.update(
        k_ring=k_ring,
        bin_width=float(ax[1] - ax[0]),
        max=float(m.max()),
        centre_fraction=float(m[c, c] / m.max()),
        radial_peak_x=float(radial[np.argmax(along_x)]),
        radial_peak_y=float(radial[np.argmax(along_y)]),
        radial_integral_x_over_y=float(along_x.sum() / along_y.sum()),
        peak_x_over_y=float(along_x.max() / along_y.max()),
    )


def cmd_simulate(args, cfg: Config, out: Outputs, report: dict):
    sim = cfg.simulation
    changes = {}
    for flag, key in (
        ("frames", "n_frames"),
        ("eta", "efficiency"),
        ("chi", "pair_prob"),
        ("temporal_modes", "temporal_modes"),
        ("dark_rate", "dark_count_rate"),
    ):
        v = getattr(args, flag)
        if v is not None:
            changes[key] = v
    if "efficiency" in changes and "pair_prob" not in changes and changes["efficiency"] > 0:
        mean = cfg.document["simulation"]["mean_photons"]
        changes["pair_prob"] = mean / (2.0 * changes.get("temporal_modes", sim.temporal_modes) * changes["efficiency"])
    sim = sim.with_(**changes)
    t0 = time.perf_counter()
    sampler = build_pair_sampler(amplitude_grid(cfg.params, cfg.grid))
    target = Path(args.out) if args.out else out.dir / "frames.bpfr"
    out.files.append(target)
    with formats.FrameWriter.for_grid(target, cfg.grid, sim.seed) as writer:
        totals: SimulationTotals = run_simulation(sim, sampler, writer, threads=_threads(args))
    n = max(totals.frames, 1)
    mean = (totals.events_signal + totals.events_idler) / n
    report.update(
        simulation=sim.to_dict(),
        totals=totals.to_dict(),
        mean_photons_per_frame=mean,
        mean_photons_error=math.sqrt(mean / n),
        expected_mean_photons=2 * sim.expected_singles,
        frames_file=target.name if target.parent.resolve() == out.dir.resolve() else str(target),
        seconds=time.perf_counter() - t0,
    )
    print(
        f"frames={totals.frames} signal={totals.events_signal} idler={totals.events_idler} "
        f"mean/frame={mean:.5f}+-{math.sqrt(mean / n):.5f}"
    )


def analyze_accumulator(acc: corr.CorrelationAccumulator, cfg: Config) -> tuple[dict, corr.CorrelationMaps]:
    """Scalar results of an accumulated stream plus its maps."""
    maps = corr.correlation_maps(acc, cfg.analysis["subregions"])
    lam_plus = 2.0 * cfg.params.degenerate_wavelength_nm
    res: dict = {"frames": acc.n_frames, "errors": [], "warnings": []}
    g2c, g2c_err = maps.g2_sum.value_at(0.0, lam_plus)
    res["g2_center"] = {"value": g2c, "error": g2c_err}
    try:
        pk, pk_err, idx = maps.g2_sum.peak()
        res["g2_peak"] = {"value": pk, "error": pk_err, "k_plus": float(maps.g2_sum.k_plus[idx[0]]),
                          "lambda_plus": float(maps.g2_sum.lambda_plus[idx[1]])}
    except ValueError as exc:
        res["g2_peak"] = None
        res["warnings"].append(f"g2 peak: {exc}")
    try:
        ms = corr.mode_sizes(maps.g2_sum, lam_plus, 0.0, baseline=cfg.analysis["fit_baseline"])
        res["mode_sizes"] = ms.to_dict()
    except FitError as exc:
        res["mode_sizes"] = None
        res["errors"].append(f"mode-size fit: {exc}")
    try:
        eta, err = corr.efficiency_estimate(acc)
        res["efficiency"] = {"value": eta, "error": err}
    except ValueError as exc:
        res["efficiency"] = None
        res["errors"].append(str(exc))
    for arm in ("signal", "idler"):
        try:
            g, e = corr.autocorrelation(acc, arm)
            res[f"autocorrelation_{arm}"] = {"value": g, "error": e, "classical_bound_ok": g <= 2 + 5 * e}
        except ValueError as exc:
            res[f"autocorrelation_{arm}"] = None
            res["errors"].append(str(exc))
    return res, maps


def cmd_analyze(args, cfg: Config, out: Outputs, report: dict):
    t0 = time.perf_counter()
    hdr = formats.read_frame_header(args.frames_file)
    if (hdr["n_k"], hdr["n_lambda"]) != (cfg.grid.n_k, cfg.grid.n_lambda):
        raise ValueError(
            f"frame file grid {hdr['n_k']}x{hdr['n_lambda']} does not match configured "
            f"{cfg.grid.n_k}x{cfg.grid.n_lambda}"
        )
    acc = corr.CorrelationAccumulator(cfg.grid)
    for batch in formats.read_frames(args.frames_file):
        acc.ingest_batch(batch)
    res, maps = analyze_accumulator(acc, cfg)
    report["errors"].extend(res.pop("errors"))
    report.update(res)
    g = cfg.grid
    _panels("kk", maps.cov_kk, g.k_axis("signal"), g.k_axis("idler"), out, ("k_s", "k_i"))
    _panels("ll", maps.cov_ll, g.lambda_axis("signal"), g.lambda_axis("idler"), out, ("lambda_s", "lambda_i"))
    g2 = maps.g2_sum
    formats.write_map_csv(out.path("g2_sum.csv"), g2.values, g2.k_plus, g2.lambda_plus, "k_plus", "lambda_plus")
    formats.write_pgm(out.path("g2_sum.pgm"), g2.values)
    formats.write_map_csv(
        out.path("g2_sum_contributors.csv"), g2.contributors, g2.k_plus, g2.lambda_plus, "k_plus", "lambda_plus"
    )
    formats.write_json(out.path("analysis.json"), res)
    report["seconds"] = time.perf_counter() - t0


def _pearson(a: np.ndarray, b: np.ndarray) -> float:
    a = a.ravel() - a.mean()
    b = b.ravel() - b.mean()
    den = math.sqrt(float(a @ a) * float(b @ b))
    return float(a @ b) / den if den > 0 else float("nan")


def compare_panels(theory_dir: Path, exp_dir: Path, threshold: float = 0.9, mass_fraction: float = 0.1) -> dict:
    """Pearson correlation of every kk_/ll_ panel present in both directories.

    A panel counts as matched when its theory mass is at least
    ``mass_fraction`` of the largest panel of its family.
    """
    names = sorted(p.name for p in theory_dir.glob("[kl][kl]_s*_i*.csv"))
    if not names:
        raise FileNotFoundError(f"no theory panels in {theory_dir}")
    panels = {}
    for name in names:
        t, tr, tc = formats.read_map_csv(theory_dir / name)
        ep = exp_dir / name
        if not ep.exists():
            raise FileNotFoundError(f"experiment panel {name} missing in {exp_dir}")
        e, er, ec = formats.read_map_csv(ep)
        if t.shape != e.shape or not (np.allclose(tr, er) and np.allclose(tc, ec)):
            raise ValueError(f"panel {name}: theory and experiment grids differ")
        panels[name] = (t.filled(0.0), e.filled(0.0))
    result = {"panels": {}, "threshold": threshold, "mass_fraction": mass_fraction}
    for fam in ("kk", "ll"):
        fam_names = [n for n in names if n.startswith(fam)]
        if not fam_names:
            continue
        top = max(panels[n][0].sum() for n in fam_names)
        for n in fam_names:
            t, e = panels[n]
            result["panels"][n[:-4]] = {
                "correlation": _pearson(t, e),
                "matched": bool(t.sum() >= mass_fraction * top),
                "theory_mass": float(t.sum()),
            }
    matched = [v["correlation"] for v in result["panels"].values() if v["matched"]]
    result["matched_count"] = len(matched)
    result["min_matched_correlation"] = min(matched) if matched else None
    result["pass"] = bool(matched) and all(c >= threshold for c in matched)
    return result


def cmd_report(args, cfg: Config, out: Outputs, report: dict):
    res = compare_panels(
        Path(args.theory), Path(args.experiment), cfg.analysis["match_threshold"], cfg.analysis["match_mass_fraction"]
    )
    report.update(res)
    formats.write_json(out.path("comparison.json"), res)
    if not res["pass"]:
        report["errors"].append(
            f"matched-panel correlation below {res['threshold']}: min {res['min_matched_correlation']}"
        )


COMMANDS = {
    "model": cmd_model,
    "ring": cmd_ring,
    "simulate": cmd_simulate,
    "analyze": cmd_analyze,
    "schmidt": cmd_schmidt,
    "report": cmd_report,
}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON configuration file (defaults when omitted)")
    common.add_argument("--set", action="append", metavar="KEY=VALUE", help="override, e.g. pump.waist_um=80")
    common.add_argument("--threads", type=int, help="worker threads (env BIPHOTON_THREADS)")
    common.add_argument("--seed", type=int, help="simulation seed")
    common.add_argument("--out-dir", help="output directory (default: out/<command>)")

    ap = argparse.ArgumentParser(prog="biphoton", description=__doc__.splitlines()[0])
    sub = ap.add_subparsers(dest="command", required=True)
    m = sub.add_parser("model", parents=[common], help="amplitude grid, theory panels, Schmidt number")
    m.add_argument("--separable-scan", action="store_true", help="also scan toward the separable limit")
    r = sub.add_parser("ring", parents=[common], help="2-D singles ring at degenerate wavelength")
    r.add_argument("--points", type=int, default=121)
    r.add_argument("--extent", type=float, help="half width of the k window [rad/mm]")
    r.add_argument("--oversample", type=int, default=4, help="sub-samples per pixel and axis")
    s = sub.add_parser("simulate", parents=[common], help="Monte Carlo camera frames")
    s.add_argument("--frames", type=int)
    s.add_argument("--eta", type=float)
    s.add_argument("--chi", type=float)
    s.add_argument("--temporal-modes", type=int)
    s.add_argument("--dark-rate", type=float)
    s.add_argument("--out", help="frame file path (default: <out-dir>/frames.bpfr)")
    a = sub.add_parser("analyze", parents=[common], help="covariance, g2, mode sizes, efficiency")
    a.add_argument("frames_file", metavar="FRAMES", help="BPFR frame file")
    sc = sub.add_parser("schmidt", parents=[common], help="Schmidt spectrum of a grid")
    sc.add_argument("--grid", help="BPAG file (computed from the config when omitted)")
    sc.add_argument("--coefficients", type=int, default=20)
    rp = sub.add_parser("report", parents=[common], help="compare theory and measured panels")
    rp.add_argument("--theory", required=True, help="output directory of 'model'")
    rp.add_argument("--experiment", required=True, help="output directory of 'analyze'")
    return ap


def _inputs(args) -> list[Path]:
    paths = [getattr(args, k, None) for k in ("config", "frames_file", "grid", "theory", "experiment")]
    return [Path(p).resolve() for p in paths if p]


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    out_dir = Path(args.out_dir or Path("out") / args.command)
    report: dict = {"command": args.command, "errors": []}
    code = 1
    try:
        resolved = out_dir.resolve()
        targets = [resolved / "report.json", resolved / "manifest.json"]
        if getattr(args, "out", None):
            targets.append(Path(args.out).resolve())
        for p in _inputs(args):
            if p in targets or p == resolved:
                raise ValueError(f"output path {p} collides with an input")
        out = Outputs(out_dir)
    except (OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    try:
        cfg = _config(args)
        COMMANDS[args.command](args, cfg, out, report)
    except (ConfigError, FormatError, FitError, ValueError, OSError, IndexError) as exc:
        report["errors"].append(f"{type(exc).__name__}: {exc}")
    except Exception as exc:  # keep report.json well formed on unexpected failures
        report["errors"].append(f"{type(exc).__name__}: {exc}")
        report["traceback"] = traceback.format_exc()
    # wall-clock figures vary run to run; keep them out of the artifacts
    timing = {k: report.pop(k) for k in list(report) if k == "seconds" or k.endswith("_seconds")}
    if timing:
        print("timing: " + " ".join(f"{k}={v:.3f}" for k, v in sorted(timing.items())))
    try:
        report["artifacts"] = sorted(out.manifest())
        formats.write_json(out.dir / "report.json", report)
        formats.write_json(out.dir / "manifest.json", out.manifest())
    except OSError as exc:
        report["errors"].append(f"writing report: {exc}")
    for e in report["errors"]:
        print(f"error: {e}", file=sys.stderr)
    code = 0 if not report["errors"] else 1
    return code


if __name__ == "__main__":
    sys.exit(main())
