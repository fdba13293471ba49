"""``mvh`` command-line entry point.

Exit codes:
  0   success, all internal checks passed
  2   invalid spectrum or threshold (spectra)
  3   quadrature did not converge (spectra)
  4   scan correctness check failed (scan-bench)
  5   probe failure (probe)
  6   non-finite activation in the forward pass (embed)
  7   malformed or inconsistent input files / paths
  64  command-line usage error
"""
from __future__ import annotations

import argparse
import math
import os
import sys
import time
from pathlib import Path

import numpy as np

from . import evaluation, formats, freq_probe, spectral, ssm_kernels
from .errors import (InputFormatError, InsufficientGenes, InsufficientGroups, InsufficientOverlap,
                     InvalidSpectrum, InvalidThreshold, LengthMismatch, MVHybridError, NonConvergence,
                     NonFinite, NotRealSpectrum, ShapeMismatch, DomainError)

EXIT_OK = 0
EXIT_SPECTRUM = 2
EXIT_NONCONVERGENCE = 3
EXIT_BENCH = 4
EXIT_PROBE = 5
EXIT_NONFINITE = 6
EXIT_INPUT = 7
EXIT_USAGE = 64

DEFAULT_SEED = 42
RNG_NAME = "numpy.PCG64"
# mirrors backbone.ModelVariant / Scale; kept here so torch loads only for `embed`
VARIANTS = ("vim_einfft", "hydra_einfft", "vit12", "vit24", "hydra_hybrid", "mv_hybrid")
SCALES = ("toy", "small")
# options whose values may start with '-' (negative or complex numbers)
_SIGNED_OPTIONS = ("--eigs", "--residues", "--omega0")


class CommandError(Exception):
    def __init__(self, code: int, message: str):
        super().__init__(message)
        self.code = code


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def rng_info(seed: int) -> dict:
    return {"seed": seed, "generator": RNG_NAME, "numpy": np.__version__}


def make_rng(seed: int, stream: int = 0) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence([seed, stream])))


# --------------------------------------------------------------------------- parsing helpers

def parse_complex_list(text: str) -> list[complex]:
    out = []
    for tok in text.replace(" ", ",").split(","):
        if not tok:
            continue
        try:
            out.append(complex(tok.replace("i", "j")))
        except ValueError:
            raise CommandError(EXIT_SPECTRUM, f"cannot parse {tok!r} as a number") from None
    if not out:
        raise CommandError(EXIT_SPECTRUM, "empty number list")
    return out


def parse_omega_grid(text: str, points: int) -> list[float]:
    """``lo..hi`` is log-spaced (linear if lo is 0); otherwise a comma list."""
    try:
        if ".." in text:
            lo, hi = (float(x) for x in text.split("..", 1))
            if not (0 <= lo < hi):
                raise ValueError
            grid = np.linspace(lo, hi, points) if lo == 0 else np.logspace(math.log10(lo), math.log10(hi), points)
            return [float(x) for x in grid]
        vals = [float(x) for x in text.split(",") if x]
    except ValueError:
        raise CommandError(EXIT_SPECTRUM, f"bad omega0 grid {text!r}") from None
    if not vals or any(v < 0 or not math.isfinite(v) for v in vals):
        raise CommandError(EXIT_SPECTRUM, f"bad omega0 grid {text!r}")
    return vals


def parse_bands(text: str) -> list[tuple[float, float]]:
    bands = []
    for part in text.split(","):
        try:
            lo, hi = (float(x) for x in part.split(":"))
        except ValueError:
            raise CommandError(EXIT_PROBE, f"bad band {part!r}; use lo:hi") from None
        bands.append((lo, hi))
    return bands


def _rewrite_signed(argv: list[str]) -> list[str]:
    out, i = [], 0
    while i < len(argv):
        tok = argv[i]
        if tok in _SIGNED_OPTIONS and i + 1 < len(argv):
            out.append(f"{tok}={argv[i + 1]}")
            i += 2
            continue
        out.append(tok)
        i += 1
    return out


def _writable_dir(path: Path) -> Path:
    try:
        path.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise CommandError(EXIT_INPUT, f"cannot create output directory {path}: {exc}") from None
    if not os.access(path, os.W_OK):
        raise CommandError(EXIT_INPUT, f"output directory {path} is not writable")
    return path


def _require_file(path: str | None, what: str) -> Path:
    if path is None:
        raise CommandError(EXIT_INPUT, f"missing {what} path")
    p = Path(path)
    if not p.is_file():
        raise CommandError(EXIT_INPUT, f"{what} file {p} does not exist")
    return p


# --------------------------------------------------------------------------- spectra

def cmd_spectra(args) -> dict:
    try:
        if args.eigs is not None:
            eigs = parse_complex_list(args.eigs)
            residues = parse_complex_list(args.residues) if args.residues else [1.0] * len(eigs)
            G = spectral.TransferFunction(eigs, residues, args.feedthrough)
        else:
            if args.init is None:
                raise CommandError(EXIT_USAGE, "give --eigs or --init with --order")
            init = spectral.EigenInit(spectral.InitScheme(args.init), args.order)
            residues = parse_complex_list(args.residues) if args.residues else [1.0] * args.order
            G = spectral.build_init(init, residues, args.feedthrough)
    except (InvalidSpectrum, LengthMismatch, DomainError, ValueError) as exc:
        raise CommandError(EXIT_SPECTRUM, f"invalid spectrum: {exc}") from None
    if G.order == 0:
        raise CommandError(EXIT_SPECTRUM, "spectrum is empty")
    omegas = parse_omega_grid(args.omega0, args.points)
    wmax = float(np.max(np.abs(G.eigenvalues.imag)))
    if not G.is_real_spectrum and min(omegas) <= wmax:
        raise CommandError(EXIT_SPECTRUM, f"omega0 {min(omegas)} must exceed max |Im a| = {wmax:g} "
                                          "for a complex spectrum")
    out = _writable_dir(Path(args.out))
    t0 = time.perf_counter()
    try:
        records = spectral.tv_report(G, omegas, args.rel_tol, args.max_panels)
        modal = [spectral.modal_total_variation(G, spectral.FrequencyInterval(w), args.rel_tol, args.max_panels)
                 for w in omegas]
    except NonConvergence as exc:
        raise CommandError(EXIT_NONCONVERGENCE, f"quadrature did not converge: {exc}") from None
    mags = np.abs(G.eigenvalues)
    sweep_w = np.logspace(math.log10(mags.min()) - 2, math.log10(mags.max()) + 3, args.sweep_points)
    sweep = spectral.frequency_sweep(G, sweep_w)
    formats.atomic_write(out / "sweep.csv", formats.matrix_csv(("omega", "magnitude", "derivative_magnitude"), sweep))
    rows = []
    for rec, m in zip(records, modal):
        row = rec.as_dict()
        row["modal_quadrature"] = m
        if rec.exact_real:
            row["approx_exact_ratio"] = rec.approx_real / rec.exact_real
        rows.append(row)
    payload = {
        "system": {"eigenvalues": [[z.real, z.imag] for z in G.eigenvalues],
                   "residues": [[z.real, z.imag] for z in G.residues], "feedthrough": G.feedthrough},
        "rel_tol": args.rel_tol,
        "records": rows,
        "timing": {"seconds": time.perf_counter() - t0},
    }
    formats.atomic_write(out / "tv.json", formats.dumps_json(payload))
    return payload


# --------------------------------------------------------------------------- scan-bench

def cmd_scan_bench(args) -> dict:
    if args.seq_len < 1 or args.state_dim < 1:
        raise CommandError(EXIT_USAGE, "seq-len and state-dim must be positive")
    chunks = [int(c) for c in args.chunks.split(",")]
    if any(c < 1 for c in chunks):
        raise CommandError(EXIT_USAGE, "chunk sizes must be positive")
    rng = make_rng(args.seed)
    lam = np.arange(1, args.state_dim + 1, dtype=float)
    ssm = ssm_kernels.DiscreteSSM.from_continuous(-lam, np.ones(args.state_dim), rng.normal(size=args.state_dim),
                                                  d=float(rng.normal()), delta=args.delta)
    u = rng.normal(size=args.seq_len)
    ref = ssm_kernels.scan_sequential(ssm, u)
    scale = max(float(np.max(np.abs(ref))), np.finfo(float).tiny)
    checks = []
    for c in chunks:
        y = ssm_kernels.scan_parallel(ssm, u, c, args.workers)
        if args.fault_inject:
            y = y.copy()
            y[-1] += 1e-3 * scale
        err = float(np.max(np.abs(y - ref)) / scale)
        checks.append({"chunk": c, "max_rel_err": err, "ok": err <= 1e-6})
    if not all(ch["ok"] for ch in checks):
        bad = [ch["chunk"] for ch in checks if not ch["ok"]]
        raise CommandError(EXIT_BENCH, f"parallel scan disagrees with sequential for chunks {bad}; not timing")
    def timed(kernel, chunk, run):
        t0 = time.perf_counter()
        for _ in range(args.repeats):
            run()
        dt = (time.perf_counter() - t0) / args.repeats
        return {"kernel": kernel, "seq_len": args.seq_len, "state_dim": args.state_dim, "chunk": chunk,
                "seconds": dt, "tokens_per_second": args.seq_len / dt if dt > 0 else None}

    runs = [timed("parallel", c, lambda c=c: ssm_kernels.scan_parallel(ssm, u, c, args.workers)) for c in chunks]
    runs.append(timed("sequential", None, lambda: ssm_kernels.scan_sequential(ssm, u)))
    timing = {"workers": ssm_kernels.resolve_workers(args.workers), "runs": runs}
    payload = {"seq_len": args.seq_len, "state_dim": args.state_dim, "delta": args.delta,
               "rng": rng_info(args.seed), "checks": checks, "timing": timing}
    if args.out:
        out = Path(args.out)
        _writable_dir(out.parent)
        formats.atomic_write(out, formats.dumps_json(payload))
    else:
        sys.stdout.write(formats.dumps_json(payload))
    return payload


# --------------------------------------------------------------------------- probe

def cmd_probe(args) -> dict:
    out = _writable_dir(Path(args.out))
    t0 = time.perf_counter()
    try:
        inits = [spectral.EigenInit(spectral.InitScheme(name.strip()), args.order) for name in args.inits.split(",")]
        bands = parse_bands(args.bands) if args.bands else list(freq_probe.default_bands(inits[0].magnitudes()))
        cells = freq_probe.bias_sweep(inits, bands, args.seeds, args.ridge, args.seq_len, args.dt, args.workers)
    except (MVHybridError, ValueError) as exc:
        raise CommandError(EXIT_PROBE, f"probe failed: {exc}") from None
    summary = freq_probe.summarize_sweep(cells)
    # per-seed comparison of the highest band against the lowest
    if len(bands) >= 2:
        lo_band, hi_band = min(bands), max(bands)
        for entry in summary["cells"]:
            by = {(c.band, c.seed): c.rmse for c in cells if c.init == entry["init"] and c.order == entry["N"]}
            wins = sum(by[(hi_band, s)] > by[(lo_band, s)] for s in range(args.seeds))
            entry["seeds_high_worse"] = wins
    formats.atomic_write(out / "probe.csv", freq_probe.sweep_csv(cells))
    payload = {**summary, "seeds": args.seeds, "ridge": args.ridge, "seq_len": args.seq_len, "dt": args.dt,
               "timing": {"seconds": time.perf_counter() - t0}}
    formats.atomic_write(out / "probe_summary.json", formats.dumps_json(payload))
    return payload


# --------------------------------------------------------------------------- embed

def _load_images(directory: Path, size: int) -> np.ndarray:
    files = sorted(p for p in directory.iterdir() if p.is_file() and not p.name.startswith("."))
    if not files:
        raise CommandError(EXIT_INPUT, f"no image files in {directory}")
    expected = 3 * size * size
    imgs = []
    for p in files:
        raw = p.read_bytes()
        if len(raw) != expected:
            raise CommandError(EXIT_INPUT, f"{p.name}: {len(raw)} bytes, expected {expected} "
                                           f"({size}x{size} RGB, 8-bit)")
        imgs.append(np.frombuffer(raw, dtype=np.uint8).reshape(size, size, 3).transpose(2, 0, 1))
    return np.stack(imgs).astype(np.float64) / 255.0


def cmd_embed(args) -> dict:
    from . import backbone

    cfg = backbone.make_variant(args.variant, args.scale)
    out = Path(args.out)
    _writable_dir(out.parent)
    if args.images:
        d = Path(args.images)
        if not d.is_dir():
            raise CommandError(EXIT_INPUT, f"image directory {d} does not exist")
        images = _load_images(d, cfg.image_size)
    elif args.synthetic:
        images = make_rng(args.seed, 1).random((args.synthetic, 3, cfg.image_size, cfg.image_size))
    else:
        raise CommandError(EXIT_USAGE, "give --images DIR or --synthetic N")
    model = backbone.build_model(cfg, args.seed)
    if args.weights:
        try:
            backbone.load_weights(model, formats.decode_mvw1(_require_file(args.weights, "weights").read_bytes()))
        except (InputFormatError, ShapeMismatch) as exc:
            raise CommandError(EXIT_INPUT, f"bad weights file: {exc}") from None
    t0 = time.perf_counter()
    try:
        emb = np.concatenate([backbone.embed_images(model, images[i:i + args.batch])
                              for i in range(0, len(images), args.batch)])
    except NonFinite as exc:
        raise CommandError(EXIT_NONFINITE, f"forward pass produced non-finite values: {exc}") from None
    formats.atomic_write(out, formats.encode_emb1(emb))
    if args.csv:
        formats.atomic_write(Path(args.csv), formats.matrix_csv([f"e{i}" for i in range(emb.shape[1])], emb))
    if args.export_weights:
        formats.atomic_write(Path(args.export_weights), formats.encode_mvw1(backbone.export_weights(model)))
    sidecar = {"variant": cfg.variant, "scale": args.scale, "rng": rng_info(args.seed), "rows": int(emb.shape[0]),
               "cols": int(emb.shape[1]), "parameters": backbone.count_parameters(model),
               "weights": args.weights, "timing": {"seconds": time.perf_counter() - t0}}
    try:
        sidecar["eigen_report"] = backbone.eigen_report(model).as_dict()
    except MVHybridError as exc:
        sidecar["eigen_report_note"] = f"{type(exc).__name__}: {exc}"
    formats.atomic_write(out.with_name(out.name + ".json"), formats.dumps_json(sidecar))
    return sidecar


# --------------------------------------------------------------------------- eval

def _load_dataset(args) -> evaluation.ExpressionDataset:
    emb_path = _require_file(args.embeddings, "embeddings")
    expr_path = _require_file(args.expression, "expression")
    labels_path = _require_file(args.labels, "labels")
    blob = emb_path.read_bytes()
    if blob[:4] == formats.EMB_MAGIC:
        emb = formats.decode_emb1(blob).astype(float)
    else:
        _, emb = formats.read_matrix_csv(blob.decode("utf-8"), "embeddings")
    genes, expr = formats.read_expression_csv(expr_path.read_text(encoding="utf-8"))
    labels = formats.read_labels_csv(labels_path.read_text(encoding="utf-8"))
    n = len(labels["patch_id"])
    if emb.shape[0] != n or expr.shape[0] != n:
        raise InputFormatError(f"row counts disagree: embeddings {emb.shape[0]}, expression {expr.shape[0]}, "
                               f"labels {n}")
    return evaluation.ExpressionDataset(emb, expr, genes, labels["sample_id"], labels["patient_id"],
                                        labels["study_id"])


def cmd_eval(args) -> dict:
    out = Path(args.out)
    _writable_dir(out.parent)
    t0 = time.perf_counter()
    try:
        if args.synthetic_beta is not None:
            ds = evaluation.synth_batch_dataset(n_studies=args.studies, patches_per_study=args.patches_per_study,
                                                beta=args.synthetic_beta, seed=args.seed)
        else:
            ds = _load_dataset(args)
        if args.hmhvg is not None:
            genes = evaluation.select_hmhvg(ds, args.hmhvg, args.pool)
            panel = {"kind": "hmhvg", "k": args.hmhvg, "pool": args.pool or 2 * args.hmhvg}
        else:
            k = min(args.hvg, ds.n_genes) if args.hvg is not None else min(50, ds.n_genes)
            genes = evaluation.select_hvg(ds, k)
            panel = {"kind": "hvg", "k": k}
        kinds = ["random", "loso"] if args.compare else [args.split]
        reports = {kind: evaluation.evaluate(ds, genes, evaluation.make_split(ds, kind, args.seed, args.folds),
                                             args.alpha) for kind in kinds}
    except (InputFormatError, ShapeMismatch, DomainError, InsufficientGenes, InsufficientOverlap,
            InsufficientGroups, UnicodeDecodeError) as exc:
        raise CommandError(EXIT_INPUT, f"input error: {exc}") from None
    payload = {"panel": panel, "genes": [ds.gene_names[g] for g in genes], "alpha": args.alpha,
               "rng": rng_info(args.seed), "n_patches": ds.n_patches}
    if args.synthetic_beta is not None:
        payload["synthetic_beta"] = args.synthetic_beta
    for report in reports.values():
        if report.mean("mae") ** 2 > report.mean("mse") * (1 + 1e-12) or \
                (len(genes) >= evaluation.TOP_GENES and report.pcc10 < report.pcc - 1e-12):
            raise CommandError(EXIT_INPUT, "metric invariant violated (pcc10 >= pcc, mae^2 <= mse)")
    if args.compare:
        payload["metrics"] = evaluation.comparison_report(reports["random"], reports["loso"])
    else:
        payload["split"] = args.split
        payload["metrics"] = reports[args.split].summary()
    payload["timing"] = {"seconds": time.perf_counter() - t0}
    formats.atomic_write(out, formats.dumps_json(payload))
    return payload


# --------------------------------------------------------------------------- parser

def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="mvh", description="Frequency-bias analysis, hybrid SSM backbone and evaluation toolkit.")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("spectra", help="transfer-function sweep and total-variation comparison")
    s.add_argument("--eigs", help="comma-separated eigenvalues, e.g. -1,-2 or -1+2i")
    s.add_argument("--residues", help="comma-separated residues (default all 1)")
    s.add_argument("--feedthrough", type=float, default=0.0)
    s.add_argument("--init", choices=[m.value for m in spectral.InitScheme])
    s.add_argument("--order", type=int, default=8)
    s.add_argument("--omega0", default="1..1000", help="'lo..hi' (log grid) or comma list")
    s.add_argument("--points", type=int, default=13)
    s.add_argument("--sweep-points", type=int, default=200)
    s.add_argument("--rel-tol", type=float, default=1e-8)
    s.add_argument("--max-panels", type=int, default=spectral.DEFAULT_PANEL_BUDGET,
                   help="quadrature panel budget per integral")
    s.add_argument("--out", default=".")
    s.set_defaults(func=cmd_spectra)

    b = sub.add_parser("scan-bench", help="check then time the chunked parallel scan")
    b.add_argument("--seq-len", type=int, default=4096)
    b.add_argument("--state-dim", type=int, default=16)
    b.add_argument("--chunks", default="1,64")
    b.add_argument("--delta", type=float, default=0.01)
    b.add_argument("--repeats", type=int, default=3)
    b.add_argument("--workers", type=int, default=None, help="thread cap (default MVH_THREADS)")
    b.add_argument("--fault-inject", action="store_true", help="corrupt the parallel output (negative test)")
    b.add_argument("--out")
    b.set_defaults(func=cmd_scan_bench)

    q = sub.add_parser("probe", help="low/high-band least-squares fit sweep")
    q.add_argument("--inits", default="cascaded,uniform")
    q.add_argument("--order", type=int, default=8)
    q.add_argument("--bands", help="lo:hi,lo:hi (default: low and high bands of the first init)")
    q.add_argument("--seeds", type=int, default=100)
    q.add_argument("--ridge", type=float, default=freq_probe.DEFAULT_RIDGE)
    q.add_argument("--seq-len", type=int, default=freq_probe.DEFAULT_SEQ_LEN)
    q.add_argument("--dt", type=float, default=freq_probe.DEFAULT_DT)
    q.add_argument("--workers", type=int, default=1)
    q.add_argument("--out", default=".")
    q.set_defaults(func=cmd_probe)

    e = sub.add_parser("embed", help="embed images with a seeded toy backbone")
    e.add_argument("--variant", required=True, choices=VARIANTS)
    e.add_argument("--scale", default="toy", choices=SCALES)
    e.add_argument("--images", help="directory of raw 8-bit RGB files (H*W*3 bytes each)")
    e.add_argument("--synthetic", type=int, help="number of random images to embed")
    e.add_argument("--weights", help="MVW1 weights file")
    e.add_argument("--export-weights", help="write the model weights as MVW1")
    e.add_argument("--batch", type=int, default=16)
    e.add_argument("--csv", help="also write embeddings as CSV")
    e.add_argument("--out", default="embeddings.emb")
    e.set_defaults(func=cmd_embed)

    v = sub.add_parser("eval", help="ridge evaluation under random and leave-one-study-out splits")
    v.add_argument("--embeddings")
    v.add_argument("--expression")
    v.add_argument("--labels")
    v.add_argument("--synthetic-beta", type=float)
    v.add_argument("--studies", type=int, default=4)
    v.add_argument("--patches-per-study", type=int, default=150)
    panel = v.add_mutually_exclusive_group()
    panel.add_argument("--hvg", type=int)
    panel.add_argument("--hmhvg", type=int)
    v.add_argument("--pool", type=int)
    v.add_argument("--alpha", type=float, default=evaluation.DEFAULT_ALPHA)
    v.add_argument("--folds", type=int, default=10)
    v.add_argument("--split", default="random", choices=[k.value for k in evaluation.SplitKind])
    v.add_argument("--compare", action="store_true", help="run random and LOSO and report the deltas")
    v.add_argument("--out", default="report.json")
    v.set_defaults(func=cmd_eval)

    for sp in (s, b, q, e, v):
        sp.add_argument("--seed", type=int, default=DEFAULT_SEED)
    return p


def main(argv: list[str] | None = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    try:
        args = build_parser().parse_args(_rewrite_signed(argv))
    except SystemExit as exc:
        # --help exits 0; usage errors carry EXIT_USAGE
        return exc.code if isinstance(exc.code, int) else EXIT_USAGE
    if getattr(args, "seed", 0) < 0:
        print("mvh: error: seed must be a nonnegative integer", file=sys.stderr)
        return EXIT_USAGE
    try:
        args.func(args)
    except CommandError as exc:
        print(f"mvh {args.command}: {exc}", file=sys.stderr)
        return exc.code
    except (InvalidThreshold, NotRealSpectrum) as exc:
        print(f"mvh {args.command}: {exc}", file=sys.stderr)
        return EXIT_SPECTRUM
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
