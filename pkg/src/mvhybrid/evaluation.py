"""Biomarker-prediction protocol: gene panels, splits, ridge readout, metrics."""
from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field
from typing import Callable, Mapping, Sequence

import numpy as np
import scipy.linalg
from sklearn.model_selection import GroupKFold, KFold, LeaveOneGroupOut

from .errors import (DivisionByZero, DomainError, InsufficientGenes, InsufficientGroups,
                     InsufficientOverlap, NumericalFailure, ShapeMismatch)

NORMALIZE_TOTAL = 1e4
DEFAULT_ALPHA = 1.0
TOP_GENES = 10
PCC_METRICS = ("pcc", "pcc10")
ERROR_METRICS = ("mae", "mse")
METRICS = PCC_METRICS + ERROR_METRICS


@dataclass(frozen=True)
class ExpressionDataset:
    embeddings: np.ndarray
    expression: np.ndarray
    gene_names: tuple
    sample_id: tuple
    patient_id: tuple
    study_id: tuple

    def __post_init__(self):
        emb = np.asarray(self.embeddings, dtype=float)
        expr = np.asarray(self.expression, dtype=float)
        if emb.ndim != 2 or expr.ndim != 2:
            raise ShapeMismatch("embeddings and expression must be 2-D")
        n = emb.shape[0]
        for name in ("sample_id", "patient_id", "study_id"):
            labels = tuple(getattr(self, name))
            if len(labels) != n:
                raise ShapeMismatch(f"{name} has {len(labels)} rows, embeddings have {n}")
            object.__setattr__(self, name, labels)
        if expr.shape[0] != n:
            raise ShapeMismatch(f"expression has {expr.shape[0]} rows, embeddings have {n}")
        genes = tuple(str(g) for g in self.gene_names)
        if len(genes) != expr.shape[1]:
            raise ShapeMismatch("gene_names length must equal expression columns")
        if not (np.all(np.isfinite(expr)) and np.all(np.isfinite(emb))):
            raise DomainError("embeddings and expression must be finite")
        if np.any(expr < 0):
            raise DomainError("expression must be nonnegative")
        object.__setattr__(self, "embeddings", emb)
        object.__setattr__(self, "expression", expr)
        object.__setattr__(self, "gene_names", genes)

    @property
    def n_patches(self) -> int:
        return self.embeddings.shape[0]

    @property
    def n_genes(self) -> int:
        return self.expression.shape[1]


# --------------------------------------------------------------------------- gene panels

def log_normalize(expression: np.ndarray, total: float = NORMALIZE_TOTAL) -> np.ndarray:
    """Scale each row to ``total`` counts then ``log1p``; all-zero rows stay zero."""
    expr = np.asarray(expression, dtype=float)
    sums = expr.sum(axis=1, keepdims=True)
    scale = np.divide(total, sums, out=np.zeros_like(sums), where=sums > 0)
    return np.log1p(expr * scale)


def _gene_stats(ds: ExpressionDataset) -> tuple[np.ndarray, np.ndarray]:
    x = log_normalize(ds.expression)
    mean = x.mean(axis=0)
    var = x.var(axis=0)
    # rounding residue of a column that normalisation made constant
    var = np.where(var <= 1e-12 * (1.0 + mean * mean), 0.0, var)
    return mean, var


def _rank(scores: np.ndarray, names: Sequence[str], idx=None) -> list[int]:
    idx = range(len(names)) if idx is None else idx
    return sorted(idx, key=lambda g: (-scores[g], names[g]))


def select_hvg(ds: ExpressionDataset, k: int) -> list[int]:
    """Top-``k`` genes by variance of log-normalised expression, name order on ties."""
    if k > ds.n_genes:
        raise InsufficientGenes(f"asked for {k} genes, dataset has {ds.n_genes}")
    if k < 0:
        raise DomainError("k must be nonnegative")
    _, var = _gene_stats(ds)
    return _rank(var, ds.gene_names)[:k]


def select_hmhvg(ds: ExpressionDataset, k: int, pool: int | None = None) -> list[int]:
    """Top-``k`` by variance among genes in both the top-``pool`` mean and top-``pool`` variance lists."""
    pool = 2 * k if pool is None else pool
    if pool < k:
        raise DomainError(f"pool {pool} must be >= k {k}")
    if k > ds.n_genes:
        raise InsufficientGenes(f"asked for {k} genes, dataset has {ds.n_genes}")
    mean, var = _gene_stats(ds)
    pool = min(pool, ds.n_genes)
    by_mean = set(_rank(mean, ds.gene_names)[:pool])
    by_var = set(_rank(var, ds.gene_names)[:pool])
    both = _rank(var, ds.gene_names, by_mean & by_var)
    if len(both) < k:
        raise InsufficientOverlap(f"only {len(both)} genes in the mean/variance overlap, need {k}")
    return both[:k]


# --------------------------------------------------------------------------- splits

class SplitKind(str, enum.Enum):
    RANDOM = "random"
    LOSO = "loso"
    PATIENT = "patient"


@dataclass(frozen=True)
class SplitPlan:
    kind: SplitKind
    folds: tuple
    k: int | None = None

    def validate(self, n: int) -> None:
        for train, test in self.folds:
            if np.intersect1d(train, test).size:
                raise DomainError("train and test overlap")
            if train.size + test.size > n or (train.size and train.max() >= n) or (test.size and test.max() >= n):
                raise DomainError("fold indices out of range")


def make_split(ds: ExpressionDataset, kind: SplitKind | str, seed: int = 0, k: int = 10) -> SplitPlan:
    kind = SplitKind(kind)
    idx = np.arange(ds.n_patches)
    if kind is SplitKind.RANDOM:
        if ds.n_patches < k:
            raise InsufficientGroups(f"{ds.n_patches} patches cannot form {k} folds")
        splitter = KFold(n_splits=k, shuffle=True, random_state=seed).split(idx)
    elif kind is SplitKind.LOSO:
        groups = np.asarray(ds.study_id, dtype=object).astype(str)
        if np.unique(groups).size < 2:
            raise InsufficientGroups("leave-one-study-out needs at least 2 studies")
        splitter = LeaveOneGroupOut().split(idx, groups=groups)
        k = None
    else:
        groups = np.asarray(ds.patient_id, dtype=object).astype(str)
        if np.unique(groups).size < k:
            raise InsufficientGroups(f"{np.unique(groups).size} patients cannot form {k} folds")
        splitter = GroupKFold(n_splits=k, shuffle=True, random_state=seed).split(idx, groups=groups)
    folds = tuple((np.asarray(tr, dtype=np.intp), np.asarray(te, dtype=np.intp)) for tr, te in splitter)
    return SplitPlan(kind, folds, k)


# --------------------------------------------------------------------------- ridge

@dataclass(frozen=True)
class RidgeModel:
    weights: np.ndarray
    x_mean: np.ndarray
    y_mean: np.ndarray

    def predict(self, x) -> np.ndarray:
        return (np.asarray(x, dtype=float) - self.x_mean) @ self.weights + self.y_mean


def ridge_fit(train_x, train_y, alpha: float = DEFAULT_ALPHA, center: bool = True) -> RidgeModel:
    """``W = (X^T X + alpha I)^{-1} X^T Y`` on centred data, via Cholesky."""
    x = np.asarray(train_x, dtype=float)
    y = np.asarray(train_y, dtype=float)
    if not alpha > 0:
        raise DomainError(f"alpha must be positive, got {alpha}")
    if x.ndim != 2 or x.shape[0] != y.shape[0]:
        raise ShapeMismatch(f"X {x.shape} and Y {y.shape} disagree on rows")
    x_mean = x.mean(axis=0) if center else np.zeros(x.shape[1])
    y_mean = y.mean(axis=0) if center else np.zeros(y.shape[1:])
    xc, yc = x - x_mean, y - y_mean
    gram = xc.T @ xc + alpha * np.eye(x.shape[1])
    try:
        factor = scipy.linalg.cho_factor(gram)
        w = scipy.linalg.cho_solve(factor, xc.T @ yc)
    except (np.linalg.LinAlgError, ValueError) as exc:
        raise NumericalFailure(f"ridge solve failed: {exc}") from exc
    if not np.all(np.isfinite(w)):
        raise NumericalFailure("ridge solve produced non-finite weights")
    return RidgeModel(w, x_mean, y_mean)


# --------------------------------------------------------------------------- metrics

def per_gene_pcc(truth: np.ndarray, pred: np.ndarray) -> np.ndarray:
    """Pearson r per column; 0 where either side has zero variance."""
    t = truth - truth.mean(axis=0)
    p = pred - pred.mean(axis=0)
    tn = np.sqrt((t * t).sum(axis=0))
    pn = np.sqrt((p * p).sum(axis=0))
    denom = tn * pn
    ok = (tn > 0) & (pn > 0)
    out = np.zeros(truth.shape[1])
    out[ok] = (t * p).sum(axis=0)[ok] / denom[ok]
    return np.clip(out, -1.0, 1.0)


@dataclass(frozen=True)
class FoldMetrics:
    per_gene_pcc: np.ndarray
    pcc: float
    pcc10: float
    mae: float
    mse: float


def fold_metrics(truth, pred, top: int = TOP_GENES) -> FoldMetrics:
    truth = np.asarray(truth, dtype=float)
    pred = np.asarray(pred, dtype=float)
    r = per_gene_pcc(truth, pred)
    err = pred - truth
    best = np.sort(r)[::-1][:top]
    return FoldMetrics(r, float(r.mean()), float(best.mean()), float(np.abs(err).mean()), float((err * err).mean()))


@dataclass
class EvalReport:
    folds: list
    kind: str = ""
    genes: list = field(default_factory=list)

    def _values(self, metric: str) -> np.ndarray:
        return np.array([getattr(f, metric) for f in self.folds])

    def mean(self, metric: str) -> float:
        return float(self._values(metric).mean())

    def std(self, metric: str) -> float:
        return float(self._values(metric).std())

    @property
    def pcc(self) -> float:
        return self.mean("pcc")

    @property
    def pcc10(self) -> float:
        return self.mean("pcc10")

    @property
    def mae(self) -> float:
        return self.mean("mae")

    @property
    def mse(self) -> float:
        return self.mean("mse")

    @property
    def per_gene_pcc(self) -> np.ndarray:
        return np.mean([f.per_gene_pcc for f in self.folds], axis=0)

    def summary(self) -> dict:
        return {m: {"mean": self.mean(m), "std": self.std(m)} for m in METRICS}


Fitter = Callable[[np.ndarray, np.ndarray], Callable[[np.ndarray], np.ndarray]]


def ridge_fitter(alpha: float = DEFAULT_ALPHA) -> Fitter:
    return lambda x, y: ridge_fit(x, y, alpha).predict


def evaluate(ds: ExpressionDataset, genes: Sequence[int], plan: SplitPlan, alpha: float = DEFAULT_ALPHA,
             fitter: Fitter | None = None, log1p: bool = True) -> EvalReport:
    """Fit on each fold's train patches and score the test patches.

    Targets are the log-normalised expression of ``genes`` (raw values when
    ``log1p`` is false).  ``fitter`` replaces the ridge readout, e.g. with an
    oracle in tests.
    """
    genes = list(genes)
    if not genes:
        raise InsufficientGenes("empty gene panel")
    plan.validate(ds.n_patches)
    targets = (log_normalize(ds.expression) if log1p else ds.expression)[:, genes]
    fitter = fitter or ridge_fitter(alpha)
    folds = []
    for train, test in plan.folds:
        predict = fitter(ds.embeddings[train], targets[train])
        pred = np.asarray(predict(ds.embeddings[test]), dtype=float)
        folds.append(fold_metrics(targets[test], pred))
    return EvalReport(folds, plan.kind.value, genes)


# --------------------------------------------------------------------------- robustness

@dataclass(frozen=True)
class RobustnessDelta:
    metric: str
    random_value: float
    loso_value: float
    percent_change: float

    def as_dict(self) -> dict:
        return {"random": self.random_value, "loso": self.loso_value, "percent_change": self.percent_change}


def percent_change(metric: str, random_value: float, loso_value: float) -> float:
    """Decrease for correlation metrics, increase for error metrics, in percent."""
    if random_value == 0:
        raise DivisionByZero(f"random-split {metric} is zero")
    if metric in PCC_METRICS:
        return 100.0 * (random_value - loso_value) / random_value
    if metric in ERROR_METRICS:
        return 100.0 * (loso_value - random_value) / random_value
    raise DomainError(f"unknown metric {metric!r}")


def _metric_values(report) -> Mapping[str, float]:
    if isinstance(report, EvalReport):
        return {m: report.mean(m) for m in METRICS}
    return report


def robustness_compare(report_random, report_loso) -> dict[str, RobustnessDelta]:
    """Accepts :class:`EvalReport` objects or plain ``{metric: value}`` mappings."""
    rnd, loso = _metric_values(report_random), _metric_values(report_loso)
    out = {}
    for m in METRICS:
        if m in rnd and m in loso:
            out[m] = RobustnessDelta(m, float(rnd[m]), float(loso[m]), percent_change(m, rnd[m], loso[m]))
    return out


def comparison_report(report_random: EvalReport, report_loso: EvalReport) -> dict:
    deltas = robustness_compare(report_random, report_loso)
    return {m: {"random": {"mean": report_random.mean(m), "std": report_random.std(m)},
                "loso": {"mean": report_loso.mean(m), "std": report_loso.std(m)},
                "percent_change": deltas[m].percent_change} for m in METRICS}


# --------------------------------------------------------------------------- synthetic data

def synth_batch_dataset(n_studies: int = 4, patches_per_study: int = 150, latent_dim: int = 6,
                        beta: float = 0.0, seed: int = 0, n_genes: int = 40, emb_dim: int = 32,
                        emb_noise: float = 1.0, expr_noise: float = 0.5,
                        site_scale: float = 0.3) -> ExpressionDataset:
    """Embeddings and counts sharing latent biology plus a per-study site signal.

    Patch biology ``z`` and study offsets ``s`` are standard normal.
    Embeddings are ``z M_bio + beta s M_site + noise``; log-rates are
    ``z V + beta * site_scale * s U + noise`` and counts are their exponent.
    With ``beta = 0`` the study label carries no information at all.
    """
    if beta < 0:
        raise DomainError("beta must be nonnegative")
    if n_studies < 1 or patches_per_study < 1:
        raise DomainError("need at least one study and one patch per study")
    rng = np.random.Generator(np.random.PCG64(seed))
    m_bio = rng.normal(size=(latent_dim, emb_dim)) / math.sqrt(latent_dim)
    m_site = rng.normal(size=(latent_dim, emb_dim)) / math.sqrt(latent_dim)
    v = rng.normal(size=(latent_dim, n_genes)) / math.sqrt(latent_dim)
    u = rng.normal(size=(latent_dim, n_genes)) / math.sqrt(latent_dim)
    base = rng.normal(1.0, 0.5, size=n_genes)
    offsets = rng.normal(size=(n_studies, latent_dim))
    n = n_studies * patches_per_study
    study = np.repeat(np.arange(n_studies), patches_per_study)
    z = rng.normal(size=(n, latent_dim))
    s = offsets[study]
    emb = z @ m_bio + beta * (s @ m_site) + emb_noise * rng.normal(size=(n, emb_dim))
    log_rate = base + 0.5 * (z @ v) + beta * site_scale * (s @ u) + expr_noise * rng.normal(size=(n, n_genes))
    expr = np.exp(log_rate)
    patients_per_study = 2
    patient = study * patients_per_study + (np.arange(n) % patches_per_study) * patients_per_study // patches_per_study
    return ExpressionDataset(
        embeddings=emb, expression=expr,
        gene_names=tuple(f"G{g:03d}" for g in range(n_genes)),
        sample_id=tuple(f"S{p // 10:04d}" for p in range(n)),
        patient_id=tuple(f"P{p:03d}" for p in patient),
        study_id=tuple(f"ST{i:02d}" for i in study))


def batch_effect_run(beta: float, seed: int, k_random: int = 10, panel: int = 20, alpha: float = DEFAULT_ALPHA,
                     **synth) -> tuple[EvalReport, EvalReport, dict]:
    """Random k-fold vs LOSO on one synthetic draw, HVG panel of size ``panel``."""
    ds = synth_batch_dataset(beta=beta, seed=seed, **synth)
    genes = select_hvg(ds, panel)
    rnd = evaluate(ds, genes, make_split(ds, SplitKind.RANDOM, seed, k_random), alpha)
    loso = evaluate(ds, genes, make_split(ds, SplitKind.LOSO, seed), alpha)
    return rnd, loso, robustness_compare(rnd, loso)
