"""Radiomics features, Cox proportional-hazards fitting, indicator
screening, and L1-penalized Cox feature selection.

The Cox machinery uses the Breslow tie convention throughout. The built-in
radiomics set is a compact, self-contained stand-in (shape + first-order
statistics per modality); richer feature tables can be imported from CSV.
"""

from __future__ import annotations

import csv
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import stats as scipy_stats
from scipy.spatial import ConvexHull, QhullError

from .errors import (
    CoverageError,
    DataError,
    DegenerateCovariateError,
    ExtractionError,
    SchemaError,
    SelectionError,
    SeparationError,
)
from .survmath import SurvivalLabel, UndefinedMetricError, c_index
from .volio import ClinicalVector, VolumeGrid

ENTROPY_BINS = 64
P_THRESHOLD = 0.05


# ---------------------------------------------------------------------------
# feature vectors

@dataclass
class FeatureVector:
    names: list[str]
    values: np.ndarray
    source: str = "builtin"

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=float)
        if len(self.names) != len(self.values):
            raise SchemaError("feature names/values length mismatch")
        if len(set(self.names)) != len(self.names):
            raise SchemaError("feature names must be unique")
        if not np.all(np.isfinite(self.values)):
            bad = [n for n, v in zip(self.names, self.values) if not np.isfinite(v)]
            raise DataError(f"non-finite feature values: {bad}")


def _first_order(values: np.ndarray, prefix: str) -> tuple[list[str], list[float]]:
    v = values.astype(np.float64)
    std = float(v.std())
    if std < 1e-12:
        skew = 0.0
        kurt = 0.0
    else:
        skew = float(scipy_stats.skew(v))
        kurt = float(scipy_stats.kurtosis(v))  # excess kurtosis
    vmin, vmax = float(v.min()), float(v.max())
    if vmax > vmin:
        counts, _ = np.histogram(v, bins=ENTROPY_BINS, range=(vmin, vmax))
        p = counts[counts > 0] / counts.sum()
        entropy = float(-(p * np.log2(p)).sum())
    else:
        entropy = 0.0
    names = ["mean", "median", "std", "min", "max", "p10", "p90",
             "skewness", "kurtosis", "energy", "entropy"]
    vals = [
        float(v.mean()), float(np.median(v)), std, vmin, vmax,
        float(np.percentile(v, 10)), float(np.percentile(v, 90)),
        skew, kurt, float((v ** 2).sum()), entropy,
    ]
    return [f"{prefix}_{n}" for n in names], vals


def _surface_area(mask: np.ndarray, spacing) -> float:
    padded = np.pad(mask.astype(np.int8), 1)
    area = 0.0
    for axis in range(3):
        face = float(np.prod([s for a, s in enumerate(spacing) if a != axis]))
        diff = np.abs(np.diff(padded, axis=axis))
        area += face * float(diff.sum())
    return area


def _max_diameter(coords_mm: np.ndarray) -> float:
    pts = coords_mm
    if len(pts) > 4:
        try:
            hull = ConvexHull(pts)
            pts = pts[hull.vertices]
        except QhullError:
            pass  # degenerate geometry (coplanar etc.): brute force below
    diff = pts[:, None, :] - pts[None, :, :]
    return float(np.sqrt((diff ** 2).sum(-1)).max())


def extract_builtin_features(pet: VolumeGrid, ct: VolumeGrid, mask) -> FeatureVector:
    """Shape + per-modality first-order statistics inside the mask.

    Shape: volume (mm^3), surface area estimate (exposed voxel faces, mm^2),
    sphericity, maximum 3D diameter (mm). First-order per modality: mean,
    median, std, min, max, 10th/90th percentile, skewness, kurtosis, energy
    and 64-bin entropy. Constant regions define skewness/kurtosis as 0.
    """
    m = mask.data if isinstance(mask, VolumeGrid) else np.asarray(mask)
    m = m > 0.5
    if not m.any():
        raise ExtractionError("cannot extract features from an empty mask")
    if m.shape != pet.shape or m.shape != ct.shape:
        raise SchemaError(
            f"mask/pet/ct shapes disagree: {m.shape} / {pet.shape} / {ct.shape}"
        )
    spacing = pet.spacing
    voxel_volume = float(np.prod(spacing))
    volume = float(m.sum()) * voxel_volume
    area = _surface_area(m, spacing)
    sphericity = (np.pi ** (1 / 3)) * ((6.0 * volume) ** (2 / 3)) / area

    # surface voxels are enough for the diameter
    from scipy import ndimage
    eroded = ndimage.binary_erosion(m)
    surface = m & ~eroded
    coords = np.argwhere(surface if surface.any() else m).astype(float) * np.asarray(spacing)
    diameter = _max_diameter(coords)

    names = ["shape_volume_mm3", "shape_surface_area_mm2", "shape_sphericity",
             "shape_max_diameter_mm"]
    values = [volume, area, float(sphericity), diameter]
    for grid, prefix in ((pet, "pet"), (ct, "ct")):
        n, v = _first_order(grid.data[m], prefix)
        names += n
        values += v
    return FeatureVector(names, np.asarray(values), source="builtin")


def export_features_csv(feature_map: dict[str, FeatureVector], path) -> None:
    """Write per-patient features; column order taken from the first entry."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    first = next(iter(feature_map.values()))
    with open(path, "w", newline="", encoding="utf-8") as f:
        writer = csv.writer(f)
        writer.writerow(["patient_id"] + first.names)
        for pid, vec in feature_map.items():
            if vec.names != first.names:
                raise SchemaError(f"patient {pid}: inconsistent feature names")
            writer.writerow([pid] + [repr(float(v)) for v in vec.values])


def import_external_features(csv_path) -> dict[str, FeatureVector]:
    """Read a per-patient feature table (patient_id + numeric columns)."""
    csv_path = Path(csv_path)
    if not csv_path.exists():
        raise DataError(f"feature table not found: {csv_path}")
    with open(csv_path, newline="", encoding="utf-8") as f:
        reader = csv.DictReader(f)
        header = reader.fieldnames or []
        if "patient_id" not in header:
            raise SchemaError(f"{csv_path}: missing patient_id column")
        feat_names = [c for c in header if c != "patient_id"]
        out = {}
        for lineno, row in enumerate(reader, start=2):
            pid = row["patient_id"]
            vals = []
            for c in feat_names:
                try:
                    vals.append(float(row[c]))
                except (TypeError, ValueError):
                    raise SchemaError(
                        f"{csv_path}: row {lineno}, column {c}: non-numeric value {row[c]!r}"
                    )
            out[pid] = FeatureVector(list(feat_names), np.asarray(vals), source="external")
    return out


def check_feature_coverage(feature_map: dict[str, FeatureVector], patient_ids) -> None:
    missing = [pid for pid in patient_ids if pid not in feature_map]
    if missing:
        raise CoverageError(f"feature table missing patients: {missing}")


# ---------------------------------------------------------------------------
# Cox proportional hazards

@dataclass
class CoxFit:
    beta: np.ndarray
    se: np.ndarray
    hazard_ratios: np.ndarray
    p_values: np.ndarray
    log_likelihood: float
    ll_null: float
    n_iterations: int


class _CoxData:
    """Pre-sorted covariates plus tie-group bookkeeping for fast repeated
    likelihood/gradient evaluations (rows sorted by descending time, so
    every risk set is a prefix)."""

    def __init__(self, X, labels):
        X = np.asarray(X, dtype=np.float64)
        if X.ndim == 1:
            X = X[:, None]
        times = np.array([lab.time for lab in labels], dtype=np.float64)
        events = np.array([lab.event for lab in labels], dtype=bool)
        if X.shape[0] != len(labels):
            raise DataError(f"{X.shape[0]} covariate rows for {len(labels)} labels")
        order = np.argsort(-times, kind="stable")
        self.X = X[order]
        self.times = times[order]
        self.events = events[order]
        self.n, self.p = self.X.shape

        # last row index of each distinct-time group, restricted to groups
        # containing at least one event (Breslow: tied events share the
        # full risk set at their time)
        boundary = np.nonzero(np.diff(self.times))[0]
        ends = np.append(boundary, self.n - 1)
        starts = np.append(0, boundary + 1)
        counts = np.array(
            [self.events[s : e + 1].sum() for s, e in zip(starts, ends)], dtype=np.float64
        )
        keep = counts > 0
        self.group_ends = ends[keep]
        self.group_counts = counts[keep]
        self.event_rows = np.nonzero(self.events)[0]
        self.event_x_sum = self.X[self.event_rows].sum(axis=0)

    def ll_grad_hess(self, beta, want_hess=True):
        eta = self.X @ beta
        shift = float(eta.max()) if len(eta) else 0.0
        w = np.exp(eta - shift)
        cum_w = np.cumsum(w)
        s0 = cum_w[self.group_ends]
        d = self.group_counts

        ll = float(eta[self.event_rows].sum()) - float((d * (np.log(s0) + shift)).sum())

        cum_wx = np.cumsum(w[:, None] * self.X, axis=0)
        s1 = cum_wx[self.group_ends]
        means = s1 / s0[:, None]
        grad = self.event_x_sum - (d[:, None] * means).sum(axis=0)

        hess = None
        if want_hess:
            outer = w[:, None, None] * (self.X[:, :, None] * self.X[:, None, :])
            s2 = np.cumsum(outer, axis=0)[self.group_ends]
            hess = -(
                np.einsum("g,gij->ij", d / s0, s2)
                - np.einsum("g,gi,gj->ij", d, means, means)
            )
        return ll, grad, hess


def cox_log_likelihood(X, labels, beta) -> float:
    ll, _, _ = _CoxData(X, labels).ll_grad_hess(np.asarray(beta, dtype=float), want_hess=False)
    return ll


def cox_fit(X, labels, tol: float = 1e-8, max_iter: int = 100) -> CoxFit:
    """Newton-Raphson maximization of the Breslow partial likelihood.

    Convergence: max-norm of the Newton step below tol. Step halving keeps
    the likelihood non-decreasing. Standard errors come from the observed
    information; P-values are two-sided Wald.
    """
    data = _CoxData(X, labels)
    n, p = data.n, data.p
    if n <= p:
        raise DataError(f"need more patients than covariates (n={n}, p={p})")
    stds = data.X.std(axis=0)
    if np.any(stds <= 0):
        bad = list(np.where(stds <= 0)[0])
        raise DegenerateCovariateError(f"constant covariate column(s): {bad}")
    if data.events.sum() == 0:
        raise SeparationError("no events: partial likelihood is flat")

    beta = np.zeros(p)
    ll, grad, hess = data.ll_grad_hess(beta)
    ll_null = ll
    for iteration in range(1, max_iter + 1):
        try:
            step = np.linalg.solve(-hess, grad)
        except np.linalg.LinAlgError:
            raise SeparationError("singular information matrix (separation or collinearity)")
        if np.max(np.abs(step)) < tol:
            break
        scale = 1.0
        for _ in range(40):
            candidate = beta + scale * step
            ll_new, grad_new, hess_new = data.ll_grad_hess(candidate)
            if ll_new >= ll - 1e-12:
                break
            scale *= 0.5
        else:
            raise SeparationError("step halving failed to improve the likelihood")
        beta, ll, grad, hess = candidate, ll_new, grad_new, hess_new
    else:
        raise SeparationError(
            f"Newton-Raphson did not converge in {max_iter} iterations "
            "(monotone likelihood / separation?)"
        )

    try:
        cov = np.linalg.inv(-hess)
    except np.linalg.LinAlgError:
        raise SeparationError("singular information matrix at the optimum")
    se = np.sqrt(np.maximum(np.diag(cov), 0.0))
    with np.errstate(divide="ignore"):
        z = np.where(se > 0, beta / se, np.inf)
    p_values = 2.0 * scipy_stats.norm.sf(np.abs(z))
    return CoxFit(
        beta=beta,
        se=se,
        hazard_ratios=np.exp(beta),
        p_values=p_values,
        log_likelihood=ll,
        ll_null=ll_null,
        n_iterations=iteration,
    )


# ---------------------------------------------------------------------------
# clinical indicator screening

def _indicator_blocks(vectors: list[ClinicalVector]) -> dict[str, np.ndarray]:
    """Design block per indicator: continuous -> 1 column; categorical ->
    k-1 dummies (first category is the reference)."""
    first = vectors[0]
    blocks: dict[str, np.ndarray] = {}
    seen: list[str] = []
    for ind in first.indicator:
        if ind not in seen:
            seen.append(ind)
    values = np.stack([v.values for v in vectors])
    for ind in seen:
        cols = [i for i, o in enumerate(first.indicator) if o == ind]
        kind = first.kinds[cols[0]]
        if kind == "categorical" and len(cols) > 1:
            cols = cols[1:]  # drop reference category
        blocks[ind] = values[:, cols]
    return blocks


def _block_p_value(block: np.ndarray, labels, null_ll: float | None = None) -> float:
    """Wald P for single columns, likelihood-ratio P for multi-column blocks."""
    fit = cox_fit(block, labels)
    if block.shape[1] == 1:
        return float(fit.p_values[0])
    lr = 2.0 * (fit.log_likelihood - (null_ll if null_ll is not None else fit.ll_null))
    return float(scipy_stats.chi2.sf(max(lr, 0.0), df=block.shape[1]))


def screen_indicators(
    vectors: list[ClinicalVector],
    labels: list[SurvivalLabel],
    alpha: float = P_THRESHOLD,
) -> list[str]:
    """Two-stage Cox screening: univariate filter then multivariate filter,
    both at significance alpha. Indicators whose fit fails (constant,
    separated...) are dropped with a warning.
    """
    if sum(lab.event for lab in labels) < 2:
        raise DataError("screening needs at least 2 observed events")
    if not vectors:
        return []
    blocks = _indicator_blocks(vectors)

    univariate: list[str] = []
    for ind, block in blocks.items():
        block = block[:, block.std(axis=0) > 0]
        if block.shape[1] == 0:
            warnings.warn(f"indicator {ind}: all columns constant, skipped")
            continue
        blocks[ind] = block
        try:
            p = _block_p_value(block, labels)
        except DataError as exc:
            warnings.warn(f"indicator {ind}: univariate fit failed ({exc}), skipped")
            continue
        if p < alpha:
            univariate.append(ind)

    if not univariate:
        return []
    if len(univariate) == 1:
        return univariate

    full_X = np.hstack([blocks[ind] for ind in univariate])
    try:
        full_fit = cox_fit(full_X, labels)
    except DataError as exc:
        warnings.warn(f"multivariate fit failed ({exc}); keeping univariate survivors")
        return univariate

    retained = []
    col = 0
    for ind in univariate:
        width = blocks[ind].shape[1]
        cols = slice(col, col + width)
        col += width
        if width == 1:
            p = float(full_fit.p_values[cols][0])
        else:
            # LRT against the model without this block
            rest = np.hstack(
                [blocks[o] for o in univariate if o != ind]
            )
            try:
                reduced = cox_fit(rest, labels)
                lr = 2.0 * (full_fit.log_likelihood - reduced.log_likelihood)
                p = float(scipy_stats.chi2.sf(max(lr, 0.0), df=width))
            except DataError as exc:
                warnings.warn(f"indicator {ind}: reduced fit failed ({exc}), dropped")
                continue
        if p < alpha:
            retained.append(ind)
    return retained


# ---------------------------------------------------------------------------
# LASSO-penalized Cox selection

@dataclass
class SelectionResult:
    feature_names: list[str]
    selected_names: list[str]
    coefficients: np.ndarray  # on the standardized scale
    lambda_: float
    cv_c_index: float
    mean: np.ndarray
    std: np.ndarray
    extra: dict = field(default_factory=dict)

    def apply(self, X) -> np.ndarray:
        """Linear risk score for raw (unstandardized) feature rows."""
        Z = (np.asarray(X, dtype=float) - self.mean) / self.std
        return Z @ self.coefficients

    def standardize(self, X) -> np.ndarray:
        return (np.asarray(X, dtype=float) - self.mean) / self.std

    def to_text(self) -> str:
        lines = [
            f"lambda = {self.lambda_!r}",
            f"cv_c_index = {self.cv_c_index!r}",
            f"selected ({len(self.selected_names)}):",
        ]
        for name in self.selected_names:
            i = self.feature_names.index(name)
            lines.append(f"  {name} = {self.coefficients[i]!r}")
        return "\n".join(lines) + "\n"


def _soft_threshold(x, t):
    return np.sign(x) * np.maximum(np.abs(x) - t, 0.0)


def _ista_cox(data: _CoxData, lam, beta0, max_iter=5000, tol=1e-8):
    """Proximal gradient (ISTA with backtracking) on -ll + lam * |beta|_1."""
    beta = beta0.copy()
    f, grad, _ = data.ll_grad_hess(beta, want_hess=False)
    f, grad = -f, -grad
    t = 1.0 / max(data.n, 1)
    for _ in range(max_iter):
        while True:
            candidate = _soft_threshold(beta - t * grad, t * lam)
            delta = candidate - beta
            f_new, grad_new, _ = data.ll_grad_hess(candidate, want_hess=False)
            f_new, grad_new = -f_new, -grad_new
            bound = f + grad @ delta + (delta @ delta) / (2 * t)
            if f_new <= bound + 1e-12:
                break
            t *= 0.5
            if t < 1e-14:
                return beta
        if np.max(np.abs(delta)) < tol:
            return candidate
        beta, f, grad = candidate, f_new, grad_new
        t *= 1.25  # regrow the step; backtracking shrinks it when needed
    return beta


def default_lambda_grid(X, labels, n_points: int = 50) -> np.ndarray:
    """Log-spaced grid from lambda_max (all coefficients zero) down three
    decades, on standardized features."""
    Xz = (np.asarray(X, float) - np.mean(X, axis=0)) / np.maximum(np.std(X, axis=0), 1e-12)
    data = _CoxData(Xz, labels)
    _, grad, _ = data.ll_grad_hess(np.zeros(Xz.shape[1]), want_hess=False)
    lam_max = float(np.max(np.abs(grad)))
    if lam_max <= 0:
        lam_max = 1.0
    return np.geomspace(lam_max, lam_max / 1000.0, n_points)


def lasso_cox_select(
    X,
    labels: list[SurvivalLabel],
    feature_names: list[str] | None = None,
    lambda_grid=None,
    n_folds: int = 5,
    cv_seed: int = 0,
) -> SelectionResult:
    """L1-penalized Cox selection along a descending lambda path with warm
    starts; lambda chosen by K-fold CV maximizing the validation C-index of
    the linear risk score. Features are standardized internally and the
    statistics stored in the result.
    """
    X = np.asarray(X, dtype=np.float64)
    if X.ndim == 1:
        X = X[:, None]
    n, p = X.shape
    if feature_names is None:
        feature_names = [f"f{i}" for i in range(p)]
    if len(feature_names) != p:
        raise SchemaError(f"{len(feature_names)} names for {p} features")
    mean = X.mean(axis=0)
    std = np.maximum(X.std(axis=0), 1e-12)
    Z = (X - mean) / std

    if lambda_grid is None:
        lambda_grid = default_lambda_grid(X, labels)
    lambda_grid = np.asarray(lambda_grid, dtype=float)
    if np.any(np.diff(lambda_grid) > 0):
        raise DataError("lambda grid must be descending")
    if np.any(lambda_grid < 0):
        raise DataError("lambda values must be >= 0")

    def path(train_idx):
        data = _CoxData(Z[train_idx], [labels[i] for i in train_idx])
        betas = []
        beta = np.zeros(p)
        for lam in lambda_grid:
            beta = _ista_cox(data, lam, beta)
            betas.append(beta.copy())
        return betas

    rng = np.random.default_rng(cv_seed)
    perm = rng.permutation(n)
    folds = np.array_split(perm, n_folds)
    scores = np.zeros((n_folds, len(lambda_grid)))
    usable = np.zeros(n_folds, dtype=bool)
    for k, val_idx in enumerate(folds):
        train_idx = np.setdiff1d(perm, val_idx)
        train_labels = [labels[i] for i in train_idx]
        if sum(l.event for l in train_labels) == 0 or len(val_idx) < 2:
            warnings.warn(f"CV fold {k}: no events in training part, skipped")
            continue
        val_labels = [labels[i] for i in val_idx]
        try:
            betas = path(train_idx)
            for j, beta in enumerate(betas):
                risk = Z[val_idx] @ beta
                # higher risk should mean shorter predicted time
                scores[k, j] = c_index(-risk, val_labels)
            usable[k] = True
        except (UndefinedMetricError, DataError) as exc:
            warnings.warn(f"CV fold {k} skipped: {exc}")
    if not usable.any():
        raise SelectionError("no usable CV folds (all censored?)")
    mean_scores = scores[usable].mean(axis=0)
    best_j = int(np.argmax(mean_scores))  # ties resolve to the largest lambda
    best_lambda = float(lambda_grid[best_j])

    full_data = _CoxData(Z, labels)
    beta = np.zeros(p)
    for lam in lambda_grid[: best_j + 1]:
        beta = _ista_cox(full_data, lam, beta)
    selected = [feature_names[i] for i in range(p) if beta[i] != 0.0]
    return SelectionResult(
        feature_names=list(feature_names),
        selected_names=selected,
        coefficients=beta,
        lambda_=best_lambda,
        cv_c_index=float(mean_scores[best_j]),
        mean=mean,
        std=std,
    )
