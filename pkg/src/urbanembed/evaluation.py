"""Downstream evaluation: region clustering and popularity regression.

Everything is implemented on numpy directly (k-means++, NMI/ARI, coordinate
descent Lasso, K-fold CV) so the numbers do not depend on a particular
machine-learning library version.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .errors import ContractError, ShapeError
from .ingest import RegionRegistry, _write, write_geojson
from .seeding import substream

DEFAULT_LAMBDAS = np.logspace(-4, 1, 13)


# -- k-means -----------------------------------------------------------------
@dataclass
class KMeansResult:
    labels: np.ndarray
    centers: np.ndarray
    objective: float
    history: list[float]  # objective after each assignment step of the winning restart
    restart: int


def _sq_dist(x: np.ndarray, centers: np.ndarray) -> np.ndarray:
    d = (x * x).sum(1)[:, None] - 2.0 * x @ centers.T + (centers * centers).sum(1)[None, :]
    return np.maximum(d, 0.0)


def kmeans_plus_plus(x: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    n = x.shape[0]
    chosen = [int(rng.integers(n))]
    closest = _sq_dist(x, x[chosen])[:, 0]
    for _ in range(1, k):
        total = closest.sum()
        if total > 0:
            idx = int(rng.choice(n, p=closest / total))
        else:  # every point coincides with a centre already
            free = np.setdiff1d(np.arange(n), chosen)
            idx = int(rng.choice(free))
        chosen.append(idx)
        closest = np.minimum(closest, _sq_dist(x, x[idx:idx + 1])[:, 0])
    return x[chosen].copy()


def _lloyd(x: np.ndarray, centers: np.ndarray, max_iter: int) -> tuple[np.ndarray, np.ndarray, list[float]]:
    k = centers.shape[0]
    labels = None
    history: list[float] = []
    for _ in range(max_iter):
        d = _sq_dist(x, centers)
        new = d.argmin(axis=1)
        history.append(float(d[np.arange(len(x)), new].sum()))
        if labels is not None and np.array_equal(new, labels):
            break
        labels = new
        for c in range(k):
            members = labels == c
            if members.any():
                centers[c] = x[members].mean(axis=0)
            else:
                # re-seed at the point worst served by its current centre
                far = int(d[np.arange(len(x)), labels].argmax())
                centers[c] = x[far]
                labels[far] = c
                d[far] = 0.0
    return labels, centers, history


def kmeans(x, k: int, seed: int = 0, restarts: int = 10, max_iter: int = 300) -> KMeansResult:
    """Lloyd's algorithm from k-means++ seeds; the best of ``restarts`` runs wins."""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2:
        raise ShapeError(f"k-means expects a 2-d matrix, got shape {x.shape}")
    n = x.shape[0]
    if not 1 <= k <= n:
        raise ContractError(f"k={k} must lie between 1 and the number of points {n}")
    rng = substream(seed, "kmeans")
    best = None
    for r in range(restarts):
        labels, centers, history = _lloyd(x, kmeans_plus_plus(x, k, rng), max_iter)
        objective = float(((x - centers[labels]) ** 2).sum())
        if best is None or objective < best.objective:
            best = KMeansResult(labels, centers, objective, history, r)
    return best


# -- agreement metrics ------------------------------------------------------
def _contingency(a, b) -> np.ndarray:
    a, b = np.asarray(a), np.asarray(b)
    if a.shape != b.shape or a.ndim != 1:
        raise ShapeError(f"label vectors must be 1-d and equal length, got {a.shape} and {b.shape}")
    _, ia = np.unique(a, return_inverse=True)
    _, ib = np.unique(b, return_inverse=True)
    table = np.zeros((ia.max() + 1, ib.max() + 1)) if len(a) else np.zeros((0, 0))
    np.add.at(table, (ia, ib), 1.0)
    return table


def _entropy(counts: np.ndarray) -> float:
    p = counts[counts > 0] / counts.sum()
    return float(-(p * np.log(p)).sum())


def nmi(a, b) -> float:
    """Mutual information over the geometric mean of the two entropies (0 when either is 0)."""
    table = _contingency(a, b)
    n = table.sum()
    if n == 0:
        return 0.0
    ha, hb = _entropy(table.sum(1)), _entropy(table.sum(0))
    if ha == 0.0 or hb == 0.0:
        return 0.0
    p = table / n
    outer = np.outer(p.sum(1), p.sum(0))
    nz = p > 0
    mi = float((p[nz] * np.log(p[nz] / outer[nz])).sum())
    return float(min(max(mi / np.sqrt(ha * hb), 0.0), 1.0))


def _pairs(x):
    return x * (x - 1) / 2.0


def ari(a, b) -> float:
    """Adjusted Rand index from pair counts.

    Pair counts are integers, so the expression is rearranged to need a
    single division: ``(I - S_a S_b / P) / ((S_a + S_b) / 2 - S_a S_b / P)``
    multiplied through by ``2P``.
    """
    table = _contingency(a, b)
    total = _pairs(table.sum())
    index = _pairs(table).sum()
    sa, sb = _pairs(table.sum(1)).sum(), _pairs(table.sum(0)).sum()
    num = 2.0 * index * total - 2.0 * sa * sb
    den = (sa + sb) * total - 2.0 * sa * sb
    if den == 0:
        return 1.0
    return float(num / den)


@dataclass
class ClusteringResult:
    assignment: np.ndarray
    objective: float
    nmi: float
    ari: float
    k: int
    seed: int


def evaluate_clustering(embedding, labels, k: int = 12, seed: int = 0, restarts: int = 10) -> ClusteringResult:
    embedding = np.asarray(embedding, dtype=np.float64)
    labels = np.asarray(labels)
    if embedding.shape[0] != len(labels):
        raise ShapeError(f"{embedding.shape[0]} embeddings but {len(labels)} labels")
    res = kmeans(embedding, k, seed=seed, restarts=restarts)
    return ClusteringResult(res.labels, res.objective, nmi(labels, res.labels), ari(labels, res.labels), k, seed)


# -- Lasso -------------------------------------------------------------------
@dataclass
class LassoModel:
    coef: np.ndarray
    intercept: float
    sweeps: int
    objective_history: list[float]  # standardised objective after each sweep
    converged: bool = True

    def predict(self, x) -> np.ndarray:
        return np.asarray(x, dtype=np.float64) @ self.coef + self.intercept


def soft_threshold(z, lam):
    return np.sign(z) * np.maximum(np.abs(z) - lam, 0.0)


def _coordinate_pass(coords, beta, gb, gram, c, diag, lam) -> float:
    """One cyclic pass over ``coords``; returns the largest coefficient move."""
    biggest = 0.0
    for j in coords:
        old = beta[j]
        rho = c[j] - gb[j] + diag[j] * old
        new = (rho - lam if rho > lam else rho + lam if rho < -lam else 0.0) / diag[j]
        if new != old:
            gb += gram[:, j] * (new - old)
            beta[j] = new
            biggest = max(biggest, abs(new - old))
    return biggest


def _orthant_step(active, beta, gb, gram, c, lam, objective) -> None:
    """Move towards the minimiser of the quadratic on the current sign orthant.

    With the signs ``s`` of the active coefficients fixed, the Lasso
    objective is the smooth quadratic whose stationary point solves
    ``G_AA b = c_A - lam * s_A``. The step goes straight there, or stops where
    the first coefficient reaches zero (that coefficient leaves the active
    set). Along the segment the quadratic only decreases, and the step is
    undone in the rare case rounding says otherwise. This spares coordinate
    descent its slow crawl on nearly collinear designs.
    """
    if not active:
        return
    cur = np.array([beta[j] for j in active])
    signs = np.sign(cur)
    rhs = np.asarray([c[j] for j in active]) - lam * signs
    target = np.linalg.lstsq(gram[np.ix_(active, active)], rhs, rcond=None)[0]
    step = target - cur
    flips = np.flatnonzero(np.sign(target) != signs)
    t, blocking = 1.0, None
    if len(flips):
        ratios = cur[flips] / (cur[flips] - target[flips])
        k = int(ratios.argmin())
        t, blocking = float(ratios[k]), int(flips[k])
    new = cur + t * step
    if blocking is not None:
        new[blocking] = 0.0
    before = objective()
    saved_gb = gb.copy()
    for j, v in zip(active, new.tolist()):
        beta[j] = v
    gb[:] = gram[:, active] @ new
    if objective() > before:
        for j, v in zip(active, cur.tolist()):
            beta[j] = v
        gb[:] = saved_gb


def lasso_fit(x, y, lam: float, standardize: bool = True, tol: float = 1e-7,
              max_sweeps: int = 100_000, warm_start: np.ndarray | None = None) -> LassoModel:
    """Cyclic coordinate descent on ``(1/2n)||y - X b - b0||^2 + lam ||b||_1``.

    With ``standardize`` the penalty applies to coefficients of the centred,
    unit-variance features; coefficients are mapped back to the original
    scale. Constant columns always get a zero coefficient.

    Updates use the covariance form (``Z^T Z / n`` is formed once). After a
    full sweep, passes run over the nonzero coefficients only until they
    settle, then another full sweep checks the rest; every pass is a set of
    exact coordinate minimisations, so the objective never increases. Stops
    when a full sweep moves no coefficient by more than ``tol``.
    ``warm_start`` takes coefficients on the original scale.
    """
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.ndim != 2 or x.shape[0] != y.shape[0]:
        raise ShapeError(f"design {x.shape} does not match target {y.shape}")
    n, p = x.shape
    if n < 2:
        raise ContractError("lasso needs at least two samples")
    mu = x.mean(axis=0)
    sd = x.std(axis=0)
    live = sd > 1e-12 * np.maximum(1.0, np.abs(mu))
    scale = np.where(live, sd if standardize else 1.0, 1.0)
    z = np.where(live, (x - mu) / scale, 0.0)
    yc = y - y.mean()
    gram = z.T @ z / n
    c = (z.T @ yc / n).tolist()
    diag = np.diag(gram).tolist()
    beta = np.zeros(p) if warm_start is None else np.where(live, np.asarray(warm_start, dtype=np.float64) * scale, 0.0)
    beta_list = beta.tolist()
    gb = gram @ beta
    everything = np.flatnonzero(live).tolist()
    const = float(yc @ yc) / (2 * n)
    history = []

    def objective() -> float:
        b = np.asarray(beta_list)
        return const - float(np.dot(c, b)) + 0.5 * float(b @ gb) + lam * float(np.abs(b).sum())

    sweeps = 0
    converged = False
    while sweeps < max_sweeps:
        sweeps += 1
        moved = _coordinate_pass(everything, beta_list, gb, gram, c, diag, lam)
        history.append(objective())
        if moved < tol:
            converged = True
            break
        active = [j for j in everything if beta_list[j] != 0.0]
        passes = 0
        while sweeps < max_sweeps:
            if passes % 5 == 0:
                _orthant_step([j for j in active if beta_list[j] != 0.0], beta_list, gb, gram, c, lam, objective)
            passes += 1
            sweeps += 1
            moved = _coordinate_pass(active, beta_list, gb, gram, c, diag, lam)
            history.append(objective())
            if moved < tol:
                break
    coef = np.asarray(beta_list) / scale
    intercept = float(y.mean() - mu @ coef)
    return LassoModel(coef, intercept, sweeps, history, converged)


# -- popularity regression ---------------------------------------------------
@dataclass
class RegressionResult:
    mae: float
    rmse: float
    r2: float
    lam: float
    per_fold: list[dict]
    grid_rmse: dict[float, float] = field(default_factory=dict)
    unconverged: int = 0  # fits that hit the sweep cap


def fold_indices(n: int, folds: int, seed: int) -> list[np.ndarray]:
    order = substream(seed, "folds").permutation(n)
    return [np.sort(part) for part in np.array_split(order, folds)]


def _fold_metrics(y_true: np.ndarray, y_pred: np.ndarray) -> dict:
    err = y_true - y_pred
    sst = float(((y_true - y_true.mean()) ** 2).sum())
    sse = float((err ** 2).sum())
    # a constant test fold has no variance to explain; count it as no skill
    r2 = 1.0 - sse / sst if sst > 0 else 0.0
    return {"mae": float(np.abs(err).mean()), "rmse": float(np.sqrt((err ** 2).mean())), "r2": r2}


def evaluate_popularity(embedding, y, lambdas=None, seed: int = 0, folds: int = 5,
                        log1p: bool = False, max_sweeps: int = 1000) -> RegressionResult:
    """Grid-searched Lasso under seeded K-fold CV.

    The fold split is drawn once and shared by every lambda. The lambda with
    the lowest mean RMSE wins and its mean fold metrics are reported (in the
    log1p space when ``log1p`` is set).

    With more features than training rows, the weakest penalties make
    coordinate descent crawl; ``max_sweeps`` bounds the work per fit and the
    result then carries the last iterate (see ``RegressionResult.unconverged``).
    """
    x = np.asarray(embedding, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.shape[0] != y.shape[0]:
        raise ShapeError(f"{x.shape[0]} embeddings but {y.shape[0]} targets")
    if x.shape[0] < folds:
        raise ContractError(f"{folds}-fold cross-validation needs at least {folds} regions, got {x.shape[0]}")
    if log1p:
        y = np.log1p(y)
    lambdas = DEFAULT_LAMBDAS if lambdas is None else np.asarray(lambdas, dtype=np.float64)
    splits = fold_indices(len(y), folds, seed)
    folds_xy = []
    for test in splits:
        train = np.setdiff1d(np.arange(len(y)), test)
        folds_xy.append((train, test))
    # walk the grid from strong to weak penalty, warm-starting each fold
    order = np.argsort(-lambdas, kind="stable")
    warm = [None] * len(folds_xy)
    unconverged = 0
    results = {}
    for idx in order:
        lam = float(lambdas[idx])
        metrics = []
        for f, (train, test) in enumerate(folds_xy):
            model = lasso_fit(x[train], y[train], lam, warm_start=warm[f], max_sweeps=max_sweeps)
            unconverged += not model.converged
            warm[f] = model.coef
            metrics.append(_fold_metrics(y[test], model.predict(x[test])))
        results[idx] = (lam, metrics)
    best = None
    grid = {}
    for idx in range(len(lambdas)):
        lam, metrics = results[idx]
        mean_rmse = float(np.mean([m["rmse"] for m in metrics]))
        grid[lam] = mean_rmse
        if best is None or mean_rmse < best[0]:
            best = (mean_rmse, lam, metrics)
    _, lam, metrics = best
    mean = {key: float(np.mean([m[key] for m in metrics])) for key in ("mae", "rmse", "r2")}
    return RegressionResult(mean["mae"], mean["rmse"], mean["r2"], lam, metrics, grid, unconverged)


# -- exports -----------------------------------------------------------------
REPORT_KEYS = ("task", "variant", "nmi", "ari", "mae", "rmse", "r2", "lambda", "seed")


def metrics_report(task: str, variant: str, seed: int, clustering: ClusteringResult | None = None,
                   regression: RegressionResult | None = None) -> dict:
    report = dict.fromkeys(REPORT_KEYS)
    report.update(task=task, variant=variant, seed=seed)
    if clustering is not None:
        report.update(nmi=clustering.nmi, ari=clustering.ari)
    if regression is not None:
        report.update(mae=regression.mae, rmse=regression.rmse, r2=regression.r2)
        report["lambda"] = regression.lam
    return report


def write_metrics_json(path, report: dict) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(json.dumps(report, sort_keys=True, indent=2) + "\n")


def write_clusters_csv(path, assignment, registry: RegionRegistry) -> None:
    _write(path, ["region_id", "cluster"], zip(registry.ids, (int(c) for c in assignment)))


def write_cluster_geojson(path, assignment, registry: RegionRegistry, geometries) -> None:
    write_geojson(path, registry, geometries, {"cluster": [int(c) for c in assignment]})
