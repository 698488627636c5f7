"""Bag-level similarity and classification.

Pipelines here turn labeled multi-instance data into predictions: PCA and
standardization fitted on training folds, a distance between bags (closed
form symmetric KL of fitted densities, KDE-based KL, or average Hausdorff),
a citation-style nearest-neighbor vote, and stratified k-fold evaluation.
"""

from __future__ import annotations

import warnings as _warnings
from dataclasses import dataclass, field, replace

import numpy as np
from scipy.spatial.distance import cdist

from .basis import domain_from_data, make_auto_grid, make_basis
from .maxent import (
    BasisGrid,
    MEDensity,
    NewtonConfig,
    densities_from_columns,
    fit_sde_relaxed,
    suff_stats,
    sym_kl,
)
from .solvers import CmenaConfig, LambdaMatrix, fit_cmen, rmde_continuation

DISTANCES = ("kl-cmen", "kl-rmde", "kl-mde", "kl-kde", "hausdorff")


@dataclass(frozen=True)
class Bag:
    bag_id: str
    label: str | None
    instances: np.ndarray  # (n_i, d)

    def __post_init__(self):
        instances = np.asarray(self.instances, dtype=float)
        if instances.ndim != 2 or instances.shape[0] < 1:
            raise ValueError(f"bag {self.bag_id!r} needs a nonempty (n, d) matrix")
        object.__setattr__(self, "instances", instances)


@dataclass(frozen=True)
class LabeledBagDataset:
    bags: tuple[Bag, ...]

    def __post_init__(self):
        bags = tuple(self.bags)
        if not bags:
            raise ValueError("dataset needs at least one bag")
        dims = {b.instances.shape[1] for b in bags}
        if len(dims) != 1:
            raise ValueError(f"bags disagree on dimension: {sorted(dims)}")
        ids = [b.bag_id for b in bags]
        if len(set(ids)) != len(ids):
            raise ValueError("bag ids must be unique")
        object.__setattr__(self, "bags", bags)

    @property
    def d(self) -> int:
        return self.bags[0].instances.shape[1]

    @property
    def labels(self) -> tuple:
        return tuple(b.label for b in self.bags)

    @property
    def bag_ids(self) -> tuple[str, ...]:
        return tuple(b.bag_id for b in self.bags)

    @property
    def class_set(self) -> tuple[str, ...]:
        return tuple(sorted({b.label for b in self.bags if b.label is not None}))

    def pooled_instances(self) -> np.ndarray:
        return np.vstack([b.instances for b in self.bags])

    def subset(self, indices) -> "LabeledBagDataset":
        return LabeledBagDataset(bags=tuple(self.bags[i] for i in indices))


@dataclass(frozen=True)
class PcaModel:
    """Mean and top-r covariance eigenvectors (columns, descending)."""

    mean: np.ndarray  # (d,)
    components: np.ndarray  # (d, r)

    @property
    def r(self) -> int:
        return self.components.shape[1]


def pca_fit(pooled: np.ndarray, r: int) -> PcaModel:
    """Top-r principal directions of the pooled instances.

    Eigenvalues descend; each component's sign is fixed so its
    largest-magnitude entry is positive, making the projection
    reproducible.
    """
    pooled = np.asarray(pooled, dtype=float)
    if pooled.ndim != 2:
        raise ValueError("pooled instances must be (n, d)")
    n, d = pooled.shape
    if r > d:
        raise ValueError(f"r={r} exceeds dimension {d}")
    if r < 1 or n <= r:
        raise ValueError("need r >= 1 and more pooled instances than r")
    mean = pooled.mean(axis=0)
    centered = pooled - mean
    cov = centered.T @ centered / max(n - 1, 1)
    eigvals, eigvecs = np.linalg.eigh(cov)
    order = np.argsort(eigvals)[::-1][:r]
    comps = eigvecs[:, order]
    for j in range(comps.shape[1]):
        peak = np.argmax(np.abs(comps[:, j]))
        if comps[peak, j] < 0:
            comps[:, j] = -comps[:, j]
    return PcaModel(mean=mean, components=comps)


def pca_apply_instances(model: PcaModel, instances: np.ndarray) -> np.ndarray:
    return (np.asarray(instances, dtype=float) - model.mean) @ model.components


def pca_apply(model: PcaModel, dataset: LabeledBagDataset) -> LabeledBagDataset:
    return LabeledBagDataset(
        bags=tuple(
            replace(b, instances=pca_apply_instances(model, b.instances))
            for b in dataset.bags
        )
    )


@dataclass(frozen=True)
class Standardizer:
    mean: np.ndarray
    scale: np.ndarray  # per-axis std, degenerate axes left at 1


def standardize_fit(pooled: np.ndarray) -> Standardizer:
    pooled = np.asarray(pooled, dtype=float)
    mean = pooled.mean(axis=0)
    std = pooled.std(axis=0)
    scale = np.where(std > 1e-12, std, 1.0)
    return Standardizer(mean=mean, scale=scale)


def standardize_apply(std: Standardizer, dataset: LabeledBagDataset) -> LabeledBagDataset:
    return LabeledBagDataset(
        bags=tuple(
            replace(b, instances=(b.instances - std.mean) / std.scale)
            for b in dataset.bags
        )
    )


def _directed_min_sum(a: np.ndarray, b: np.ndarray) -> float:
    """Sum over rows of a of the distance to the nearest row of b,
    chunked so the pairwise block stays within memory."""
    rows_per_chunk = max(1, 32_000_000 // max(b.shape[0], 1))
    total = 0.0
    for start in range(0, a.shape[0], rows_per_chunk):
        block = cdist(a[start : start + rows_per_chunk], b)
        total += float(block.min(axis=1).sum())
    return total


def avg_hausdorff(a: np.ndarray, b: np.ndarray) -> float:
    """Average Hausdorff distance: mean of all directed nearest-point
    distances, symmetric in the two point sets."""
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    if a.ndim != 2 or b.ndim != 2 or a.shape[0] < 1 or b.shape[0] < 1:
        raise ValueError("both bags must be nonempty (n, d) matrices")
    return (_directed_min_sum(a, b) + _directed_min_sum(b, a)) / (
        a.shape[0] + b.shape[0]
    )


@dataclass(frozen=True)
class KdeModel:
    """Gaussian product-kernel density over a bag's instances."""

    points: np.ndarray  # (n, d)
    bandwidths: np.ndarray  # (d,)

    def log_pdf(self, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        n, d = self.points.shape
        const = -np.log(n) - np.log(self.bandwidths).sum() - 0.5 * d * np.log(2 * np.pi)
        out = np.empty(x.shape[0])
        rows_per_chunk = max(1, 2_000_000 // max(n, 1))
        for start in range(0, x.shape[0], rows_per_chunk):
            block = x[start : start + rows_per_chunk]
            z = (block[:, None, :] - self.points[None, :, :]) / self.bandwidths
            expo = -0.5 * (z**2).sum(axis=2)
            shift = expo.max(axis=1)
            out[start : start + block.shape[0]] = (
                shift + np.log(np.exp(expo - shift[:, None]).sum(axis=1)) + const
            )
        return out


def kde_fit(bag: np.ndarray) -> KdeModel:
    """Kernel density with the maximal-smoothing bandwidth
    1.144 * sigma_axis * n^(-1/5) per axis."""
    bag = np.asarray(bag, dtype=float)
    if bag.ndim != 2 or bag.shape[0] < 1:
        raise ValueError("bag must be a nonempty (n, d) matrix")
    n, d = bag.shape
    sigma = bag.std(axis=0, ddof=1) if n > 1 else np.ones(d)
    h = np.maximum(1.144 * sigma * n ** (-0.2), 1e-6)
    return KdeModel(points=bag, bandwidths=h)


def _grid_log_probs(log_pdf: np.ndarray, logw: np.ndarray) -> np.ndarray:
    a = log_pdf + logw
    shift = a.max()
    return a - (shift + np.log(np.exp(a - shift).sum()))


def kde_sym_kl(kde_a: KdeModel, kde_b: KdeModel, grid) -> float:
    """Symmetric KL between two kernel densities by quadrature: both are
    normalized on the shared grid, then the discrete symmetric divergence
    is summed. No closed form exists for KDE pairs."""
    logw = np.log(grid.weights)
    la = _grid_log_probs(kde_a.log_pdf(grid.nodes), logw)
    lb = _grid_log_probs(kde_b.log_pdf(grid.nodes), logw)
    return float(((np.exp(la) - np.exp(lb)) * (la - lb)).sum())


def sym_kl_matrix(densities: list[MEDensity]) -> np.ndarray:
    n = len(densities)
    out = np.zeros((n, n))
    for i in range(n):
        for j in range(i + 1, n):
            out[i, j] = out[j, i] = sym_kl(densities[i], densities[j])
    return out


def _kde_matrix(kdes: list[KdeModel], grid) -> np.ndarray:
    logw = np.log(grid.weights)
    logp = [_grid_log_probs(k.log_pdf(grid.nodes), logw) for k in kdes]
    n = len(kdes)
    out = np.zeros((n, n))
    for i in range(n):
        for j in range(i + 1, n):
            out[i, j] = out[j, i] = float(
                ((np.exp(logp[i]) - np.exp(logp[j])) * (logp[i] - logp[j])).sum()
            )
    return out


def _hausdorff_matrix(bags: list[np.ndarray]) -> np.ndarray:
    n = len(bags)
    out = np.zeros((n, n))
    for i in range(n):
        for j in range(i + 1, n):
            out[i, j] = out[j, i] = avg_hausdorff(bags[i], bags[j])
    return out


def distance_matrix(items, kind: str, grid=None) -> np.ndarray:
    """Pairwise bag distances. kind selects the metric family; items must
    match it (fitted densities for kl-*, KdeModel for kl-kde, instance
    arrays for hausdorff)."""
    if kind in ("kl-cmen", "kl-rmde", "kl-mde"):
        if not all(isinstance(x, MEDensity) for x in items):
            raise ValueError(f"kind {kind!r} expects fitted densities")
        return sym_kl_matrix(list(items))
    if kind == "kl-kde":
        if grid is None or not all(isinstance(x, KdeModel) for x in items):
            raise ValueError("kind 'kl-kde' expects KdeModel items and a grid")
        return _kde_matrix(list(items), grid)
    if kind == "hausdorff":
        arrays = [np.asarray(x, dtype=float) for x in items]
        if any(a.ndim != 2 for a in arrays):
            raise ValueError("kind 'hausdorff' expects (n, d) instance arrays")
        return _hausdorff_matrix(arrays)
    raise ValueError(f"unknown distance kind {kind!r}; expected one of {DISTANCES}")


def kernel_matrix(items, kind: str, gamma: float, grid=None) -> np.ndarray:
    """Bag kernel exp(-gamma * distance); symmetric with unit diagonal."""
    if gamma <= 0:
        raise ValueError("gamma must be positive")
    return np.exp(-gamma * distance_matrix(items, kind, grid=grid))


@dataclass(frozen=True)
class CitationKnnConfig:
    k: int = 5
    k_prime: int = 5

    def __post_init__(self):
        if self.k < 1 or self.k_prime < 0:
            raise ValueError("need k >= 1 and k_prime >= 0")


def citation_knn_precomputed(
    d_train: np.ndarray,
    d_query: np.ndarray,
    labels,
    ids,
    cfg: CitationKnnConfig,
) -> str:
    """Vote of the k nearest references plus the citers of the query.

    References are the k training bags nearest the query (ties broken by
    bag id). Bag t is a citer when the query ranks among t's k_prime
    nearest neighbors over the other training bags plus the query; the
    rank counts strictly closer items, so the outcome does not depend on
    training-bag order. Label ties break by smaller summed voter distance,
    then lexicographically.
    """
    n = len(labels)
    if cfg.k > n:
        raise ValueError(f"k={cfg.k} exceeds the {n} training bags")
    order = sorted(range(n), key=lambda i: (d_query[i], ids[i]))
    voters = [(labels[i], float(d_query[i])) for i in order[: cfg.k]]
    if cfg.k_prime > 0:
        for t in range(n):
            others = np.delete(d_train[t], t)
            closer = int((others < d_query[t]).sum())
            if closer < cfg.k_prime:
                voters.append((labels[t], float(d_query[t])))
    tally: dict[str, list] = {}
    for label, dist in voters:
        entry = tally.setdefault(label, [0, 0.0])
        entry[0] += 1
        entry[1] += dist
    best = min(tally.items(), key=lambda kv: (-kv[1][0], kv[1][1], kv[0]))
    return best[0]


def citation_knn(
    train_items,
    labels,
    query_item,
    cfg: CitationKnnConfig,
    metric,
    ids=None,
) -> str:
    """Classify one query bag given a metric callable over items."""
    n = len(train_items)
    if ids is None:
        ids = [f"{i:06d}" for i in range(n)]
    d_train = np.zeros((n, n))
    for i in range(n):
        for j in range(i + 1, n):
            d_train[i, j] = d_train[j, i] = metric(train_items[i], train_items[j])
    d_query = np.array([metric(query_item, item) for item in train_items])
    return citation_knn_precomputed(d_train, d_query, labels, ids, cfg)


@dataclass(frozen=True)
class PipelineConfig:
    """Everything a classification run needs: preprocessing, distance
    family, basis/grid sizes, and the vote parameters."""

    distance: str = "kl-cmen"
    m: int = 16
    basis_seed: int = 0
    pca_dims: int | None = None
    standardize: bool = True
    margin: float = 0.1
    grid_points: int = 64
    mc_nodes: int = 20_000
    knn: CitationKnnConfig = field(default_factory=CitationKnnConfig)
    cmena: CmenaConfig = field(default_factory=CmenaConfig)
    newton: NewtonConfig = field(default_factory=lambda: NewtonConfig(grad_tol=1e-5))

    def __post_init__(self):
        if self.distance not in DISTANCES:
            raise ValueError(f"distance must be one of {DISTANCES}")


def _preprocess(train: LabeledBagDataset, test: LabeledBagDataset, cfg):
    if cfg.pca_dims is not None:
        pca = pca_fit(train.pooled_instances(), cfg.pca_dims)
        train, test = pca_apply(pca, train), pca_apply(pca, test)
    if cfg.standardize:
        std = standardize_fit(train.pooled_instances())
        train, test = standardize_apply(std, train), standardize_apply(std, test)
    return train, test


def _fit_bag_densities(stats, spec, grid, engine, newton):
    return [fit_sde_relaxed(s, spec, grid, newton, engine=engine)[0] for s in stats]


def _train_densities(train: LabeledBagDataset, spec, grid, engine, cfg):
    stats = [suff_stats(b.instances, spec, b.bag_id) for b in train.bags]
    if cfg.distance == "kl-mde":
        return _fit_bag_densities(stats, spec, grid, engine, cfg.newton)
    hat_densities = _fit_bag_densities(stats, spec, grid, engine, cfg.newton)
    hat = LambdaMatrix(
        data=np.column_stack([d.lam for d in hat_densities]),
        bag_ids=tuple(s.bag_id for s in stats),
    )
    if cfg.distance == "kl-cmen":
        sol, _ = fit_cmen(
            stats, spec, grid, cfg.cmena, cfg.newton, engine=engine, lambda_hat=hat
        )
    else:  # kl-rmde
        sol, _ = rmde_continuation(
            stats, spec, grid, cfg.cmena, cfg.newton, engine=engine, lambda_hat=hat
        )
    return densities_from_columns(sol.data, sol.bag_ids, spec, grid, engine=engine)


def evaluate_split(
    train: LabeledBagDataset, test: LabeledBagDataset, cfg: PipelineConfig
) -> list[dict]:
    """Fit preprocessing and bag representations on the training bags only,
    then classify every test bag. Returns one record per test bag."""
    train, test = _preprocess(train, test, cfg)
    labels = list(train.labels)
    ids = list(train.bag_ids)
    domain = domain_from_data(train.pooled_instances(), cfg.margin)
    grid = make_auto_grid(domain, cfg.grid_points, cfg.mc_nodes, cfg.basis_seed)
    if cfg.distance == "hausdorff":
        train_items = [b.instances for b in train.bags]
        d_train = distance_matrix(train_items, "hausdorff")
        d_queries = [
            np.array([avg_hausdorff(tb.instances, item) for item in train_items])
            for tb in test.bags
        ]
    elif cfg.distance == "kl-kde":
        kdes = [kde_fit(b.instances) for b in train.bags]
        d_train = distance_matrix(kdes, "kl-kde", grid=grid)
        d_queries = [
            np.array([kde_sym_kl(kde_fit(tb.instances), k, grid) for k in kdes])
            for tb in test.bags
        ]
    else:
        spec = make_basis(train.d, cfg.m, cfg.basis_seed)
        engine = BasisGrid(spec, grid)
        train_dens = _train_densities(train, spec, grid, engine, cfg)
        d_train = sym_kl_matrix(train_dens)
        d_queries = []
        for tb in test.bags:
            q, _ = fit_sde_relaxed(
                suff_stats(tb.instances, spec, tb.bag_id),
                spec,
                grid,
                cfg.newton,
                engine=engine,
            )
            d_queries.append(np.array([sym_kl(q, td) for td in train_dens]))
    out = []
    for tb, d_query in zip(test.bags, d_queries):
        pred = citation_knn_precomputed(d_train, d_query, labels, ids, cfg.knn)
        out.append({"bag_id": tb.bag_id, "true": tb.label, "predicted": pred})
    return out


def stratified_folds(dataset: LabeledBagDataset, folds: int, seed: int) -> list[list[int]]:
    """Deal each class's shuffled bags round-robin so folds stay balanced;
    every bag lands in exactly one fold."""
    if folds < 2 or folds > len(dataset.bags):
        raise ValueError("need 2 <= folds <= number of bags")
    rng = np.random.default_rng(seed)
    assignment: list[list[int]] = [[] for _ in range(folds)]
    cursor = 0
    for label in dataset.class_set + ((None,) if None in dataset.labels else ()):
        idx = [i for i, b in enumerate(dataset.bags) if b.label == label]
        rng.shuffle(idx)
        for i in idx:
            assignment[cursor % folds].append(i)
            cursor += 1
    return [sorted(fold) for fold in assignment]


@dataclass(frozen=True)
class KfoldResult:
    mean_accuracy: float
    std_accuracy: float
    fold_accuracies: tuple[float, ...]
    predictions: tuple[dict, ...]


def kfold_evaluate(
    dataset: LabeledBagDataset,
    folds: int = 10,
    cfg: PipelineConfig = PipelineConfig(),
    seed: int = 0,
) -> KfoldResult:
    """Stratified k-fold accuracy of the configured pipeline.

    Preprocessing and densities are fitted on the training folds only. A
    class missing from some training fold triggers a warning but the fold
    is still scored.
    """
    fold_sets = stratified_folds(dataset, folds, seed)
    all_classes = set(dataset.class_set)
    accuracies = []
    predictions: list[dict] = []
    for f, test_idx in enumerate(fold_sets):
        if not test_idx:
            continue
        train_idx = [i for i in range(len(dataset.bags)) if i not in set(test_idx)]
        train, test = dataset.subset(train_idx), dataset.subset(test_idx)
        missing = all_classes - set(train.class_set)
        if missing:
            _warnings.warn(
                f"fold {f}: classes absent from training data: {sorted(missing)}"
            )
        records = evaluate_split(train, test, cfg)
        predictions.extend(records)
        accuracies.append(
            float(np.mean([r["predicted"] == r["true"] for r in records]))
        )
    acc = np.asarray(accuracies)
    return KfoldResult(
        mean_accuracy=float(acc.mean()),
        std_accuracy=float(acc.std()),
        fold_accuracies=tuple(accuracies),
        predictions=tuple(predictions),
    )
