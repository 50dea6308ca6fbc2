"""Initial prompt values built from the downstream task's own patch tokens.

Every initializer is a pure function of a token pool and a seed. Pools come
from :func:`harvest_tokens`, a prompt-free forward pass of the frozen
backbone.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, DataError
from .prompts import PromptSet
from .tensor import no_grad

STRATEGIES = ("kmeans", "mean-pool", "max-pool", "random-sample")
RANDOM_STRATEGIES = ("random-uniform", "random-normal")
SOURCES = ("self_prompt", "first_P0", "last_PL")


@dataclass
class TokenPool:
    layer: int
    tokens: np.ndarray  # [M, D]
    meta: dict = field(default_factory=dict)

    @property
    def size(self) -> int:
        return self.tokens.shape[0]


@dataclass
class ClusterState:
    centroids: np.ndarray
    labels: np.ndarray
    inertia: float
    history: list[float]
    iterations: int


def _batch_indices(n: int, fraction: float | None, batch_size: int | None, rng) -> np.ndarray:
    if batch_size is not None:
        if batch_size < 1:
            raise ConfigError("batch_size must be positive")
        return np.sort(rng.choice(n, size=min(batch_size, n), replace=False))
    fraction = 1.0 if fraction is None else fraction
    if not 0 < fraction <= 1:
        raise ConfigError(f"fraction must lie in (0, 1], got {fraction}")
    if fraction == 1.0:
        return np.arange(n)
    k = max(1, int(round(fraction * n)))
    return np.sort(rng.choice(n, size=k, replace=False))


def harvest_tokens(model, images: np.ndarray, layers, fraction: float | None = None,
                   batch_size: int | None = None, seed: int = 0, per_layer_batches: bool = False,
                   chunk: int = 128) -> dict[int, TokenPool]:
    """Collect block-boundary patch embeddings E_i (class token excluded).

    Layer 0 is the patch-embedding output, layer i the output of block i.
    ``fraction`` streams that share of the images; ``batch_size`` instead
    takes one random batch of B images. With ``per_layer_batches`` each
    layer draws its own batch.
    """
    from .vit import cls_embed, patch_embed

    images = np.asarray(images)
    if len(images) == 0:
        raise DataError("cannot harvest tokens from an empty dataset")
    layers = sorted(set(int(i) for i in layers))
    depth = model.config.depth
    if any(i < 0 or i > depth for i in layers):
        raise ConfigError(f"layers must lie in 0..{depth}, got {layers}")
    rng = np.random.default_rng(seed)

    if per_layer_batches:
        pools = {}
        for i in layers:
            pools.update(harvest_tokens(model, images, [i], fraction, batch_size,
                                        seed=int(rng.integers(2**31)), chunk=chunk))
        return pools

    idx = _batch_indices(len(images), fraction, batch_size, rng)
    collected: dict[int, list[np.ndarray]] = {i: [] for i in layers}
    from .vit import block_forward
    from .tensor import concat

    with no_grad():
        for start in range(0, len(idx), chunk):
            batch = images[idx[start:start + chunk]]
            E = patch_embed(batch, model)
            x = cls_embed(model, len(batch))
            seq = E if x is None else concat([x, E], axis=1)
            off = 0 if x is None else 1
            if 0 in collected:
                collected[0].append(E.data.reshape(-1, E.shape[-1]))
            for b in range(1, max(layers) + 1):
                seq = block_forward(seq, model, b - 1)
                if b in collected:
                    collected[b].append(seq.data[:, off:].reshape(-1, seq.shape[-1]))
    meta = {"images": int(len(idx)), "fraction": fraction, "batch_size": batch_size, "seed": seed}
    return {i: TokenPool(i, np.concatenate(collected[i]).astype(np.float32), dict(meta)) for i in layers}


def _check_pool(pool: TokenPool, n_prompts: int) -> np.ndarray:
    tokens = np.asarray(pool.tokens)
    if n_prompts < 0:
        raise ConfigError("n_prompts must be non-negative")
    if tokens.shape[0] < n_prompts:
        raise ConfigError(f"pool of {tokens.shape[0]} tokens is smaller than N_p={n_prompts}")
    return tokens


def _sq_dists(x: np.ndarray, c: np.ndarray, chunk: int = 8192) -> np.ndarray:
    out = np.empty((x.shape[0], c.shape[0]))
    for s in range(0, x.shape[0], chunk):
        diff = x[s:s + chunk, None, :] - c[None, :, :]
        out[s:s + chunk] = np.einsum("mkd,mkd->mk", diff, diff)
    return out


def _centroids(x: np.ndarray, labels: np.ndarray, k: int) -> tuple[np.ndarray, np.ndarray]:
    counts = np.bincount(labels, minlength=k)
    sums = np.zeros((k, x.shape[1]))
    np.add.at(sums, labels, x)
    with np.errstate(invalid="ignore", divide="ignore"):
        return sums / counts[:, None], counts


def _inertia(x, labels, centroids) -> float:
    diff = x - centroids[labels]
    return float(np.einsum("md,md->", diff, diff))


def kmeans(points: np.ndarray, k: int, max_iters: int = 100, tol: float = 1e-6, seed: int = 0) -> ClusterState:
    """Lloyd's algorithm from a seeded uniform partition.

    The initial partition shuffles the points and cuts them into k contiguous
    blocks of equal size. Each iteration assigns every point to its nearest
    centroid and moves each centroid to the mean of its members. An emptied
    cluster is re-seeded with the point farthest from its own centroid.
    Stops when assignments stop changing, the relative inertia improvement
    drops below ``tol``, or after ``max_iters`` iterations; ``history`` is
    non-increasing.
    """
    x = np.asarray(points, dtype=np.float64)
    m = x.shape[0]
    if k < 1 or m < k:
        raise ConfigError(f"k-means needs 1 <= k <= number of points, got k={k}, M={m}")
    if max_iters < 1 or tol < 0:
        raise ConfigError("max_iters must be >= 1 and tol >= 0")
    rng = np.random.default_rng(seed)
    labels = np.empty(m, dtype=np.int64)
    for j, block in enumerate(np.array_split(rng.permutation(m), k)):
        labels[block] = j
    centroids, _ = _centroids(x, labels, k)
    inertia = _inertia(x, labels, centroids)
    history = [inertia]
    it = 0
    for it in range(1, max_iters + 1):
        d = _sq_dists(x, centroids)
        current = d[np.arange(m), labels]
        best = d.argmin(axis=1)
        # switch only on strict improvement so ties never oscillate
        new_labels = np.where(d[np.arange(m), best] < current, best, labels)
        new_centroids, counts = _centroids(x, new_labels, k)
        for j in np.flatnonzero(counts == 0):
            far = d[np.arange(m), new_labels]
            donors = np.bincount(new_labels, minlength=k)[new_labels] > 1
            far = np.where(donors, far, -1.0)
            p = int(far.argmax())
            new_labels[p] = j
            new_centroids, counts = _centroids(x, new_labels, k)
            d[:, j] = np.einsum("md,md->m", x - x[p], x - x[p])
        new_inertia = _inertia(x, new_labels, new_centroids)
        if new_inertia > inertia:  # float round-off at convergence
            break
        changed = not np.array_equal(new_labels, labels)
        labels, centroids = new_labels, new_centroids
        improvement = inertia - new_inertia
        inertia = new_inertia
        history.append(inertia)
        if not changed or improvement <= tol * max(history[-2], 1e-300):
            break
    return ClusterState(centroids, labels, inertia, history, it)


def kmeans_init(pool: TokenPool, n_prompts: int, max_iters: int = 100, tol: float = 1e-6,
                seed: int = 0) -> np.ndarray:
    """K-means token prototypes as an [N_p, D] prompt initialization."""
    tokens = _check_pool(pool, n_prompts)
    if n_prompts == 0:
        return np.zeros((0, tokens.shape[1]), dtype=np.float32)
    state = kmeans(tokens, n_prompts, max_iters, tol, seed)
    return state.centroids.astype(np.float32)


def pooling_init(pool: TokenPool, n_prompts: int, mode: str = "mean") -> np.ndarray:
    """Non-overlapping windows of floor(M / N_p) tokens in harvest order; the tail is dropped."""
    tokens = _check_pool(pool, n_prompts)
    if mode not in ("mean", "max"):
        raise ConfigError(f"pooling mode must be 'mean' or 'max', got {mode!r}")
    if n_prompts == 0:
        return np.zeros((0, tokens.shape[1]), dtype=np.float32)
    kernel = tokens.shape[0] // n_prompts
    windows = tokens[: kernel * n_prompts].reshape(n_prompts, kernel, -1)
    out = windows.mean(axis=1) if mode == "mean" else windows.max(axis=1)
    return out.astype(np.float32)


def random_sample_init(pool: TokenPool, n_prompts: int, seed: int = 0) -> np.ndarray:
    """N_p tokens drawn uniformly without replacement."""
    tokens = _check_pool(pool, n_prompts)
    rng = np.random.default_rng(seed)
    idx = rng.choice(tokens.shape[0], size=n_prompts, replace=False)
    return tokens[idx].astype(np.float32)


def random_init(n_prompts: int, dim: int, dist: str = "uniform", scale: float | None = None,
                seed: int = 0) -> np.ndarray:
    """The VPT baseline: i.i.d. uniform(-a, a) or normal(0, sigma) entries.

    ``scale`` defaults to the Xavier bound sqrt(6 / (2 * dim)) for uniform and
    0.02 for normal.
    """
    rng = np.random.default_rng(seed)
    if dist == "uniform":
        a = np.sqrt(6.0 / (2 * dim)) if scale is None else scale
        if a < 0:
            raise ConfigError("uniform bound must be non-negative")
        return rng.uniform(-a, a, size=(n_prompts, dim)).astype(np.float32)
    if dist == "normal":
        sigma = 0.02 if scale is None else scale
        if sigma < 0:
            raise ConfigError("sigma must be non-negative")
        return (sigma * rng.standard_normal((n_prompts, dim))).astype(np.float32)
    raise ConfigError(f"unknown distribution {dist!r}")


def vpt_uniform_bound(patch_dim: int, dim: int) -> float:
    """Xavier-uniform bound over the patch projection's fan-in/out, as used by VPT."""
    return float(np.sqrt(6.0 / (patch_dim + dim)))


def init_from_pool(strategy: str, pool: TokenPool, n_prompts: int, seed: int = 0, **kmeans_kw) -> np.ndarray:
    if strategy == "kmeans":
        return kmeans_init(pool, n_prompts, seed=seed, **kmeans_kw)
    if strategy == "mean-pool":
        return pooling_init(pool, n_prompts, "mean")
    if strategy == "max-pool":
        return pooling_init(pool, n_prompts, "max")
    if strategy == "random-sample":
        return random_sample_init(pool, n_prompts, seed)
    raise ConfigError(f"unknown pool strategy {strategy!r}; expected one of {STRATEGIES}")


def cross_layer_init(pools: dict[int, TokenPool], n_prompts: int, depth: int, source: str = "self_prompt",
                     strategy: str = "random-sample", seed: int = 0) -> PromptSet:
    """Deep prompts for every block from same-level, first-level or last-level pools.

    ``self_prompt`` feeds block i the tokens harvested at its own input (pool
    i-1); ``first_P0`` uses pool 0 and ``last_PL`` pool L for all blocks. The
    single-source variants build one prompt tensor and copy it to all layers.
    """
    if source not in SOURCES:
        raise ConfigError(f"source must be one of {SOURCES}, got {source!r}")
    wanted = {"self_prompt": list(range(depth)), "first_P0": [0], "last_PL": [depth]}[source]
    missing = [i for i in wanted if i not in pools]
    if missing:
        raise ConfigError(f"missing token pools for layers {missing}")
    if source == "self_prompt":
        arrays = [init_from_pool(strategy, pools[i], n_prompts, seed + i) for i in range(depth)]
    else:
        shared = init_from_pool(strategy, pools[wanted[0]], n_prompts, seed)
        arrays = [shared.copy() for _ in range(depth)]
    return PromptSet.from_arrays("deep", arrays)


def build_prompts(strategy: str, mode: str, n_prompts: int, depth: int, dim: int,
                  pools: dict[int, TokenPool] | None = None, seed: int = 0,
                  scale: float | None = None) -> PromptSet:
    """One entry point for every strategy: pool-based (SPT) or random (VPT)."""
    layers = depth if mode == "deep" else 1
    if strategy in RANDOM_STRATEGIES:
        dist = strategy.split("-")[1]
        arrays = [random_init(n_prompts, dim, dist, scale, seed + i) for i in range(layers)]
        return PromptSet.from_arrays(mode, arrays)
    if strategy not in STRATEGIES:
        raise ConfigError(f"unknown strategy {strategy!r}")
    if pools is None:
        raise ConfigError(f"strategy {strategy!r} needs token pools")
    if mode == "deep":
        return cross_layer_init(pools, n_prompts, depth, "self_prompt", strategy, seed)
    if 0 not in pools:
        raise ConfigError("missing token pool for layer 0")
    return PromptSet.from_arrays("shallow", [init_from_pool(strategy, pools[0], n_prompts, seed)])


def init_timer(strategy: str, pool: TokenPool, n_prompts: int, seed: int = 0) -> float:
    """Wall-clock seconds spent constructing prompts from an already harvested pool."""
    start = time.perf_counter()
    init_from_pool(strategy, pool, n_prompts, seed)
    return time.perf_counter() - start
