"""Evaluation metrics: K-means binning, JSD, NDB, SSIM, PSNR, cosine, FD.

Distribution-level metrics (JSD, NDB, FD) compare a generated batch with a
real batch directly.  Pairwise metrics (SSIM, PSNR, cosine) need each
generated image matched to a real one; the default policy pairs with the
nearest real image in L2, ``index`` pairs i-th with i-th.
"""

import numpy as np
from scipy.stats import norm

SSIM_C1 = (0.01 * 1.0) ** 2
SSIM_C2 = (0.03 * 1.0) ** 2

PAIRING_POLICIES = ("nearest", "index")


def kmeans(data: np.ndarray, k: int, rng: np.random.Generator, n_iter: int = 300):
    """Lloyd's algorithm with k-means++ seeding.

    Returns (centroids, labels).  Runs until assignments stop changing or
    ``n_iter`` passes.  An emptied cluster is reseeded with the point
    farthest from its assigned centroid.
    """
    n = data.shape[0]
    if not 1 <= k <= n:
        raise ValueError(f"k={k} out of range for {n} points")
    centroids = _kmeanspp(data, k, rng)
    labels = np.zeros(n, dtype=np.int64)
    for _ in range(n_iter):
        d2 = _sq_distances(data, centroids)
        new_labels = d2.argmin(axis=1)
        for j in range(k):
            members = data[new_labels == j]
            if len(members) == 0:
                far = d2[np.arange(n), new_labels].argmax()
                centroids[j] = data[far]
                new_labels[far] = j
            else:
                centroids[j] = members.mean(axis=0)
        if np.array_equal(new_labels, labels):
            labels = new_labels
            break
        labels = new_labels
    return centroids, labels


def _kmeanspp(data: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    n = data.shape[0]
    centroids = np.empty((k, data.shape[1]))
    centroids[0] = data[rng.integers(n)]
    d2 = ((data - centroids[0]) ** 2).sum(axis=1)
    for j in range(1, k):
        total = d2.sum()
        if total <= 0.0:
            centroids[j] = data[rng.integers(n)]
        else:
            centroids[j] = data[rng.choice(n, p=d2 / total)]
        d2 = np.minimum(d2, ((data - centroids[j]) ** 2).sum(axis=1))
    return centroids


def _sq_distances(data: np.ndarray, centroids: np.ndarray) -> np.ndarray:
    return ((data[:, None, :] - centroids[None, :, :]) ** 2).sum(axis=2)


def assign_bins(data: np.ndarray, centroids: np.ndarray) -> np.ndarray:
    return _sq_distances(data, centroids).argmin(axis=1)


def bin_proportions(labels: np.ndarray, k: int) -> np.ndarray:
    counts = np.bincount(labels, minlength=k).astype(np.float64)
    return counts / counts.sum()


def jsd(p: np.ndarray, q: np.ndarray) -> float:
    """Jensen-Shannon divergence, base 2, so the value lies in [0, 1]."""
    p = np.asarray(p, dtype=np.float64)
    q = np.asarray(q, dtype=np.float64)
    m = 0.5 * (p + q)

    def kl(a, b):
        mask = a > 0.0
        return float((a[mask] * np.log2(a[mask] / b[mask])).sum())

    return 0.5 * kl(p, m) + 0.5 * kl(q, m)


def ndb(real_labels: np.ndarray, gen_labels: np.ndarray, k: int,
        alpha: float = 0.05):
    """Number of statistically different bins under a two-proportion z-test.

    Pooled-proportion z statistic per bin; a bin counts when |z| exceeds
    the two-sided critical value at level alpha.  Returns (count, count/k).
    """
    n_r = len(real_labels)
    n_g = len(gen_labels)
    cr = np.bincount(real_labels, minlength=k).astype(np.float64)
    cg = np.bincount(gen_labels, minlength=k).astype(np.float64)
    pr = cr / n_r
    pg = cg / n_g
    pooled = (cr + cg) / (n_r + n_g)
    se = np.sqrt(pooled * (1.0 - pooled) * (1.0 / n_r + 1.0 / n_g))
    z = np.zeros(k)
    nz = se > 0.0
    z[nz] = (pr[nz] - pg[nz]) / se[nz]
    if alpha <= 0.0:
        return 0, 0.0
    crit = norm.ppf(1.0 - alpha / 2.0)
    count = int((np.abs(z) > crit).sum())
    return count, count / k


def psnr(x: np.ndarray, x_pair: np.ndarray, max_value: float = 1.0) -> float:
    """10 log10(MAX^2 / MSE) with the MSE pooled over all pairs."""
    mse = float(np.mean((np.asarray(x, dtype=np.float64) - x_pair) ** 2))
    if mse == 0.0:
        return float("inf")
    return 10.0 * np.log10(max_value ** 2 / mse)


def ssim(x: np.ndarray, x_pair: np.ndarray) -> float:
    """Single-window SSIM from whole-image statistics, averaged over pairs."""
    x = np.asarray(x, dtype=np.float64).reshape(len(x), -1)
    y = np.asarray(x_pair, dtype=np.float64).reshape(len(x_pair), -1)
    mx = x.mean(axis=1)
    my = y.mean(axis=1)
    vx = x.var(axis=1)
    vy = y.var(axis=1)
    cov = ((x - mx[:, None]) * (y - my[:, None])).mean(axis=1)
    num = (2 * mx * my + SSIM_C1) * (2 * cov + SSIM_C2)
    den = (mx ** 2 + my ** 2 + SSIM_C1) * (vx + vy + SSIM_C2)
    return float(np.mean(num / den))


def cosine_similarity(x: np.ndarray, x_pair: np.ndarray) -> float:
    """Mean rescaled cosine 0.5 + 0.5 cos(x, y) over pairs, in [0, 1]."""
    x = np.asarray(x, dtype=np.float64).reshape(len(x), -1)
    y = np.asarray(x_pair, dtype=np.float64).reshape(len(x_pair), -1)
    dots = (x * y).sum(axis=1)
    denom = np.linalg.norm(x, axis=1) * np.linalg.norm(y, axis=1)
    raw = np.where(denom > 0.0, dots / np.where(denom > 0.0, denom, 1.0), 0.0)
    return float(np.mean(0.5 + 0.5 * raw))


def frechet_distance(real_batch: np.ndarray, gen_batch: np.ndarray) -> float:
    """Pixel-space Frechet distance between Gaussian fits of the two batches.

    ||mu_r - mu_g||^2 + Tr(S_r + S_g - 2 (S_r^1/2 S_g S_r^1/2)^1/2), with the
    square roots taken by symmetric eigendecomposition and negative
    eigenvalues clipped to zero.
    """
    r = np.asarray(real_batch, dtype=np.float64).reshape(len(real_batch), -1)
    g = np.asarray(gen_batch, dtype=np.float64).reshape(len(gen_batch), -1)
    if len(r) < 2 or len(g) < 2:
        raise ValueError("frechet_distance needs at least 2 samples per batch")
    if not (np.isfinite(r).all() and np.isfinite(g).all()):
        raise ValueError("non-finite values in frechet_distance input")
    mu_r = r.mean(axis=0)
    mu_g = g.mean(axis=0)
    cov_r = np.cov(r, rowvar=False, ddof=1)
    cov_g = np.cov(g, rowvar=False, ddof=1)
    cov_r = np.atleast_2d(cov_r)
    cov_g = np.atleast_2d(cov_g)

    vals, vecs = np.linalg.eigh(cov_r)
    root_r = (vecs * np.sqrt(np.clip(vals, 0.0, None))) @ vecs.T
    inner = root_r @ cov_g @ root_r
    inner_vals = np.linalg.eigvalsh((inner + inner.T) / 2.0)
    trace_sqrt = np.sqrt(np.clip(inner_vals, 0.0, None)).sum()

    fd = float(((mu_r - mu_g) ** 2).sum()
               + np.trace(cov_r) + np.trace(cov_g) - 2.0 * trace_sqrt)
    return max(fd, 0.0)


def pair_generated_to_real(gen_batch: np.ndarray, real_batch: np.ndarray) -> np.ndarray:
    """Index of the nearest real image (L2) for each generated image."""
    g = np.asarray(gen_batch, dtype=np.float64).reshape(len(gen_batch), -1)
    r = np.asarray(real_batch, dtype=np.float64).reshape(len(real_batch), -1)
    return _sq_distances(g, r).argmin(axis=1)


def evaluate_batches(real_batch: np.ndarray, gen_batch: np.ndarray,
                     rng: np.random.Generator, k: int = 20, alpha: float = 0.05,
                     pairing: str = "nearest") -> dict:
    """All six metrics between a real and a generated batch.

    Bins come from K-means on the real batch.  Returns a dict with keys
    jsd, ndb_k, ssim, psnr, cosine, fd.
    """
    if pairing not in PAIRING_POLICIES:
        raise ValueError(f"unknown pairing policy {pairing!r}")
    real = np.asarray(real_batch, dtype=np.float64).reshape(len(real_batch), -1)
    gen = np.asarray(gen_batch, dtype=np.float64).reshape(len(gen_batch), -1)

    centroids, real_labels = kmeans(real, min(k, len(real)), rng)
    gen_labels = assign_bins(gen, centroids)
    kk = centroids.shape[0]
    p = bin_proportions(real_labels, kk)
    q = bin_proportions(gen_labels, kk)
    _, ndb_k = ndb(real_labels, gen_labels, kk, alpha)

    if pairing == "nearest":
        paired = real[pair_generated_to_real(gen, real)]
    else:
        if len(real) != len(gen):
            raise ValueError("index pairing needs equally sized batches")
        paired = real

    return {
        "jsd": jsd(p, q),
        "ndb_k": ndb_k,
        "ssim": ssim(gen, paired),
        "psnr": psnr(gen, paired),
        "cosine": cosine_similarity(gen, paired),
        "fd": frechet_distance(real, gen),
    }
