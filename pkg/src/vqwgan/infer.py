"""GMM fitting by EM, BIC model selection, and latent-space sampling.

The inference path fits a Gaussian mixture to the latent vectors collected
during training, selects the best configuration on a 7-component x 4
covariance-type grid by BIC, then samples z from the chosen mixture and
pushes it through the trained generator.
"""

from dataclasses import dataclass

import numpy as np
from scipy.linalg import solve_triangular
from scipy.special import logsumexp

from . import model, nn

COV_TYPES = ("spherical", "tied", "diag", "full")
COV_FLOOR = 1e-6
EM_TOL = 1e-6
EM_MAX_ITER = 500
MAX_EMPTY_REINITS = 10


class EmptyComponentError(RuntimeError):
    """A mixture component kept collapsing after repeated re-initialization."""


@dataclass
class GmmModel:
    weights: np.ndarray          # (K,)
    means: np.ndarray            # (K, d)
    covariances: np.ndarray      # spherical (K,) | diag (K, d) | tied (d, d) | full (K, d, d)
    covariance_type: str

    @property
    def n_components(self) -> int:
        return len(self.weights)

    @property
    def dim(self) -> int:
        return self.means.shape[1]

    def component_cov(self, k: int) -> np.ndarray:
        d = self.dim
        if self.covariance_type == "spherical":
            return np.eye(d) * self.covariances[k]
        if self.covariance_type == "diag":
            return np.diag(self.covariances[k])
        if self.covariance_type == "tied":
            return self.covariances
        return self.covariances[k]


def n_free_parameters(covariance_type: str, k: int, d: int) -> int:
    """Free-parameter count used by BIC."""
    cov = {
        "spherical": k,
        "diag": k * d,
        "tied": d * (d + 1) // 2,
        "full": k * d * (d + 1) // 2,
    }[covariance_type]
    return (k - 1) + k * d + cov


def _log_gaussians(x: np.ndarray, gmm: GmmModel) -> np.ndarray:
    """log N(x_i | mu_k, Sigma_k) for every (i, k)."""
    n, d = x.shape
    k = gmm.n_components
    out = np.empty((n, k))
    const = d * np.log(2.0 * np.pi)
    if gmm.covariance_type == "spherical":
        for j in range(k):
            var = gmm.covariances[j]
            sq = ((x - gmm.means[j]) ** 2).sum(axis=1)
            out[:, j] = -0.5 * (const + d * np.log(var) + sq / var)
    elif gmm.covariance_type == "diag":
        for j in range(k):
            var = gmm.covariances[j]
            sq = (((x - gmm.means[j]) ** 2) / var).sum(axis=1)
            out[:, j] = -0.5 * (const + np.log(var).sum() + sq)
    else:
        if gmm.covariance_type == "tied":
            chols = [np.linalg.cholesky(gmm.covariances)] * k
        else:
            chols = [np.linalg.cholesky(gmm.covariances[j]) for j in range(k)]
        for j in range(k):
            chol = chols[j]
            logdet = 2.0 * np.log(np.diag(chol)).sum()
            y = solve_triangular(chol, (x - gmm.means[j]).T, lower=True).T
            out[:, j] = -0.5 * (const + logdet + (y ** 2).sum(axis=1))
    return out


def log_likelihood(x: np.ndarray, gmm: GmmModel) -> float:
    """Total log-likelihood of the data under the mixture."""
    joint = _log_gaussians(x, gmm) + np.log(gmm.weights)
    return float(logsumexp(joint, axis=1).sum())


def _m_step_cov(x, resp, means, nk, covariance_type):
    n, d = x.shape
    k = means.shape[0]
    if covariance_type == "spherical":
        out = np.empty(k)
        for j in range(k):
            sq = ((x - means[j]) ** 2).sum(axis=1)
            out[j] = (resp[:, j] * sq).sum() / (nk[j] * d) + COV_FLOOR
        return out
    if covariance_type == "diag":
        out = np.empty((k, d))
        for j in range(k):
            out[j] = (resp[:, j, None] * (x - means[j]) ** 2).sum(axis=0) / nk[j] + COV_FLOOR
        return out
    if covariance_type == "tied":
        acc = np.zeros((d, d))
        for j in range(k):
            diff = x - means[j]
            acc += (resp[:, j, None] * diff).T @ diff
        return acc / n + COV_FLOOR * np.eye(d)
    out = np.empty((k, d, d))
    for j in range(k):
        diff = x - means[j]
        out[j] = (resp[:, j, None] * diff).T @ diff / nk[j] + COV_FLOOR * np.eye(d)
    return out


def _init_cov(x: np.ndarray, k: int, covariance_type: str):
    d = x.shape[1]
    var = x.var(axis=0) + COV_FLOOR
    if covariance_type == "spherical":
        return np.full(k, var.mean())
    if covariance_type == "diag":
        return np.tile(var, (k, 1))
    full = np.cov(x, rowvar=False, ddof=0) + COV_FLOOR * np.eye(d)
    full = np.atleast_2d(full)
    if covariance_type == "tied":
        return full
    return np.tile(full, (k, 1, 1))


def _kmeanspp_means(x: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    means = np.empty((k, x.shape[1]))
    means[0] = x[rng.integers(len(x))]
    d2 = ((x - means[0]) ** 2).sum(axis=1)
    for j in range(1, k):
        total = d2.sum()
        if total <= 0.0:
            means[j] = x[rng.integers(len(x))]
        else:
            means[j] = x[rng.choice(len(x), p=d2 / total)]
        d2 = np.minimum(d2, ((x - means[j]) ** 2).sum(axis=1))
    return means


def gmm_fit_em(latents: np.ndarray, k: int, covariance_type: str,
               rng: np.random.Generator):
    """EM until the total log-likelihood improves by less than 1e-6.

    Returns (GmmModel, final_log_likelihood).  A component whose
    responsibility mass collapses is re-seeded from a random data point;
    more than 10 such rescues raise EmptyComponentError.
    """
    if covariance_type not in COV_TYPES:
        raise ValueError(f"unknown covariance type {covariance_type!r}")
    x = np.asarray(latents, dtype=np.float64)
    n, d = x.shape
    if n <= k:
        raise ValueError(f"need more samples ({n}) than components ({k})")

    # hard-assign to the k-means++ seeds, then one M-step for the starting model
    means = _kmeanspp_means(x, k, rng)
    d2 = ((x[:, None, :] - means[None]) ** 2).sum(axis=2)
    labels = d2.argmin(axis=1)
    for j in range(k):
        if not (labels == j).any():
            labels[d2[np.arange(n), labels].argmax()] = j
    resp0 = np.zeros((n, k))
    resp0[np.arange(n), labels] = 1.0
    nk0 = resp0.sum(axis=0)
    means = (resp0.T @ x) / nk0[:, None]
    gmm = GmmModel(nk0 / n, means,
                   _m_step_cov(x, resp0, means, nk0, covariance_type),
                   covariance_type)
    prev_ll = -np.inf
    reinits = 0
    for _ in range(EM_MAX_ITER):
        # E-step
        joint = _log_gaussians(x, gmm) + np.log(gmm.weights)
        norm = logsumexp(joint, axis=1)
        ll = float(norm.sum())
        resp = np.exp(joint - norm[:, None])

        nk = resp.sum(axis=0)
        empty = np.where(~np.isfinite(nk) | (nk < 1e-10))[0]
        if len(empty) > 0:
            reinits += len(empty)
            if reinits > MAX_EMPTY_REINITS:
                raise EmptyComponentError(
                    f"{reinits} component re-initializations; latents too degenerate")
            for j in empty:
                gmm.means[j] = x[rng.integers(n)]
                cov = _init_cov(x, k, covariance_type)
                if covariance_type == "tied":
                    gmm.covariances = cov
                else:
                    gmm.covariances[j] = cov[j]
            gmm.weights = np.full(k, 1.0 / k)
            prev_ll = -np.inf
            continue

        # M-step
        gmm.weights = nk / n
        gmm.means = (resp.T @ x) / nk[:, None]
        gmm.covariances = _m_step_cov(x, resp, gmm.means, nk, covariance_type)

        if ll - prev_ll < EM_TOL and np.isfinite(prev_ll):
            prev_ll = ll
            break
        prev_ll = ll
    return gmm, log_likelihood(x, gmm)


def bic(gmm: GmmModel, latents: np.ndarray, ll: float = None) -> float:
    """-2 log L + p log n, natural logs."""
    x = np.asarray(latents, dtype=np.float64)
    if ll is None:
        ll = log_likelihood(x, gmm)
    p = n_free_parameters(gmm.covariance_type, gmm.n_components, gmm.dim)
    return -2.0 * ll + p * np.log(len(x))


def select_gmm(latents: np.ndarray, rng: np.random.Generator,
               max_components: int = 7):
    """BIC grid search over K x covariance type.

    Returns (best GmmModel, list of (K, covariance_type, bic, n_params) for
    every evaluated configuration).  Lowest BIC wins; ties break toward
    fewer parameters, then lower K.
    """
    x = np.asarray(latents, dtype=np.float64)
    results = []
    best = None
    best_key = None
    children = iter(rng.spawn(max_components * len(COV_TYPES)))
    for k in range(1, max_components + 1):
        for cov_type in COV_TYPES:
            gmm, ll = gmm_fit_em(x, k, cov_type, next(children))
            score = bic(gmm, x, ll)
            p = n_free_parameters(cov_type, k, x.shape[1])
            results.append((k, cov_type, score, p))
            key = (score, p, k)
            if best_key is None or key < best_key:
                best_key = key
                best = gmm
    return best, results


def sample_latents(gmm: GmmModel, n: int, rng: np.random.Generator) -> np.ndarray:
    """Draw n latent vectors from the mixture.

    Component square roots come from symmetric eigendecomposition, so
    degenerate (zero) covariances sample exactly at the mean.
    """
    d = gmm.dim
    comps = rng.choice(gmm.n_components, size=n, p=gmm.weights)
    roots = []
    for k in range(gmm.n_components):
        vals, vecs = np.linalg.eigh(gmm.component_cov(k))
        roots.append((vecs * np.sqrt(np.clip(vals, 0.0, None))) @ vecs.T)
    eps = rng.standard_normal((n, d))
    out = np.empty((n, d))
    for i in range(n):
        out[i] = gmm.means[comps[i]] + roots[comps[i]] @ eps[i]
    return out


def sample_and_generate(gmm: GmmModel, gen: model.GeneratorParams, n: int,
                        rng: np.random.Generator, threads: int = 1,
                        batch_size: int = 64) -> np.ndarray:
    """Mixture inference: z ~ GMM, images = G(z).  Returns (n, H, W)."""
    cfg = gen.config
    z = sample_latents(gmm, n, rng)
    out = np.empty((n, cfg.image_height, cfg.image_width))
    for start in range(0, n, batch_size):
        chunk = z[start:start + batch_size]
        imgs = model.generate(nn.Tensor(chunk), gen, threads=threads).data
        out[start:start + len(chunk)] = imgs.reshape(len(chunk), cfg.image_height,
                                                     cfg.image_width)
    return out


def save_gmm(gmm: GmmModel, path: str):
    """Plain-text export: covariance_type, K, d, then weights/means/covariances."""
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(f"covariance_type {gmm.covariance_type}\n")
        fh.write(f"components {gmm.n_components}\n")
        fh.write(f"dim {gmm.dim}\n")
        fh.write("weights " + " ".join(repr(float(v)) for v in gmm.weights) + "\n")
        for k in range(gmm.n_components):
            fh.write(f"mean {k} " + " ".join(repr(float(v)) for v in gmm.means[k]) + "\n")
        flat = np.asarray(gmm.covariances).reshape(-1)
        fh.write("covariances " + " ".join(repr(float(v)) for v in flat) + "\n")


def load_gmm(path: str) -> GmmModel:
    with open(path, encoding="utf-8") as fh:
        lines = [ln.strip() for ln in fh if ln.strip()]
    fields = {}
    means = {}
    for ln in lines:
        parts = ln.split()
        if parts[0] == "mean":
            means[int(parts[1])] = np.array([float(v) for v in parts[2:]])
        else:
            fields[parts[0]] = parts[1:]
    cov_type = fields["covariance_type"][0]
    if cov_type not in COV_TYPES:
        raise ValueError(f"unknown covariance type {cov_type!r}")
    k = int(fields["components"][0])
    d = int(fields["dim"][0])
    weights = np.array([float(v) for v in fields["weights"]])
    mean_arr = np.stack([means[i] for i in range(k)])
    flat = np.array([float(v) for v in fields["covariances"]])
    shape = {"spherical": (k,), "diag": (k, d), "tied": (d, d),
             "full": (k, d, d)}[cov_type]
    return GmmModel(weights, mean_arr, flat.reshape(shape), cov_type)
