"""Online residual dynamics model: exact GP regression per output dimension.

Targets are the observed state change minus the nominal model's prediction,
over a sliding window of transitions gathered since entering non-nominal
dynamics. RBF kernel with ARD lengthscales, zero mean, independent outputs;
hyperparameters are refreshed by short marginal-likelihood ascents.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import cho_factor, cho_solve

N_IN = 6   # (x, u)
N_OUT = 4  # state-change dimensions

NOISE_FLOOR = 1e-6
JITTERS = (0.0, 1e-8, 1e-6, 1e-4)


@dataclass
class GPHyper:
    log_ell: np.ndarray   # (N_OUT, N_IN)
    log_sf2: np.ndarray   # (N_OUT,)
    log_sn2: np.ndarray   # (N_OUT,)

    @classmethod
    def default(cls) -> "GPHyper":
        return cls(log_ell=np.zeros((N_OUT, N_IN)),
                   log_sf2=np.zeros(N_OUT),
                   log_sn2=np.full(N_OUT, np.log(0.01)))

    def copy(self):
        return GPHyper(self.log_ell.copy(), self.log_sf2.copy(), self.log_sn2.copy())

    def clamp(self):
        np.clip(self.log_sn2, np.log(NOISE_FLOOR), None, out=self.log_sn2)
        np.clip(self.log_ell, -10.0, 10.0, out=self.log_ell)
        np.clip(self.log_sf2, -10.0, 10.0, out=self.log_sf2)


def _sqdist(A, B, ell):
    """Pairwise squared distance with per-dim lengthscales."""
    As = A / ell
    Bs = B / ell
    return (np.sum(As ** 2, axis=1)[:, None] + np.sum(Bs ** 2, axis=1)[None, :]
            - 2.0 * As @ Bs.T)


def _chol_with_jitter(K):
    for j in JITTERS:
        try:
            return cho_factor(K + j * np.eye(len(K)), lower=True)
        except np.linalg.LinAlgError:
            continue
    raise np.linalg.LinAlgError("kernel matrix not positive definite after jitter escalation")


class LocalGP:
    """Sliding-window GP over standardized (x, u) inputs."""

    def __init__(self, window_size=50, input_mean=None, input_scale=None):
        self.window_size = window_size
        self.input_mean = np.zeros(N_IN) if input_mean is None else np.asarray(input_mean, float)
        self.input_scale = np.ones(N_IN) if input_scale is None else np.asarray(input_scale, float)
        self.hyper = GPHyper.default()
        self.Xw: list = []   # standardized inputs
        self.Yw: list = []   # residual targets
        self._cache = None   # (chol per head, alpha per head) for current window

    def __len__(self):
        return len(self.Xw)

    def reset(self):
        self.Xw.clear()
        self.Yw.clear()
        self.hyper = GPHyper.default()
        self._cache = None

    def _standardize(self, xu):
        return (np.asarray(xu, float) - self.input_mean) / self.input_scale

    def add(self, x_vec, u, dx, nominal_predict):
        """Store (x,u) -> dx - nominal(x,u); evict the oldest past the window."""
        xu = np.concatenate([np.asarray(x_vec, float).ravel(),
                             np.asarray(u, float).ravel()])
        target = np.asarray(dx, float) - np.asarray(nominal_predict(x_vec, u), float)
        self.Xw.append(self._standardize(xu))
        self.Yw.append(target)
        if len(self.Xw) > self.window_size:
            self.Xw.pop(0)
            self.Yw.pop(0)
        self._cache = None

    # -- marginal likelihood ------------------------------------------------

    def _kernel(self, A, B, head):
        ell = np.exp(self.hyper.log_ell[head])
        sf2 = np.exp(self.hyper.log_sf2[head])
        return sf2 * np.exp(-0.5 * np.maximum(_sqdist(A, B, ell), 0.0))

    def log_marginal_likelihood(self, head) -> float:
        X = np.array(self.Xw)
        y = np.array(self.Yw)[:, head]
        n = len(X)
        K = self._kernel(X, X, head) + np.exp(self.hyper.log_sn2[head]) * np.eye(n)
        c = _chol_with_jitter(K)
        alpha = cho_solve(c, y)
        logdet = 2.0 * np.sum(np.log(np.diag(c[0])))
        return float(-0.5 * y @ alpha - 0.5 * logdet - 0.5 * n * np.log(2 * np.pi))

    def nlml_and_grads(self, head):
        """Log marginal likelihood and its gradients w.r.t. the log hypers."""
        X = np.array(self.Xw)
        y = np.array(self.Yw)[:, head]
        n = len(X)
        ell = np.exp(self.hyper.log_ell[head])
        sf2 = np.exp(self.hyper.log_sf2[head])
        sn2 = np.exp(self.hyper.log_sn2[head])
        Kf = sf2 * np.exp(-0.5 * np.maximum(_sqdist(X, X, ell), 0.0))
        K = Kf + sn2 * np.eye(n)
        c = _chol_with_jitter(K)
        alpha = cho_solve(c, y)
        Kinv = cho_solve(c, np.eye(n))
        logdet = 2.0 * np.sum(np.log(np.diag(c[0])))
        lml = float(-0.5 * y @ alpha - 0.5 * logdet - 0.5 * n * np.log(2 * np.pi))
        M = np.outer(alpha, alpha) - Kinv
        g_ell = np.empty(N_IN)
        for i in range(N_IN):
            Di = (X[:, i][:, None] - X[:, i][None, :]) ** 2
            dK = Kf * (Di / ell[i] ** 2)
            g_ell[i] = 0.5 * np.sum(M * dK)
        g_sf2 = 0.5 * np.sum(M * Kf)
        g_sn2 = 0.5 * np.trace(M) * sn2
        return lml, g_ell, float(g_sf2), float(g_sn2)

    def fit(self, iterations=15, lr=0.05):
        """Short gradient ascent on the exact log marginal likelihood."""
        if not self.Xw:
            raise ValueError("cannot fit an empty window")
        for head in range(N_OUT):
            for _ in range(iterations):
                _, g_ell, g_sf2, g_sn2 = self.nlml_and_grads(head)
                # normalized ascent: bounded step in log space
                g = np.concatenate([g_ell, [g_sf2, g_sn2]])
                scale = max(1.0, np.max(np.abs(g)))
                self.hyper.log_ell[head] += lr * g_ell / scale
                self.hyper.log_sf2[head] += lr * g_sf2 / scale
                self.hyper.log_sn2[head] += lr * g_sn2 / scale
                self.hyper.clamp()
        self._cache = None

    # -- prediction ----------------------------------------------------------

    def _ensure_cache(self):
        if self._cache is not None:
            return
        X = np.array(self.Xw)
        Y = np.array(self.Yw)
        chols, alphas = [], []
        for head in range(N_OUT):
            K = self._kernel(X, X, head) + np.exp(self.hyper.log_sn2[head]) * np.eye(len(X))
            c = _chol_with_jitter(K)
            chols.append(c)
            alphas.append(cho_solve(c, Y[:, head]))
        self._cache = (X, chols, alphas)

    def predict(self, X_batch, U_batch):
        """Posterior mean and variance at a batch of raw (state, control) pairs."""
        X_batch = np.atleast_2d(np.asarray(X_batch, float))
        U_batch = np.atleast_2d(np.asarray(U_batch, float))
        XU = np.concatenate([X_batch, U_batch], axis=1)
        m = XU.shape[0]
        if not self.Xw:
            prior = np.exp(self.hyper.log_sf2) + np.exp(self.hyper.log_sn2)
            return np.zeros((m, N_OUT)), np.tile(prior, (m, 1))
        Q = (XU - self.input_mean) / self.input_scale
        self._ensure_cache()
        X, chols, alphas = self._cache
        mean = np.empty((m, N_OUT))
        var = np.empty((m, N_OUT))
        for head in range(N_OUT):
            Ks = self._kernel(Q, X, head)
            mean[:, head] = Ks @ alphas[head]
            v = cho_solve(chols[head], Ks.T)
            var[:, head] = (np.exp(self.hyper.log_sf2[head])
                            + np.exp(self.hyper.log_sn2[head])
                            - np.einsum("ij,ji->i", Ks, v))
        return mean, var

    def predict_mean(self, X_batch, U_batch):
        return self.predict(X_batch, U_batch)[0]


def input_stats_from_dataset(dataset):
    """Standardization statistics of (x, u) over the nominal dataset.

    Dimensions that are constant in the data (e.g. reaction forces in
    obstacle-free training) get unit scale so that raw online values pass
    through unsquashed.
    """
    X, U, _, _ = dataset.arrays()
    XU = np.concatenate([X, U], axis=1)
    mean = XU.mean(axis=0)
    std = XU.std(axis=0)
    scale = np.where(std > 1e-6, std, 1.0)
    return mean, scale
