"""Offline invariant representation learning for nominal dynamics.

Five learned maps compose the nominal one-step predictor:

    e  = eta(x)              dimension-reducing view of the state
    z  = rho(x, u)           bottlenecked encoding of (state, control)
    v' = fz(z)               simple latent dynamics
    v  = nu(dx, e)           latent effect encoded from the observed change
    dx' = psi(v', e)         decoded predicted state change

Training minimizes per-trajectory base losses (reconstruction + latent
match, both normalized as ratios) plus the variance of those losses across
trajectories, which pushes the representation toward features that are
invariant across the training distribution (e.g. translation).
"""

from __future__ import annotations

import json
import warnings
from dataclasses import dataclass, field

import numpy as np

from .nets import Adam, Mlp, load_mlp, save_mlp

N_X, N_U, N_Z, N_V, N_E = 4, 2, 5, 5, 2

HIDDEN = (16, 32)
FZ_HIDDEN = (16, 16)
FZ_HIDDEN_FINETUNE = (32, 32)
BASELINE_HIDDEN = (16, 32, 32, 32, 16, 32)


@dataclass
class TransformSet:
    rho: Mlp
    eta: Mlp
    nu: Mlp
    psi: Mlp
    fz: Mlp

    @classmethod
    def init(cls, seed=0) -> "TransformSet":
        rng = np.random.default_rng(seed)
        assert N_Z < N_X + N_U  # information bottleneck
        return cls(
            rho=Mlp([N_X + N_U, *HIDDEN, N_Z], rng=rng),
            eta=Mlp([N_X, *HIDDEN, N_E], rng=rng),
            nu=Mlp([N_X + N_E, *HIDDEN, N_V], rng=rng),
            psi=Mlp([N_V + N_E, *HIDDEN, N_X], rng=rng),
            fz=Mlp([N_Z, *FZ_HIDDEN, N_V], rng=rng),
        )

    def nets(self):
        return [self.rho, self.eta, self.nu, self.psi, self.fz]

    def predict(self, X: np.ndarray, U: np.ndarray) -> np.ndarray:
        """Predicted state change for a batch: psi(fz(rho(x,u)), eta(x))."""
        X = np.atleast_2d(np.asarray(X, dtype=float))
        U = np.atleast_2d(np.asarray(U, dtype=float))
        e = self.eta.forward(X)
        z = self.rho.forward(np.concatenate([X, U], axis=1))
        vh = self.fz.forward(z)
        out = self.psi.forward(np.concatenate([vh, e], axis=1))
        return out

    def to_dict(self) -> dict:
        return {name: save_mlp(net)
                for name, net in zip(["rho", "eta", "nu", "psi", "fz"], self.nets())}

    @classmethod
    def from_dict(cls, d) -> "TransformSet":
        return cls(**{k: load_mlp(d[k]) for k in ["rho", "eta", "nu", "psi", "fz"]})


def nominal_manifold_predict(predict_fn, n_reaction_dims=2):
    """Wrap a predictor so inputs are projected onto the training support.

    Offline data is collision-free, so every training state has zero reaction
    force and the nominal model is undefined off that manifold. Zeroing the
    reaction inputs at inference keeps planner rollouts from contact states on
    free-space motion instead of uncontrolled extrapolation.
    """
    def f(X, U):
        X = np.array(np.atleast_2d(X), dtype=float)
        X[:, -n_reaction_dims:] = 0.0
        return predict_fn(X, U)
    return f


def predict_nominal(ts: TransformSet, x, u) -> np.ndarray:
    """One-step nominal prediction for a single (state, control) pair."""
    x = np.asarray(x, dtype=float).ravel()
    u = np.asarray(u, dtype=float).ravel()
    return ts.predict(x[None, :], u[None, :])[0]


@dataclass
class LossReport:
    l_reconstruct: float
    l_match: float
    per_trajectory: list = field(default_factory=list)
    variance: float = 0.0
    total: float = 0.0
    beta: float = 1.0


def _safe_unit(r):
    """r / ||r|| rowwise with 0 rows mapped to 0."""
    n = np.linalg.norm(r, axis=1, keepdims=True)
    return np.divide(r, n, out=np.zeros_like(r), where=n > 0)


class _Graph:
    """One forward pass of all five transforms over a flat batch, with the
    intermediate caches needed for reverse mode."""

    def __init__(self, ts, X, U, DX):
        self.ts, self.X, self.U, self.DX = ts, X, U, DX
        self.e, self.c_eta = ts.eta.forward_cached(X)
        self.v, self.c_nu = ts.nu.forward_cached(np.concatenate([DX, self.e], axis=1))
        self.rec, self.c_psi = ts.psi.forward_cached(np.concatenate([self.v, self.e], axis=1))
        self.z, self.c_rho = ts.rho.forward_cached(np.concatenate([X, U], axis=1))
        self.vh, self.c_fz = ts.fz.forward_cached(self.z)
        self.r_rec = DX - self.rec
        self.r_m = self.v - self.vh

    def group_losses(self, groups):
        """(L_R, L_M, denominators) per group; groups is a list of index arrays."""
        rows = []
        for idx in groups:
            D = np.linalg.norm(self.DX[idx], axis=1).mean()
            if D == 0:
                raise ValueError("degenerate batch: all state changes are zero")
            a = np.linalg.norm(self.r_rec[idx], axis=1).mean()
            A = np.linalg.norm(self.r_m[idx], axis=1).mean()
            B = np.linalg.norm(self.v[idx], axis=1).mean()
            rows.append((a / D, A / B, D, a, A, B))
        return rows

    def backward(self, groups, w):
        """Gradients of sum_i w_i * (L_R,i + L_M,i) w.r.t. all parameters.

        Returns a dict name -> list of (dW, db).
        """
        n = self.X.shape[0]
        g_rec = np.zeros_like(self.rec)
        g_vh = np.zeros_like(self.vh)
        g_v = np.zeros_like(self.v)
        rows = self.group_losses(groups)
        for (idx, wi, (_, _, D, a, A, B)) in zip(groups, w, rows):
            ni = len(idx)
            u_rec = _safe_unit(self.r_rec[idx])
            u_m = _safe_unit(self.r_m[idx])
            u_v = _safe_unit(self.v[idx])
            g_rec[idx] += wi * (-u_rec / (ni * D))
            g_vh[idx] += wi * (-u_m / (ni * B))
            g_v[idx] += wi * (u_m / (ni * B) - (A / B ** 2) * u_v / ni)

        ts = self.ts
        g_psi, din_psi = ts.psi.backward(self.c_psi, g_rec)
        g_v = g_v + din_psi[:, :N_V]
        g_e = din_psi[:, N_V:].copy()
        g_fz, din_fz = ts.fz.backward(self.c_fz, g_vh)
        g_rho, _ = ts.rho.backward(self.c_rho, din_fz)
        g_nu, din_nu = ts.nu.backward(self.c_nu, g_v)
        g_e += din_nu[:, N_X:]
        g_eta, _ = ts.eta.backward(self.c_eta, g_e)
        return {"rho": g_rho, "eta": g_eta, "nu": g_nu, "psi": g_psi, "fz": g_fz}


def base_loss(ts: TransformSet, X, U, DX) -> LossReport:
    """Reconstruction + latent-match loss over one flat batch (one group)."""
    if len(X) == 0:
        raise ValueError("empty batch")
    g = _Graph(ts, np.asarray(X, float), np.asarray(U, float), np.asarray(DX, float))
    (lr, lm, *_), = g.group_losses([np.arange(len(X))])
    return LossReport(l_reconstruct=lr, l_match=lm,
                      per_trajectory=[lr + lm], variance=0.0, total=lr + lm)


def vrex_loss(ts: TransformSet, X, U, DX, traj_ids, beta=1.0) -> LossReport:
    """Trajectory-variance-penalized loss: beta * Var{L_i} + sum_i L_i."""
    X, U, DX = (np.asarray(a, float) for a in (X, U, DX))
    traj_ids = np.asarray(traj_ids)
    uniq = np.unique(traj_ids)
    groups = [np.flatnonzero(traj_ids == t) for t in uniq]
    if len(groups) < 2:
        warnings.warn("vrex_loss over a single trajectory: variance term is 0")
    g = _Graph(ts, X, U, DX)
    rows = g.group_losses(groups)
    per = [lr + lm for lr, lm, *_ in rows]
    var = float(np.var(per))  # population variance
    total = beta * var + float(np.sum(per))
    lr_all = float(np.mean([r[0] for r in rows]))
    lm_all = float(np.mean([r[1] for r in rows]))
    return LossReport(l_reconstruct=lr_all, l_match=lm_all, per_trajectory=per,
                      variance=var, total=total, beta=beta)


def vrex_gradients(ts: TransformSet, X, U, DX, traj_ids, beta=1.0):
    """Analytic gradients of the vrex_loss total; returns (LossReport, grads)."""
    X, U, DX = (np.asarray(a, float) for a in (X, U, DX))
    traj_ids = np.asarray(traj_ids)
    uniq = np.unique(traj_ids)
    groups = [np.flatnonzero(traj_ids == t) for t in uniq]
    g = _Graph(ts, X, U, DX)
    rows = g.group_losses(groups)
    per = np.array([lr + lm for lr, lm, *_ in rows])
    N = len(per)
    var = float(np.var(per))
    total = beta * var + float(per.sum())
    # d total / d L_i for population variance
    w = 1.0 + beta * 2.0 * (per - per.mean()) / N
    grads = g.backward(groups, w)
    rep = LossReport(l_reconstruct=float(np.mean([r[0] for r in rows])),
                     l_match=float(np.mean([r[1] for r in rows])),
                     per_trajectory=per.tolist(), variance=var, total=total, beta=beta)
    return rep, grads


def _split_validation(n_traj, rng, frac=0.1):
    order = rng.permutation(n_traj)
    n_val = max(1, int(round(frac * n_traj)))
    return np.sort(order[n_val:]), np.sort(order[:n_val])


@dataclass
class TrainLog:
    epochs: list = field(default_factory=list)

    def append(self, **kw):
        self.epochs.append(kw)

    def to_csv(self, path):
        keys = list(self.epochs[0].keys())
        with open(path, "w") as f:
            f.write(",".join(keys) + "\n")
            for row in self.epochs:
                f.write(",".join(f"{row[k]:.8g}" if isinstance(row[k], float)
                                 else str(row[k]) for k in keys) + "\n")


def train(dataset, epochs=3000, batch=2048, seed=0, beta=1.0, lr=1e-3,
          log_every=50, eval_offset=(10.0, 10.0)):
    """Train all five transforms jointly on the variance-penalized loss.

    Batches are formed from whole trajectories so per-trajectory losses are
    well defined inside each batch. Returns (TransformSet, TrainLog).
    """
    X, U, DX, tid = dataset.arrays()
    n_traj = int(tid.max()) + 1
    rng = np.random.default_rng(seed)
    train_ids, val_ids = _split_validation(n_traj, rng)
    tr_mask = np.isin(tid, train_ids)
    va_mask = ~tr_mask
    ts = TransformSet.init(seed=rng.integers(2 ** 31))
    params = []
    for net in ts.nets():
        for W, b in zip(net.weights, net.biases):
            params.append(W)
            params.append(b)
    opt = Adam(lr=lr)
    steps = max(1, len(train_ids))
    per_traj = int(np.bincount(tid).max())
    traj_per_batch = max(2, batch // max(per_traj, 1))
    log = TrainLog()
    names = ["rho", "eta", "nu", "psi", "fz"]
    for ep in range(epochs):
        order = rng.permutation(train_ids)
        ep_total = 0.0
        ep_lr = ep_lm = ep_var = 0.0
        nb = 0
        for s in range(0, len(order), traj_per_batch):
            chunk = order[s:s + traj_per_batch]
            if len(chunk) < 2:
                continue
            idx = np.flatnonzero(np.isin(tid, chunk))
            rep, grads = vrex_gradients(ts, X[idx], U[idx], DX[idx], tid[idx], beta=beta)
            if not np.isfinite(rep.total):
                raise FloatingPointError(f"non-finite training loss at epoch {ep}: {rep.total}")
            flat = []
            for name, net in zip(names, ts.nets()):
                for dW, db in grads[name]:
                    flat.append(dW)
                    flat.append(db)
            opt.step(params, flat)
            ep_total += rep.total
            ep_lr += rep.l_reconstruct
            ep_lm += rep.l_match
            ep_var += rep.variance
            nb += 1
        if ep % log_every == 0 or ep == epochs - 1:
            val = eval_relative_mse(ts.predict, X[va_mask], U[va_mask], DX[va_mask])
            ood = eval_relative_mse(ts.predict, X[va_mask], U[va_mask], DX[va_mask],
                                    offset=eval_offset)
            log.append(epoch=ep, l_reconstruct=ep_lr / nb, l_match=ep_lm / nb,
                       variance=ep_var / nb, total=ep_total / nb,
                       val_mse=val, ood_mse=ood)
    return ts, log


def fine_tune(ts: TransformSet, dataset, epochs=600, batch=500, seed=0, lr=1e-3):
    """Swap fz for a higher-capacity net and fit it on the match loss only.

    rho, eta, nu, psi are frozen; targets v are therefore fixed, so this is
    plain supervised regression of fz(rho(x,u)) onto v.
    """
    X, U, DX, _ = dataset.arrays()
    rng = np.random.default_rng(seed)
    e = ts.eta.forward(X)
    v = ts.nu.forward(np.concatenate([DX, e], axis=1))
    z = ts.rho.forward(np.concatenate([X, U], axis=1))
    new_fz = Mlp([N_Z, *FZ_HIDDEN_FINETUNE, N_V], rng=rng)
    params = [a for W, b in zip(new_fz.weights, new_fz.biases) for a in (W, b)]
    opt = Adam(lr=lr)
    n = len(X)
    for _ in range(epochs):
        order = rng.permutation(n)
        for s in range(0, n, batch):
            idx = order[s:s + batch]
            B = np.linalg.norm(v[idx], axis=1).mean()
            vh, cache = new_fz.forward_cached(z[idx])
            r = v[idx] - vh
            g = -_safe_unit(r) / (len(idx) * B)
            grads, _ = new_fz.backward(cache, g)
            flat = []
            for dW, db in grads:
                flat.append(dW)
                flat.append(db)
            opt.step(params, flat)
    return TransformSet(rho=ts.rho, eta=ts.eta, nu=ts.nu, psi=ts.psi, fz=new_fz)


def train_baseline(dataset, epochs=3000, batch=500, seed=0, lr=1e-3):
    """Direct (x,u) -> dx feedforward net of comparable capacity."""
    X, U, DX, _ = dataset.arrays()
    XU = np.concatenate([X, U], axis=1)
    rng = np.random.default_rng(seed)
    net = Mlp([N_X + N_U, *BASELINE_HIDDEN, N_X], rng=rng)
    params = [a for W, b in zip(net.weights, net.biases) for a in (W, b)]
    opt = Adam(lr=lr)
    n = len(X)
    for _ in range(epochs):
        order = rng.permutation(n)
        for s in range(0, n, batch):
            idx = order[s:s + batch]
            D = np.linalg.norm(DX[idx], axis=1).mean()
            pred, cache = net.forward_cached(XU[idx])
            r = DX[idx] - pred
            g = -_safe_unit(r) / (len(idx) * D)
            grads, _ = net.backward(cache, g)
            flat = []
            for dW, db in grads:
                flat.append(dW)
                flat.append(db)
            opt.step(params, flat)
    return net


def baseline_predict_fn(net: Mlp):
    def predict(X, U):
        return net.forward(np.concatenate([np.atleast_2d(X), np.atleast_2d(U)], axis=1))
    return predict


def eval_relative_mse(predict_fn, X, U, DX, offset=None) -> float:
    """Mean relative prediction error E||pred - dx|| / E||dx||.

    offset shifts the position components of the state (reactions unshifted),
    probing out-of-distribution generalization.
    """
    X = np.array(X, dtype=float)
    if len(X) == 0:
        raise ValueError("empty evaluation set")
    if offset is not None:
        X[:, :2] += np.asarray(offset, dtype=float)
    pred = predict_fn(X, np.asarray(U, float))
    num = np.linalg.norm(pred - DX, axis=1).mean()
    den = np.linalg.norm(DX, axis=1).mean()
    return float(num / den)


def model_error_per_dim(predict_fn, X, U, DX) -> np.ndarray:
    """Per-dimension RMSE of the model on a dataset (the E of the online
    nominal-dynamics test)."""
    pred = predict_fn(np.asarray(X, float), np.asarray(U, float))
    return np.sqrt(np.mean((pred - DX) ** 2, axis=0))


def save_transforms_file(ts: TransformSet, path, extra=None):
    d = ts.to_dict()
    if extra:
        d["extra"] = extra
    with open(path, "w") as f:
        json.dump(d, f)


def load_transforms_file(path):
    with open(path) as f:
        d = json.load(f)
    extra = d.pop("extra", None)
    return TransformSet.from_dict(d), extra
