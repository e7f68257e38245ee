"""Appliance HMMs: parameters, relaxed state variables and path utilities.

Transition matrices are column-stochastic: ``trans[j, k]`` is the
probability of moving to state ``j`` given the previous state ``k``.
State 0 is always the OFF state with zero mean.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

PROB_FLOOR = 1e-12
PAD_EPS = 1e-3  # Wh separation used when a fit yields duplicate means


def _frozen(a) -> np.ndarray:
    a = np.array(a, dtype=float)
    a.flags.writeable = False
    return a


@dataclass(frozen=True, eq=False)
class ApplianceHmm:
    """Discrete-state HMM for a single appliance.

    Parameters
    ----------
    pi : array_like, shape (K,)
        Initial state distribution.
    trans : array_like, shape (K, K)
        Column-stochastic transition matrix.
    mu : array_like, shape (K,)
        Energy per sample (Wh) in each state, ascending, ``mu[0] == 0``.
    name : str
        Appliance label, used for file names and reports.
    meta : dict
        Free-form fit diagnostics (e.g. ``{"padded": True}``).
    """

    pi: np.ndarray
    trans: np.ndarray
    mu: np.ndarray
    name: str = "appliance"
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        object.__setattr__(self, "pi", _frozen(self.pi))
        object.__setattr__(self, "trans", _frozen(self.trans))
        object.__setattr__(self, "mu", _frozen(self.mu))
        K = self.pi.shape[0]
        if K < 2:
            raise ValueError("an appliance HMM needs at least 2 states")
        if self.trans.shape != (K, K) or self.mu.shape != (K,):
            raise ValueError(
                f"inconsistent shapes: pi {self.pi.shape}, trans "
                f"{self.trans.shape}, mu {self.mu.shape}")
        if np.any(self.pi < 0) or abs(self.pi.sum() - 1.0) > 1e-12:
            raise ValueError("pi must be a probability vector")
        if np.any(self.trans < 0) or np.any(
                np.abs(self.trans.sum(axis=0) - 1.0) > 1e-12):
            raise ValueError("trans columns must be probability vectors")
        if self.mu[0] != 0.0:
            raise ValueError("mu[0] is the OFF state and must be 0")
        if np.any(np.diff(self.mu) <= 0):
            raise ValueError("mu must be strictly increasing")

    @property
    def K(self) -> int:
        return self.pi.shape[0]

    @property
    def log_pi(self) -> np.ndarray:
        return np.log(np.maximum(self.pi, PROB_FLOOR))

    @property
    def log_trans(self) -> np.ndarray:
        return np.log(np.maximum(self.trans, PROB_FLOOR))

    def stationary(self) -> np.ndarray:
        """Stationary distribution of the chain (eigenvector for 1)."""
        w, v = np.linalg.eig(self.trans)
        p = np.real(v[:, np.argmin(np.abs(w - 1.0))])
        return p / p.sum()

    def to_dict(self) -> dict:
        # trans is stored as a list of columns, i.e. one "from" state per row
        return {
            "appliance_name": self.name,
            "K": self.K,
            "pi": self.pi.tolist(),
            "mu": self.mu.tolist(),
            "trans": self.trans.T.tolist(),
            "meta": dict(self.meta),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ApplianceHmm":
        trans = np.asarray(d["trans"], dtype=float).T
        hmm = cls(pi=d["pi"], trans=trans, mu=d["mu"],
                  name=d.get("appliance_name", "appliance"),
                  meta=dict(d.get("meta", {})))
        if hmm.K != int(d.get("K", hmm.K)):
            raise ValueError("K does not match the parameter shapes")
        return hmm


@dataclass
class RelaxedAssignment:
    """Relaxed state variables for I appliances over T steps.

    ``S[i]`` has shape (T, K_i); ``H[i]`` has shape (T-1, K_i, K_i) with
    ``H[i][t-1, j, k]`` the weight of the transition k -> j into step t;
    ``U`` has shape (T,); ``xi[i]`` has shape (C_i,).
    """

    S: list
    H: list
    U: np.ndarray
    xi: list

    @property
    def T(self) -> int:
        return self.U.shape[0]

    @classmethod
    def from_paths(cls, paths: Sequence[np.ndarray], hmms: Sequence[ApplianceHmm],
                   U=None, xi=None, C: Sequence[int] | None = None):
        S, H = [], []
        for z, hmm in zip(paths, hmms):
            s, h = onehot(z, hmm.K)
            S.append(s)
            H.append(h)
        T = S[0].shape[0]
        U = np.zeros(T) if U is None else np.asarray(U, dtype=float)
        if xi is None:
            C = C or [1] * len(paths)
            xi = [np.eye(c)[0] for c in C]
        return cls(S=S, H=H, U=U, xi=[np.asarray(x, dtype=float) for x in xi])

    def violation(self) -> float:
        """Largest violation of the simplex, linking and sign constraints."""
        v = [0.0, float(np.max(-self.U, initial=0.0))]
        for s, h in zip(self.S, self.H):
            v.append(np.max(np.abs(s.sum(axis=1) - 1.0)))
            v.append(np.max(np.abs(h.sum(axis=1) - s[:-1]), initial=0.0))
            v.append(np.max(np.abs(h.sum(axis=2) - s[1:]), initial=0.0))
            v.append(max(np.max(-s), np.max(s - 1.0)))
            if h.size:
                v.append(max(np.max(-h), np.max(h - 1.0)))
        for x in self.xi:
            v.append(abs(x.sum() - 1.0))
            v.append(max(np.max(-x), np.max(x - 1.0)))
        return float(max(v))


@dataclass
class NoiseState:
    """Noise variances held fixed during one QP solve.

    ``sigma2_stat`` and ``caps`` are (I, 3) arrays indexed by appliance and
    statistic (total energy, duration, cycle count).
    """

    sigma2: float
    sigma2_stat: np.ndarray
    caps: np.ndarray

    def __post_init__(self):
        self.sigma2_stat = np.asarray(self.sigma2_stat, dtype=float)
        self.caps = np.asarray(self.caps, dtype=float)
        if not self.sigma2 > 0 or np.any(self.sigma2_stat <= 0):
            raise ValueError("noise variances must be positive")
        if np.any(self.sigma2_stat >= self.caps):
            raise ValueError("statistic variances must stay below their caps")


def onehot(z: np.ndarray, K: int) -> tuple[np.ndarray, np.ndarray]:
    """One-hot states and the consistent transition indicators for a path."""
    z = np.asarray(z, dtype=int)
    T = z.shape[0]
    S = np.zeros((T, K))
    S[np.arange(T), z] = 1.0
    H = np.zeros((max(T - 1, 0), K, K))
    if T > 1:
        H[np.arange(T - 1), z[1:], z[:-1]] = 1.0
    return S, H


def consistent_h(S: np.ndarray) -> np.ndarray:
    """Independent-coupling H whose row/column sums match ``S``."""
    return np.einsum("tj,tk->tjk", S[1:], S[:-1])


def log_prior_states(S: Sequence[np.ndarray], H: Sequence[np.ndarray],
                     hmms: Sequence[ApplianceHmm]) -> float:
    """Relaxed HMM log-prior, linear in (S, H)."""
    if not (len(S) == len(H) == len(hmms)):
        raise ValueError("S, H and hmms must describe the same appliances")
    total = 0.0
    for s, h, hmm in zip(S, H, hmms):
        T = s.shape[0]
        if s.shape != (T, hmm.K) or h.shape != (T - 1, hmm.K, hmm.K):
            raise ValueError(
                f"{hmm.name}: S{s.shape} / H{h.shape} do not match K={hmm.K}")
        total += float(s[0] @ hmm.log_pi)
        total += float(np.einsum("tjk,jk->", h, hmm.log_trans))
    return total


def path_log_prob(z: np.ndarray, hmm: ApplianceHmm) -> float:
    z = np.asarray(z, dtype=int)
    lt = hmm.log_trans
    return float(hmm.log_pi[z[0]] + lt[z[1:], z[:-1]].sum())


def sample_paths(hmm: ApplianceHmm, T: int, n: int,
                 rng: np.random.Generator) -> np.ndarray:
    """Draw ``n`` independent state paths of length ``T``; shape (n, T)."""
    if T < 1:
        raise ValueError("T must be >= 1")
    K = hmm.K
    u = rng.random((T, n))
    z = np.empty((n, T), dtype=int)
    z[:, 0] = np.minimum(np.searchsorted(np.cumsum(hmm.pi), u[0], side="right"),
                         K - 1)
    cum = np.cumsum(hmm.trans, axis=0)
    for t in range(1, T):
        col = cum[:, z[:, t - 1]]
        z[:, t] = np.minimum((u[t] >= col).sum(axis=0), K - 1)
    return z


def sample_path(hmm: ApplianceHmm, T: int, rng: np.random.Generator) -> np.ndarray:
    return sample_paths(hmm, T, 1, rng)[0]


def _kmeans_1d(x: np.ndarray, K: int, max_iter: int = 200) -> np.ndarray:
    # centre 0 is pinned to the OFF level
    pos = x[x > 0]
    if pos.size == 0:
        return np.zeros(K)
    levels = (np.arange(1, K) - 0.5) / (K - 1)
    centres = np.concatenate([[0.0], np.quantile(pos, levels)])
    for _ in range(max_iter):
        lab = np.abs(x[:, None] - centres[None, :]).argmin(axis=1)
        new = centres.copy()
        for k in range(1, K):
            if np.any(lab == k):
                new[k] = x[lab == k].mean()
        new = np.sort(new)
        if np.allclose(new, centres, rtol=0, atol=1e-12):
            break
        centres = new
    return centres


def fit_hmm(trace, K: int = 3, name: str = "appliance") -> ApplianceHmm:
    """Fit an appliance HMM from sub-metered energy readings.

    Parameters
    ----------
    trace : array_like or list of array_like
        Energy per sample (Wh). A list is treated as separate segments
        (e.g. days); transitions are not counted across segment borders.
    K : int
        Number of states.
    """
    segments = [np.asarray(trace, dtype=float)] if np.ndim(trace[0]) == 0 \
        else [np.asarray(s, dtype=float) for s in trace]
    x = np.concatenate(segments)
    if x.size < K:
        raise ValueError(f"need at least K={K} samples, got {x.size}")
    if np.any(x < 0) or not np.all(np.isfinite(x)):
        raise ValueError("trace values must be finite and non-negative")

    centres = _kmeans_1d(x, K)
    uniq = [0.0]
    for c in centres[1:]:
        if c > uniq[-1] + PAD_EPS:
            uniq.append(float(c))
    padded = len(uniq) < K
    while len(uniq) < K:
        uniq.append(uniq[-1] + PAD_EPS)
    mu = np.array(uniq)

    occ = np.ones(K)
    counts = np.ones((K, K))
    for seg in segments:
        z = np.abs(seg[:, None] - mu[None, :]).argmin(axis=1)
        occ += np.bincount(z, minlength=K)
        np.add.at(counts, (z[1:], z[:-1]), 1.0)
    pi = occ / occ.sum()
    trans = counts / counts.sum(axis=0, keepdims=True)
    meta = {"padded": True} if padded else {}
    return ApplianceHmm(pi=pi, trans=trans, mu=mu, name=name, meta=meta)


def assign_states(trace: np.ndarray, hmm: ApplianceHmm) -> np.ndarray:
    """Nearest-mean state index for each sample."""
    trace = np.asarray(trace, dtype=float)
    return np.abs(trace[:, None] - hmm.mu[None, :]).argmin(axis=1)


def round_states(S: np.ndarray) -> np.ndarray:
    """Row-wise argmax of relaxed states, ties to the lower index; one-hot."""
    S = np.asarray(S)
    out = np.zeros_like(S, dtype=float)
    out[np.arange(S.shape[0]), S.argmax(axis=1)] = 1.0
    return out
