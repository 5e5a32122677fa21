"""The two latent transition operators.

The invariant branch lifts each step through a learned encoder, advances it
once with a single learnable matrix (one application = one physical step),
and decodes. The variant branch fits a damped least-squares transition
operator per window of the lifted sequence,

    K_loc = Y X^T (X X^T + lam I)^-1,

with snapshots as columns (X = Z[:, :w-1], Y = Z[:, 1:]). Because the rest
of the network works with row-stacked states, the operator is applied as
rows @ K_loc^T, which is the same map. Training differentiates through the
damped solve; deployment swaps in the truncated-SVD fit, which matches the
solve exactly at full rank and never touches the tape.
"""

from __future__ import annotations

import numpy as np

from . import gradcore as gc
from . import kernels
from .errors import ConfigError, ContractError, DimensionError
from .gradcore import DiffTensor


def dmd_fit(Z: DiffTensor, lam: float) -> DiffTensor:
    """Differentiable damped fit of one window (columns = lifted states)."""
    Z = gc.as_tensor(Z)
    if Z.ndim != 2 or Z.shape[1] < 2:
        raise DimensionError(f"window must be [d, w>=2], got {Z.shape}")
    if lam <= 0.0:
        raise ConfigError(f"lambda must be positive, got {lam}")
    d, w = Z.shape
    X = gc.narrow(Z, 1, 0, w - 1)
    Y = gc.narrow(Z, 1, 1, w - 1)
    Xt = gc.transpose(X, (1, 0))
    Yt = gc.transpose(Y, (1, 0))
    S = gc.add(gc.matmul(X, Xt), DiffTensor(lam * np.eye(d)))
    # K^T = S^-1 X Y^T  =>  K = Y X^T S^-1
    return gc.transpose(gc.spd_solve(S, gc.matmul(X, Yt)), (1, 0))


def dmd_fit_svd(Z, lam: float, rank: int | None = None) -> np.ndarray:
    """Truncated-SVD fit of one window; inference path, no gradient."""
    arr = Z.data if isinstance(Z, DiffTensor) else np.asarray(Z, dtype=np.float64)
    if arr.ndim != 2 or arr.shape[1] < 2:
        raise DimensionError(f"window must be [d, w>=2], got {arr.shape}")
    if lam <= 0.0:
        raise ConfigError(f"lambda must be positive, got {lam}")
    d, w = arr.shape
    max_rank = min(d, w - 1)
    if rank is None:
        rank = max_rank
    if rank < 0 or rank > max_rank:
        raise ContractError(f"rank {rank} exceeds min(d, w-1) = {max_rank}")
    return kernels.dmd_fit_svd_batch(arr[None], lam, rank)[0]


def window_tiles(T: int, w: int) -> list[tuple[int, int, int]]:
    """Non-overlapping tiles of length w; if T is not a multiple, one extra
    right-aligned window is fitted but applied only to the uncovered tail,
    so every step is governed by exactly one local operator.

    Returns (fit_start, offset_within_window, apply_length) triples.
    """
    if T < w:
        raise DimensionError(f"sequence length {T} shorter than window {w}")
    tiles = [(s, 0, w) for s in range(0, T - w + 1, w)]
    covered = tiles[-1][0] + w
    if covered < T:
        tiles.append((T - w, covered - (T - w), T - covered))
    return tiles


class InvariantKoopman:
    """Global linear latent dynamics: decode(encode(x) @ K) per step."""

    def __init__(self, feat_dim: int, dyn_dim: int, rng: np.random.Generator):
        self.feat_dim = feat_dim
        self.dyn_dim = dyn_dim
        self.enc = gc.param(rng.normal(0.0, feat_dim ** -0.5, (feat_dim, dyn_dim)))
        self.K = gc.param(np.eye(dyn_dim))
        self.dec = gc.param(rng.normal(0.0, dyn_dim ** -0.5, (dyn_dim, feat_dim)))

    def __call__(self, x: DiffTensor) -> DiffTensor:
        if x.ndim != 3 or x.shape[2] != self.feat_dim:
            raise DimensionError(f"expected [B, T, {self.feat_dim}], got {x.shape}")
        B, T, H = x.shape
        flat = gc.reshape(x, (B * T, H))
        out = gc.matmul(gc.matmul(gc.matmul(flat, self.enc), self.K), self.dec)
        return gc.reshape(out, (B, T, H))

    def spectral_radius(self) -> float:
        return float(np.abs(np.linalg.eigvals(self.K.data)).max())

    def named_params(self, prefix: str = "koopman.inv."):
        yield prefix + "enc", self.enc
        yield prefix + "K", self.K
        yield prefix + "dec", self.dec


class LocalizedDMD:
    """Per-window data-driven transition operator for the variant branch."""

    def __init__(self, feat_dim: int, dyn_dim: int, seq_len: int,
                 rng: np.random.Generator, lam: float = 1e-3):
        if lam <= 0.0:
            raise ConfigError(f"lambda must be positive, got {lam}")
        self.feat_dim = feat_dim
        self.dyn_dim = dyn_dim
        self.lam = float(lam)
        self.window = max(4, seq_len // 4)
        self.enc = gc.param(rng.normal(0.0, feat_dim ** -0.5, (feat_dim, dyn_dim)))
        self.dec = gc.param(rng.normal(0.0, dyn_dim ** -0.5, (dyn_dim, feat_dim)))

    def __call__(self, x: DiffTensor, use_svd: bool = False) -> DiffTensor:
        if x.ndim != 3 or x.shape[2] != self.feat_dim:
            raise DimensionError(f"expected [B, T, {self.feat_dim}], got {x.shape}")
        B, T, H = x.shape
        w, d = self.window, self.dyn_dim
        tiles = window_tiles(T, w)
        nw = len(tiles)

        lifted = gc.reshape(gc.matmul(gc.reshape(x, (B * T, H)), self.enc), (B, T, d))
        windows = [
            gc.reshape(gc.narrow(lifted, 1, s, w), (B, 1, w, d))
            for s, _, _ in tiles
        ]
        R = gc.reshape(gc.concat(windows, axis=1), (B * nw, w, d))  # row states
        if use_svd:
            Z = np.ascontiguousarray(np.swapaxes(R.data, 1, 2))
            K = kernels.dmd_fit_svd_batch(Z, self.lam, min(d, w - 1))
            Kt = DiffTensor(np.swapaxes(K, 1, 2))
        else:
            Zc = gc.transpose(R, (0, 2, 1))  # columns = lifted states
            X = gc.narrow(Zc, 2, 0, w - 1)
            Y = gc.narrow(Zc, 2, 1, w - 1)
            S = gc.add(
                gc.matmul(X, gc.transpose(X, (0, 2, 1))),
                DiffTensor(np.broadcast_to(self.lam * np.eye(d), (B * nw, d, d)).copy()),
            )
            Kt = gc.spd_solve_batch(S, gc.matmul(X, gc.transpose(Y, (0, 2, 1))))
        advanced = gc.matmul(R, Kt)  # rows @ K^T
        decoded = gc.reshape(
            gc.matmul(gc.reshape(advanced, (B * nw * w, d)), self.dec),
            (B, nw, w, H),
        )
        parts = []
        for i, (_, off, length) in enumerate(tiles):
            piece = gc.reshape(gc.narrow(decoded, 1, i, 1), (B, w, H))
            if (off, length) != (0, w):
                piece = gc.narrow(piece, 1, off, length)
            parts.append(piece)
        return gc.concat(parts, axis=1) if len(parts) > 1 else parts[0]

    def named_params(self, prefix: str = "koopman.var."):
        yield prefix + "enc", self.enc
        yield prefix + "dec", self.dec
