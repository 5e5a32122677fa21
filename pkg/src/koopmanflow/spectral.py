"""Frequency-domain split of latent trajectories.

A trajectory batch [B, T, D] is transformed along the sequence axis, bins
are ranked by dataset-averaged amplitude, and the smallest top-amplitude set
whose squared-amplitude share reaches the threshold alpha becomes the
time-invariant support. The complementary bins form the time-variant part.
The DC bin is always invariant so the variant branch never carries the
trajectory offset.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import gradcore as gc
from .errors import ConfigError, DimensionError
from .gradcore import DiffTensor

MASK_KEY = "spectral.mask"


@dataclass(frozen=True)
class FrequencyMask:
    """Per-bin keep flags plus the spectrum and threshold that produced them."""

    keep: np.ndarray  # bool, one per rfft bin
    alpha: float
    source_spectrum: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "keep", np.asarray(self.keep, dtype=bool))
        object.__setattr__(
            self, "source_spectrum",
            np.asarray(self.source_spectrum, dtype=np.float64),
        )
        if self.keep.shape != self.source_spectrum.shape:
            raise DimensionError("mask and spectrum length mismatch")
        if not self.keep[0]:
            raise ConfigError("the DC bin must always be kept")

    @property
    def nbins(self) -> int:
        return int(self.keep.shape[0])


@dataclass
class SpectralSplit:
    x_inv: DiffTensor
    x_var: DiffTensor
    mask: FrequencyMask


def amplitude_spectrum(h) -> np.ndarray:
    """Mean |rfft| per bin over batch and channels. Not differentiated:
    the spectrum is a dataset statistic, not a learned quantity."""
    arr = h.data if isinstance(h, DiffTensor) else np.asarray(h, dtype=np.float64)
    if arr.ndim != 3:
        raise DimensionError(f"expected [B, T, D], got {arr.shape}")
    T = arr.shape[1]
    if T < 4:
        raise DimensionError(f"sequence length {T} < 4")
    C, S = gc._dft_mats(T)
    moved = np.moveaxis(arr, 1, -1)  # [B, D, T]
    re = moved @ C.T
    im = moved @ S.T
    return np.sqrt(re * re + im * im).mean(axis=(0, 1))


def select_mask(spectrum: np.ndarray, alpha: float) -> FrequencyMask:
    """Keep the shortest amplitude-descending prefix of bins whose squared
    amplitude share reaches ``alpha``; ties break toward lower bins; bin 0
    is always included."""
    if not 0.0 < alpha <= 1.0:
        raise ConfigError(f"alpha must be in (0, 1], got {alpha}")
    spectrum = np.asarray(spectrum, dtype=np.float64)
    nbins = spectrum.shape[0]
    keep = np.zeros(nbins, dtype=bool)
    energy = spectrum * spectrum
    total = energy.sum()
    if total > 0.0:
        order = np.argsort(-spectrum, kind="stable")
        cum = np.cumsum(energy[order])
        target = alpha * total
        cut = int(np.searchsorted(cum, target - 1e-12 * total))
        cut = min(cut, nbins - 1)
        keep[order[: cut + 1]] = True
    keep[0] = True
    return FrequencyMask(keep=keep, alpha=float(alpha), source_spectrum=spectrum)


def fourier_filter(h: DiffTensor, mask: FrequencyMask) -> SpectralSplit:
    """Split [B, T, D] into complementary components over the mask's bins.

    x_inv comes back through the inverse transform of the kept bins and
    x_var is the remainder, so x_inv + x_var reconstructs the input to
    rounding error and the two live on orthogonal frequency supports.
    """
    h = gc.as_tensor(h)
    if h.ndim != 3:
        raise DimensionError(f"expected [B, T, D], got {h.shape}")
    T = h.shape[1]
    if mask.nbins != T // 2 + 1:
        raise DimensionError(
            f"mask has {mask.nbins} bins, sequence of length {T} needs {T // 2 + 1}"
        )
    spec = gc.rfft_axis(h, axis=1)  # [B, D, F, 2]
    kept = gc.mul_const(spec, mask.keep.astype(np.float64)[None, None, :, None])
    x_inv = gc.irfft_axis(kept, n=T, axis=1)
    x_var = gc.sub(h, x_inv)
    return SpectralSplit(x_inv=x_inv, x_var=x_var, mask=mask)


def update_mask_ema(running: np.ndarray, batch: np.ndarray, decay: float) -> np.ndarray:
    running = np.asarray(running, dtype=np.float64)
    batch = np.asarray(batch, dtype=np.float64)
    if running.shape != batch.shape:
        raise DimensionError(
            f"spectrum length mismatch: {running.shape} vs {batch.shape}"
        )
    if not 0.0 <= decay < 1.0:
        raise ConfigError(f"decay must be in [0, 1), got {decay}")
    return decay * running + (1.0 - decay) * batch


@dataclass
class SpectralState:
    """Online mask: an EMA of batch spectra, frozen at evaluation time.

    Until the first observation the mask falls back to a flat spectrum,
    which keeps the lowest ceil(alpha * nbins) bins.
    """

    nbins: int
    alpha: float
    decay: float = 0.99
    running: np.ndarray | None = None
    mask: FrequencyMask = field(init=False)

    def __post_init__(self):
        base = self.running if self.running is not None else np.ones(self.nbins)
        self.mask = select_mask(base, self.alpha)

    def observe(self, batch_spectrum: np.ndarray) -> None:
        if self.running is None:
            self.running = np.asarray(batch_spectrum, dtype=np.float64).copy()
        else:
            self.running = update_mask_ema(self.running, batch_spectrum, self.decay)
        self.mask = select_mask(self.running, self.alpha)

    # checkpoint round trip: [nbins, alpha, decay, keep..., running...]
    def pack(self) -> np.ndarray:
        running = self.running if self.running is not None else np.full(self.nbins, np.nan)
        return np.concatenate([
            [float(self.nbins), self.alpha, self.decay],
            self.mask.keep.astype(np.float64),
            running,
        ])

    @classmethod
    def unpack(cls, packed: np.ndarray) -> "SpectralState":
        nbins = int(packed[0])
        alpha, decay = float(packed[1]), float(packed[2])
        keep = packed[3 : 3 + nbins] > 0.5
        running = packed[3 + nbins : 3 + 2 * nbins]
        has_running = bool(np.isfinite(running).all())
        state = cls(nbins=nbins, alpha=alpha, decay=decay,
                    running=running.copy() if has_running else None)
        source = state.running if has_running else np.ones(nbins)
        state.mask = FrequencyMask(keep=keep, alpha=alpha, source_spectrum=source)
        return state
