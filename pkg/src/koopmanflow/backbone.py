"""Conditioned velocity-field network.

Action steps become tokens, conditioning (diffusion time, a per-step event
channel, a global context vector) modulates each block through AdaLN-Zero
and feeds a QK-normalized cross-attention. The block stack's output is
split spectrally and routed through the two latent transition operators;
their projections bypass any residual connection and sum to the predicted
velocity field.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import checkpoint as ckpt
from . import flatconfig
from . import gradcore as gc
from . import spectral
from .errors import ConfigError, ContractError, DimensionError
from .gradcore import DiffTensor
from .koopman import InvariantKoopman, LocalizedDMD

_FOURIER_STD = 4.0
_LN_EPS = 1e-6


@dataclass
class BackboneConfig:
    T: int = 16            # physical sequence length
    D: int = 2             # action dimension
    hidden: int = 32       # token width
    blocks: int = 2
    heads: int = 2
    fourier_dim: int = 16  # time-embedding width (sin+cos)
    dyn_dim: int = 16      # latent dynamic dimension
    alpha: float = 0.85    # cumulative spectral energy threshold
    context_dim: int = 8
    lam: float = 1e-3      # damping of the local operator fit
    mask_decay: float = 0.99
    seed: int = 0

    def __post_init__(self):
        if self.T < 4:
            raise ConfigError(f"T must be >= 4, got {self.T}")
        if self.hidden % self.heads != 0:
            raise ConfigError(f"hidden={self.hidden} not divisible by heads={self.heads}")
        if self.fourier_dim % 2 != 0:
            raise ConfigError("fourier_dim must be even (sin/cos pairs)")
        if not 0.0 < self.alpha <= 1.0:
            raise ConfigError(f"alpha must be in (0, 1], got {self.alpha}")


@dataclass
class Conditioning:
    """Per-step event channel plus a global context vector."""

    events: np.ndarray   # [B, T] in {0, 1}
    context: np.ndarray  # [B, C]


@dataclass
class VelocityFields:
    v_inv: DiffTensor
    v_var: DiffTensor
    v_total: DiffTensor  # constructed as v_inv + v_var, never recomputed


def gaussian_fourier_embed(t: np.ndarray, frequencies: np.ndarray) -> np.ndarray:
    """concat(sin(2*pi*f*t), cos(2*pi*f*t)) over frozen frequencies."""
    t = np.atleast_1d(np.asarray(t, dtype=np.float64))
    ang = 2.0 * np.pi * t[:, None] * frequencies[None, :]
    return np.concatenate([np.sin(ang), np.cos(ang)], axis=-1)


def modulate(x_norm: DiffTensor, scale: DiffTensor, shift: DiffTensor) -> DiffTensor:
    return gc.add(gc.mul(x_norm, gc.add(scale, 1.0)), shift)


def adaln_modulate(x, scale, shift, gate, eps: float = _LN_EPS) -> DiffTensor:
    """gate * (layer_norm(x) * (1 + scale) + shift)."""
    return gc.mul(gate, modulate(gc.layer_norm(x, eps), scale, shift))


def _affine3(x: DiffTensor, w: DiffTensor, b: DiffTensor | None) -> DiffTensor:
    B, T, H = x.shape
    flat = gc.matmul(gc.reshape(x, (B * T, H)), w)
    if b is not None:
        flat = gc.bias_add(flat, b)
    return gc.reshape(flat, (B, T, w.shape[1]))


class DiTBlock:
    """AdaLN-Zero conditioned cross-attention + pointwise MLP.

    The six modulation signals (scale/shift/gate twice) come from a
    zero-initialized projection of the condition embedding, so at init both
    branch contributions are exactly zero and the block is the identity.
    """

    def __init__(self, hidden: int, heads: int, rng: np.random.Generator):
        self.hidden = hidden
        self.heads = heads
        self.head_dim = hidden // heads
        s = hidden ** -0.5
        self.wq = gc.param(rng.normal(0.0, s, (hidden, hidden)))
        self.wk = gc.param(rng.normal(0.0, s, (hidden, hidden)))
        self.wv = gc.param(rng.normal(0.0, s, (hidden, hidden)))
        self.wo = gc.param(rng.normal(0.0, s, (hidden, hidden)))
        self.temp = gc.param(np.sqrt(self.head_dim))  # attention temperature
        self.mod_w = gc.param(np.zeros((hidden, 6 * hidden)))
        self.mod_b = gc.param(np.zeros(6 * hidden))
        self.w1 = gc.param(rng.normal(0.0, s, (hidden, 4 * hidden)))
        self.b1 = gc.param(np.zeros(4 * hidden))
        self.w2 = gc.param(rng.normal(0.0, (4 * hidden) ** -0.5, (4 * hidden, hidden)))
        self.b2 = gc.param(np.zeros(hidden))

    def _split_heads(self, x: DiffTensor) -> DiffTensor:
        B, L, H = x.shape
        return gc.transpose(
            gc.reshape(x, (B, L, self.heads, self.head_dim)), (0, 2, 1, 3)
        )

    def attention_weights(self, x_mod: DiffTensor, ctx: DiffTensor) -> DiffTensor:
        """Softmax weights of the QK-normalized cross attention."""
        q = gc.l2_normalize_lastdim(self._split_heads(_affine3(x_mod, self.wq, None)))
        k = gc.l2_normalize_lastdim(self._split_heads(_affine3(ctx, self.wk, None)))
        logits = gc.mul(gc.matmul(q, gc.transpose(k, (0, 1, 3, 2))), self.temp)
        return gc.softmax_lastdim(logits)

    def attend(self, x_mod: DiffTensor, ctx: DiffTensor) -> DiffTensor:
        B, T, H = x_mod.shape
        weights = self.attention_weights(x_mod, ctx)
        v = self._split_heads(_affine3(ctx, self.wv, None))
        mixed = gc.reshape(gc.transpose(gc.matmul(weights, v), (0, 2, 1, 3)), (B, T, H))
        return _affine3(mixed, self.wo, None)

    def __call__(self, tok: DiffTensor, ctx: DiffTensor, cond: DiffTensor) -> DiffTensor:
        B, T, H = tok.shape
        mod = gc.bias_add(gc.matmul(cond, self.mod_w), self.mod_b)
        s1, h1, g1, s2, h2, g2 = (
            gc.expand(gc.reshape(gc.narrow(mod, 1, i * H, H), (B, 1, H)), (B, T, H))
            for i in range(6)
        )
        attn_in = modulate(gc.layer_norm(tok, _LN_EPS), s1, h1)
        tok = gc.add(tok, gc.mul(g1, self.attend(attn_in, ctx)))
        mlp_in = modulate(gc.layer_norm(tok, _LN_EPS), s2, h2)
        mlp_out = _affine3(gc.silu(_affine3(mlp_in, self.w1, self.b1)), self.w2, self.b2)
        return gc.add(tok, gc.mul(g2, mlp_out))

    def named_params(self, prefix: str):
        for name in ("wq", "wk", "wv", "wo", "temp", "mod_w", "mod_b",
                     "w1", "b1", "w2", "b2"):
            yield prefix + name, getattr(self, name)


class KoopmanFlowModel:
    """Full velocity-field model: embeddings, DiT blocks, spectral split,
    dual transition operators, and the two bias-free velocity heads."""

    def __init__(self, cfg: BackboneConfig):
        self.cfg = cfg
        rng = np.random.default_rng(cfg.seed)
        H, D, T = cfg.hidden, cfg.D, cfg.T
        # frozen time-embedding frequencies
        self.time_freqs = rng.normal(0.0, _FOURIER_STD, cfg.fourier_dim // 2)
        self.t_w1 = gc.param(rng.normal(0.0, cfg.fourier_dim ** -0.5, (cfg.fourier_dim, H)))
        self.t_b1 = gc.param(np.zeros(H))
        self.t_w2 = gc.param(rng.normal(0.0, H ** -0.5, (H, H)))
        self.t_b2 = gc.param(np.zeros(H))
        self.ctx_w = gc.param(rng.normal(0.0, cfg.context_dim ** -0.5, (cfg.context_dim, H)))
        self.ctx_b = gc.param(np.zeros(H))
        self.event_w = gc.param(rng.normal(0.0, 1.0, (1, H)))
        self.event_b = gc.param(np.zeros(H))
        self.in_w = gc.param(rng.normal(0.0, D ** -0.5, (D, H)))
        self.in_b = gc.param(np.zeros(H))
        self.pos_act = gc.param(rng.normal(0.0, 0.02, (T, H)))
        self.pos_ctx = gc.param(rng.normal(0.0, 0.02, (T, H)))
        self.blocks = [DiTBlock(H, cfg.heads, rng) for _ in range(cfg.blocks)]
        self.inv_op = InvariantKoopman(H, cfg.dyn_dim, rng)
        self.var_op = LocalizedDMD(H, cfg.dyn_dim, T, rng, lam=cfg.lam)
        self.proj_inv = gc.param(rng.normal(0.0, H ** -0.5, (H, D)))
        self.proj_var = gc.param(rng.normal(0.0, H ** -0.5, (H, D)))
        self.spectral = spectral.SpectralState(
            nbins=T // 2 + 1, alpha=cfg.alpha, decay=cfg.mask_decay
        )

    # ------------------------------------------------------------------
    def _check_inputs(self, x: np.ndarray, cond: Conditioning, t: np.ndarray):
        cfg = self.cfg
        if x.ndim != 3 or x.shape[1] != cfg.T or x.shape[2] != cfg.D:
            raise DimensionError(f"expected [B, {cfg.T}, {cfg.D}], got {x.shape}")
        B = x.shape[0]
        if cond.events.shape != (B, cfg.T):
            raise DimensionError(f"events must be [{B}, {cfg.T}], got {cond.events.shape}")
        if cond.context.shape != (B, cfg.context_dim):
            raise DimensionError(
                f"context must be [{B}, {cfg.context_dim}], got {cond.context.shape}"
            )
        if np.any(t < 0.0) or np.any(t > 1.0):
            raise ContractError("diffusion time t must lie in [0, 1]")

    def _cond_vector(self, cond: Conditioning, t: np.ndarray):
        emb = DiffTensor(gaussian_fourier_embed(t, self.time_freqs))
        h = gc.silu(gc.bias_add(gc.matmul(emb, self.t_w1), self.t_b1))
        t_emb = gc.bias_add(gc.matmul(h, self.t_w2), self.t_b2)
        c_emb = gc.bias_add(gc.matmul(DiffTensor(cond.context), self.ctx_w), self.ctx_b)
        return gc.add(t_emb, c_emb), c_emb

    def _pos(self, table: DiffTensor, B: int) -> DiffTensor:
        T, H = table.shape
        return gc.expand(gc.reshape(table, (1, T, H)), (B, T, H))

    def token_path(self, x: DiffTensor) -> DiffTensor:
        """Action-token embedding before any block runs."""
        B = x.shape[0]
        return gc.add(_affine3(x, self.in_w, self.in_b), self._pos(self.pos_act, B))

    def hidden_representation(self, x, cond: Conditioning, t) -> DiffTensor:
        x = gc.as_tensor(x)
        t_arr = np.full(x.shape[0], float(t)) if np.ndim(t) == 0 else np.asarray(t, dtype=np.float64)
        self._check_inputs(x.data, cond, t_arr)
        B = x.shape[0]
        cond_vec, c_emb = self._cond_vector(cond, t_arr)
        ev = DiffTensor(cond.events[:, :, None].astype(np.float64))
        ev_tokens = gc.add(_affine3(ev, self.event_w, self.event_b),
                           self._pos(self.pos_ctx, B))
        ctx = gc.concat([gc.reshape(c_emb, (B, 1, self.cfg.hidden)), ev_tokens], axis=1)
        tok = self.token_path(x)
        for block in self.blocks:
            tok = block(tok, ctx, cond_vec)
        return tok

    def forward(self, x, cond: Conditioning, t, training: bool = False,
                fast_local: bool | None = None):
        """Run the network; returns (VelocityFields, batch amplitude spectrum).

        The spectrum is collected only when ``training`` so the trainer can
        advance the mask EMA after the step; evaluation forwards leave the
        mask frozen and use the truncated-SVD local fit unless told otherwise.
        """
        if fast_local is None:
            fast_local = not training
        h_in = self.hidden_representation(x, cond, t)
        spectrum = spectral.amplitude_spectrum(h_in.data) if training else None
        split = spectral.fourier_filter(h_in, self.spectral.mask)
        h_inv = self.inv_op(split.x_inv)
        h_var = self.var_op(split.x_var, use_svd=fast_local)
        v_inv = _affine3(h_inv, self.proj_inv, None)
        v_var = _affine3(h_var, self.proj_var, None)
        fields = VelocityFields(v_inv, v_var, gc.add(v_inv, v_var))
        return fields, spectrum

    # ------------------------------------------------------------------
    def parameters(self) -> dict[str, DiffTensor]:
        out: dict[str, DiffTensor] = {}
        for name in ("t_w1", "t_b1", "t_w2", "t_b2", "ctx_w", "ctx_b",
                     "event_w", "event_b", "in_w", "in_b", "pos_act", "pos_ctx"):
            out["backbone." + name] = getattr(self, name)
        for i, block in enumerate(self.blocks):
            out.update(block.named_params(f"backbone.blocks.{i}."))
        out.update(self.inv_op.named_params())
        out.update(self.var_op.named_params())
        out["backbone.proj_inv"] = self.proj_inv
        out["backbone.proj_var"] = self.proj_var
        return out

    def buffers(self) -> dict[str, np.ndarray]:
        return {"backbone.time_freqs": self.time_freqs}

    def config_text(self) -> str:
        return flatconfig.format_kv(flatconfig.dataclass_to_kv(self.cfg))

    def save(self, path) -> None:
        arrays: dict[str, np.ndarray] = {"config": ckpt.encode_text(self.config_text())}
        arrays.update({name: p.data for name, p in self.parameters().items()})
        arrays.update(self.buffers())
        arrays[spectral.MASK_KEY] = self.spectral.pack()
        ckpt.save_container(path, arrays)

    @classmethod
    def load(cls, path) -> "KoopmanFlowModel":
        arrays = ckpt.load_container(path)
        cfg = flatconfig.dataclass_from_kv(
            BackboneConfig, flatconfig.parse_kv(ckpt.decode_text(arrays["config"]))
        )
        model = cls(cfg)
        model.load_arrays(arrays)
        return model

    def load_arrays(self, arrays: dict[str, np.ndarray]) -> None:
        for name, p in self.parameters().items():
            if arrays[name].shape != p.data.shape:
                raise ContractError(f"checkpoint shape drift for {name}")
            p.data = arrays[name].astype(np.float64).copy()
        self.time_freqs = arrays["backbone.time_freqs"].copy()
        self.spectral = spectral.SpectralState.unpack(arrays[spectral.MASK_KEY])

    def clone(self) -> "KoopmanFlowModel":
        """Structural copy with identical weights; the spectral state object
        is shared so student and teacher always see one mask."""
        twin = KoopmanFlowModel(self.cfg)
        for name, p in twin.parameters().items():
            p.data = self.parameters()[name].data.copy()
        twin.time_freqs = self.time_freqs.copy()
        twin.spectral = self.spectral
        return twin
