"""Hourglass spatial-temporal transformer for farm-level power forecasting.

The encoder embeds the raw channel grid, runs stacks of residual layers
that attend along time (per turbine) and across turbines (per timestep),
and max-pools the temporal axis between stacks to form a pyramid of
coarser scales. The decoder starts from a zero-feature future grid that
carries only time positions and turbine identity, runs mirrored layers
with cross-attention into the same-scale encoder outputs, and restores
finer scales with stride-expanding up-convolutions, optionally merging
same-scale encoder outputs through skip concatenation. The original-scale
encoder and decoder outputs are concatenated channel-wise and regressed
to one power value per turbine per future step.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Optional

import numpy as np

from .autodiff import (
    RngStream,
    Tensor,
    add,
    concat,
    dropout,
    matmul,
    maxpool1d,
    mix,
    permute,
    pointwise_conv,
    reshape,
    scale,
    softmax_rows,
    transpose_last2,
    upconv1d,
)
from .errors import ConfigError, ContractError, ShapeError

VARIANT_NAMES = ("hsttn", "sttn", "2sttn", "4sttn", "noskip", "t_only", "s_only", "st_only")


@dataclass(frozen=True)
class ModelConfig:
    n_turbines: int
    history_len: int
    horizon_len: int
    n_channels: int
    d_model: int = 16
    n_heads: int = 2
    d_k: Optional[int] = None
    d_v: Optional[int] = None
    pool_factors: tuple[int, ...] = (3, 2)
    layers_encoder: int = 2
    layers_decoder: int = 1
    dropout_rate: float = 0.1
    use_skip: bool = True
    use_temporal_branch: bool = True
    use_spatial_branch: bool = True
    use_cfb: bool = True

    @property
    def head_dim_k(self) -> int:
        return self.d_k if self.d_k is not None else self.d_model // self.n_heads

    @property
    def head_dim_v(self) -> int:
        return self.d_v if self.d_v is not None else self.d_model // self.n_heads

    @property
    def fused(self) -> bool:
        """Both branches active and joined by the contextual fusion block."""
        return self.use_cfb and self.use_temporal_branch and self.use_spatial_branch

    @property
    def branch_names(self) -> tuple[str, ...]:
        if self.fused:
            return ("st",)
        names = []
        if self.use_temporal_branch:
            names.append("tem")
        if self.use_spatial_branch:
            names.append("spa")
        return tuple(names)

    @property
    def n_scales(self) -> int:
        return len(self.pool_factors) + 1

    @property
    def scale_lengths(self) -> tuple[int, ...]:
        lengths = [self.history_len]
        for p in self.pool_factors:
            lengths.append(lengths[-1] // p)
        return tuple(lengths)

    def validate(self) -> None:
        for name in ("n_turbines", "history_len", "horizon_len", "n_channels", "d_model",
                     "n_heads", "layers_encoder", "layers_decoder"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be positive, got {getattr(self, name)}")
        if self.d_model % self.n_heads != 0:
            raise ConfigError(
                f"d_model={self.d_model} must be divisible by n_heads={self.n_heads}"
            )
        if not self.use_temporal_branch and not self.use_spatial_branch:
            raise ConfigError("at least one of the temporal/spatial branches must be enabled")
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ConfigError(f"dropout_rate must be in [0, 1), got {self.dropout_rate}")
        if self.history_len != self.horizon_len:
            raise ConfigError(
                f"history_len={self.history_len} must equal horizon_len={self.horizon_len}: "
                "the regression head concatenates original-scale encoder and decoder outputs"
            )
        running = 1
        for p in self.pool_factors:
            if p < 1:
                raise ConfigError(f"pooling factors must be positive, got {self.pool_factors}")
            running *= p
            if self.history_len % running != 0:
                raise ConfigError(
                    f"history_len={self.history_len} is not divisible by the cumulative "
                    f"pooling factor {running} (factors {self.pool_factors})"
                )


def variant_config(base: ModelConfig, name: str) -> ModelConfig:
    """Structural ablations expressed as config edits of a base model."""
    if name == "hsttn":
        return replace(base, pool_factors=(3, 2), use_skip=True,
                       use_temporal_branch=True, use_spatial_branch=True, use_cfb=True)
    if name == "sttn":
        return replace(base, pool_factors=())
    if name == "2sttn":
        return replace(base, pool_factors=(3,))
    if name == "4sttn":
        return replace(base, pool_factors=(3, 2, 2))
    if name == "noskip":
        return replace(base, use_skip=False)
    if name == "t_only":
        return replace(base, use_spatial_branch=False)
    if name == "s_only":
        return replace(base, use_temporal_branch=False)
    if name == "st_only":
        return replace(base, use_cfb=False)
    raise ConfigError(f"unknown variant {name!r}, expected one of {VARIANT_NAMES}")


def sinusoid_table(length: int, width: int) -> np.ndarray:
    """Fixed sin/cos position table over absolute time indices."""
    pos = np.arange(length, dtype=np.float64)[:, None]
    half = (width + 1) // 2
    freq = np.power(10000.0, -2.0 * np.arange(half, dtype=np.float64) / width)
    angles = pos * freq[None, :]
    table = np.zeros((length, width), dtype=np.float64)
    table[:, 0::2] = np.sin(angles)
    table[:, 1::2] = np.cos(angles[:, : width // 2])
    return table


class ModelParameters:
    """Named tensor store; every shape is derivable from the config."""

    def __init__(self):
        self._tensors: dict[str, Tensor] = {}

    def add_param(self, name: str, array: np.ndarray) -> Tensor:
        t = Tensor(array, requires_grad=True)
        self._tensors[name] = t
        return t

    def add_buffer(self, name: str, array: np.ndarray) -> Tensor:
        t = Tensor(array, requires_grad=False)
        self._tensors[name] = t
        return t

    def __getitem__(self, name: str) -> Tensor:
        return self._tensors[name]

    def __contains__(self, name: str) -> bool:
        return name in self._tensors

    def items(self):
        return self._tensors.items()

    def names(self) -> list[str]:
        return list(self._tensors)

    def trainable(self) -> dict[str, Tensor]:
        return {k: t for k, t in self._tensors.items() if t.requires_grad}

    def zero_grad(self) -> None:
        for t in self._tensors.values():
            t.zero_grad()

    def state_arrays(self) -> dict[str, np.ndarray]:
        return {k: t.data.copy() for k, t in self._tensors.items()}

    def load_arrays(self, arrays: dict[str, np.ndarray]) -> None:
        if set(arrays) != set(self._tensors):
            missing = set(self._tensors) - set(arrays)
            extra = set(arrays) - set(self._tensors)
            raise ContractError(
                f"parameter names do not match this architecture "
                f"(missing {sorted(missing)}, unexpected {sorted(extra)})"
            )
        for name, t in self._tensors.items():
            arr = np.asarray(arrays[name], dtype=np.float64)
            if arr.shape != t.data.shape:
                raise ContractError(
                    f"parameter {name!r} has shape {arr.shape}, expected {t.data.shape}"
                )
            t.data = arr.copy()

    @classmethod
    def build(cls, cfg: ModelConfig, rng: RngStream) -> "ModelParameters":
        store = cls()

        def glorot(name: str, shape: tuple[int, ...]) -> None:
            fan_in = int(np.prod(shape[:-1]))
            fan_out = int(shape[-1])
            limit = math.sqrt(6.0 / (fan_in + fan_out))
            store.add_param(name, rng.uniform(shape, -limit, limit))

        def zeros(name: str, shape: tuple[int, ...]) -> None:
            store.add_param(name, np.zeros(shape, dtype=np.float64))

        def attn(prefix: str) -> None:
            d, h = cfg.d_model, cfg.n_heads
            glorot(f"{prefix}.wq", (d, h * cfg.head_dim_k))
            glorot(f"{prefix}.wk", (d, h * cfg.head_dim_k))
            glorot(f"{prefix}.wv", (d, h * cfg.head_dim_v))
            glorot(f"{prefix}.wo", (h * cfg.head_dim_v, d))

        d = cfg.d_model
        glorot("embed.w", (cfg.n_channels, d))
        zeros("embed.b", (d,))
        glorot("turbine_table", (cfg.n_turbines, d))
        store.add_buffer("pos_table", sinusoid_table(cfg.history_len + cfg.horizon_len, d))

        for s in range(cfg.n_scales):
            for layer in range(cfg.layers_encoder):
                prefix = f"enc.s{s}.l{layer}"
                if cfg.use_temporal_branch:
                    attn(f"{prefix}.tem")
                if cfg.use_spatial_branch:
                    attn(f"{prefix}.spa")
                if cfg.fused:
                    glorot(f"{prefix}.cfb.w", (2 * d, d))
                    zeros(f"{prefix}.cfb.b", (d,))
        for s in range(cfg.n_scales):
            for layer in range(cfg.layers_decoder):
                prefix = f"dec.s{s}.l{layer}"
                if cfg.use_temporal_branch:
                    attn(f"{prefix}.tem.self")
                    attn(f"{prefix}.tem.cross")
                if cfg.use_spatial_branch:
                    attn(f"{prefix}.spa.self")
                    attn(f"{prefix}.spa.cross")
                if cfg.fused:
                    glorot(f"{prefix}.cfb.w", (2 * d, d))
                    zeros(f"{prefix}.cfb.b", (d,))
        up_in = 2 * d if cfg.use_skip else d
        for t, factor in enumerate(cfg.pool_factors):
            for branch in cfg.branch_names:
                glorot(f"up.t{t}.{branch}.w", (factor, up_in, d))
                zeros(f"up.t{t}.{branch}.b", (d,))
        glorot("head.w", (2 * d, 1))
        zeros("head.b", (1,))
        return store


@dataclass
class ScaleTrace:
    """Observable record of one forward pass: per-scale sequence lengths,
    retained encoder outputs, and (optionally) raw attention weights."""

    collect_probs: bool = False
    encoder_lengths: list[int] = field(default_factory=list)
    decoder_lengths: list[int] = field(default_factory=list)
    encoder_states: list[dict[str, Tensor]] = field(default_factory=list)
    attention_probs: list[np.ndarray] = field(default_factory=list)

    def reset(self) -> None:
        self.encoder_lengths.clear()
        self.decoder_lengths.clear()
        self.encoder_states.clear()
        self.attention_probs.clear()


@dataclass
class AttentionWeights:
    wq: Tensor
    wk: Tensor
    wv: Tensor
    wo: Tensor

    @classmethod
    def from_store(cls, store: ModelParameters, prefix: str) -> "AttentionWeights":
        return cls(store[f"{prefix}.wq"], store[f"{prefix}.wk"],
                   store[f"{prefix}.wv"], store[f"{prefix}.wo"])


def attention(
    query_seqs: Tensor,
    kv_seqs: Tensor,
    weights: AttentionWeights,
    n_heads: int,
    trace: ScaleTrace | None = None,
) -> Tensor:
    """Scaled dot-product attention with `n_heads` heads.

    `query_seqs` is (B, Lq, d) or a single (Lq, d) sequence; keys/values
    come from `kv_seqs` with matching batching. Softmax rows and the
    weighted value mix both accumulate order-independently, so outputs do
    not depend on how positions along the attended axis are enumerated.
    """
    squeeze = query_seqs.ndim == 2
    if squeeze:
        query_seqs = reshape(query_seqs, (1,) + query_seqs.shape)
        kv_seqs = reshape(kv_seqs, (1,) + kv_seqs.shape)
    if query_seqs.ndim != 3 or kv_seqs.ndim != 3:
        raise ShapeError(
            f"attention expects (B, L, d) inputs, got {query_seqs.shape} and {kv_seqs.shape}"
        )
    batch, lq = query_seqs.shape[:2]
    dk = weights.wq.shape[1] // n_heads
    dv = weights.wv.shape[1] // n_heads

    def split_heads(t: Tensor, width: int) -> Tensor:
        t = reshape(t, (batch, t.shape[1], n_heads, width))
        return permute(t, (0, 2, 1, 3))

    q = split_heads(matmul(query_seqs, weights.wq), dk)
    k = split_heads(matmul(kv_seqs, weights.wk), dk)
    v = split_heads(matmul(kv_seqs, weights.wv), dv)
    scores = scale(matmul(q, transpose_last2(k)), 1.0 / math.sqrt(dk))
    probs = softmax_rows(scores)
    if trace is not None and trace.collect_probs:
        trace.attention_probs.append(probs.data.copy())
    ctx = mix(probs, v)
    ctx = reshape(permute(ctx, (0, 2, 1, 3)), (batch, lq, n_heads * dv))
    out = matmul(ctx, weights.wo)
    if squeeze:
        out = reshape(out, (lq, out.shape[2]))
    return out


def msa(x: Tensor, weights: AttentionWeights, n_heads: int,
        trace: ScaleTrace | None = None) -> Tensor:
    """Multi-head self-attention over one sequence or a batch of them."""
    return attention(x, x, weights, n_heads, trace)


def cross_attention(dec: Tensor, enc: Tensor, weights: AttentionWeights, n_heads: int,
                    trace: ScaleTrace | None = None) -> Tensor:
    """Attention with queries from the decoder and keys/values from the
    same-scale encoder output."""
    return attention(dec, enc, weights, n_heads, trace)


def contextual_fusion(attn_tem: Tensor, attn_spa: Tensor, w: Tensor, b: Tensor
                      ) -> tuple[Tensor, Tensor]:
    """Join the two branch outputs into one enhanced map.

    `attn_tem` is turbine-major (N, L, d); `attn_spa` is timestep-major
    (L, N, d). Both are stacked to the grid shape, concatenated along
    channels (spatial block first), squeezed back to d channels by a 1x1
    conv with ReLU, and returned as the two decoupled views.
    """
    if attn_tem.ndim != 3 or attn_spa.ndim != 3:
        raise ShapeError(
            f"contextual_fusion expects 3-D branch maps, got {attn_tem.shape}, {attn_spa.shape}"
        )
    n, length, d = attn_tem.shape
    if attn_spa.shape != (length, n, d):
        raise ShapeError(
            f"branch shapes disagree: temporal {attn_tem.shape} vs spatial {attn_spa.shape}"
        )
    fused = _fuse_maps(permute(attn_spa, (1, 0, 2)), attn_tem, w, b)
    return fused, permute(fused, (1, 0, 2))


def _fuse_maps(spa_map: Tensor, tem_map: Tensor, w: Tensor, b: Tensor) -> Tensor:
    # both maps turbine-major (N, L, d); spatial channels lead the concat
    return pointwise_conv(concat([spa_map, tem_map], axis=2), w, b, activation=True)


def _spatial_view(m: Tensor) -> Tensor:
    return permute(m, (1, 0, 2))


class EncoderLayer:
    """Residual layer: branch attentions, contextual fusion, add input."""

    def __init__(self, store: ModelParameters, prefix: str, cfg: ModelConfig):
        self.cfg = cfg
        if cfg.use_temporal_branch:
            self.tem = AttentionWeights.from_store(store, f"{prefix}.tem")
        if cfg.use_spatial_branch:
            self.spa = AttentionWeights.from_store(store, f"{prefix}.spa")
        if cfg.fused:
            self.fuse_w = store[f"{prefix}.cfb.w"]
            self.fuse_b = store[f"{prefix}.cfb.b"]

    def __call__(self, state: dict[str, Tensor], trace: ScaleTrace | None = None
                 ) -> dict[str, Tensor]:
        cfg = self.cfg
        if cfg.fused:
            m = state["st"]
            a_tem = msa(m, self.tem, cfg.n_heads, trace)
            a_spa_t = _spatial_view(msa(_spatial_view(m), self.spa, cfg.n_heads, trace))
            fused = _fuse_maps(a_spa_t, a_tem, self.fuse_w, self.fuse_b)
            return {"st": add(fused, m)}
        out = {}
        if cfg.use_temporal_branch:
            out["tem"] = add(msa(state["tem"], self.tem, cfg.n_heads, trace), state["tem"])
        if cfg.use_spatial_branch:
            a = _spatial_view(msa(_spatial_view(state["spa"]), self.spa, cfg.n_heads, trace))
            out["spa"] = add(a, state["spa"])
        return out


class DecoderLayer:
    """Mirrors the encoder layer with an extra cross-attention into the
    same-scale encoder output; the cross path is residual, so a zero
    encoder contribution degrades the layer to encoder-layer behavior."""

    def __init__(self, store: ModelParameters, prefix: str, cfg: ModelConfig):
        self.cfg = cfg
        if cfg.use_temporal_branch:
            self.tem_self = AttentionWeights.from_store(store, f"{prefix}.tem.self")
            self.tem_cross = AttentionWeights.from_store(store, f"{prefix}.tem.cross")
        if cfg.use_spatial_branch:
            self.spa_self = AttentionWeights.from_store(store, f"{prefix}.spa.self")
            self.spa_cross = AttentionWeights.from_store(store, f"{prefix}.spa.cross")
        if cfg.fused:
            self.fuse_w = store[f"{prefix}.cfb.w"]
            self.fuse_b = store[f"{prefix}.cfb.b"]

    def __call__(self, state: dict[str, Tensor], enc_state: dict[str, Tensor],
                 expected_enc_len: int, trace: ScaleTrace | None = None) -> dict[str, Tensor]:
        cfg = self.cfg
        for key, enc in enc_state.items():
            if enc.shape[-2] != expected_enc_len:
                raise ContractError(
                    f"encoder output for branch {key!r} has length {enc.shape[-2]}, "
                    f"expected the scale length {expected_enc_len}"
                )

        def tem_branch(m: Tensor, enc: Tensor) -> Tensor:
            s = msa(m, self.tem_self, cfg.n_heads, trace)
            return add(cross_attention(s, enc, self.tem_cross, cfg.n_heads, trace), s)

        def spa_branch(m: Tensor, enc: Tensor) -> Tensor:
            s = msa(_spatial_view(m), self.spa_self, cfg.n_heads, trace)
            c = add(cross_attention(s, _spatial_view(enc), self.spa_cross, cfg.n_heads, trace), s)
            return _spatial_view(c)

        if cfg.fused:
            m, enc = state["st"], enc_state["st"]
            if enc.shape[-2] != m.shape[-2]:
                raise ContractError(
                    f"decoder length {m.shape[-2]} does not match encoder length "
                    f"{enc.shape[-2]} at this scale"
                )
            c_tem = tem_branch(m, enc)
            c_spa_t = spa_branch(m, enc)
            fused = _fuse_maps(c_spa_t, c_tem, self.fuse_w, self.fuse_b)
            return {"st": add(fused, m)}
        out = {}
        if cfg.use_temporal_branch:
            out["tem"] = add(tem_branch(state["tem"], enc_state["tem"]), state["tem"])
        if cfg.use_spatial_branch:
            out["spa"] = add(spa_branch(state["spa"], enc_state["spa"]), state["spa"])
        return out


def build_decoder_input(future_positions: np.ndarray, n_turbines: int, n_channels: int
                        ) -> Tensor:
    """Decoder entry features: all channels zero. Time positions and
    turbine identity are attached later by the shared embedding, so the
    decoder sees only when and which turbine it is predicting for."""
    future_positions = np.asarray(future_positions)
    if future_positions.ndim != 1 or future_positions.size < 1:
        raise ContractError("future_positions must be a non-empty 1-D index array")
    return Tensor(np.zeros((n_turbines, future_positions.size, n_channels)))


class HSTTN:
    """The assembled forecaster. `forward` maps a (N, H, C) history grid
    to (N, F, 1) power predictions."""

    def __init__(self, config: ModelConfig, params: ModelParameters | None = None,
                 seed: int = 0):
        config.validate()
        self.config = config
        self.params = params if params is not None else ModelParameters.build(
            config, RngStream(seed).child(0))
        cfg = config
        self.enc_layers = [
            [EncoderLayer(self.params, f"enc.s{s}.l{l}", cfg) for l in range(cfg.layers_encoder)]
            for s in range(cfg.n_scales)
        ]
        self.dec_layers = [
            [DecoderLayer(self.params, f"dec.s{s}.l{l}", cfg) for l in range(cfg.layers_decoder)]
            for s in range(cfg.n_scales)
        ]

    def _embed(self, x: Tensor, positions: np.ndarray) -> Tensor:
        cfg = self.config
        if x.ndim != 3 or x.shape[0] != cfg.n_turbines or x.shape[2] != cfg.n_channels:
            raise ShapeError(
                f"expected input shape ({cfg.n_turbines}, L, {cfg.n_channels}), got {x.shape}"
            )
        f = pointwise_conv(x, self.params["embed.w"], self.params["embed.b"], activation=True)
        pos = Tensor(self.params["pos_table"].data[positions])
        f = add(f, pos)
        turb = reshape(self.params["turbine_table"], (cfg.n_turbines, 1, cfg.d_model))
        return add(f, turb)

    def embed_inputs(self, x: Tensor) -> tuple[Tensor, Tensor]:
        """Embed a history grid and return its two decoupled views:
        turbine-major (N, L, d) and timestep-major (L, N, d)."""
        m = self._embed(x, np.arange(x.shape[1]))
        return m, permute(m, (1, 0, 2))

    def _init_state(self, m: Tensor) -> dict[str, Tensor]:
        return {name: m for name in self.config.branch_names}

    @staticmethod
    def _pool_state(state: dict[str, Tensor], p: int) -> dict[str, Tensor]:
        return {k: maxpool1d(v, p) for k, v in state.items()}

    def forward(self, x: Tensor, training: bool = False, rng: RngStream | None = None,
                trace: ScaleTrace | None = None) -> Tensor:
        cfg = self.config
        if x.shape != (cfg.n_turbines, cfg.history_len, cfg.n_channels):
            raise ShapeError(
                f"expected history of shape ({cfg.n_turbines}, {cfg.history_len}, "
                f"{cfg.n_channels}), got {x.shape}"
            )
        if trace is None:
            trace = ScaleTrace()
        else:
            trace.reset()

        state = self._init_state(self._embed(x, np.arange(cfg.history_len)))
        n_transitions = len(cfg.pool_factors)
        for s in range(cfg.n_scales):
            for layer in self.enc_layers[s]:
                state = layer(state, trace)
            trace.encoder_lengths.append(next(iter(state.values())).shape[-2])
            trace.encoder_states.append(state)
            if s < n_transitions:
                state = self._pool_state(state, cfg.pool_factors[s])

        future_positions = np.arange(cfg.history_len, cfg.history_len + cfg.horizon_len)
        dec_in = build_decoder_input(future_positions, cfg.n_turbines, cfg.n_channels)
        dstate = self._init_state(self._embed(dec_in, future_positions))
        total = int(np.prod(cfg.pool_factors)) if cfg.pool_factors else 1
        if total > 1:
            dstate = self._pool_state(dstate, total)

        for s in range(cfg.n_scales - 1, -1, -1):
            trace.decoder_lengths.append(next(iter(dstate.values())).shape[-2])
            for layer in self.dec_layers[s]:
                dstate = layer(dstate, trace.encoder_states[s], trace.encoder_lengths[s], trace)
            if s > 0:
                t = s - 1
                merged = {}
                for key, m in dstate.items():
                    if cfg.use_skip:
                        m = concat([m, trace.encoder_states[s][key]], axis=2)
                    merged[key] = upconv1d(
                        m, self.params[f"up.t{t}.{key}.w"], self.params[f"up.t{t}.{key}.b"])
                dstate = merged

        enc0 = trace.encoder_states[0]
        if cfg.fused:
            head_in = concat([enc0["st"], dstate["st"]], axis=2)
        elif cfg.use_temporal_branch and cfg.use_spatial_branch:
            head_in = concat([dstate["tem"], dstate["spa"]], axis=2)
        elif cfg.use_temporal_branch:
            head_in = concat([enc0["tem"], dstate["tem"]], axis=2)
        else:
            head_in = concat([enc0["spa"], dstate["spa"]], axis=2)
        return self.regress(head_in, training=training, rng=rng)

    def regress(self, features: Tensor, training: bool = False,
                rng: RngStream | None = None) -> Tensor:
        cfg = self.config
        if features.shape[-1] != 2 * cfg.d_model:
            raise ShapeError(
                f"regression head expects {2 * cfg.d_model} channels, got {features.shape[-1]}"
            )
        h = dropout(features, cfg.dropout_rate, training, rng)
        return add(matmul(h, self.params["head.w"]), self.params["head.b"])

    def predict(self, history: np.ndarray) -> np.ndarray:
        """Inference without gradient recording; returns (N, F, 1)."""
        return self.forward(Tensor(history)).data


def make_variant(config: ModelConfig, seed: int = 0) -> HSTTN:
    """Build a model for any valid configuration, including the structural
    ablations produced by `variant_config`."""
    return HSTTN(config, seed=seed)
