"""The compression network: transforms, hyperprior models, context model and parameter model.

Variants share one class; each variant instantiates only the branches it uses.
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import asdict, dataclass, field
from typing import Optional

import numpy as np

from . import tensor as T
from .entropy import FactorizedPrior, GaussianConditional, gaussian_likelihood, quantize, rate_bits
from .layers import (
    LEAKY_SLOPE,
    GDN,
    AttentionBlock,
    Conv2d,
    ConvTranspose2d,
    Linear,
    MaskedConv2d,
    MlpBlock,
    Module,
    param,
)
from .tensor import Tensor

REFERENCE_LAMBDAS = (0.0018, 0.0035, 0.0067, 0.0130, 0.0250, 0.0483)

VARIANT_IDS = {
    "informer": 0,
    "context_hyperprior": 1,
    "hyperprior_only": 2,
    "context_only": 3,
    "global_context": 4,
    "informer_wo_local": 5,
    "informer_wo_global": 6,
    "informer_local_query": 7,
}
VARIANT_NAMES = {v: k for k, v in VARIANT_IDS.items()}

_GLOBAL = {"informer", "informer_wo_local", "informer_local_query"}
_LOCAL = {"informer", "informer_wo_global", "informer_local_query"}
_HYPER = {"context_hyperprior", "hyperprior_only", "global_context"}
_MLP_BLOCK = {"informer", "informer_wo_local", "informer_wo_global", "context_only",
              "informer_local_query"}

# spreads untrained latents over several quantization bins
LATENT_GAIN = 40.0
SIGMA_INIT = 2.0

_DTYPES = {"float64": np.float64, "float32": np.float32}


@dataclass
class ModelConfig:
    latent_channels: int = 32
    num_tokens: int = 8
    num_heads: int = 4
    transform_channels: int = 32
    variant: str = "informer"
    lmbda: float = 0.0067
    seed: int = 0
    dtype: str = "float64"

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        c = self.latent_channels
        if c <= 0 or c % 16:
            raise ValueError(f"latent_channels must be a positive multiple of 16, got {c}")
        if self.num_tokens <= 0 or c % self.num_tokens:
            raise ValueError(f"latent_channels {c} must be divisible by num_tokens {self.num_tokens}")
        if c % self.num_heads or (2 * c) % self.num_heads:
            raise ValueError("num_heads must divide the attention widths")
        if self.variant not in VARIANT_IDS:
            raise ValueError(f"unknown variant {self.variant!r}; choose from {sorted(VARIANT_IDS)}")
        if not self.lmbda > 0:
            raise ValueError("lmbda must be positive")
        if self.dtype not in _DTYPES:
            raise ValueError(f"dtype must be one of {sorted(_DTYPES)}")

    @property
    def np_dtype(self):
        return _DTYPES[self.dtype]

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ValueError(f"unknown model config keys: {sorted(unknown)}")
        return cls(**d)


@dataclass
class LatentState:
    """Latent, hyperpriors and their quantized forms for one image."""

    y: np.ndarray
    y_hat: np.ndarray
    z_g: Optional[np.ndarray] = None
    z_g_hat: Optional[np.ndarray] = None
    z_l: Optional[np.ndarray] = None
    z_l_hat: Optional[np.ndarray] = None
    z_h: Optional[np.ndarray] = None
    z_h_hat: Optional[np.ndarray] = None


@dataclass
class DistributionParams:
    mu: np.ndarray
    sigma: np.ndarray


@dataclass
class SideFeatures:
    """Decoded hyperprior features in row layout, ready for the parameter model."""

    psi_g: Optional[Tensor] = None
    psi_l: Optional[Tensor] = None
    psi_h: Optional[Tensor] = None
    keys: list = field(default_factory=list)


def _rows(t: Tensor) -> Tensor:
    """``[..., H, W, D]`` -> ``[..., H*W, D]``."""
    return t.reshape(*t.shape[:-3], t.shape[-3] * t.shape[-2], t.shape[-1])


def causal_attention_mask(length: int) -> np.ndarray:
    """Additive mask letting row ``i`` see columns ``j < i`` only."""
    allowed = np.tril(np.ones((length, length), dtype=bool), k=-1)
    return np.where(allowed, 0.0, -1e9)


class CompressionModel(Module):
    def __init__(self, config: ModelConfig):
        self.config = config
        cfg = config
        rng = T.RngState(cfg.seed)
        dt = cfg.np_dtype
        C, Tc, N, heads = cfg.latent_channels, cfg.transform_channels, cfg.num_tokens, cfg.num_heads
        v = cfg.variant
        self.variant = v
        self.uses_context = v != "hyperprior_only"
        self.uses_global = v in _GLOBAL
        self.uses_local = v in _LOCAL
        self.uses_hyper = v in _HYPER
        self.uses_global_context = v == "global_context"

        down = (2, 1)
        self.analysis = [
            Conv2d(3, Tc, 5, rng, 2, down, dt), GDN(Tc, dtype=dt),
            Conv2d(Tc, Tc, 5, rng, 2, down, dt), GDN(Tc, dtype=dt),
            Conv2d(Tc, Tc, 5, rng, 2, down, dt), GDN(Tc, dtype=dt),
            Conv2d(Tc, C, 5, rng, 2, down, dt, gain=LATENT_GAIN),
        ]
        self.synthesis = [
            ConvTranspose2d(C, Tc, 5, rng, dtype=dt, gain=1.0 / LATENT_GAIN),
            GDN(Tc, inverse=True, dtype=dt),
            ConvTranspose2d(Tc, Tc, 5, rng, dtype=dt), GDN(Tc, inverse=True, dtype=dt),
            ConvTranspose2d(Tc, Tc, 5, rng, dtype=dt), GDN(Tc, inverse=True, dtype=dt),
            ConvTranspose2d(Tc, 3, 5, rng, dtype=dt),
        ]
        self.synthesis[-1].bias.data[:] = 0.5

        if self.uses_context:
            self.context = MaskedConv2d(C, 2 * C, rng, dtype=dt)
        if self.uses_global:
            self.global_tokens = param(rng.normal((N, C)), dt)
            self.global_attn = AttentionBlock(C, heads, rng, dtype=dt)
            self.global_mlp = MlpBlock(C, rng, dtype=dt)
            self.global_out = Linear(C, C // N, rng, dt)
            self.global_decoder = Linear(C // N, 2 * C, rng, dt)
            self.global_prior = FactorizedPrior(C // N, rng, dtype=dt)
        if self.uses_local:
            self.local_encoder = [Linear(C, C, rng, dt), Linear(C, C // 2, rng, dt),
                                  Linear(C // 2, C // 16, rng, dt)]
            self.local_decoder = [Linear(C // 16, C // 2, rng, dt), Linear(C // 2, C, rng, dt),
                                  Linear(C, 2 * C, rng, dt)]
            self.local_prior = FactorizedPrior(C // 16, rng, dtype=dt)
        if self.uses_hyper:
            self.hyper_encoder = [Conv2d(C, C, 5, rng, 1, 2, dt), Conv2d(C, C, 5, rng, 2, down, dt),
                                  Conv2d(C, C, 5, rng, 2, down, dt)]
            self.hyper_decoder = [ConvTranspose2d(C, C, 5, rng, dtype=dt),
                                  ConvTranspose2d(C, C, 5, rng, dtype=dt),
                                  Conv2d(C, 2 * C, 5, rng, 1, 2, dt)]
            self.hyper_prior = FactorizedPrior(C, rng, dtype=dt)
        if self.uses_global_context:
            self.gcm_attn = AttentionBlock(2 * C, heads, rng, self_attention=True, dtype=dt)
            self.gcm_mlp = MlpBlock(2 * C, rng, dtype=dt)
        if self.uses_global:
            self.pm_attn = AttentionBlock(2 * C, heads, rng, dtype=dt)
        if v in _MLP_BLOCK:
            self.pm_mlp = MlpBlock(2 * C, rng, dtype=dt)
        in_dim = {"informer": 4, "informer_wo_global": 4, "informer_local_query": 4,
                  "informer_wo_local": 2, "context_only": 2, "context_hyperprior": 4,
                  "global_context": 4, "hyperprior_only": 2}[v] * C
        self.param_layers = [Linear(in_dim, 2 * C, rng, dt), Linear(2 * C, 2 * C, rng, dt),
                             Linear(2 * C, 2 * C, rng, dt, gain=0.1)]
        # initial scales near the spread of untrained latents, so the rate estimate
        # and the 16-bit coding tables agree before training
        self.param_layers[-1].bias.data[C:] = SIGMA_INIT
        self.gaussian = GaussianConditional()

    # -- transforms ----------------------------------------------------------------
    def analysis_transform(self, x: Tensor) -> Tensor:
        h, w = x.shape[-3], x.shape[-2]
        if h % 16 or w % 16:
            raise ValueError(f"image dims must be multiples of 16, got {h}x{w}")
        for layer in self.analysis:
            x = layer(x)
        return x

    def synthesis_transform(self, y_hat: Tensor) -> Tensor:
        for layer in self.synthesis:
            y_hat = layer(y_hat)
        return y_hat

    # -- hyperprior models ----------------------------------------------------------
    def global_hyper_encode(self, y: Tensor) -> Tensor:
        """Cross-attention pooling of all latent positions into ``[N, C/N]``."""
        u = self.global_attn(self.global_tokens, _rows(y))
        return self.global_out(self.global_mlp(u))

    def global_hyper_decode(self, z_g_hat: Tensor) -> Tensor:
        return self.global_decoder(z_g_hat)

    def local_hyper_encode(self, y: Tensor) -> Tensor:
        a, b, c = self.local_encoder
        return c(T.leaky_relu(b(T.leaky_relu(a(y), LEAKY_SLOPE)), LEAKY_SLOPE))

    def local_hyper_decode(self, z_l_hat: Tensor) -> Tensor:
        a, b, c = self.local_decoder
        return c(T.leaky_relu(b(T.leaky_relu(a(z_l_hat), LEAKY_SLOPE)), LEAKY_SLOPE))

    def hyper_encode(self, y: Tensor) -> Tensor:
        """Strided hyper analysis; the latent is zero-padded to a multiple of 4 first."""
        h, w = y.shape[-3], y.shape[-2]
        ph, pw = -h % 4, -w % 4
        if ph or pw:
            widths = [(0, 0)] * (y.ndim - 3) + [(0, ph), (0, pw), (0, 0)]
            y = T.pad(y, widths)
        a, b, c = self.hyper_encoder
        return c(T.leaky_relu(b(T.leaky_relu(a(y), LEAKY_SLOPE)), LEAKY_SLOPE))

    def hyper_decode(self, z_h_hat: Tensor, height: int, width: int) -> Tensor:
        a, b, c = self.hyper_decoder
        out = c(T.leaky_relu(b(T.leaky_relu(a(z_h_hat), LEAKY_SLOPE)), LEAKY_SLOPE))
        return out[..., :height, :width, :]

    # -- context and parameter models ------------------------------------------------
    def context_model(self, y_hat: Tensor) -> Tensor:
        return self.context(y_hat)

    def global_context_forward(self, phi_rows: Tensor) -> Tensor:
        """Masked self-attention over raster-ordered context features ``[..., L, 2C]``."""
        mask = causal_attention_mask(phi_rows.shape[-2])
        return self.gcm_mlp(self.gcm_attn(phi_rows, mask=mask))

    def param_predict(self, phi: Optional[Tensor], psi_g: Optional[Tensor], psi_l: Optional[Tensor],
                      psi_h: Optional[Tensor] = None):
        """Gaussian parameters from row-layout features ``[..., L, 2C]``.

        ``psi_g`` is ``[..., N, 2C]``; passing ``None`` bypasses the attention
        branch.  Returns ``(mu, sigma)`` each ``[..., L, C]``.
        """
        v = self.variant
        if v in _MLP_BLOCK:
            query, extra = (psi_l, phi) if v == "informer_local_query" else (phi, psi_l)
            if psi_g is not None and self.uses_global:
                query = self.pm_attn(query, psi_g)
            feats = [self.pm_mlp(query)]
            if v in _LOCAL:
                feats.append(extra)
        elif v == "hyperprior_only":
            feats = [psi_h]
        else:
            feats = [phi, psi_h]
        h = feats[0] if len(feats) == 1 else T.concat(feats, axis=-1)
        a, b, c = self.param_layers
        out = c(T.leaky_relu(b(T.leaky_relu(a(h), LEAKY_SLOPE)), LEAKY_SLOPE))
        C = self.config.latent_channels
        mu = out[..., :C]
        sigma = self.gaussian.lower_bound(out[..., C:])
        return mu, sigma

    # -- full passes ---------------------------------------------------------------------
    def forward(self, x: Tensor, mode: str = "train", rng: Optional[T.RngState] = None,
                noise_rng: Optional[T.RngState] = None) -> dict:
        """Run the whole network.

        ``mode`` is ``train`` (additive noise) or ``eval`` (rounding).
        Returns tensors for the reconstruction, likelihoods and distribution parameters.
        """
        qmode = "train_noise" if mode == "train" else "eval_round"
        rng = noise_rng or rng
        y = self.analysis_transform(x)
        H, W = y.shape[-3], y.shape[-2]
        out: dict = {"y": y}
        psi_g = psi_l = psi_h = None
        if self.uses_global:
            z_g = self.global_hyper_encode(y)
            z_g_hat = quantize(z_g, qmode, rng)
            out["z_g_hat"] = z_g_hat
            out["lik_z_g"] = self.global_prior.likelihood(z_g_hat)
            psi_g = self.global_hyper_decode(z_g_hat)
        if self.uses_local:
            z_l = self.local_hyper_encode(y)
            z_l_hat = quantize(z_l, qmode, rng)
            out["z_l_hat"] = z_l_hat
            out["lik_z_l"] = self.local_prior.likelihood(z_l_hat)
            psi_l = _rows(self.local_hyper_decode(z_l_hat))
        if self.uses_hyper:
            z_h = self.hyper_encode(y)
            z_h_hat = quantize(z_h, qmode, rng)
            out["z_h_hat"] = z_h_hat
            out["lik_z_h"] = self.hyper_prior.likelihood(z_h_hat)
            psi_h = _rows(self.hyper_decode(z_h_hat, H, W))
        y_hat = quantize(y, qmode, rng)
        phi = None
        if self.uses_context:
            phi = _rows(self.context_model(y_hat))
            if self.uses_global_context:
                phi = self.global_context_forward(phi)
        mu, sigma = self.param_predict(phi, psi_g, psi_l, psi_h)
        out["y_hat"] = y_hat
        out["mu"], out["sigma"] = mu, sigma
        out["lik_y"] = gaussian_likelihood(_rows(y_hat), mu, sigma)
        out["x_hat"] = self.synthesis_transform(y_hat)
        return out

    def forward_train(self, x: Tensor, rng: T.RngState, lmbda: Optional[float] = None) -> dict:
        """Noise-quantized rate-distortion loss.

        ``loss = total_bits / num_pixels + lmbda * 255**2 * mse`` with pixels in [0, 1].
        """
        lmbda = self.config.lmbda if lmbda is None else lmbda
        out = self.forward(x, "train", rng)
        return self._loss(x, out, lmbda)

    def _loss(self, x: Tensor, out: dict, lmbda: float) -> dict:
        zero = Tensor(np.zeros((), dtype=x.dtype))
        rate_y = rate_bits(out["lik_y"])
        rate_zg = rate_bits(out["lik_z_g"]) if "lik_z_g" in out else zero
        rate_zl = rate_bits(out["lik_z_l"]) if "lik_z_l" in out else zero
        rate_zh = rate_bits(out["lik_z_h"]) if "lik_z_h" in out else zero
        num_pixels = x.size // 3
        mse = T.square(out["x_hat"] - x).mean()
        total = rate_y + rate_zg + rate_zl + rate_zh
        loss = total * (1.0 / num_pixels) + mse * (lmbda * 255.0 ** 2)
        if not np.isfinite(loss.data).all():
            raise FloatingPointError("non-finite loss")
        return {"rate_y_bits": rate_y, "rate_zg_bits": rate_zg, "rate_zl_bits": rate_zl,
                "rate_zh_bits": rate_zh, "mse": mse, "loss": loss, "bpp": total * (1.0 / num_pixels),
                "x_hat": out["x_hat"]}

    def estimate(self, x: np.ndarray, lmbda: Optional[float] = None) -> dict:
        """Eval-mode (rounded) rate and distortion as plain floats."""
        lmbda = self.config.lmbda if lmbda is None else lmbda
        with T.no_grad():
            xt = Tensor(np.asarray(x, dtype=self.config.np_dtype))
            out = self.forward(xt, "eval")
            res = self._loss(xt, out, lmbda)
        return {k: float(v.item()) for k, v in res.items() if k != "x_hat"}

    # -- serial (decoder-side) parameter prediction ---------------------------------------
    def side_features(self, z_g_hat: Optional[np.ndarray], z_l_hat: Optional[np.ndarray],
                      z_h_hat: Optional[np.ndarray], height: int, width: int) -> SideFeatures:
        dt = self.config.np_dtype
        with T.no_grad():
            feats = SideFeatures()
            if self.uses_global:
                feats.psi_g = self.global_hyper_decode(Tensor(z_g_hat.astype(dt)))
            if self.uses_local:
                feats.psi_l = _rows(self.local_hyper_decode(Tensor(z_l_hat.astype(dt))))
            if self.uses_hyper:
                feats.psi_h = _rows(self.hyper_decode(Tensor(z_h_hat.astype(dt)), height, width))
        return feats

    def params_at(self, y_hat: np.ndarray, h: int, w: int, feats: SideFeatures) -> tuple:
        """``(mu, sigma)`` at one position from the decoded prefix of ``y_hat`` ``[H, W, C]``.

        Positions must be visited in raster order when the global context
        model is active, since its key cache grows as positions are produced.
        """
        H, W, _ = y_hat.shape
        i = h * W + w
        sel = slice(i, i + 1)
        with T.no_grad():
            phi = None
            if self.uses_context:
                phi = self.context.at_position(y_hat.astype(self.config.np_dtype, copy=False), h, w)
                if self.uses_global_context:
                    block = self.gcm_attn
                    xn = block.norm_q(phi)
                    if feats.keys:
                        keys = T.concat(feats.keys, axis=0)
                        phi = phi + block.attn(xn, keys, keys)
                    feats.keys.append(xn)
                    phi = self.gcm_mlp(phi)
            psi_l = feats.psi_l[sel] if feats.psi_l is not None else None
            psi_h = feats.psi_h[sel] if feats.psi_h is not None else None
            mu, sigma = self.param_predict(phi, feats.psi_g, psi_l, psi_h)
        return mu.data[0].astype(np.float64), sigma.data[0].astype(np.float64)

    # -- identity --------------------------------------------------------------------------
    def model_hash(self) -> int:
        """64-bit digest of the config and the float32 parameter values."""
        h = hashlib.sha256(json.dumps(self.config.to_dict(), sort_keys=True).encode())
        for name, p in self.named_parameters():
            h.update(name.encode())
            h.update(np.ascontiguousarray(p.data, dtype="<f4").tobytes())
        return int.from_bytes(h.digest()[:8], "little")

    def project(self) -> None:
        """Re-impose GDN parameter bounds."""
        for m in self.modules():
            if isinstance(m, GDN):
                m.project()

    def latent_shape(self, padded_h: int, padded_w: int) -> tuple:
        return padded_h // 16, padded_w // 16, self.config.latent_channels

    def hyper_shape(self, padded_h: int, padded_w: int) -> tuple:
        h, w = padded_h // 16, padded_w // 16
        return math.ceil(h / 4), math.ceil(w / 4), self.config.latent_channels
