"""Closed-form FLOP counts for the entropy models and scaling-exponent fits.

Convention: one multiply-accumulate is two FLOPs.  Bias additions,
activations, normalization layers and softmax are not counted.
"""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

from .model import VARIANT_IDS, ModelConfig

GLOBAL_REFERENCE = "global_reference"
PROFILE_VARIANTS = tuple(VARIANT_IDS) + (GLOBAL_REFERENCE,)
SUBMODULES = ("context", "global_hyper", "local_hyper", "parameter_model", "hyperprior", "global_context")
CONVENTION = "1 MAC = 2 FLOPs; activations, norms, softmax and biases excluded"


# -- primitive counts -------------------------------------------------------------------

def conv_flops(k: int, cin: int, cout: int, h_out: int, w_out: int) -> int:
    return 2 * k * k * cin * cout * h_out * w_out


def conv_transpose_flops(k: int, cin: int, cout: int, h_in: int, w_in: int) -> int:
    """Every input pixel scatters a ``k x k x cout`` patch."""
    return 2 * k * k * cin * cout * h_in * w_in


def linear_flops(d_in: int, d_out: int, rows: int) -> int:
    return 2 * d_in * d_out * rows


def attention_flops(lq: int, lk: int, dim: int) -> int:
    """Four projections plus the QK^T and AV products."""
    proj = linear_flops(dim, dim, lq) * 2 + linear_flops(dim, dim, lk) * 2
    return proj + 2 * lq * lk * dim * 2


def mlp_flops(rows: int, dim: int, hidden: int) -> int:
    return linear_flops(dim, hidden, rows) + linear_flops(hidden, dim, rows)


def latent_dims(height: int, width: int) -> tuple:
    """Latent grid for an image padded up to multiples of 16."""
    return math.ceil(height / 16), math.ceil(width / 16)


# -- per-variant breakdown ------------------------------------------------------------------

def _param_head(in_dim: int, C: int, L: int) -> int:
    return linear_flops(in_dim, 2 * C, L) + 2 * linear_flops(2 * C, 2 * C, L)


def _hyperprior(C: int, H: int, W: int) -> int:
    h2, w2 = math.ceil(H / 2), math.ceil(W / 2)
    h4, w4 = math.ceil(H / 4), math.ceil(W / 4)
    enc = conv_flops(5, C, C, H, W) + conv_flops(5, C, C, h2, w2) + conv_flops(5, C, C, h4, w4)
    dec = (conv_transpose_flops(5, C, C, h4, w4) + conv_transpose_flops(5, C, C, h2, w2)
           + conv_flops(5, C, 2 * C, H, W))
    return enc + dec


def count_flops(config: ModelConfig, height: int, width: int, variant: str) -> dict:
    """Entropy-model FLOPs by submodule for one image size.

    ``variant`` may be any model variant or ``"global_reference"``, the
    analytic stand-in for dictionary search over all earlier positions.
    """
    if variant not in PROFILE_VARIANTS:
        raise ValueError(f"unknown variant {variant!r}")
    C, N = config.latent_channels, config.num_tokens
    H, W = latent_dims(height, width)
    L = H * W
    out = dict.fromkeys(SUBMODULES, 0)
    if variant == GLOBAL_REFERENCE:
        out = count_flops(config, height, width, "context_hyperprior")
        out["global_context"] = 2 * L * L * 2 * C * 2
        return out
    if variant != "hyperprior_only":
        out["context"] = conv_flops(5, C, 2 * C, H, W)
    if variant in ("informer", "informer_wo_local", "informer_local_query"):
        out["global_hyper"] = (attention_flops(N, L, C) + mlp_flops(N, C, 2 * C)
                               + linear_flops(C, C // N, N) + linear_flops(C // N, 2 * C, N))
        pm = attention_flops(L, N, 2 * C) + mlp_flops(L, 2 * C, 4 * C)
    else:
        pm = 0
    if variant in ("informer", "informer_wo_global", "informer_local_query"):
        out["local_hyper"] = (linear_flops(C, C, L) + linear_flops(C, C // 2, L) + linear_flops(C // 2, C // 16, L)
                              + linear_flops(C // 16, C // 2, L) + linear_flops(C // 2, C, L)
                              + linear_flops(C, 2 * C, L))
    if variant in ("informer_wo_global", "context_only"):
        pm = mlp_flops(L, 2 * C, 4 * C)
    if variant in ("context_hyperprior", "hyperprior_only", "global_context"):
        out["hyperprior"] = _hyperprior(C, H, W)
    if variant == "global_context":
        out["global_context"] = attention_flops(L, L, 2 * C) + mlp_flops(L, 2 * C, 4 * C)
    in_dim = 2 * C if variant in ("informer_wo_local", "context_only", "hyperprior_only") else 4 * C
    out["parameter_model"] = pm + _param_head(in_dim, C, L)
    return out


# -- report ------------------------------------------------------------------------------------

def fit_scaling_exponent(pixels: Sequence[float], flops: Sequence[float]) -> float:
    """Least-squares slope of log FLOPs against log pixel count."""
    pixels = np.asarray(pixels, dtype=np.float64)
    flops = np.asarray(flops, dtype=np.float64)
    if len(pixels) < 4:
        raise ValueError("need at least 4 resolutions to fit an exponent")
    if pixels.max() / pixels.min() < 16:
        raise ValueError("resolutions must span at least a 16x range of pixel counts")
    if np.any(flops <= 0):
        raise ValueError("FLOP counts must be positive")
    slope, _ = np.polyfit(np.log(pixels), np.log(flops), 1)
    return float(slope)


@dataclass
class FlopsReport:
    config: ModelConfig
    resolutions: list
    variants: list
    counts: dict = field(default_factory=dict)  # (w, h, variant) -> {submodule: flops}

    def total(self, width: int, height: int, variant: str) -> int:
        return sum(self.counts[(width, height, variant)].values())

    def ratio(self, variant: str, low: tuple, high: tuple) -> float:
        return self.total(*high, variant) / self.total(*low, variant)

    def exponents(self) -> dict:
        px = [w * h for w, h in self.resolutions]
        return {v: fit_scaling_exponent(px, [self.total(w, h, v) for w, h in self.resolutions])
                for v in self.variants}

    def to_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(["resolution", "variant", "submodule", "flops"])
        for w, h in self.resolutions:
            for v in self.variants:
                for sub, n in self.counts[(w, h, v)].items():
                    writer.writerow([f"{w}x{h}", v, sub, n])
                writer.writerow([f"{w}x{h}", v, "total", self.total(w, h, v)])
        return buf.getvalue()

    def summary(self) -> str:
        lines = [f"# {CONVENTION}", f"# entropy-model GFLOPs, C={self.config.latent_channels} "
                 f"N={self.config.num_tokens}"]
        head = f"{'variant':<22}" + "".join(f"{f'{w}x{h}':>12}" for w, h in self.resolutions)
        fit = len(self.resolutions) >= 4
        lines.append(head + (f"{'exponent':>10}" if fit else ""))
        exps = self.exponents() if fit else {}
        for v in self.variants:
            row = f"{v:<22}" + "".join(f"{self.total(w, h, v) / 1e9:>12.4f}" for w, h in self.resolutions)
            if fit:
                row += f"{exps[v]:>10.4f}"
            lines.append(row)
        return "\n".join(lines)


def profile(config: ModelConfig, resolutions: Iterable, variants: Iterable = PROFILE_VARIANTS) -> FlopsReport:
    report = FlopsReport(config, [tuple(r) for r in resolutions], list(variants))
    for w, h in report.resolutions:
        if w <= 0 or h <= 0:
            raise ValueError("resolutions must be positive")
        for v in report.variants:
            report.counts[(w, h, v)] = count_flops(config, h, w, v)
    return report


def parse_resolutions(text: str) -> list:
    """``"1920x1080,4096x2304"`` -> ``[(1920, 1080), (4096, 2304)]``."""
    out = []
    for item in text.split(","):
        item = item.strip().lower()
        if not item:
            continue
        parts = item.split("x")
        if len(parts) != 2 or not all(p.isdigit() for p in parts):
            raise ValueError(f"bad resolution {item!r}; expected WxH")
        w, h = int(parts[0]), int(parts[1])
        if w <= 0 or h <= 0:
            raise ValueError(f"bad resolution {item!r}")
        out.append((w, h))
    if not out:
        raise ValueError("no resolutions given")
    return out
