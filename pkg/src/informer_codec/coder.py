"""Range coder, bitstream container and the image encode/decode pipeline."""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from . import tensor as T
from .entropy import PRECISION_BITS, FactorizedPrior, factorized_bin_masses, gaussian_bin_masses, quantize_pmf
from .model import VARIANT_IDS, VARIANT_NAMES, CompressionModel, LatentState

MAGIC = b"INFC"
VERSION = 1
_HEADER = struct.Struct("<4sBBQHHHH")
_SEGMENT = struct.Struct("<hhI")

_TOP = 1 << 24
_MASK32 = 0xFFFFFFFF


class BitstreamError(ValueError):
    """Raised for malformed, truncated or mismatched bitstreams."""


# -- range coder --------------------------------------------------------------------

class RangeEncoder:
    """Byte-oriented range coder with carry propagation through pending 0xFF bytes."""

    def __init__(self, precision_bits: int = PRECISION_BITS):
        self.precision_bits = precision_bits
        self.low = 0
        self.range = _MASK32
        self.cache = 0
        self.cache_size = 1
        self.out = bytearray()
        self._first = True

    def _shift_low(self) -> None:
        if self.low < 0xFF000000 or self.low > _MASK32:
            carry = self.low >> 32
            temp = self.cache
            while True:
                byte = (temp + carry) & 0xFF
                if self._first:
                    # the leading byte is always zero; it is not stored
                    self._first = False
                else:
                    self.out.append(byte)
                temp = 0xFF
                self.cache_size -= 1
                if self.cache_size == 0:
                    break
            self.cache = (self.low >> 24) & 0xFF
        self.cache_size += 1
        self.low = (self.low & 0x00FFFFFF) << 8

    def encode(self, start: int, freq: int) -> None:
        """Code the interval ``[start, start + freq)`` out of ``2**precision_bits``."""
        if freq <= 0 or start < 0 or start + freq > (1 << self.precision_bits):
            raise ValueError("invalid frequency interval")
        r = self.range >> self.precision_bits
        self.low += r * start
        self.range = r * freq
        while self.range < _TOP:
            self.range <<= 8
            self._shift_low()

    def bytes_needed(self) -> int:
        """Length of the final output prefix that pins down every symbol coded so far."""
        return len(self.out) + self.cache_size + 4 - (1 if self._first else 0)

    def finish(self) -> bytes:
        # pick the value in [low, low + range) with the most trailing zero bits
        step = _TOP
        self.low = -(-self.low // step) * step
        for _ in range(5):
            self._shift_low()
        return bytes(self.out).rstrip(b"\x00")


class RangeDecoder:
    """Mirror of :class:`RangeEncoder`; reads past the end of the data as zero bytes."""

    def __init__(self, data: bytes, precision_bits: int = PRECISION_BITS):
        self.data = bytes(data)
        self.pos = 0
        self.precision_bits = precision_bits
        self.range = _MASK32
        self.code = 0
        for _ in range(4):
            self.code = (self.code << 8) | self._next()

    def _next(self) -> int:
        if self.pos < len(self.data):
            b = self.data[self.pos]
        else:
            b = 0
        self.pos += 1
        return b

    def decode(self, cumulative: np.ndarray) -> int:
        """Index of the decoded symbol; ``cumulative`` has ``n + 1`` entries from 0 to ``2**bits``."""
        r = self.range >> self.precision_bits
        target = min(self.code // r, (1 << self.precision_bits) - 1)
        s = int(np.searchsorted(cumulative, target, side="right")) - 1
        start, stop = int(cumulative[s]), int(cumulative[s + 1])
        self.code -= r * start
        self.range = r * (stop - start)
        # a corrupted stream can push the code outside the interval; keep state bounded
        if self.code >= self.range:
            self.code = self.range - 1
        while self.range < _TOP:
            self.code = ((self.code << 8) | self._next()) & _MASK32
            self.range <<= 8
        return s

    @property
    def overrun(self) -> int:
        """Bytes consumed beyond the end of the data."""
        return max(0, self.pos - len(self.data))


def cumulative_table(freqs: np.ndarray) -> np.ndarray:
    freqs = np.asarray(freqs, dtype=np.int64)
    out = np.zeros(freqs.shape[:-1] + (freqs.shape[-1] + 1,), dtype=np.int64)
    np.cumsum(freqs, axis=-1, out=out[..., 1:])
    return out


def encode_symbols(symbols: Sequence[int], tables: np.ndarray, v_min: int,
                   precision_bits: int = PRECISION_BITS) -> bytes:
    """Code ``symbols[i]`` with frequency row ``tables[i]`` over the alphabet starting at ``v_min``."""
    enc = RangeEncoder(precision_bits)
    cums = cumulative_table(tables)
    for s, cum in zip(symbols, cums):
        i = int(s) - v_min
        enc.encode(int(cum[i]), int(cum[i + 1] - cum[i]))
    return enc.finish()


def decode_symbols(data: bytes, tables: np.ndarray, v_min: int,
                   precision_bits: int = PRECISION_BITS) -> np.ndarray:
    dec = RangeDecoder(data, precision_bits)
    cums = cumulative_table(tables)
    return np.array([dec.decode(cum) + v_min for cum in cums], dtype=np.int64)


# -- bitstream container -----------------------------------------------------------------

@dataclass
class Segment:
    v_min: int = 0
    v_max: int = 0
    payload: bytes = b""


@dataclass
class Bitstream:
    variant_id: int
    model_hash: int
    height: int
    width: int
    padded_height: int
    padded_width: int
    segments: list = field(default_factory=lambda: [Segment(), Segment(), Segment()])
    version: int = VERSION

    @property
    def payload_bits(self) -> int:
        return 8 * sum(len(s.payload) for s in self.segments)


def serialize(b: Bitstream) -> bytes:
    if len(b.segments) != 3:
        raise ValueError("a bitstream carries exactly three segments")
    try:
        parts = [_HEADER.pack(MAGIC, b.version, b.variant_id, b.model_hash, b.height, b.width,
                              b.padded_height, b.padded_width)]
        for seg in b.segments:
            parts.append(_SEGMENT.pack(seg.v_min, seg.v_max, len(seg.payload)))
            parts.append(bytes(seg.payload))
    except struct.error as exc:
        raise ValueError(f"bitstream field out of range: {exc}") from None
    return b"".join(parts)


def parse(data: bytes) -> Bitstream:
    data = bytes(data)
    if len(data) < _HEADER.size:
        raise BitstreamError("truncated header")
    magic, version, variant_id, model_hash, h, w, ph, pw = _HEADER.unpack_from(data)
    if magic != MAGIC:
        raise BitstreamError("bad magic")
    if version != VERSION:
        raise BitstreamError(f"unsupported version {version}")
    if variant_id not in VARIANT_NAMES:
        raise BitstreamError(f"unknown variant id {variant_id}")
    if h == 0 or w == 0 or ph != _ceil16(h) or pw != _ceil16(w):
        raise BitstreamError("inconsistent image dimensions")
    pos = _HEADER.size
    segments = []
    for _ in range(3):
        if pos + _SEGMENT.size > len(data):
            raise BitstreamError("truncated segment header")
        v_min, v_max, length = _SEGMENT.unpack_from(data, pos)
        pos += _SEGMENT.size
        if v_min > v_max:
            raise BitstreamError("segment alphabet bounds reversed")
        if pos + length > len(data):
            raise BitstreamError("truncated segment payload")
        segments.append(Segment(v_min, v_max, data[pos:pos + length]))
        pos += length
    if pos != len(data):
        raise BitstreamError("trailing bytes after last segment")
    return Bitstream(variant_id, model_hash, h, w, ph, pw, segments, version)


# -- images --------------------------------------------------------------------------

def _ceil16(n: int) -> int:
    return -(-n // 16) * 16


def pad_image(img: np.ndarray) -> np.ndarray:
    """Edge-replicate ``[H, W, 3]`` up to multiples of 16."""
    h, w = img.shape[:2]
    return np.pad(img, ((0, _ceil16(h) - h), (0, _ceil16(w) - w), (0, 0)), mode="edge")


def read_ppm(source) -> np.ndarray:
    """Parse a binary P6 PPM (path or bytes) with maxval 255 into ``uint8 [H, W, 3]``."""
    data = source if isinstance(source, (bytes, bytearray)) else Path(source).read_bytes()
    tokens, pos = [], 0
    while len(tokens) < 4:
        while pos < len(data) and data[pos:pos + 1].isspace():
            pos += 1
        if pos < len(data) and data[pos:pos + 1] == b"#":
            while pos < len(data) and data[pos:pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < len(data) and not data[pos:pos + 1].isspace() and data[pos:pos + 1] != b"#":
            pos += 1
        if start == pos:
            raise ValueError("truncated PPM header")
        tokens.append(data[start:pos])
    if tokens[0] != b"P6":
        raise ValueError("not a binary PPM (P6) file")
    try:
        w, h, maxval = (int(t) for t in tokens[1:])
    except ValueError:
        raise ValueError("malformed PPM header") from None
    if maxval != 255:
        raise ValueError("only 8-bit PPM (maxval 255) is supported")
    if w <= 0 or h <= 0:
        raise ValueError("PPM dimensions must be positive")
    pos += 1  # single whitespace byte after maxval
    pixels = data[pos:pos + w * h * 3]
    if len(pixels) != w * h * 3:
        raise ValueError("truncated PPM pixel data")
    return np.frombuffer(pixels, dtype=np.uint8).reshape(h, w, 3).copy()


def ppm_bytes(img: np.ndarray) -> bytes:
    img = np.asarray(img)
    if img.dtype != np.uint8 or img.ndim != 3 or img.shape[2] != 3:
        raise ValueError("expected a uint8 [H, W, 3] image")
    h, w, _ = img.shape
    return b"P6\n%d %d\n255\n" % (w, h) + img.tobytes()


def write_ppm(path, img: np.ndarray) -> None:
    Path(path).write_bytes(ppm_bytes(img))


def to_unit(img: np.ndarray, dtype=np.float64) -> np.ndarray:
    return np.asarray(img, dtype=dtype) / 255.0


def to_uint8(x: np.ndarray) -> np.ndarray:
    return np.round(np.clip(x, 0.0, 1.0) * 255.0).astype(np.uint8)


# -- pipeline --------------------------------------------------------------------------

def _alphabet(values: np.ndarray) -> tuple:
    if values.size == 0:
        return 0, 0
    lo, hi = int(values.min()) - 1, int(values.max()) + 1
    if lo < -(1 << 15) or hi >= (1 << 15):
        raise OverflowError("latent magnitude exceeds the 16-bit alphabet")
    return lo, hi


def _factorized_tables(prior: FactorizedPrior, v_min: int, v_max: int) -> np.ndarray:
    return quantize_pmf(factorized_bin_masses(prior, v_min, v_max))


def _code_factorized(values: np.ndarray, prior: FactorizedPrior) -> Segment:
    v_min, v_max = _alphabet(values)
    tables = _factorized_tables(prior, v_min, v_max)
    flat = values.reshape(-1, values.shape[-1])
    rows = np.tile(np.arange(flat.shape[1]), flat.shape[0])
    return Segment(v_min, v_max, encode_symbols(flat.reshape(-1), tables[rows], v_min))


def _decode_factorized(seg: Segment, prior: FactorizedPrior, shape: tuple) -> np.ndarray:
    tables = _factorized_tables(prior, seg.v_min, seg.v_max)
    count = int(np.prod(shape[:-1]))
    rows = np.tile(np.arange(shape[-1]), count)
    return decode_symbols(seg.payload, tables[rows], seg.v_min).reshape(shape).astype(np.float64)


def analyze(model: CompressionModel, img: np.ndarray) -> LatentState:
    """Eval-mode latents and hyperpriors for a padded ``uint8`` image."""
    from .entropy import round_half_away

    dt = model.config.np_dtype
    with T.no_grad():
        y = model.analysis_transform(T.Tensor(to_unit(img, dt)))
        state = LatentState(y=y.data, y_hat=round_half_away(y.data))
        if model.uses_global:
            state.z_g = model.global_hyper_encode(y).data
            state.z_g_hat = round_half_away(state.z_g)
        if model.uses_local:
            state.z_l = model.local_hyper_encode(y).data
            state.z_l_hat = round_half_away(state.z_l)
        if model.uses_hyper:
            state.z_h = model.hyper_encode(y).data
            state.z_h_hat = round_half_away(state.z_h)
    return state


def reconstruct(model: CompressionModel, y_hat: np.ndarray, height: int, width: int) -> np.ndarray:
    """8-bit reconstruction cropped to the original size."""
    with T.no_grad():
        x_hat = model.synthesis_transform(T.Tensor(y_hat.astype(model.config.np_dtype)))
    return to_uint8(x_hat.data[:height, :width].astype(np.float64))


def _latent_tables(model: CompressionModel, y_hat: np.ndarray, feats, v_min: int, v_max: int,
                   positions: Optional[int] = None):
    """Yield per-position frequency tables ``[C, n]``; ``y_hat`` is read only at raster-earlier positions."""
    H, W, _ = y_hat.shape
    for i in range(H * W if positions is None else positions):
        h, w = divmod(i, W)
        mu, sigma = model.params_at(y_hat, h, w, feats)
        yield h, w, quantize_pmf(gaussian_bin_masses(mu, sigma, v_min, v_max))


def encode_latents(model: CompressionModel, state: LatentState) -> list:
    """Code the three segments; returns the segment list."""
    H, W, _ = state.y_hat.shape
    first, second = Segment(), Segment()
    if model.uses_global:
        first = _code_factorized(state.z_g_hat, model.global_prior)
    elif model.uses_hyper:
        first = _code_factorized(state.z_h_hat, model.hyper_prior)
    if model.uses_local:
        second = _code_factorized(state.z_l_hat, model.local_prior)
    feats = model.side_features(state.z_g_hat, state.z_l_hat, state.z_h_hat, H, W)
    v_min, v_max = _alphabet(state.y_hat)
    enc = RangeEncoder()
    for h, w, tables in _latent_tables(model, state.y_hat, feats, v_min, v_max):
        cums = cumulative_table(tables)
        for c, cum in enumerate(cums):
            k = int(state.y_hat[h, w, c]) - v_min
            enc.encode(int(cum[k]), int(cum[k + 1] - cum[k]))
    return [first, second, Segment(v_min, v_max, enc.finish())]


def encode_image(img: np.ndarray, model: CompressionModel, return_state: bool = False):
    """Compress a ``uint8 [H, W, 3]`` image into a :class:`Bitstream`."""
    img = np.asarray(img)
    if img.dtype != np.uint8 or img.ndim != 3 or img.shape[2] != 3:
        raise ValueError("expected a uint8 [H, W, 3] image")
    h, w = img.shape[:2]
    if h > 0xFFFF or w > 0xFFFF:
        raise ValueError("image dimensions exceed 16 bits")
    padded = pad_image(img)
    state = analyze(model, padded)
    b = Bitstream(VARIANT_IDS[model.variant], model.model_hash(), h, w, padded.shape[0],
                  padded.shape[1], encode_latents(model, state))
    return (b, state) if return_state else b


def decode_latents(b: Bitstream, model: CompressionModel) -> LatentState:
    H, W, C = model.latent_shape(b.padded_height, b.padded_width)
    cfg = model.config
    first, second, third = b.segments
    state = LatentState(y=None, y_hat=None)
    if model.uses_global:
        state.z_g_hat = _decode_factorized(first, model.global_prior,
                                           (cfg.num_tokens, C // cfg.num_tokens))
    elif model.uses_hyper:
        state.z_h_hat = _decode_factorized(first, model.hyper_prior,
                                           model.hyper_shape(b.padded_height, b.padded_width))
    if model.uses_local:
        state.z_l_hat = _decode_factorized(second, model.local_prior, (H, W, C // 16))
    feats = model.side_features(state.z_g_hat, state.z_l_hat, state.z_h_hat, H, W)
    y_hat = np.zeros((H, W, C))
    dec = RangeDecoder(third.payload)
    for h, w, tables in _latent_tables(model, y_hat, feats, third.v_min, third.v_max):
        for c, cum in enumerate(cumulative_table(tables)):
            y_hat[h, w, c] = dec.decode(cum) + third.v_min
    state.y_hat = y_hat
    return state


def decode_image(b, model: CompressionModel, return_state: bool = False):
    """Reconstruct a ``uint8`` image from a :class:`Bitstream` or its serialized bytes."""
    if isinstance(b, (bytes, bytearray)):
        b = parse(b)
    if b.variant_id != VARIANT_IDS[model.variant]:
        raise BitstreamError(f"bitstream variant {VARIANT_NAMES.get(b.variant_id, b.variant_id)!r} "
                             f"does not match model variant {model.variant!r}")
    if b.model_hash != model.model_hash():
        raise BitstreamError("bitstream was produced by different model parameters")
    state = decode_latents(b, model)
    img = reconstruct(model, state.y_hat, b.height, b.width)
    return (img, state) if return_state else img
