"""Training loop, Adam, checkpoints and evaluation metrics."""

from __future__ import annotations

import csv
import io
import json
import logging
import math
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from . import tensor as T
from .coder import decode_image, encode_image, pad_image, read_ppm, serialize, to_unit
from .data import SyntheticDatasetSpec, generate, load_directory, sample_batch, validation_images
from .model import CompressionModel, ModelConfig

log = logging.getLogger(__name__)

CKPT_MAGIC = b"INFK"
CKPT_VERSION = 1
DECAY_FRACTIONS = (0.6, 0.72, 0.84, 0.96)
DECAY_FACTOR = 1.0 / 3.0


class TrainingError(RuntimeError):
    pass


@dataclass
class TrainConfig:
    lmbda: float = 0.0067
    learning_rate: float = 1e-4
    batch_size: int = 4
    patch_size: int = 32
    max_steps: int = 1000
    seed: int = 0
    variant: str = "informer"
    latent_channels: int = 32
    num_tokens: int = 8
    num_heads: int = 4
    transform_channels: int = 32
    dtype: str = "float32"
    generator: str = "repeated_motifs"
    num_images: int = 16
    image_size: int = 64
    motif_count: int = 3
    motif_size: int = 16
    data_seed: int = 0
    data_dir: Optional[str] = None
    checkpoint: Optional[str] = None
    checkpoint_every: int = 0
    log_every: int = 50

    def __post_init__(self):
        if self.patch_size <= 0 or self.patch_size % 16:
            raise ValueError("patch_size must be a positive multiple of 16")
        if self.max_steps <= 0:
            raise ValueError("max_steps must be positive")
        if self.batch_size <= 0:
            raise ValueError("batch_size must be positive")
        if not self.learning_rate > 0:
            raise ValueError("learning_rate must be positive")
        self.model_config()

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        return cls(**d)

    @classmethod
    def from_file(cls, path) -> "TrainConfig":
        d = json.loads(Path(path).read_text())
        if not isinstance(d, dict):
            raise ValueError("config must be a JSON object")
        return cls.from_dict(d)

    def model_config(self) -> ModelConfig:
        return ModelConfig(latent_channels=self.latent_channels, num_tokens=self.num_tokens,
                           num_heads=self.num_heads, transform_channels=self.transform_channels,
                           variant=self.variant, lmbda=self.lmbda, seed=self.seed, dtype=self.dtype)

    def dataset_spec(self) -> SyntheticDatasetSpec:
        return SyntheticDatasetSpec(self.generator, self.num_images, self.image_size, self.image_size,
                                    self.motif_count, self.motif_size, self.data_seed)

    def load_images(self) -> list:
        if self.data_dir:
            return load_directory(self.data_dir)
        return list(generate(self.dataset_spec()))


def learning_rate(step: int, base: float, max_steps: int) -> float:
    """Step decay: multiply by 1/3 at each decay fraction of ``max_steps`` already reached."""
    drops = sum(step >= f * max_steps for f in DECAY_FRACTIONS)
    return base * DECAY_FACTOR ** drops


class Adam:
    def __init__(self, params, lr: float = 1e-4, beta1: float = 0.9, beta2: float = 0.999,
                 eps: float = 1e-8):
        self.params = list(params)
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]
        self.t = 0

    def step(self, lr: Optional[float] = None) -> None:
        lr = self.lr if lr is None else lr
        self.t += 1
        c1 = 1.0 - self.beta1 ** self.t
        c2 = 1.0 - self.beta2 ** self.t
        for p, m, v in zip(self.params, self.m, self.v):
            g = np.zeros_like(p.data) if p.grad is None else p.grad.astype(p.dtype, copy=False)
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            p.data -= (lr * (m / c1) / (np.sqrt(v / c2) + self.eps)).astype(p.dtype, copy=False)


# -- checkpoints -------------------------------------------------------------------

@dataclass
class Checkpoint:
    model: CompressionModel
    optimizer: Adam
    step: int
    rng: T.RngState
    history: list = field(default_factory=list)

    @property
    def config(self) -> ModelConfig:
        return self.model.config


def _pack_blob(name: str, arr: np.ndarray) -> bytes:
    enc = name.encode()
    head = struct.pack("<H", len(enc)) + enc + struct.pack("<B", arr.ndim)
    head += struct.pack(f"<{arr.ndim}I", *arr.shape)
    return head + np.ascontiguousarray(arr, dtype="<f4").tobytes()


class _Reader:
    def __init__(self, data: bytes):
        self.data, self.pos = data, 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise ValueError("truncated checkpoint")
        out = self.data[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        s = struct.Struct(fmt)
        return s.unpack(self.take(s.size))

    def json(self):
        (n,) = self.unpack("<I")
        return json.loads(self.take(n).decode())

    def blob(self):
        (n,) = self.unpack("<H")
        name = self.take(n).decode()
        (ndim,) = self.unpack("<B")
        shape = self.unpack(f"<{ndim}I")
        count = int(np.prod(shape)) if ndim else 1
        arr = np.frombuffer(self.take(4 * count), dtype="<f4").reshape(shape)
        return name, arr


def _json_bytes(obj) -> bytes:
    enc = json.dumps(obj, sort_keys=True, separators=(",", ":")).encode()
    return struct.pack("<I", len(enc)) + enc


def checkpoint_bytes(ckpt: Checkpoint) -> bytes:
    named = list(ckpt.model.named_parameters())
    parts = [CKPT_MAGIC, struct.pack("<B", CKPT_VERSION), _json_bytes(ckpt.config.to_dict()),
             struct.pack("<Q", ckpt.step), _json_bytes(ckpt.rng.get_state()),
             struct.pack("<I", len(named))]
    parts += [_pack_blob(name, p.data) for name, p in named]
    parts.append(struct.pack("<Q", ckpt.optimizer.t))
    parts += [_pack_blob(name, m) for (name, _), m in zip(named, ckpt.optimizer.m)]
    parts += [_pack_blob(name, v) for (name, _), v in zip(named, ckpt.optimizer.v)]
    return b"".join(parts)


def save_checkpoint(ckpt: Checkpoint, path) -> None:
    Path(path).write_bytes(checkpoint_bytes(ckpt))


def parse_checkpoint(data: bytes) -> Checkpoint:
    r = _Reader(bytes(data))
    if r.take(4) != CKPT_MAGIC:
        raise ValueError("not a checkpoint file")
    (version,) = r.unpack("<B")
    if version != CKPT_VERSION:
        raise ValueError(f"unsupported checkpoint version {version}")
    config = ModelConfig.from_dict(r.json())
    (step,) = r.unpack("<Q")
    rng = T.RngState.from_state(r.json())
    model = CompressionModel(config)
    named = dict(model.named_parameters())
    (count,) = r.unpack("<I")
    if count != len(named):
        raise ValueError("checkpoint parameter count does not match the model")
    dt = config.np_dtype
    for _ in range(count):
        name, arr = r.blob()
        if name not in named or named[name].shape != arr.shape:
            raise ValueError(f"checkpoint parameter {name!r} does not match the model")
        named[name].data = arr.astype(dt)
    opt = Adam(model.parameters())
    (opt.t,) = r.unpack("<Q")
    for moments in (opt.m, opt.v):
        for i in range(count):
            moments[i] = r.blob()[1].astype(dt)
    if r.pos != len(r.data):
        raise ValueError("trailing bytes in checkpoint")
    return Checkpoint(model, opt, step, rng)


def load_checkpoint(path) -> Checkpoint:
    return parse_checkpoint(Path(path).read_bytes())


def load_model(path) -> CompressionModel:
    return load_checkpoint(path).model


# -- training ----------------------------------------------------------------------------

def new_checkpoint(config: TrainConfig) -> Checkpoint:
    model = CompressionModel(config.model_config())
    return Checkpoint(model, Adam(model.parameters(), config.learning_rate), 0,
                      T.RngState(config.seed + 1))


def psnr(mse: float, peak: float = 1.0) -> float:
    if mse <= 0:
        return math.inf
    return 10.0 * math.log10(peak * peak / mse)


def train(config: TrainConfig, resume: Optional[Checkpoint] = None, stop_at: Optional[int] = None) -> Checkpoint:
    """Run (or continue) training up to ``max_steps`` (or ``stop_at``).

    The returned checkpoint's ``history`` lists the training loss of each step run.
    """
    images = config.load_images()
    if not images:
        raise ValueError("dataset is empty")
    ckpt = resume or new_checkpoint(config)
    model, opt, rng = ckpt.model, ckpt.optimizer, ckpt.rng
    dt = model.config.np_dtype
    end = min(config.max_steps, stop_at or config.max_steps)
    val = None
    while ckpt.step < end:
        x = T.Tensor(sample_batch(images, config.batch_size, config.patch_size, rng, dt))
        model.zero_grad()
        try:
            res = model.forward_train(x, rng, config.lmbda)
        except FloatingPointError:
            if config.checkpoint:
                save_checkpoint(ckpt, config.checkpoint)
            raise TrainingError(f"non-finite loss at step {ckpt.step}; last good state kept") from None
        T.backward(res["loss"])
        opt.step(learning_rate(ckpt.step, config.learning_rate, config.max_steps))
        model.project()
        ckpt.step += 1
        loss = float(res["loss"].item())
        ckpt.history.append(loss)
        if config.log_every and ckpt.step % config.log_every == 0:
            if val is None:
                val = _validation_batch(config, images, dt)
            est = model.estimate(val, config.lmbda)
            log.info("step %d loss %.4f train_bpp %.4f | eval loss %.4f bpp %.4f psnr %.2f",
                     ckpt.step, loss, float(res["bpp"].item()), est["loss"], est["bpp"],
                     psnr(est["mse"]))
        if config.checkpoint and config.checkpoint_every and ckpt.step % config.checkpoint_every == 0:
            save_checkpoint(ckpt, config.checkpoint)
    if config.checkpoint:
        save_checkpoint(ckpt, config.checkpoint)
    return ckpt


def _validation_batch(config: TrainConfig, images, dt) -> np.ndarray:
    if config.data_dir:
        pool = images
    else:
        pool = list(validation_images(config.dataset_spec()))
    p = config.patch_size
    crops = [img[:p, :p] for img in pool if img.shape[0] >= p and img.shape[1] >= p]
    return (np.stack(crops) / 255.0).astype(dt)


# -- evaluation ------------------------------------------------------------------------

@dataclass
class ImageMetrics:
    name: str
    height: int
    width: int
    estimated_bpp: float
    actual_bpp: float
    file_bpp: float
    psnr: float


@dataclass
class MetricsReport:
    rows: list

    def aggregate(self) -> dict:
        if not self.rows:
            return {}
        keys = ("estimated_bpp", "actual_bpp", "file_bpp", "psnr")
        return {k: float(np.mean([getattr(r, k) for r in self.rows])) for k in keys}

    def to_text(self) -> str:
        lines = [f"{'image':<24}{'size':>11}{'est_bpp':>10}{'act_bpp':>10}{'file_bpp':>10}{'psnr_db':>10}"]
        rows = [(r.name, f"{r.width}x{r.height}", r.estimated_bpp, r.actual_bpp, r.file_bpp, r.psnr)
                for r in self.rows]
        agg = self.aggregate()
        if agg:
            rows.append(("mean", "", agg["estimated_bpp"], agg["actual_bpp"], agg["file_bpp"], agg["psnr"]))
        for name, size, e, a, f, p in rows:
            lines.append(f"{name:<24}{size:>11}{e:>10.4f}{a:>10.4f}{f:>10.4f}{_fmt_psnr(p):>10}")
        return "\n".join(lines)

    def to_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(["image", "height", "width", "estimated_bpp", "actual_bpp", "file_bpp", "psnr"])
        for r in self.rows:
            writer.writerow([r.name, r.height, r.width, f"{r.estimated_bpp:.6f}", f"{r.actual_bpp:.6f}",
                             f"{r.file_bpp:.6f}", _fmt_psnr(r.psnr)])
        return buf.getvalue()


def _fmt_psnr(p: float) -> str:
    return "inf" if math.isinf(p) else f"{p:.2f}"


def image_psnr(a: np.ndarray, b: np.ndarray) -> float:
    """PSNR in dB between two ``uint8`` images on the 0..255 scale."""
    mse = float(np.mean((a.astype(np.float64) - b.astype(np.float64)) ** 2))
    return psnr(mse, 255.0)


def evaluate_image(model: CompressionModel, img: np.ndarray, name: str = "image") -> ImageMetrics:
    h, w = img.shape[:2]
    est = model.estimate(to_unit(pad_image(img)))
    bits = est["rate_y_bits"] + est["rate_zg_bits"] + est["rate_zl_bits"] + est["rate_zh_bits"]
    b = encode_image(img, model)
    data = serialize(b)
    rec = decode_image(data, model)
    return ImageMetrics(name, h, w, bits / (h * w), b.payload_bits / (h * w), 8 * len(data) / (h * w),
                        image_psnr(img, rec))


def evaluate(model: CompressionModel, image_dir) -> MetricsReport:
    files = sorted(Path(image_dir).glob("*.ppm"))
    if not files:
        raise ValueError(f"no .ppm images found in {image_dir}")
    return MetricsReport([evaluate_image(model, read_ppm(f), f.name) for f in files])
