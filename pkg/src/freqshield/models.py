"""The classifier, the frequency-domain autoencoder, their training loops and checkpoints."""

from __future__ import annotations

import json
import logging
import struct
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from . import rng as rngmod
from .losses import LOSS_KINDS, ReconParams, composite_recon_loss, cross_entropy, mse_loss
from .numerics import (Conv2d, ConvTranspose2d, Dense, Flatten, MaxPool2d, ReLU, Sequential, Sigmoid, Tensor,
                       Unflatten, precision)
from .numerics.optim import Optimizer

log = logging.getLogger(__name__)


@dataclass
class CNNConfig:
    input_size: int = 64
    classes: int = 4
    channels: tuple = (16, 32, 64)
    hidden: int = 128
    seed: int = 0


@dataclass
class AEConfig:
    input_size: int = 64
    channels: tuple = (16, 32)
    latent: int = 64
    seed: int = 0


def _batches(n: int, batch_size: int):
    for start in range(0, n, batch_size):
        yield slice(start, min(start + batch_size, n))


class Classifier:
    """Simple CNN: three conv-relu-pool stages, a hidden dense layer, class logits."""

    kind = "simple_cnn"

    def __init__(self, net: Sequential, config: CNNConfig):
        self.net = net
        self.config = config

    def __call__(self, x) -> Tensor:
        return self.net(x if isinstance(x, Tensor) else Tensor(x))

    def parameters(self):
        return self.net.parameters()

    def named_parameters(self):
        return self.net.named_parameters()

    def logits(self, x: np.ndarray, batch_size: int = 128) -> np.ndarray:
        out = [self(x[sl]).data for sl in _batches(len(x), batch_size)]
        return np.concatenate(out) if out else np.zeros((0, self.config.classes), dtype=np.float32)

    def predict(self, x: np.ndarray, batch_size: int = 128) -> np.ndarray:
        return self.logits(x, batch_size).argmax(axis=1)

    @property
    def n_params(self) -> int:
        return sum(p.size for p in self.parameters())


class Autoencoder:
    """Convolutional encoder -> dense latent bottleneck -> transposed-conv decoder (no skips)."""

    kind = "unet_autoencoder"

    def __init__(self, encoder: Sequential, decoder: Sequential, config: AEConfig):
        self.encoder = encoder
        self.decoder = decoder
        self.config = config

    def encode(self, x) -> Tensor:
        return self.encoder(x if isinstance(x, Tensor) else Tensor(x))

    def decode(self, z) -> Tensor:
        return self.decoder(z if isinstance(z, Tensor) else Tensor(z))

    def __call__(self, x) -> Tensor:
        return self.decode(self.encode(x))

    def named_parameters(self):
        return ([("encoder." + n, p) for n, p in self.encoder.named_parameters()]
                + [("decoder." + n, p) for n, p in self.decoder.named_parameters()])

    def parameters(self):
        return [p for _, p in self.named_parameters()]

    @property
    def latent_dim(self) -> int:
        return self.config.latent

    @property
    def n_params(self) -> int:
        return sum(p.size for p in self.parameters())


def build_simple_cnn(config: CNNConfig | None = None, **kw) -> Classifier:
    config = config or CNNConfig(**kw)
    s = config.input_size
    if s % 8:
        raise ValueError(f"Simple CNN input size must be divisible by 8, got {s}")
    layers, c_in = [], 1
    for c in config.channels:
        layers += [Conv2d(c_in, c, 3), ReLU(), MaxPool2d(2)]
        c_in = c
    down = s // 2 ** len(config.channels)
    layers += [Flatten(), Dense(c_in * down * down, config.hidden), ReLU(), Dense(config.hidden, config.classes)]
    net = Sequential(layers, (1, s, s)).init(rngmod.stream(config.seed, "init", "simple_cnn"))
    return Classifier(net, config)


def build_unet_autoencoder(config: AEConfig | None = None, **kw) -> Autoencoder:
    config = config or AEConfig(**kw)
    s = config.input_size
    if s <= 0 or s % 4:
        raise ValueError(f"autoencoder input size must be a positive multiple of 4, got {s}")
    c1, c2 = config.channels
    q = s // 4
    if config.latent >= s * s:
        raise ValueError(f"latent dimension {config.latent} must be smaller than the input dimension {s * s}")
    encoder = Sequential([
        Conv2d(1, c1, 3), ReLU(), MaxPool2d(2),
        Conv2d(c1, c2, 3), ReLU(), MaxPool2d(2),
        Flatten(), Dense(c2 * q * q, config.latent),
    ], (1, s, s))
    decoder = Sequential([
        Dense(config.latent, c2 * q * q), ReLU(), Unflatten((c2, q, q)),
        ConvTranspose2d(c2, c2, 2, 2), ReLU(),
        ConvTranspose2d(c2, c1, 2, 2), ReLU(),
        Conv2d(c1, 1, 3), Sigmoid(),
    ], (config.latent,))
    r = rngmod.stream(config.seed, "init", "unet_autoencoder")
    encoder.init(r)
    decoder.init(r)
    return Autoencoder(encoder, decoder, config)


# -- training ------------------------------------------------------------------

@dataclass
class TrainConfig:
    epochs: int = 30
    batch_size: int = 32
    lr: float = 1e-3
    optimizer: str = "adam"
    seed: int = 0


def train_classifier(model: Classifier, images: np.ndarray, labels: np.ndarray,
                     config: TrainConfig | None = None, **kw) -> list[dict]:
    """Mini-batch cross-entropy training. Returns one history record per epoch."""
    config = config or TrainConfig(**kw)
    n = len(images)
    if n == 0:
        raise ValueError("cannot train on an empty dataset")
    images = np.asarray(images, dtype=np.float32)
    labels = np.asarray(labels, dtype=np.int64)
    opt = Optimizer(model.parameters(), config.optimizer, config.lr)
    history = []
    for epoch in range(config.epochs):
        order = rngmod.stream(config.seed, "shuffle", "classifier", epoch).permutation(n)
        total, correct = 0.0, 0
        for sl in _batches(n, config.batch_size):
            idx = order[sl]
            opt.zero_grad()
            logits = model(images[idx])
            loss = cross_entropy(logits, labels[idx])
            loss.backward()
            opt.step()
            total += float(loss.data) * len(idx)
            correct += int((logits.data.argmax(axis=1) == labels[idx]).sum())
        rec = {"epoch": epoch + 1, "loss": total / n, "accuracy": correct / n}
        log.info("classifier epoch %d loss %.4f acc %.4f", rec["epoch"], rec["loss"], rec["accuracy"])
        history.append(rec)
    return history


def train_autoencoder(model: Autoencoder, spectra: np.ndarray, loss_kind: str = "mse",
                      config: TrainConfig | None = None, params: ReconParams = ReconParams(),
                      **kw) -> list[dict]:
    """Train on clean log-magnitude spectra. History holds the objective and the plain MSE."""
    if loss_kind not in LOSS_KINDS:
        raise ValueError(f"unknown loss kind {loss_kind!r}; expected one of {', '.join(LOSS_KINDS)}")
    kw.setdefault("epochs", 15)
    config = config or TrainConfig(**kw)
    spectra = np.asarray(spectra, dtype=np.float32)
    if spectra.ndim == 3:
        spectra = spectra[:, None]
    n = len(spectra)
    if n == 0:
        raise ValueError("cannot train on an empty dataset")
    opt = Optimizer(model.parameters(), config.optimizer, config.lr)
    history = []
    for epoch in range(config.epochs):
        order = rngmod.stream(config.seed, "shuffle", "autoencoder", epoch).permutation(n)
        probe_rng = rngmod.stream(config.seed, "sure-probe", epoch)
        total, total_mse = 0.0, 0.0
        for sl in _batches(n, config.batch_size):
            y = spectra[order[sl]]
            opt.zero_grad()
            pred = model(y)
            loss = composite_recon_loss(loss_kind, pred, y, operator=model, params=params, rng=probe_rng)
            loss.backward()
            opt.step()
            total += float(loss.data) * len(y)
            total_mse += float(mse_loss(pred.detach(), y).data) * len(y)
        rec = {"epoch": epoch + 1, "loss": total / n, "mse": total_mse / n}
        log.info("autoencoder[%s] epoch %d loss %.6f mse %.6f", loss_kind, rec["epoch"], rec["loss"], rec["mse"])
        history.append(rec)
    return history


def reconstruction_mse(model: Autoencoder, spectra: np.ndarray, batch_size: int = 128) -> float:
    spectra = np.asarray(spectra, dtype=np.float32)
    if spectra.ndim == 3:
        spectra = spectra[:, None]
    total = 0.0
    for sl in _batches(len(spectra), batch_size):
        y = spectra[sl]
        total += float(((model(y).data - y) ** 2).mean()) * len(y)
    return total / len(spectra)


# -- checkpoints ---------------------------------------------------------------

MAGIC = b"FQSD"
VERSION = 1


class CheckpointError(ValueError):
    pass


def _architecture(model) -> dict:
    cfg = asdict(model.config)
    cfg = {k: list(v) if isinstance(v, tuple) else v for k, v in cfg.items()}
    if isinstance(model, Autoencoder):
        layers = {"encoder": model.encoder.specs(), "decoder": model.decoder.specs()}
    else:
        layers = model.net.specs()
    return {"kind": model.kind, "config": cfg, "layers": layers}


def checkpoint_bytes(model, meta: dict | None = None) -> bytes:
    named = model.named_parameters()
    header = {
        "architecture": _architecture(model),
        "dtype": "f32",
        "tensors": [{"name": n, "shape": list(p.shape)} for n, p in named],
        "meta": meta or {},
    }
    hbytes = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    payload = b"".join(np.ascontiguousarray(p.data, dtype="<f4").tobytes() for _, p in named)
    return MAGIC + struct.pack("<I", VERSION) + struct.pack("<Q", len(hbytes)) + hbytes + payload


def save_checkpoint(model, path, meta: dict | None = None) -> None:
    Path(path).write_bytes(checkpoint_bytes(model, meta))


def read_header(blob: bytes) -> tuple[dict, int]:
    if len(blob) < 16 or blob[:4] != MAGIC:
        raise CheckpointError("not a checkpoint file: bad magic (expected 'FQSD')")
    (version,) = struct.unpack("<I", blob[4:8])
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version} (expected {VERSION})")
    (hlen,) = struct.unpack("<Q", blob[8:16])
    if 16 + hlen > len(blob):
        raise CheckpointError("truncated checkpoint header")
    try:
        header = json.loads(blob[16:16 + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"corrupt checkpoint header: {exc}") from None
    if header.get("dtype") != "f32":
        raise CheckpointError(f"unsupported dtype tag {header.get('dtype')!r}")
    return header, 16 + hlen


def _build_from_header(arch: dict):
    cfg = dict(arch["config"])
    if arch["kind"] == "simple_cnn":
        cfg["channels"] = tuple(cfg["channels"])
        return build_simple_cnn(CNNConfig(**cfg))
    if arch["kind"] == "unet_autoencoder":
        cfg["channels"] = tuple(cfg["channels"])
        return build_unet_autoencoder(AEConfig(**cfg))
    raise CheckpointError(f"unknown architecture kind {arch['kind']!r}")


def load_checkpoint(path, with_meta: bool = False):
    blob = Path(path).read_bytes()
    header, offset = read_header(blob)
    with precision(np.float32):
        model = _build_from_header(header["architecture"])
    named = model.named_parameters()
    declared = header["tensors"]
    if [d["name"] for d in declared] != [n for n, _ in named]:
        raise CheckpointError("checkpoint tensor list does not match the architecture")
    expected = sum(int(np.prod(d["shape"])) for d in declared) * 4
    if len(blob) - offset != expected:
        raise CheckpointError(f"payload is {len(blob) - offset} bytes, header declares {expected}"
                              + (" (truncated)" if len(blob) - offset < expected else ""))
    for d, (_, p) in zip(declared, named):
        count = int(np.prod(d["shape"]))
        arr = np.frombuffer(blob, dtype="<f4", count=count, offset=offset).reshape(d["shape"])
        if arr.shape != p.shape:
            raise CheckpointError(f"tensor {d['name']} has shape {arr.shape}, model expects {p.shape}")
        p.data[...] = arr
        offset += count * 4
    return (model, header.get("meta", {})) if with_meta else model
