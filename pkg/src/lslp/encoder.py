"""Trainable convolutional feature encoder and checkpoint persistence.

The default architecture is three 3x3 conv+relu blocks (16, 32, 64
channels) with 2x2 max pools after the first two, so a (1, h, w) image maps
to a (64, h/4, w/4) feature tensor. Any architecture meeting the shape
contract plugs in through ``ArchConfig``.
"""

import hashlib
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import tensorio
from .autodiff import Graph, bias_add, conv2d, maxpool2, relu
from .episodes import rng_from_seed
from .errors import ConfigError, DataError

CHECKPOINT_SCHEMA_VERSION = 1


@dataclass(frozen=True)
class ArchConfig:
    in_channels: int = 1
    channels: tuple = (16, 32, 64)
    pool_after: tuple = (True, True, False)
    kernel: int = 3

    def validate(self) -> "ArchConfig":
        if not self.channels:
            raise ConfigError("encoder needs at least one conv layer")
        if len(self.pool_after) != len(self.channels):
            raise ConfigError("pool_after must list one flag per conv layer")
        if self.kernel % 2 != 1:
            raise ConfigError(f"kernel must be odd, got {self.kernel}")
        return self

    @property
    def downsample_factor(self) -> int:
        return 2 ** sum(bool(p) for p in self.pool_after)

    @property
    def depth(self) -> int:
        return self.channels[-1]


@dataclass(eq=False)
class EncoderParams:
    arch: ArchConfig
    weights: list  # per layer (c_out, c_in, k, k) float32
    biases: list   # per layer (c_out,) float32

    def named_parameters(self) -> dict:
        out = {}
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            out[f"conv{i}.weight"] = w
            out[f"conv{i}.bias"] = b
        return out


def init_params(arch: ArchConfig, seed: int) -> EncoderParams:
    """Glorot-uniform weights (fans counted over the full receptive field),
    zero biases; bit-identical from the seed."""
    arch = arch.validate()
    rng = rng_from_seed(seed, 0x1417)
    k = arch.kernel
    weights, biases = [], []
    c_in = arch.in_channels
    for c_out in arch.channels:
        fan_in = c_in * k * k
        fan_out = c_out * k * k
        bound = np.sqrt(6.0 / (fan_in + fan_out))
        weights.append(rng.uniform(-bound, bound,
                                   size=(c_out, c_in, k, k)).astype(np.float32))
        biases.append(np.zeros(c_out, dtype=np.float32))
        c_in = c_out
    return EncoderParams(arch, weights, biases)


def feature_shape(arch: ArchConfig, image_shape) -> tuple:
    """(fw, fh) the encoder produces for a (w, h) input."""
    w, h = int(image_shape[0]), int(image_shape[1])
    f = arch.downsample_factor
    if w % f or h % f:
        raise ConfigError(
            f"image size ({w}, {h}) not divisible by downsample factor {f}")
    return (w // f, h // f)


def register_params(graph: Graph, params: EncoderParams) -> dict:
    """Create one trainable input node per parameter on ``graph``."""
    return {name: graph.input(arr, name=name, param=True)
            for name, arr in params.named_parameters().items()}


def encode(image, params: EncoderParams, graph: Graph = None, param_nodes=None):
    """Run the encoder. With a graph, the whole pass is recorded for
    backprop and a feature Node is returned; without one this is a plain
    float32 computation."""
    arch = params.arch
    pad = arch.kernel // 2
    arr = np.asarray(image, dtype=np.float32)
    if arr.ndim != 3 or arr.shape[0] != arch.in_channels:
        raise ConfigError(
            f"image shape {arr.shape} invalid; encoder wants "
            f"({arch.in_channels}, h, w)")
    feature_shape(arch, (arr.shape[2], arr.shape[1]))
    if graph is not None:
        if param_nodes is None:
            param_nodes = register_params(graph, params)
        x = graph.input(arr, name="image")
        get = lambda name, _arr: param_nodes[name]
    else:
        x = arr
        get = lambda name, _arr: _arr
    for i, pool in enumerate(arch.pool_after):
        w = get(f"conv{i}.weight", params.weights[i])
        b = get(f"conv{i}.bias", params.biases[i])
        x = relu(bias_add(conv2d(x, w, pad=pad, name=f"conv{i}"), b), name=f"relu{i}")
        if pool:
            x = maxpool2(x, name=f"pool{i}")
    return x


# --------------------------------------------------------------------------
# Checkpoints: manifest JSON + one tensor file per parameter; resume is
# bit-exact because parameters round-trip bit-exactly.
# --------------------------------------------------------------------------

def config_fingerprint(doc: dict) -> str:
    """Stable hash of a JSON-able config document."""
    canon = json.dumps(doc, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canon.encode()).hexdigest()[:16]


def save_checkpoint(ckpt_dir, params: EncoderParams, optimizer_doc: dict,
                    train_doc: dict, iteration: int, rng_doc: dict) -> Path:
    ckpt_dir = Path(ckpt_dir)
    (ckpt_dir / "params").mkdir(parents=True, exist_ok=True)
    named = params.named_parameters()
    for name, arr in named.items():
        tensorio.save_tensor(ckpt_dir / "params" / f"{name}.lslp", arr)
    manifest = {
        "schema_version": CHECKPOINT_SCHEMA_VERSION,
        "arch": {
            "in_channels": params.arch.in_channels,
            "channels": list(params.arch.channels),
            "pool_after": [bool(p) for p in params.arch.pool_after],
            "kernel": params.arch.kernel,
        },
        "parameters": sorted(named),
        "iteration": int(iteration),
        "optimizer": optimizer_doc,
        "rng": rng_doc,
        "train_config": train_doc,
        "fingerprint": config_fingerprint(train_doc),
    }
    (ckpt_dir / "manifest.json").write_text(
        json.dumps(manifest, indent=2, sort_keys=True))
    return ckpt_dir


def load_checkpoint(ckpt_dir) -> tuple:
    """Returns (EncoderParams, manifest dict)."""
    ckpt_dir = Path(ckpt_dir)
    manifest_path = ckpt_dir / "manifest.json"
    if not manifest_path.is_file():
        raise DataError(f"no checkpoint manifest under {ckpt_dir}")
    manifest = json.loads(manifest_path.read_text())
    if manifest.get("schema_version") != CHECKPOINT_SCHEMA_VERSION:
        raise DataError(f"unsupported checkpoint schema in {manifest_path}")
    a = manifest["arch"]
    arch = ArchConfig(int(a["in_channels"]), tuple(a["channels"]),
                      tuple(bool(p) for p in a["pool_after"]),
                      int(a["kernel"])).validate()
    weights, biases = [], []
    for i in range(len(arch.channels)):
        weights.append(tensorio.load_tensor(ckpt_dir / "params" / f"conv{i}.weight.lslp"))
        biases.append(tensorio.load_tensor(ckpt_dir / "params" / f"conv{i}.bias.lslp"))
    params = EncoderParams(arch, weights, biases)
    expect_in = arch.in_channels
    for i, w in enumerate(weights):
        if w.shape != (arch.channels[i], expect_in, arch.kernel, arch.kernel):
            raise DataError(f"checkpoint weight conv{i} has shape {w.shape}")
        expect_in = arch.channels[i]
    return params, manifest
