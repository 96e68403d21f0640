"""Minimal feed-forward substrate for the shape autoencoder.

Everything is plain numpy float64 with explicit reverse-mode gradients, which
keeps training bit-reproducible for a fixed seed and lets every gradient path
be checked against central finite differences.

Architecture (PointNet-style): the encoder applies a shared per-point MLP to
each point of an (N, 3) cloud, takes a coordinate-wise max over points (exact
permutation invariance), and maps the pooled feature through a fully connected
head to a D-dimensional latent code.  The decoder is a fully connected MLP
from the code to N*3 outputs.  ReLU everywhere except each net's final layer;
the ReLU subgradient at exactly 0 is taken to be 0.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .metrics import chamfer3, chamfer_grad

ENCODER_POINT_WIDTHS = (64, 64, 64, 128, 1024)
ENCODER_HEAD_WIDTHS = (512,)
DECODER_WIDTHS = (256, 512, 1024, 2048)

MODEL_FORMAT_VERSION = 1


class TrainingDivergedError(RuntimeError):
    """Training loss became non-finite; carries the epoch index."""

    def __init__(self, epoch: int):
        super().__init__(f"training diverged at epoch {epoch}")
        self.epoch = epoch


# ---------------------------------------------------------------------------
# layers


@dataclass
class Layer:
    weight: np.ndarray  # (in, out)
    bias: np.ndarray    # (out,)
    activation: str     # "relu" | "linear"


@dataclass
class Mlp:
    layers: list[Layer]

    @property
    def in_dim(self) -> int:
        return self.layers[0].weight.shape[0]

    @property
    def out_dim(self) -> int:
        return self.layers[-1].weight.shape[1]

    def forward(self, x: np.ndarray):
        """Forward pass over a (B, in_dim) batch; returns (y, cache)."""
        x = np.asarray(x, dtype=np.float64)
        if x.ndim != 2 or x.shape[1] != self.in_dim:
            raise ValueError(f"expected (B, {self.in_dim}) input, got {x.shape}")
        cache = []
        h = x
        for layer in self.layers:
            z = h @ layer.weight + layer.bias
            if layer.activation == "relu":
                out = np.maximum(z, 0.0)
            elif layer.activation == "linear":
                out = z
            else:
                raise ValueError(f"unknown activation {layer.activation!r}")
            cache.append((h, z))
            h = out
        return h, cache

    def backward(self, cache, grad_out: np.ndarray):
        """Reverse-mode pass; returns ([(gW, gb), ...], grad_input)."""
        g = np.asarray(grad_out, dtype=np.float64)
        grads: list[tuple[np.ndarray, np.ndarray]] = [None] * len(self.layers)
        for i in range(len(self.layers) - 1, -1, -1):
            layer = self.layers[i]
            h, z = cache[i]
            if g.shape != (h.shape[0], layer.weight.shape[1]):
                raise ValueError(f"upstream gradient shape {g.shape} mismatches layer {i}")
            if layer.activation == "relu":
                g = g * (z > 0.0)  # subgradient 0 at z == 0
            grads[i] = (h.T @ g, g.sum(axis=0))
            g = g @ layer.weight.T
        return grads, g

    def backward_input(self, cache, grad_out: np.ndarray) -> np.ndarray:
        """Input gradient only; skips the parameter-gradient outer products.

        Follows the same reverse path as :meth:`backward`, so the returned
        input gradient is identical.
        """
        g = np.asarray(grad_out, dtype=np.float64)
        for i in range(len(self.layers) - 1, -1, -1):
            layer = self.layers[i]
            h, z = cache[i]
            if g.shape != (h.shape[0], layer.weight.shape[1]):
                raise ValueError(f"upstream gradient shape {g.shape} mismatches layer {i}")
            if layer.activation == "relu":
                g = g * (z > 0.0)  # subgradient 0 at z == 0
            g = g @ layer.weight.T
        return g

    def param_arrays(self) -> list[np.ndarray]:
        out = []
        for layer in self.layers:
            out.append(layer.weight)
            out.append(layer.bias)
        return out

    def with_params(self, arrays: list[np.ndarray]) -> "Mlp":
        assert len(arrays) == 2 * len(self.layers)
        layers = [
            Layer(arrays[2 * i], arrays[2 * i + 1], layer.activation)
            for i, layer in enumerate(self.layers)
        ]
        return Mlp(layers)


def init_mlp(sizes: list[int], rng: np.random.Generator, final_linear: bool = True) -> Mlp:
    """Glorot-uniform initialized MLP with ReLU between layers."""
    layers = []
    for i in range(len(sizes) - 1):
        fan_in, fan_out = sizes[i], sizes[i + 1]
        limit = math.sqrt(6.0 / (fan_in + fan_out))
        w = rng.uniform(-limit, limit, size=(fan_in, fan_out))
        b = np.zeros(fan_out)
        last = i == len(sizes) - 2
        layers.append(Layer(w, b, "linear" if (last and final_linear) else "relu"))
    return Mlp(layers)


# ---------------------------------------------------------------------------
# encoder / decoder


@dataclass
class EncoderParams:
    point_net: Mlp  # shared per-point MLP, all-ReLU
    head: Mlp       # pooled feature -> latent code, final layer linear

    @property
    def latent_dim(self) -> int:
        return self.head.out_dim


@dataclass
class DecoderParams:
    net: Mlp
    n_points: int

    @property
    def latent_dim(self) -> int:
        return self.net.in_dim


def init_autoencoder(latent_dim: int, n_points: int, rng: np.random.Generator):
    enc_point = init_mlp([3, *ENCODER_POINT_WIDTHS], rng, final_linear=False)
    enc_head = init_mlp([ENCODER_POINT_WIDTHS[-1], *ENCODER_HEAD_WIDTHS, latent_dim], rng)
    dec = init_mlp([latent_dim, *DECODER_WIDTHS, n_points * 3], rng)
    return EncoderParams(enc_point, enc_head), DecoderParams(dec, n_points)


def encode(params: EncoderParams, cloud: np.ndarray) -> np.ndarray:
    """Map an (N, 3) cloud to its latent code.  Exactly permutation invariant."""
    code, _ = _encode_with_cache(params, np.asarray(cloud, dtype=np.float64))
    return code


def _encode_with_cache(params: EncoderParams, cloud: np.ndarray):
    feats, cache_pt = params.point_net.forward(cloud)
    pool_idx = feats.argmax(axis=0)
    pooled = feats[pool_idx, np.arange(feats.shape[1])]
    code, cache_head = params.head.forward(pooled[None, :])
    return code[0], (cache_pt, pool_idx, feats.shape, cache_head)


def _encode_backward(params: EncoderParams, cache, grad_code: np.ndarray):
    cache_pt, pool_idx, feat_shape, cache_head = cache
    grads_head, g_pooled = params.head.backward(cache_head, grad_code[None, :])
    g_feats = np.zeros(feat_shape)
    g_feats[pool_idx, np.arange(feat_shape[1])] = g_pooled[0]
    grads_pt, g_cloud = params.point_net.backward(cache_pt, g_feats)
    return grads_pt, grads_head, g_cloud


def decode(params: DecoderParams, code: np.ndarray) -> np.ndarray:
    """Map a latent code to its (N, 3) reconstruction.  Deterministic."""
    cloud, _ = _decode_with_cache(params, np.asarray(code, dtype=np.float64))
    return cloud


def _decode_with_cache(params: DecoderParams, code: np.ndarray):
    if code.shape != (params.latent_dim,):
        raise ValueError(f"expected ({params.latent_dim},) code, got {code.shape}")
    flat, cache = params.net.forward(code[None, :])
    return flat[0].reshape(params.n_points, 3), cache


def decode_grad(params: DecoderParams, cache, grad_cloud: np.ndarray):
    """Gradients of a scalar loss through the decoder.

    Returns ``(param_grads, grad_code)`` where ``param_grads`` aligns with
    ``params.net.param_arrays()``.
    """
    g_flat = np.asarray(grad_cloud, dtype=np.float64).reshape(1, -1)
    grads, g_code = params.net.backward(cache, g_flat)
    flat = []
    for gw, gb in grads:
        flat.extend((gw, gb))
    return flat, g_code[0]


def _decode_batch_with_cache(params: DecoderParams, codes: np.ndarray):
    """Decode a (B, D) batch of codes to (B, N, 3) clouds with a shared cache."""
    codes = np.asarray(codes, dtype=np.float64)
    if codes.ndim != 2 or codes.shape[1] != params.latent_dim:
        raise ValueError(f"expected (B, {params.latent_dim}) codes, got {codes.shape}")
    flat, cache = params.net.forward(codes)
    return flat.reshape(len(codes), params.n_points, 3), cache


def _decode_batch_input_grad(params: DecoderParams, cache,
                             grad_clouds: np.ndarray) -> np.ndarray:
    """Latent gradients (B, D) of a scalar loss through a batched decode."""
    g_flat = np.asarray(grad_clouds, dtype=np.float64).reshape(len(grad_clouds), -1)
    return params.net.backward_input(cache, g_flat)


def chamfer3_grad(a: np.ndarray, b: np.ndarray, reduction: str = "mean") -> np.ndarray:
    """Gradient of :func:`silrec.metrics.chamfer3` with respect to ``a``."""
    return chamfer_grad(a, b, reduction=reduction)


# ---------------------------------------------------------------------------
# Adam


@dataclass
class AdamState:
    step: int
    m: list[np.ndarray]
    v: list[np.ndarray]
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8


def adam_init(params: list[np.ndarray], lr: float = 1e-3, beta1: float = 0.9,
              beta2: float = 0.999, eps: float = 1e-8) -> AdamState:
    return AdamState(
        step=0,
        m=[np.zeros_like(p) for p in params],
        v=[np.zeros_like(p) for p in params],
        lr=lr, beta1=beta1, beta2=beta2, eps=eps,
    )


def adam_step(state: AdamState, params: list[np.ndarray], grads: list[np.ndarray],
              names: list[str] | None = None):
    """One bias-corrected Adam update; returns ``(new_state, new_params)``."""
    if len(params) != len(grads) or len(params) != len(state.m):
        raise ValueError("parameter / gradient / state length mismatch")
    t = state.step + 1
    new_m, new_v, new_p = [], [], []
    for i, (p, g) in enumerate(zip(params, grads)):
        if not np.all(np.isfinite(g)):
            label = names[i] if names else f"block {i}"
            raise FloatingPointError(f"non-finite gradient in {label}")
        m = state.beta1 * state.m[i] + (1.0 - state.beta1) * g
        v = state.beta2 * state.v[i] + (1.0 - state.beta2) * g * g
        m_hat = m / (1.0 - state.beta1 ** t)
        v_hat = v / (1.0 - state.beta2 ** t)
        new_m.append(m)
        new_v.append(v)
        new_p.append(p - state.lr * m_hat / (np.sqrt(v_hat) + state.eps))
    return replace(state, step=t, m=new_m, v=new_v), new_p


# ---------------------------------------------------------------------------
# training


@dataclass
class TrainConfig:
    epochs: int = 150
    batch_size: int = 16
    learning_rate: float = 1e-3
    seed: int = 0
    latent_dim: int = 32
    n_points: int = 256

    def __post_init__(self):
        if min(self.epochs, self.batch_size, self.n_points, self.latent_dim) < 1:
            raise ValueError("all TrainConfig sizes must be positive")
        if self.learning_rate <= 0:
            raise ValueError("learning rate must be positive")
        if self.latent_dim >= 3 * self.n_points:
            raise ValueError("latent_dim must be < 3 * n_points")


@dataclass
class TrainedAutoencoder:
    encoder: EncoderParams
    decoder: DecoderParams
    config: TrainConfig
    epoch_losses: list[float] = field(default_factory=list)


def _ae_param_arrays(enc: EncoderParams, dec: DecoderParams) -> list[np.ndarray]:
    return enc.point_net.param_arrays() + enc.head.param_arrays() + dec.net.param_arrays()


def _ae_from_arrays(enc: EncoderParams, dec: DecoderParams, arrays: list[np.ndarray]):
    n1 = 2 * len(enc.point_net.layers)
    n2 = n1 + 2 * len(enc.head.layers)
    new_enc = EncoderParams(enc.point_net.with_params(arrays[:n1]),
                            enc.head.with_params(arrays[n1:n2]))
    new_dec = DecoderParams(dec.net.with_params(arrays[n2:]), dec.n_points)
    return new_enc, new_dec


def _batch_loss_and_grads(enc: EncoderParams, dec: DecoderParams, batch: np.ndarray):
    """Mean Chamfer reconstruction loss over a (B, N, 3) batch, with grads."""
    bsz, n, _ = batch.shape
    flat = batch.reshape(bsz * n, 3)
    feats, cache_pt = enc.point_net.forward(flat)
    width = feats.shape[1]
    per_cloud = feats.reshape(bsz, n, width)
    pool_idx = per_cloud.argmax(axis=1)                       # (B, width)
    rows = np.arange(bsz)[:, None]
    pooled = per_cloud[rows, pool_idx, np.arange(width)]      # (B, width)
    codes, cache_head = enc.head.forward(pooled)
    out_flat, cache_dec = dec.net.forward(codes)
    recon = out_flat.reshape(bsz, n, 3)

    loss = 0.0
    g_recon = np.empty_like(recon)
    for i in range(bsz):
        loss += chamfer3(recon[i], batch[i])
        g_recon[i] = chamfer_grad(recon[i], batch[i]) / bsz
    loss /= bsz

    grads_dec, g_codes = dec.net.backward(cache_dec, g_recon.reshape(bsz, -1))
    grads_head, g_pooled = enc.head.backward(cache_head, g_codes)
    g_feats = np.zeros((bsz, n, width))
    g_feats[rows, pool_idx, np.arange(width)] = g_pooled
    grads_pt, _ = enc.point_net.backward(cache_pt, g_feats.reshape(bsz * n, width))

    flat_grads: list[np.ndarray] = []
    for group in (grads_pt, grads_head, grads_dec):
        for gw, gb in group:
            flat_grads.extend((gw, gb))
    return loss, flat_grads


def train_autoencoder(dataset: list[np.ndarray], cfg: TrainConfig) -> TrainedAutoencoder:
    """Train encoder+decoder on normalized clouds with 3D Chamfer loss.

    Deterministic given ``cfg.seed``; aborts with
    :class:`TrainingDivergedError` if the loss becomes non-finite.
    """
    if not dataset:
        raise ValueError("dataset is empty")
    data = np.stack([np.asarray(c, dtype=np.float64) for c in dataset])
    if data.shape[1] != cfg.n_points or data.shape[2] != 3:
        raise ValueError(f"dataset clouds must be ({cfg.n_points}, 3), got {data.shape[1:]}")

    rng = np.random.default_rng(cfg.seed)
    enc, dec = init_autoencoder(cfg.latent_dim, cfg.n_points, rng)
    params = _ae_param_arrays(enc, dec)
    state = adam_init(params, lr=cfg.learning_rate)

    epoch_losses: list[float] = []
    n = len(data)
    for epoch in range(cfg.epochs):
        order = rng.permutation(n)
        total = 0.0
        for start in range(0, n, cfg.batch_size):
            idx = order[start : start + cfg.batch_size]
            enc, dec = _ae_from_arrays(enc, dec, params)
            loss, grads = _batch_loss_and_grads(enc, dec, data[idx])
            if not math.isfinite(loss):
                raise TrainingDivergedError(epoch)
            state, params = adam_step(state, params, grads)
            total += loss * len(idx)
        epoch_losses.append(total / n)
    enc, dec = _ae_from_arrays(enc, dec, params)
    return TrainedAutoencoder(enc, dec, cfg, epoch_losses)


# ---------------------------------------------------------------------------
# persistence (JSON; weights as hex-float strings, exact round trip)


def _encode_array(a: np.ndarray) -> dict:
    return {"shape": list(a.shape), "data": " ".join(float.hex(float(x)) for x in a.ravel())}


def _decode_array(d: dict) -> np.ndarray:
    data = d["data"]
    vals = [float.fromhex(t) for t in data.split()] if data else []
    return np.array(vals, dtype=np.float64).reshape(d["shape"])


def _mlp_to_json(mlp: Mlp) -> dict:
    return {
        "layers": [
            {"weight": _encode_array(l.weight), "bias": _encode_array(l.bias),
             "activation": l.activation}
            for l in mlp.layers
        ]
    }


def _mlp_from_json(d: dict) -> Mlp:
    layers = [
        Layer(_decode_array(l["weight"]), _decode_array(l["bias"]), l["activation"])
        for l in d["layers"]
    ]
    for prev, cur in zip(layers, layers[1:]):
        if prev.weight.shape[1] != cur.weight.shape[0]:
            raise ValueError("layer dimensions do not chain")
    return Mlp(layers)


def save_model(path: str | Path, model: TrainedAutoencoder) -> None:
    doc = {
        "format_version": MODEL_FORMAT_VERSION,
        "latent_dim": model.config.latent_dim,
        "n_points": model.decoder.n_points,
        "config": {
            "epochs": model.config.epochs,
            "batch_size": model.config.batch_size,
            "learning_rate": model.config.learning_rate,
            "seed": model.config.seed,
            "latent_dim": model.config.latent_dim,
            "n_points": model.config.n_points,
        },
        "epoch_losses": [float.hex(float(x)) for x in model.epoch_losses],
        "encoder": {
            "point_net": _mlp_to_json(model.encoder.point_net),
            "head": _mlp_to_json(model.encoder.head),
        },
        "decoder": _mlp_to_json(model.decoder.net),
    }
    Path(path).write_text(json.dumps(doc, sort_keys=True))


def load_model(path: str | Path) -> TrainedAutoencoder:
    doc = json.loads(Path(path).read_text())
    if doc.get("format_version") != MODEL_FORMAT_VERSION:
        raise ValueError(f"unsupported model format version {doc.get('format_version')!r}")
    enc = EncoderParams(
        _mlp_from_json(doc["encoder"]["point_net"]),
        _mlp_from_json(doc["encoder"]["head"]),
    )
    dec = DecoderParams(_mlp_from_json(doc["decoder"]), doc["n_points"])
    cfg = TrainConfig(**doc["config"])
    losses = [float.fromhex(x) for x in doc["epoch_losses"]]
    return TrainedAutoencoder(enc, dec, cfg, losses)
