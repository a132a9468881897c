"""Miniature self-supervised encoder: conv front-end + pre-norm transformer blocks."""
from __future__ import annotations

import io
import json
import os
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import numerics as nx
from .numerics import ParamStore, Tensor

FRONTEND = "frontend"
TRANSFORMER = "transformer"
ADAPTATION = "adaptation"
MASK_EMBEDDING = "mask_embedding"


@dataclass
class EncoderConfig:
    d_in: int = 16
    conv_blocks: int = 2
    conv_kernel: int = 3
    conv_stride: int = 2
    conv_channels: int = 32
    blocks: int = 3
    d_model: int = 32
    heads: int = 4
    d_ff: int = 128
    mask_embedding: bool = True
    # parameter-free per-frame standardisation of the last block output
    final_norm: bool = True

    def validate(self) -> "EncoderConfig":
        if self.d_model % self.heads:
            raise ValueError(f"d_model={self.d_model} not divisible by heads={self.heads}")
        if self.d_ff < self.d_model:
            raise ValueError("d_ff must be >= d_model")
        if self.conv_stride < 1 or self.conv_kernel < 1 or self.conv_blocks < 1:
            raise ValueError("conv stride, kernel and block count must be >= 1")
        if min(self.d_in, self.conv_channels, self.blocks, self.d_model) < 1:
            raise ValueError("dimensions must be positive")
        return self

    @property
    def total_stride(self) -> int:
        return self.conv_stride ** self.conv_blocks

    def output_length(self, frames: int) -> int:
        t = frames
        for _ in range(self.conv_blocks):
            t = -(-t // self.conv_stride)
        return t

    @classmethod
    def from_dict(cls, d: dict) -> "EncoderConfig":
        return cls(**d).validate()


@dataclass
class AdaptationSpec:
    kind: str = "none"  # none | lora | adapter
    rank: int = 16
    bottleneck: int = 8

    def __post_init__(self):
        if self.kind not in ("none", "lora", "adapter"):
            raise ValueError(f"unknown adaptation kind {self.kind!r}")
        if self.kind == "lora" and self.rank < 1:
            raise ValueError("LoRA rank must be >= 1")
        if self.kind == "adapter" and self.bottleneck < 1:
            raise ValueError("adapter bottleneck must be >= 1")


def partition(name: str) -> str:
    """Partition label of an encoder parameter name."""
    if name == "mask_embedding":
        return MASK_EMBEDDING
    if name.startswith("frontend."):
        return FRONTEND
    if name.startswith("block"):
        if ".lora_" in name or ".adapter." in name:
            return ADAPTATION
        return TRANSFORMER
    raise KeyError(f"{name!r} is not an encoder parameter")


def sinusoidal_positions(length: int, dim: int) -> np.ndarray:
    pos = np.arange(length)[:, None]
    i = np.arange(0, dim, 2)[None, :]
    angle = pos / np.power(10000.0, i / dim)
    pe = np.zeros((length, dim))
    pe[:, 0::2] = np.sin(angle)
    pe[:, 1::2] = np.cos(angle[:, : dim // 2])
    return pe


def _init(rng: np.random.Generator, fan_in: int, shape) -> np.ndarray:
    return rng.normal(0.0, 1.0 / np.sqrt(fan_in), size=shape)


class Encoder:
    """Parameters live in ``self.params``; the forward pass is functional over them."""

    def __init__(self, config: EncoderConfig | None = None, seed: int = 0, params: ParamStore | None = None):
        self.config = (config or EncoderConfig()).validate()
        self.lora_rank: int | None = None
        self.adapter_dim: int | None = None
        if params is not None:
            self.params = params
            self._detect_attachments()
            return
        cfg = self.config
        rng = np.random.default_rng(seed)
        p = ParamStore()
        c_in = cfg.d_in
        for i in range(cfg.conv_blocks):
            p.add(f"frontend.conv{i}.weight", _init(rng, c_in * cfg.conv_kernel, (cfg.conv_kernel, c_in, cfg.conv_channels)))
            p.add(f"frontend.conv{i}.bias", np.zeros(cfg.conv_channels))
            c_in = cfg.conv_channels
        p.add("frontend.norm.gamma", np.ones(c_in))
        p.add("frontend.norm.beta", np.zeros(c_in))
        p.add("frontend.proj.weight", _init(rng, c_in, (c_in, cfg.d_model)))
        p.add("frontend.proj.bias", np.zeros(cfg.d_model))
        if cfg.mask_embedding:
            p.add("mask_embedding", rng.uniform(-0.5, 0.5, size=cfg.d_model))
        d, f = cfg.d_model, cfg.d_ff
        for b in range(cfg.blocks):
            pre = f"block{b}"
            p.add(f"{pre}.ln1.gamma", np.ones(d))
            p.add(f"{pre}.ln1.beta", np.zeros(d))
            p.add(f"{pre}.attn.qkv.weight", _init(rng, d, (d, 3 * d)))
            p.add(f"{pre}.attn.qkv.bias", np.zeros(3 * d))
            p.add(f"{pre}.attn.out.weight", _init(rng, d, (d, d)) / np.sqrt(2 * cfg.blocks))
            p.add(f"{pre}.attn.out.bias", np.zeros(d))
            p.add(f"{pre}.ln2.gamma", np.ones(d))
            p.add(f"{pre}.ln2.beta", np.zeros(d))
            p.add(f"{pre}.ffn1.weight", _init(rng, d, (d, f)))
            p.add(f"{pre}.ffn1.bias", np.zeros(f))
            p.add(f"{pre}.ffn2.weight", _init(rng, f, (f, d)) / np.sqrt(2 * cfg.blocks))
            p.add(f"{pre}.ffn2.bias", np.zeros(d))
        self.params = p

    def _detect_attachments(self) -> None:
        names = self.params.names()
        lora = [n for n in names if n.endswith(".lora_A")]
        if lora:
            self.lora_rank = int(self.params[lora[0]].shape[0])
        down = [n for n in names if n.endswith(".adapter.down.weight")]
        if down:
            self.adapter_dim = int(self.params[down[0]].shape[1])

    @property
    def num_layers(self) -> int:
        """Number of exposed latents: front-end output plus one per block."""
        return self.config.blocks + 1

    def partitions(self) -> dict[str, list[str]]:
        out: dict[str, list[str]] = {FRONTEND: [], TRANSFORMER: [], ADAPTATION: [], MASK_EMBEDDING: []}
        for n in self.params.names():
            out[partition(n)].append(n)
        return out

    def pretrained_names(self) -> list[str]:
        return [n for n in self.params.names() if partition(n) != ADAPTATION]

    # ------------------------------------------------------------------ forward

    def frontend(self, x: Tensor, lengths: np.ndarray) -> tuple[Tensor, np.ndarray]:
        cfg, p = self.config, self.params
        lengths = np.asarray(lengths)
        h = x
        for i in range(cfg.conv_blocks):
            h = nx.conv1d(h, p[f"frontend.conv{i}.weight"], p[f"frontend.conv{i}.bias"], cfg.conv_stride)
            h = nx.relu(h)
            lengths = -(-lengths // cfg.conv_stride)
            if (lengths < h.shape[1]).any():
                valid = np.arange(h.shape[1])[None, :] < lengths[:, None]
                h = nx.mul(h, valid[..., None].astype(np.float64))
        h = nx.layer_norm(h, p["frontend.norm.gamma"], p["frontend.norm.beta"])
        h = nx.linear(h, p["frontend.proj.weight"], p["frontend.proj.bias"])
        return h, lengths

    def _block(self, b: int, x: Tensor, key_bias: np.ndarray | None) -> Tensor:
        cfg, p = self.config, self.params
        pre = f"block{b}"
        n, t, d = x.shape
        heads = cfg.heads
        dh = d // heads
        h = nx.layer_norm(x, p[f"{pre}.ln1.gamma"], p[f"{pre}.ln1.beta"])
        qkv = nx.linear(h, p[f"{pre}.attn.qkv.weight"], p[f"{pre}.attn.qkv.bias"])
        qkv = nx.transpose(nx.reshape(qkv, (n, t, 3, heads, dh)), (2, 0, 3, 1, 4))
        q, k, v = _split3(qkv)
        scores = nx.mul(nx.matmul(q, nx.transpose(k, (0, 1, 3, 2))), 1.0 / np.sqrt(dh))
        if key_bias is not None:
            scores = nx.add(scores, key_bias)
        att = nx.softmax(scores, axis=-1)
        ctx = nx.reshape(nx.transpose(nx.matmul(att, v), (0, 2, 1, 3)), (n, t, d))
        x = nx.add(x, nx.linear(ctx, p[f"{pre}.attn.out.weight"], p[f"{pre}.attn.out.bias"]))
        h = nx.layer_norm(x, p[f"{pre}.ln2.gamma"], p[f"{pre}.ln2.beta"])
        h = nx.relu(nx.linear(h, self._ffn_weight(pre, "ffn1"), p[f"{pre}.ffn1.bias"]))
        y = nx.linear(h, self._ffn_weight(pre, "ffn2"), p[f"{pre}.ffn2.bias"])
        if self.adapter_dim is not None:
            z = nx.relu(nx.linear(y, p[f"{pre}.adapter.down.weight"], p[f"{pre}.adapter.down.bias"]))
            y = nx.add(y, nx.linear(z, p[f"{pre}.adapter.up.weight"], p[f"{pre}.adapter.up.bias"]))
        return nx.add(x, y)

    def _ffn_weight(self, pre: str, which: str) -> Tensor:
        w0 = self.params[f"{pre}.{which}.weight"]
        if self.lora_rank is None:
            return w0
        delta = nx.matmul(self.params[f"{pre}.{which}.lora_B"], self.params[f"{pre}.{which}.lora_A"])
        return nx.add(w0, delta)

    def forward(self, features, lengths=None, mask: np.ndarray | None = None) -> tuple[list[Tensor], np.ndarray]:
        """Batched forward.

        ``features`` is ``[N, T, d_in]`` (right-padded), ``lengths`` the valid
        frame counts, ``mask`` an optional boolean ``[N, T']`` selecting
        front-end frames to replace with the mask embedding. Returns the list
        of exposed latents (front-end output, then each block) and the output
        lengths.
        """
        x = nx.as_tensor(features)
        if x.ndim != 3:
            raise ValueError("features must be [N, T, d_in]")
        if x.shape[2] != self.config.d_in:
            raise ValueError(f"feature dim {x.shape[2]} != d_in {self.config.d_in}")
        if x.shape[1] < 1:
            raise ValueError("input has zero frames")
        lengths = np.full(x.shape[0], x.shape[1]) if lengths is None else np.asarray(lengths)
        if (lengths < 1).any():
            raise ValueError("input has zero frames")
        h, out_len = self.frontend(x, lengths)
        layers = [h]
        if mask is not None:
            if "mask_embedding" not in self.params:
                raise ValueError("encoder has no mask embedding")
            if mask.shape != h.shape[:2]:
                raise ValueError(f"mask shape {mask.shape} != {h.shape[:2]}")
            h = nx.mask_replace(h, mask, self.params["mask_embedding"])
        t = h.shape[1]
        h = nx.add(h, sinusoidal_positions(t, self.config.d_model))
        key_bias = None
        if (out_len < t).any():
            pad = np.arange(t)[None, :] >= out_len[:, None]
            key_bias = np.where(pad, -1e9, 0.0)[:, None, None, :]
        for b in range(self.config.blocks):
            h = self._block(b, h, key_bias)
            layers.append(h)
        if self.config.final_norm:
            d = self.config.d_model
            layers[-1] = nx.layer_norm(h, nx.Tensor(np.ones(d)), nx.Tensor(np.zeros(d)))
        return layers, out_len

    def encode(self, features: np.ndarray) -> list[np.ndarray]:
        """Single-utterance inference: ``[T, d_in]`` -> list of ``[T', d]`` latents."""
        feats = np.asarray(features, dtype=np.float64)
        if feats.ndim != 2 or feats.shape[0] == 0:
            raise ValueError("features must be a non-empty [T, d_in] matrix")
        with nx.no_grad():
            layers, _ = self.forward(feats[None])
        return [l.values[0] for l in layers]

    def clone(self) -> "Encoder":
        return Encoder(self.config, params=self.params.copy())


def _split3(x: Tensor) -> tuple[Tensor, Tensor, Tensor]:
    """Split along the leading axis of size 3."""
    xv = x.values
    outs = []
    for i in range(3):
        def bw(g, i=i):
            full = np.zeros_like(xv)
            full[i] = g
            return (full,)
        outs.append(nx.make_node(xv[i], (x,), bw))
    return outs[0], outs[1], outs[2]


def weighted_layer_sum(latents, weights) -> Tensor:
    """Convex combination ``sum_l softmax(weights)_l * latents[l]``."""
    latents = [nx.as_tensor(l) for l in latents]
    if len(latents) != np.asarray(nx.as_tensor(weights).values).shape[0]:
        raise ValueError(f"{len(latents)} latents but {np.shape(nx.as_tensor(weights).values)} weights")
    return nx.convex_combination(latents, nx.as_tensor(weights))


# ---------------------------------------------------------------- attachments

def inject_lora(encoder: Encoder, spec: AdaptationSpec, seed: int = 0, init_std: float | None = None) -> Encoder:
    """Add ``W0 + B A`` factors to both FFN matrices of every block; freezes ``W0``.

    ``B`` starts at zero so the model is unchanged at injection. ``A`` defaults to
    std ``1/sqrt(rank)``, which keeps ``B A`` on the scale of a direct update to ``W0``.
    """
    if spec.kind != "lora":
        raise ValueError("inject_lora needs an AdaptationSpec with kind='lora'")
    if encoder.lora_rank is not None:
        raise ValueError("LoRA already injected")
    cfg = encoder.config
    r = spec.rank
    if r > min(cfg.d_model, cfg.d_ff):
        raise ValueError(f"rank {r} exceeds matrix dims ({cfg.d_model}, {cfg.d_ff})")
    std = 1.0 / np.sqrt(r) if init_std is None else init_std
    rng = np.random.default_rng(seed)
    p = encoder.params
    for b in range(cfg.blocks):
        for which in ("ffn1", "ffn2"):
            w0 = p[f"block{b}.{which}.weight"]
            rows, cols = w0.shape
            p.add(f"block{b}.{which}.lora_B", np.zeros((rows, r)))
            p.add(f"block{b}.{which}.lora_A", rng.normal(0.0, std, size=(r, cols)))
            w0.requires_grad = False
    encoder.lora_rank = r
    return encoder


def inject_adapters(encoder: Encoder, spec: AdaptationSpec, seed: int = 0) -> Encoder:
    """Add a residual bottleneck after each block's FFN; only adapters stay trainable."""
    if spec.kind != "adapter":
        raise ValueError("inject_adapters needs an AdaptationSpec with kind='adapter'")
    if encoder.adapter_dim is not None:
        raise ValueError("adapters already injected")
    cfg = encoder.config
    m = spec.bottleneck
    rng = np.random.default_rng(seed)
    p = encoder.params
    for name in p.names():
        p[name].requires_grad = False
    d = cfg.d_model
    for b in range(cfg.blocks):
        p.add(f"block{b}.adapter.down.weight", _init(rng, d, (d, m)))
        p.add(f"block{b}.adapter.down.bias", np.zeros(m))
        p.add(f"block{b}.adapter.up.weight", np.zeros((m, d)))
        p.add(f"block{b}.adapter.up.bias", np.zeros(d))
    encoder.adapter_dim = m
    return encoder


# ----------------------------------------------------------------- checkpoint

CKPT_MAGIC = b"CLFTCKPT"
CKPT_VERSION = 1


def save_checkpoint(path, params: ParamStore, meta: dict | None = None) -> None:
    """Write parameters as ``(name, shape, <f8 values)`` records; atomic via rename."""
    path = Path(path)
    buf = io.BytesIO()
    meta_bytes = json.dumps(meta or {}, sort_keys=True).encode("utf-8")
    buf.write(CKPT_MAGIC)
    buf.write(struct.pack("<II", CKPT_VERSION, len(meta_bytes)))
    buf.write(meta_bytes)
    names = params.names()
    buf.write(struct.pack("<I", len(names)))
    for name in names:
        v = params[name].values
        nb = name.encode("utf-8")
        buf.write(struct.pack("<H", len(nb)))
        buf.write(nb)
        buf.write(struct.pack("<B", v.ndim))
        buf.write(struct.pack(f"<{v.ndim}I", *v.shape))
        buf.write(np.ascontiguousarray(v, dtype="<f8").tobytes())
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(buf.getvalue())
    os.replace(tmp, path)


def load_checkpoint(path) -> tuple[dict[str, np.ndarray], dict]:
    data = Path(path).read_bytes()
    if data[:8] != CKPT_MAGIC:
        raise ValueError(f"{path}: not a checkpoint file")
    version, meta_len = struct.unpack_from("<II", data, 8)
    if version != CKPT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {version}")
    off = 16
    meta = json.loads(data[off:off + meta_len].decode("utf-8"))
    off += meta_len
    (count,) = struct.unpack_from("<I", data, off)
    off += 4
    state = {}
    for _ in range(count):
        (nlen,) = struct.unpack_from("<H", data, off)
        off += 2
        name = data[off:off + nlen].decode("utf-8")
        off += nlen
        (ndim,) = struct.unpack_from("<B", data, off)
        off += 1
        shape = struct.unpack_from(f"<{ndim}I", data, off)
        off += 4 * ndim
        size = int(np.prod(shape)) if ndim else 1
        arr = np.frombuffer(data, dtype="<f8", count=size, offset=off).reshape(shape)
        off += 8 * size
        state[name] = arr.astype(np.float64)
    if off != len(data):
        raise ValueError(f"{path}: trailing bytes in checkpoint")
    return state, meta


def encoder_from_state(config: EncoderConfig, state: dict[str, np.ndarray], trainable: bool = False) -> Encoder:
    p = ParamStore()
    for name in sorted(state):
        if name.startswith(("frontend.", "block")) or name == "mask_embedding":
            p.add(name, state[name], trainable=trainable)
    return Encoder(config, params=p)
