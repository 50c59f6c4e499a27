"""Convolutional embedding networks for the map and the online sweep.

The stacks are small Pixor-style fully convolutional nets written directly
in numpy so that forward and reverse passes are explicit. Parameters are
held in float64 in memory (gradient checks need it); checkpoints store
float32.
"""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Tuple

import numpy as np

from .raster import FeatureMap, GridSpec, Raster, crop, interp_matrix

CHECKPOINT_MAGIC = b"LPW1"


@dataclass(frozen=True)
class NetConfig:
    layers: int
    channels_per_layer: Tuple[int, ...]
    kernel_size: int = 3
    pooling_stages: int = 0
    in_channels: int = 1

    def __post_init__(self) -> None:
        object.__setattr__(self, "channels_per_layer", tuple(int(c) for c in self.channels_per_layer))
        if self.layers < 1:
            raise ValueError("need at least one layer")
        if len(self.channels_per_layer) != self.layers:
            raise ValueError("channels_per_layer must list one width per layer")
        if min(self.channels_per_layer) < 1 or self.in_channels < 1:
            raise ValueError("channel counts must be >= 1")
        if self.kernel_size < 1 or self.kernel_size % 2 == 0:
            raise ValueError("kernel_size must be odd")
        if self.pooling_stages < 0 or 2 * self.pooling_stages > self.layers - 1:
            raise ValueError("pooling stages must pair with upsampling stages before the last layer")

    @property
    def out_channels(self) -> int:
        return self.channels_per_layer[-1]

    def to_dict(self) -> dict:
        return {"layers": self.layers, "channels_per_layer": list(self.channels_per_layer),
                "kernel_size": self.kernel_size, "pooling_stages": self.pooling_stages,
                "in_channels": self.in_channels}


def tiny_config(in_channels: int = 1) -> NetConfig:
    return NetConfig(5, (8, 8, 8, 8, 1), 3, 2, in_channels)


def ladder_config(width: int, in_channels: int = 1) -> NetConfig:
    """11-layer stack with three pooling/upsampling stages and ``width`` hidden channels."""
    return NetConfig(11, (width,) * 10 + (1,), 3, 3, in_channels)


def big_config(in_channels: int = 1) -> NetConfig:
    return ladder_config(128, in_channels)


# Widths 1, 1/2, 1/8 and 1/16 of the largest model, then the 5-layer tiny net.
CONFIG_LADDER = {
    "big": big_config,
    "large": lambda c=1: ladder_config(64, c),
    "medium": lambda c=1: ladder_config(16, c),
    "small": lambda c=1: ladder_config(8, c),
    "tiny": tiny_config,
}


# ----------------------------------------------------------------------------
# primitive layers


_CONV_CHUNK = 4096


def _conv_layout(x: np.ndarray, k: int):
    """Zero-padded input flattened per channel, plus the flat offset of every kernel tap.

    With padded width ``wp``, output pixel ``(i, j)`` sits at flat position
    ``i * wp + j`` and tap ``(dy, dx)`` reads input position ``i * wp + j +
    dy * wp + dx``, so each tap is one contiguous slice of the flat input.
    Positions with ``j >= W`` are junk columns that are dropped afterwards.
    """
    cin, h, wd = x.shape
    p = k // 2
    xp = np.pad(x, ((0, 0), (p, p), (p, p))) if p else np.ascontiguousarray(x, dtype=np.float64)
    wp = wd + 2 * p
    n = (h - 1) * wp + wd
    offs = [dy * wp + dx for dy in range(k) for dx in range(k)]
    return xp.reshape(cin, -1), wp, n, offs


def _gather_cols(flat: np.ndarray, offs, s: int, e: int, cols: np.ndarray) -> np.ndarray:
    cin = flat.shape[0]
    for t, o in enumerate(offs):
        cols[t * cin:(t + 1) * cin, :e - s] = flat[:, s + o:e + o]
    return cols[:, :e - s]


def conv2d(x: np.ndarray, w: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Same-padded 2-D cross-correlation: ``x[C, H, W]``, ``w[O, C, k, k]``.

    Runs as chunked im2col followed by one matrix product per chunk.
    """
    cin, h, wd = x.shape
    cout, _, k, _ = w.shape
    flat, wp, n, offs = _conv_layout(np.asarray(x, dtype=np.float64), k)
    wm = w.transpose(0, 2, 3, 1).reshape(cout, k * k * cin)
    out = np.zeros((cout, h * wp))
    cols = np.empty((k * k * cin, min(_CONV_CHUNK, n)))
    for s in range(0, n, _CONV_CHUNK):
        e = min(s + _CONV_CHUNK, n)
        np.matmul(wm, _gather_cols(flat, offs, s, e, cols), out=out[:, s:e])
    out[:, :n] += b[:, None]
    return out.reshape(cout, h, wp)[:, :, :wd]


def conv2d_backward(x: np.ndarray, w: np.ndarray, g: np.ndarray, need_dx: bool = True):
    """Gradients of :func:`conv2d` w.r.t. input, weights and bias given ``g = dL/dout``."""
    cin, h, wd = x.shape
    cout, _, k, _ = w.shape
    flat, wp, n, offs = _conv_layout(np.asarray(x, dtype=np.float64), k)
    gp = np.zeros((cout, h, wp))
    gp[:, :, :wd] = g
    gf = gp.reshape(cout, -1)
    wm = w.transpose(0, 2, 3, 1).reshape(cout, k * k * cin)
    dwm = np.zeros_like(wm)
    dflat = np.zeros_like(flat) if need_dx else None
    cols = np.empty((k * k * cin, min(_CONV_CHUNK, n)))
    for s in range(0, n, _CONV_CHUNK):
        e = min(s + _CONV_CHUNK, n)
        gc = gf[:, s:e]
        dwm += gc @ _gather_cols(flat, offs, s, e, cols).T
        if need_dx:
            dcols = wm.T @ gc
            for t, o in enumerate(offs):
                dflat[:, s + o:e + o] += dcols[t * cin:(t + 1) * cin]
    dw = dwm.reshape(cout, k, k, cin).transpose(0, 3, 1, 2).copy()
    db = np.asarray(g).reshape(cout, -1).sum(axis=1)
    dxo = None
    if need_dx:
        p = k // 2
        dxo = dflat.reshape(cin, h + 2 * p, wp)[:, p:p + h, p:p + wd]
    return dxo, dw, db


def avg_pool2(x: np.ndarray) -> np.ndarray:
    """2x2 average pooling; odd sizes are zero-padded up (ceil mode)."""
    c, h, w = x.shape
    hp, wp = h + h % 2, w + w % 2
    if (hp, wp) != (h, w):
        x = np.pad(x, ((0, 0), (0, hp - h), (0, wp - w)))
    return 0.25 * x.reshape(c, hp // 2, 2, wp // 2, 2).sum(axis=(2, 4))


def avg_pool2_backward(g: np.ndarray, in_shape: Tuple[int, int]) -> np.ndarray:
    h, w = in_shape
    up = 0.25 * np.repeat(np.repeat(g, 2, axis=1), 2, axis=2)
    return up[:, :h, :w]


def upsample2(x: np.ndarray, out_shape: Tuple[int, int]) -> np.ndarray:
    """Nearest-neighbour x2 upsampling cropped to ``out_shape``."""
    h, w = out_shape
    return np.repeat(np.repeat(x, 2, axis=1), 2, axis=2)[:, :h, :w]


def upsample2_backward(g: np.ndarray, in_shape: Tuple[int, int]) -> np.ndarray:
    c, h, w = g.shape
    hi, wi = in_shape
    gp = np.zeros((c, 2 * hi, 2 * wi))
    gp[:, :h, :w] = g
    return gp.reshape(c, hi, 2, wi, 2).sum(axis=(2, 4))


# ----------------------------------------------------------------------------
# conv stack


@dataclass(eq=False)
class ConvStack:
    config: NetConfig
    weights: List[np.ndarray]
    biases: List[np.ndarray]
    frozen: bool = False

    def __post_init__(self) -> None:
        cin = self.config.in_channels
        k = self.config.kernel_size
        if len(self.weights) != self.config.layers or len(self.biases) != self.config.layers:
            raise ValueError("one weight/bias pair per layer required")
        for i, cout in enumerate(self.config.channels_per_layer):
            self.weights[i] = np.asarray(self.weights[i], dtype=np.float64)
            self.biases[i] = np.asarray(self.biases[i], dtype=np.float64)
            if self.weights[i].shape != (cout, cin, k, k) or self.biases[i].shape != (cout,):
                raise ValueError(f"layer {i}: parameter shapes inconsistent with config")
            cin = cout

    def parameters(self) -> List[np.ndarray]:
        """Flat parameter list in declaration order (w0, b0, w1, b1, ...)."""
        out = []
        for w, b in zip(self.weights, self.biases):
            out += [w, b]
        return out

    def copy(self) -> "ConvStack":
        return ConvStack(self.config, [w.copy() for w in self.weights],
                         [b.copy() for b in self.biases], self.frozen)

    def digest(self) -> str:
        h = hashlib.sha256()
        for p in self.parameters():
            h.update(np.ascontiguousarray(p).tobytes())
        return h.hexdigest()

    # -- array-level passes -------------------------------------------------

    def run(self, x: np.ndarray, keep: bool = False):
        """Forward on a ``[C, H, W]`` array; with ``keep`` also return the activation tape."""
        cfg = self.config
        x = np.asarray(x, dtype=np.float64)
        if x.shape[0] != cfg.in_channels:
            raise ValueError(f"expected {cfg.in_channels} input channels, got {x.shape[0]}")
        tape = []
        shapes = []
        last = cfg.layers - 1
        for i in range(cfg.layers):
            entry = {"x": x}
            x = conv2d(x, self.weights[i], self.biases[i])
            if i < last:
                entry["relu_mask"] = x > 0
                x = np.where(entry["relu_mask"], x, 0.0)
                if i < cfg.pooling_stages:
                    entry["pool_in"] = x.shape[1:]
                    shapes.append(x.shape[1:])
                    x = avg_pool2(x)
                elif i >= last - cfg.pooling_stages:
                    entry["up_in"] = x.shape[1:]
                    x = upsample2(x, shapes.pop())
            if keep:
                tape.append(entry)
        return (x, tape) if keep else x

    def backward(self, g: np.ndarray, tape, need_input_grad: bool = False):
        """Reverse pass. Returns ``(param_grads, input_grad)`` with grads in declaration order."""
        grads: List[Optional[np.ndarray]] = [None] * (2 * self.config.layers)
        for i in reversed(range(self.config.layers)):
            entry = tape[i]
            if "up_in" in entry:
                g = upsample2_backward(g, entry["up_in"])
            elif "pool_in" in entry:
                g = avg_pool2_backward(g, entry["pool_in"])
            if "relu_mask" in entry:
                g = g * entry["relu_mask"]
            need_dx = i > 0 or need_input_grad
            g, dw, db = conv2d_backward(entry["x"], self.weights[i], g, need_dx)
            grads[2 * i] = dw
            grads[2 * i + 1] = db
        return grads, g


def init(config: NetConfig, seed: int, frozen: bool = False) -> ConvStack:
    """He-normal weights (std ``sqrt(2 / fan_in)``), zero biases."""
    rng = np.random.default_rng(seed)
    ws, bs = [], []
    cin = config.in_channels
    k = config.kernel_size
    for cout in config.channels_per_layer:
        fan_in = cin * k * k
        ws.append(rng.standard_normal((cout, cin, k, k)) * np.sqrt(2.0 / fan_in))
        bs.append(np.zeros(cout))
        cin = cout
    return ConvStack(config, ws, bs, frozen)


def forward(stack: ConvStack, grid: Raster) -> FeatureMap:
    """Embed a raster; output keeps the raster's georeferencing."""
    if grid.channels != stack.config.in_channels:
        raise ValueError(f"grid has {grid.channels} channels, network expects {stack.config.in_channels}")
    return FeatureMap(grid.spec, stack.run(grid.data))


def identity_embed(grid: Raster) -> FeatureMap:
    """Learning-free embedding: the raster's intensity (last) channel."""
    return FeatureMap(grid.spec, np.asarray(grid.data[-1:], dtype=np.float64))


# ----------------------------------------------------------------------------
# multi-resolution fusion


@dataclass(eq=False)
class Fusion:
    """1-output-channel conv over coarse backbone features plus the mixing weight."""

    conv_w: np.ndarray
    conv_b: np.ndarray
    mix: np.ndarray = field(default_factory=lambda: np.array([0.0]))

    def __post_init__(self) -> None:
        self.conv_w = np.asarray(self.conv_w, dtype=np.float64)
        self.conv_b = np.asarray(self.conv_b, dtype=np.float64).reshape(1)
        self.mix = np.asarray(self.mix, dtype=np.float64).reshape(1)
        if self.conv_w.ndim != 4 or self.conv_w.shape[0] != 1 or self.conv_w.shape[2] % 2 == 0:
            raise ValueError("fusion conv must be [1, C, k, k] with odd k")

    @classmethod
    def init(cls, in_channels: int, seed: int, kernel_size: int = 3, mix: float = 0.0) -> "Fusion":
        rng = np.random.default_rng(seed)
        fan_in = in_channels * kernel_size ** 2
        w = rng.standard_normal((1, in_channels, kernel_size, kernel_size)) * np.sqrt(2.0 / fan_in)
        return cls(w, np.zeros(1), np.array([mix]))

    def parameters(self) -> List[np.ndarray]:
        return [self.conv_w, self.conv_b, self.mix]

    def copy(self) -> "Fusion":
        return Fusion(self.conv_w.copy(), self.conv_b.copy(), self.mix.copy())


def _fusion_geometry(fine: GridSpec, coarse: GridSpec):
    """Cell-aligned coarse crop enclosing the fine extent, plus interpolation matrices."""
    if abs(fine.center.yaw - coarse.center.yaw) > 1e-12:
        raise ValueError("fine and coarse grids must share orientation")
    dx = fine.center.x - coarse.center.x
    dy = fine.center.y - coarse.center.y
    res = coarse.resolution
    fx0, fx1 = dx - fine.extent_x / 2, dx + fine.extent_x / 2
    fy0, fy1 = dy - fine.extent_y / 2, dy + fine.extent_y / 2
    tol = 1e-9
    if (fx0 < -coarse.extent_x / 2 - tol or fx1 > coarse.extent_x / 2 + tol
            or fy0 < -coarse.extent_y / 2 - tol or fy1 > coarse.extent_y / 2 + tol):
        raise ValueError("coarse feature map does not cover the fine extent")
    hx, hy = coarse.extent_x / 2, coarse.extent_y / 2
    c0 = int(np.floor((fx0 + hx) / res + 1e-9))
    c1 = int(np.ceil((fx1 + hx) / res - 1e-9))
    r0 = int(np.floor((fy0 + hy) / res + 1e-9))
    r1 = int(np.ceil((fy1 + hy) / res - 1e-9))
    region = (c0 * res - hx, r0 * res - hy, c1 * res - hx, r1 * res - hy)
    # fine cell centres expressed as fractional indices into the crop
    xs, ys = fine.local_centers()
    cols = (xs + dx + hx) / res - 0.5 - c0
    rows = (ys + dy + hy) / res - 0.5 - r0
    return region, interp_matrix(r1 - r0, rows), interp_matrix(c1 - c0, cols)


def fuse_multires(fine_feat: FeatureMap, coarse_feat: FeatureMap, fusion: Fusion,
                  keep: bool = False):
    """Add upsampled coarse-backbone evidence to the fine embedding.

    The coarse features are cropped to the fine grid's metric footprint,
    reduced to one channel by ``fusion``'s conv, bilinearly resampled onto
    the fine cells and added with weight ``fusion.mix``.
    """
    region, ar, ac = _fusion_geometry(fine_feat.spec, coarse_feat.spec)
    cc = crop(coarse_feat, region).data
    red = conv2d(cc, fusion.conv_w, fusion.conv_b)
    up = np.einsum("ih,chw,jw->cij", ar, red, ac, optimize=True)
    out = FeatureMap(fine_feat.spec, fine_feat.data + fusion.mix[0] * up)
    if keep:
        return out, {"crop": cc, "up": up, "ar": ar, "ac": ac}
    return out


def fuse_backward(g: np.ndarray, fusion: Fusion, tape) -> List[np.ndarray]:
    """Parameter gradients of :func:`fuse_multires` (the fine path gradient is ``g`` itself)."""
    dmix = np.array([np.sum(g * tape["up"])])
    gred = fusion.mix[0] * np.einsum("ih,cij,jw->chw", tape["ar"], g, tape["ac"], optimize=True)
    _, dw, db = conv2d_backward(tape["crop"], fusion.conv_w, gred, need_dx=False)
    return [dw, db, dmix]


# ----------------------------------------------------------------------------
# checkpoints


def save_checkpoint(path, stacks: Dict[str, ConvStack], fusion: Optional[Fusion] = None,
                    meta: Optional[dict] = None) -> None:
    """Write ``LPW1``: magic, u32 header length, JSON header, then float32 LE arrays in header order."""
    header = {"stacks": [], "fusion": None, "meta": meta or {}}
    arrays = []
    for name, st in stacks.items():
        header["stacks"].append({"name": name, "config": st.config.to_dict(), "frozen": st.frozen})
        arrays += st.parameters()
    if fusion is not None:
        header["fusion"] = {"shape": list(fusion.conv_w.shape)}
        arrays += fusion.parameters()
    hb = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<I", len(hb)))
        fh.write(hb)
        for a in arrays:
            fh.write(np.ascontiguousarray(a, dtype="<f4").tobytes())


def load_checkpoint(path) -> Tuple[Dict[str, ConvStack], Optional[Fusion], dict]:
    raw = Path(path).read_bytes()
    if raw[:4] != CHECKPOINT_MAGIC:
        raise ValueError(f"{path}: not an LPW1 checkpoint")
    (n,) = struct.unpack_from("<I", raw, 4)
    header = json.loads(raw[8:8 + n].decode("utf-8"))
    off = 8 + n

    def take(shape):
        nonlocal off
        count = int(np.prod(shape))
        a = np.frombuffer(raw, dtype="<f4", count=count, offset=off).reshape(shape).astype(np.float64)
        off += 4 * count
        return a

    stacks = {}
    for entry in header["stacks"]:
        cfg = NetConfig(**{**entry["config"], "channels_per_layer": tuple(entry["config"]["channels_per_layer"])})
        ws, bs = [], []
        cin = cfg.in_channels
        for cout in cfg.channels_per_layer:
            ws.append(take((cout, cin, cfg.kernel_size, cfg.kernel_size)))
            bs.append(take((cout,)))
            cin = cout
        stacks[entry["name"]] = ConvStack(cfg, ws, bs, entry["frozen"])
    fusion = None
    if header["fusion"] is not None:
        shape = tuple(header["fusion"]["shape"])
        fusion = Fusion(take(shape), take((1,)), take((1,)))
    if off != len(raw):
        raise ValueError(f"{path}: trailing or missing payload bytes")
    return stacks, fusion, header["meta"]
