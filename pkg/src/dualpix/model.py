"""Single-encoder, three-decoder network predicting the two DP views and a
sharp image from one combined (blurry) input.

Layer schedule, with ``c_i = base_channels * 2**i``:

* encoder level ``i < depth``: 3x3 conv -> relu -> 3x3 conv -> relu (this is
  the skip tensor), then a stride-2 3x3 conv -> relu down to ``c_{i+1}``;
  level 0 takes the 3 image channels.
* bottleneck at level ``depth``: two 3x3 conv + relu on ``c_depth`` channels.
  Its output is the shared latent.
* each decoder, for ``i = depth-1 .. 0``: upsample2x, concat the encoder skip,
  3x3 conv -> relu to ``c_i``, 3x3 conv -> relu; optional stitch fusion after
  the block; finally a 3x3 conv to 3 channels and a clamp to [0, 1].

Stitch fusion at level ``i`` concatenates a decoder's own block output with
the same-level outputs of the other two decoders (fixed l, r, s order) and
maps ``3 c_i -> c_i`` with a 1x1 conv + relu. ``middle`` fuses at decoder
block ``ceil(depth/2)`` counted from the latent, ``late`` at the last block.

With ``residual=True`` the final conv predicts a correction on top of the
input (``I_c`` for the sharp decoder, ``I_c / 2`` for each view decoder),
and the sharp decoder's output conv starts at 1% of the He scale. That
decoder sits frozen at its initial weights through the first training
step, so it enters the second one close to the identity mapping.
"""

from __future__ import annotations

import math
import struct
from dataclasses import asdict, dataclass, fields
from pathlib import Path

import numpy as np

from .tensor import Tensor, clamp01, concat_channels, conv2d, relu, scale, add, upsample2x

BRANCHES = ("enc", "dec_l", "dec_r", "dec_s")
DECODERS = ("dec_l", "dec_r", "dec_s")
STITCH_MODES = ("none", "middle", "late")
CHECKPOINT_MAGIC = b"MDP1"


@dataclass(frozen=True)
class MdpConfig:
    depth: int = 3
    base_channels: int = 16
    stitch: str = "middle"
    patch: int = 64
    seed: int = 0
    residual: bool = True

    def validate(self) -> None:
        if self.depth < 1:
            raise ValueError(f"depth must be >= 1, got {self.depth}")
        if self.base_channels < 1:
            raise ValueError(f"base_channels must be >= 1, got {self.base_channels}")
        if self.stitch not in STITCH_MODES:
            raise ValueError(f"stitch must be one of {STITCH_MODES}, got {self.stitch!r}")
        if self.patch < 1 or self.patch % (2 ** self.depth):
            raise ValueError(f"patch {self.patch} must be a positive multiple of 2**depth = {2 ** self.depth}")

    @property
    def channels(self) -> list[int]:
        return [self.base_channels * 2 ** i for i in range(self.depth + 1)]

    @property
    def stitch_level(self) -> int | None:
        """Resolution level (0 = full) after which decoders are fused."""
        if self.stitch == "middle":
            return self.depth - math.ceil(self.depth / 2)
        if self.stitch == "late":
            return 0
        return None

    def to_text(self) -> str:
        return "".join(f"{k}={v}\n" for k, v in asdict(self).items())

    @classmethod
    def from_mapping(cls, items: dict[str, str]) -> "MdpConfig":
        kw = {}
        for f in fields(cls):
            if f.name not in items:
                continue
            raw = items[f.name]
            if f.type in ("bool", bool):
                kw[f.name] = raw in ("True", "true", "1")
            elif f.type in ("int", int):
                kw[f.name] = int(raw)
            else:
                kw[f.name] = raw
        return cls(**kw)


def _layer_specs(cfg: MdpConfig) -> list[tuple[str, int, int, int]]:
    """(name, in_ch, out_ch, ksize) for every conv, in initialisation order."""
    c = cfg.channels
    specs = []
    for i in range(cfg.depth):
        specs.append((f"enc.l{i}.conv1", 3 if i == 0 else c[i], c[i], 3))
        specs.append((f"enc.l{i}.conv2", c[i], c[i], 3))
        specs.append((f"enc.down{i}", c[i], c[i + 1], 3))
    specs.append(("enc.bottleneck.conv1", c[-1], c[-1], 3))
    specs.append(("enc.bottleneck.conv2", c[-1], c[-1], 3))
    for dec in DECODERS:
        for i in reversed(range(cfg.depth)):
            specs.append((f"{dec}.l{i}.conv1", c[i + 1] + c[i], c[i], 3))
            specs.append((f"{dec}.l{i}.conv2", c[i], c[i], 3))
            if cfg.stitch_level == i:
                specs.append((f"{dec}.fuse", 3 * c[i], c[i], 1))
        specs.append((f"{dec}.out", c[0], 3, 3))
    return specs


class MdpModel:
    """Weights plus per-branch trainability flags."""

    def __init__(self, config: MdpConfig, params: dict[str, Tensor]):
        self.config = config
        self.params = params
        self.frozen = {b: False for b in BRANCHES}

    @staticmethod
    def branch_of(name: str) -> str:
        return name.split(".", 1)[0]

    def set_frozen(self, branch: str, frozen: bool = True) -> None:
        if branch not in BRANCHES:
            raise ValueError(f"unknown branch {branch!r}; expected one of {BRANCHES}")
        self.frozen[branch] = frozen
        for name, p in self.params.items():
            if self.branch_of(name) == branch:
                p.requires_grad = not frozen
                if frozen:
                    p.grad = None

    def trainable(self) -> dict[str, Tensor]:
        return {n: p for n, p in self.params.items() if not self.frozen[self.branch_of(n)]}

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def param_count(self) -> int:
        return param_count(self)

    def copy(self) -> "MdpModel":
        twin = MdpModel(self.config, {n: Tensor(p.data.copy(), requires_grad=p.requires_grad, name=n)
                                      for n, p in self.params.items()})
        twin.frozen = dict(self.frozen)
        return twin

    def _conv(self, name: str, x: Tensor, stride: int = 1) -> Tensor:
        w = self.params[name + ".w"]
        pad = w.shape[-1] // 2
        return conv2d(x, w, self.params[name + ".b"], stride=stride, padding=pad)

    def check_input(self, x: Tensor) -> None:
        if x.data.ndim != 4 or x.shape[1] != 3:
            raise ValueError(f"expected an N x 3 x H x W input, got {x.shape}")
        m = 2 ** self.config.depth
        if x.shape[2] % m or x.shape[3] % m:
            raise ValueError(f"input size {x.shape[2]}x{x.shape[3]} must be divisible by 2**depth = {m}")

    def encode(self, image: Tensor) -> tuple[Tensor, list[Tensor]]:
        """Latent tensor at 1/2**depth resolution and the per-level skips."""
        self.check_input(image)
        h = image
        skips = []
        for i in range(self.config.depth):
            h = relu(self._conv(f"enc.l{i}.conv1", h))
            h = relu(self._conv(f"enc.l{i}.conv2", h))
            skips.append(h)
            h = relu(self._conv(f"enc.down{i}", h, stride=2))
        h = relu(self._conv("enc.bottleneck.conv1", h))
        h = relu(self._conv("enc.bottleneck.conv2", h))
        return h, skips

    def forward(self, image: Tensor) -> tuple[Tensor, Tensor, Tensor]:
        """Return ``(I_l*, I_r*, I_s*)`` for an N x 3 x H x W batch."""
        latent, skips = self.encode(image)
        cfg = self.config
        feats = {d: latent for d in DECODERS}
        for i in reversed(range(cfg.depth)):
            for d in DECODERS:
                h = concat_channels(upsample2x(feats[d]), skips[i])
                h = relu(self._conv(f"{d}.l{i}.conv1", h))
                feats[d] = relu(self._conv(f"{d}.l{i}.conv2", h))
            if cfg.stitch_level == i:
                block = dict(feats)
                for d in DECODERS:
                    others = [block[o] for o in DECODERS if o != d]
                    feats[d] = relu(self._conv(f"{d}.fuse", concat_channels(block[d], *others)))
        outs = []
        for d in DECODERS:
            y = self._conv(f"{d}.out", feats[d])
            if cfg.residual:
                y = add(y, image if d == "dec_s" else scale(image, 0.5))
            outs.append(clamp01(y))
        return outs[0], outs[1], outs[2]

    def predict(self, image: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Inference on one H x W x 3 float image; returns (left, right, sharp).

        Sizes not divisible by 2**depth are replicate-padded at the bottom and
        right and the outputs cropped back.
        """
        h, w = image.shape[:2]
        m = 2 ** self.config.depth
        ph, pw = -h % m, -w % m
        if ph or pw:
            image = np.pad(image, ((0, ph), (0, pw), (0, 0)), mode="edge")
        x = Tensor(np.ascontiguousarray(image.transpose(2, 0, 1)[None]))
        return tuple(np.ascontiguousarray(t.data[0].transpose(1, 2, 0)[:h, :w]) for t in self.forward(x))


OUT_INIT_GAIN = 0.01


def build(config: MdpConfig) -> MdpModel:
    """He-initialised (fan-in, normal) weights and zero biases from ``config.seed``."""
    config.validate()
    rng = np.random.default_rng(config.seed)
    params: dict[str, Tensor] = {}
    for name, cin, cout, k in _layer_specs(config):
        fan_in = cin * k * k
        w = rng.standard_normal((cout, cin, k, k)) * math.sqrt(2.0 / fan_in)
        if config.residual and name == "dec_s.out":
            w *= OUT_INIT_GAIN
        params[name + ".w"] = Tensor(w.astype(np.float32), requires_grad=True, name=name + ".w")
        params[name + ".b"] = Tensor(np.zeros(cout, np.float32), requires_grad=True, name=name + ".b")
    return MdpModel(config, params)


def set_frozen(model: MdpModel, branch: str, frozen: bool) -> None:
    model.set_frozen(branch, frozen)


def param_count(model: MdpModel) -> int:
    return int(sum(p.data.size for p in model.params.values()))


# ---------------------------------------------------------------------------
# checkpoint file


def save_checkpoint(path, model: MdpModel, extra: dict[str, np.ndarray] | None = None,
                    meta: dict[str, str] | None = None) -> None:
    """Write weights (and optional optimiser arrays / metadata) to ``path``.

    Layout: ``MDP1``; u32 length + UTF-8 ``key=value`` config block; u32 array
    count; per array u32 name length, name, u32 rank, u32 dims, float32 data.
    All integers and floats little-endian.
    """
    text = model.config.to_text() + "".join(f"meta.{k}={v}\n" for k, v in (meta or {}).items())
    arrays = {n: p.data for n, p in model.params.items()}
    arrays.update(extra or {})
    buf = bytearray(CHECKPOINT_MAGIC)
    block = text.encode("utf-8")
    buf += struct.pack("<I", len(block)) + block
    buf += struct.pack("<I", len(arrays))
    for name, arr in arrays.items():
        raw = name.encode("utf-8")
        buf += struct.pack("<I", len(raw)) + raw
        buf += struct.pack("<I", arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape)
        buf += np.ascontiguousarray(arr, dtype="<f4").tobytes()
    tmp = Path(str(path) + ".tmp")
    tmp.write_bytes(bytes(buf))
    tmp.replace(path)


def load_checkpoint(path) -> tuple[MdpModel, dict[str, np.ndarray], dict[str, str]]:
    """Inverse of :func:`save_checkpoint`; returns (model, extra arrays, meta)."""
    data = Path(path).read_bytes()
    if data[:4] != CHECKPOINT_MAGIC:
        raise ValueError(f"{path}: not an MDP checkpoint (bad magic)")
    pos = 4

    def take(n: int) -> bytes:
        nonlocal pos
        if pos + n > len(data):
            raise ValueError(f"{path}: truncated checkpoint")
        out = data[pos : pos + n]
        pos += n
        return out

    (blen,) = struct.unpack("<I", take(4))
    items = dict(line.split("=", 1) for line in take(blen).decode("utf-8").splitlines() if line)
    meta = {k[5:]: v for k, v in items.items() if k.startswith("meta.")}
    config = MdpConfig.from_mapping({k: v for k, v in items.items() if not k.startswith("meta.")})
    (count,) = struct.unpack("<I", take(4))
    arrays = {}
    for _ in range(count):
        (nlen,) = struct.unpack("<I", take(4))
        name = take(nlen).decode("utf-8")
        (rank,) = struct.unpack("<I", take(4))
        shape = struct.unpack(f"<{rank}I", take(4 * rank))
        size = int(np.prod(shape)) if rank else 1
        arrays[name] = np.frombuffer(take(4 * size), dtype="<f4").reshape(shape).astype(np.float32)
    model = build(config)
    for name, p in model.params.items():
        if name not in arrays:
            raise ValueError(f"{path}: missing weight array {name!r}")
        if arrays[name].shape != p.shape:
            raise ValueError(f"{path}: {name} has shape {arrays[name].shape}, expected {p.shape}")
        p.data = arrays.pop(name)
    return model, arrays, meta
