"""Hierarchical backbone assembly, presets and checkpoint persistence."""

from __future__ import annotations

import struct
from collections import OrderedDict
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from . import tensor as T
from .blocks import Block, BlockConfig, Downsample, PatchEmbed
from .errors import ConfigError, FormatError, ManifestError
from .module import LayerNorm, Linear, Module, require_cache


@dataclass(frozen=True)
class StageConfig:
    pairs: int
    channels: int
    downsample: int
    heads: int
    groups: int
    kernel: int | None  # neighborhood size; None for the all-deformable last stage
    offset_kernel: int


@dataclass(frozen=True)
class ModelConfig:
    stages: tuple[StageConfig, ...]
    num_classes: int = 1000
    resolution: int = 224
    drop_path_max: float = 0.0
    mlp_ratio: float = 4.0
    in_channels: int = 3
    name: str = "custom"

    def validate(self) -> "ModelConfig":
        if len(self.stages) != 4:
            raise ConfigError(f"stages: expected 4 stages, got {len(self.stages)}")
        if self.resolution % 32:
            raise ConfigError(f"resolution: {self.resolution} is not divisible by 32")
        if self.num_classes < 1:
            raise ConfigError("num_classes: must be positive")
        if not 0.0 <= self.drop_path_max < 1.0:
            raise ConfigError("drop_path_max: must lie in [0, 1)")
        for i, s in enumerate(self.stages):
            where = f"stages[{i}]"
            if i and s.channels != 2 * self.stages[i - 1].channels:
                raise ConfigError(f"{where}.channels: must double the previous stage")
            if s.pairs < 1:
                raise ConfigError(f"{where}.pairs: must be positive")
            if s.channels % s.heads:
                raise ConfigError(f"{where}.heads: {s.heads} does not divide channels {s.channels}")
            if s.heads % s.groups:
                raise ConfigError(f"{where}.groups: {s.groups} does not divide heads {s.heads}")
            size = self.stage_size(i)
            if size % s.downsample:
                raise ConfigError(f"{where}.downsample: {s.downsample} does not divide stage size {size}")
            if s.offset_kernel < s.downsample or s.offset_kernel % 2 == 0:
                raise ConfigError(f"{where}.offset_kernel: must be odd and >= downsample")
            if i < 3:
                if s.kernel is None or s.kernel % 2 == 0 or s.kernel > size:
                    raise ConfigError(f"{where}.kernel: must be odd and <= stage size {size}")
        return self

    def stage_size(self, i: int, resolution: int | None = None) -> int:
        return (resolution or self.resolution) // (4 * 2 ** i)

    def block_kinds(self, i: int) -> list[str]:
        s = self.stages[i]
        if i == 3:
            return ["deformable"] * (2 * s.pairs)
        return ["local", "deformable"] * s.pairs

    @property
    def num_blocks(self) -> int:
        return sum(len(self.block_kinds(i)) for i in range(4))


def _stages(channels, pairs, r, heads, groups, kernel, offset_kernels):
    return tuple(
        StageConfig(pairs[i], channels[i], r[i], heads[i], groups[i],
                    kernel[i] if i < 3 else None, offset_kernels[i])
        for i in range(4))


_OFFSET_K = (9, 7, 5, 3)

PRESETS: dict[str, ModelConfig] = {
    "dat-tiny++": ModelConfig(
        _stages((64, 128, 256, 512), (1, 2, 9, 1), (8, 4, 2, 1), (2, 4, 8, 16), (1, 2, 4, 8),
                (7, 7, 7, None), _OFFSET_K),
        drop_path_max=0.2, name="dat-tiny++"),
    "dat-small++": ModelConfig(
        _stages((96, 192, 384, 768), (1, 2, 9, 1), (8, 4, 2, 1), (3, 6, 12, 24), (1, 2, 3, 6),
                (7, 7, 7, None), _OFFSET_K),
        drop_path_max=0.4, name="dat-small++"),
    # a stage-3 downsample of 2 keeps the 7x7 sampling grid of the other sizes
    "dat-base++": ModelConfig(
        _stages((128, 256, 512, 1024), (1, 2, 9, 1), (8, 4, 2, 1), (4, 8, 16, 32), (2, 4, 8, 16),
                (7, 7, 7, None), _OFFSET_K),
        drop_path_max=0.6, name="dat-base++"),
    "dat-nano": ModelConfig(
        _stages((16, 32, 64, 128), (1, 1, 2, 1), (4, 2, 2, 1), (1, 2, 4, 8), (1, 1, 2, 4),
                (3, 3, 3, None), (5, 3, 3, 3)),
        num_classes=2, resolution=64, name="dat-nano"),
}


def get_preset(name: str, **overrides) -> ModelConfig:
    try:
        cfg = PRESETS[name]
    except KeyError:
        raise ConfigError(f"unknown preset {name!r}; choose from {sorted(PRESETS)}") from None
    return replace(cfg, **overrides).validate() if overrides else cfg.validate()


class Stage(Module):
    def __init__(self, cfg: ModelConfig, index: int, rng, drop_rates):
        s = cfg.stages[index]
        self.down = None
        if index:
            self.down = Downsample(cfg.stages[index - 1].channels, s.channels, rng)
        size = cfg.stage_size(index)
        self.blocks = []
        for kind, dp in zip(cfg.block_kinds(index), drop_rates):
            bc = BlockConfig(kind, s.channels, s.heads, cfg.mlp_ratio, dp)
            self.blocks.append(Block(bc, rng, kernel=s.kernel or 1, groups=s.groups,
                                     downsample=s.downsample, offset_kernel=s.offset_kernel,
                                     table_size=(size, size)))

    def forward(self, x, training=False, rng=None):
        caches = []
        cd = None
        if self.down is not None:
            x, cd = self.down.forward(x)
        for blk in self.blocks:
            x, c = blk.forward(x, training, rng)
            caches.append(c)
        return x, (cd, caches)

    def backward(self, cache, g):
        cd, caches = require_cache(cache, "Stage")
        for blk, c in zip(reversed(self.blocks), reversed(caches)):
            g = blk.backward(c, g)
        if self.down is not None:
            g = self.down.backward(cd, g)
        return g


class Model(Module):
    def __init__(self, cfg: ModelConfig, seed: int = 0):
        cfg.validate()
        self._cfg = cfg
        self._seed = seed
        rng = np.random.default_rng(seed)
        n = cfg.num_blocks
        rates = list(np.linspace(0.0, cfg.drop_path_max, n)) if n > 1 else [0.0]
        self.stem = PatchEmbed(cfg.in_channels, cfg.stages[0].channels, rng)
        self.stages = []
        start = 0
        for i in range(4):
            count = len(cfg.block_kinds(i))
            self.stages.append(Stage(cfg, i, rng, rates[start:start + count]))
            start += count
        self.norms = [LayerNorm(s.channels) for s in cfg.stages]
        self.head = Linear(cfg.stages[3].channels, cfg.num_classes, rng)
        # offset projections and bias tables start at zero by construction

    @property
    def config(self) -> ModelConfig:
        return self._cfg

    def _check_input(self, image):
        if image.ndim != 4 or image.shape[3] != self._cfg.in_channels:
            raise ConfigError(f"input must be B x H x W x {self._cfg.in_channels}, got {image.shape}")
        if image.shape[1] % 32 or image.shape[2] % 32:
            raise ConfigError(f"input spatial dims {image.shape[1]}x{image.shape[2]} not divisible by 32")

    def forward_stages(self, image, training=False, rng=None):
        """Raw (pre-norm) outputs of the four stages plus the backward cache."""
        self._check_input(image)
        x, cs = self.stem.forward(T.as_tensor(image))
        outs, caches = [], []
        for st in self.stages:
            x, c = st.forward(x, training, rng)
            outs.append(x)
            caches.append(c)
        return outs, (cs, caches)

    def forward(self, image, training=False, rng=None):
        """Logits and the cache needed by :meth:`backward`."""
        outs, cache = self.forward_stages(image, training, rng)
        f, cn = self.norms[3].forward(outs[3])
        pooled = T.global_avg_pool(f)
        logits, ch = self.head.forward(pooled)
        return logits, (cache, cn, f.shape, ch)

    def backward(self, cache, glogits):
        (cs, caches), cn, fshape, ch = require_cache(cache, "Model")
        g = self.head.backward(ch, glogits)
        g = T.global_avg_pool_backward(fshape, g)
        g = self.norms[3].backward(cn, g)
        for st, c in zip(reversed(self.stages), reversed(caches)):
            g = st.backward(c, g)
        self.stem.backward(cs, g)

    def dmha_layers(self):
        """(path, layer) for every deformable attention layer in depth order."""
        out = []
        for i, st in enumerate(self.stages):
            for j, blk in enumerate(st.blocks):
                if blk.kind == "deformable":
                    out.append((f"stages.{i}.blocks.{j}.attn", blk.attn))
        return out

    @staticmethod
    def traces(cache):
        """DMHA traces from a :meth:`forward` / :meth:`forward_stages` cache, in depth order."""
        stage_cache = cache[0] if len(cache) == 4 else cache
        _, caches = stage_cache
        found = []
        for _, block_caches in caches:
            for c in block_caches:
                t = Block.trace_of(c)
                if t is not None:
                    found.append(t)
        return found


def build_model(cfg: ModelConfig, seed: int = 0) -> Model:
    return Model(cfg, seed)


def forward_features(model: Model, image) -> list[np.ndarray]:
    outs, _ = model.forward_stages(image)
    return [norm.forward(o)[0] for norm, o in zip(model.norms, outs)]


def forward_logits(model: Model, image) -> np.ndarray:
    return model.forward(image)[0]


# -------------------------------------------------------------- checkpoints

MAGIC = b"DATW"
VERSION = 1


def write_tensors(path, tensors: "OrderedDict[str, np.ndarray]") -> None:
    """Write named float64 tensors in the little-endian ``DATW`` container."""
    parts = [MAGIC, struct.pack("<II", VERSION, len(tensors))]
    for name, arr in tensors.items():
        arr = np.ascontiguousarray(arr, dtype="<f8")
        key = name.encode("utf-8")
        parts.append(struct.pack("<I", len(key)))
        parts.append(key)
        parts.append(struct.pack("<I", arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        parts.append(arr.tobytes())
    Path(path).write_bytes(b"".join(parts))


def read_tensors(path) -> "OrderedDict[str, np.ndarray]":
    data = Path(path).read_bytes()
    pos = 0

    def take(n):
        nonlocal pos
        if pos + n > len(data):
            raise FormatError(f"{path}: truncated file (needed {n} bytes at offset {pos})")
        chunk = data[pos:pos + n]
        pos += n
        return chunk

    if take(4) != MAGIC:
        raise FormatError(f"{path}: bad magic, not a DATW tensor file")
    version, count = struct.unpack("<II", take(8))
    if version != VERSION:
        raise FormatError(f"{path}: unsupported version {version}")
    out: OrderedDict[str, np.ndarray] = OrderedDict()
    for _ in range(count):
        (klen,) = struct.unpack("<I", take(4))
        try:
            name = take(klen).decode("utf-8")
        except UnicodeDecodeError as exc:
            raise FormatError(f"{path}: entry name is not UTF-8") from exc
        (rank,) = struct.unpack("<I", take(4))
        dims = struct.unpack(f"<{rank}Q", take(8 * rank))
        n = int(np.prod(dims, dtype=np.int64)) if rank else 1
        arr = np.frombuffer(take(8 * n), dtype="<f8").reshape(dims).astype(np.float64)
        if name in out:
            raise FormatError(f"{path}: duplicate entry {name!r}")
        out[name] = arr
    if pos != len(data):
        raise FormatError(f"{path}: {len(data) - pos} trailing bytes after last entry")
    return out


def save_checkpoint(model: Model, path) -> None:
    write_tensors(path, model.state_dict())


def load_state(model: Model, tensors) -> Model:
    """Copy tensors into ``model`` after checking the manifest is exactly closed."""
    params = OrderedDict(model.named_params())
    for name in tensors:
        if name not in params:
            raise ManifestError(f"unexpected tensor {name!r} not in model manifest")
    for name, p in params.items():
        if name not in tensors:
            raise ManifestError(f"missing tensor {name!r}")
        if tensors[name].shape != p.shape:
            raise ManifestError(f"tensor {name!r} has shape {tensors[name].shape}, expected {p.shape}")
    for name, p in params.items():
        p.value = np.array(tensors[name], dtype=np.float64)
        p.zero_grad()
    return model


def load_checkpoint(path, cfg: ModelConfig) -> Model:
    tensors = read_tensors(path)
    return load_state(Model(cfg, seed=0), tensors)
