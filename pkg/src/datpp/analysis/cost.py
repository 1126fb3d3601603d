"""Analytic FLOPs and parameter accounting.

One multiply-accumulate counts as one FLOP, the same convention the
deformable-attention complexity formula uses (its ``2HWC^2`` term is the
query and output projections together). Normalization, activations and
softmax are not counted.
"""

from __future__ import annotations

from dataclasses import dataclass, field

from ..backbone import Model
from ..errors import ConfigError


def dmha_flops(h: int, w: int, c: int, r: int, k: int) -> tuple[int, int, int]:
    """(attention, offsets-and-sampling, total) FLOPs of one deformable attention layer."""
    if h % r or w % r:
        raise ConfigError(f"feature map {h}x{w} not divisible by downsample factor {r}")
    ns = (h // r) * (w // r)
    hw = h * w
    attention = 2 * hw * ns * c + 2 * hw * c * c + 2 * ns * c * c
    offsets = (k * k + 6) * ns * c
    return attention, offsets, attention + offsets


@dataclass
class CostEntry:
    name: str
    flops: int
    params: int


@dataclass
class CostReport:
    entries: list[CostEntry] = field(default_factory=list)

    def add(self, name, flops, params=0):
        self.entries.append(CostEntry(name, int(flops), int(params)))

    @property
    def total_flops(self) -> int:
        return sum(e.flops for e in self.entries)

    @property
    def total_params(self) -> int:
        return sum(e.params for e in self.entries)

    def by_stage(self) -> dict[str, tuple[int, int]]:
        out: dict[str, list[int]] = {}
        for e in self.entries:
            parts = e.name.split(".")
            key = ".".join(parts[:2]) if parts[0] == "stages" else parts[0]
            acc = out.setdefault(key, [0, 0])
            acc[0] += e.flops
            acc[1] += e.params
        return {k: (v[0], v[1]) for k, v in out.items()}

    def to_lines(self) -> list[str]:
        lines = [f"{e.name}\t{e.flops}\t{e.params}" for e in self.entries]
        lines.append(f"total\t{self.total_flops}\t{self.total_params}")
        return lines

    @classmethod
    def from_lines(cls, lines) -> "CostReport":
        rep = cls()
        for line in lines:
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            name, flops, params = line.split("\t")
            if name != "total":
                rep.add(name, int(flops), int(params))
        return rep


def _param_count(model: Model, prefix: str) -> int:
    return sum(p.size for name, p in model.named_params() if name.startswith(prefix + "."))


def model_cost(model: Model, resolution: int | None = None) -> CostReport:
    """Per-module FLOPs at ``resolution`` and exact parameter counts."""
    cfg = model.config
    res = cfg.resolution if resolution is None else resolution
    if res % 32 or res <= 0:
        raise ConfigError(f"resolution {res} is not a positive multiple of 32")
    rep = CostReport()
    pc = lambda prefix: _param_count(model, prefix)  # noqa: E731

    c1 = cfg.stages[0].channels
    half = c1 // 2
    s2 = (res // 2) ** 2
    s4 = (res // 4) ** 2
    rep.add("stem.conv1", s2 * 9 * cfg.in_channels * half, pc("stem.conv1"))
    rep.add("stem.norm1", 0, pc("stem.norm1"))
    rep.add("stem.conv2", s4 * 9 * half * c1, pc("stem.conv2"))
    rep.add("stem.norm2", 0, pc("stem.norm2"))

    for i, (st_cfg, stage) in enumerate(zip(cfg.stages, model.stages)):
        size = res // (4 * 2 ** i)
        hw = size * size
        c = st_cfg.channels
        base = f"stages.{i}"
        if stage.down is not None:
            cin = cfg.stages[i - 1].channels
            rep.add(f"{base}.down.conv", hw * 9 * cin * c, pc(f"{base}.down.conv"))
            rep.add(f"{base}.down.norm", 0, pc(f"{base}.down.norm"))
        for j, blk in enumerate(stage.blocks):
            bp = f"{base}.blocks.{j}"
            hidden = blk.ffn.fc1.weight.shape[1]
            rep.add(f"{bp}.lpu", hw * 9 * c, pc(f"{bp}.lpu"))
            rep.add(f"{bp}.norm1", 0, pc(f"{bp}.norm1"))
            if blk.kind == "local":
                kk = blk.attn.kernel
                rep.add(f"{bp}.attn", 4 * hw * c * c + 2 * hw * kk * kk * c, pc(f"{bp}.attn"))
            else:
                attn, offs, _ = dmha_flops(size, size, c, st_cfg.downsample, st_cfg.offset_kernel)
                off_params = pc(f"{bp}.attn.offset_net")
                rep.add(f"{bp}.attn", attn, pc(f"{bp}.attn") - off_params)
                rep.add(f"{bp}.attn.offsets", offs, off_params)
            rep.add(f"{bp}.norm2", 0, pc(f"{bp}.norm2"))
            rep.add(f"{bp}.ffn", 2 * hw * c * hidden + hw * 9 * hidden, pc(f"{bp}.ffn"))

    for i in range(4):
        rep.add(f"norms.{i}", 0, pc(f"norms.{i}"))
    rep.add("head", cfg.stages[3].channels * cfg.num_classes, pc("head"))
    return rep
