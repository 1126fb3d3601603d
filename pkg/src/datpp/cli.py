"""Command-line entry point: ``datpp <command> [options]``.

Exit status is 0 on success, 1 when a check fails and 2 for usage or input
errors. Every command first prints its resolved configuration as ``# key =
value`` lines, then tab-delimited results; figures and text reports go to
``--out``.
"""

from __future__ import annotations

import argparse
import sys
from collections import OrderedDict
from dataclasses import replace
from pathlib import Path

import numpy as np

from .backbone import PRESETS, get_preset, load_checkpoint, read_tensors, save_checkpoint, build_model
from .errors import DatError

EXIT_OK, EXIT_CHECK, EXIT_USAGE = 0, 1, 2

# keys accepted in --config files; list-valued model fields take 4 comma-separated ints
CONFIG_KEYS = {
    "preset", "seed", "res", "checkpoint", "input", "out", "query", "steps", "lr",
    "weight_decay", "batch_size", "num_images", "corrupt", "num_classes", "drop_path_max",
    "mlp_ratio", "channels", "pairs", "downsample", "heads", "groups", "kernel", "offset_kernel",
}
STAGE_FIELDS = ("channels", "pairs", "downsample", "heads", "groups", "kernel", "offset_kernel")

DEFAULTS = {
    "preset": "dat-nano", "seed": 0, "steps": 200, "lr": 2e-3, "weight_decay": 0.05,
    "batch_size": 8, "num_images": 32,
}


class UsageError(Exception):
    pass


def parse_config_file(path) -> dict:
    """Strict ``key = value`` parser: blank lines and ``#`` comments allowed."""
    p = Path(path)
    if not p.is_file():
        raise UsageError(f"config file not found: {p}")
    out = {}
    for n, raw in enumerate(p.read_text().splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise UsageError(f"{p}:{n}: expected 'key = value'")
        key, value = (s.strip() for s in line.split("=", 1))
        if key not in CONFIG_KEYS:
            raise UsageError(f"{p}:{n}: unknown key {key!r}")
        if key in out:
            raise UsageError(f"{p}:{n}: duplicate key {key!r}")
        out[key] = value
    return out


def _int_list(key, value):
    try:
        return [None if v.strip().lower() == "none" else int(v) for v in str(value).split(",")]
    except ValueError:
        raise UsageError(f"{key}: expected comma-separated integers, got {value!r}") from None


def _scalar(key, value, typ):
    try:
        return typ(value)
    except (TypeError, ValueError):
        raise UsageError(f"{key}: expected {typ.__name__}, got {value!r}") from None


def resolve(args: argparse.Namespace) -> dict:
    """Merge defaults, the config file and explicit flags (flags win)."""
    cfg = dict(DEFAULTS)
    if args.config:
        cfg.update(parse_config_file(args.config))
    for key in CONFIG_KEYS:
        val = getattr(args, key, None)
        if val is not None:
            cfg[key] = val
    for key, typ in (("seed", int), ("steps", int), ("batch_size", int), ("num_images", int),
                     ("lr", float), ("weight_decay", float), ("res", int)):
        if key in cfg:
            cfg[key] = _scalar(key, cfg[key], typ)
    return cfg


def model_config(cfg: dict):
    overrides = {}
    if "res" in cfg:
        overrides["resolution"] = cfg["res"]
    for key, typ in (("num_classes", int), ("drop_path_max", float), ("mlp_ratio", float)):
        if key in cfg:
            overrides[key] = _scalar(key, cfg[key], typ)
    base = get_preset(cfg["preset"])
    stage_over = {k: _int_list(k, cfg[k]) for k in STAGE_FIELDS if k in cfg}
    if stage_over:
        stages = []
        for i, s in enumerate(base.stages):
            fields = {}
            for k, vals in stage_over.items():
                want = 3 if k == "kernel" else 4
                if len(vals) not in (want, 4):
                    raise UsageError(f"{k}: expected {want} values, got {len(vals)}")
                if i < len(vals):
                    fields[k] = vals[i]
            if i == 3:
                fields["kernel"] = None
            stages.append(replace(s, **fields))
        overrides["stages"] = tuple(stages)
    return get_preset(cfg["preset"], **overrides) if overrides else base


def echo(cfg: dict, mcfg=None):
    for k in sorted(cfg):
        print(f"# {k} = {cfg[k]}")
    if mcfg is not None:
        print(f"# model = {mcfg.name} res={mcfg.resolution} classes={mcfg.num_classes} "
              f"drop_path_max={mcfg.drop_path_max}")
        for i, s in enumerate(mcfg.stages):
            print(f"# stage{i + 1} = C={s.channels} pairs={s.pairs} r={s.downsample} heads={s.heads} "
                  f"groups={s.groups} kernel={s.kernel} offset_kernel={s.offset_kernel}")


def _out_dir(cfg) -> Path | None:
    if "out" not in cfg:
        return None
    d = Path(cfg["out"])
    d.mkdir(parents=True, exist_ok=True)
    return d


def _require_file(cfg, key):
    if key not in cfg:
        raise UsageError(f"--{key} is required")
    p = Path(cfg[key])
    if not p.is_file():
        raise UsageError(f"{key} not found: {p}")
    return p


def read_ppm(path) -> np.ndarray:
    """Binary (P6) or ASCII (P3) PPM as H x W x 3, normalized to mean 0.5, std 0.5."""
    data = Path(path).read_bytes()
    tokens, pos = [], 0
    while len(tokens) < 4:
        while pos < len(data) and chr(data[pos]).isspace():
            pos += 1
        if pos < len(data) and data[pos:pos + 1] == b"#":
            while pos < len(data) and data[pos:pos + 1] != b"\n":
                pos += 1
            continue
        start = pos
        while pos < len(data) and not chr(data[pos]).isspace():
            pos += 1
        if start == pos:
            raise UsageError(f"{path}: truncated PPM header")
        tokens.append(data[start:pos].decode("ascii", "replace"))
    magic, w, h, maxval = tokens
    try:
        w, h, maxval = int(w), int(h), int(maxval)
    except ValueError:
        raise UsageError(f"{path}: malformed PPM header") from None
    if magic == "P6":
        dtype = ">u2" if maxval > 255 else "u1"
        body = data[pos + 1:]
        n = h * w * 3 * np.dtype(dtype).itemsize
        if len(body) < n:
            raise UsageError(f"{path}: truncated PPM pixel data")
        px = np.frombuffer(body[:n], dtype=dtype).astype(np.float64)
    elif magic == "P3":
        px = np.array(data[pos:].split(), dtype=np.float64)
        if px.size < h * w * 3:
            raise UsageError(f"{path}: truncated PPM pixel data")
        px = px[:h * w * 3]
    else:
        raise UsageError(f"{path}: unsupported image format {magic!r} (expected P3 or P6)")
    img = px.reshape(h, w, 3) / maxval
    return (img - 0.5) / 0.5


def load_input(path) -> np.ndarray:
    """B x H x W x 3 batch from a tensor file (entry ``input``) or a PPM image."""
    p = Path(path)
    if p.suffix.lower() in (".ppm", ".pnm"):
        return read_ppm(p)[None]
    tensors = read_tensors(p)
    if "input" not in tensors:
        raise UsageError(f"{p}: no tensor named 'input' (found {list(tensors)})")
    x = tensors["input"]
    if x.ndim == 3:
        x = x[None]
    if x.ndim != 4:
        raise UsageError(f"{p}: input must be H x W x 3 or B x H x W x 3, got {x.shape}")
    return x


def _load_model(cfg, mcfg):
    ckpt = _require_file(cfg, "checkpoint")
    return load_checkpoint(ckpt, mcfg)


# ---------------------------------------------------------------- commands

def cmd_init(cfg) -> int:
    mcfg = model_config(cfg)
    echo(cfg, mcfg)
    if "checkpoint" not in cfg:
        raise UsageError("--checkpoint is required (path to write)")
    model = build_model(mcfg, seed=cfg["seed"])
    save_checkpoint(model, cfg["checkpoint"])
    print(f"checkpoint\t{cfg['checkpoint']}\t{model.num_params()}")
    return EXIT_OK


def cmd_infer(cfg) -> int:
    mcfg = model_config(cfg)
    echo(cfg, mcfg)
    model = _load_model(cfg, mcfg)
    x = load_input(_require_file(cfg, "input"))
    logits, _ = model.forward(x)
    lines = []
    for b, row in enumerate(logits):
        lines.append(f"# image {b} top1 {int(np.argmax(row))}")
        lines.extend(f"{i}\t{v:.17g}" for i, v in enumerate(row))
    print("\n".join(lines))
    out = _out_dir(cfg)
    if out is not None:
        (out / "logits.txt").write_text("\n".join(lines) + "\n")
    return EXIT_OK


def cmd_flops(cfg) -> int:
    from .analysis.cost import dmha_flops, model_cost
    from .analysis.plots import plot_cost

    mcfg = model_config(cfg)
    echo(cfg, mcfg)
    model = build_model(mcfg, seed=cfg["seed"])
    report = model_cost(model)
    lines = ["# name\tflops\tparams"] + report.to_lines()
    lines.append("# deformable attention decomposition: layer\tH\tW\tC\tr\tk\tattention\toffsets\ttotal")
    for path, layer in model.dmha_layers():
        i = int(path.split(".")[1])
        size = mcfg.stage_size(i)
        s = mcfg.stages[i]
        a, o, t = dmha_flops(size, size, s.channels, s.downsample, s.offset_kernel)
        lines.append(f"# {path}\t{size}\t{size}\t{s.channels}\t{s.downsample}\t{s.offset_kernel}\t{a}\t{o}\t{t}")
    print("\n".join(lines))
    print(f"# total {report.total_flops / 1e9:.4f} GFLOPs, {report.total_params / 1e6:.3f} M params")
    out = _out_dir(cfg)
    if out is not None:
        (out / "cost.txt").write_text("\n".join(lines) + "\n")
        plot_cost(report, out / "cost.png")
    return EXIT_OK


def cmd_gradcheck(cfg) -> int:
    from .analysis.gradcheck import gradient_suite

    echo(cfg)
    results = gradient_suite(cfg["seed"], corrupt=cfg.get("corrupt"))
    lines = ["# status\tmodule\tblock\tmetric\tmax_err\ttol\tchecked"] + [r.line() for r in results]
    print("\n".join(lines))
    out = _out_dir(cfg)
    if out is not None:
        (out / "gradcheck.txt").write_text("\n".join(lines) + "\n")
    failed = [r for r in results if not r.passed]
    if failed:
        worst = max(failed, key=lambda r: r.max_err / r.tol)
        print(f"FAIL: {len(failed)} of {len(results)} blocks; worst {worst.module} {worst.block} "
              f"error {worst.max_err:.3e} > {worst.tol:.0e}", file=sys.stderr)
        return EXIT_CHECK
    print(f"# all {len(results)} blocks passed")
    return EXIT_OK


def _parse_query(text):
    try:
        y, x = (int(v) for v in str(text).split(","))
    except ValueError:
        raise UsageError(f"--query: expected 'y,x' integers, got {text!r}") from None
    return y, x


def cmd_dump_attn(cfg) -> int:
    from .analysis.importance import importance_map
    from .analysis.plots import plot_importance

    mcfg = model_config(cfg)
    echo(cfg, mcfg)
    model = _load_model(cfg, mcfg)
    x = load_input(_require_file(cfg, "input"))
    query = None
    if "query" in cfg:
        query = _parse_query(cfg["query"])
        n1 = x.shape[1] // 4, x.shape[2] // 4
        if not (0 <= query[0] < n1[0] and 0 <= query[1] < n1[1]):
            raise UsageError(f"--query {query[0]},{query[1]} outside the {n1[0]}x{n1[1]} first-stage grid")
    _, cache = model.forward(x)
    names = [p for p, _ in model.dmha_layers()]
    imap = importance_map(model.traces(cache), names)
    out = _out_dir(cfg)
    print("# layer\tH\tW\tgroups\tsamples\tscore_sum")
    for i, layer in enumerate(imap.layers):
        h, w = layer.feature_size
        print(f"{layer.name}\t{h}\t{w}\t{layer.scores.shape[1]}\t{layer.scores.shape[2]}\t"
              f"{layer.scores[0].sum():.12f}")
        if out is not None:
            text = []
            for b in range(x.shape[0]):
                text.extend(layer.to_lines(b))
            (out / f"importance_{i:02d}.txt").write_text("\n".join(text) + "\n")
        if query is not None:
            # map the first-stage cell to this layer's grid through cell centers
            qy = int((query[0] + 0.5) * h * 4 // x.shape[1])
            qx = int((query[1] + 0.5) * w * 4 // x.shape[2])
            rows = layer.query_row(qy, qx)
            keys = layer.key_locations[0]
            hpg = layer.heads_per_group
            text = []
            for m, row in enumerate(rows):
                g = m // hpg
                print(f"query\t{layer.name}\thead {m}\t({qy},{qx})\t" + " ".join(f"{v:.6g}" for v in row))
                text.append(f"# {layer.name} head {m} group {g} query {qy},{qx}")
                text.extend(f"{kx:.9g} {ky:.9g} {v:.9g}" for (kx, ky), v in zip(keys[g], row))
            if out is not None:
                (out / f"query_{i:02d}.txt").write_text("\n".join(text) + "\n")
    if out is not None:
        plot_importance(imap, out / "importance.png")
    return EXIT_OK


def cmd_train_toy(cfg) -> int:
    from .analysis.plots import plot_training
    from .analysis.train import evaluate, minibatches, texture_dataset, train_steps

    mcfg = model_config(cfg)
    echo(cfg, mcfg)
    if mcfg.num_classes != 2:
        raise UsageError(f"the toy dataset has 2 classes; model has {mcfg.num_classes}")
    seed = cfg["seed"]
    images, labels = texture_dataset(cfg["num_images"], mcfg.resolution, mcfg.in_channels, seed=seed)
    model = build_model(mcfg, seed=seed)
    batches = minibatches(images, labels, min(cfg["batch_size"], len(images)), seed=seed)
    res = train_steps(model, batches, cfg["steps"], lr=cfg["lr"], weight_decay=cfg["weight_decay"], seed=seed)
    loss, acc = evaluate(res.model, images, labels)
    lines = ["# step\tloss\tbatch_accuracy"]
    lines += [f"{i}\t{l:.17g}\t{a:.6g}" for i, (l, a) in enumerate(zip(res.losses, res.accuracies))]
    print("\n".join(lines))
    print(f"final\tloss {loss:.6f}\ttrain_accuracy {acc:.4f}")
    out = _out_dir(cfg)
    if out is not None:
        (out / "trajectory.txt").write_text("\n".join(lines) + f"\n# final loss {loss:.17g} accuracy {acc}\n")
        plot_training(res.losses, res.accuracies, out / "loss.png")
        save_checkpoint(res.model, out / "model.datw")
    return EXIT_OK


COMMANDS = {
    "init": cmd_init,
    "infer": cmd_infer,
    "flops": cmd_flops,
    "gradcheck": cmd_gradcheck,
    "dump-attn": cmd_dump_attn,
    "train-toy": cmd_train_toy,
}


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="datpp", description="Deformable attention backbone tools")
    parser.add_argument("command", choices=sorted(COMMANDS))
    parser.add_argument("--preset", choices=sorted(PRESETS))
    parser.add_argument("--config", help="flat 'key = value' file; flags override it")
    parser.add_argument("--seed", type=int)
    parser.add_argument("--res", type=int, help="input resolution (multiple of 32)")
    parser.add_argument("--checkpoint")
    parser.add_argument("--input", help="tensor file with an 'input' entry, or a PPM image")
    parser.add_argument("--out", help="directory for text reports and figures")
    parser.add_argument("--query", help="y,x cell in the first-stage grid")
    parser.add_argument("--steps", type=int)
    parser.add_argument("--lr", type=float)
    parser.add_argument("--corrupt", help="gradcheck: negate one module's analytic gradients")
    return parser


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
        cfg = resolve(args)
        return COMMANDS[args.command](cfg)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (DatError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
