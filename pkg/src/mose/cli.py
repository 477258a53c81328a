"""Command-line surface: synth, train, eval, sr, audit, gradcheck.

Exit codes: 0 success, 1 usage/config error, 2 data error, 3 numeric error.
All outputs are written atomically (temp file + rename), so failed commands
leave no partial files behind.
"""

from __future__ import annotations

import argparse
import dataclasses
import math
import os
import sys

import numpy as np

from .checkpoint import load_checkpoint, save_checkpoint
from .config import ModelConfig, config_to_dict, load_config
from .data import (RasterImage, batcher, load_pairs, read_msr, save_pairs,
                   synth_pairs, write_msr, write_png)
from .errors import DataError, NumericError, UsageError
from .fileio import atomic_write
from .metrics import bicubic_resize, ncc_metric, psnr, ssim_metric
from .model import Adam, Model, train_step
from .moe import mlp_param_count, moe_param_count
from .numerics import Rng, grad_check
from .parallel import map_ordered, set_thread_limit


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="mose", description="windowed-attention mixture-of-experts super-resolution")
    p.add_argument("--threads", type=int, default=None,
                   help="worker thread bound (default: cores; env MOSE_THREADS overrides)")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("synth", help="generate a synthetic LR/HR training corpus")
    s.add_argument("--out", required=True)
    s.add_argument("--count", type=int, default=8)
    s.add_argument("--size", type=int, default=64, help="HR side length in pixels")
    s.add_argument("--scale", type=int, default=2, choices=(2, 3, 4))
    s.add_argument("--bands", type=int, default=4)
    s.add_argument("--seed", type=int, default=0)

    t = sub.add_parser("train", help="train a model on an MSR pair corpus")
    t.add_argument("--config", required=True)
    t.add_argument("--data", required=True)
    t.add_argument("--out", required=True)
    t.add_argument("--seed", type=int, default=0)
    t.add_argument("--steps", type=int, required=True)
    t.add_argument("--resume", default=None, help="checkpoint to continue from")
    t.add_argument("--lr", type=float, default=None, help="override config train.lr")
    t.add_argument("--batch-size", type=int, default=None)
    t.add_argument("--ckpt-every", type=int, default=None)

    e = sub.add_parser("eval", help="evaluate a checkpoint against an MSR pair corpus")
    e.add_argument("--ckpt", required=True)
    e.add_argument("--data", required=True)
    e.add_argument("--report", required=True)

    r = sub.add_parser("sr", help="super-resolve one MSR file")
    r.add_argument("--ckpt", required=True)
    r.add_argument("--in", dest="input", required=True)
    r.add_argument("--out", required=True)
    r.add_argument("--png", default=None, help="optional PNG preview path")

    a = sub.add_parser("audit", help="print per-layer and total parameter counts")
    a.add_argument("--config", required=True)

    g = sub.add_parser("gradcheck", help="finite-difference audit of all gradients")
    g.add_argument("--config", required=True)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--size", type=int, default=16, help="input side length")
    g.add_argument("--eps", type=float, default=1e-5)
    g.add_argument("--probes", type=int, default=4, help="probed elements per parameter")
    g.add_argument("--tol", type=float, default=1e-4)
    g.add_argument("--inject-grad-corruption", action="store_true", help=argparse.SUPPRESS)
    return p


# ---------------------------------------------------------------------------
# command implementations


def _build_model(cfg: ModelConfig, seed: int) -> Model:
    return Model(cfg, Rng(seed).child("init"))


def _model_from_checkpoint(path: str):
    cfg_doc, entries = load_checkpoint(path)
    if "model" not in cfg_doc:
        raise DataError(f"checkpoint {path!r} carries no model config")
    from .config import config_from_dict

    cfg = config_from_dict(cfg_doc["model"])
    model = _build_model(cfg, int(cfg_doc.get("seed", 0)))
    values = {name: arr for name, arr in entries.items() if not name.startswith("opt.")}
    model.params.load_values(values)
    return model, cfg, cfg_doc, entries


def _batch_arrays(batch):
    lrs = np.stack([p.lr.pixels for p in batch])
    hrs = np.stack([p.hr.pixels for p in batch])
    return lrs, hrs


def _save_train_checkpoint(path, cfg, seed, model, adam):
    doc = {"model": config_to_dict(cfg), "seed": seed, "step": adam.t}
    entries = [(p.name, p.value) for p in model.params]
    entries.extend(adam.state_entries())
    save_checkpoint(path, doc, entries)


def _write_csv(path, header, rows):
    with atomic_write(path) as tmp:
        with open(tmp, "w", encoding="utf-8") as fh:
            fh.write(",".join(header) + "\n")
            for row in rows:
                fh.write(",".join(str(v) for v in row) + "\n")


def cmd_synth(args) -> int:
    pairs = synth_pairs(args.count, args.size, args.scale, Rng(args.seed), bands=args.bands)
    save_pairs(args.out, pairs)
    print(f"wrote {len(pairs)} pairs ({args.bands} bands, "
          f"{args.size // args.scale}->{args.size} px) to {args.out}")
    return 0


def cmd_train(args) -> int:
    cfg = load_config(args.config)
    pairs = load_pairs(args.data)
    for p in pairs:
        if p.scale != cfg.scale:
            raise DataError(f"pair {p.name!r} has scale {p.scale}, config wants {cfg.scale}")
        if p.lr.bands != cfg.in_channels:
            raise DataError(f"pair {p.name!r} has {p.lr.bands} bands, config wants {cfg.in_channels}")

    lr = args.lr if args.lr is not None else cfg.train.lr
    batch_size = args.batch_size if args.batch_size is not None else cfg.train.batch_size
    ckpt_every = args.ckpt_every if args.ckpt_every is not None else cfg.train.ckpt_every
    if args.steps < 1:
        raise UsageError("--steps must be >= 1")

    model = _build_model(cfg, args.seed)
    adam = Adam(model.params, lr=lr)
    if args.resume:
        _, entries = load_checkpoint(args.resume)
        model.params.load_values({n: a for n, a in entries.items() if not n.startswith("opt.")})
        adam.load_state(entries)

    os.makedirs(args.out, exist_ok=True)
    csv_path = os.path.join(args.out, "train_log.csv")
    rows = []
    if args.resume and os.path.exists(csv_path):
        with open(csv_path, "r", encoding="utf-8") as fh:
            rows = [line.rstrip("\n").split(",") for line in fh.readlines()[1:]]

    header = ["step", "l_total", "l_ncc", "l_ssim", "l_moe"]
    data_rng = Rng(args.seed)
    steps_per_epoch = math.ceil(len(pairs) / batch_size)
    target = adam.t + args.steps

    while adam.t < target:
        epoch = adam.t // steps_per_epoch
        batches = batcher(pairs, batch_size, data_rng.child(f"epoch{epoch}"))
        for batch in batches[adam.t % steps_per_epoch:]:
            if adam.t >= target:
                break
            lrs, hrs = _batch_arrays(batch)
            bd = train_step(model, lrs, hrs, adam)
            rows.append([adam.t, f"{bd['l_total']:.8f}", f"{bd['l_ncc']:.8f}",
                         f"{bd['l_ssim']:.8f}", f"{bd['l_moe']:.8f}"])
            if adam.t % ckpt_every == 0:
                _save_train_checkpoint(
                    os.path.join(args.out, f"step{adam.t:06d}.msck"), cfg, args.seed, model, adam)
                _write_csv(csv_path, header, rows)

    _save_train_checkpoint(os.path.join(args.out, "final.msck"), cfg, args.seed, model, adam)
    _write_csv(csv_path, header, rows)
    print(f"trained {args.steps} steps (now at step {adam.t}); "
          f"final checkpoint {os.path.join(args.out, 'final.msck')}")
    return 0


def cmd_eval(args) -> int:
    model, cfg, _, _ = _model_from_checkpoint(args.ckpt)
    pairs = load_pairs(args.data)
    for p in pairs:
        if p.scale == 1:
            raise UsageError(f"pair {p.name!r} has hr == lr dims (scale 1 is not evaluable)")
        if p.scale != cfg.scale:
            raise DataError(f"pair {p.name!r} has scale {p.scale}, checkpoint wants {cfg.scale}")
        if p.lr.bands != cfg.in_channels:
            raise DataError(f"pair {p.name!r} has {p.lr.bands} bands, checkpoint wants {cfg.in_channels}")

    def eval_one(pair):
        sr = np.clip(model.super_resolve(pair.lr.pixels[None])[0], 0.0, 1.0)
        bic = np.clip(bicubic_resize(pair.lr.pixels, float(cfg.scale)), 0.0, 1.0)
        gt = pair.hr.pixels
        return [pair.name, psnr(sr, gt), ssim_metric(sr, gt), ncc_metric(sr, gt),
                psnr(bic, gt), ssim_metric(bic, gt), ncc_metric(bic, gt)]

    rows = map_ordered(eval_one, pairs)
    means = ["mean"] + [float(np.mean([r[i] for r in rows])) for i in range(1, 7)]
    header = ["image_id", "psnr_db", "ssim", "ncc",
              "bicubic_psnr_db", "bicubic_ssim", "bicubic_ncc"]
    _write_csv(args.report, header, rows + [means])
    print(f"evaluated {len(pairs)} images; model PSNR {means[1]:.4f} dB vs "
          f"bicubic {means[4]:.4f} dB; report at {args.report}")
    return 0


def cmd_sr(args) -> int:
    model, cfg, _, _ = _model_from_checkpoint(args.ckpt)
    img = read_msr(args.input)
    if img.bands != cfg.in_channels:
        raise DataError(f"input has {img.bands} bands, checkpoint wants {cfg.in_channels}")
    sr = np.clip(model.super_resolve(img.pixels[None])[0], 0.0, 1.0).astype(np.float32)
    out = RasterImage(sr, list(img.band_stats))
    write_msr(args.out, out)
    if args.png:
        write_png(args.png, out)
    print(f"super-resolved {img.bands}x{img.height}x{img.width} -> "
          f"{out.bands}x{out.height}x{out.width} at {args.out}")
    return 0


def _audit_lines(cfg: ModelConfig):
    T, M = cfg.embed_dim, cfg.attention.window_size
    h = cfg.attention.heads
    a = cfg.attention
    attn = T * 3 * T + 3 * T + T * T + T
    if a.cosine:
        attn += h
    if a.pe_rpe:
        attn += (2 * M - 1) ** 2 * h
    if a.pe_lepe:
        attn += T * M * M
    if a.pe_logcpb:
        attn += 2 * a.cpb_hidden + a.cpb_hidden + a.cpb_hidden * h + h
    norms = 4 * T

    if cfg.moe is None:
        ffn_apc = ffn_spc = mlp_param_count(T, 2 * T)
        ffn_desc = f"dense MLP hidden={2 * T}"
    else:
        ffn_apc, ffn_spc = moe_param_count(cfg.moe)
        ffn_desc = (f"MoE E={cfg.moe.experts} k={cfg.moe.active} "
                    f"hidden={cfg.moe.expert_hidden} smart_merger="
                    f"{'on' if cfg.moe.smart_merger else 'off'}")

    n_blocks = cfg.groups * cfg.blocks_per_group
    shallow = cfg.in_channels * T * 9 + T
    group_convs = cfg.groups * (T * T * 9 + T)
    stages = {2: [2], 3: [3], 4: [2, 2]}[cfg.scale]
    upsample = sum(T * (T * r * r) * 9 + T * r * r for r in stages)
    head = T * cfg.in_channels * 9 + cfg.in_channels

    fixed = shallow + group_convs + upsample + head + n_blocks * (attn + norms)
    model_apc = fixed + n_blocks * ffn_apc
    model_spc = fixed + n_blocks * ffn_spc

    lines = [
        f"ffn kind: {ffn_desc}",
        f"per-layer ffn APC: {ffn_apc}",
        f"per-layer ffn SPC: {ffn_spc}",
        f"per-block attention params: {attn}",
        f"per-block norm params: {norms}",
        f"conv params (shallow/group/upsample/head): {shallow}/{group_convs}/{upsample}/{head}",
        f"blocks: {cfg.groups} groups x {cfg.blocks_per_group}",
        f"model APC: {model_apc}",
        f"model SPC: {model_spc}",
    ]
    return lines, (model_apc, model_spc)


def cmd_audit(args) -> int:
    cfg = load_config(args.config)
    lines, _ = _audit_lines(cfg)
    print(f"parameter audit for {args.config}")
    for line in lines:
        print(f"  {line}")
    return 0


def cmd_gradcheck(args) -> int:
    from .losses import total_loss_backward, total_loss_forward

    cfg = load_config(args.config)
    cfg = dataclasses.replace(cfg, dtype="f64")  # f32 finite differences are too noisy
    rng = Rng(args.seed)
    model = _build_model(cfg, args.seed)
    x = rng.child("input").uniform((1, cfg.in_channels, args.size, args.size))
    gt = rng.child("target").uniform(
        (1, cfg.in_channels, cfg.scale * args.size, cfg.scale * args.size))

    def objective(params):
        params.zero_grads()
        state = model.forward(x, training=True)
        total, _, lcache = total_loss_forward(state.sr, gt, state.moe_loss, cfg.loss)
        dpred, dmoe = total_loss_backward(lcache)
        model.backward(state, dpred, dmoe if any(
            i is not None for i in state.importances) else 0.0)
        if args.inject_grad_corruption:
            next(iter(params)).grad *= -1.0
        return total

    report = grad_check(objective, model.params, eps=args.eps,
                        probes_per_param=args.probes, rng=rng.child("probe"))
    status = "PASS" if report.max_rel_error < args.tol else "FAIL"
    print(f"gradient check: {status}")
    print(f"  max relative error: {report.max_rel_error:.3e} (tolerance {args.tol:.1e})")
    print(f"  worst parameter: {report.worst_param}")
    for name, err in sorted(report.per_param.items(), key=lambda kv: -kv[1])[:5]:
        print(f"    {name}: {err:.3e}")
    if report.max_rel_error >= args.tol:
        raise NumericError(
            f"gradient check failed: {report.max_rel_error:.3e} at {report.worst_param}")
    return 0


_COMMANDS = {
    "synth": cmd_synth,
    "train": cmd_train,
    "eval": cmd_eval,
    "sr": cmd_sr,
    "audit": cmd_audit,
    "gradcheck": cmd_gradcheck,
}


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
        if args.threads is not None:
            set_thread_limit(args.threads)
        return _COMMANDS[args.command](args)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return 1
    except (DataError, OSError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return 2
    except NumericError as exc:
        print(f"numeric error: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
