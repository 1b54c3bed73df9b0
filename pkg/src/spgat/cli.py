"""Command-line entry point: ``spgat train|enhance|eval|gradcheck|extract-structure``."""
from __future__ import annotations

import argparse
import csv
import dataclasses
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import __version__, imageio
from .errors import ConfigError, DataError, NumericalError
from .losses import metric_ssim, psnr
from .models import MODEL_KEYS, ModelConfig, ablation_overrides, extract_structure
from .tensor import no_grad
from .training import PairedDataset, TrainConfig, Trainer, load_model
from .windowing import pad_to_multiple

log = logging.getLogger("spgat")

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC = 0, 2, 3, 4
TRAIN_KEYS = {f.name for f in dataclasses.fields(TrainConfig)}
KEY_ALIASES = {"depths": "gen_depths"}
CSV_FIELDS = ["epoch", "step", "lr", "L_i", "L_s", "L_a_e", "L_a_d", "total"]


# ---------------------------------------------------------------- config

def split_config(flat: dict) -> tuple[dict, dict]:
    """Route flat keys to (model, train) dicts; unknown keys are errors."""
    model_kw, train_kw = {}, {}
    for key, value in flat.items():
        key = KEY_ALIASES.get(key, key)
        if key in MODEL_KEYS:
            model_kw[key] = value
        elif key in TRAIN_KEYS:
            train_kw[key] = value
        else:
            raise ConfigError(f"unknown config key {key!r}; valid keys: "
                              f"{sorted(MODEL_KEYS | TRAIN_KEYS | set(KEY_ALIASES))}")
    return model_kw, train_kw


def load_flat_config(path) -> dict:
    if path is None:
        return {}
    try:
        data = json.loads(Path(path).read_text())
    except FileNotFoundError as exc:
        raise ConfigError(f"config file {path} not found") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc})") from exc
    if not isinstance(data, dict):
        raise ConfigError(f"{path}: expected a flat key/value object")
    return data


def resolve_configs(config_path=None, ablation=None, seed=None) -> tuple[ModelConfig, TrainConfig]:
    """Defaults, then the config file, then the ablation preset, then --seed."""
    model_kw, train_kw = split_config(load_flat_config(config_path))
    if ablation:
        a_model, a_train = ablation_overrides(ablation)
        model_kw.update(a_model)
        train_kw.update(a_train)
    if seed is not None:
        train_kw["seed"] = seed
    try:
        return ModelConfig(**model_kw), TrainConfig(**train_kw)
    except TypeError as exc:
        raise ConfigError(str(exc)) from exc


def write_manifest(target: Path, command: str, argv, **fields) -> None:
    target.mkdir(parents=True, exist_ok=True)
    manifest = {"command": command, "argv": list(argv), "version": __version__, **fields}
    (target / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")


# ---------------------------------------------------------------- commands

def cmd_train(args) -> int:
    model_cfg, train_cfg = resolve_configs(args.config, args.ablation, args.seed)
    out = Path(args.out)
    dataset = PairedDataset.from_dir(args.data, min_size=train_cfg.crop)
    write_manifest(out, "train", args.argv, model_config=model_cfg.to_dict(),
                   train_config=train_cfg.to_dict(), data_root=str(Path(args.data).resolve()),
                   out_dir=str(out.resolve()), seed=train_cfg.seed, ablation=args.ablation,
                   max_steps=args.max_steps, resume=args.resume, pairs=dataset.names)
    trainer = Trainer(train_cfg, model_cfg, dataset)
    if args.resume:
        trainer.load(args.resume)
    spe = trainer.sampler.steps_per_epoch
    total_steps = train_cfg.epochs * spe
    if args.max_steps is not None:
        total_steps = min(total_steps, args.max_steps)
    ckpt_dir = out / "checkpoints"
    ckpt_dir.mkdir(parents=True, exist_ok=True)
    metrics_path = out / "metrics.csv"
    new_file = not metrics_path.exists() or not args.resume
    with open(metrics_path, "w" if new_file else "a", newline="") as f:
        writer = csv.DictWriter(f, fieldnames=CSV_FIELDS)
        if new_file:
            writer.writeheader()
        sums: dict[str, float] = {}
        count = 0
        while trainer.state.step < total_steps:
            epoch = trainer.state.step // spe
            lr = trainer.lr
            row = trainer.train_step()
            for k in CSV_FIELDS[3:]:
                if k in row:
                    sums[k] = sums.get(k, 0.0) + row[k]
            count += 1
            done = trainer.state.step >= total_steps
            if trainer.state.step % spe == 0 or done:
                rec = {"epoch": epoch, "step": trainer.state.step, "lr": lr}
                rec.update({k: (sums[k] / count if k in sums else "") for k in CSV_FIELDS[3:]})
                writer.writerow(rec)
                f.flush()
                log.info("epoch %d step %d L_i %.4f total %.4f", epoch, trainer.state.step,
                         rec["L_i"], rec["total"])
                sums, count = {}, 0
                if (epoch + 1) % args.checkpoint_every == 0 and not done:
                    trainer.save(ckpt_dir / f"epoch{epoch + 1:04d}.ckpt")
    trainer.save(ckpt_dir / "last.ckpt")
    print(f"trained {trainer.state.step} steps; checkpoint {ckpt_dir / 'last.ckpt'}")
    return EXIT_OK


def _inputs(path) -> list[Path]:
    p = Path(path)
    if p.is_dir():
        files = sorted(p.glob("*.png"))
        if not files:
            raise DataError(f"{p}: no PNG files")
        return files
    if not p.exists():
        raise DataError(f"{p}: no such file")
    return [p]


def enhance_array(model, img: np.ndarray, return_bundle: bool = False):
    """Enhance one ``(H, W, 3)`` image; pads to a multiple of 16 and crops back."""
    if min(img.shape[:2]) < 16:
        raise DataError(f"image {img.shape[0]}x{img.shape[1]} is smaller than 16x16")
    padded, (h, w) = pad_to_multiple(img[None].astype(np.float32), 16)
    with no_grad():
        bundle = model.forward_bundle(padded, model.structure(padded))
    out = np.clip(bundle.image.data[0, :h, :w], 0.0, 1.0)
    return (out, bundle) if return_bundle else out


def _heatmap(feat: np.ndarray) -> np.ndarray:
    m = feat.mean(axis=-1)
    lo, hi = float(m.min()), float(m.max())
    m = (m - lo) / (hi - lo) if hi > lo else np.zeros_like(m)
    return np.repeat(m[..., None], 3, axis=-1)


def cmd_enhance(args) -> int:
    model = load_model(args.checkpoint)
    out = Path(args.out)
    files = _inputs(args.input)
    write_manifest(out, "enhance", args.argv, model_config=model.cfg.to_dict(),
                   checkpoint=str(args.checkpoint), inputs=[str(p) for p in files],
                   out_dir=str(out.resolve()), dump_features=args.dump_features)
    for path in files:
        img = imageio.read_png(path)
        result, bundle = enhance_array(model, img, return_bundle=True)
        imageio.write_png(out / path.name, result)
        if args.dump_features:
            fdir = out / "features" / path.stem
            groups = {"gen_enc": bundle.enc_feats, "gen_dec": bundle.dec_feats,
                      "spe_enc": bundle.spe_enc, "spe_dec": bundle.spe_dec}
            for gname, feats in groups.items():
                for i, f in enumerate(feats):
                    imageio.write_png(fdir / f"{gname}{i}.png", _heatmap(f.data[0]))
        print(f"{path} -> {out / path.name}")
    return EXIT_OK


def evaluate_pairs(pairs) -> list[dict]:
    rows = []
    for name, pred, gt in pairs:
        if pred.shape != gt.shape:
            raise DataError(f"{name}: prediction {pred.shape} vs ground truth {gt.shape}")
        rows.append({"image": name, "psnr": psnr(pred, gt), "ssim": metric_ssim(pred, gt)})
    return rows


def cmd_eval(args) -> int:
    data = Path(args.data)
    high_dir = data / "high" if (data / "high").is_dir() else None
    if high_dir is None:
        raise DataError(f"{data}: expected a 'high/' subdirectory")
    gts = sorted(high_dir.glob("*.png"))
    if not gts:
        raise DataError(f"{high_dir}: no PNG files")
    model = load_model(args.checkpoint) if args.checkpoint else None
    pairs = []
    for gt_path in gts:
        if model is not None:
            low = data / "low" / gt_path.name
            if not low.exists():
                log.warning("skipping %s: no low-light input", gt_path.name)
                continue
            pred = enhance_array(model, imageio.read_png(low))
        else:
            pred_path = Path(args.pred_dir) / gt_path.name
            if not pred_path.exists():
                log.warning("skipping %s: no prediction", gt_path.name)
                continue
            pred = imageio.read_png(pred_path)
        pairs.append((gt_path.name, pred, imageio.read_png(gt_path)))
    if not pairs:
        raise DataError("no image pairs to evaluate")
    rows = evaluate_pairs(pairs)
    mean_row = {"image": "MEAN", "psnr": float(np.mean([r["psnr"] for r in rows])),
                "ssim": float(np.mean([r["ssim"] for r in rows]))}
    print(f"{'image':<32} {'PSNR':>8} {'SSIM':>8}")
    for r in rows + [mean_row]:
        print(f"{r['image']:<32} {r['psnr']:8.2f} {r['ssim']:8.4f}")
    out_csv = Path(args.out_csv)
    write_manifest(out_csv.parent, "eval", args.argv, checkpoint=args.checkpoint,
                   pred_dir=args.pred_dir, data_root=str(data.resolve()),
                   model_config=model.cfg.to_dict() if model else None)
    with open(out_csv, "w", newline="") as f:
        writer = csv.DictWriter(f, fieldnames=["image", "psnr", "ssim"])
        writer.writeheader()
        writer.writerows(rows + [mean_row])
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    from . import gradcheck
    ok, results, secs = gradcheck.run(args.scope, tol=args.tol, log=print)
    n_fail = sum(not r.passed for r in results)
    print(f"{len(results) - n_fail}/{len(results)} checks passed in {secs:.1f}s")
    if args.out:
        write_manifest(Path(args.out), "gradcheck", args.argv, scope=args.scope, tol=args.tol,
                       results=[dataclasses.asdict(r.report) | {"name": r.name, "scope": r.scope}
                                for r in results])
    return EXIT_OK if ok else EXIT_NUMERIC


def cmd_extract_structure(args) -> int:
    out = Path(args.out)
    files = _inputs(args.input)
    write_manifest(out, "extract-structure", args.argv, inputs=[str(p) for p in files],
                   out_dir=str(out.resolve()))
    for path in files:
        s = extract_structure(imageio.read_png(path)[None])[0]
        imageio.write_png(out / path.name, s)
        print(f"{path} -> {out / path.name}")
    return EXIT_OK


# ---------------------------------------------------------------- parser

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="spgat", description="Structural-prior guided GAN "
                                "transformer for low-light image enhancement.")
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    t = sub.add_parser("train", help="train generator, SPE and discriminators")
    t.add_argument("--config", help="flat JSON config (keys: C, heads, depths, windows, "
                   "alpha, beta, r, lr0, epochs, batch, crop, ...)")
    t.add_argument("--data", required=True, help="dataset root with low/ and high/")
    t.add_argument("--out", required=True, help="output directory")
    t.add_argument("--ablation", help="named ablation preset, e.g. M1, D3, W248, R10")
    t.add_argument("--max-steps", type=int, help="stop after this many generator steps")
    t.add_argument("--seed", type=int)
    t.add_argument("--resume", help="checkpoint to resume from")
    t.add_argument("--checkpoint-every", type=int, default=10, metavar="EPOCHS")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("enhance", help="enhance an image or a directory of PNGs")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--input", required=True)
    e.add_argument("--out", required=True)
    e.add_argument("--dump-features", action="store_true",
                   help="also write per-stage channel-mean heatmaps")
    e.set_defaults(func=cmd_enhance)

    ev = sub.add_parser("eval", help="PSNR/SSIM over a paired directory")
    src = ev.add_mutually_exclusive_group(required=True)
    src.add_argument("--checkpoint")
    src.add_argument("--pred-dir", help="score existing predictions instead of a model")
    ev.add_argument("--data", required=True, help="directory with high/ (and low/ for --checkpoint)")
    ev.add_argument("--out-csv", default="eval.csv")
    ev.set_defaults(func=cmd_eval)

    g = sub.add_parser("gradcheck", help="finite-difference gradient verification")
    g.add_argument("--scope", choices=["op", "block", "model", "all"], default="all")
    g.add_argument("--tol", type=float, default=1e-3)
    g.add_argument("--out", help="directory for a manifest with the report")
    g.set_defaults(func=cmd_gradcheck)

    x = sub.add_parser("extract-structure", help="write gradient structure maps")
    x.add_argument("--input", required=True)
    x.add_argument("--out", required=True)
    x.set_defaults(func=cmd_extract_structure)
    return p


def main(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    args = parser.parse_args(argv)
    args.argv = argv
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except DataError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except NumericalError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
