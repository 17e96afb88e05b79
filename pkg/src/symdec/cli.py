"""Command-line surface.

Verbs: gen-data, train, predict, eval, equiv-check, prompts.  Every command
validates its full configuration before doing any work; the environment
variable SYMDEC_SEED overrides the configured seed (a --seed flag overrides
both).  Exit codes: 0 success, 2 configuration error, 3 numeric failure,
4 I/O error.
"""

from __future__ import annotations

import argparse
import json
import os
import shutil
import sys
import time
from pathlib import Path

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_NUMERIC = 3
EXIT_IO = 4

TOL32 = 1e-5
TOL64 = 1e-10


def _common_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--preset", default="desk-toy", help="configuration preset")
    p.add_argument("--config", default=None, help="YAML config file layered over the preset")
    p.add_argument("--seed", type=int, default=None, help="override the configured seed")
    p.add_argument("--threads", type=int, default=None, help="cap BLAS worker threads")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="symdec",
        description="reflection/rotation symmetry detection with an equivariance-certified decoder",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser(
        "gen-data",
        help="generate synthetic train/val/test splits",
        formatter_class=argparse.ArgumentDefaultsHelpFormatter,
    )
    _common_flags(p)
    p.add_argument("--out", required=True, help="output dataset root")
    p.add_argument("--count", type=int, default=64, help="training sample count")
    p.add_argument("--val-count", type=int, default=16, help="validation sample count")
    p.add_argument("--test-count", type=int, default=0, help="test sample count (0 skips)")

    p = sub.add_parser(
        "train",
        help="train a model on a generated dataset",
        formatter_class=argparse.ArgumentDefaultsHelpFormatter,
    )
    _common_flags(p)
    p.add_argument("--dataset", required=True, help="training split directory")
    p.add_argument("--val", default=None, help="validation split directory")
    p.add_argument("--out", required=True, help="run output directory")
    p.add_argument("--epochs", type=int, default=None, help="override configured epoch count")
    p.add_argument("--resume", action="store_true", help="continue from the run's checkpoint")

    p = sub.add_parser(
        "predict",
        help="predict a heatmap for one image",
        formatter_class=argparse.ArgumentDefaultsHelpFormatter,
    )
    _common_flags(p)
    p.add_argument("--checkpoint", required=True, help="checkpoint directory")
    p.add_argument("--image", required=True, help="input image (PNG/PPM)")
    p.add_argument("--out", required=True, help="output directory")

    p = sub.add_parser(
        "eval",
        help="evaluate a checkpoint on a dataset split",
        formatter_class=argparse.ArgumentDefaultsHelpFormatter,
    )
    _common_flags(p)
    p.add_argument("--checkpoint", required=True, help="checkpoint directory")
    p.add_argument("--dataset", required=True, help="dataset split directory")
    p.add_argument("--out", required=True, help="report output directory")
    p.add_argument(
        "--robust",
        choices=["none", "rotation", "flip", "quarter"],
        default="none",
        help="also score on transformed inputs",
    )
    p.add_argument("--consistency", action="store_true", help="also compute the consistency score")
    p.add_argument("--json", action="store_true", help="also write a machine-readable report")

    p = sub.add_parser(
        "equiv-check",
        help="certify quarter-turn equivariance of the decoder and its stages",
        formatter_class=argparse.ArgumentDefaultsHelpFormatter,
    )
    _common_flags(p)
    p.add_argument("--checkpoint", default=None, help="certify a trained checkpoint instead of random weights")
    p.add_argument(
        "--inject-positional",
        action="store_true",
        help="test hook: add positional encodings inside the decoder (must fail)",
    )

    p = sub.add_parser(
        "prompts",
        help="print the prompt set for audit",
        formatter_class=argparse.ArgumentDefaultsHelpFormatter,
    )
    _common_flags(p)
    p.add_argument("--out", default=None, help="also write the prompt lines to a file")

    return parser


def _resolve_config(args):
    from .config import load

    overrides: dict = {}
    env_seed = os.environ.get("SYMDEC_SEED")
    if env_seed is not None:
        try:
            overrides["seed"] = int(env_seed)
        except ValueError as err:
            from .config import ConfigError

            raise ConfigError(f"SYMDEC_SEED must be an integer, got {env_seed!r}") from err
    if args.seed is not None:
        overrides["seed"] = args.seed
    if args.threads is not None:
        overrides["threads"] = args.threads
    return load(args.preset, args.config, overrides)


def _prompt_set(cfg):
    from .config import ConfigError
    from .prompts import PromptError, build_prompt_set, default_vocabulary, load_vocabulary

    vocab = load_vocabulary(cfg.vocabulary) if cfg.vocabulary else default_vocabulary()
    try:
        return build_prompt_set(
            vocab,
            num_prompts=cfg.num_prompts,
            classes_per_prompt=cfg.classes_per_prompt,
            policy=cfg.prompt_policy,
            seed=cfg.prompt_seed,
        )
    except PromptError as err:
        raise ConfigError(str(err)) from err


def _build_model(cfg, inject_positional: bool = False):
    from .model import build_model

    prompt_set = _prompt_set(cfg)
    return build_model(
        seed=cfg.seed,
        encoder_kind=cfg.encoder_kind,
        image_size=cfg.image_size,
        patch_size=cfg.patch_size,
        enc_dim=cfg.enc_dim,
        enc_depth=cfg.enc_depth,
        enc_heads=cfg.enc_heads,
        text_dim=cfg.text_dim,
        dec_dim=cfg.dec_dim,
        dec_depth=cfg.dec_depth,
        dec_heads=cfg.dec_heads,
        rotations=cfg.rotations,
        channels=list(cfg.channels),
        prompt_set=prompt_set,
        inject_positional=inject_positional,
    )


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------


def cmd_gen_data(args) -> int:
    from .config import ConfigError
    from .synthdata import SceneSpec, write_dataset

    cfg = _resolve_config(args)
    if args.count < 1:
        raise ConfigError(f"--count must be positive, got {args.count}")
    if args.val_count < 0 or args.test_count < 0:
        raise ConfigError("--val-count and --test-count must be >= 0")
    spec = SceneSpec(
        size=cfg.image_size,
        min_shapes=cfg.min_shapes,
        max_shapes=cfg.max_shapes,
        families=cfg.families,
        noise=cfg.noise,
    )
    root = Path(args.out)
    splits = [("train", args.count, cfg.seed)]
    if args.val_count:
        splits.append(("val", args.val_count, cfg.seed + 1))
    if args.test_count:
        splits.append(("test", args.test_count, cfg.seed + 2))
    for split, count, seed in splits:
        target = root / split
        try:
            manifest = write_dataset(spec, count, target, split=split, seed=seed)
        except Exception:
            shutil.rmtree(target, ignore_errors=True)
            raise
        print(f"{split}: {len(manifest['entries'])} samples at {target}")
    return EXIT_OK


def _rasterizer(cfg):
    from .synthdata import rasterize_gt

    def rasterize(ann):
        return rasterize_gt(
            ann, cfg.image_size, cfg.image_size, cfg.task, width=cfg.stroke_width, sigma=cfg.sigma
        ).scores.data

    return rasterize


def cmd_train(args) -> int:
    from .config import ConfigError
    from .metrics import f1_max
    from .model import predict_full
    from .synthdata import read_dataset
    from .training import (
        AugmentConfig,
        FocalConfig,
        OptimState,
        checkpoint_load,
        checkpoint_save,
        train_loop,
    )

    cfg = _resolve_config(args)
    dataset_dir = Path(args.dataset)
    if not dataset_dir.exists():
        raise ConfigError(f"dataset directory not found: {dataset_dir}")
    if args.val is not None and not Path(args.val).exists():
        raise ConfigError(f"validation directory not found: {args.val}")
    epochs = args.epochs if args.epochs is not None else cfg.epochs
    if epochs < 1:
        raise ConfigError(f"epochs must be positive, got {epochs}")

    _, samples = read_dataset(dataset_dir)
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    ckpt_dir = out_dir / "checkpoint"

    steps_per_epoch = (len(samples) + cfg.batch_size - 1) // cfg.batch_size
    start_epoch = 0
    if args.resume:
        model, optim, extra = checkpoint_load(ckpt_dir)
        start_epoch = int(extra.get("epoch", 0))
    else:
        model = _build_model(cfg)
        optim = OptimState(
            lr=cfg.lr,
            schedule=cfg.schedule,
            decay=cfg.decay,
            total_steps=epochs * steps_per_epoch,
            beta1=cfg.beta1,
            beta2=cfg.beta2,
            eps=cfg.adam_eps,
        )
    focal_cfg = FocalConfig(alpha=cfg.focal_alpha, lam=cfg.lam, eps=cfg.clamp_eps)
    augment_cfg = AugmentConfig(
        quarter_turns=cfg.aug_quarter,
        small_rotation=cfg.aug_small_rotation,
        brightness=cfg.aug_brightness,
        contrast=cfg.aug_contrast,
        seed=cfg.seed,
    )

    log_path = out_dir / "train_log.jsonl"
    start_time = time.time()
    with open(log_path, "a" if args.resume else "w") as log_file:

        def log(record):
            record = dict(record, wall_time=round(time.time() - start_time, 3))
            log_file.write(json.dumps(record) + "\n")
            log_file.flush()
            print(f"epoch {record['epoch']:3d} step {record['step']:5d} loss {record['loss']:.4f}")

        model, optim, _ = train_loop(
            model,
            optim,
            samples,
            epochs=epochs,
            batch_size=cfg.batch_size,
            focal_cfg=focal_cfg,
            augment_cfg=augment_cfg if augment_cfg.enabled else None,
            rasterize=_rasterizer(cfg),
            seed=cfg.seed,
            start_epoch=start_epoch,
            checkpoint_dir=ckpt_dir,
            checkpoint_every=cfg.checkpoint_every,
            log=log,
        )
    checkpoint_save(model, optim, ckpt_dir, {"epoch": epochs})
    print(f"checkpoint: {ckpt_dir}")

    if args.val:
        _, val_samples = read_dataset(args.val)
        rasterize = _rasterizer(cfg)
        preds = [predict_full(model, image) for image, _ in val_samples]
        gts = [rasterize(ann) for _, ann in val_samples]
        sweep = f1_max(preds, gts, tau_grid=cfg.tau_grid(), tolerance_radius=cfg.tolerance_radius)
        (out_dir / "val_report.txt").write_text(
            f"f1: {sweep.f1:.6f}\ntau_star: {sweep.tau_star:.2f}\n"
        )
        print(f"validation f1: {sweep.f1:.4f} at tau {sweep.tau_star:.2f}")
    return EXIT_OK


def write_pgm(path, scores) -> None:
    """8-bit binary PGM; pixel value = round(255 * score)."""
    import numpy as np

    arr = np.clip(np.rint(np.asarray(scores) * 255.0), 0, 255).astype(np.uint8)
    h, w = arr.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        fh.write(arr.tobytes())


def cmd_predict(args) -> int:
    from .grid import csym
    from .model import predict_full
    from .synthdata import load_image
    from .training import checkpoint_load

    _resolve_config(args)
    model, _, _ = checkpoint_load(args.checkpoint)
    image = load_image(args.image)
    scores = predict_full(model, image)
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    stem = Path(args.image).stem
    csym.write_tensor(out_dir / f"{stem}_heatmap.csym", scores)
    write_pgm(out_dir / f"{stem}_heatmap.pgm", scores)
    print(f"wrote {out_dir / (stem + '_heatmap.csym')} and {out_dir / (stem + '_heatmap.pgm')}")
    return EXIT_OK


def cmd_eval(args) -> int:
    from .config import ConfigError
    from .metrics import EvalReport, consistency, f1_max, robustness
    from .model import predict_full
    from .synthdata import read_dataset
    from .training import checkpoint_load

    cfg = _resolve_config(args)
    if not Path(args.dataset).exists():
        raise ConfigError(f"dataset directory not found: {args.dataset}")
    model, _, _ = checkpoint_load(args.checkpoint)
    _, samples = read_dataset(args.dataset)
    rasterize = _rasterizer(cfg)

    def predict_fn(image):
        return predict_full(model, image)

    preds = [predict_fn(image) for image, _ in samples]
    gts = [rasterize(ann) for _, ann in samples]
    sweep = f1_max(preds, gts, tau_grid=cfg.tau_grid(), tolerance_radius=cfg.tolerance_radius)
    from .metrics import per_image_f1

    report = EvalReport(
        f1=sweep.f1,
        tau_star=sweep.tau_star,
        curve=sweep.curve,
        per_image=per_image_f1(preds, gts, sweep.tau_star),
    )
    if args.robust != "none":
        report.robustness_f1 = robustness(
            predict_fn,
            samples,
            task=cfg.task,
            transform=args.robust,
            rotation_range=cfg.rotation_range,
            seed=cfg.seed,
            tau_grid=cfg.tau_grid(),
            stroke_width=cfg.stroke_width,
            sigma=cfg.sigma,
            tolerance_radius=cfg.tolerance_radius,
        ).f1
    if args.consistency:
        report.consistency = consistency(
            predict_fn,
            samples,
            transform=args.robust if args.robust != "none" else "rotation",
            rotation_range=cfg.rotation_range,
            seed=cfg.seed,
            transforms_per_image=cfg.consistency_samples,
        )
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "report.txt").write_text(report.to_text())
    (out_dir / "pr_curve.csv").write_text(report.curve_csv())
    if args.json:
        payload = {
            "f1": report.f1,
            "tau_star": report.tau_star,
            "robustness_f1": report.robustness_f1,
            "consistency": report.consistency,
            "per_image_f1": report.per_image,
        }
        (out_dir / "report.json").write_text(json.dumps(payload, indent=2) + "\n")
    print(report.to_text(), end="")
    return EXIT_OK


# ---------------------------------------------------------------------------
# equivariance certification
# ---------------------------------------------------------------------------


def equivariance_checks(model, seed: int, dtype) -> list[dict]:
    """Claim plus stage-by-stage checks at the tolerance for `dtype`."""
    import numpy as np

    from . import decoder as dec
    from .encoder import PatchTokens
    from .grid import Tensor, no_grad, ops, rotate90
    from .prompts import TextTokens

    tol = TOL32 if dtype == np.float32 else TOL64
    rng = np.random.default_rng(seed)
    params = dec.cast_params(model.decoder, dtype)
    m = min(model.grid_size, 8)
    image_size = m * model.patch_size
    tokens = PatchTokens(
        tokens=Tensor(rng.standard_normal((m, m, model.enc_dim)).astype(dtype)),
        patch_size=model.patch_size,
        image_size=(image_size, image_size),
    )
    text = TextTokens(
        embeddings=Tensor(rng.standard_normal((model.text.num_prompts, model.text.dim)).astype(dtype))
    )
    checks = []

    def record(name, deviation, tolerance=tol):
        checks.append(
            {"name": name, "deviation": float(deviation), "tolerance": tolerance, "ok": bool(deviation < tolerance)}
        )

    with no_grad():
        # stage 1: per-token modulation commutes with token permutations
        base_film = dec.film(Tensor(text.embeddings.data[0]), tokens, params)
        dev = 0.0
        for k in (1, 2, 3):
            moved = dec.film(Tensor(text.embeddings.data[0]), dec.token_rotate(tokens, k), params)
            expected = ops.take_flat(base_film, dec._token_rot_index(m, params.dim, k), base_film.shape)
            dev = max(dev, float(np.abs(moved.data - expected.data).max()))
        record("stage1_film_permutation", dev)

        # stage 2: transformer + aggregation commute with token permutations
        x = Tensor(rng.standard_normal((text.num_prompts, m * m, params.dim)).astype(dtype))
        perm = rng.permutation(m * m)
        mixed = dec.transformer_block(x, params)
        mixed_perm = dec.transformer_block(Tensor(x.data[:, perm, :]), params)
        record("stage2_transformer_permutation", float(np.abs(mixed_perm.data - mixed.data[:, perm, :]).max()))
        agg = dec.aggregate(mixed, params.agg_logits)
        agg_perm = dec.aggregate(mixed_perm, params.agg_logits)
        record("stage2_aggregation_permutation", float(np.abs(agg_perm.data - agg.data[perm, :]).max()))

        # stage 3: group head commutes with the quarter-turn group action
        if params.n % 4 == 0:
            gmap = dec.GroupFeatureMap(
                values=Tensor(rng.standard_normal((params.n, params.dim, m, m)).astype(dtype))
            )
            head = dec.upsample_head(gmap, image_size, image_size, params).scores
            dev = 0.0
            for k in (1, 2, 3):
                moved = dec.upsample_head(dec.group_rotate(gmap, k), image_size, image_size, params).scores
                dev = max(dev, float(np.abs(moved.data - rotate90(head, k).data).max()))
            record("stage3_upsampler_quarter_turns", dev)

            # full claim
            base = dec.decode(tokens, text, params).scores
            for k in (1, 2, 3):
                moved = dec.decode(dec.token_rotate(tokens, k), text, params).scores
                record(
                    f"claim_decode_k{k}",
                    float(np.abs(moved.data - rotate90(base, k).data).max()),
                )
    return checks


def cmd_equiv_check(args) -> int:
    import numpy as np

    from .training import checkpoint_load

    cfg = _resolve_config(args)
    if args.checkpoint:
        model, _, _ = checkpoint_load(args.checkpoint)
        if args.inject_positional:
            from dataclasses import replace

            model.decoder = replace(model.decoder, inject_positional=True)
    else:
        model = _build_model(cfg, inject_positional=args.inject_positional)
    failures = []
    for dtype in (np.float32, np.float64):
        label = "float32" if dtype == np.float32 else "float64"
        for check in equivariance_checks(model, cfg.seed, dtype):
            status = "PASS" if check["ok"] else "FAIL"
            print(
                f"[{label}] {check['name']}: max deviation {check['deviation']:.3e} "
                f"(tolerance {check['tolerance']:.0e}) {status}"
            )
            if not check["ok"]:
                failures.append(f"{label}:{check['name']}")
    if failures:
        print("failing stages: " + ", ".join(failures))
        return EXIT_NUMERIC
    print("all equivariance checks passed")
    return EXIT_OK


def cmd_prompts(args) -> int:
    cfg = _resolve_config(args)
    prompt_set = _prompt_set(cfg)
    text = prompt_set.to_text()
    if args.out:
        Path(args.out).write_text(text)
    print(text, end="")
    return EXIT_OK


COMMANDS = {
    "gen-data": cmd_gen_data,
    "train": cmd_train,
    "predict": cmd_predict,
    "eval": cmd_eval,
    "equiv-check": cmd_equiv_check,
    "prompts": cmd_prompts,
}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    if args.threads is not None and args.threads > 0:
        for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
            os.environ.setdefault(var, str(args.threads))
    try:
        return COMMANDS[args.command](args)
    except Exception as err:  # map failure classes onto the exit-code contract
        from .config import ConfigError
        from .grid import AdjointError, CsymFormatError, GridError, NumericError
        from .metrics import MetricsError
        from .prompts import PromptError
        from .synthdata import DatasetError
        from .training import TrainingError

        if isinstance(err, (ConfigError, PromptError)):
            print(f"configuration error: {err}", file=sys.stderr)
            return EXIT_CONFIG
        if isinstance(err, (NumericError, AdjointError)):
            print(f"numeric failure: {err}", file=sys.stderr)
            return EXIT_NUMERIC
        if isinstance(err, (OSError, CsymFormatError, DatasetError, TrainingError, MetricsError, GridError)):
            print(f"error: {err}", file=sys.stderr)
            return EXIT_IO
        raise


if __name__ == "__main__":
    sys.exit(main())
