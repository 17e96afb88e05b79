"""Acceptance suite.

One test per acceptance criterion, each printing its own PASS/FAIL line with
the measured quantity (run with `pytest tests/test_acceptance.py -v -s`).
The desk-scale training criterion trains a real model and dominates the
suite's runtime; everything else finishes in seconds.
"""

import math
import time

import numpy as np
import pytest

import symdec.decoder  # noqa: F401  (adjoint registry)
import symdec.training  # noqa: F401
from helpers import gconv_reference
from symdec import decoder as dec
from symdec.config import load as load_config
from symdec.encoder import PatchTokens
from symdec.grid import AdjointRule, Tensor, check_adjoint, no_grad, registry, rotate90
from symdec.metrics import DEFAULT_TAU_GRID, binary_cross_entropy, binary_entropy, f1_max, robustness
from symdec.model import build_model, predict_full
from symdec.prompts import TextTokens, build_prompt_set, default_vocabulary
from symdec.synthdata import SceneSpec, rasterize_gt, read_dataset, write_dataset
from symdec.training import FocalConfig, OptimState, focal_loss, train_loop, train_step

TOL32, TOL64 = 1e-5, 1e-10


def report(name: str, ok: bool, detail: str) -> None:
    print(f"[{'PASS' if ok else 'FAIL'}] {name}: {detail}")
    assert ok, f"{name}: {detail}"


def micro_decoder(seed: int, n: int, dtype=np.float32, inject_positional: bool = False):
    rng = np.random.default_rng(seed)
    params = dec.DecoderParams.create(
        rng,
        enc_dim=8,
        text_dim=5,
        num_prompts=3,
        dim=8,
        depth=2,
        n_heads=2,
        n=n,
        channels=[8, 4, 2, 1],
        inject_positional=inject_positional,
    )
    if dtype != np.float32:
        params = dec.cast_params(params, dtype)
    tokens = PatchTokens(
        tokens=Tensor(np.random.default_rng(seed + 1).standard_normal((6, 6, 8)).astype(dtype)),
        patch_size=8,
        image_size=(48, 48),
    )
    text = TextTokens(
        embeddings=Tensor(np.random.default_rng(seed + 2).standard_normal((3, 5)).astype(dtype))
    )
    return params, tokens, text


class TestC4EquivarianceClaim:
    def test_claim_all_seeds_and_groups(self):
        start = time.time()
        worst = {np.float32: 0.0, np.float64: 0.0}
        for seed in range(5):
            for n in (4, 8):
                for dtype in (np.float32, np.float64):
                    params, tokens, text = micro_decoder(100 * seed + n, n, dtype)
                    with no_grad():
                        base = dec.decode(tokens, text, params).scores
                        for k in (1, 2, 3):
                            moved = dec.decode(dec.token_rotate(tokens, k), text, params).scores
                            deviation = float(np.abs(moved.data - rotate90(base, k).data).max())
                            worst[dtype] = max(worst[dtype], deviation)
        elapsed = time.time() - start
        ok = worst[np.float32] < TOL32 and worst[np.float64] < TOL64 and elapsed < 120.0
        report(
            "C4 equivariance claim",
            ok,
            f"max dev float32 {worst[np.float32]:.2e} (tol 1e-5), "
            f"float64 {worst[np.float64]:.2e} (tol 1e-10), {elapsed:.1f}s (< 120s)",
        )


class TestProofStages:
    def test_stage_film_permutation(self):
        devs = {}
        for dtype, tol in ((np.float32, TOL32), (np.float64, TOL64)):
            params, tokens, text = micro_decoder(11, 8, dtype)
            z = Tensor(text.embeddings.data[0])
            base = dec.film(z, tokens, params)
            dev = 0.0
            for k in (1, 2, 3):
                moved = dec.film(z, dec.token_rotate(tokens, k), params)
                with no_grad():
                    expected = dec.ops.take_flat(base, dec._token_rot_index(6, 8, k), base.shape)
                dev = max(dev, float(np.abs(moved.data - expected.data).max()))
            devs[tol] = dev
            assert dev < tol
        report("proof stage 1 (modulation permutes)", True, f"devs {devs[TOL32]:.2e} / {devs[TOL64]:.2e}")

    def test_stage_transformer_and_aggregation_permutation(self):
        devs = {}
        for dtype, tol in ((np.float32, TOL32), (np.float64, TOL64)):
            params, tokens, text = micro_decoder(12, 8, dtype)
            rng = np.random.default_rng(3)
            x = Tensor(rng.standard_normal((3, 36, 8)).astype(dtype))
            perm = rng.permutation(36)
            mixed = dec.transformer_block(x, params)
            mixed_p = dec.transformer_block(Tensor(x.data[:, perm, :]), params)
            dev = float(np.abs(mixed_p.data - mixed.data[:, perm, :]).max())
            agg = dec.aggregate(mixed, params.agg_logits)
            agg_p = dec.aggregate(mixed_p, params.agg_logits)
            dev = max(dev, float(np.abs(agg_p.data - agg.data[perm, :]).max()))
            devs[tol] = dev
            assert dev < tol
        report("proof stage 2 (mixing/aggregation permute)", True, f"devs {devs[TOL32]:.2e} / {devs[TOL64]:.2e}")

    def test_stage_upsampler_quarter_turns(self):
        devs = {}
        for dtype, tol in ((np.float32, TOL32), (np.float64, TOL64)):
            params, _, _ = micro_decoder(13, 8, dtype)
            gmap = dec.GroupFeatureMap(
                values=Tensor(np.random.default_rng(4).standard_normal((8, 8, 6, 6)).astype(dtype))
            )
            base = dec.upsample_head(gmap, 48, 48, params).scores
            dev = 0.0
            for k in (1, 2, 3):
                moved = dec.upsample_head(dec.group_rotate(gmap, k), 48, 48, params).scores
                dev = max(dev, float(np.abs(moved.data - rotate90(base, k).data).max()))
            devs[tol] = dev
            assert dev < tol
        report("proof stage 3 (group head quarter turns)", True, f"devs {devs[TOL32]:.2e} / {devs[TOL64]:.2e}")

    def test_injected_positional_encoding_fails_stage_two(self):
        params, tokens, text = micro_decoder(14, 8, np.float32, inject_positional=True)
        rng = np.random.default_rng(5)
        x = Tensor(rng.standard_normal((3, 36, 8)).astype(np.float32))
        perm = rng.permutation(36)
        mixed = dec.transformer_block(x, params)
        mixed_p = dec.transformer_block(Tensor(x.data[:, perm, :]), params)
        deviation = float(np.abs(mixed_p.data - mixed.data[:, perm, :]).max())
        report(
            "deliberately broken variant is caught",
            deviation > TOL32,
            f"stage-2 deviation {deviation:.2e} exceeds tolerance as required",
        )


class TestGconvOracle:
    def test_matches_brute_force_100_cases(self):
        rng = np.random.default_rng(0)
        worst = 0.0
        for case in range(100):
            n = int(rng.choice([4, 8]))
            c_in = int(rng.integers(1, 5))
            c_out = int(rng.integers(1, 5))
            h = int(rng.integers(3, 8))
            x = rng.standard_normal((n, c_in, h, h))
            psi = rng.standard_normal((c_out, c_in, n, 3, 3))
            got = dec.gconv(Tensor(x), Tensor(psi)).data
            worst = max(worst, float(np.abs(got - gconv_reference(x, psi)).max()))
        report("group-conv brute-force equivalence", worst < 1e-6, f"100 cases, max abs err {worst:.2e}")


class TestGradientCorrectness:
    def test_every_registered_operation(self):
        worst_name, worst = "", 0.0
        for name, rule in sorted(registry().items()):
            rng = np.random.default_rng(sum(name.encode()))
            err = check_adjoint(rule, rule.sample_inputs(rng), seed=17)
            if err > worst:
                worst_name, worst = name, err
        report(
            "registered operations pass finite differences",
            worst < 1e-3,
            f"{len(registry())} rules, worst {worst_name} at {worst:.2e} (tol 1e-3)",
        )

    def test_end_to_end_objective(self):
        model = build_model(
            seed=0,
            image_size=16,
            patch_size=4,
            enc_dim=8,
            enc_depth=1,
            enc_heads=2,
            text_dim=4,
            num_prompts=2,
            dec_dim=4,
            dec_depth=1,
            dec_heads=2,
            rotations=4,
            channels=[4, 2, 1],
        )
        rng = np.random.default_rng(1)
        image = Tensor(rng.uniform(0, 1, size=(3, 16, 16)).astype(np.float64))
        gt = (rng.uniform(size=(16, 16)) > 0.9).astype(np.float64)
        names = sorted(model.named_tensors())
        template = model

        def forward(*tensors):
            rebuilt = template.replace_tensors(dict(zip(names, tensors)))
            return focal_loss(rebuilt.predict(image), gt, FocalConfig(0.85, 2.0))

        rule = AdjointRule(name="end_to_end_objective", forward=forward)
        inputs = [template.named_tensors()[name].data.astype(np.float64) for name in names]
        total = sum(int(np.prod(a.shape)) for a in inputs)
        err = check_adjoint(rule, inputs, seed=23)
        report(
            "end-to-end objective finite differences",
            err < 1e-3,
            f"{total} parameters, max normalized error {err:.2e} (tol 1e-3)",
        )


class TestFocalHandValues:
    def test_single_pixel_value(self):
        loss = focal_loss(
            Tensor(np.array([[0.5]], dtype=np.float64)), np.array([[1.0]]), FocalConfig(0.85, 2.0)
        ).item()
        expected = 0.85 * 0.25 * math.log(2.0)
        ok = abs(loss - expected) < 1e-6
        report(
            "focal single-pixel hand value",
            ok,
            f"got {loss:.9f}, direct evaluation 0.85*0.25*ln2 = {expected:.9f}",
        )

    def test_perfect_binary_prediction(self):
        rng = np.random.default_rng(0)
        gt = (rng.uniform(size=(16, 16)) > 0.8).astype(np.float64)
        loss = focal_loss(Tensor(gt.copy()), gt, FocalConfig(0.85, 2.0)).item()
        ok = loss < 1e-5 * gt.size
        report("focal perfect-prediction bound", ok, f"loss {loss:.2e} < 1e-5 per pixel")


class TestMetricOracles:
    def test_f1_matches_brute_force_200_pairs(self):
        from test_metrics import f1_brute_force

        rng = np.random.default_rng(7)
        checked = 0
        for _ in range(200):
            pred = rng.uniform(size=(8, 8))
            gt = (rng.uniform(size=(8, 8)) > 0.7).astype(np.float64)
            if gt.sum() == 0:
                continue
            sweep = f1_max([pred], [gt])
            ref_f1, ref_tau, ref_curve = f1_brute_force([pred], [gt], DEFAULT_TAU_GRID)
            assert sweep.f1 == ref_f1 and sweep.tau_star == ref_tau
            assert [row[3] for row in sweep.curve] == ref_curve
            checked += 1
        report("f1 sweep equals brute-force confusion", True, f"{checked} random pairs, exact match")

    def test_consistency_entropy_bound(self):
        rng = np.random.default_rng(8)
        min_gap, eq_gap = np.inf, 0.0
        for _ in range(100):
            p = rng.uniform(size=(8, 8))
            q = rng.uniform(size=(8, 8))
            min_gap = min(min_gap, binary_cross_entropy(p, q) - binary_entropy(p))
            eq_gap = max(eq_gap, binary_cross_entropy(p, p) - binary_entropy(p))
        ok = min_gap >= -1e-12 and eq_gap < 1e-5
        report(
            "consistency >= entropy floor",
            ok,
            f"min CE-H gap {min_gap:.2e} >= 0; gap at q=p {eq_gap:.2e} < 1e-5",
        )


class TestEquivarianceMetricsLink:
    @pytest.fixture()
    def probe(self, tmp_path):
        model = build_model(
            seed=3,
            encoder_kind="patch-mean",
            image_size=32,
            patch_size=8,
            enc_dim=12,
            text_dim=8,
            num_prompts=3,
            dec_dim=8,
            dec_depth=1,
            rotations=8,
            channels=[8, 4, 1],
        )
        from symdec.synthdata import generate_scene

        spec = SceneSpec(size=32, min_shapes=1, max_shapes=1)
        samples = [generate_scene(spec, np.random.default_rng([5, i])) for i in range(6)]
        return model, samples

    def test_quarter_robustness_equals_base_f1(self, probe):
        model, samples = probe
        predict = model.predict_scores
        preds = [predict(img) for img, _ in samples]
        gts = [rasterize_gt(ann, 32, 32, "reflection").scores.data for _, ann in samples]
        base = f1_max(preds, gts).f1
        rob = robustness(predict, samples, task="reflection", transform="quarter", seed=9).f1
        report(
            "equivariance -> robustness == base F1",
            abs(rob - base) < 1e-4,
            f"base {base:.6f}, quarter-transform robustness {rob:.6f}, diff {abs(rob - base):.2e}",
        )

    def test_quarter_consistency_at_entropy_floor_per_image(self, probe):
        model, samples = probe
        worst = 0.0
        for image, _ in samples:
            base = model.predict_scores(image)
            for k in (1, 2, 3):
                with no_grad():
                    target = rotate90(Tensor(base), k).data
                    moved_img = rotate90(image, k)
                moved = model.predict_scores(moved_img)
                worst = max(worst, binary_cross_entropy(target, moved) - binary_entropy(target))
        report(
            "equivariance -> consistency entropy gap",
            worst < 1e-5,
            f"max per-image CE-H gap {worst:.2e} < 1e-5",
        )


class TestPromptGroupingReproduction:
    def test_first_nine_classes(self):
        prompts = build_prompt_set(default_vocabulary(), 3, 3).prompts
        expected = ["man pole stand", "white building sit", "table floor sky"]
        report(
            "prompt grouping reproduces the 3x3 example",
            prompts == expected,
            f"{prompts}",
        )

    def test_default_set_25_by_4(self):
        ps = build_prompt_set(default_vocabulary())
        used = [c for g in ps.groups for c in g]
        ok = ps.num_prompts == 25 and all(len(g) == 4 for g in ps.groups) and len(set(used)) == 100
        report(
            "default prompt set is 25 x 4 with no reuse",
            ok,
            f"{ps.num_prompts} prompts, {len(set(used))} distinct classes",
        )


class TestFilmFittingProperty:
    def test_modulation_reaches_noise_floor(self):
        from symdec import nn
        from symdec.grid import ops
        from symdec.training import adam_update

        rng = np.random.default_rng(0)
        n_items, dim, text_dim = 32, 8, 4
        clean = rng.standard_normal((n_items, dim))
        delta = 1.2 * rng.standard_normal(dim)
        noise = 0.05 * rng.standard_normal((n_items, dim))
        corrupted = clean - delta + noise
        z_row = Tensor(rng.standard_normal((1, text_dim)))
        params = {
            "gw": nn.zeros_param((text_dim, dim)),
            "gb": nn.ones_param(dim),
            "bw": nn.zeros_param((text_dim, dim)),
            "bb": nn.zeros_param(dim),
        }
        optim = OptimState(lr=5e-2)
        source, target = Tensor(corrupted), Tensor(clean)
        loss = None
        for _ in range(400):
            gamma = ops.linear(z_row, params["gw"], params["gb"])
            beta = ops.linear(z_row, params["bw"], params["bb"])
            fixed = ops.add(
                ops.mul(source, ops.expand(gamma, source.shape)), ops.expand(beta, source.shape)
            )
            err = ops.sub(fixed, target)
            loss = ops.mean(ops.mul(err, err))
            loss.backward(np.ones((), dtype=loss.dtype))
            grads = {k: t.grad for k, t in params.items()}
            for t in params.values():
                t.zero_grad()
            params, optim = adam_update(params, grads, optim)
        final = float(loss.item())
        floor = float((noise**2).mean())
        baseline = float(((corrupted - clean) ** 2).mean())
        ok = final < 1.1 * floor and final < baseline
        report(
            "modulation-only fit reaches the noise floor",
            ok,
            f"mse {final:.5f} vs noise floor {floor:.5f} (x{final / floor:.2f} <= 1.1) "
            f"and baseline {baseline:.3f}",
        )


class TestDeskScaleTraining:
    def test_training_run_and_overfit(self, tmp_path):
        start = time.time()
        cfg = load_config("desk-toy")
        spec = SceneSpec(
            size=cfg.image_size,
            min_shapes=cfg.min_shapes,
            max_shapes=cfg.max_shapes,
            families=cfg.families,
            noise=cfg.noise,
        )
        write_dataset(spec, 64, tmp_path / "train", split="train", seed=cfg.seed)
        write_dataset(spec, 16, tmp_path / "val", split="val", seed=cfg.seed + 1)
        _, train_samples = read_dataset(tmp_path / "train")
        _, val_samples = read_dataset(tmp_path / "val")

        def rasterize(ann):
            return rasterize_gt(
                ann, cfg.image_size, cfg.image_size, cfg.task, width=cfg.stroke_width, sigma=cfg.sigma
            ).scores.data

        prompt_set = build_prompt_set(
            default_vocabulary(), cfg.num_prompts, cfg.classes_per_prompt, cfg.prompt_policy, cfg.prompt_seed
        )
        model = build_model(
            seed=cfg.seed,
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
        )
        from symdec.training import AugmentConfig

        optim = OptimState(
            lr=cfg.lr, schedule=cfg.schedule, decay=cfg.decay,
            total_steps=cfg.epochs * ((64 + cfg.batch_size - 1) // cfg.batch_size),
            beta1=cfg.beta1, beta2=cfg.beta2, eps=cfg.adam_eps,
        )
        augment_cfg = AugmentConfig(
            quarter_turns=cfg.aug_quarter,
            small_rotation=cfg.aug_small_rotation,
            brightness=cfg.aug_brightness,
            contrast=cfg.aug_contrast,
            seed=cfg.seed,
        )
        focal_cfg = FocalConfig(alpha=cfg.focal_alpha, lam=cfg.lam, eps=cfg.clamp_eps)
        model, optim, history = train_loop(
            model, optim, train_samples, epochs=cfg.epochs, batch_size=cfg.batch_size,
            focal_cfg=focal_cfg, augment_cfg=augment_cfg, rasterize=rasterize, seed=cfg.seed,
        )
        preds = [predict_full(model, img) for img, _ in val_samples]
        gts = [rasterize(ann) for _, ann in val_samples]
        sweep = f1_max(preds, gts, tau_grid=cfg.tau_grid())
        f1_ok = sweep.f1 >= 0.5
        report(
            "desk-scale training validation F1",
            f1_ok,
            f"val F1 {sweep.f1:.3f} >= 0.5 at tau {sweep.tau_star:.2f} "
            f"({len(history)} steps, {(time.time() - start) / 60:.1f} min)",
        )

        # single fixed batch memorization, 200 steps, loss must drop 10x
        overfit_model = build_model(
            seed=cfg.seed,
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
        )
        batch = [(img, rasterize(ann)) for img, ann in train_samples[: cfg.batch_size]]
        overfit_optim = OptimState(lr=cfg.lr, beta1=cfg.beta1, beta2=cfg.beta2, eps=cfg.adam_eps)
        losses = []
        for _ in range(200):
            overfit_model, overfit_optim, loss = train_step(batch, overfit_model, overfit_optim, focal_cfg)
            losses.append(loss)
        ratio = losses[0] / min(losses)
        elapsed = (time.time() - start) / 60.0
        report(
            "desk-scale single-batch overfit",
            ratio >= 10.0 and elapsed < 30.0,
            f"loss {losses[0]:.0f} -> {min(losses):.0f}, ratio {ratio:.1f}x >= 10x, "
            f"total {elapsed:.1f} min < 30 min",
        )
