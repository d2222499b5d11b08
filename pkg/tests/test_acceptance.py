"""Acceptance suite: one test per criterion, each printing a PASS/FAIL line.

The training criteria (6 to 8) run the real desk-scale experiments and take
most of the suite's wall clock on a CPU.
"""

import math
import time

import numpy as np
import pytest
import torch

from oracles import brute_area_means, directional_gradcheck, toy_problem
from sarmim.backbone import EncoderConfig, build_encoder, mean_attention_distance
from sarmim.datakit import CorpusManifest, ManifestRecord, TilePolicy, rebalance, slice_large
from sarmim.features import area_means, diff_gradient, gradient_magnitude, ratio_gradient
from sarmim.imageio import read_image, write_tiff16
from sarmim.pretrain import make_mask, mim_loss, num_masked
from sarmim.specklesim import SpeckleParams, gamma_speckle


@pytest.fixture
def report(capsys):
    """``report(n, title, ok, detail)`` prints the verdict line and fails the test when ``ok`` is false."""
    start = time.perf_counter()

    def emit(n, title, ok, detail=""):
        line = f"ACCEPTANCE {n:>2} {'PASS' if ok else 'FAIL'}  {title}: {detail} [{time.perf_counter() - start:.1f}s]"
        with capsys.disabled():
            print("\n" + line, flush=True)
        assert ok, line

    return emit


def test_criterion_01_feature_oracle(report):
    rng = np.random.default_rng(101)
    worst = 0.0
    t0 = time.perf_counter()
    for _ in range(200):
        h, w = rng.integers(3, 33, size=2)
        r = int(rng.integers(1, 6))
        # reflect padding needs r < side
        r = min(r, h - 1, w - 1)
        img = rng.gamma(1.0, 1.0, (h, w)) * rng.uniform(0.1, 10)
        for direction in ("horizontal", "vertical"):
            a, b = area_means(img, r, direction)
            ba, bb = brute_area_means(img, r, direction)
            worst = max(worst, np.max(np.abs(a - ba)), np.max(np.abs(b - bb)))
        pair = ratio_gradient(img, r)
        ba, bb = brute_area_means(img, r, "horizontal")
        worst = max(worst, np.max(np.abs(pair.g_h - np.log(ba / bb))))
        ba, bb = brute_area_means(img, r, "vertical")
        worst = max(worst, np.max(np.abs(pair.g_v - np.log(ba / bb))))
    elapsed = time.perf_counter() - t0
    report(1, "feature-math oracle", worst <= 1e-12 and elapsed < 30,
           f"max abs error {worst:.2e} (<= 1e-12), {elapsed:.1f}s (< 30s)")


def test_criterion_02_invariances(report):
    rng = np.random.default_rng(202)
    scale_err = flip_err = 0.0
    const_ok = True
    t0 = time.perf_counter()
    for _ in range(100):
        h, w = rng.integers(12, 33, size=2)
        r = int(rng.integers(1, 6))
        img = rng.gamma(2.0, 1.0, (h, w))
        base = ratio_gradient(img, r)
        scaled = ratio_gradient(img * rng.uniform(0.01, 100), r)
        scale_err = max(scale_err, np.max(np.abs(base.g_h - scaled.g_h)), np.max(np.abs(base.g_v - scaled.g_v)))
        flipped = ratio_gradient(img[:, ::-1], r)
        flip_err = max(flip_err, np.max(np.abs(flipped.g_h[:, ::-1] + base.g_h)))
        flipped = ratio_gradient(img[::-1], r)
        flip_err = max(flip_err, np.max(np.abs(flipped.g_v[::-1] + base.g_v)))
        const = ratio_gradient(np.full((h, w), rng.uniform(0.1, 10)), r)
        const_ok &= bool(np.all(const.g_h == 0) and np.all(const.g_v == 0))
    elapsed = time.perf_counter() - t0
    report(2, "invariance suite", scale_err <= 1e-9 and flip_err <= 1e-9 and const_ok and elapsed < 30,
           f"scale {scale_err:.1e}, flip {flip_err:.1e} (<= 1e-9), constant exact={const_ok}, {elapsed:.1f}s")


# Calibration, fixed before the main build: a noise-free step of intensity
# contrast 2 (about 3 dB, a faint edge), the smallest MGF window r = 9, and a
# threshold at half of each operator's peak response on the step.  Both
# operators then flag the same true-edge columns of the clean step.
CAL_SIZE, CAL_CONTRAST, CAL_R, CAL_FRACTION, CAL_SEEDS = 256, 2.0, 9, 0.5, 50


def calibrated_thresholds():
    step = np.ones((CAL_SIZE, CAL_SIZE))
    step[:, CAL_SIZE // 2:] = CAL_CONTRAST
    gr = gradient_magnitude(ratio_gradient(step, CAL_R))
    dg = gradient_magnitude(diff_gradient(step, normalize=True))
    t_gr, t_dg = CAL_FRACTION * gr.max(), CAL_FRACTION * dg.max()
    edge = [CAL_SIZE // 2 - 1, CAL_SIZE // 2]
    return t_gr, t_dg, (gr[:, edge] > t_gr).all(), (dg[:, edge] > t_dg).all()


def test_criterion_03_speckle_false_edges(report):
    t_gr, t_dg, gr_hit, dg_hit = calibrated_thresholds()
    assert gr_hit and dg_hit
    fa_gr, fa_dg = [], []
    for seed in range(CAL_SEEDS):
        field = gamma_speckle(np.ones((CAL_SIZE, CAL_SIZE)), SpeckleParams(1, seed)).pixels
        fa_gr.append(np.mean(gradient_magnitude(ratio_gradient(field, CAL_R)) > t_gr))
        fa_dg.append(np.mean(gradient_magnitude(diff_gradient(field, normalize=True)) > t_dg))
    ratio = np.mean(fa_gr) / np.mean(fa_dg)
    report(3, "speckle false-edge rate", ratio <= 0.2,
           f"ratio-gradient {np.mean(fa_gr):.4f} vs diff-gradient {np.mean(fa_dg):.4f}, ratio {ratio:.4f} (<= 0.2)")


def test_criterion_04_gradient_check(report):
    model, loss_fn = toy_problem(batch=2, seed=0)
    n_params = sum(p.numel() for p in model.parameters())
    errors = directional_gradcheck(model, loss_fn, directions=20, step=1e-4, seed=0)
    report(4, "mim_loss gradient check", n_params <= 1000 and len(errors) == 20 and max(errors) <= 1e-4,
           f"{n_params} params, max relative error {max(errors):.2e} over 20 directions (<= 1e-4)")


def test_criterion_05_mask_and_loss(report):
    rng = np.random.default_rng(505)
    t0 = time.perf_counter()
    exact = 0
    tried = 0
    while tried < 1000:
        g = int(rng.integers(2, 17))
        ratio = float(rng.uniform(0.01, 0.99))
        n = g * g
        k = num_masked(n, ratio)
        if k in (0, n):
            continue
        tried += 1
        plan = make_mask(g, ratio, [505, tried])
        exact += int(len(plan.masked) == k == math.floor(ratio * n + 0.5) and len(plan.visible) == n - k)
    invariant = True
    for s in range(20):
        g = torch.Generator().manual_seed(s)
        pred, target = torch.randn(3, 16, 5, generator=g), torch.randn(3, 16, 5, generator=g)
        plans = [make_mask(4, 0.75, [s, b]) for b in range(3)]
        bumped = pred.clone()
        for b, p in enumerate(plans):
            bumped[b, p.visible] = 1e6 * torch.randn(len(p.visible), 5, generator=g)
        invariant &= bool(torch.equal(mim_loss(pred, target, plans), mim_loss(bumped, target, plans)))
    elapsed = time.perf_counter() - t0
    report(5, "mask/loss contracts", exact == 1000 and invariant and elapsed < 10,
           f"{exact}/1000 exact cardinalities, visible-token invariance exact={invariant}, {elapsed:.1f}s (< 10s)")


def test_criterion_09_attention_distance(report, tmp_path):
    def brute(attn, grid, stride):
        n = grid * grid
        centres = [((i // grid + 0.5) * stride, (i % grid + 0.5) * stride) for i in range(n)]
        return sum(attn[q, k] * math.dist(centres[q], centres[k]) for q in range(n) for k in range(n)) / n

    uniform = torch.full((1, 1, 4, 4), 0.25, dtype=torch.float64)
    got = float(mean_attention_distance(uniform, 2, 16)[0])
    err = abs(got - brute(uniform[0, 0].numpy(), 2, 16))
    identity = float(mean_attention_distance(torch.eye(4, dtype=torch.float64).reshape(1, 1, 4, 4), 2, 16)[0])

    from sarmim.pretrain import PretrainConfig, pretrain_run
    from sarmim.reporting import read_csv
    from sarmim.specklesim import CorpusConfig, make_corpus

    m = make_corpus(CorpusConfig(num_images=32, num_classes=4, size=32, out_dir=str(tmp_path / "c")))
    enc = EncoderConfig(input_size=32, dims=(8, 16, 16), depths=(1, 1, 2), num_heads=2)
    cfg = PretrainConfig(epochs=2, batch_size=8, warmup_epochs=1, decoder_width=16, decoder_depth=1,
                         decoder_heads=2, scales=(2, 3))
    ckpt, _ = pretrain_run(m, enc, cfg)
    from sarmim.pretrain import two_step

    imgs = m.load_images()[:8]
    two_step(ckpt, cfg, enc, m, attn_images=imgs / imgs.mean(axis=(1, 2), keepdims=True), run_dir=tmp_path / "r")
    rows, _ = read_csv(tmp_path / "r" / "attention_distance.csv")
    csv_ok = len(rows) == 2 * 2 * 2 and {r["stage"] for r in rows} == {"before_stage_b", "after_stage_b"}
    ok = abs(got - 13.657) <= 1e-3 and err <= 1e-6 and identity == 0.0 and csv_ok
    report(9, "attention-distance sanity", ok,
           f"uniform {got:.6f} px (brute force diff {err:.1e}), identity {identity}, per-layer CSV rows {len(rows)}")


def test_criterion_10_curation(report, tmp_path):
    t0 = time.perf_counter()
    tiles = slice_large(np.zeros((1024, 1024), dtype=np.uint16), TilePolicy(1000, 512, 64))
    cover = np.zeros((1024, 1024), dtype=np.int32)
    for t in tiles:
        y, x = t.origin
        cover[y:y + t.pixels.shape[0], x:x + t.pixels.shape[1]] += 1
    tiles_ok = len(tiles) == 9 and all(t.pixels.shape == (512, 512) for t in tiles) and cover.min() >= 1

    rng = np.random.default_rng(10)
    pixels = rng.integers(0, 65536, (64, 80), dtype=np.uint16)
    pixels[0, 0], pixels[0, 1] = 0, 65535
    write_tiff16(tmp_path / "x.tif", pixels)
    back = read_image(tmp_path / "x.tif").pixels
    lossless = np.array_equal(back, pixels.astype(back.dtype))

    counts = {"a": 10, "b": 3, "c": 6}
    records = [ManifestRecord(f"{c}{i}.png", "d", "train", c) for c, n in counts.items() for i in range(n)]
    m = CorpusManifest(records, tmp_path)
    up = rebalance(m, "oversample-to-max", 0).class_counts()
    down = rebalance(m, "undersample-to-min", 0).class_counts()
    same = rebalance(m, "none", 0).class_counts()
    counts_ok = (dict(up) == {c: 10 for c in counts} and dict(down) == {c: 3 for c in counts}
                 and dict(same) == counts)
    elapsed = time.perf_counter() - t0
    report(10, "curation suite", tiles_ok and lossless and counts_ok and elapsed < 10,
           f"{len(tiles)} tiles, min coverage {cover.min()}, 16-bit lossless={lossless}, "
           f"rebalance exact={counts_ok}, {elapsed:.1f}s (< 10s)")


def test_criterion_11_reproducible_pipeline(report, tmp_path):
    import yaml

    from sarmim.cli import main

    cfg = {"seed": 11, "corpus": {"num_images": 48, "num_classes": 4, "size": 32},
           "encoder": {"dims": [8, 16, 16], "depths": [1, 1, 2], "num_heads": 2},
           "pretrain": {"epochs": 3, "batch_size": 8, "warmup_epochs": 1, "decoder_width": 16, "decoder_depth": 1,
                        "decoder_heads": 2},
           "probe": {"epochs": 3, "batch_size": 8},
           "fewshot": {"n_way": 4, "shots": [1, 3], "episodes": 3},
           "partialft": {"k_blocks": [0, 1]},
           "workers": 2}
    path = tmp_path / "run.yaml"
    path.write_text(yaml.safe_dump(cfg))
    pipeline = ("simulate", "extract", "pretrain", "probe", "fewshot", "partialft", "attndist")
    metrics = ("simulate/class_counts.csv", "extract/index.csv", "pretrain/loss.csv", "probe/results.csv",
               "fewshot/results.csv", "fewshot/episodes.csv", "partialft/results.csv",
               "attndist/attention_distance.csv")
    runs = []
    for name in ("first", "second"):
        out = tmp_path / name
        codes = [main([cmd, "--config", str(path), "--out", str(out)]) for cmd in pipeline]
        assert codes == [0] * len(pipeline)
        runs.append({m: (out / m).read_bytes() for m in metrics})
    # the extract index names its sources, which differ by output root
    runs = [{m: b.replace(str(tmp_path / n).encode(), b"ROOT") for m, b in r.items()}
            for r, n in zip(runs, ("first", "second"))]
    differing = [m for m in metrics if runs[0][m] != runs[1][m]]
    report(11, "reproducible CLI pipeline", not differing,
           f"{len(metrics) - len(differing)}/{len(metrics)} metrics CSVs byte-identical across reruns"
           + (f"; differing: {differing}" if differing else ""))


# Desk settings shared by the training criteria: the default corpus and toy
# encoder at the corpus's 64 px size, and the desk learning rate.
DESK_LR = 1e-3


@pytest.fixture(scope="module")
def default_corpus(tmp_path_factory):
    from sarmim.specklesim import CorpusConfig, make_corpus

    cfg = CorpusConfig(out_dir=str(tmp_path_factory.mktemp("default_corpus")))
    assert (cfg.num_images, cfg.num_classes, cfg.size) == (2000, 8, 64)
    return make_corpus(cfg)


def test_criterion_06_training_efficacy(report, default_corpus):
    from sarmim.evaluation import FewShotTask, extract_embeddings, fewshot_from_embeddings, labeled_split
    from sarmim.pretrain import PretrainConfig, pretrain_run

    t0 = time.perf_counter()
    enc_cfg = EncoderConfig(input_size=64)
    tr, ytr, classes = labeled_split(default_corpus, "train")
    te, yte, _ = labeled_split(default_corpus, "test", classes)
    task = FewShotTask(8, 5, episodes=10, seed=0)

    def fewshot(encoder):
        res = fewshot_from_embeddings(extract_embeddings(encoder, tr), ytr, extract_embeddings(encoder, te), yte, task)
        return res.mean

    acc = {"random": fewshot(build_encoder(enc_cfg, 0))}
    records = {}
    for target in ("mgf", "pixel"):
        ckpt, records[target] = pretrain_run(default_corpus, enc_cfg,
                                             PretrainConfig(epochs=100, base_lr=DESK_LR, target=target))
        acc[target] = fewshot(ckpt.build_encoder())
    elapsed = time.perf_counter() - t0
    first, final = records["mgf"].losses[0], records["mgf"].final
    loss_ok = final <= 0.5 * first
    gain_ok = acc["mgf"] >= acc["random"] + 0.10
    order_ok = acc["mgf"] > acc["pixel"]
    report(6, "desk-scale training efficacy", loss_ok and gain_ok and order_ok and elapsed <= 1800,
           f"(a) MGF loss {first:.3f} -> {final:.3f} (ratio {final / first:.2f} <= 0.5: {loss_ok}); "
           f"(b) 8-way 5-shot MGF {100 * acc['mgf']:.1f}% vs random {100 * acc['random']:.1f}% "
           f"(needs >= +10 points: {gain_ok}), pixel {100 * acc['pixel']:.1f}% (MGF strictly above: {order_ok}); "
           f"{elapsed / 60:.1f} min (<= 30)")


def test_criterion_07_two_step_direction(report, default_corpus):
    from sarmim.evaluation import linear_probe
    from sarmim.pretrain import PretrainConfig, pretrain_run, two_step
    from sarmim.specklesim import CorpusConfig, make_corpus

    enc_cfg = EncoderConfig(input_size=64)
    two, scratch = [], []
    for seed in (0, 1, 2):
        generic = make_corpus(CorpusConfig(num_images=1000, num_classes=1, kind="generic", seed=seed,
                                           out_dir=str(default_corpus.root.parent / f"generic{seed}")))
        # equal stage-b budget: same epochs, optimizer and data for both arms
        stage_b = PretrainConfig(epochs=30, base_lr=DESK_LR, seed=seed)
        stage_a = PretrainConfig(epochs=30, base_lr=DESK_LR, seed=seed, target="pixel")
        result = two_step(generic, stage_b, enc_cfg, default_corpus, stage_a_cfg=stage_a)
        baseline, _ = pretrain_run(default_corpus, enc_cfg, stage_b)
        two.append(linear_probe(result.checkpoint, default_corpus, default_corpus).accuracy)
        scratch.append(linear_probe(baseline, default_corpus, default_corpus).accuracy)
    diffs = np.subtract(two, scratch)
    margin = float(diffs.mean())
    spread = float(diffs.std(ddof=1))
    report(7, "two-step direction", margin >= 0,
           f"two-step {100 * np.mean(two):.2f}% vs from-scratch {100 * np.mean(scratch):.2f}% over 3 seeds, "
           f"margin {100 * margin:+.2f} points (>= 0), per-seed {np.round(100 * diffs, 2).tolist()}, "
           f"paired effect size d = {margin / spread if spread > 0 else float('inf'):.2f}")


def test_criterion_08_scaling_direction(report, default_corpus):
    from sarmim.pretrain import PretrainConfig, scaling_sweep

    rows = scaling_sweep(default_corpus, default_corpus, default_corpus, fractions=(0.1, 0.5, 1.0),
                         encoder_cfg=EncoderConfig(input_size=64),
                         cfg=PretrainConfig(epochs=30, base_lr=DESK_LR))
    accs = [100 * r["probe_accuracy"] for r in rows]
    drops = [a - b for a, b in zip(accs, accs[1:]) if b < a]
    ok = len(drops) == 0 or (len(drops) == 1 and drops[0] <= 1.0)
    report(8, "scaling direction", ok,
           "probe accuracy at 10/50/100% data: " + " / ".join(f"{a:.2f}%" for a in accs)
           + f", inversions {[round(d, 2) for d in drops]} (at most one, <= 1 point)")
