"""Acceptance criteria, one test per criterion.

Run with `pytest tests/test_acceptance.py -v -s` to see one line per
criterion (PASS plus the observed numbers). The slow criteria (5, 6)
share one full-pipeline run at the default desk-scale geometry: 120
synthetic slides, 5 stratified folds, both attention variants, 8 epochs.
Expect a few minutes of wall clock for the whole file.
"""

import json
import math
import time
from pathlib import Path

import numpy as np
import pytest

from maskedvit.attention import (
    MhsaParams,
    TransformerBlockParams,
    _attention_core,
    transformer_block,
)
from maskedvit.cli import main
from maskedvit.heatmap import region_heatmap, stitch_heatmaps
from maskedvit.metrics import quadratic_weighted_kappa
from maskedvit.model import HierarchicalViT, ModelCheckpoint, ModelConfig, SlideSample
from maskedvit.optim import grad_check
from maskedvit.pipeline import TissueMaskRaster, extract_regions, load_sample
from maskedvit.tensor import Parameter, Tensor

BUDGET_MASK_LAW = 5.0
BUDGET_INVARIANCE = 10.0
BUDGET_GRAD_CHECK = 30.0
BUDGET_PIPELINE = 900.0


def report(line: str) -> None:
    print(f"\n{line}")


@pytest.fixture(scope="module")
def full_pipeline(tmp_path_factory):
    """Synth -> preprocess -> 5-fold train (both variants) -> eval, once."""
    root = tmp_path_factory.mktemp("acceptance")
    data, runs = root / "data", root / "runs"
    started = time.perf_counter()
    assert main(["synth", "--out-dir", str(data), "--n-slides", "120", "--seed", "0"]) == 0
    assert main(["preprocess", "--data-dir", str(data)]) == 0
    assert (
        main(
            [
                "train", "--data-dir", str(data), "--out-dir", str(runs),
                "--masking", "both", "--folds", "5", "--epochs", "8",
                "--lr", "0.001", "--seed", "0",
            ]
        )
        == 0
    )
    assert main(["eval", "--data-dir", str(data), "--runs-dir", str(runs)]) == 0
    elapsed = time.perf_counter() - started
    return {"data": data, "runs": runs, "elapsed": elapsed}


def random_masked_attention(rng):
    heads = int(rng.choice([1, 2, 4]))
    dim = heads * int(rng.integers(2, 6))
    tokens = int(rng.integers(2, 17))
    m = int(rng.integers(1, 4))
    params = MhsaParams.create(dim, heads, rng, "p")
    x = Tensor(rng.normal(size=(m, tokens + 1, dim)))
    pct = rng.uniform(0.0, 1.0, size=(m, tokens))
    pct[rng.random(size=pct.shape) < 0.5] = 0.0
    for row in pct:  # keep every region attendable
        if not (row > 0).any():
            row[int(rng.integers(0, tokens))] = float(rng.uniform(0.1, 1.0))
    _, attn = _attention_core(x, pct, params)
    return attn.data, pct


def test_criterion_01_masked_columns_zero_rows_sum_one():
    """Masked key columns carry weight exactly 0.0; every row still sums to 1."""
    rng = np.random.default_rng(101)
    started = time.perf_counter()
    sequences = 0
    worst_row_err = 0.0
    while sequences < 100:
        attn, pct = random_masked_attention(rng)
        m, h, seq, _ = attn.shape
        for r in range(m):
            zero = pct[r] == 0.0
            cols = attn[r, :, :, 1:]
            assert (cols[:, :, zero] == 0.0).all(), "masked column not exactly zero"
            assert (cols[:, :, ~zero] > 0.0).all(), "unmasked column lost its weight"
            assert (attn[r, :, :, 0] > 0.0).all(), "class-token column was masked"
        err = np.abs(attn.sum(-1) - 1.0).max()
        worst_row_err = max(worst_row_err, float(err))
        assert err <= 1e-12
        sequences += m
    elapsed = time.perf_counter() - started
    assert elapsed < BUDGET_MASK_LAW
    report(
        f"criterion 1 PASS: {sequences} sequences, masked weights exactly 0.0, "
        f"worst row-sum error {worst_row_err:.2e} (<= 1e-12), {elapsed:.2f}s"
    )


def test_criterion_02_logit_bit_invariant_to_background_features():
    """Replacing features of zero-tissue patches cannot move the logit one bit."""
    rng = np.random.default_rng(102)
    started = time.perf_counter()
    trials = 50
    for _ in range(trials):
        heads = int(rng.choice([1, 2]))
        config = ModelConfig(
            region_size=8,
            patch_size=int(rng.choice([2, 4])),
            feature_dim=int(rng.integers(2, 6)),
            embed_dim=heads * int(rng.choice([4, 8])),
            region_depth=int(rng.integers(1, 3)),
            slide_depth=1,
            num_heads=heads,
            mlp_ratio=2.0,
            seed=int(rng.integers(0, 1000)),
        )
        model = HierarchicalViT(config, masking=True)
        m = int(rng.integers(1, 4))
        t = config.tokens_per_region
        tissue = rng.uniform(0.1, 1.0, size=(m, t))
        flat = tissue.reshape(-1)
        n_bg = int(rng.integers(1, m * t // 2 + 1))
        flat[rng.choice(m * t, size=n_bg, replace=False)] = 0.0
        for r in range(m):  # every region keeps at least one tissue patch
            if not (tissue[r] > 0).any():
                tissue[r, 0] = 0.5
        bg_idx = np.flatnonzero(flat == 0.0)  # survivors of the repair
        assert len(bg_idx) >= 1
        features = rng.normal(size=(m, t, config.feature_dim))
        sample = SlideSample(
            slide_id="s",
            label=0,
            region_coords=np.zeros((m, 2), dtype=np.int64),
            features=features,
            tissue=tissue,
        )
        base = model.forward(sample).item()
        pert = features.copy()
        pert.reshape(-1, config.feature_dim)[bg_idx] = rng.normal(
            scale=100.0, size=(len(bg_idx), config.feature_dim)
        )
        sample2 = SlideSample(
            slide_id="s",
            label=0,
            region_coords=sample.region_coords,
            features=pert,
            tissue=tissue,
        )
        assert model.forward(sample2).item() == base, "logit moved under bg perturbation"
    elapsed = time.perf_counter() - started
    assert elapsed < BUDGET_INVARIANCE
    report(
        f"criterion 2 PASS: {trials} random models/inputs, logits bit-identical "
        f"under background feature replacement, {elapsed:.2f}s"
    )


def test_criterion_03_vacuous_mask_equals_plain():
    """With no zero-tissue patch, masked and plain agree within 1e-12."""
    rng = np.random.default_rng(103)
    worst = 0.0
    bitwise = True
    for _ in range(25):
        config = ModelConfig(
            region_size=8,
            patch_size=4,
            feature_dim=4,
            embed_dim=8,
            region_depth=2,
            slide_depth=1,
            num_heads=2,
            mlp_ratio=2.0,
            seed=int(rng.integers(0, 1000)),
        )
        masked = HierarchicalViT(config, masking=True)
        plain = HierarchicalViT(config, masking=False)
        m = int(rng.integers(1, 4))
        sample = SlideSample(
            slide_id="s",
            label=0,
            region_coords=np.zeros((m, 2), dtype=np.int64),
            features=rng.normal(size=(m, 4, 4)),
            tissue=rng.uniform(1e-9, 1.0, size=(m, 4)),
        )
        a, b = masked.forward(sample).item(), plain.forward(sample).item()
        worst = max(worst, abs(a - b))
        bitwise = bitwise and (a == b)
        assert abs(a - b) <= 1e-12
    report(
        f"criterion 3 PASS: 25 vacuous-mask trials, worst |masked - plain| = {worst:.1e} "
        f"(<= 1e-12, bitwise equal: {bitwise})"
    )


def test_criterion_04_region_block_gradients():
    """Autodiff through a full region block matches central differences < 1e-4."""
    rng = np.random.default_rng(104)
    started = time.perf_counter()
    block = TransformerBlockParams.create(16, 2, 2.0, rng, "blk")
    x = Parameter("x", rng.normal(size=(1, 5, 16)) * 0.5)
    pct_masked = np.array([[0.8, 0.0, 0.3, 0.0]])
    results = {}
    for label, pct in (("mask on", pct_masked), ("mask off", None)):

        def f():
            return transformer_block(x, pct, block).mean()

        worst = grad_check(f, [x, *block.parameters()], eps=1e-5)
        assert worst < 1e-4, f"{label}: relative error {worst:.2e}"
        results[label] = worst
    elapsed = time.perf_counter() - started
    assert elapsed < BUDGET_GRAD_CHECK
    report(
        "criterion 4 PASS: full region block, "
        f"mask on {results['mask on']:.1e} / mask off {results['mask off']:.1e} "
        f"(< 1e-4, step 1e-5), {elapsed:.1f}s"
    )


def test_criterion_05_pipeline_kappa(full_pipeline):
    """Masked mean kappa >= 0.85 across 5 folds; |masked - plain| <= 0.05."""
    report_path = full_pipeline["runs"] / "report.json"
    payload = json.loads(report_path.read_text())
    assert len(payload["slide_ids"]) >= 120
    assert len(payload["folds"]) == 5
    masked_mean = payload["variants"]["masked"]["mean_kappa"]
    plain_mean = payload["variants"]["plain"]["mean_kappa"]
    diff = abs(payload["kappa_difference"])
    elapsed = full_pipeline["elapsed"]
    assert masked_mean >= 0.85, f"masked mean kappa {masked_mean:.4f} < 0.85"
    assert diff <= 0.05, f"|masked - plain| = {diff:.4f} > 0.05"
    assert elapsed < BUDGET_PIPELINE
    report(
        f"criterion 5 PASS: 120 slides, 5 folds; masked mean kappa {masked_mean:.4f} "
        f"(>= 0.85), plain {plain_mean:.4f}, |difference| {diff:.4f} (<= 0.05), "
        f"pipeline {elapsed:.0f}s (< {BUDGET_PIPELINE:.0f}s)"
    )


def test_criterion_06_heatmap_zero_law(full_pipeline):
    """Masked heatmaps are exactly 0 on every background patch; plain ones are not."""
    runs, data = full_pipeline["runs"], full_pipeline["data"]
    masked_model, _ = ModelCheckpoint.load(runs / "fold0.masked.ckpt").restore()
    plain_model, _ = ModelCheckpoint.load(runs / "fold0.plain.ckpt").restore()
    cfg = masked_model.config
    samples = [load_sample(p) for p in sorted((data / "preprocessed").glob("*.slide"))]

    regions_checked = 0
    bg_blocks = 0
    plain_positive_blocks = 0
    plain_positive_regions = 0
    for sample in samples:
        has_bg = [(r, (sample.tissue[r] == 0.0).any()) for r in range(sample.tissue.shape[0])]
        if not any(flag for _, flag in has_bg):
            continue
        masked_attn = masked_model.region_attention(sample, -1).data
        plain_attn = plain_model.region_attention(sample, -1).data
        for r, flag in has_bg:
            if not flag:
                continue
            bg = sample.tissue[r] == 0.0
            grid = cfg.grid_size
            m_raster = region_heatmap(
                masked_attn[r], sample.tissue[r], cfg.region_size, cfg.patch_size,
                mask_background=True,
            )
            p_raster = region_heatmap(
                plain_attn[r], sample.tissue[r], cfg.region_size, cfg.patch_size,
                mask_background=False,
            )
            step = cfg.patch_size
            m_blocks = m_raster.values[::step, ::step].reshape(-1)
            p_blocks = p_raster.values[::step, ::step].reshape(-1)
            assert (m_blocks[bg] == 0.0).all(), "masked heatmap leaked onto background"
            assert (m_blocks[~bg] > 0.0).all(), "masked heatmap lost a tissue patch"
            regions_checked += 1
            bg_blocks += int(bg.sum())
            positives = int((p_blocks[bg] > 0.0).sum())
            plain_positive_blocks += positives
            if positives:
                plain_positive_regions += 1
        if regions_checked >= 40:
            break
    assert regions_checked >= 20, f"only {regions_checked} regions with background found"
    assert plain_positive_regions >= 1, "plain control never put weight on background"
    rate = plain_positive_blocks / bg_blocks
    report(
        f"criterion 6 PASS: {regions_checked} regions with background; masked rasters "
        f"exactly 0.0 on all {bg_blocks} background patches; plain control positive on "
        f"{plain_positive_blocks}/{bg_blocks} ({rate:.0%}) across "
        f"{plain_positive_regions} regions"
    )


def test_criterion_07_kappa_against_brute_force():
    """1000 random instances agree with an explicit-loop kappa within 1e-12."""

    def kappa_loops(y_true, y_pred, c):
        n = len(y_true)
        observed = [[0.0] * c for _ in range(c)]
        for t, p in zip(y_true, y_pred):
            observed[t][p] += 1.0
        row = [sum(observed[i]) for i in range(c)]
        col = [sum(observed[i][j] for i in range(c)) for j in range(c)]
        num = den = 0.0
        for i in range(c):
            for j in range(c):
                w = (i - j) ** 2 / (c - 1) ** 2
                num += w * observed[i][j]
                den += w * row[i] * col[j] / n
        return 1.0 if den == 0.0 else 1.0 - num / den

    rng = np.random.default_rng(107)
    checked = 0
    worst = 0.0
    while checked < 1000:
        c = int(rng.integers(2, 9))
        n = int(rng.integers(1, 80))
        y_true = rng.integers(0, c, size=n).tolist()
        y_pred = rng.integers(0, c, size=n).tolist()
        if len(set(y_true)) == 1 and y_true == y_pred:
            continue
        got = quadratic_weighted_kappa(y_true, y_pred, num_classes=c)
        want = kappa_loops(y_true, y_pred, c)
        worst = max(worst, abs(got - want))
        assert abs(got - want) <= 1e-12
        checked += 1
        if checked % 7 == 0:  # identity spot-checks interleaved
            if len(set(y_true)) > 1:
                assert quadratic_weighted_kappa(y_true, y_true, num_classes=c) == 1.0
    report(
        f"criterion 7 PASS: 1000 instances vs brute force, worst |diff| {worst:.1e} "
        f"(<= 1e-12); kappa(y, y) == 1.0 exactly"
    )


def test_criterion_08_retention_threshold_boundary():
    """A region at 9.9% mean tissue is discarded, 10.0% retained, exactly."""
    size = 1000
    area = size * size

    def region_with(count):
        bitmap = np.zeros((size, size), dtype=np.uint8)
        bitmap.reshape(-1)[:count] = 1
        return TissueMaskRaster(bitmap=bitmap, spacing=0.5)

    low_count = int(round(0.099 * area))  # 99000 pixels
    high_count = int(round(0.100 * area))  # 100000 pixels
    low, high = region_with(low_count), region_with(high_count)
    assert int((low.bitmap != 0).sum()) == low_count  # brute-force pixel count
    assert int((high.bitmap != 0).sum()) == high_count
    assert extract_regions(low, size, min_tissue=0.10) == []
    kept = extract_regions(high, size, min_tissue=0.10)
    assert len(kept) == 1 and kept[0].tissue_fraction == high_count / area
    report(
        "criterion 8 PASS: 1000x1000 region, 99000 tissue pixels (9.9%) discarded, "
        "100000 (10.0%) retained; fractions match brute-force pixel counts exactly"
    )


def test_criterion_09_stitching_pixel_exact():
    """Stitching equals naive paint-then-pool bit for bit on 20 random slides."""

    def naive(arrays, coords, slide_size, s):
        width, height = slide_size
        out_w, out_h = math.ceil(width / s), math.ceil(height / s)
        full = np.zeros((out_h * s, out_w * s))
        region = arrays[0].shape[0]
        for arr, (x, y) in zip(arrays, coords):
            ch = min(region, full.shape[0] - y)
            cw = min(region, full.shape[1] - x)
            full[y : y + ch, x : x + cw] = arr[:ch, :cw]
        pooled = np.empty((out_h, out_w))
        for by in range(out_h):
            for bx in range(out_w):
                pooled[by, bx] = np.ascontiguousarray(
                    full[by * s : (by + 1) * s, bx * s : (bx + 1) * s]
                ).mean()
        return pooled

    rng = np.random.default_rng(109)
    for trial in range(20):
        region = int(rng.choice([16, 32, 64]))
        gw, gh = int(rng.integers(2, 5)), int(rng.integers(2, 5))
        cells = [(x * region, y * region) for y in range(gh) for x in range(gw)]
        n = int(rng.integers(2, len(cells) + 1))
        picks = rng.choice(len(cells), size=n, replace=False)
        coords = np.array([cells[i] for i in picks], dtype=np.int64)
        arrays = [rng.uniform(0, 1, size=(region, region)) for _ in range(n)]
        s = int(rng.choice([d for d in (1, 2, 4, 8) if region % d == 0]))
        slide = (gw * region + int(rng.integers(0, region)), gh * region)
        got = stitch_heatmaps(arrays, coords, slide, downsample=s)
        want = naive(arrays, coords, slide, s)
        assert got.values.tobytes() == want.tobytes(), f"trial {trial}: pooled pixels differ"
        assert got.values.shape == (math.ceil(slide[1] / s), math.ceil(slide[0] / s))
    report(
        "criterion 9 PASS: 20 random multi-region slides stitch bit-identically to the "
        "naive paint-then-pool reference; output dims equal ceil(slide / downsample)"
    )


def test_criterion_10_end_to_end_determinism(tmp_path):
    """Same seed twice: byte-identical report.json; checkpoints survive reload."""
    tiny = [
        "--canvas-size", "512", "--region-size", "256", "--patch-size", "64",
    ]
    tiny_train = [
        "--folds", "2", "--epochs", "2", "--embed-dim", "16",
        "--region-depth", "1", "--slide-depth", "1", "--num-heads", "2",
        "--mlp-ratio", "2.0", "--seed", "0",
    ]
    reports = []
    for run in ("one", "two"):
        base = tmp_path / run
        data, runs = base / "data", base / "runs"
        assert main(["synth", "--out-dir", str(data), "--n-slides", "12", "--seed", "0", *tiny]) == 0
        assert main(["preprocess", "--data-dir", str(data), *tiny[2:]]) == 0
        assert main(["train", "--data-dir", str(data), "--out-dir", str(runs), *tiny_train]) == 0
        assert main(["eval", "--data-dir", str(data), "--runs-dir", str(runs)]) == 0
        reports.append((runs / "report.json").read_bytes())
    assert reports[0] == reports[1], "same seed produced different reports"

    ckpt_path = tmp_path / "one" / "runs" / "fold0.masked.ckpt"
    resaved = tmp_path / "resaved.ckpt"
    ModelCheckpoint.load(ckpt_path).save(resaved)
    assert ckpt_path.read_bytes() == resaved.read_bytes(), "save/load/save changed bytes"
    twice = tmp_path / "resaved2.ckpt"
    ModelCheckpoint.load(resaved).save(twice)
    assert resaved.read_bytes() == twice.read_bytes()
    report(
        "criterion 10 PASS: two fixed-seed pipeline runs wrote byte-identical "
        "report.json; checkpoint save -> load -> save is byte-stable"
    )
