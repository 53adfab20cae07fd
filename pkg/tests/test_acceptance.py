"""Acceptance gate: one test per criterion, each reporting a single PASS/FAIL line."""
import time
from fractions import Fraction

import numpy as np
import pytest
import torch

from conftest import ACCEPTANCE_LINES
from helpers import central_difference_check, coverage_oracle, flood_fill_components, random_blob_mask
from microseg import zoo
from microseg.config import from_dict
from microseg.data import synth_generate
from microseg.inference import TilingConfig, coverage, extract_boxes, extract_points, predict_tiled
from microseg.losses import dice_loss, f1_iou, focal_loss, total_loss
from microseg.profiler import count_flops, count_params, interpolation_nodes
from microseg.swin import (FeaturePyramid, SwinBlock, WindowAttention, shifted_window_mask, window_partition,
                           window_reverse)
from microseg.train import overfit_run, read_events, train
from microseg.upernet import PPM, DeconvHead, FPNFuse, InputSkip


def report(n: int, ok: bool, detail: str) -> None:
    line = f"{'PASS' if ok else 'FAIL'} criterion {n}: {detail}"
    ACCEPTANCE_LINES.append(line)
    print(line)
    assert ok, line


def meta_model(name, scale="paper"):
    with torch.device("meta"):
        return zoo.build(zoo.variant_spec(name, scale))


# published reference profile: params (M), FLOPs (G), params tolerance
REFERENCE = {
    "SwinS": (81.1, 98, 0.02),
    "SwinB": (121.1, 128, 0.02),
    "SwinS_PS2": (81.1, 390, 0.02),
    "SwinS_TB_Skip": (82.1, 452, 0.02),
    "UNETR2D": (111.7, 234, 0.05),
}


def test_criterion_01_profile_matches_reference():
    t0 = time.perf_counter()
    bad, parts = [], []
    for name, (params_m, flops_g, tol) in REFERENCE.items():
        model = meta_model(name)
        p, f = count_params(model) / 1e6, count_flops(model, (3, 224, 224)) / 1e9
        parts.append(f"{name} {p:.2f}M/{f:.1f}G")
        if abs(p - params_m) > tol * params_m:
            bad.append(f"{name} params {p:.2f} vs {params_m}")
        if abs(f - flops_g) > 0.10 * flops_g:
            bad.append(f"{name} flops {f:.1f} vs {flops_g}")
    seconds = time.perf_counter() - t0
    if seconds >= 60:
        bad.append(f"runtime {seconds:.1f}s")
    report(1, not bad, "; ".join(bad) if bad else ", ".join(parts) + f" ({seconds:.1f}s)")


def test_criterion_02_ps2_cost_ratio():
    ratio = count_flops(meta_model("SwinS_PS2"), (3, 224, 224)) / count_flops(meta_model("SwinS"), (3, 224, 224))
    report(2, 3.6 <= ratio <= 4.4, f"PS2/S FLOP ratio {ratio:.3f}")


def test_criterion_03_shape_contract_and_no_interpolation():
    t0 = time.perf_counter()
    bad = []
    for name in zoo.ABLATION_VARIANTS:
        for side in (224, 448):
            tiny = zoo.build(zoo.variant_spec(name, "tiny"), seed=0).eval()
            with torch.no_grad():
                out = tiny(torch.randn(1, 3, side, side))
            if tuple(out.shape) != (1, 1, side, side):
                bad.append(f"tiny {name}@{side} -> {tuple(out.shape)}")
            with torch.no_grad():
                out = meta_model(name).eval()(torch.zeros(1, 3, side, side, device="meta"))
            if tuple(out.shape) != (1, 1, side, side):
                bad.append(f"paper {name}@{side} -> {tuple(out.shape)}")
    for name in ("SwinS_Pyramid", "SwinS_TB", "SwinS_TB_Skip"):
        for scale in ("tiny", "paper"):
            nodes = interpolation_nodes(meta_model(name, scale), (3, 224, 224))
            if nodes:
                bad.append(f"{name}/{scale} interpolates at {nodes}")
    seconds = time.perf_counter() - t0
    if seconds >= 300:
        bad.append(f"runtime {seconds:.1f}s")
    report(3, not bad, "; ".join(bad) or f"{len(zoo.ABLATION_VARIANTS)} variants x 2 scales x 2 sizes ({seconds:.1f}s)")


def test_criterion_04_gradient_fidelity():
    torch.manual_seed(0)
    d = torch.float64
    errors = {}

    blk = SwinBlock(8, 2, 2, shifted=True).double()
    with torch.no_grad():
        blk.attn.rel_bias.table.normal_(0, 0.5)
    x = torch.randn(1, 4, 4, 8, dtype=d, requires_grad=True)
    w = torch.randn(1, 4, 4, 8, dtype=d)
    errors["encoder block"] = central_difference_check(lambda: (blk(x) * w).sum(), [x, *blk.parameters()])

    ppm = PPM(3, (1, 2), 2).double()
    xp = torch.randn(2, 3, 4, 4, dtype=d, requires_grad=True)
    wp = torch.randn(2, 2, 4, 4, dtype=d)
    errors["ppm"] = central_difference_check(lambda: (ppm(xp) * wp).sum(), [xp, *ppm.parameters()])

    fpn = FPNFuse([2, 4], 2, (1, 2)).double()
    levels = [torch.randn(2, 2, 4, 4, dtype=d, requires_grad=True),
              torch.randn(2, 4, 2, 2, dtype=d, requires_grad=True)]
    wf = torch.randn(2, 2, 4, 4, dtype=d)
    errors["fpn"] = central_difference_check(lambda: (fpn(FeaturePyramid(levels, [2, 4])) * wf).sum(),
                                             levels + list(fpn.parameters()))

    head = DeconvHead(2, 2, 4).double()
    xh = torch.randn(2, 2, 3, 3, dtype=d, requires_grad=True)
    wh = torch.randn(2, 2, 12, 12, dtype=d)
    errors["deconv head"] = central_difference_check(lambda: (head(xh) * wh).sum(), [xh, *head.parameters()])

    skip = InputSkip(3, 2).double()
    img = torch.randn(2, 3, 4, 4, dtype=d, requires_grad=True)
    dmap = torch.randn(2, 2, 4, 4, dtype=d, requires_grad=True)
    ws = torch.randn(2, 2, 4, 4, dtype=d)
    errors["skip merge"] = central_difference_check(lambda: (skip(img, dmap) * ws).sum(),
                                                    [img, dmap, *skip.parameters()])

    p = (torch.rand(2, 4, 4, dtype=d) * 0.9 + 0.05).requires_grad_()
    t = (torch.rand(2, 4, 4) > 0.5).double()
    loss_errors = {name: central_difference_check(lambda fn=fn: fn(p, t), [p])
                   for name, fn in (("dice", dice_loss), ("focal", focal_loss), ("total", total_loss))}

    bad = [f"{k} {v:.2e}" for k, v in errors.items() if not v < 1e-3]
    bad += [f"{k} {v:.2e}" for k, v in loss_errors.items() if not v < 1e-4]
    worst = max(errors.values()), max(loss_errors.values())
    report(4, not bad, "; ".join(bad) or f"max rel err modules {worst[0]:.1e}, losses {worst[1]:.1e}")


def test_criterion_05_attention_invariants():
    torch.manual_seed(0)
    rng = np.random.default_rng(0)
    att = WindowAttention(8, 2, 4)
    mask = shifted_window_mask(8, 8, 4, 2)
    with torch.no_grad():
        probs, _ = att.attention_probs(torch.randn(2 * mask.shape[0], 16, 8) * 3, mask)
    row_err = (probs.sum(-1) - 1).abs().max().item()
    forbidden = (mask != 0)[None, :, None].expand(2, -1, 2, -1, -1).reshape(probs.shape)
    leak = probs[forbidden].max().item()
    exact = 0
    for _ in range(1000):
        b, nh, nw, m, c = (int(v) for v in rng.integers(1, [3, 5, 5, 6, 4], endpoint=True))
        g = torch.randn(b, nh * m, nw * m, c)
        exact += torch.equal(window_reverse(window_partition(g, m), nh * m, nw * m, m), g)
    ok = row_err < 1e-5 and leak < 1e-8 and exact == 1000
    report(5, ok, f"row-sum err {row_err:.1e}, masked weight max {leak:.1e}, round trips {exact}/1000")


def test_criterion_06_metric_identities():
    rng = np.random.default_rng(0)
    worst, exact = 0.0, 0
    for _ in range(1000):
        shape = tuple(rng.integers(1, 33, 2))
        a, b = rng.integers(0, 2, shape), rng.integers(0, 2, shape)
        f1, iou = f1_iou(a, b)
        worst = max(worst, abs(f1 - 2 * iou / (1 + iou)))
        inter, union = int((a & b).sum()), int((a | b).sum())
        if union == 0:
            exact += (f1, iou) == (1.0, 1.0)
        else:
            q = Fraction(inter, union)
            exact += 2 * q / (1 + q) == Fraction(2 * inter, int(a.sum() + b.sum()))
    hands = (f1_iou(np.array([1, 1]), np.array([1, 1])) == (1.0, 1.0)
             and f1_iou(np.array([1, 0]), np.array([0, 1])) == (0.0, 0.0)
             and f1_iou(np.array([1, 1, 0]), np.array([0, 1, 1])) == (0.5, 1 / 3))
    ok = worst <= 1e-12 and exact == 1000 and hands
    report(6, ok, f"float err {worst:.1e}, rational identities {exact}/1000, hand cases {'ok' if hands else 'wrong'}")


class _FirstChannel(torch.nn.Module):
    def forward(self, x):
        return x[:, :1]


def test_criterion_07_tiling_oracle():
    torch.manual_seed(0)
    bad = []
    x = torch.randn(2, 301, 517)
    for tile in (128, 224):
        for overlap in (0, 16, 32):
            cfg = TilingConfig(tile, overlap)
            out = predict_tiled(_FirstChannel(), x, cfg, activation=None)
            if not torch.equal(out[0], x[0]):
                bad.append(f"identity {tile}/{overlap}")
            for h, w in ((301, 517), (448, 448), (tile, tile + 1), (700, 250)):
                want = np.outer(coverage_oracle(h, tile, overlap), coverage_oracle(w, tile, overlap))
                if not np.array_equal(coverage(h, w, cfg), want):
                    bad.append(f"coverage {h}x{w} {tile}/{overlap}")
    report(7, not bad, "; ".join(bad) or "identity exact for 6 configs, coverage matches oracle on 24 grids")


@pytest.mark.slow
def test_criterion_08_overfit_sanity(tmp_path):
    data = synth_generate(tmp_path / "data", 8, 224, seed=0)
    t0 = time.perf_counter()
    skip = overfit_run("SwinS_TB_Skip", data, tmp_path / "tb_skip")
    plain = overfit_run("SwinS", data, tmp_path / "swin_s")
    seconds = time.perf_counter() - t0
    ok = skip["train_iou"] >= 0.95 and skip["steps"] == 200 and seconds < 600
    report(8, ok, f"SwinS_TB_Skip train IoU {skip['train_iou']:.4f}, SwinS train IoU {plain['train_iou']:.4f} "
                  f"after {skip['steps']} steps ({seconds:.0f}s)")


def test_criterion_09_pipeline_determinism(synth_root, tmp_path):
    def run(out):
        cfg = from_dict({"variant": "SwinS_TB_Skip", "scale": "tiny", "dataset": str(synth_root),
                         "out_dir": str(out), "deterministic": True, "val_fraction": 0,
                         "epoch": {"samples_per_epoch": 8, "epochs": 1, "batch": 4},
                         "augment": {"crop": [64, 64]}}, environ={})
        rec = train(cfg)
        plan = [e["plan"] for e in read_events(out) if e["event"] == "epoch"][0]
        return rec.epoch_losses[0], plan

    (la, pa), (lb, pb) = run(tmp_path / "a"), run(tmp_path / "b")
    ok = abs(la - lb) <= 1e-6 and pa == pb
    report(9, ok, f"epoch-1 losses {la:.8f} / {lb:.8f}, plans {'identical' if pa == pb else 'differ'}")


def _tight(box, pixels):
    """Every side of the box touches the component, so shrinking any side drops a pixel."""
    x0, y0, x1, y1 = box
    ys = {y for y, _ in pixels}
    xs = {x for _, x in pixels}
    return {y0, y1} <= ys and {x0, x1} <= xs and min(ys) == y0 and max(ys) == y1 and min(xs) == x0 and max(xs) == x1


def test_criterion_10_prompt_extraction():
    rng = np.random.default_rng(0)
    bad = 0
    for k in range(100):
        m = random_blob_mask(rng)
        comps = flood_fill_components(m)
        boxes = extract_boxes(m).tolist()
        pts = extract_points(m, 3, seed=k).tolist()
        by_box = {}
        for comp in comps:
            ys, xs = zip(*comp)
            by_box.setdefault((min(xs), min(ys), max(xs), max(ys)), []).append(set(comp))
        ok = len(boxes) == len(comps) == len(pts)
        for box, comp_pts in zip(boxes, pts):
            candidates = by_box.get(tuple(box), [])
            ok = ok and any(_tight(box, c) and all((y, x) in c for x, y in comp_pts) for c in candidates)
        bad += not ok
    report(10, bad == 0, f"{100 - bad}/100 masks: box count = flood-fill count, boxes tight, points inside")
