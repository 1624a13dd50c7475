"""Acceptance checks, one test per criterion.

Every test records a one-line verdict with its measured numbers; the lines
are printed in the terminal summary (see conftest.py) so a plain
``pytest -v`` run shows both the pass/fail status and the values.
"""
import csv
import hashlib
import shutil
import time

import numpy as np
import pytest

from ovseg import gradcheck, metrics
from ovseg import weights as ovw
from ovseg.cli import main
from ovseg.config import RunConfig
from ovseg.distill import loss_cls_contrast, loss_cls_distill, loss_local_distill
from ovseg.ndtensor import Tensor
from ovseg.ovhead import BiasConfig, alleviate_global_bias, classify_patches, load_vocabulary, segment_argmax
from ovseg.pipeline import window_positions
from ovseg.raster import load_mask, load_raster, save_raster
from ovseg.toydata import injected_cls_tokens
from ovseg.upsampler import init_jbu, init_upsampler, jbu_once, jbu_weights, k_range, simfeatup_upsample

from oracles import brute_force_iou, naive_jbu_once

VERDICTS: list[str] = []


def record(name: str, ok: bool, detail: str) -> bool:
    VERDICTS.append(f"{'PASS' if ok else 'FAIL'}  {name}: {detail}")
    return ok


def _sha(path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def _loss_drop(path, column: str = "total") -> tuple[float, float, float]:
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    first, last = float(rows[0][column]), float(rows[-1][column])
    return first, last, (first - last) / first


@pytest.fixture
def work(toy_workspace, tmp_path):
    dst = tmp_path / "w"
    shutil.copytree(toy_workspace, dst)
    return dst


def test_gradient_suite():
    t0 = time.perf_counter()
    results = gradcheck.run_suite(0)
    elapsed = time.perf_counter() - t0
    worst = max(r.max_rel_error for r in results)
    groups = {r.group for r in results}
    ok = worst < 1e-4 and elapsed < 60 and {"jbu", "crn", "down", "student"} <= groups
    assert record("gradient suite", ok, f"max rel err {worst:.2e} (h=1e-5) over "
                  f"{sorted(groups)}, {elapsed:.1f}s")


def test_jbu_matches_loop_oracle():
    t0 = time.perf_counter()
    worst = 0.0
    for seed in range(20):
        rng = np.random.default_rng(seed)
        c = int(rng.integers(1, 5))
        lh, lw = (int(v) for v in rng.integers(1, 5, 2))
        p = init_jbu(rng, radius=int(rng.integers(1, 6)))
        low = rng.standard_normal((c, lh, lw))
        guide = rng.uniform(-1, 1, (3, 2 * lh, 2 * lw))
        ref = naive_jbu_once(low, guide, p.radius, float(np.exp(p.log_tau_spatial.data)),
                             float(np.exp(p.log_tau_range.data)), p.w1.data, p.b1.data,
                             p.w2.data, p.b2.data)
        worst = max(worst, float(np.abs(jbu_once(Tensor(low), Tensor(guide), p).data - ref).max()))
    elapsed = time.perf_counter() - t0
    assert record("jbu vs loop oracle", worst < 1e-10 and elapsed < 10,
                  f"20 instances, max abs diff {worst:.1e}, {elapsed:.2f}s")


def test_kernel_invariants():
    rng = np.random.default_rng(0)
    p = init_jbu(rng)
    wsum = float(np.abs(jbu_weights(Tensor(rng.uniform(-1, 1, (3, 8, 8))), p).data.sum(axis=0) - 1).max())
    window = Tensor(np.full((121, 3), 0.25))
    kr = k_range(window, Tensor(np.full(3, 0.25)), p).data
    uniform = float(np.abs(kr - 1 / 121).max())
    up = init_upsampler(2, 3, seed=0)
    conserved = 0.0
    for steps in (1, 2, 3):
        out = simfeatup_upsample(Tensor(np.full((2, 3, 3), 0.7)), Tensor(rng.uniform(-1, 1, (3, 24, 24))),
                                 up.jbu, steps).data
        conserved = max(conserved, float(np.abs(out - 0.7).max()))
    ok = wsum < 1e-10 and uniform < 1e-12 and conserved <= 1e-12
    assert record("kernel invariants", ok, f"weight-sum err {wsum:.1e}, k_range-1/121 {uniform:.1e}, "
                  f"constant drift {conserved:.1e}")


def test_loss_values():
    rng = np.random.default_rng(0)
    one = loss_cls_contrast(rng.standard_normal((1, 4)), rng.standard_normal((1, 4)), 0.07).item()
    two = loss_cls_contrast(np.eye(2), np.eye(2), 1.0).item()
    v = np.array([0.3, -1.2, 2.0])
    cls = [loss_cls_distill(v, v).item(), loss_cls_distill(np.array([1.0, 0.0]), np.array([0.0, 1.0])).item(),
           loss_cls_distill(v, -v).item()]
    x = rng.standard_normal((49, 8))
    local = loss_local_distill(x, x, 7, 7, 7).item()
    ok = one == 0.0 and abs(two - 0.6265) < 1e-4 and cls == [0.0, 1.0, 2.0] and abs(local) < 1e-12
    assert record("loss values", ok, f"contrast N=1 {one}, N=2 {two:.6f}, cls {cls}, local {local:.1e}")


def test_training_reduces_loss(work):
    w = ["--workdir", str(work), "--config", "toy.cfg"]
    t0 = time.perf_counter()
    assert main(["train-upsampler", *w]) == 0
    t_up = time.perf_counter() - t0
    t0 = time.perf_counter()
    assert main(["distill", *w]) == 0
    t_di = time.perf_counter() - t0
    a0, a1, up_drop = _loss_drop(work / "upsampler_loss.csv")
    b0, b1, di_drop = _loss_drop(work / "distill_loss.csv")
    ok = up_drop >= 0.2 and di_drop >= 0.2 and t_up < 300 and t_di < 300
    assert record("training progress", ok,
                  f"upsampler {a0:.4f}->{a1:.4f} (-{up_drop:.0%}, {t_up:.0f}s); "
                  f"distill {b0:.3f}->{b1:.3f} (-{di_drop:.0%}, {t_di:.0f}s)")


def test_bias_removal(toy_workspace):
    t = injected_cls_tokens(np.random.default_rng(0), beta=0.5)

    def mean_cos(p):
        return float(np.mean(p @ t[0] / np.linalg.norm(p, axis=1) / np.linalg.norm(t[0])))

    before, after = mean_cos(t[1:]), mean_cos(alleviate_global_bias(t, BiasConfig(0.3)))
    root = toy_workspace / "planted"
    tokens = ovw.load(root / "tokens.ovw")["tokens"]
    gt = load_mask(root / "gt.pgm").indices
    vocab = load_vocabulary(root / "vocab.txt", tokens.shape[1], root / "vocab_emb.ovw")
    miou = {}
    for lam in (0.0, 0.3):
        pred = segment_argmax(classify_patches(alleviate_global_bias(tokens, BiasConfig(lam)), vocab), *gt.shape)
        miou[lam] = metrics.miou(metrics.confusion(pred, gt, 2))[0]
    ok = after < before and miou[0.3] >= miou[0.0]
    assert record("bias removal", ok, f"mean cos {before:.3f}->{after:.3f}; "
                  f"planted mIoU lambda=0 {miou[0.0]:.3f}, lambda=0.3 {miou[0.3]:.3f}")


def test_protocol():
    windows = len(window_positions(448, 224, 112)) ** 2
    up = init_upsampler(4, 4, seed=0)
    rng = np.random.default_rng(0)
    out = simfeatup_upsample(Tensor(rng.standard_normal((4, 14, 14))), Tensor(rng.uniform(-1, 1, (3, 224, 224))),
                             up.jbu, 4).data
    cfg = RunConfig()
    defaults = (cfg["infer.lambda"], cfg["train.gamma"], cfg["distill.tau"], cfg["distill.k"])
    ok = windows == 9 and out.shape == (4, 224, 224) and defaults == (0.3, 0.1, 0.07, 7)
    assert record("protocol", ok, f"{windows} windows at 448, 14x14 -> {out.shape[1]}x{out.shape[2]}, "
                  f"defaults lambda/gamma/tau/K {defaults}")


def test_metrics_oracle():
    worst = 0.0
    for seed in range(50):
        rng = np.random.default_rng(seed)
        n = int(rng.integers(1, 5))
        shape = tuple(int(v) for v in rng.integers(1, 9, 2))
        pred, gt = rng.integers(0, n, shape), rng.integers(0, n, shape)
        mean, _ = metrics.miou(metrics.confusion(pred, gt, n))
        _, ref = brute_force_iou(pred, gt, n)
        worst = max(worst, 0.0 if np.isnan(mean) and np.isnan(ref) else abs(mean - ref))
    assert record("metrics oracle", worst < 1e-12, f"50 pairs, max |mIoU - brute force| {worst:.1e}")


def test_determinism(work, tmp_path, capsys):
    quick = ["--config", "toy.cfg", "--set", "train.steps=3", "--set", "distill.steps=3"]
    twin = tmp_path / "twin"
    shutil.copytree(work, twin)
    outputs = []
    for root in (work, twin):
        w = ["--workdir", str(root), *quick]
        codes = [main(["gen-toy-data", *w, "--out", "regen"]),
                 main(["train-upsampler", *w]), main(["distill", *w]),
                 main(["segment", *w, "eval/images/scene_00.ppm", "eval/vocab.txt", "--out", "pred/scene_00.pgm"]),
                 main(["segment", *w, "eval/images/scene_01.ppm", "eval/vocab.txt", "--out", "pred/scene_01.pgm"]),
                 main(["segment", *w, "eval/images/scene_02.ppm", "eval/vocab.txt", "--out", "pred/scene_02.pgm"]),
                 main(["eval", *w, "pred", "eval/masks"]), main(["gradcheck", *w])]
        assert codes == [0] * len(codes)
        files = {str(p.relative_to(root)): _sha(p) for p in sorted(root.rglob("*")) if p.is_file()}
        outputs.append((files, capsys.readouterr().out))
    same = outputs[0] == outputs[1]
    regen = all(outputs[0][0][f"regen/{k}"] == v for k, v in outputs[0][0].items()
                if not k.startswith(("regen/", "pred/")) and f"regen/{k}" in outputs[0][0])

    weights = ovw.load(work / "upsampler.ovw")
    ovw.save(tmp_path / "again.ovw", weights)
    ovw_exact = (tmp_path / "again.ovw").read_bytes() == (work / "upsampler.ovw").read_bytes()
    pnm_exact = True
    for src in (work / "pairs" / "opt_00.ppm", work / "pairs" / "sar_00.pgm"):
        save_raster(tmp_path / src.name, load_raster(src))
        pnm_exact &= (tmp_path / src.name).read_bytes() == src.read_bytes()
    ok = same and regen and ovw_exact and pnm_exact
    assert record("determinism", ok, f"{len(outputs[0][0])} files + stdout identical across runs: {same}; "
                  f"regenerated toy data identical: {regen}; OVW1 {ovw_exact}, P5/P6 {pnm_exact}")
