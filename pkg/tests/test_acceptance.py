"""Acceptance criteria, one test each, every test printing a PASS/FAIL line.

The end-to-end smoke run trains through the real CLI on the bundled config,
so this module takes a few minutes.
"""
import json
import random
import time
from dataclasses import replace

import numpy as np
import pytest

from _oracles import (loop_bce, loop_focal, loop_hw_l1, loop_mse, oracle_gaussian, oracle_hw, oracle_point,
                      oracle_radius, random_annotations)
from msrnet import network as net
from msrnet.cli import main
from msrnet.config import bundled_config
from msrnet.decode import InstancePrediction
from msrnet.estimator import MSRNetSegmenter
from msrnet.evaluation import annotations_as_predictions, average_precision, evaluate
from msrnet.labels import RadiusPolicy, build_targets, effective_radius, foreground_target, gaussian_target, \
    hw_target, point_target
from msrnet.losses import LossWeights, compute_losses
from msrnet.network import FeaturePyramid, NetConfig
from msrnet.synth import SceneConfig, generate_dataset, load_split
from msrnet.tensor import DiffTensor, grad_check_errors

pytestmark = pytest.mark.slow


@pytest.fixture
def report(capsys):
    def emit(name, ok, detail):
        with capsys.disabled():
            print(f"\nACCEPTANCE {'PASS' if ok else 'FAIL'} | {name} | {detail}")
        return ok
    return emit


def _stack(items):
    return np.stack([img for img, _ in items]), [anns for _, anns in items]


# ---------------------------------------------------------------- gradient integrity

def test_gradient_integrity(report):
    cfg = NetConfig(channels=3, levels=2, dilations=(1, 2), grad_mode="joint")
    params = net.init_params(cfg, 11)
    rng = np.random.default_rng(11)
    img = rng.normal(size=(2, 1, 16, 16))
    anns = [random_annotations(rng, 16, 16, 3, 8) for _ in range(2)]
    maps = [build_targets(a, 16, 16, RadiusPolicy(3), 4) for a in anns]
    targets = {"gaussian": np.stack([m.gaussian for m in maps])[:, None],
               "point": np.stack([m.point for m in maps])[:, None],
               "foreground": np.stack([foreground_target(a, 16, 16, 4) for a in anns])[:, None]}

    def build(P):
        out = net.forward(P, DiffTensor(img), cfg)
        return compute_losses(out, targets, anns, LossWeights(), 4).graph

    t0 = time.perf_counter()
    errors = grad_check_errors(build, params, eps=1e-5, max_entries=4, seed=0)
    elapsed = time.perf_counter() - t0
    groups = {}
    for name, err in errors.items():
        g = name.split(".")[0]
        groups[g] = max(groups.get(g, 0.0), err)
    worst = max(errors.values())
    ok = worst <= 1e-4 and elapsed < 60 and set(groups) == {"backbone", "ggab", "prb", "guide", "seg"}
    detail = ", ".join(f"{g}={e:.1e}" for g, e in sorted(groups.items()))
    report("gradient integrity", ok, f"max rel err {worst:.2e} <= 1e-4 over {len(errors)} tensors ({detail}); "
           f"{elapsed:.1f}s < 60s")
    assert ok


# ---------------------------------------------------------------- label oracles

def test_label_oracle_equivalence(report):
    t0 = time.perf_counter()
    mismatches = 0
    for k in range(1000):
        rng = np.random.default_rng(10_000 + k)
        stride = (1, 2, 4, 8)[k % 4]
        size = 32 if stride == 1 else 64
        R = int(rng.integers(1, 7))
        anns = random_annotations(rng, size, size, 8, 20 if size == 64 else 12)
        g = gaussian_target(anns, size, size, RadiusPolicy(R), stride)
        p, pc = point_target(anns, size, size, stride)
        hw, valid, _ = hw_target(anns, size, size, stride)
        og = oracle_gaussian(anns, size, size, R, 3.0, stride)
        op, opc = oracle_point(anns, size, size, stride)
        ohw, ovalid = oracle_hw(anns, size, size, stride)
        same = (np.array_equal(g, og) and np.array_equal(p, op) and pc == opc
                and np.array_equal(hw, ohw) and np.array_equal(valid, ovalid))
        mismatches += not same
    elapsed = time.perf_counter() - t0
    ok = mismatches == 0 and elapsed < 60
    report("label oracle equivalence", ok,
           f"{1000 - mismatches}/1000 fuzzed scenes bit-exact (gaussian, point, hw); {elapsed:.1f}s < 60s")
    assert ok


# ---------------------------------------------------------------- radius clamp

def test_radius_clamp_and_sweep(report, tmp_path):
    rng = np.random.default_rng(3)
    violations = 0
    checked = 0
    for _ in range(300):
        for ann in random_annotations(rng, 64, 64, 8, 20):
            for R in range(1, 8):
                r = effective_radius(ann, RadiusPolicy(R))
                short = min(ann.bbox[2], ann.bbox[3])
                violations += r > min(R, max(short, 1)) or r != oracle_radius(ann, R)
                checked += 1
    tiny = {"network": {"channels": 4, "levels": 2, "dilations": [1]},
            "optimizer": {"name": "adam", "step_size": 0.01, "steps": 2, "batch_size": 2},
            "data": {"n_images": 10, "seed": 5}}
    cfg_path = tmp_path / "tiny.json"
    cfg_path.write_text(json.dumps(tiny))
    code = main(["sweep-radius", "--config", str(cfg_path), "--out", str(tmp_path / "sweep")])
    rows = json.loads((tmp_path / "sweep" / "sweep.json").read_text()) if code == 0 else []
    schema_ok = [r["radius"] for r in rows] == [1, 2, 3, 4, 5] and all(set(r) == {"radius", "ap50", "ap75"}
                                                                       for r in rows)
    ok = violations == 0 and schema_ok
    report("radius clamp law", ok, f"{checked} clamp checks, {violations} violations; sweep rows "
           f"{[r['radius'] for r in rows]} with schema (radius, ap50, ap75)")
    assert ok


# ---------------------------------------------------------------- residual identity

def test_residual_identity(report):
    cases = 0
    exact = True
    for seed, (C, L) in enumerate([(4, 3), (8, 2), (3, 0), (16, 4)]):
        cfg = NetConfig(channels=C, levels=L)
        params = {k: (np.zeros_like(v) if k.startswith("guide.") else v) for k, v in net.init_params(cfg, seed).items()}
        P = net.as_leaves(params, False)
        rng = np.random.default_rng(seed)
        side = 2 ** (L + 1)
        pyr = FeaturePyramid([DiffTensor(rng.normal(size=(2, C, side >> i, side >> i))) for i in range(L + 1)],
                             [4 * 2 ** i for i in range(L + 1)])
        m_g = DiffTensor(rng.random((2, 1, side, side)))
        m_p = DiffTensor(rng.random((2, 1, side, side)))
        out = net.dual_scheme_guidance(pyr, m_g, m_p, P)
        exact &= all(np.array_equal(a.values, b.values) for a, b in zip(out.levels, pyr.levels))
        cases += 1
    report("residual identity", exact, f"zero guidance parameters reproduce the pyramid element-wise exactly "
           f"in {cases}/{cases} configurations" if exact else "mismatch")
    assert exact


# ---------------------------------------------------------------- loss recomposition

def test_loss_recomposition(report):
    worst_total = worst_comp = 0.0
    for seed in range(5):
        cfg = NetConfig(channels=3, levels=2, dilations=(1, 2))
        params = net.init_params(cfg, seed)
        rng = np.random.default_rng(seed)
        anns = [random_annotations(rng, 16, 16, 3, 8) for _ in range(3)]
        maps = [build_targets(a, 16, 16, RadiusPolicy(3), 4) for a in anns]
        targets = {"gaussian": np.stack([m.gaussian for m in maps])[:, None],
                   "point": np.stack([m.point for m in maps])[:, None],
                   "foreground": np.stack([foreground_target(a, 16, 16, 4) for a in anns])[:, None]}
        w = LossWeights(*rng.uniform(0.1, 2.0, size=3), beta1=rng.uniform(0.5, 2), beta2=rng.uniform(0, 1))
        out = net.forward(net.as_leaves(params, False), DiffTensor(rng.normal(size=(3, 1, 16, 16))), cfg)
        rep = compute_losses(out, targets, anns, w, 4)
        recomposed = w.lambda1 * rep.L_I_proxy + w.lambda2 * rep.L_G_Pred + w.lambda3 * rep.L_P_Reg
        worst_total = max(worst_total, abs(rep.total - recomposed))
        loops = {"L_G_Pred": loop_mse(out.m_g.values, targets["gaussian"]),
                 "L_P_Loc": loop_focal(out.m_p.values, targets["point"], w.delta1, w.delta2),
                 "L_HW_Reg": loop_hw_l1(out.hw.values, anns, 4),
                 "L_I_proxy": loop_bce(out.foreground.values, targets["foreground"])}
        loops["L_P_Reg"] = w.beta1 * loops["L_P_Loc"] + w.beta2 * loops["L_HW_Reg"]
        for k, v in loops.items():
            worst_comp = max(worst_comp, abs(getattr(rep, k) - v))
    ok = worst_total <= 1e-12 and worst_comp <= 1e-12
    report("loss recomposition", ok, f"|total - sum| max {worst_total:.1e}, component vs loop max "
           f"{worst_comp:.1e} (both <= 1e-12)")
    assert ok


# ---------------------------------------------------------------- AP evaluator

def test_ap_evaluator(report, tmp_path):
    manifest = generate_dataset(8, SceneConfig(), 12, (0.0, 0.0, 1.0), tmp_path / "d")
    _, gts = _stack(load_split(manifest, "test"))
    preds = [annotations_as_predictions(a) for a in gts]
    ap50, ap75 = average_precision(preds, gts, 0.5), average_precision(preds, gts, 0.75)

    a = np.zeros((32, 32), bool)
    a[2:8, 2:8] = True
    b = np.zeros((32, 32), bool)
    b[20:26, 20:26] = True
    half = average_precision([[InstancePrediction(0.9, (2, 2, 6, 6), a)]], [[a, b]], 0.5)

    rng = np.random.default_rng(0)
    noisy = []
    for anns in gts:
        img = []
        for c in anns:
            m = np.roll(c.mask, int(rng.integers(-2, 3)), axis=1)
            if m.any():
                img.append(InstancePrediction(float(np.round(rng.random(), 2)), c.bbox, m))
        noisy.append(img)
    base = average_precision(noisy, gts, 0.5)
    invariant = True
    for s in range(10):
        idx = list(range(len(gts)))
        random.Random(s).shuffle(idx)
        invariant &= average_precision([noisy[i] for i in idx], [gts[i] for i in idx], 0.5) == base
    ok = ap50 == 1.0 and ap75 == 1.0 and half == 0.5 and invariant
    report("AP evaluator correctness", ok, f"GT-as-predictions AP50={ap50} AP75={ap75}; 1-of-2 case AP50={half}; "
           f"image-order permutation invariant over 10 shuffles: {invariant}")
    assert ok


# ---------------------------------------------------------------- end-to-end smoke

SMOKE_BUDGET_S = 600.0


@pytest.fixture(scope="module")
def smoke(tmp_path_factory):
    root = tmp_path_factory.mktemp("smoke")
    cfg = bundled_config("smoke")
    cfg_path = root / "smoke.json"
    cfg_path.write_text(cfg.to_json())
    t0 = time.perf_counter()
    assert main(["train", "--config", str(cfg_path), "--out", str(root / "guided")]) == 0
    guided_s = time.perf_counter() - t0
    manifest = root / "guided" / "data" / "manifest.json"
    t0 = time.perf_counter()
    assert main(["train", "--config", str(cfg_path), "--manifest", str(manifest), "--no-guidance",
                 "--out", str(root / "unguided")]) == 0
    unguided_s = time.perf_counter() - t0
    presets = {}
    for seed, scenario in ((101, "dense-pairs"), (102, "elongated")):
        m = generate_dataset(seed, SceneConfig(scenario=scenario, gap=1.0), 40, (0.0, 0.0, 1.0), root / scenario)
        presets[scenario] = _stack(load_split(m, "test"))
    sizes = {k: len(v) for k, v in json.loads(manifest.read_text()).items()}
    return {"root": root, "manifest": manifest, "guided_s": guided_s, "unguided_s": unguided_s,
            "presets": presets, "sizes": sizes,
            "guided": MSRNetSegmenter.load(root / "guided" / "checkpoint.bin"),
            "unguided": MSRNetSegmenter.load(root / "unguided" / "checkpoint.bin"),
            "summary": json.loads((root / "guided" / "summary.json").read_text())}


def test_smoke_a_loss_halves(report, smoke):
    s = smoke["summary"]
    init, final = s["initial_loss"]["total"], s["final_loss"]["total"]
    ok = final <= 0.5 * init and smoke["guided_s"] <= SMOKE_BUDGET_S and smoke["sizes"] == \
        {"train": 120, "val": 40, "test": 40}
    report("smoke (a) loss", ok, f"full train-set loss {init:.4f} -> {final:.4f} (ratio {final / init:.3f} <= 0.5); "
           f"splits {smoke['sizes']}; guided training {smoke['guided_s']:.0f}s <= {SMOKE_BUDGET_S:.0f}s")
    assert ok


def test_smoke_b_test_ap50(report, smoke):
    X, y = _stack(load_split(smoke["manifest"], "test"))
    res = smoke["guided"].evaluate(X, y)
    ok = res.ap50 >= 0.70
    report("smoke (b) test AP50", ok, f"mask AP50={res.ap50:.3f} >= 0.70 (AP75={res.ap75:.3f}, "
           f"box AP50={res.box_ap50:.3f})")
    assert ok


def _failures(smoke, scenario):
    X, y = smoke["presets"][scenario]
    return evaluate(smoke["guided"].predict(X), y), evaluate(smoke["unguided"].predict(X), y)


def test_smoke_c_merges_dense_pairs(report, smoke):
    g, u = _failures(smoke, "dense-pairs")
    ok = g.merge_errors <= 0.5 * u.merge_errors
    report("smoke (c) dense-pairs merges", ok, f"guided {g.merge_errors} <= 0.5 x unguided {u.merge_errors} "
           f"(AP50 guided {g.ap50:.3f} / unguided {u.ap50:.3f}; unguided trained {smoke['unguided_s']:.0f}s)")
    assert ok


def test_smoke_c_splits_elongated(report, smoke):
    g, u = _failures(smoke, "elongated")
    ok = g.split_errors <= 0.5 * u.split_errors
    report("smoke (c) elongated splits", ok, f"guided {g.split_errors} <= 0.5 x unguided {u.split_errors} "
           f"(AP50 guided {g.ap50:.3f} / unguided {u.ap50:.3f})")
    assert ok


# ---------------------------------------------------------------- determinism

def test_train_determinism(report, smoke, tmp_path):
    cfg = bundled_config("smoke")
    cfg = replace(cfg, optimizer=replace(cfg.optimizer, steps=150))
    cfg_path = tmp_path / "det.json"
    cfg_path.write_text(cfg.to_json())
    outs = []
    for name in ("run1", "run2"):
        assert main(["train", "--config", str(cfg_path), "--manifest", str(smoke["manifest"]),
                     "--out", str(tmp_path / name)]) == 0
        outs.append({f: (tmp_path / name / f).read_bytes() for f in ("checkpoint.bin", "metrics.jsonl")})
    ok = outs[0] == outs[1]
    report("determinism", ok, f"two cmd_train runs (bundled smoke config, 150 steps, seed {cfg.optimizer.seed}): "
           f"checkpoint and metrics byte-identical = {ok}")
    assert ok
