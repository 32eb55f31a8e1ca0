"""Acceptance gate: one test per criterion, each printing a PASS/FAIL line.

Run alone with ``pytest tests/test_acceptance.py -s`` or
``python tests/test_acceptance.py``.
"""

import math
import sys
import time

import numpy as np
import pytest

from gltrans.backbone import BackboneConfig
from gltrans.checkpoint import load_checkpoint, save_checkpoint
from gltrans.cli import retrieval, train, train_and_eval
from gltrans.config import RunConfig
from gltrans.data import generate
from gltrans.estimator import GLTransReID
from gltrans.evaluation import evaluate
from gltrans.gradcheck import MODEL_TOL, OP_TOL, run_suite
from gltrans.heads import HeadConfig
from gltrans.model import GLTransNet
from gltrans.objectives import cross_entropy, total_loss, triplet_loss
from gltrans.tensor import Tensor, softmax

try:
    from .oracles import brute_force_eval, compare, random_instance
except ImportError:  # run as a script
    sys.path.insert(0, __file__.rsplit("/", 1)[0])
    from oracles import brute_force_eval, compare, random_instance

RESULTS: list[str] = []


def report(num, title, ok, detail):
    line = f"[{'PASS' if ok else 'FAIL'}] criterion {num}: {title}: {detail}"
    RESULTS.append(line)
    print(line, file=sys.__stdout__, flush=True)
    return ok


def test_1_gradient_fidelity():
    est = GLTransReID(**RunConfig().estimator_params())
    rows, secs = run_suite(est, coords=10, seed=0)
    ops = [r for r in rows if r.name.startswith("op:")]
    params = [r for r in rows if r.name.startswith("param:")]
    op_max = max(r.max_rel_err for r in ops)
    par_max = max(r.max_rel_err for r in params)
    n_params = len(est.model_.parameters()) + len(est.classifiers_)
    ok = op_max < OP_TOL == 1e-3 and par_max < MODEL_TOL == 1e-2 and len(params) == n_params and secs < 120
    detail = f"{len(ops)} ops max {op_max:.2e} (<1e-3), {len(params)} tensors max {par_max:.2e} (<1e-2), {secs:.1f}s (<120s)"
    assert report(1, "gradient fidelity", ok, detail)


def test_2_metric_oracle():
    rng = np.random.default_rng(2024)
    start = time.perf_counter()
    bad = 0
    for _ in range(200):
        inst = random_instance(rng, max_q=10, max_g=20)
        bad += not compare(evaluate(*inst), brute_force_eval(*inst), tol=1e-9)
    secs = time.perf_counter() - start
    ok = bad == 0 and secs < 30
    assert report(2, "metric oracle equivalence", ok, f"{200 - bad}/200 instances within 1e-9, {secs:.1f}s (<30s)")


def test_3_learnability():
    cfg = RunConfig(epochs=30, data_seed=7, num_ids=8, imgs_per_id=16, num_cameras=4, nuisance=0.3)
    start = time.perf_counter()
    _, rep = train_and_eval(cfg)
    secs = time.perf_counter() - start
    ok = rep.rank(1) >= 0.9 and rep.mAP >= 0.7 and secs < 300
    detail = f"Rank1 {rep.rank(1):.3f} (>=0.9), mAP {rep.mAP:.3f} (>=0.7), {secs:.1f}s (<300s)"
    assert report(3, "learnability", ok, detail)


def test_4_ablation_direction():
    base_cfg = RunConfig()
    ds = generate(base_cfg.synth_spec())
    full, baseline = [], []
    for seed in range(5):
        cfg = base_cfg.replace(seed=seed)
        full.append(train_and_eval(cfg, ds)[1].mAP)
        off = cfg.replace(gae_on=False, ptl_on=False, ptf_on=False, gma_on=False)
        baseline.append(train_and_eval(off, ds)[1].mAP)
    f, b = float(np.mean(full)), float(np.mean(baseline))
    ok = f >= b - 0.02
    assert report(4, "ablation direction", ok, f"full mAP {f:.4f} vs Model-1 {b:.4f} (need >= {b - 0.02:.4f}), 5 seeds")


def test_5_structural_invariants(tmp_path):
    checks = {}
    rng = np.random.default_rng(0)
    checks["N=210 at 256x128"] = BackboneConfig(image_h=256, image_w=128, dim=8, heads=1).num_patches == 210

    toy = BackboneConfig()
    net = GLTransNet(toy, HeadConfig(), seed=0)
    img = rng.uniform(0, 1, (4, toy.image_h, toy.image_w, 3)).astype(np.float32)
    out = net(img, [0, 1, 2, 3])
    d, t = toy.dim, 2
    checks["composite dim D+T*D+D (T=2)"] = out.feature.shape == (4, d + t * d + d)
    tall = BackboneConfig(image_h=76)
    checks["composite dim D+T*D+D (T=3)"] = GLTransNet(tall, HeadConfig(parts=3), 0).feature_dim == 320
    checks["mask range (0,1)"] = all(((s.data > 0) & (s.data < 1)).all() for s in out.fused.masks)
    checks["attention range (0,1)"] = bool(((out.enhanced.attention.data > 0) & (out.enhanced.attention.data < 1)).all())

    off = GLTransNet(toy, HeadConfig(gma_on=False), seed=0)(img, 0)
    checks["gma off: R-hat == R"] = off.enhanced is off.fused and np.array_equal(off.enhanced.grid.data, off.fused.grid.data)

    x = Tensor(rng.standard_normal((16, 9)) * 5)
    checks["softmax rows sum to 1 (1e-6)"] = bool(np.abs(softmax(x).data.sum(-1) - 1).max() < 1e-6)

    save_checkpoint(tmp_path / "a.gltr", net.state_dict())
    back = load_checkpoint(tmp_path / "a.gltr")
    checks["checkpoint round-trip bit-exact"] = all(
        back[k].tobytes() == v.tobytes() for k, v in net.state_dict().items()
    )

    cfg = RunConfig(epochs=2)
    a, b = generate(cfg.synth_spec()), generate(cfg.synth_spec())
    checks["synth determinism"] = a.images.tobytes() == b.images.tobytes()
    e1, e2 = train(cfg, a), train(cfg, b)
    s1, s2 = e1.state_dict(), e2.state_dict()
    checks["train determinism"] = all(s1[k].tobytes() == s2[k].tobytes() for k in s1)
    r1, r2 = retrieval(e1, a), retrieval(e2, b)
    checks["eval determinism"] = r1.mAP == r2.mAP and np.array_equal(r1.cmc, r2.cmc)

    failed = [k for k, v in checks.items() if not v]
    detail = f"{len(checks) - len(failed)}/{len(checks)} hold" + (f"; failed: {', '.join(failed)}" if failed else "")
    assert report(5, "structural invariants", not failed, detail)


def test_6_loss_identities():
    rng = np.random.default_rng(6)
    c = 8
    ce = cross_entropy(Tensor(rng.standard_normal((6, 5))), rng.integers(0, c, 6), Tensor(np.zeros((5, c)))).item()
    tri = triplet_loss(Tensor(np.ones((8, 4))), np.repeat(np.arange(4), 2)).item()

    net = GLTransNet(BackboneConfig(), HeadConfig(), seed=1)
    img = rng.uniform(0, 1, (4, 52, 28, 3)).astype(np.float32)
    taps = net(img, [0, 1, 2, 3]).taps
    cls = {k: Tensor(rng.standard_normal((v.shape[1], 2)) * 0.1) for k, v in taps.items()}
    rep = total_loss(taps, np.array([0, 0, 1, 1]), cls)
    by_hand = sum(rep.ce[k] + rep.triplet[k] for k in ("F_g", "F_l", "F_cls")) / 3 + (rep.ce["v2"] + rep.ce["v3"]) / 2
    errs = (abs(ce - math.log(c)), abs(tri - math.log(2)), abs(rep.total.item() - by_hand))
    ok = errs[0] < 1e-5 and errs[1] < 1e-6 and errs[2] < 1e-6
    detail = f"|CE-ln C| {errs[0]:.1e} (<1e-5), |triplet-ln 2| {errs[1]:.1e} (<1e-6), |total-parts| {errs[2]:.1e} (<1e-6)"
    assert report(6, "loss identities", ok, detail)


if __name__ == "__main__":
    sys.exit(pytest.main([__file__, "-q", "-p", "no:cacheprovider"]))
