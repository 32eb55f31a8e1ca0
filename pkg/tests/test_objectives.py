import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from gltrans.objectives import (
    BatchSpec,
    OptimState,
    PKSampler,
    cosine_lr,
    cross_entropy,
    loss_weights,
    make_batches,
    sgd_step,
    total_loss,
    triplet_loss,
)
from gltrans.tensor import Tensor

from .conftest import build_net, random_images


def t(x, grad=False):
    return Tensor(np.asarray(x, dtype=np.float32), requires_grad=grad)


def pk_labels(p, k):
    return np.repeat(np.arange(p), k)


# -- cross-entropy ----------------------------------------------------------------


@pytest.mark.parametrize("c", [2, 5, 751])
def test_uniform_logits_give_log_c(rng, c):
    ce = cross_entropy(t(rng.standard_normal((6, 8))), rng.integers(0, c, 6), t(np.zeros((8, c))))
    assert abs(ce.item() - math.log(c)) < 1e-5


def test_large_margin_goes_to_zero():
    labels = np.array([0, 1, 2])
    vals = []
    for margin in (1.0, 10.0, 50.0):
        vals.append(cross_entropy(t(np.eye(3) * margin), labels, t(np.eye(3))).item())
    assert vals[0] > vals[1] > vals[2] and vals[2] < 1e-6


def test_cross_entropy_loop_oracle(rng):
    f = rng.standard_normal((4, 5))
    w = rng.standard_normal((5, 3))
    y = np.array([2, 0, 1, 2])
    total = 0.0
    for i in range(4):
        logits = [sum(w[j, c] * f[i, j] for j in range(5)) for c in range(3)]
        total += -(logits[y[i]] - math.log(sum(math.exp(z) for z in logits)))
    assert cross_entropy(t(f), y, t(w)).item() == pytest.approx(total / 4, rel=1e-5)


def test_cross_entropy_label_range():
    with pytest.raises(ValueError, match="labels"):
        cross_entropy(t(np.ones((2, 2))), [0, 3], t(np.ones((2, 3))))


@settings(max_examples=30)
@given(st.integers(0, 1000), st.floats(0.1, 5.0))
def test_raising_true_logit_lowers_loss(seed, bump):
    rng = np.random.default_rng(seed)
    w = rng.standard_normal((4, 3))
    f = np.eye(4)[:3]  # logits are rows of w
    y = rng.integers(0, 3, 3)
    before = cross_entropy(t(f), y, t(w)).item()
    w2 = w.copy()
    w2[0, y[0]] += bump  # only sample 0's true logit moves
    assert cross_entropy(t(f), y, t(w2)).item() < before


# -- triplet ------------------------------------------------------------------------


def test_degenerate_triplet_is_log_two():
    f = np.ones((8, 5))
    assert abs(triplet_loss(t(f), pk_labels(4, 2)).item() - math.log(2)) < 1e-6


def test_well_separated_triplet_vanishes(rng):
    labels = pk_labels(3, 2)
    f = np.eye(3)[labels] * 100 + rng.standard_normal((6, 3)) * 1e-3
    assert triplet_loss(t(f), labels).item() < 1e-6


def triplet_oracle(f, labels):
    total = 0.0
    n = len(f)
    for a in range(n):
        pos = max(((f[a] - f[p]) ** 2).sum() for p in range(n) if p != a and labels[p] == labels[a])
        neg = min(((f[a] - f[q]) ** 2).sum() for q in range(n) if labels[q] != labels[a])
        total += math.log1p(math.exp(pos - neg))
    return total / n


@pytest.mark.parametrize("seed", range(5))
def test_triplet_brute_force(seed):
    rng = np.random.default_rng(seed)
    labels = pk_labels(8, 4)
    f = rng.standard_normal((32, 6)) * 0.5
    got = triplet_loss(t(f), labels).item()
    assert got == pytest.approx(triplet_oracle(f.astype(np.float32).astype(np.float64), labels), rel=1e-5)


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 1000))
def test_triplet_translation_invariant_and_positive(seed):
    rng = np.random.default_rng(seed)
    labels = pk_labels(3, 3)
    f = rng.standard_normal((9, 4))
    shift = rng.standard_normal(4)
    a = triplet_loss(t(f), labels).item()
    b = triplet_loss(t(f + shift), labels).item()
    assert a > 0
    assert a == pytest.approx(b, rel=1e-4, abs=1e-6)


def test_triplet_errors():
    with pytest.raises(ValueError, match="two identities"):
        triplet_loss(t(np.ones((4, 2))), [0, 0, 0, 0])
    with pytest.raises(ValueError, match="single sample"):
        triplet_loss(t(np.ones((3, 2))), [0, 0, 1])


# -- total loss --------------------------------------------------------------------


def test_weights_by_group():
    assert loss_weights(["F_g", "F_l", "F_cls", "v2", "v3"]) == {
        "F_g": 1 / 3, "F_l": 1 / 3, "F_cls": 1 / 3, "v2": 1 / 2, "v3": 1 / 2,
    }
    assert loss_weights(["F_cls"]) == {"F_cls": 1.0}


def test_single_tap_total(rng):
    labels = pk_labels(2, 2)
    f = t(rng.standard_normal((4, 3)))
    w = t(rng.standard_normal((3, 2)))
    rep = total_loss({"F_cls": f}, labels, {"F_cls": w})
    want = cross_entropy(f, labels, w).item() + triplet_loss(f, labels).item()
    assert rep.total.item() == pytest.approx(want, rel=1e-6)


def test_empty_taps():
    with pytest.raises(ValueError):
        total_loss({}, [0], {})


def toy_report(rng, net=None):
    net = net or build_net()
    labels = pk_labels(2, 2)
    out = net(random_images(rng, 4, net.bcfg), [0, 1, 2, 3])
    cls = {k: t(rng.standard_normal((v.shape[1], 2)) * 0.1) for k, v in out.taps.items()}
    return out, labels, cls, total_loss(out.taps, labels, cls)


def test_total_recomputes_from_eight_parts(rng):
    out, labels, cls, rep = toy_report(rng)
    assert len(rep.components()) == 8
    by_hand = (
        sum(rep.ce[k] + rep.triplet[k] for k in ("F_g", "F_l", "F_cls")) / 3
        + (rep.ce["v2"] + rep.ce["v3"]) / 2
    )
    assert abs(rep.total.item() - by_hand) < 1e-6
    assert abs(rep.total.item() - rep.recompute()) < 1e-6


def test_total_is_permutation_invariant(rng):
    feats = {k: t(rng.standard_normal((6, 4))) for k in ("F_g", "F_cls", "v3")}
    cls = {k: t(rng.standard_normal((4, 3))) for k in feats}
    labels = pk_labels(3, 2)
    perm = rng.permutation(6)
    a = total_loss(feats, labels, cls).total.item()
    b = total_loss({k: t(v.data[perm]) for k, v in feats.items()}, labels[perm], cls).total.item()
    assert a == pytest.approx(b, rel=1e-6)


# -- sampling ------------------------------------------------------------------------


def test_batch_size():
    assert BatchSpec(16, 4).B == 64
    with pytest.raises(ValueError):
        BatchSpec(1, 4)


def test_exhaustive_two_by_two():
    batches = PKSampler([0, 0, 1, 1], BatchSpec(2, 2), seed=0).epoch(0)
    assert len(batches) == 1
    assert sorted(batches[0]) == [0, 1, 2, 3]


@settings(max_examples=25, deadline=None)
@given(st.integers(2, 6), st.integers(2, 4), st.integers(1, 9), st.integers(0, 100))
def test_every_batch_is_p_by_k(p, k, per_id, seed):
    ids = p + 2
    labels = np.repeat(np.arange(ids), per_id)
    for batch in PKSampler(labels, BatchSpec(p, k), seed).epoch(seed % 3):
        assert len(batch) == p * k
        counts = np.unique(labels[batch], return_counts=True)[1]
        assert len(counts) == p and (counts == k).all()


def test_sampler_deterministic():
    labels = np.repeat(np.arange(8), 12)
    a = list(make_batches(labels, BatchSpec(4, 4), seed=3, epochs=2))
    b = list(make_batches(labels, BatchSpec(4, 4), seed=3, epochs=2))
    assert all(np.array_equal(x, y) for x, y in zip(a, b)) and len(a) == len(b) > 0
    c = list(make_batches(labels, BatchSpec(4, 4), seed=4, epochs=2))
    assert not all(np.array_equal(x, y) for x, y in zip(a, c))


def test_sampler_errors():
    with pytest.raises(ValueError, match="two identities"):
        PKSampler([0, 0, 0], BatchSpec(2, 2))
    with pytest.raises(ValueError, match="identities for P"):
        PKSampler([0, 0, 1, 1], BatchSpec(3, 2))


# -- optimizer ---------------------------------------------------------------------------


def test_cosine_endpoints():
    assert cosine_lr(8e-3, 0, 30) == 8e-3
    assert cosine_lr(8e-3, 30, 30) == pytest.approx(0.0, abs=1e-12)
    assert cosine_lr(1.0, 15, 30) == pytest.approx(0.5)
    lrs = [cosine_lr(1.0, e, 30) for e in range(31)]
    assert all(a >= b for a, b in zip(lrs, lrs[1:]))


def test_sgd_quadratic_step():
    w = t([1.0], grad=True)
    (w * w * 0.5).sum().backward()
    sgd_step([w], OptimState(base_lr=0.1, total_epochs=10, momentum=0.0, weight_decay=0.0))
    assert w.data[0] == pytest.approx(0.9)


def test_sgd_momentum_and_decay():
    w = t([1.0], grad=True)
    state = OptimState(base_lr=0.1, total_epochs=0, momentum=0.9, weight_decay=0.5)
    for _ in range(2):
        w.grad = np.array([1.0], np.float32)
        sgd_step([w], state)
    # step 1: g = 1 + 0.5 = 1.5, w = 0.85; step 2: g = 1.425, buf = 1.35 + 1.425
    assert w.data[0] == pytest.approx(0.85 - 0.1 * 2.775, rel=1e-6)


def test_sgd_missing_grad():
    with pytest.raises(ValueError, match="gradient"):
        sgd_step([Tensor([1.0], requires_grad=True, name="w")], OptimState())
