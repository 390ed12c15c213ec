import math

import numpy as np
import pytest
import torch
from hypothesis import assume, given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays
from scipy.stats import special_ortho_group

from crossreid.losses import (PRESETS, LossWeights, batch_hard_triplet_loss, cross_entropy_loss,
                              dual_classification_loss, total_loss, total_triplet_loss, triplet_oracle)


def test_cross_entropy_uniform_logits():
    loss = cross_entropy_loss(torch.zeros(3, 10, dtype=torch.float64), torch.tensor([0, 4, 9]))
    assert loss.item() == pytest.approx(math.log(10), abs=1e-12)
    assert math.log(10) == pytest.approx(2.302585, abs=1e-6)


def test_cross_entropy_saturated():
    logits = torch.zeros(1, 5, dtype=torch.float64)
    logits[0, 2] = 1000
    assert cross_entropy_loss(logits, torch.tensor([2])).item() == pytest.approx(0.0, abs=1e-12)


def test_cross_entropy_is_a_batch_mean():
    # per-sample losses 0.5 and 1.5: two classes with logit gap g give log(1 + e^-g)
    g = lambda l: -math.log(math.exp(l) - 1)
    logits = torch.tensor([[g(0.5), 0.0], [g(1.5), 0.0]], dtype=torch.float64)
    assert cross_entropy_loss(logits, torch.tensor([0, 0])).item() == pytest.approx(1.0, abs=1e-12)


def test_cross_entropy_label_range():
    with pytest.raises(ValueError):
        cross_entropy_loss(torch.zeros(2, 3), torch.tensor([0, 3]))
    with pytest.raises(ValueError):
        cross_entropy_loss(torch.zeros(2, 3), torch.tensor([-1, 0]))


@given(logits=arrays(np.float64, (4, 6), elements=st.floats(-20, 20)), label=st.integers(0, 5),
       bump=st.floats(0.01, 10))
def test_cross_entropy_properties(logits, label, bump):
    lab = torch.full((4,), label)
    t = torch.from_numpy(logits)
    base = cross_entropy_loss(t, lab).item()
    assert base >= 0
    raised = t.clone()
    raised[:, label] += bump
    assert cross_entropy_loss(raised, lab).item() < base or base < 1e-12


def test_triplet_identical_embeddings_give_margin():
    emb = torch.ones(6, 128, dtype=torch.float64)
    assert batch_hard_triplet_loss(emb, [0, 0, 1, 1, 2, 2], 0.3).item() == pytest.approx(0.3, abs=1e-15)


def test_triplet_1d_example():
    emb = torch.tensor([[0.0], [2.0], [1.0]], dtype=torch.float64)
    loss, info = batch_hard_triplet_loss(emb, [1, 1, 2], 0.3, return_info=True)
    assert info.per_anchor[0].item() == pytest.approx(1.3, abs=1e-12)
    assert info.n_skipped == 1           # the lone id-2 image has no positive
    oracle_loss, _, _ = triplet_oracle(emb.numpy(), [1, 1, 2], 0.3)
    assert loss.item() == pytest.approx(oracle_loss, abs=1e-12)


def test_triplet_hardest_pair_selection():
    # anchor at 0; positives at distance 1 and 3; negatives at distance 2 and 5
    emb = torch.tensor([[0.0], [1.0], [-3.0], [2.0], [-5.0]], dtype=torch.float64)
    _, info = batch_hard_triplet_loss(emb, [0, 0, 0, 1, 1], 0.3, return_info=True)
    assert (info.positive[0].item(), info.negative[0].item()) == (2, 3)
    assert info.per_anchor[0].item() == pytest.approx(1.3, abs=1e-12)


def test_triplet_errors():
    with pytest.raises(ValueError, match="single class"):
        batch_hard_triplet_loss(torch.zeros(3, 2), [1, 1, 1])
    with pytest.raises(ValueError, match="two or more"):
        batch_hard_triplet_loss(torch.zeros(3, 2), [1, 2, 3])


@st.composite
def triplet_batches(draw):
    b = draw(st.integers(3, 32))
    n_cls = draw(st.integers(2, max(2, b // 2)))
    labels = draw(arrays(np.int64, b, elements=st.integers(0, n_cls - 1)))
    counts = np.bincount(labels)
    assume((counts >= 2).any() and (counts > 0).sum() >= 2)
    dim = draw(st.integers(1, 8))
    emb = draw(arrays(np.float64, (b, dim), elements=st.floats(-3, 3)))
    return emb, labels


@settings(max_examples=100, deadline=None)
@given(batch=triplet_batches())
def test_triplet_matches_brute_force(batch):
    emb, labels = batch
    loss, info = batch_hard_triplet_loss(torch.from_numpy(emb), torch.from_numpy(labels), 0.3, True)
    o_loss, o_pos, _ = triplet_oracle(emb, labels, 0.3)
    assert abs(loss.item() - o_loss) <= 1e-9
    # hardest distances agree even where ties make the chosen index ambiguous
    d = lambda i, j: float(np.linalg.norm(emb[i] - emb[j]))
    for a, p in enumerate(o_pos):
        if p >= 0:
            assert d(a, info.positive[a].item()) == pytest.approx(d(a, p), abs=1e-12)


@settings(max_examples=50, deadline=None)
@given(batch=triplet_batches(), seed=st.integers(0, 2 ** 31), shift=st.floats(-100, 100))
def test_triplet_isometry_invariance(batch, seed, shift):
    emb, labels = batch
    dim = emb.shape[1]
    rot = special_ortho_group.rvs(dim, random_state=seed) if dim > 1 else np.array([[-1.0]])
    moved = emb @ rot.T + shift
    a = batch_hard_triplet_loss(torch.from_numpy(emb), labels, 0.3).item()
    b = batch_hard_triplet_loss(torch.from_numpy(moved), labels, 0.3).item()
    assert abs(a - b) <= 1e-9


def test_composite_examples():
    assert dual_classification_loss(2.0, 1.0, 1.0) == pytest.approx(3.0, abs=1e-12)
    assert dual_classification_loss(2.0, 1.0, PRESETS["market2duke"].alpha) == pytest.approx(3.4, abs=1e-9)
    assert dual_classification_loss(2.0, 1.0, 0.0) == 2.0
    w = PRESETS["duke2market"]
    assert total_triplet_loss(1, 1, 1, w.beta1, w.beta2, w.beta3) == pytest.approx(1.9, abs=1e-9)
    assert total_triplet_loss(0, 0, 0, w.beta1, w.beta2, w.beta3) == 0
    assert total_triplet_loss(0.7, 5, 9, 1, 0, 0) == 0.7
    assert total_loss(3.0, 1.9, w.gamma1, w.gamma2) == pytest.approx(3.02, abs=1e-9)
    assert total_loss(3.0, 1.9, 1, 0) == 3.0
    assert total_loss(0, 0, 0.5, 0.8) == 0


@given(x=st.lists(st.floats(-1e3, 1e3), min_size=6, max_size=6),
       y=st.lists(st.floats(-1e3, 1e3), min_size=6, max_size=6),
       w=st.lists(st.floats(0, 5), min_size=6, max_size=6))
def test_composites_are_linear(x, y, w):
    def full(c):
        dual = dual_classification_loss(c[0], c[1], w[0])
        tri = total_triplet_loss(c[2], c[3], c[4], w[1], w[2], w[3])
        return total_loss(dual, tri, w[4], w[5])
    s = [a + b for a, b in zip(x, y)]
    assert full(s) == pytest.approx(full(x) + full(y), rel=1e-9, abs=1e-6)


def test_presets():
    assert PRESETS["duke2market"] == LossWeights(1, 0.9, 0.8, 0.2, 0.5, 0.8, 0.3)
    assert PRESETS["market2duke"] == LossWeights(1.4, 1, 1, 0.2, 0.5, 0.6, 0.3)
    with pytest.raises(ValueError):
        LossWeights(alpha=-0.1)
