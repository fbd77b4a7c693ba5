import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st

from partalign.losses import (NonFiniteLossError, cosine_similarity_matrix, id_loss, itc_loss,
                              sdm_loss, total_loss)
from oracles import fd_relative_error, id_oracle, itc_oracle, sdm_oracle


def _classifier(d, c, weight=None, bias=None):
    lin = torch.nn.Linear(d, c)
    if weight is not None:
        with torch.no_grad():
            lin.weight.copy_(torch.as_tensor(weight))
            lin.bias.copy_(torch.as_tensor(bias))
    return lin


# -- ID loss ---------------------------------------------------------------


def test_id_uniform_classifier_gives_log_c(float64):
    lin = _classifier(4, 5, np.zeros((5, 4)), np.zeros(5))
    x = torch.randn(3, 4)
    loss = id_loss(x, torch.randn(3, 4), torch.tensor([0, 3, 4]), lin)
    assert loss.item() == pytest.approx(math.log(5), abs=1e-12)


def test_id_peaked_logits_approach_zero(float64):
    lin = _classifier(2, 2, [[100.0, 0.0], [0.0, 100.0]], [0.0, 0.0])
    x = torch.tensor([[1.0, 0.0], [0.0, 1.0]])
    assert id_loss(x, x, torch.tensor([0, 1]), lin).item() < 1e-30


def test_id_hand_case(float64):
    # N=2, C=3; identity weights make the features themselves the logits.
    lin = _classifier(3, 3, np.eye(3), np.zeros(3))
    img = [[1.0, 2.0, 0.5], [0.0, -1.0, 3.0]]
    txt = [[2.0, 0.0, 0.0], [1.0, 1.0, 1.0]]
    labels = [1, 2]
    lse = lambda row: math.log(sum(math.exp(v) for v in row))
    by_hand = ((lse(img[0]) - 2.0 + lse(img[1]) - 3.0) / 2
               + (lse(txt[0]) - 0.0 + math.log(3.0)) / 2) / 2
    got = id_loss(torch.tensor(img), torch.tensor(txt), torch.tensor(labels), lin).item()
    assert got == pytest.approx(by_hand, abs=1e-12)
    assert got == pytest.approx(id_oracle(img, txt, labels), abs=1e-12)


def test_id_rejects_out_of_range_label(float64):
    with pytest.raises(ValueError):
        id_loss(torch.randn(2, 3), torch.randn(2, 3), torch.tensor([0, 4]), _classifier(3, 4))


def test_id_batch_permutation_invariant(float64, rng):
    lin = _classifier(4, 3)
    img, txt = torch.randn(5, 4), torch.randn(5, 4)
    labels = torch.tensor([0, 1, 2, 1, 0])
    perm = torch.as_tensor(rng.permutation(5))
    a = id_loss(img, txt, labels, lin)
    b = id_loss(img[perm], txt[perm], labels[perm], lin)
    assert a.item() == pytest.approx(b.item(), abs=1e-12)


# -- SDM -------------------------------------------------------------------


def test_sdm_distinct_labels_sharp_diagonal_goes_to_zero(float64):
    S = torch.eye(4) * 2 - 1  # diag 1, off-diagonal -1
    assert sdm_loss(S, torch.arange(4), 0.01).item() < 1e-6


def test_sdm_same_identity_constant_similarity_is_zero(float64):
    S = torch.full((2, 2), 0.3)
    assert sdm_loss(S, torch.tensor([5, 5]), 1.0).item() == pytest.approx(0.0, abs=1e-7)


def test_sdm_three_sample_oracle(float64, rng):
    S = rng.uniform(-1, 1, (3, 3))
    labels = [0, 0, 1]
    got = sdm_loss(torch.tensor(S), torch.tensor(labels), 1.0).item()
    assert got == pytest.approx(sdm_oracle(S.tolist(), labels, 1.0), abs=1e-10)


def test_sdm_rejects_bad_temperature(float64):
    with pytest.raises(ValueError):
        sdm_loss(torch.zeros(2, 2), torch.tensor([0, 1]), 0.0)


@settings(max_examples=40, deadline=None)
@given(n=st.integers(2, 5), shift=st.floats(-3, 3), seed=st.integers(0, 10_000))
def test_sdm_shift_invariant_and_nonnegative(n, shift, seed):
    g = np.random.default_rng(seed)
    S = torch.tensor(g.uniform(-1, 1, (n, n)), dtype=torch.float64)
    labels = torch.tensor(g.integers(0, 3, n))
    a = sdm_loss(S, labels, 0.1)
    b = sdm_loss(S + shift, labels, 0.1)
    assert a.item() == pytest.approx(b.item(), abs=1e-9)
    assert a.item() >= -1e-7


# -- ITC -------------------------------------------------------------------


def test_itc_orthonormal_pairs_closed_form(float64):
    e = torch.eye(2)
    loss = itc_loss(e, e, 1.0).loss.item()
    assert loss == pytest.approx(-math.log(math.e / (math.e + 1)), abs=1e-12)
    assert loss == pytest.approx(0.3133, abs=1e-4)


def test_itc_repeated_row_gives_log_m(float64):
    row = torch.tensor([[0.3, -0.2, 0.9]]).repeat(5, 1)
    assert itc_loss(row, row, 0.07).loss.item() == pytest.approx(math.log(5), abs=1e-12)


def test_itc_random_oracle(float64, rng):
    left, right = rng.normal(size=(4, 8)), rng.normal(size=(4, 8))
    got = itc_loss(torch.tensor(left), torch.tensor(right), 0.3).loss.item()
    assert got == pytest.approx(itc_oracle(left.tolist(), right.tolist(), 0.3), abs=1e-10)


def test_itc_single_pair_is_degenerate(float64):
    result = itc_loss(torch.randn(1, 4), torch.randn(1, 4), 0.1)
    assert result.degenerate and result.loss.item() == 0.0


@settings(max_examples=30, deadline=None)
@given(m=st.integers(2, 5), seed=st.integers(0, 10_000))
def test_itc_rotation_and_scale_invariant(m, seed):
    g = np.random.default_rng(seed)
    left = torch.tensor(g.normal(size=(m, 6)))
    right = torch.tensor(g.normal(size=(m, 6)))
    q, _ = torch.linalg.qr(torch.tensor(g.normal(size=(6, 6))))
    scale = torch.tensor(g.uniform(0.1, 10, (m, 1)))
    a = itc_loss(left, right, 0.2).loss
    b = itc_loss(left @ q * scale, right @ q, 0.2).loss
    assert a.item() == pytest.approx(b.item(), abs=1e-9)


# -- total -----------------------------------------------------------------

PAPER_WEIGHTS = (0.5, 1.0, 0.2, 0.5)


def _parts(a, b, c, d):
    return {"id": torch.tensor(a), "sdm": torch.tensor(b), "itc": torch.tensor(c),
            "biirr": torch.tensor(d)}


def test_total_loss_examples():
    assert total_loss(_parts(1., 1., 1., 1.), PAPER_WEIGHTS).item() == pytest.approx(2.2)
    assert total_loss(_parts(0., 0., 0., 0.), PAPER_WEIGHTS).item() == 0.0
    assert total_loss(_parts(3., 7., 7., 7.), (1, 0, 0, 0)).item() == 3.0


def test_total_loss_names_nan_component():
    with pytest.raises(NonFiniteLossError) as err:
        total_loss(_parts(1., 1., float("nan"), 1.), PAPER_WEIGHTS)
    assert err.value.component == "itc"


@given(st.lists(st.floats(0, 10), min_size=4, max_size=4), st.floats(0, 5), st.integers(0, 3))
def test_total_loss_linear_in_each_component(values, delta, which):
    base = total_loss(_parts(*values), PAPER_WEIGHTS).item()
    bumped = list(values)
    bumped[which] += delta
    got = total_loss(_parts(*bumped), PAPER_WEIGHTS).item()
    assert got - base == pytest.approx(PAPER_WEIGHTS[which] * delta, abs=1e-4)


# -- gradients --------------------------------------------------------------


def test_loss_gradients_match_finite_differences(float64, rng):
    img = torch.randn(4, 8, requires_grad=True)
    txt = torch.randn(4, 8, requires_grad=True)
    labels = torch.tensor([0, 0, 1, 2])
    lin = _classifier(8, 3)
    checks = {
        "id": (lambda: id_loss(img, txt, labels, lin), [img, txt, lin.weight]),
        "sdm": (lambda: sdm_loss(cosine_similarity_matrix(img, txt), labels, 0.5), [img, txt]),
        "itc": (lambda: itc_loss(img, txt, 0.5).loss, [img, txt]),
    }
    for name, (fn, tensors) in checks.items():
        assert fd_relative_error(fn, tensors, rng) < 1e-3, name


def test_itc_groups_drop_duplicate_negatives(float64, rng):
    left, right = rng.normal(size=(4, 5)), rng.normal(size=(4, 5))
    groups = torch.tensor([0, 1, 0, 2])
    got = itc_loss(torch.tensor(left), torch.tensor(right), 0.4, groups).loss.item()
    # by hand: rows 0 and 2 never see each other as negatives
    ln = lambda m: m / np.linalg.norm(m, axis=1, keepdims=True)
    S = ln(left) @ ln(right).T / 0.4
    allowed = ~((groups[:, None] == groups[None, :]).numpy() & ~np.eye(4, dtype=bool))
    total = 0.0
    for i in range(4):
        row = S[i][allowed[i]]
        col = S[:, i][allowed[:, i]]
        total += (math.log(np.exp(row).sum()) - S[i, i]) + (math.log(np.exp(col).sum()) - S[i, i])
    assert got == pytest.approx(total / 8, abs=1e-10)
    distinct = itc_loss(torch.tensor(left), torch.tensor(right), 0.4, torch.arange(4)).loss.item()
    assert distinct == pytest.approx(itc_oracle(left.tolist(), right.tolist(), 0.4), abs=1e-12)
