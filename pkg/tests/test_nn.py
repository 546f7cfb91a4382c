import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from efformer.nn import (FFN, LayerNorm, Linear, Module, MultiHeadAttention, count_scores, glorot,
                         read_checkpoint, save_checkpoint)
from efformer.tensor import Tensor, grad_check, mul, tsum


def straight_line_attention(att: MultiHeadAttention, xq, xk, xv, mask=None):
    """Per-head, per-query loops with scalar exp; shares nothing with the vectorized path."""
    H, dh = att.heads, att.head_dim

    def fc(lin, x):
        W, b = lin.weight.data, lin.bias.data
        return [[sum(x[i][a] * W[a][j] for a in range(len(x[i]))) + b[j] for j in range(W.shape[1])]
                for i in range(len(x))]

    q, k, v = fc(att.f_q, xq.tolist()), fc(att.f_k, xk.tolist()), fc(att.f_v, xv.tolist())
    nq, nk = len(q), len(k)
    merged = [[0.0] * (H * dh) for _ in range(nq)]
    for h in range(H):
        lo = h * dh
        for i in range(nq):
            logits = []
            for j in range(nk):
                if mask is not None and mask[i][j]:
                    logits.append(None)
                    continue
                logits.append(sum(q[i][lo + c] * k[j][lo + c] for c in range(dh)) / math.sqrt(dh))
            top = max(x for x in logits if x is not None)
            ex = [0.0 if x is None else math.exp(x - top) for x in logits]
            z = sum(ex)
            for c in range(dh):
                merged[i][lo + c] = sum(ex[j] / z * v[j][lo + c] for j in range(nk))
    out = fc(att.f_o, merged)
    return np.array(out) + xq


@pytest.fixture
def att(rng):
    return MultiHeadAttention(4, 2, 3, rng)


def test_attention_matches_straight_line(att, rng):
    xq, xk, xv = (rng.standard_normal((2, 4)) for _ in range(3))
    out = att(Tensor(xq), Tensor(xk), Tensor(xv)).data
    assert np.max(np.abs(out - straight_line_attention(att, xq, xk, xv))) < 1e-10


def test_attention_matches_straight_line_with_mask(att, rng):
    xq, xk, xv = rng.standard_normal((3, 4)), rng.standard_normal((5, 4)), rng.standard_normal((5, 4))
    mask = rng.random((3, 5)) < 0.5
    mask[:, 2] = False
    out = att(Tensor(xq), Tensor(xk), Tensor(xv), mask).data
    assert np.max(np.abs(out - straight_line_attention(att, xq, xk, xv, mask))) < 1e-10


def _identity_attention(D):
    att = MultiHeadAttention(D, 1, D, np.random.default_rng(0))
    for lin in (att.f_q, att.f_k, att.f_v, att.f_o):
        lin.weight.data = np.eye(D)
        lin.bias.data = np.zeros(D)
    return att


def test_single_key_output_is_value_plus_query(rng):
    att = _identity_attention(3)
    xq, xk, xv = (rng.standard_normal((1, 3)) for _ in range(3))
    assert np.allclose(att(Tensor(xq), Tensor(xk), Tensor(xv)).data, xv + xq, atol=1e-15)


def test_identical_keys_give_uniform_weights(att, rng):
    k = rng.standard_normal((1, 4))
    w = att.weights(Tensor(rng.standard_normal((3, 4))), Tensor(np.vstack([k, k]))).data
    assert np.array_equal(w, np.full_like(w, 0.5))


def test_weights_rows_sum_to_one_and_respect_mask(att, rng):
    mask = np.array([[False, True, False], [True, True, False]])
    w = att.weights(Tensor(rng.standard_normal((2, 4))), Tensor(rng.standard_normal((3, 4))), mask).data
    assert np.allclose(w.sum(-1), 1.0, atol=1e-12)
    assert np.all(w[:, mask] == 0.0)


def test_fully_masked_row_is_an_error(att, rng):
    with pytest.raises(ValueError):
        att.weights(Tensor(rng.standard_normal((2, 4))), Tensor(rng.standard_normal((2, 4))),
                    np.array([[True, True], [False, True]]))


def test_residual_invariant_to_key_logit_shift(rng):
    # a key-bias change b adds q_i . b to every logit of row i, a per-row constant
    att = MultiHeadAttention(4, 2, 2, rng)
    xq, xk, xv = rng.standard_normal((2, 4)), rng.standard_normal((3, 4)), rng.standard_normal((3, 4))
    base = att(Tensor(xq), Tensor(xk), Tensor(xv)).data - xq
    att.f_k.bias.data = att.f_k.bias.data + rng.standard_normal(4) * 5
    shifted = att(Tensor(xq), Tensor(xk), Tensor(xv)).data - xq
    assert np.max(np.abs(base - shifted)) < 1e-10


def test_permutation_equivariance(att, rng):
    xq, xk, xv = rng.standard_normal((3, 4)), rng.standard_normal((5, 4)), rng.standard_normal((5, 4))
    out = att(Tensor(xq), Tensor(xk), Tensor(xv)).data
    p = rng.permutation(5)
    out_kv = att(Tensor(xq), Tensor(xk[p]), Tensor(xv[p])).data
    assert np.max(np.abs(out - out_kv)) < 1e-12
    r = rng.permutation(3)
    out_q = att(Tensor(xq[r]), Tensor(xk), Tensor(xv)).data
    assert np.max(np.abs(out[r] - out_q)) < 1e-12


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**31 - 1), st.integers(2, 6))
def test_forbidden_key_cannot_leak(seed, nk):
    rng = np.random.default_rng(seed)
    att = MultiHeadAttention(4, 2, 2, rng)
    xq, xk, xv = rng.standard_normal((3, 4)), rng.standard_normal((nk, 4)), rng.standard_normal((nk, 4))
    j = int(rng.integers(nk))
    mask = np.zeros((3, nk), bool)
    mask[:, j] = True
    out = att(Tensor(xq), Tensor(xk), Tensor(xv), mask).data
    xk2, xv2 = xk.copy(), xv.copy()
    xk2[j] += rng.standard_normal(4) * 100
    xv2[j] += rng.standard_normal(4) * 100
    out2 = att(Tensor(xq), Tensor(xk2), Tensor(xv2), mask).data
    assert np.array_equal(out, out2)


def test_attention_gradient(rng):
    att = MultiHeadAttention(4, 2, 2, rng)
    mask = np.array([[False, True, False], [False, False, False]])
    w = Tensor(rng.standard_normal((2, 4)))
    params = att.parameters()
    xq, xk = Tensor(rng.standard_normal((2, 4))), Tensor(rng.standard_normal((3, 4)))
    rep = grad_check(lambda q, k, *ps: tsum(mul(att(q, k, k, mask), w)), [xq, xk] + params)
    assert rep.passed, rep


def test_layer_norm_examples():
    ln = LayerNorm(3)
    ln.offset.data = np.array([0.5, -1.0, 2.0])
    assert np.allclose(ln(Tensor([[4.0, 4.0, 4.0]])).data, [[0.5, -1.0, 2.0]])
    ln2 = LayerNorm(2, eps=1e-12)
    assert np.allclose(ln2(Tensor([[1.0, -1.0]])).data, [[1.0, -1.0]], atol=1e-10)
    with pytest.raises(ValueError):
        LayerNorm(2, eps=0.0)


def test_layer_norm_gradient(rng):
    ln = LayerNorm(4)
    ln.gain.data = rng.standard_normal(4)
    w = Tensor(rng.standard_normal((2, 4)))
    rep = grad_check(lambda x, g, b: tsum(mul(ln(x), w)), [Tensor(rng.standard_normal((2, 4))), ln.gain, ln.offset])
    assert rep.passed, rep


def test_linear_examples(rng):
    lin = Linear(3, 2, rng)
    lin.weight.data = np.zeros((3, 2))
    lin.bias.data = np.array([1.5, -2.0])
    assert np.array_equal(lin(Tensor(rng.standard_normal((4, 3)))).data, np.tile([1.5, -2.0], (4, 1)))
    ident = Linear(3, 3, rng)
    ident.weight.data = np.eye(3)
    ident.bias.data = np.zeros(3)
    x = rng.standard_normal((2, 3))
    assert np.array_equal(ident(Tensor(x)).data, x)


def test_ffn_and_linear_gradients(rng):
    ffn = FFN(3, 5, rng, slope=0.1)
    w = Tensor(rng.standard_normal((2, 3)))
    rep = grad_check(lambda x, *ps: tsum(mul(ffn(x), w)), [Tensor(rng.standard_normal((2, 3)))] + ffn.parameters())
    assert rep.passed, rep


def test_glorot_bounds():
    W = glorot(np.random.default_rng(0), 30, 50)
    a = math.sqrt(6 / 80)
    assert W.shape == (30, 50) and np.abs(W).max() <= a and np.abs(W).max() > 0.9 * a


class Pair(Module):
    def __init__(self, rng):
        self.a = Linear(2, 3, rng)
        self.b = LayerNorm(3)


def test_checkpoint_round_trip(tmp_path, rng):
    m = Pair(rng)
    save_checkpoint(tmp_path / "m.efck", m, {"tag": "x"})
    meta, state = read_checkpoint(tmp_path / "m.efck")
    assert meta == {"tag": "x"}
    assert list(state) == ["a.weight", "a.bias", "b.gain", "b.offset"]
    for (name, p), (_, arr) in zip(m.named_parameters(), state.items()):
        assert np.array_equal(arr, p.data.astype(np.float32).astype(np.float64))
    blob = (tmp_path / "m.efck").read_bytes()
    assert blob[:4] == b"EFCK"
    other = Pair(np.random.default_rng(99))
    other.load_state_dict(state)
    assert np.allclose(other.a.weight.data, m.a.weight.data, atol=1e-7)


def test_checkpoint_rejects_bad_files(tmp_path, rng):
    (tmp_path / "bad").write_bytes(b"NOPE1234")
    with pytest.raises(ValueError):
        read_checkpoint(tmp_path / "bad")
    m = Pair(rng)
    with pytest.raises(KeyError):
        m.load_state_dict({"a.weight": np.zeros((2, 3))})


def test_score_counter_counts_per_head_entries(att, rng):
    with count_scores() as c:
        att(Tensor(rng.standard_normal((2, 3, 4))), Tensor(rng.standard_normal((2, 5, 4))),
            Tensor(rng.standard_normal((2, 5, 4))))
    assert c.counts == [15]
