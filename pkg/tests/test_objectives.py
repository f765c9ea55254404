import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from absorbkit.gating import GateParams, causal_mask, gate_projections, oracle_mask
from absorbkit.model import ModelConfig, ModelParams, forward
from absorbkit.gating import DENSE
from absorbkit.objectives import (
    MetricsRecord,
    bce_distill_loss,
    efficiency,
    entropy_ratio,
    gate_f1,
    kl_distill_loss,
    perplexity,
    topk_mass,
)
from absorbkit.tensor import Tensor, backward, no_grad, softmax_rows

from conftest import grad_check


# --------------------------------------------------------------------------
# scalar reference implementations (plain Python loops over one n x n matrix)


def ref_rows(n):
    return [(q, list(range(q + 1))) for q in range(n)]


def ref_topk_set(row, k):
    order = sorted(range(len(row)), key=lambda j: (-row[j], j))
    return set(order[:k])


def ref_topk_mass(P, k):
    vals = []
    for q, keys in ref_rows(len(P)):
        row = sorted((P[q][j] for j in keys), reverse=True)
        vals.append(sum(row[: min(k, q + 1)]))
    return sum(vals) / len(vals)


def ref_entropy_ratio(P):
    vals = []
    for q, keys in ref_rows(len(P)):
        if q == 0:
            continue
        h = -sum(P[q][j] * math.log(P[q][j]) for j in keys if P[q][j] > 0)
        vals.append(h / math.log(q + 1))
    return sum(vals) / len(vals)


def ref_gate_f1(G, P, k):
    inter = size = 0
    for q, keys in ref_rows(len(P)):
        a = ref_topk_set([G[q][j] for j in keys], k)
        b = ref_topk_set([P[q][j] for j in keys], k)
        inter += len(a & b)
        size += min(k, q + 1)
    return inter / size


def ref_kl(P, G):
    total = 0.0
    for q, keys in ref_rows(len(P)):
        z = sum(math.exp(G[q][j]) for j in keys)
        for j in keys:
            if P[q][j] > 0:
                total += P[q][j] * math.log(P[q][j] / (math.exp(G[q][j]) / z))
    return total / len(P)


def ref_bce(G, M):
    total, count = 0.0, 0
    for q, keys in ref_rows(len(G)):
        for j in keys:
            s = 1.0 / (1.0 + math.exp(-G[q][j]))
            y = float(M[q][j])
            total += -(y * math.log(s) + (1 - y) * math.log(1 - s))
            count += 1
    return total / count


def causal_probs(rng, shape, scale=1.5):
    n = shape[-1]
    return softmax_rows(Tensor(np.where(causal_mask(n), rng.normal(scale=scale, size=shape), -np.inf))).data


# --------------------------------------------------------------------------
# oracles on random 4x4 instances


def test_metric_oracles_on_random_4x4(rng):
    for _ in range(50):
        P = causal_probs(rng, (4, 4))
        G = rng.normal(size=(4, 4))
        Pl, Gl = P.tolist(), G.tolist()
        for k in (1, 2, 3, 4):
            assert abs(topk_mass(P, k) - ref_topk_mass(Pl, k)) <= 1e-12
            assert abs(gate_f1(G, P, k) - ref_gate_f1(Gl, Pl, k)) <= 1e-12
            M = oracle_mask(P, k)
            assert abs(bce_distill_loss(Tensor(G), M).item() - ref_bce(Gl, M.tolist())) <= 1e-12
        assert abs(entropy_ratio(P) - ref_entropy_ratio(Pl)) <= 1e-12
        assert abs(kl_distill_loss(P, Tensor(G)).item() - ref_kl(Pl, Gl)) <= 1e-12


# --------------------------------------------------------------------------
# perplexity


def test_perplexity_examples():
    assert abs(perplexity(np.zeros((1, 3, 256)), np.array([[1, 2, 3]])) - 256.0) < 1e-9
    logits = np.full((1, 2, 5), -1e3)
    logits[0, 0, 2] = logits[0, 1, 4] = 1e3
    assert perplexity(logits, np.array([[2, 4]])) == 1.0
    lg = np.array([[[0.0, 1.0], [2.0, -1.0]]])
    ce = (-math.log(math.exp(1) / (1 + math.exp(1))) - math.log(math.exp(2) / (math.exp(2) + math.exp(-1)))) / 2
    assert abs(perplexity(lg, np.array([[1, 0]])) - math.exp(ce)) <= 1e-12


# --------------------------------------------------------------------------
# concentration


def test_topk_mass_examples():
    n = 6
    onehot = np.zeros((n, n))
    onehot[np.arange(n), np.arange(n) // 2] = 1.0
    assert topk_mass(onehot, 1) == 1.0
    # uniform causal rows: row q keeps min(k, q+1)/(q+1) of its mass
    w, k = 5, 2
    P = np.tril(np.ones((w, w))) / np.arange(1, w + 1)[:, None]
    expect = np.mean([min(k, q + 1) / (q + 1) for q in range(w)])
    assert abs(topk_mass(P, k) - expect) < 1e-15
    assert topk_mass(P, w) == pytest.approx(1.0, abs=1e-15)


@settings(max_examples=50, deadline=None)
@given(st.integers(1, 8), st.integers(0, 2**31 - 1))
def test_topk_mass_monotone_in_k_and_full_at_width(n, seed):
    P = causal_probs(np.random.default_rng(seed), (2, n, n))
    masses = [topk_mass(P, k) for k in range(1, n + 1)]
    assert all(b >= a - 1e-15 for a, b in zip(masses, masses[1:]))
    assert abs(masses[-1] - 1.0) <= 1e-12
    assert 0.0 <= masses[0] <= 1.0


def test_entropy_ratio_limits():
    n = 5
    onehot = np.zeros((n, n))
    onehot[:, 0] = 1.0
    assert entropy_ratio(onehot) == 0.0
    uniform = np.tril(np.ones((n, n))) / np.arange(1, n + 1)[:, None]
    assert abs(entropy_ratio(uniform) - 1.0) < 1e-12


# --------------------------------------------------------------------------
# gate F1


def test_gate_f1_limits(rng):
    P = causal_probs(rng, (2, 6, 6))
    assert gate_f1(P, P, 2) == 1.0
    assert gate_f1(np.log(P + 1e-300) * 3 + 1, P, 2) == 1.0
    n = 4
    P = np.zeros((n, n))
    G = np.zeros((n, n))
    P[np.arange(n), 0] = 1.0
    G[np.arange(1, n), np.arange(1, n)] = 1.0
    # row 0 has a single valid key so both sets are {0}; other rows disagree
    assert abs(gate_f1(G, P, 1) - 1 / 4) < 1e-15


def test_gate_f1_macro_and_layer_lists(rng):
    P = [causal_probs(rng, (2, 5, 5)) for _ in range(2)]
    G = [rng.normal(size=(2, 5, 5)) for _ in range(2)]
    joint = gate_f1(G, P, 2)
    assert 0.0 <= joint <= 1.0
    assert 0.0 <= gate_f1(G[0], P[0], 2, average="macro") <= 1.0
    with pytest.raises(ValueError):
        gate_f1(G[0], P[0], 2, average="weighted")


def test_gate_f1_random_gate_matches_chance():
    rng = np.random.default_rng(8)
    n, k, draws = 8, 2, 4000
    P = causal_probs(rng, (draws, n, n))
    G = rng.random((draws, n, n))
    from absorbkit.objectives import gate_f1_counts

    inter, budget = gate_f1_counts(G, P, k)
    for q in range(n):
        w = q + 1
        per_row = inter[:, q] / budget[:, q]
        expect = min(k, w) / w
        sigma = per_row.std(ddof=1) / math.sqrt(draws)
        assert abs(per_row.mean() - expect) <= 3 * sigma + 1e-12


# --------------------------------------------------------------------------
# distillation losses


def test_kl_examples(rng):
    P = causal_probs(rng, (3, 5, 5))
    G = np.where(causal_mask(5), np.log(np.where(P > 0, P, 1.0)), 0.0) + 4.2
    assert abs(kl_distill_loss(P, Tensor(G)).item()) < 1e-12
    U = np.tril(np.ones((5, 5))) / np.arange(1, 6)[:, None]
    assert abs(kl_distill_loss(U, Tensor(np.zeros((5, 5)))).item()) < 1e-12


def test_kl_three_position_row():
    P = np.array([[1.0, 0, 0], [0.3, 0.7, 0], [0.2, 0.5, 0.3]])
    G = np.array([[0.0, 0, 0], [1.0, -1.0, 0], [0.5, 0.1, -0.4]])
    assert abs(kl_distill_loss(P, Tensor(G)).item() - ref_kl(P.tolist(), G.tolist())) <= 1e-12


@settings(max_examples=60, deadline=None)
@given(st.integers(1, 6), st.integers(0, 2**31 - 1))
def test_kl_is_nonnegative(n, seed):
    rng = np.random.default_rng(seed)
    assert kl_distill_loss(causal_probs(rng, (2, n, n)), Tensor(rng.normal(size=(2, n, n)))).item() >= -1e-15


def test_bce_examples():
    M = causal_mask(3) & np.eye(3, dtype=bool)
    assert abs(bce_distill_loss(Tensor(np.zeros((3, 3))), M).item() - math.log(2)) < 1e-15
    sat = np.where(M, 40.0, -40.0)
    assert bce_distill_loss(Tensor(sat), M).item() < 1e-15
    G = np.array([[0.3, 0.0], [-1.2, 2.0]])
    Y = np.array([[1, 0], [0, 1]])
    s = lambda z: 1 / (1 + math.exp(-z))
    hand = -(math.log(s(0.3)) + math.log(1 - s(-1.2)) + math.log(s(2.0))) / 3
    assert abs(bce_distill_loss(Tensor(G), Y).item() - hand) <= 1e-12


def test_distillation_gradients(rng):
    for _ in range(20):
        P = causal_probs(rng, (2, 4, 4))
        M = oracle_mask(P, 2)
        G = rng.normal(size=(2, 4, 4))
        assert grad_check(lambda g: kl_distill_loss(P, g), [G], rng=rng) < 1e-4
        assert grad_check(lambda g: bce_distill_loss(g, M), [G], rng=rng) < 1e-4


def test_distillation_leaves_model_gradients_zero(rng):
    cfg = ModelConfig(n_layers=2, d_model=8, n_heads=2, d_ff=16, vocab_size=9, seq_len=5, d_gate=2)
    params = ModelParams.init(cfg, rng, std=0.3)
    gates = GateParams.init(2, 2, 8, 2, rng)
    toks = rng.integers(0, 9, size=(2, 5))
    with no_grad():
        _, tr = forward(params, None, DENSE, toks, trace=True)
    for loss_fn in (lambda g, p: kl_distill_loss(p, g), lambda g, p: bce_distill_loss(g, oracle_mask(p, 2))):
        for layer in range(2):
            backward(loss_fn(gate_projections(Tensor(tr.inputs[layer]), gates, layer), tr.probs[layer]))
    assert all(np.all(t.grad == 0.0) for _, t in params.named_tensors())
    assert all(np.linalg.norm(t.grad) > 0 for t in gates.tensors())


# --------------------------------------------------------------------------
# efficiency and records


def test_efficiency():
    assert efficiency(40.0, 50.0, 40.0).raw == 1.0
    assert efficiency(50.0, 50.0, 40.0).raw == 0.0
    e = efficiency(38.0, 50.0, 40.0)
    assert e.raw == pytest.approx(1.2) and e.clamped == 1.0
    bad = efficiency(40.0, 40.0, 40.0)
    assert not bad.defined and math.isnan(bad.raw)


def test_metrics_record_validation():
    MetricsRecord(step=0, val_ppl=1.0, topk_mass=[0.3], entropy_ratio=[1.0], gate_f1=0.5)
    with pytest.raises(ValueError):
        MetricsRecord(step=0, val_ppl=0.5)
    with pytest.raises(ValueError):
        MetricsRecord(step=0, val_ppl=2.0, topk_mass=[1.5])
