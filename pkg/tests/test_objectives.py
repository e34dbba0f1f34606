import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from mindcraft import model as M
from mindcraft import numcore as nc
from mindcraft.numcore.gradcheck import check_gradients
from mindcraft.objectives import (InsufficientBatch, LengthMismatch, LossWeights, NoPositive, ReplayBuffer,
                                  ReplayEntry, ZeroVector, atlas_loss, classify, entropy, episodic_loss,
                                  info_nce, info_nce_batch, mindcraft_loss, mine, soft_usage, st_crl_loss, total_loss,
                                  usage_entropy)

import suites
from conftest import P


def entry(qid, cls="c", ans=("a",), region=(0, 0), qtype="self_localization", ep="e0", t=None, scene=0):
    return ReplayEntry(ep, t if t is not None else hash(qid) % 1000, 0, qtype, cls, "f", region, ans, scene, qid)


# ---------------------------------------------------------------------------
# imitation + answering

def test_uniform_action_logits_give_log4():
    assert float(mindcraft_loss(P(np.zeros(4)), 2).data) == pytest.approx(math.log(4), abs=1e-12)


def test_zero_qa_weight_is_action_ce_only():
    rng = np.random.default_rng(0)
    a, ans = P(rng.normal(size=4)), P(rng.normal(size=(3, 7)))
    assert float(mindcraft_loss(a, 1, ans, [0, 2, 6], 0.0).data) == float(nc.cross_entropy(a, 1).data)


def test_qa_term_matches_direct_formula():
    rng = np.random.default_rng(1)
    a, ans = rng.normal(size=4), rng.normal(size=(3, 7))
    tgt = [0, 2, 6]

    def ce(z, k):
        return -(z[k] - np.log(np.sum(np.exp(z))))
    want = ce(a, 1) + 1.0 * np.mean([ce(ans[i], t) for i, t in enumerate(tgt)])
    assert float(mindcraft_loss(P(a), 1, P(ans), tgt, 1.0).data) == pytest.approx(want, abs=1e-12)


def test_answer_length_mismatch():
    with pytest.raises(LengthMismatch):
        mindcraft_loss(P(np.zeros(4)), 0, P(np.zeros((2, 5))), [1, 2, 3])


# ---------------------------------------------------------------------------
# InfoNCE

def test_info_nce_orthogonal_negatives():
    a = np.array([1.0, 0.0, 0.0])
    negs = np.array([[0.0, 1.0, 0.0], [0.0, 0.0, 1.0]])
    got = float(info_nce(a, a, negs, 1.0).data)
    assert got == pytest.approx(-math.log(math.e / (math.e + 2)), abs=1e-12)
    assert got == pytest.approx(0.5514, abs=1e-4)
    assert float(info_nce(a, a, negs, 0.07).data) < 1e-5


def test_info_nce_prefers_negative_equal_to_anchor():
    a = np.array([1.0, 0.0])
    assert float(info_nce(a, np.array([0.0, 1.0]), np.array([[1.0, 0.0]]), 1.0).data) > math.log(2)


def test_info_nce_matches_brute_force():
    assert suites.info_nce_oracle(n=300, seed=1) <= 1e-10


def test_info_nce_batch_matches_single_with_padding():
    rng = np.random.default_rng(4)
    a, p = rng.normal(size=(2, 5)), rng.normal(size=(2, 5))
    negs = np.zeros((2, 3, 5))
    negs[0] = rng.normal(size=(3, 5))
    negs[1, :1] = rng.normal(size=(1, 5))
    mask = np.array([[True, True, True], [True, False, False]])
    with np.errstate(divide="raise", invalid="raise"):
        got = info_nce_batch(nc.Tensor(a), nc.Tensor(p), nc.Tensor(negs), mask, 0.5).data
    for i, n in enumerate((3, 1)):
        want = float(info_nce(a[i], p[i], negs[i, :n], 0.5).data)
        assert got[i] == pytest.approx(want, abs=1e-12)


def test_info_nce_errors():
    with pytest.raises(ZeroVector):
        info_nce(np.zeros(3), np.ones(3), np.ones((1, 3)), 1.0)
    with pytest.raises(ValueError):
        info_nce(np.ones(3), np.ones(3), np.ones((1, 3)), 0.0)
    with pytest.raises(ValueError):
        info_nce(np.ones(3), np.ones(3), [], 1.0)


def test_detached_negatives_get_no_gradient():
    rng = np.random.default_rng(0)
    a, p, n = P(rng.normal(size=4)), P(rng.normal(size=4)), P(rng.normal(size=(2, 4)))
    info_nce(a, p, n, 0.5).backward()
    assert n.grad is None and np.linalg.norm(a.grad) > 0
    a.grad = None
    info_nce(a, p, n, 0.5, detach_negatives=False).backward()
    assert np.linalg.norm(n.grad) > 0


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_info_nce_non_negative(seed):
    rng = np.random.default_rng(seed)
    assert float(info_nce(rng.normal(size=5), rng.normal(size=5), rng.normal(size=(3, 5)), 0.3).data) >= 0


# ---------------------------------------------------------------------------
# mining

def test_single_matching_entry_is_positive():
    anchor = entry("a", ep="e0", t=0)
    other = entry("b", ep="e1", t=3)
    pos, _ = mine(ReplayBuffer([anchor, other]), anchor, (1, 1, 1), np.random.default_rng(0))
    assert pos is other


def test_spatial_and_semantic_classification():
    anchor = entry("a", cls="c1", ans=("x",), region=(0, 1), qtype="self_localization", t=0)
    spatial = entry("s", cls="c1", ans=("y",), region=(0, 2), qtype="self_localization", ep="e1", t=1)
    semantic = entry("m", cls="c2", ans=("z",), region=(0, 1), qtype="future_landmark", ep="e2", t=1)
    unrelated = entry("u", cls="c3", ans=("z",), region=(0, 5), qtype="future_landmark", ep="e3", t=1)
    assert classify(anchor, spatial) == "spatial"
    assert classify(anchor, semantic) == "semantic"
    assert classify(anchor, unrelated) == "unrelated"
    assert classify(anchor, anchor) is None


def test_no_positive_raises():
    anchor = entry("a", t=0)
    with pytest.raises(NoPositive):
        mine(ReplayBuffer([anchor, entry("b", cls="other", ep="e1", t=1)]), anchor, (1, 1, 1),
             np.random.default_rng(0))


def test_backfill_and_shortfall():
    anchor = entry("a", cls="c1", region=(0, 1), t=0)
    items = [anchor, entry("p", cls="c1", ep="e1", t=0)]
    items += [entry(f"u{i}", cls="c9", region=(0, 9), qtype="future_landmark", ep=f"x{i}", t=0) for i in range(5)]
    buf = ReplayBuffer(items)
    _, neg = mine(buf, anchor, (2, 1, 1), np.random.default_rng(0))
    assert len(neg.spatial) == 0 and len(neg.semantic) == 0 and len(neg.unrelated) == 4
    assert neg.shortfall == {"spatial": 2, "semantic": 1}
    _, neg = mine(buf, anchor, (2, 1, 1), np.random.default_rng(0), backfill=False)
    assert len(neg.unrelated) == 1


def test_mining_sound_over_random_buffers():
    checked, violations, mismatches = suites.mining_soundness(n_samples=5000, seed=3)
    assert violations == [] and mismatches == 0


# ---------------------------------------------------------------------------
# ST-CRL through the model

def _crl_setup(episodes):
    cfg = M.ModelConfig(d_model=16, heads=2, layers=1, k_frames=4, n_atlas=4, dtype="float64")
    p = M.init_params(cfg, 0)
    qs = [(ep, q) for ep in episodes[:4] for q in ep.queries]
    exps = [M.query_experience(ep, q, cfg) for ep, q in qs]
    return cfg, p, exps


def test_identical_positive_has_cosine_one(episodes):
    cfg, p, exps = _crl_setup(episodes)
    a = exps[0]
    out = M.forward_batch(p, cfg, [a, a])
    u, v = out.m_prime.data
    assert np.dot(u, v) / (np.linalg.norm(u) * np.linalg.norm(v)) == pytest.approx(1.0, abs=1e-12)
    loss, skipped = st_crl_loss(p, cfg, a, a, exps[1:4], 0.5)
    assert not skipped
    loss2, _ = st_crl_loss(p, cfg, a, exps[4], exps[1:4], 0.5)
    assert float(loss.data) < float(loss2.data)


def test_no_negatives_is_skipped(episodes):
    cfg, p, exps = _crl_setup(episodes)
    loss, skipped = st_crl_loss(p, cfg, exps[0], exps[1], [], 0.07)
    assert skipped and float(loss.data) == 0.0


def test_crl_gradient_reaches_atlas(episodes):
    cfg, p, exps = _crl_setup(episodes)
    loss, _ = st_crl_loss(p, cfg, exps[0], exps[1], exps[2:5], 0.07)
    loss.backward()
    assert np.linalg.norm(p["atlas"].grad) > 0


# ---------------------------------------------------------------------------
# atlas

def test_atlas_exact_codes_uniform_usage():
    codes = P(np.eye(4) * 50)
    loss = atlas_loss(codes.data.copy(), codes, gamma=0.1)
    # every feature sits on its own code and the others are far: usage is uniform
    assert float(loss.data) == pytest.approx(-0.1 * math.log(4), abs=1e-9)


def test_one_hot_usage_has_zero_entropy():
    assert float(entropy(nc.Tensor(np.array([1.0, 0.0, 0.0, 0.0]))).data) == pytest.approx(0.0, abs=1e-10)


def test_atlas_gradient_matches_finite_differences():
    rng = np.random.default_rng(0)
    feats, codes = rng.normal(size=(7, 5)), P(rng.normal(size=(4, 5)))
    errs = check_gradients(lambda: atlas_loss(feats, codes, 0.3, 1.0), [codes])
    assert errs["0"] <= 1e-4


def test_atlas_features_get_no_gradient():
    rng = np.random.default_rng(0)
    f, codes = P(rng.normal(size=(6, 3))), P(rng.normal(size=(4, 3)))
    atlas_loss(f, codes, 0.1).backward()
    assert f.grad is None and codes.grad is not None


def test_entropy_step_spreads_degenerate_codebook():
    rng = np.random.default_rng(0)
    feats = rng.normal(size=(32, 4))
    codes = P(np.tile(rng.normal(size=4), (8, 1)) + rng.normal(0, 1e-3, (8, 4)) + 2.0)
    before = usage_entropy(feats, codes)
    p, _ = soft_usage(feats, codes)
    h = entropy(p)
    nc.scale(h, -1.0).backward()
    codes.data -= 0.1 * codes.grad
    assert usage_entropy(feats, codes) > before


def test_atlas_toy_anti_collapse_single_seed():
    on, off = suites.atlas_toy(0.1, 7), suites.atlas_toy(0.0, 7)
    assert on >= 0.8 * math.log(16) and off <= 0.4 * math.log(16)


def test_empty_feature_batch():
    with pytest.raises(ValueError):
        atlas_loss(np.zeros((0, 3)), P(np.ones((2, 3))), 0.1)


# ---------------------------------------------------------------------------
# episodic discrimination

def test_single_episode_batch_insufficient():
    with pytest.raises(InsufficientBatch):
        episodic_loss(P(np.random.default_rng(0).normal(size=(4, 3))), np.zeros(4), 0.1, np.random.default_rng(0))


def test_episodic_constant_orthogonal_features():
    tau = 0.5
    f = np.array([[1.0, 0.0]] * 3 + [[0.0, 1.0]] * 3)
    owner = np.array([0, 0, 0, 1, 1, 1])
    got = float(episodic_loss(P(f), owner, tau, np.random.default_rng(0)).data)
    want = -math.log(math.exp(1 / tau) / (math.exp(1 / tau) + 3 * math.exp(0)))
    assert got == pytest.approx(want, abs=1e-12)


def test_episodic_zero_frames_excluded():
    f = np.array([[1.0, 0.0], [1.0, 0.1], [0.0, 0.0], [0.0, 1.0], [0.1, 1.0]])
    owner = np.array([0, 0, 0, 1, 1])
    assert np.isfinite(float(episodic_loss(P(f), owner, 0.5, np.random.default_rng(0)).data))


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_episodic_non_negative_and_gradcheck(seed):
    rng = np.random.default_rng(seed)
    f = P(rng.normal(size=(6, 3)))
    owner = np.array([0, 0, 1, 1, 2, 2])
    assert float(episodic_loss(f, owner, 0.5, np.random.default_rng(seed)).data) >= 0
    errs = check_gradients(lambda: episodic_loss(f, owner, 0.5, np.random.default_rng(seed)), [f])
    assert errs["0"] <= 1e-4


# ---------------------------------------------------------------------------
# trajectory objective

def test_total_loss_unit_example():
    assert suites.total_loss_worked_example() == pytest.approx(1.35, abs=1e-12)


def test_total_loss_action_only():
    w = LossWeights(lambda_c=0, lambda_s=0, lambda_r=0)
    assert float(total_loss([1.0, 2.0, 3.0], [5, 5, 5], [1, 1, 1], [7, 7, 7], 9.0, w).data) == 2.0


def test_total_loss_single_step_no_query():
    w = LossWeights()
    got = float(total_loss([1.5], [9.0], [0], [2.0], 3.0, w, 1).data)
    assert got == pytest.approx(1.5 + 0.2 * 2.0 + 0.1 * 3.0, abs=1e-12)


def test_total_loss_exact_oracle():
    assert suites.total_loss_oracle(n=100, seed=4) == 0
