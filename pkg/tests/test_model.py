import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from mindcraft import gridworld as G
from mindcraft import model as M
from mindcraft import numcore as nc
from mindcraft import querygen as Q
from mindcraft.gridworld import Observation, VisibleObject
from mindcraft.numcore.gradcheck import check_gradients
from mindcraft.vocab import CATEGORIES, COLORS, VOCAB

import suites


def small_cfg(**kw):
    base = dict(d_model=16, heads=2, layers=1, k_frames=4, n_atlas=4, dtype="float64")
    base.update(kw)
    return M.ModelConfig(**base)


@pytest.fixture(scope="module")
def episode():
    scenes = [G.generate_scene(s) for s in range(2)]
    return Q.generate_dataset(scenes, 1, 4, 0)[0]


def random_obs(rng, n):
    vis = tuple(VisibleObject(i, CATEGORIES[int(rng.integers(len(CATEGORIES)))], COLORS[int(rng.integers(len(COLORS)))],
                              1.0 / (1 + d), ("left", "center", "right")[int(rng.integers(3))], d)
                for i, d in enumerate(rng.integers(0, 7, n)))
    return Observation(0, vis, tuple(rng.uniform(0, 1, 3)), 0)


# ---------------------------------------------------------------------------
# encoders and fusion

def test_empty_view_gives_zero_visual_feature():
    cfg = small_cfg()
    p = M.init_params(cfg, 0)
    f_vis, f_geo = M.encode_observation(Observation(0, (), (1.0, 0.5, 0.0), 0), p, cfg)
    assert np.array_equal(f_vis.data, np.zeros(16))
    assert np.any(f_geo.data != 0)


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**31 - 1), st.integers(1, 6))
def test_visual_feature_permutation_invariant(seed, n):
    rng = np.random.default_rng(seed)
    cfg = small_cfg()
    p = M.init_params(cfg, 1)
    obs = random_obs(rng, n)
    perm = Observation(0, tuple(obs.visible[i] for i in rng.permutation(n)), obs.depth_profile, 0)
    a, ga = M.encode_observation(obs, p, cfg)
    b, gb = M.encode_observation(perm, p, cfg)
    np.testing.assert_allclose(a.data, b.data, atol=1e-15)
    np.testing.assert_allclose(ga.data, gb.data, atol=1e-15)
    c, _ = M.encode_observation(obs, p, cfg)
    assert np.array_equal(a.data, c.data)


def test_fuse_identity_and_shape():
    assert suites.fusion_identity(0)
    cfg = small_cfg()
    p = M.init_params(cfg, 0)
    x = nc.Tensor(np.random.default_rng(0).normal(size=16))
    assert M.fuse(x, x, p, cfg).shape == (16,)


def test_no_geo_bypass_equals_visual_feature():
    cfg = small_cfg(use_geo=False)
    p = M.init_params(cfg, 0)
    x = nc.Tensor(np.random.default_rng(0).normal(size=(3, 16)))
    assert M.fuse(x, nc.Tensor(np.ones((3, 16))), p, cfg) is x


_MODULE_CASES = suites.module_cases(np.random.default_rng(5))[:2]


@pytest.mark.parametrize("name,fn,tensors", _MODULE_CASES, ids=[c[0] for c in _MODULE_CASES])
def test_fuse_and_map_gradients(name, fn, tensors):
    errs = check_gradients(fn, {str(i): t for i, t in enumerate(tensors)})
    assert max(errs.values()) <= suites.OP_TOL


# ---------------------------------------------------------------------------
# frame sampling

def test_sample_frames_short_episode():
    assert M.sample_frames(5, 32) == [0, 1, 2, 3, 4]
    assert M.sample_frames(1, 32) == [0]


def test_sample_frames_long_episode():
    idx = M.sample_frames(64, 32)
    assert len(idx) == 32 and idx[0] == 0 and idx[-1] == 63
    gaps = set(np.diff(idx))
    assert gaps <= {2, 3} and all(g > 0 for g in gaps)


@settings(max_examples=200, deadline=None)
@given(st.integers(1, 200), st.integers(2, 40))
def test_sample_frames_properties(n, k):
    idx = M.sample_frames(n, k)
    assert len(idx) == min(n, k) and idx == sorted(set(idx))
    assert idx[0] == 0 and idx[-1] == n - 1


# ---------------------------------------------------------------------------
# cognitive map

def test_single_frame_memory_pools_to_itself():
    cfg = small_cfg()
    p = M.init_params(cfg, 0)
    f = nc.Tensor(np.random.default_rng(0).normal(size=(1, 16)))
    z, _ = M.build_map(f, p, cfg)
    np.testing.assert_allclose(z.data, f.data[0], atol=1e-15)


def test_identical_atlas_rows_give_fixed_map():
    cfg = small_cfg()
    p = M.init_params(cfg, 0)
    e = np.random.default_rng(1).normal(size=16)
    p["atlas"].data[:] = e
    want = e @ p["map.wv"].data @ p["map.wo"].data
    for s in range(3):
        mem = nc.Tensor(np.random.default_rng(s).normal(size=(s + 2, 16)))
        _, m = M.build_map(mem, p, cfg)
        np.testing.assert_allclose(m.data, want, atol=1e-12)


def test_atlas_receives_gradient_through_map():
    cfg = small_cfg()
    p = M.init_params(cfg, 0)
    mem = nc.Tensor(np.random.default_rng(0).normal(size=(4, 16)))
    _, m = M.build_map(mem, p, cfg)
    nc.sum_(nc.mul(m, nc.Tensor(np.ones(16)))).backward()
    assert np.linalg.norm(p["atlas"].grad) > 0


def test_empty_memory_rejected():
    cfg = small_cfg()
    with pytest.raises(ValueError):
        M.build_map(nc.Tensor(np.zeros((0, 16))), M.init_params(cfg, 0), cfg)


# ---------------------------------------------------------------------------
# sequence assembly

def test_map_slot_holds_map_vector():
    assert suites.map_substitution(0)


def test_no_query_no_qry_segment():
    ids, ans, mp = M.layout([10, 11], 3, None, None, small_cfg())
    assert VOCAB.qry not in ids and ids[mp] == M.MAP and ids[ans] == VOCAB.ans


def test_no_map_preset_has_no_map_slot():
    ids, _, mp = M.layout([10], 2, [12, 13], None, small_cfg(use_map=False))
    assert mp is None and M.MAP not in ids


def test_answer_requires_action():
    with pytest.raises(ValueError):
        M.layout([10], 2, [12], [13], small_cfg())


def test_sequence_length_formula(episodes):
    cfg = small_cfg(k_frames=8)
    for ep in episodes:
        for e in M.episode_experiences(ep, cfg, with_answers=False):
            ids, _, _ = M.layout(e.instr, len(M.sample_frames(e.t + 1, cfg.k_frames)), e.query, None, cfg)
            q = 1 + len(e.query) if e.query is not None else 0
            assert len(ids) == 1 + len(e.instr) + cfg.k_frames + 1 + q + 1


# ---------------------------------------------------------------------------
# forward pass

def test_query_changes_activated_map(episode):
    cfg = small_cfg()
    p = M.init_params(cfg, 0)
    e = M.episode_experiences(episode, cfg, with_answers=False)[1]
    a = M.Experience(e.key, e.vis, e.geo, e.instr, e.t, VOCAB.encode("which room are you in ?".split()))
    b = M.Experience(e.key, e.vis, e.geo, e.instr, e.t, VOCAB.encode("what room comes next ?".split()))
    out = M.forward_batch(p, cfg, [a, b])
    assert not np.allclose(out.m_prime.data[0], out.m_prime.data[1])
    np.testing.assert_array_equal(out.m.data[0], out.m.data[1])


def test_answer_tokens_do_not_affect_action_or_map(episode):
    cfg = small_cfg()
    p = M.init_params(cfg, 0)
    e = [x for x in M.episode_experiences(episode, cfg) if x.query is not None][0]
    other = M.Experience(e.key, e.vis, e.geo, e.instr, e.t, e.query, [VOCAB.stoi["red"], VOCAB.stoi["blue"]], 2)
    a, b = M.forward_batch(p, cfg, [e]), M.forward_batch(p, cfg, [other])
    np.testing.assert_array_equal(a.action_logits.data, b.action_logits.data)
    np.testing.assert_array_equal(a.m_prime.data, b.m_prime.data)


def test_future_frames_do_not_leak(episode):
    cfg = small_cfg()
    p = M.init_params(cfg, 0)
    e = M.episode_experiences(episode, cfg, with_answers=False)[2]
    vis, geo = e.vis.copy(), e.geo.copy()
    vis[3:] = np.random.default_rng(0).uniform(size=vis[3:].shape)
    f = M.Experience("other", vis, geo, e.instr, e.t, e.query)
    a, b = M.forward_batch(p, cfg, [e]), M.forward_batch(p, cfg, [f])
    np.testing.assert_allclose(a.action_logits.data, b.action_logits.data, atol=1e-12)


def test_batching_matches_single_forward(episode):
    cfg = small_cfg()
    p = M.init_params(cfg, 0)
    exps = M.episode_experiences(episode, cfg)
    batch = M.forward_batch(p, cfg, exps)
    for i, e in enumerate(exps):
        one = M.forward_batch(p, cfg, [e])
        np.testing.assert_allclose(batch.action_logits.data[i], one.action_logits.data[0], atol=1e-10)
        np.testing.assert_allclose(batch.m_prime.data[i], one.m_prime.data[0], atol=1e-10)


def test_golden_logits(episode):
    """Seeded untrained model on a fixed episode; values frozen from the first implementation."""
    cfg = small_cfg()
    p = M.init_params(cfg, 0)
    out = M.forward_batch(p, cfg, M.episode_experiences(episode, cfg, with_answers=False)[:3])
    want_actions = np.array([
        [-0.1306762343734302, -0.03609121617539991, -0.05345523267182614, -0.03027319213098286],
        [-0.03171506213823274, -0.14622519792335212, -0.03354428394602349, -0.04811711288639973],
        [-0.00344413067223661, -0.09237788289972686, 0.05192584210733553, -0.06110444830197138],
    ])
    want_map = np.array([
        [1.4728059003216913, 0.08440125165954254, 0.6228449444293486, -0.2676980908566105],
        [0.4769773545890903, 1.6912241633250251, 1.2380718061681881, 0.08472858376421127],
        [-0.41313734911079786, 0.09105003472151349, -0.5649276074531379, -1.0732866290195398],
    ])
    np.testing.assert_allclose(out.action_logits.data, want_actions, rtol=1e-9, atol=1e-12)
    np.testing.assert_allclose(out.m_prime.data[:, :4], want_map, rtol=1e-9, atol=1e-12)


def test_greedy_decoding_deterministic(episode):
    cfg = small_cfg()
    p = M.init_params(cfg, 3)
    exps = [M.query_experience(episode, q, cfg) for q in episode.queries]
    a, b = M.greedy_answers(p, cfg, exps), M.greedy_answers(p, cfg, exps)
    assert a == b and all(len(x) <= cfg.max_answer_len for x in a)


def test_act_step(episode):
    cfg = small_cfg()
    p = M.init_params(cfg, 0)
    state = M.AgentState()
    out = M.act(state, episode.observations[0], episode.instruction, ["which", "room", "are", "you", "in", "?"], p, cfg)
    assert out.action_logits.shape == (4,) and isinstance(out.answer, list)
    assert out.m_prime.shape == (16,)
    out2 = M.act(state, episode.observations[1], episode.instruction, None, p, cfg)
    assert out2.answer is None and state.t == 1


def test_max_len_enforced(episode):
    cfg = small_cfg(max_len=8)
    p = M.init_params(cfg, 0)
    with pytest.raises(nc.ShapeMismatch):
        M.forward_batch(p, cfg, M.episode_experiences(episode, cfg)[:1])


def test_config_validation():
    with pytest.raises(nc.ShapeMismatch):
        M.ModelConfig(d_model=10, heads=4).validate()
    with pytest.raises(ValueError):
        M.ModelConfig(n_atlas=1).validate()
