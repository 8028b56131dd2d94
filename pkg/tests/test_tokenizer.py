import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from morphbc import simkit as sk
from morphbc import tokenizer as tk
from morphbc.config import D_RAW


@pytest.fixture(scope="module")
def chain2():
    return sk.build_embodiment(sk.chain_spec(2))


@pytest.fixture(scope="module")
def chain2_buffer(chain2):
    return sk.generate_demos(chain2, sk.reach_task(horizon=20), count=6, seed=11,
                             threshold=-np.inf)


@pytest.fixture(scope="module")
def chain2_stats(chain2_buffer):
    return tk.fit_stats(chain2_buffer)


# ---------------------------------------------------------------------------
# fit_stats


def test_fit_stats_requires_nonempty(chain2):
    empty = sk.DemoBuffer(chain2, sk.reach_task(horizon=5), [])
    with pytest.raises(tk.EmptyBuffer):
        tk.fit_stats(empty)


def test_fit_stats_constant_feature_flagged(chain2_stats):
    # Axis and type-flag slots are constant across a homogeneous chain.
    assert chain2_stats.token_degenerate[tk.SLOT_AXIS_Y]
    assert chain2_stats.token_degenerate[tk.SLOT_IS_HINGE]
    assert chain2_stats.token_min[tk.SLOT_AXIS_X] == chain2_stats.token_max[tk.SLOT_AXIS_X]


def test_fit_stats_single_demo_extrema(chain2):
    task = sk.reach_task(horizon=15)
    buf = sk.generate_demos(chain2, task, count=1, seed=12, threshold=-np.inf)
    stats = tk.fit_stats(buf)
    toks, mask = tk.raw_tokens(buf.demos[0].states, chain2)
    vel = toks[..., tk.SLOT_VEL]
    assert stats.token_min[tk.SLOT_VEL] == pytest.approx(vel.min())
    assert stats.token_max[tk.SLOT_VEL] == pytest.approx(vel.max())


def test_fit_stats_merge_law(chain2):
    task = sk.reach_task(horizon=15)
    buf_a = sk.generate_demos(chain2, task, count=3, seed=13, threshold=-np.inf)
    buf_b = sk.generate_demos(chain2, task, count=3, seed=14, threshold=-np.inf)
    shifted = [
        sk.Demonstration(d.states, d.actions, d.episode_return, d.source_epoch + len(buf_a))
        for d in buf_b.demos
    ]
    union = sk.DemoBuffer(chain2, task, buf_a.demos + shifted)
    merged = tk.fit_stats(buf_a).merge(tk.fit_stats(buf_b))
    direct = tk.fit_stats(union)
    np.testing.assert_allclose(merged.token_min, direct.token_min)
    np.testing.assert_allclose(merged.token_max, direct.token_max)
    np.testing.assert_allclose(merged.extra_min, direct.extra_min)
    np.testing.assert_allclose(merged.extra_max, direct.extra_max)


# ---------------------------------------------------------------------------
# tokenize_state


def test_tokenize_shape_contract():
    emb = sk.build_embodiment(sk.chain_spec(3))
    buf = sk.generate_demos(emb, sk.reach_task(horizon=10), count=2, seed=15,
                            threshold=-np.inf)
    stats = tk.fit_stats(buf)
    frame = tk.tokenize_state(buf.demos[0].states[0], emb, stats)
    assert frame.tokens.shape == (3, D_RAW)
    assert frame.presence_mask.shape == (3, D_RAW)
    assert frame.extrasensory.shape == (3,)


def test_tokenize_requires_stats(chain2, chain2_buffer):
    with pytest.raises(tk.UnfittedStats):
        tk.tokenize_state(chain2_buffer.demos[0].states[0], chain2, None)


def test_tokenize_dimension_mismatch(chain2, chain2_stats):
    with pytest.raises(tk.DimensionMismatch):
        tk.tokenize_state(np.zeros(3), chain2, chain2_stats)


def test_feature_at_min_maps_to_minus_one(chain2, chain2_buffer, chain2_stats):
    toks_all = []
    for d in chain2_buffer.demos:
        toks, _ = tk.raw_tokens(d.states, chain2)
        toks_all.append(toks)
    toks_all = np.concatenate(toks_all)
    # Find the frame holding the global minimum velocity and tokenize it.
    flat = toks_all[..., tk.SLOT_VEL]
    idx = np.unravel_index(np.argmin(flat), flat.shape)
    demo_lens = [len(d) for d in chain2_buffer.demos]
    cum = np.cumsum([0] + demo_lens)
    demo_i = int(np.searchsorted(cum, idx[0], side="right") - 1)
    frame_i = idx[0] - cum[demo_i]
    obs = chain2_buffer.demos[demo_i].states[frame_i]
    frame = tk.tokenize_state(obs, chain2, chain2_stats)
    assert frame.tokens[idx[1], tk.SLOT_VEL] == pytest.approx(-1.0, abs=1e-6)


def test_normalization_endpoints_property():
    lo, hi = np.full(D_RAW, -2.0), np.full(D_RAW, 3.0)
    stats = tk.NormStats(token_min=lo, token_max=hi,
                         extra_min=np.zeros(0), extra_max=np.zeros(0))
    assert tk._normalize(lo, stats.token_min, stats.token_max) == pytest.approx(-1.0)
    assert tk._normalize(hi, stats.token_min, stats.token_max) == pytest.approx(1.0)
    mid = (lo + hi) / 2.0
    np.testing.assert_allclose(tk._normalize(mid, lo, hi), 0.0, atol=1e-12)


@settings(max_examples=30, deadline=None)
@given(lo=st.floats(-10, 9), span=st.floats(1e-3, 20), u=st.floats(0, 1))
def test_normalization_bounds_hypothesis(lo, span, u):
    hi = lo + span
    x = lo + u * span
    y = tk._normalize(np.array([x]), np.array([lo]), np.array([hi]))[0]
    assert -1.0 - 1e-9 <= y <= 1.0 + 1e-9


def test_hinge_angle_roundtrip(chain2):
    rng = np.random.default_rng(0)
    q = rng.uniform(-np.pi, np.pi, (5, 2))
    ang = tk.hinge_abs_angles(chain2, q)
    back = tk.hinge_angles_to_q(chain2, ang)
    np.testing.assert_allclose(back, q, atol=1e-6)


def test_mask_zero_consistency(chain2, chain2_buffer, chain2_stats):
    for d in chain2_buffer.demos[:2]:
        frame = tk.tokenize_state(d.states, chain2, chain2_stats)
        masked = ~frame.presence_mask
        assert np.all(frame.tokens[:, masked] == 0.0)
    # Generic present entries are nonzero (velocities away from the midpoint).
    obs = chain2_buffer.demos[0].states[3]
    frame = tk.tokenize_state(obs, chain2, chain2_stats)
    present = frame.presence_mask
    assert np.count_nonzero(frame.tokens[present]) > 0


def test_identical_jointspec_identical_layout(chain2, chain2_stats):
    # Two embodiments sharing JointSpec at position j produce the same token
    # layout for that joint.
    emb3 = sk.build_embodiment(sk.chain_spec(3))
    obs2 = np.concatenate([np.array([0.3, -0.2]), np.array([0.1, 0.4]), np.zeros(3)])
    obs3 = np.concatenate([np.array([0.3, -0.2, 0.5]), np.array([0.1, 0.4, -0.3]), np.zeros(3)])
    t2, m2 = tk.raw_tokens(obs2, chain2)
    t3, m3 = tk.raw_tokens(obs3, emb3)
    np.testing.assert_allclose(t2[0], t3[0])
    np.testing.assert_allclose(t2[1], t3[1])
    np.testing.assert_array_equal(m2[0], m3[0])


def test_free_joint_masks_limits():
    emb = sk.build_embodiment(sk.cart_chain_spec(1))
    mask = tk.presence_mask(emb)
    assert mask[0, tk.SLOT_LIMIT_LO] and mask[0, tk.SLOT_LIMIT_HI]   # cart has limits
    assert not mask[1, tk.SLOT_LIMIT_LO] and not mask[1, tk.SLOT_LIMIT_HI]  # free pole
    assert not mask[0, tk.SLOT_POS_B]                                 # slide pos_b absent


# ---------------------------------------------------------------------------
# detokenize_action


def test_detokenize_zeros(chain2):
    out = tk.detokenize_action(np.zeros(2), chain2)
    np.testing.assert_array_equal(out, np.zeros(2))


def test_detokenize_out_of_range(chain2):
    with pytest.raises(tk.OutOfRange):
        tk.detokenize_action(np.array([1.2, 0.0]), chain2)


def test_detokenize_zeroes_free_joints():
    emb = sk.build_embodiment(sk.cart_chain_spec(1))
    out = tk.detokenize_action(np.array([0.5, 0.9]), emb)
    assert out[0] == 0.5
    assert out[1] == 0.0


# ---------------------------------------------------------------------------
# pack_extrasensory


def test_pack_empty_when_no_extrasensory():
    emb = sk.build_embodiment(sk.cart_chain_spec(1))
    obs = np.zeros(emb.obs_dim)
    assert tk.pack_extrasensory(obs, emb).shape == (0,)


def test_pack_distance_euclidean_oracle(chain2):
    # Fold the arm so the tip returns to the origin, goal at (0.3, 0.4).
    q = np.array([0.7, np.pi])
    state = sk.SimState(q=q, qdot=np.zeros(2), goal=np.array([0.3, 0.4]))
    tip, _ = sk.tip_state(chain2, state)
    assert np.linalg.norm(tip) < 1e-9
    obs = sk.observation(chain2, sk.reach_task(horizon=5), state)
    vec = tk.pack_extrasensory(obs, chain2)
    assert vec[-1] == pytest.approx(0.5, abs=1e-9)
    np.testing.assert_allclose(vec[:2], [0.3, 0.4])


def test_pack_order_stable(chain2):
    state = sk.reset(chain2, sk.reach_task(horizon=5), 2)
    obs = sk.observation(chain2, sk.reach_task(horizon=5), state)
    a = tk.pack_extrasensory(obs, chain2)
    b = tk.pack_extrasensory(obs, chain2)
    np.testing.assert_array_equal(a, b)


def test_stats_json_roundtrip(tmp_path, chain2_stats):
    chain2_stats.save(tmp_path / "stats.json")
    loaded = tk.NormStats.load(tmp_path / "stats.json")
    np.testing.assert_allclose(loaded.token_min, chain2_stats.token_min)
    np.testing.assert_allclose(loaded.extra_max, chain2_stats.extra_max)


def test_stats_load_rejects_wrong_d_raw(tmp_path, chain2_stats):
    import json
    chain2_stats.save(tmp_path / "s.json")
    doc = json.loads((tmp_path / "s.json").read_text())
    doc["d_raw"] = 7
    (tmp_path / "bad.json").write_text(json.dumps(doc))
    with pytest.raises(tk.TokenizerError):
        tk.NormStats.load(tmp_path / "bad.json")
