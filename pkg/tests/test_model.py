import numpy as np
import pytest

from glks import tensor as T
from glks.data import EOS_ID, Episode, Vocabulary, build_vocab, make_batch, synth_corpus
from glks.decoder import guidance_vector, mix
from glks.encoders import BiGRUEncoder, Encoders, last_state, load_embeddings
from glks.gks import (
    AdditiveAttention, Highway, highway_aggregate, matching_matrix, topic_transition, transition_weights,
    unfold_attention, unfold_sum,
)
from glks.model import GLKS, ModelConfig
from glks.tensor import ParamFactory, Tensor

from conftest import rel_err


def pf(seed=0, scale=0.5):
    return ParamFactory(np.random.default_rng(seed), dtype=np.float64, scale=scale)


def t64(x):
    return Tensor(np.asarray(x, dtype=np.float64), dtype=np.float64)


@pytest.fixture(scope="module")
def small():
    corpus = synth_corpus(3, 6, vocab_size=30, window_m=2, n_windows=(3, 4))
    vocab = build_vocab(synth_corpus(3, 40, vocab_size=30, window_m=2), 30)
    cfg = ModelConfig(len(vocab), emb_dim=12, hidden=8, m=2, init_scale=0.5, dtype="float64", seed=1)
    return GLKS(cfg), vocab, corpus


# -- encoders -------------------------------------------------------------

def test_encoder_shapes_padding_and_direction(rng):
    enc = BiGRUEncoder(pf(), 5, 7)
    emb = t64(rng.normal(size=(2, 6, 5)))
    mask = np.array([[True] * 6, [True] * 4 + [False] * 2])
    h = enc(emb, mask)
    assert h.shape == (2, 6, 7)
    assert not h.data[1, 4:].any()
    rev = enc(t64(emb.data[:, ::-1].copy()), np.ones((2, 6), dtype=bool))
    assert np.linalg.norm(rev.data[0, ::-1] - h.data[0]) > 1e-6
    with pytest.raises(T.ContractError):
        enc(t64(np.zeros((1, 0, 5))), np.zeros((1, 0), dtype=bool))


def test_padded_tail_does_not_change_real_positions(rng):
    enc = BiGRUEncoder(pf(), 4, 3)
    x = rng.normal(size=(1, 3, 4))
    short = enc(t64(x), np.ones((1, 3), dtype=bool)).data
    padded = enc(t64(np.concatenate([x, rng.normal(size=(1, 2, 4))], axis=1)),
                 np.array([[True] * 3 + [False] * 2])).data
    assert np.allclose(short[0], padded[0, :3])


def test_encoders_share_embedding_not_recurrence():
    encs = Encoders(pf(), 10, 4, 3)
    assert encs.background.fwd.w_input is not encs.context.fwd.w_input
    ids = np.array([[4, 5, 6]])
    mask = np.ones((1, 3), dtype=bool)
    T.sum_(encs.encode(ids, mask, "background")).backward()
    g = encs.embedding.grad
    assert all(np.abs(g[i]).sum() > 0 for i in (4, 5, 6))
    assert not g[7:].any()


def test_last_state_picks_final_real_position(rng):
    h = t64(rng.normal(size=(2, 4, 3)))
    out = last_state(h, np.array([[1, 1, 1, 1], [1, 1, 0, 0]], dtype=bool))
    assert np.array_equal(out.data, h.data[[0, 1], [3, 1]])


def test_load_embeddings(tmp_path):
    v = Vocabulary(["movie", "great"])
    table = np.zeros((len(v), 3))
    (tmp_path / "e.txt").write_text("movie 1 2 3\nbad 1 1\nunknown 4 5 6\n")
    assert load_embeddings(tmp_path / "e.txt", v, table) == 1
    assert table[v.id("movie")].tolist() == [1, 2, 3]


# -- gks ------------------------------------------------------------------

def test_highway_gate_limits(rng):
    layer = Highway(pf(), 3)
    h, c = t64(rng.normal(size=(1, 2, 3))), t64(rng.normal(size=(1, 3)))
    inp = np.concatenate([h.data, np.repeat(c.data[:, None], 2, axis=1)], axis=-1)
    layer.b_gate.data[:] = 60.0
    assert np.allclose(layer(h, c).data, inp @ layer.w_linear.data + layer.b_linear.data)
    layer.b_gate.data[:] = -60.0
    out = layer(h, c).data
    assert np.allclose(out, np.tanh(inp @ layer.w_nonlinear.data + layer.b_nonlinear.data))
    assert np.all(np.abs(out) < 1)
    with pytest.raises(T.ConfigError):
        highway_aggregate(h, c, [])


def test_highway_gradients():
    r = np.random.default_rng(3)
    layer = Highway(pf(2), 3)
    h, c = t64(r.normal(size=(2, 3, 3))), t64(r.normal(size=(2, 3)))
    report = T.grad_check_parameters(lambda: T.sum_(T.tanh(highway_aggregate(h, c, [layer]))),
                                     layer.parameters(), eps=1e-20, tol=1e-3, method="complex")
    assert report.passed, report


def test_matching_matrix_examples(rng):
    hk, hx = t64(rng.normal(size=(1, 3, 4))), t64(rng.normal(size=(1, 2, 4)))
    w1, w2 = t64(rng.normal(size=(4, 5))), t64(rng.normal(size=(4, 5)))
    m = matching_matrix(hk, hx, w1, w2, t64(rng.normal(size=(5, 1))))
    assert m.shape == (1, 3, 2)
    assert not matching_matrix(hk, hx, w1, w2, t64(np.zeros((5, 1)))).data.any()
    hk.data[0, 2] = hk.data[0, 0]
    m = matching_matrix(hk, hx, w1, w2, t64(rng.normal(size=(5, 1))))
    assert np.array_equal(m.data[0, 0], m.data[0, 2])
    masked = matching_matrix(hk, hx, w1, w2, t64(rng.normal(size=(5, 1))),
                             np.array([[1, 1, 0]], dtype=bool), np.array([[1, 0]], dtype=bool))
    assert np.isneginf(masked.data[0, 2]).all() and np.isneginf(masked.data[0, :, 1]).all()


def test_transition_weights_examples(rng):
    assert transition_weights(t64([[[1, 3], [2, 0]]])).data.tolist() == [[3, 2]]
    col = rng.normal(size=(1, 4, 1))
    assert np.array_equal(transition_weights(t64(col)).data, col[..., 0])
    m = rng.normal(size=(1, 3, 4))
    bumped = m.copy()
    bumped[0, 1, 2] += 1.0
    assert np.all(transition_weights(t64(bumped)).data >= transition_weights(t64(m)).data)


def test_unfold_sum_examples():
    assert unfold_sum(t64([[1, 2, 3, 4, 5, 6]]), 3).data.tolist() == [[6, 15]]
    assert unfold_sum(t64([[1, 2, 3, 4, 5]]), 3).data.tolist() == [[6, 9]]
    assert unfold_sum(t64([[1, 2, 3]]), 1).data.tolist() == [[1, 2, 3]]
    out = unfold_sum(t64([[1, 2, -np.inf, 4, -np.inf, -np.inf]]), 2).data
    assert out[0, :2].tolist() == [3, 4] and np.isneginf(out[0, 2])


@pytest.mark.parametrize("k,m", [(k, m) for k in range(1, 9) for m in range(1, 6)])
def test_window_count(k, m):
    assert unfold_sum(t64(np.ones((1, k))), m).shape == (1, -(-k // m))


def test_unfold_attention_examples(rng):
    att = AdditiveAttention(pf(), 3, 3, 4)
    v = rng.normal(size=3)
    hk = t64(np.tile(v, (1, 4, 1)))
    units, local = unfold_attention(hk, t64(rng.normal(size=(1, 3))), 2, att, np.ones((1, 4), dtype=bool))
    assert np.allclose(units.data, v)
    hk = t64(rng.normal(size=(1, 5, 3)))
    units, local = unfold_attention(hk, t64(rng.normal(size=(1, 3))), 1, att, np.ones((1, 5), dtype=bool))
    assert np.allclose(units.data, hk.data)
    units, local = unfold_attention(hk, t64(rng.normal(size=(1, 3))), 2, att, np.ones((1, 5), dtype=bool))
    assert np.allclose(local.data.sum(axis=-1), 1.0, atol=1e-6)


def test_topic_transition_examples(rng):
    units = t64(rng.normal(size=(1, 3, 4)))
    dist, vec = topic_transition(t64([[0.0, 1e4, 0.0]]), units)
    assert np.allclose(vec.data[0], units.data[0, 1])
    dist, vec = topic_transition(t64([[2.0, 2.0, 2.0]]), units)
    assert np.allclose(vec.data[0], units.data[0].mean(axis=0))
    w = rng.normal(size=(1, 3))
    d1, v1 = topic_transition(t64(w), units)
    d2, v2 = topic_transition(t64(w + 7.5), units)
    assert np.allclose(d1.data, d2.data) and np.allclose(v1.data, v2.data)
    assert np.linalg.norm(v1.data) <= np.linalg.norm(units.data[0], axis=-1).max() + 1e-12


def test_gks_end_to_end_gradient_on_matching_parameters(small):
    model, vocab, corpus = small
    batch = make_batch(corpus[:2], vocab, 2)
    gks = model.gks
    report = T.grad_check_parameters(lambda: T.sum_(T.tanh(model.select(batch).vector)),
                                     [gks.v_m, gks.w_m1, gks.w_m2], eps=1e-20, tol=1e-3, method="complex")
    assert report.passed, report


def test_unit_dist_masks_padding_windows(small):
    model, vocab, corpus = small
    eps = sorted(corpus, key=lambda e: len(e.background))
    batch = make_batch([eps[0], eps[-1]], vocab, 2)
    topic = model.select(batch)
    d = topic.unit_dist.data
    assert np.allclose(d.sum(axis=1), 1.0)
    assert not d[~topic.window_mask].any()


# -- decoder ---------------------------------------------------------------

def test_init_state(small):
    model, _, _ = small
    dec = model.decoder
    z = t64(np.zeros((1, 8)))
    saved = dec.b_s.data.copy()
    dec.b_s.data[:] = 0
    try:
        assert not dec.init_state(z, z).data.any()
    finally:
        dec.b_s.data[:] = saved
    c = t64(np.random.default_rng(0).normal(size=(1, 8)))
    out = dec.init_state(c, z).data
    assert out.shape == (1, 8)
    assert np.allclose(out, c.data @ dec.w_s.data[:8] + dec.b_s.data)


def test_step_state_depends_on_previous_token(small):
    model, _, _ = small
    h = t64(np.random.default_rng(1).uniform(-1, 1, size=(1, 8)))
    e1, e2 = model.encoders.embed(np.array([4])), model.encoders.embed(np.array([5]))
    a, b = model.decoder.step_state(h, e1).data, model.decoder.step_state(h, e2).data
    assert np.array_equal(a, model.decoder.step_state(h, e1).data)
    assert np.linalg.norm(a - b) > 1e-6


def test_chained_state_gradients(small):
    model, _, _ = small
    gru = model.decoder.gru
    ids = [4, 7, 5, 9, 6]
    h0 = t64(np.random.default_rng(2).uniform(-1, 1, size=(1, 8)))

    def loss():
        h = h0
        for i in ids:
            h = model.decoder.step_state(h, model.encoders.embed(np.array([i])))
        return T.sum_(h)

    report = T.grad_check_parameters(loss, gru.parameters(), eps=1e-20, tol=1e-3, method="complex")
    assert report.passed, report


def test_guidance_layout(rng):
    a, b, c = (t64(rng.normal(size=(1, n))) for n in (8, 8, 12))
    g = guidance_vector(a, b, c).data
    assert g.shape == (1, 28)
    assert np.array_equal(g[0, :8], a.data[0]) and np.array_equal(g[0, 8:16], b.data[0])
    assert np.array_equal(g[0, 16:], c.data[0])


def test_attention_examples(rng):
    att = AdditiveAttention(pf(), 4, 3, 5)
    keys = t64(rng.normal(size=(1, 4, 3)))
    q = t64(rng.normal(size=(1, 4)))
    summary, w = att(q, keys, np.array([[False, True, False, False]]))
    assert w.data.tolist() == [[0, 1, 0, 0]]
    assert np.allclose(summary.data[0], keys.data[0, 1])
    same = t64(np.tile(keys.data[:, :1], (1, 4, 1)))
    summary, w = att(q, same, np.ones((1, 4), dtype=bool))
    assert np.allclose(summary.data, same.data[:, 0]) and abs(w.data.sum() - 1) < 1e-6
    with pytest.raises(T.InvalidMaskError):
        att(q, keys, np.zeros((1, 4), dtype=bool))


def test_readout_linear_and_gradient(small, rng):
    model, _, _ = small
    dec = model.decoder
    parts = [t64(rng.normal(size=(1, n))) for n in (12, 8, 8, 8, 8)]
    other = [t64(rng.normal(size=(1, n))) for n in (12, 8, 8, 8, 8)]
    f = lambda xs: dec.readout(*xs).data - dec.b_r.data
    summed = [t64(a.data + b.data) for a, b in zip(parts, other)]
    assert np.allclose(f(summed), f(parts) + f(other))
    report = T.grad_check_parameters(lambda: T.sum_(T.tanh(dec.readout(*parts))), [dec.w_r],
                                     eps=1e-20, tol=1e-3, method="complex")
    assert report.passed, report


def test_vocab_dist_properties(small, rng):
    model, _, _ = small
    dec = model.decoder
    p = dec.vocab_dist(t64(rng.normal(size=(3, 8)))).data
    assert np.allclose(p.sum(axis=1), 1.0, atol=1e-5)
    assert np.allclose(dec.vocab_dist(t64(np.zeros((1, 8)))).data, 1 / dec.w_v.shape[1])


def test_pointer_parameters_are_independent(small):
    model, vocab, corpus = small
    batch = make_batch(corpus[:1], vocab, 2)
    inp, state, _ = model._decoder_inputs(batch)
    emb = model.encoders.embed(batch.y_in[:, 0])
    base = model.decoder.step(state, emb, inp)
    saved = model.decoder.pointer_attention.v.data.copy()
    model.decoder.pointer_attention.v.data += 0.3
    try:
        moved = model.decoder.step(state, emb, inp)
    finally:
        model.decoder.pointer_attention.v.data[:] = saved
    assert np.array_equal(base.vocab_dist.data, moved.vocab_dist.data)
    assert not np.array_equal(base.pointer_dist.data, moved.pointer_dist.data)


def test_mix_gate_limits_and_copy_mass():
    p_vocab = t64([[0.1, 0.2, 0.3, 0.4]])
    alpha = np.zeros((1, 9))
    alpha[0, 2], alpha[0, 7], alpha[0, 0] = 0.25, 0.35, 0.4
    k_ext = np.array([[1, 0, 5, 0, 0, 0, 0, 5, 0]])
    k_ext[0, [1, 3, 4, 5, 6, 8]] = 3
    out = mix(p_vocab, t64(alpha), t64([[1.0]]), k_ext, 6).data
    assert np.allclose(out[0, :4], p_vocab.data[0]) and not out[0, 4:].any()
    out = mix(p_vocab, t64(alpha), t64([[0.0]]), k_ext, 6).data
    assert np.isclose(out[0, 5], 0.25 + 0.35) and np.isclose(out[0, 1], 0.4)
    out = mix(p_vocab, t64(alpha), t64([[0.3]]), k_ext, 6).data
    assert np.isclose(out.sum(), 1.0)


def test_teacher_forced_step_distributions(small):
    model, vocab, corpus = small
    batch = make_batch(corpus[:3], vocab, 2)
    res = model.forward(batch)
    for s in res.steps:
        assert np.allclose(s.vocab_dist.data.sum(-1), 1, atol=1e-5)
        assert np.allclose(s.pointer_dist.data.sum(-1), 1, atol=1e-5)
        assert np.allclose(s.mixed_dist.data.sum(-1), 1, atol=1e-5)
        assert not s.pointer_dist.data[~batch.k_mask].any()
        assert np.all((s.gate.data > 0) & (s.gate.data < 1))
    gold = np.take_along_axis(res.mixed.data, batch.y_out[..., None], axis=-1)[..., 0]
    assert np.all(np.log(np.maximum(gold[batch.y_mask], T.LOG_FLOOR)) > -np.inf)


def test_without_gks_topic_is_zero(small):
    model, vocab, corpus = small
    cfg = ModelConfig(**{**model.config.to_dict(), "use_gks": False})
    ablated = GLKS(cfg)
    inp, _, topic = ablated._decoder_inputs(make_batch(corpus[:2], vocab, 2))
    assert topic is None and not inp.topic.data.any()


def test_greedy_decoding_contract(small):
    model, vocab, corpus = small
    outs = model.generate(corpus, vocab, max_len=5)
    again = model.generate(corpus, vocab, max_len=5)
    for (toks, trace), (toks2, _) in zip(outs, again):
        assert len(toks) <= 5 and toks == toks2
        assert trace.alpha.shape == (len(toks), len(trace.background))
        assert trace.gate.shape == (len(toks),)
    beam = model.generate(corpus[:2], vocab, max_len=5, beam_width=3)
    assert all(len(t) <= 5 and tr is None for t, tr in beam)
    with pytest.raises(ValueError):
        model.greedy(make_batch(corpus[:1], vocab, 2), max_len=0)


def test_greedy_batch_matches_single_episode_decoding(small):
    model, vocab, corpus = small
    together = model.generate(corpus, vocab, max_len=6)
    alone = [model.generate([e], vocab, max_len=6)[0] for e in corpus]
    for (a, ta), (b, tb) in zip(together, alone):
        assert a == b
        assert ta.close_to(tb, 1e-9)
