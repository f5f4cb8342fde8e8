import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st
from oracles import fd_gradients

from icwm.cartpole import DatasetSpec, build_dataset, step_dynamics
from icwm.errors import ConfigError, ContractError
from icwm.seqmodel.checkpoint import load_checkpoint, restore_generator, save_checkpoint
from icwm.seqmodel.evaluate import evaluate_icl, export_memory_states, rollout_errors, state_size
from icwm.seqmodel.model import GsaConfig, GsaState, GsaWorldModel, LossConfig, _kl_normal, world_model_loss
from icwm.seqmodel.train import TrainConfig, cosine_lr, gradients, new_model, train

TINY = GsaConfig(D=8, L=2, heads=2, mem_len=4, chunk=8)


def _model(cfg=TINY, seed=0):
    torch.manual_seed(seed)
    return GsaWorldModel(cfg).double()


def _inputs(cfg, B, T, seed=0):
    g = torch.Generator().manual_seed(seed)
    s = torch.randn(B, T, cfg.D, generator=g, dtype=torch.float64)
    a = torch.randint(0, cfg.n_actions, (B, T), generator=g)
    return s, a


def _recurrent(model, s, a, state=None):
    state = state or model.initial_state(s.shape[0])
    hs = []
    for t in range(s.shape[1]):
        h, state = model.forward_recurrent(state, s[:, t], a[:, t])
        hs.append(h)
    return torch.stack(hs, dim=1), state


def test_config_validation():
    with pytest.raises(ConfigError):
        GsaConfig(D=10, heads=4)
    with pytest.raises(ConfigError):
        GsaConfig(chunk=0)
    with pytest.raises(ConfigError):
        GsaConfig(ffn_mult=0)
    assert GsaConfig.from_dict(TINY.to_dict()) == TINY


# encoders / decoders


def test_encode_zero_weights():
    m = _model()
    with torch.no_grad():
        m.enc_mean.weight.zero_()
        m.enc_mean.bias.zero_()
    s, _ = m.encode_obs(torch.randn(3, 4, dtype=torch.float64))
    assert torch.all(s == 0)


def test_encode_linear_and_positive_scale():
    m = _model()
    o1, o2 = torch.randn(5, 4, dtype=torch.float64), torch.randn(5, 4, dtype=torch.float64)
    a, b = 0.3, -1.7
    lhs = m.encode_obs(a * o1 + b * o2)[0] - m.enc_mean.bias * (1 - a - b)
    rhs = a * m.encode_obs(o1)[0] + b * m.encode_obs(o2)[0]
    assert torch.allclose(lhs, rhs, atol=1e-12)
    _, sigma = m.encode_obs(torch.randn(100, 4, dtype=torch.float64) * 10)
    assert torch.all(torch.isfinite(sigma)) and torch.all(sigma > 0)


def test_encode_width_mismatch():
    with pytest.raises(ContractError):
        _model().encode_obs(torch.zeros(2, 3, dtype=torch.float64))


def test_decode_obs_bias_and_linearity():
    m = _model()
    assert torch.equal(m.decode_obs(torch.zeros(TINY.D, dtype=torch.float64)), m.dec.bias)
    x, y = torch.randn(TINY.D, dtype=torch.float64), torch.randn(TINY.D, dtype=torch.float64)
    lin = m.decode_obs(x + y) - m.dec.bias
    assert torch.allclose(lin, (m.decode_obs(x) - m.dec.bias) + (m.decode_obs(y) - m.dec.bias), atol=1e-12)
    with pytest.raises(ContractError):
        m.decode_obs(torch.zeros(3, dtype=torch.float64))


def test_encode_action_properties():
    m = _model()
    e = m.encode_action(torch.tensor([0, 1, 0]))
    assert not torch.allclose(e[0], e[1]) and torch.equal(e[0], e[2])
    with pytest.raises(ContractError):
        m.encode_action(torch.tensor([2]))


def test_action_embedding_gradient_is_sparse():
    m = _model()
    m.encode_action(torch.tensor([1, 1])).sum().backward()
    g = m.act_embed.weight.grad
    assert torch.all(g[0] == 0) and torch.any(g[1] != 0)


def test_decode_latent_properties():
    m = _model()
    h = torch.randn(6, TINY.D, dtype=torch.float64) * 5
    s_hat, sigma = m.decode_latent(h)
    assert torch.all(torch.isfinite(s_hat)) and torch.all(sigma > 0)
    with torch.no_grad():
        m.lat_fc2.weight.zero_()
        m.lat_fc2.bias.zero_()
    assert torch.equal(m.decode_latent(h)[0], h)


# temporal core


def test_chunk_one_matches_recurrent():
    m = _model()
    s, a = _inputs(TINY, 2, 13)
    h, _ = m.forward_chunkwise(s, a, chunk=1)
    assert (h - _recurrent(m, s, a)[0]).abs().max() <= 1e-12


def test_wide_feed_forward_matches_recurrent():
    cfg = GsaConfig(D=8, L=2, heads=2, mem_len=4, chunk=8, ffn_mult=3)
    m = _model(cfg)
    s, a = _inputs(cfg, 2, 13)
    h, _ = m.forward_chunkwise(s, a)
    assert (h - _recurrent(m, s, a)[0]).abs().max() <= 1e-12


def test_empty_sequence():
    m = _model()
    s, a = _inputs(TINY, 2, 0)
    h, state = m.forward_chunkwise(s, a)
    assert h.shape == (2, 0, TINY.D)
    assert all(torch.all(k == 0) for k in state.keys)


def test_chunk_size_invariance():
    m = _model()
    s, a = _inputs(TINY, 2, 37)
    h8, st8 = m.forward_chunkwise(s, a, chunk=8)
    h16, st16 = m.forward_chunkwise(s, a, chunk=16)
    assert (h8 - h16).abs().max() <= 1e-10
    for k8, k16 in zip(st8.keys, st16.keys):
        assert (k8 - k16).abs().max() <= 1e-10


@settings(max_examples=8, deadline=None)
@given(
    heads=st.sampled_from([1, 2, 4]),
    dh=st.integers(1, 4),
    mem=st.integers(1, 6),
    layers=st.integers(1, 2),
    chunk=st.integers(1, 40),
    T=st.integers(1, 96),
    seed=st.integers(0, 1000),
)
def test_chunkwise_recurrent_equivalence_property(heads, dh, mem, layers, chunk, T, seed):
    cfg = GsaConfig(D=heads * dh, L=layers, heads=heads, mem_len=mem, chunk=chunk)
    m = _model(cfg, seed)
    s, a = _inputs(cfg, 2, T, seed)
    h, state = m.forward_chunkwise(s, a)
    hr, sr = _recurrent(m, s, a)
    assert (h - hr).abs().max() <= 1e-10
    assert max((x - y).abs().max() for x, y in zip(state.values, sr.values)) <= 1e-10


def test_float32_equivalence():
    torch.manual_seed(0)
    m = GsaWorldModel(TINY)
    s, a = _inputs(TINY, 2, 200)
    s = s.float()
    h, _ = m.forward_chunkwise(s, a, chunk=64)
    assert (h - _recurrent(m, s, a)[0]).abs().max() <= 1e-4


def test_state_continuation():
    m = _model()
    s, a = _inputs(TINY, 2, 30)
    full, _ = m.forward_chunkwise(s, a)
    _, mid = m.forward_chunkwise(s[:, :11], a[:, :11])
    tail, _ = m.forward_chunkwise(s[:, 11:], a[:, 11:], state=mid)
    assert (full[:, 11:] - tail).abs().max() <= 1e-12


def test_causality():
    m = _model()
    s, a = _inputs(TINY, 1, 20)
    h, _ = m.forward_chunkwise(s, a)
    s2 = s.clone()
    s2[:, 12] += 3.0
    h2, _ = m.forward_chunkwise(s2, a)
    assert torch.equal(h[:, :12], h2[:, :12])
    assert not torch.allclose(h[:, 12], h2[:, 12])


def test_nonfinite_input_rejected():
    m = _model()
    s, a = _inputs(TINY, 1, 4)
    s[0, 2, 0] = float("nan")
    with pytest.raises(ContractError):
        m.forward_chunkwise(s, a)


def test_saturated_gates_forget_previous_memory():
    cfg = GsaConfig(D=8, L=1, heads=2, mem_len=4, gate_floor=5000.0)
    m = _model(cfg)
    with torch.no_grad():
        m.layers[0].gate_proj.weight.zero_()
        m.layers[0].gate_proj.bias.fill_(-2000.0)
    s, a = _inputs(cfg, 1, 1)
    st_a = m.initial_state(1)
    st_b = GsaState(
        [torch.randn_like(k) for k in st_a.keys],
        [torch.randn_like(v) for v in st_a.values],
        [torch.rand_like(w) + 0.5 for w in st_a.mass],
    )
    _, na = m.forward_recurrent(st_a, s[:, 0], a[:, 0])
    _, nb = m.forward_recurrent(st_b, s[:, 0], a[:, 0])
    assert torch.equal(na.keys[0], nb.keys[0]) and torch.equal(na.values[0], nb.values[0])
    assert torch.equal(na.mass[0], nb.mass[0])


def test_fresh_memory_reads_first_write_at_full_scale():
    cfg = GsaConfig(D=8, L=1, heads=2, mem_len=4)
    m = _model(cfg, seed=2)
    s, a = _inputs(cfg, 3, 1)
    x = s[:, 0] + m.encode_action(a[:, 0])
    _, state = m.forward_recurrent(m.initial_state(3), s[:, 0], a[:, 0])
    layer = m.layers[0]
    _, k, v, _ = layer._project(x[:, None])
    # every slot holds exactly the first key and value once divided by its mass
    norm_k = state.keys[0] / state.mass[0][..., None]
    norm_v = state.values[0] / state.mass[0][..., None]
    assert torch.allclose(norm_k, k[:, 0, :, None, :].expand_as(norm_k), atol=1e-12)
    assert torch.allclose(norm_v, v[:, 0, :, None, :].expand_as(norm_v), atol=1e-12)
    raw = GsaWorldModel(GsaConfig(D=8, L=1, heads=2, mem_len=4, normalize_slots=False)).double()
    raw.load_state_dict(m.state_dict())
    _, rs = raw.forward_recurrent(raw.initial_state(3), s[:, 0], a[:, 0])
    assert torch.equal(rs.keys[0], state.keys[0])


def test_recurrent_state_shape_checked():
    m = _model()
    bad = GsaState.initial(GsaConfig(D=8, L=2, heads=2, mem_len=5), 1, torch.float64)
    s, a = _inputs(TINY, 1, 1)
    with pytest.raises(ContractError):
        m.forward_recurrent(bad, s[:, 0], a[:, 0])


def test_constant_memory_state():
    m = _model()
    s, a = _inputs(TINY, 1, 10_000)
    state = m.initial_state(1)
    size = state.numel()
    with torch.no_grad():
        for t in range(0, 10_000, 997):
            _, state = m.forward_recurrent(state, s[:, t], a[:, t])
            assert state.numel() == size
    assert size == state_size(m)


# loss


def test_gaussian_kl_closed_form():
    one = torch.tensor([1.0], dtype=torch.float64)
    zero = torch.tensor([0.0], dtype=torch.float64)
    assert _kl_normal(one, one, zero, one).item() == pytest.approx(0.5, abs=1e-15)
    assert _kl_normal(zero, one, zero, one).item() == 0.0


def _fake_outputs(B=2, T=5, D=3, O=4, seed=0):
    g = torch.Generator().manual_seed(seed)
    target = torch.randn(B, T + 1, O, generator=g, dtype=torch.float64)
    s = torch.randn(B, T + 1, D, generator=g, dtype=torch.float64)
    sigma = torch.rand(B, T + 1, D, generator=g, dtype=torch.float64) + 0.5
    return {
        "target": target,
        "s": s,
        "sigma": sigma,
        "s_hat": s[:, 1:].clone(),
        "sigma_hat": sigma[:, 1:].clone(),
        "o_hat": target[:, 1:].clone(),
        "o_rec": target.clone(),
    }


def test_loss_zero_terms_on_perfect_predictions():
    out = _fake_outputs()
    _, terms = world_model_loss(out)
    assert terms["prediction"] == 0 and terms["reconstruction"] == 0
    assert abs(terms["transition_kl"]) <= 1e-15


def test_prior_kl_zero_at_standard_normal():
    out = _fake_outputs()
    out["s"] = torch.zeros_like(out["s"])
    out["sigma"] = torch.ones_like(out["sigma"])
    out["s_hat"], out["sigma_hat"] = out["s"][:, 1:], out["sigma"][:, 1:]
    _, terms = world_model_loss(out)
    assert terms["prior_kl"] == 0


@given(seed=st.integers(0, 10**6))
@settings(max_examples=30)
def test_loss_terms_nonnegative(seed):
    out = _fake_outputs(seed=seed)
    g = torch.Generator().manual_seed(seed + 1)
    out["s_hat"] = torch.randn(out["s_hat"].shape, generator=g, dtype=torch.float64)
    out["sigma_hat"] = torch.rand(out["sigma_hat"].shape, generator=g, dtype=torch.float64) + 0.1
    _, terms = world_model_loss(out, LossConfig())
    assert all(v.item() >= -1e-12 for v in terms.values())


def test_loss_rejects_nonpositive_scale():
    out = _fake_outputs()
    out["sigma"][0, 0, 0] = 0.0
    with pytest.raises(ContractError):
        world_model_loss(out)


# gradients


def _small_batch(cfg, T=6, seed=0):
    g = torch.Generator().manual_seed(seed)
    obs = torch.randn(2, T + 1, cfg.obs_dim, generator=g, dtype=torch.float64)
    act = torch.randint(0, cfg.n_actions, (2, T), generator=g)
    return obs, act


def fd_relative_errors(model, obs, act, eps=1e-5):
    def loss_fn():
        return world_model_loss(model(obs, act), LossConfig(lambda_kl=0.1, transition_weight=0.5))[0]

    grads = gradients(model, loss_fn())
    fd = fd_gradients(list(model.named_parameters()), loss_fn, eps)
    return {
        name: (grads[name] - fd[name]).norm().item() / max(grads[name].norm().item(), fd[name].norm().item(), 1e-12)
        for name in fd
    }


def test_gradients_match_finite_differences():
    cfg = GsaConfig(D=4, L=2, heads=2, mem_len=3, chunk=4)
    model = _model(cfg, seed=3)
    obs, act = _small_batch(cfg)
    worst = fd_relative_errors(model, obs, act)
    bad = {k: v for k, v in worst.items() if v > 1e-4}
    assert not bad, bad


def test_unused_parameter_has_zero_gradient():
    cfg = GsaConfig(D=4, L=1, heads=2, mem_len=3, learn_sigma_hat=False)
    model = _model(cfg)
    obs, act = _small_batch(cfg)
    grads = gradients(model, world_model_loss(model(obs, act))[0])
    assert torch.all(grads["lat_scale.weight"] == 0) and torch.all(grads["lat_scale.bias"] == 0)


def test_gradient_scales_with_loss():
    model = _model()
    obs, act = _small_batch(TINY)
    g1 = gradients(model, world_model_loss(model(obs, act))[0])
    g2 = gradients(model, 2 * world_model_loss(model(obs, act))[0])
    for k in g1:
        assert torch.allclose(g2[k], 2 * g1[k], rtol=1e-12, atol=1e-15)


# training


@pytest.fixture(scope="module")
def tiny_ds():
    return build_dataset(DatasetSpec("tiny", 1, "ORIGINAL", 32, length=40), seed=0)


def test_cosine_schedule_endpoints():
    assert cosine_lr(0, 10, 1e-3, 1e-4) == 1e-3
    assert cosine_lr(9, 10, 1e-3, 1e-4) == pytest.approx(1e-4)


def test_zero_lr_leaves_parameters(tiny_ds):
    m = new_model(TINY, tiny_ds, 0)
    before = {k: v.clone() for k, v in m.state_dict().items()}
    train(m, tiny_ds, TrainConfig(lr=0.0, lr_final=0.0, epochs=1, batch=8))
    assert all(torch.equal(before[k], v) for k, v in m.state_dict().items())


def test_training_is_deterministic(tiny_ds):
    cfg = TrainConfig(epochs=2, batch=8, seed=5)
    a = train(new_model(TINY, tiny_ds, 1), tiny_ds, cfg)
    b = train(new_model(TINY, tiny_ds, 1), tiny_ds, cfg)
    assert a.epoch_loss == b.epoch_loss
    sa, sb = a.model.state_dict(), b.model.state_dict()
    assert all(torch.equal(sa[k], sb[k]) for k in sa)


def test_training_loss_halves_on_one_env(tiny_ds):
    r = train(new_model(TINY, tiny_ds, 0), tiny_ds, TrainConfig(epochs=15, batch=8, lr=3e-3, lr_final=3e-4))
    assert r.epoch_loss[-1] <= 0.5 * r.epoch_loss[0]


def test_training_snapshots_and_empty_dataset(tiny_ds):
    r = train(new_model(TINY, tiny_ds, 0), tiny_ds, TrainConfig(epochs=2, batch=16), snapshot_epochs=(1,))
    assert set(r.checkpoints) == {1}
    with pytest.raises(ConfigError):
        train(new_model(TINY, tiny_ds, 0), tiny_ds.subset([]), TrainConfig(epochs=1))


# evaluation


class _OracleModel(torch.nn.Module):
    """Latent = raw observation; the 'temporal core' integrates the true dynamics."""

    def __init__(self, params):
        super().__init__()
        self.cfg = GsaConfig(D=4, L=1, heads=1, mem_len=1)
        self.dec = torch.nn.Linear(4, 4).double()
        self.params = params

    def normalize(self, o):
        return o

    def encode_obs(self, o):
        return o, torch.ones_like(o)

    def decode_latent(self, h):
        return h, torch.ones_like(h)

    def decode_obs(self, s):
        return s

    def initial_state(self, batch):
        return GsaState([], [], [])

    def forward_recurrent(self, state, s_t, a_t):
        nxt = step_dynamics(self.params, s_t.numpy(), a_t.numpy())
        return torch.from_numpy(nxt), state


def test_perfect_oracle_has_zero_error():
    ds = build_dataset(DatasetSpec("o", 2, "SCOPE1", 3, length=30), seed=2)
    # regenerate the rows in float64 so the oracle is exact
    obs = ds.observations.astype(np.float64)
    for t in range(30):
        obs[:, t + 1] = step_dynamics(ds.params, obs[:, t], ds.actions[:, t])
    ds.observations = obs
    tab = evaluate_icl(_OracleModel(ds.params), ds, T_grid=(1, 5, 10), k_list=(1, 4))
    assert tab.errors.shape == (6, 3, 2)
    assert np.abs(tab.errors).max() < 1e-20


def test_evaluate_skips_impossible_T(tiny_ds, caplog):
    m = new_model(TINY, tiny_ds, 0)
    tab = evaluate_icl(m, tiny_ds, T_grid=(0, 1, 5, 500), k_list=(1, 3))
    assert tab.T_grid == (1, 5)
    assert "T=500" in caplog.text and "T=0" in caplog.text


def test_rollout_substitute_with_true_latent_changes_nothing(tiny_ds):
    m = new_model(TINY, tiny_ds, 0).double()
    obs = torch.as_tensor(tiny_ds.observations[:4]).double()
    act = torch.as_tensor(tiny_ds.actions[:4].astype(np.int64))
    s, _ = m.encode_obs(m.normalize(obs))
    base = rollout_errors(m, obs, act, (10, 20), (1, 8))
    same = rollout_errors(m, obs, act, (10, 20), (1, 8), substitute={5: s[:, 5]})
    assert torch.equal(base, same)


def test_export_memory_states(tiny_ds):
    m = new_model(TINY, tiny_ds, 0)
    sub = tiny_ds.subset(np.arange(3))
    a = export_memory_states(m, sub, layers=[1])
    b = export_memory_states(m, sub, layers=[1])
    width = TINY.heads * TINY.mem_len * (2 * TINY.head_dim + 1)
    assert a["states"][1].shape == (3, 40, width)
    assert np.array_equal(a["states"][1], b["states"][1])


# checkpoints


def test_checkpoint_round_trip(tmp_path, tiny_ds):
    m = new_model(TINY, tiny_ds, 0)
    gen = torch.Generator().manual_seed(9)
    torch.rand(3, generator=gen)
    save_checkpoint(tmp_path / "m.ckpt", m, step=17, generator=gen)
    back, header = load_checkpoint(tmp_path / "m.ckpt")
    assert header["step"] == 17 and back.cfg == TINY
    for k, v in m.state_dict().items():
        assert torch.equal(back.state_dict()[k], v)
    g2 = restore_generator(header)
    assert torch.equal(torch.rand(4, generator=g2), torch.rand(4, generator=gen))
    names = [t["name"] for t in header["tensors"]]
    assert names == list(m.state_dict())


def test_checkpoint_rejects_foreign_file(tmp_path):
    (tmp_path / "x").write_bytes(b"hello")
    with pytest.raises(ConfigError):
        load_checkpoint(tmp_path / "x")
