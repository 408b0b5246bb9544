import copy

import numpy as np
import pytest
import torch

from flatgrasp.backbone import BackboneConfig
from flatgrasp.policy import (
    GraspAgent,
    PolicyNetwork,
    Snapshot,
    advantage,
    agent_from_snapshot,
    greedy_action,
    normalize_advantages,
    restore,
    sample_action,
    sample_actions,
    snapshot,
    softmax_probs,
)
from flatgrasp.ppo import (
    STAT_KEYS,
    NumericalError,
    PPOConfig,
    Transition,
    batch_tensors,
    clipped_surrogate,
    make_optimizer,
    ppo_loss,
    ppo_update,
)

REDUCED_BB = BackboneConfig(mode="adaptive", channels=2, seed=1, strides=(2, 1, 1))


def fake_batch(agent, n, seed=0, size=224, fixed=None):
    rng = np.random.default_rng(seed)
    fixed = agent.fixed_backbone if fixed is None else fixed
    colors = rng.random((n, 3, size, size)).astype(np.float32)
    with torch.no_grad():
        feats = agent.features(torch.from_numpy(colors).to(next(agent.parameters()).dtype))
        logits, values = agent.policy(feats)
    out = []
    for i in range(n):
        idx, logp = sample_action(logits[i].numpy(), rng)
        out.append(
            Transition(
                idx, logp, float(values[i]), int(rng.integers(2)), i, i,
                features=feats[i].numpy() if fixed else None,
                color=None if fixed else colors[i],
            )
        )
    return out


# -- network ---------------------------------------------------------------------


@pytest.mark.parametrize("mode", ["shared", "independent"])
def test_forward_shapes(mode):
    net = PolicyNetwork(8, 16, mode)
    logits, value = net(torch.rand(2, 8, 56, 56))
    assert logits.shape == (2, 56, 56) and value.shape == (2,)
    probs = torch.softmax(logits.reshape(2, -1), dim=1).sum(dim=1)
    assert torch.all((probs - 1).abs() <= 1e-6)


def test_zero_features_give_uniform_policy():
    net = PolicyNetwork(8, 16)
    logits, _ = net(torch.zeros(1, 8, 56, 56))
    assert torch.all(logits == logits[0, 0, 0])
    p = softmax_probs(logits[0].detach().numpy())
    assert np.allclose(p, 1 / 3136)


def test_independent_mode_duplicates_trunk():
    shared = sum(p.numel() for p in PolicyNetwork(8, 16, "shared").parameters())
    indep = sum(p.numel() for p in PolicyNetwork(8, 16, "independent").parameters())
    trunk = sum(p.numel() for p in PolicyNetwork(8, 16).trunk.parameters())
    assert indep - shared == trunk


def test_bad_inputs_rejected():
    with pytest.raises(ValueError):
        PolicyNetwork(8, 16, "tied")
    with pytest.raises(ValueError):
        PolicyNetwork()(torch.zeros(8, 56, 56))


def test_agent_maps_color_to_action_map():
    agent = GraspAgent()
    logits, value = agent(torch.rand(1, 3, 224, 224))
    assert logits.shape == (1, 56, 56) and value.shape == (1,)


# -- action distribution --------------------------------------------------------------


def test_dominant_logit_is_sampled():
    logits = np.zeros(3136)
    logits[1234] = 50.0
    draws = sample_actions(logits, np.random.default_rng(0), 10_000)
    assert np.mean(draws == 1234) >= 0.999


def test_uniform_logits_sample_uniformly():
    n = 1_000_000
    counts = np.bincount(sample_actions(np.zeros((56, 56)), np.random.default_rng(1), n), minlength=3136)
    p = 1 / 3136
    sigma = np.sqrt(n * p * (1 - p))
    assert np.all(np.abs(counts - n * p) <= 4 * sigma + 1)


def test_single_sample_matches_vectorised_draw():
    logits = np.random.default_rng(2).standard_normal(3136)
    idx, logp = sample_action(logits, np.random.default_rng(7))
    assert idx == sample_actions(logits, np.random.default_rng(7), 1)[0]
    assert logp == pytest.approx(np.log(softmax_probs(logits)[idx]))
    assert logp <= 0


def test_non_finite_logits_rejected():
    with pytest.raises(ValueError):
        sample_action(np.array([0.0, np.nan]), 0)


def test_greedy_picks_unique_max_and_breaks_ties_low():
    logits = np.zeros(3136)
    logits[77] = 1.0
    assert greedy_action(logits)[0] == 77
    assert greedy_action(np.zeros(3136))[0] == 0
    tied = np.zeros(3136)
    tied[[300, 40, 2000]] = 5.0
    assert greedy_action(tied)[0] == 40


# -- advantages ----------------------------------------------------------------------


def test_advantage_arithmetic():
    assert advantage(1, 0.3) == pytest.approx(0.7)
    assert advantage(0, 0.0) == 0.0


def test_advantage_normalisation():
    a = np.array([0.7, -0.2, 0.1, 0.4])
    assert np.allclose(normalize_advantages(a), (a - a.mean()) / a.std())
    assert np.allclose(normalize_advantages(np.full(4, 0.5)), 0.0)


def test_transition_validation():
    with pytest.raises(ValueError):
        Transition(0, -1.0, 0.0, 2, 0, 0)
    with pytest.raises(ValueError):
        Transition(0, 0.5, 0.0, 1, 0, 0)


# -- PPO -----------------------------------------------------------------------------


def test_identity_policy_statistics():
    agent = GraspAgent()
    batch = fake_batch(agent, 8)
    cfg = PPOConfig(normalize_advantage=False)
    inputs, actions, old_logp, adv, returns, from_color = batch_tensors(agent, batch, cfg)
    _, stats = ppo_loss(agent, inputs, actions, old_logp, adv, returns, cfg, from_color)
    assert stats["clip_fraction"] == 0.0
    assert stats["policy_loss"] == pytest.approx(-float(adv.mean()), abs=1e-6)


def test_clipped_branch_has_zero_gradient():
    eps = 0.2
    logp = torch.tensor([np.log(0.5)], dtype=torch.float64, requires_grad=True)
    # ratio 2 > 1.2 with a positive advantage: the clipped term is active
    loss, ratio = clipped_surrogate(logp, torch.tensor([np.log(0.25)], dtype=torch.float64), torch.tensor([1.0], dtype=torch.float64), eps)
    loss.backward()
    assert float(ratio.detach()) == pytest.approx(2.0)
    assert float(logp.grad) == 0.0
    # inside the trust region the gradient is -A * r
    logp2 = torch.tensor([np.log(0.5)], dtype=torch.float64, requires_grad=True)
    loss2, _ = clipped_surrogate(logp2, torch.tensor([np.log(0.45)], dtype=torch.float64), torch.tensor([1.0], dtype=torch.float64), eps)
    loss2.backward()
    assert float(logp2.grad) == pytest.approx(-0.5 / 0.45)


def _relative_error(a, n):
    # gradients that are zero analytically (dead units) compare on an absolute 1e-6 scale
    return abs(a - n) / max(abs(a), abs(n), 1e-6)


def ppo_gradient_check(mode, step=1e-5):
    """Worst relative error between analytic and central-difference gradients, and the count checked."""
    torch.manual_seed(0)
    agent = GraspAgent(REDUCED_BB, mode).double()
    batch = fake_batch(agent, 4, seed=3, size=8)
    cfg = PPOConfig(minibatch_size=1, batch_size=4)
    inputs, actions, old_logp, adv, returns, from_color = batch_tensors(agent, batch, cfg)
    assert agent(inputs)[0].shape[1:] == (4, 4)
    # move away from the identity ratio so the surrogate is not trivially linear
    old_logp = old_logp - 0.05

    def objective():
        return ppo_loss(agent, inputs, actions, old_logp, adv, returns, cfg, from_color)[0]

    agent.zero_grad()
    objective().backward()
    worst = 0.0
    checked = 0
    with torch.no_grad():
        for p in agent.parameters():
            flat, grad = p.data.view(-1), p.grad.view(-1)
            for i in range(flat.numel()):
                old = flat[i].item()
                flat[i] = old + step
                up = objective().item()
                flat[i] = old - step
                down = objective().item()
                flat[i] = old
                worst = max(worst, _relative_error(grad[i].item(), (up - down) / (2 * step)))
                checked += 1
    assert checked == sum(p.numel() for p in agent.parameters())
    return worst, checked


@pytest.mark.parametrize("mode", ["shared", "independent"])
def test_ppo_gradient_matches_finite_differences(mode):
    worst, _ = ppo_gradient_check(mode)
    assert worst <= 1e-4


def test_fixed_backbone_is_untouched_by_updates():
    agent = GraspAgent()
    before = copy.deepcopy(agent.backbone.state_dict())
    opt = make_optimizer(agent, PPOConfig())
    for k in range(3):
        ppo_update(agent, opt, fake_batch(agent, 32, seed=k), PPOConfig(), seed=k)
    after = agent.backbone.state_dict()
    assert sum(float((before[n] - after[n]).abs().sum()) for n in before) == 0.0


def test_adaptive_backbone_moves():
    agent = GraspAgent(BackboneConfig(mode="adaptive"))
    before = copy.deepcopy(agent.backbone.state_dict())
    opt = make_optimizer(agent, PPOConfig())
    ppo_update(agent, opt, fake_batch(agent, 16, seed=1), PPOConfig(), seed=0)
    after = agent.backbone.state_dict()
    assert any(not torch.equal(before[n], after[n]) for n in before)


@pytest.mark.parametrize("mode", ["shared", "independent"])
def test_update_statistics_and_probability_conservation(mode):
    agent = GraspAgent(ac_mode=mode)
    opt = make_optimizer(agent, PPOConfig())
    batch = fake_batch(agent, 16, seed=2)
    stats = ppo_update(agent, opt, batch, PPOConfig(), seed=0)
    assert set(stats) == set(STAT_KEYS)
    assert all(np.isfinite(v) for v in stats.values())
    logits, _ = agent.policy(torch.from_numpy(np.stack([t.features for t in batch[:2]])))
    sums = torch.softmax(logits.reshape(2, -1), dim=1).sum(dim=1)
    assert torch.all((sums - 1).abs() <= 1e-6)


def test_update_is_seeded():
    runs = []
    for _ in range(2):
        agent = GraspAgent()
        opt = make_optimizer(agent, PPOConfig())
        ppo_update(agent, opt, fake_batch(agent, 32, seed=4), PPOConfig(), seed=11)
        runs.append(agent.policy.state_dict())
    assert all(torch.equal(runs[0][k], runs[1][k]) for k in runs[0])


def test_empty_and_undersized_batches_rejected():
    agent = GraspAgent()
    opt = make_optimizer(agent, PPOConfig())
    with pytest.raises(ValueError):
        ppo_update(agent, opt, [], PPOConfig())
    with pytest.raises(ValueError):
        ppo_update(agent, opt, fake_batch(agent, 4), PPOConfig())


def test_non_finite_loss_rolls_back():
    agent = GraspAgent()
    opt = make_optimizer(agent, PPOConfig())
    ppo_update(agent, opt, fake_batch(agent, 16, seed=5), PPOConfig(), seed=0)
    params = copy.deepcopy(agent.state_dict())
    opt_state = copy.deepcopy(opt.state_dict())
    batch = fake_batch(agent, 16, seed=6)
    for t in batch:
        t.features = np.full_like(t.features, np.nan)
    with pytest.raises(NumericalError):
        ppo_update(agent, opt, batch, PPOConfig(), seed=0)
    assert all(torch.equal(params[k], agent.state_dict()[k]) for k in params)
    st = opt.state_dict()["state"]
    for k, v in opt_state["state"].items():
        assert torch.equal(v["exp_avg"], st[k]["exp_avg"])


def test_ppo_config_validation():
    for bad in ({"clip_eps": 0.0}, {"clip_eps": 1.0}, {"lr": 0.0}, {"minibatch_size": 128}):
        with pytest.raises(ValueError):
            PPOConfig(**bad)


# -- snapshots ------------------------------------------------------------------------


def test_snapshot_round_trip_is_bit_exact():
    agent = GraspAgent(ac_mode="independent")
    x = torch.rand(2, 3, 224, 224)
    snap = snapshot(agent)
    other = agent_from_snapshot(snap)
    a, b = agent(x), other(x)
    assert torch.equal(a[0], b[0]) and torch.equal(a[1], b[1])


def test_snapshot_is_immutable_and_isolated():
    agent = GraspAgent()
    snap = snapshot(agent)
    frozen = [a.copy() for a in snap.arrays]
    with pytest.raises(ValueError):
        snap.arrays[-1][0] = 1.0
    opt = make_optimizer(agent, PPOConfig())
    ppo_update(agent, opt, fake_batch(agent, 16), PPOConfig())
    assert all(np.array_equal(a, b) for a, b in zip(frozen, snap.arrays))


def test_restore_rejects_mismatch():
    snap = snapshot(GraspAgent(BackboneConfig(channels=4)))
    with pytest.raises(ValueError):
        restore(GraspAgent(), snap)
    good = snapshot(GraspAgent())
    stale = Snapshot(good.version + 1, good.architecture, good.names, good.arrays)
    with pytest.raises(ValueError):
        restore(GraspAgent(), stale)
