import numpy as np
import pytest
import torch

from atm.config import TrainConfig
from atm.policy import (
    ObsHistory,
    TrackGuidedPolicy,
    bc_loss,
    grid_query_points,
    load_policy,
    rollout_step,
    stack_indices,
    train_policy,
    window_batches,
    DemoSet,
)


def tiny_policy(variant="atm", **kw):
    args = dict(
        variant=variant, num_views=1, image_size=16, image_patch_size=8, num_points=4, track_length=4,
        action_dim=4, proprio_dim=3, frame_stack=3, dim=16, spatial_depth=1, temporal_depth=1, heads=2,
        head_hidden=16, lang_dim=8,
    )
    args.update(kw)
    torch.manual_seed(0)
    return TrackGuidedPolicy(**args).eval()


def inputs(B=2, S=3, V=1, K=4, L=4, size=16, seed=0, dtype=torch.float32):
    g = torch.Generator().manual_seed(seed)
    return (
        torch.rand(B, S, V, size, size, 3, generator=g, dtype=dtype),
        torch.rand(B, S, V, K, L, 2, generator=g, dtype=dtype),
        torch.randn(B, S, 3, generator=g, dtype=dtype),
        torch.randn(B, 8, generator=g, dtype=dtype),
    )


def test_grid_examples():
    g = grid_query_points(32, 4, 8)
    assert g.shape == (32, 2)
    np.testing.assert_array_equal(g, grid_query_points(32, 4, 8))
    np.testing.assert_allclose(grid_query_points(1, 1, 1), [[0.5, 0.5]])
    with pytest.raises(ValueError):
        grid_query_points(30, 4, 8)


def test_output_shapes_and_width():
    for V, K in [(1, 4), (2, 6)]:
        m = tiny_policy(num_views=V, num_points=K)
        f, t, p, l = inputs(V=V, K=K)
        assert m.spatial_encode(f, t).shape == (2, 3, 16)
        assert m(f, t, p, l).shape == (2, 3, 4)


def test_missing_view_raises():
    m = tiny_policy(num_views=2)
    f, t, p, l = inputs(V=1)
    with pytest.raises(ValueError, match="view"):
        m(f, t, p, l)


def test_bc_needs_language():
    m = tiny_policy("bc")
    f, t, p, _ = inputs()
    with pytest.raises(ValueError, match="language"):
        m(f, t, p, None)


def test_bc_never_reads_tracks():
    m = tiny_policy("bc")
    f, t, p, l = inputs()
    a = m(f, t, p, l)
    b = m(f, torch.randn_like(t) * 100, p, l)
    c = m(f, None, p, l)
    torch.testing.assert_close(a, b, rtol=0, atol=0)
    torch.testing.assert_close(a, c, rtol=0, atol=0)


def test_track_token_order_does_not_matter():
    m = tiny_policy(late_fusion=False)
    f, t, p, l = inputs()
    perm = torch.tensor([2, 0, 3, 1])
    a = m.spatial_encode(f, t)
    b = m.spatial_encode(f, t[:, :, :, perm])
    torch.testing.assert_close(a, b, rtol=0, atol=1e-6)


@pytest.mark.parametrize("use_proprio", [False, True])
def test_temporal_causality(use_proprio):
    m = tiny_policy(use_proprio=use_proprio)
    g = torch.Generator().manual_seed(1)
    for trial in range(100):
        spatial = torch.randn(2, 3, 16, generator=g)
        proprio = torch.randn(2, 3, 3, generator=g)
        s = int(torch.randint(0, 2, (1,), generator=g))
        a = m.temporal_decode(spatial, proprio)
        sp2, pr2 = spatial.clone(), proprio.clone()
        sp2[:, s + 1 :] = torch.randn_like(sp2[:, s + 1 :])
        pr2[:, s + 1 :] = torch.randn_like(pr2[:, s + 1 :])
        b = m.temporal_decode(sp2, pr2)
        assert torch.equal(a[:, : s + 1], b[:, : s + 1])


def test_full_policy_causal_over_frames():
    m = tiny_policy()
    f, t, p, l = inputs()
    a = m(f, t, p, l)
    f2, t2 = f.clone(), t.clone()
    f2[:, 2] = torch.rand_like(f2[:, 2])
    t2[:, 2] = torch.rand_like(t2[:, 2])
    b = m(f2, t2, p, l)
    assert torch.equal(a[:, :2], b[:, :2]) and not torch.equal(a[:, 2], b[:, 2])


def test_temporal_length_checks():
    m = tiny_policy(use_proprio=True)
    assert m.temporal_decode(torch.randn(1, 1, 16), torch.randn(1, 1, 3)).shape == (1, 1, 16)
    with pytest.raises(ValueError):
        m.temporal_decode(torch.randn(1, 4, 16), torch.randn(1, 4, 3))
    with pytest.raises(ValueError):
        m.temporal_decode(torch.randn(1, 2, 16), torch.randn(1, 3, 3))


def test_head_at_zero_input_depends_only_on_biases():
    m = tiny_policy()
    lin = [l for l in m.head if isinstance(l, torch.nn.Linear)]
    gelu = torch.nn.functional.gelu
    expected = lin[2].bias + lin[2].weight @ gelu(lin[1].bias + lin[1].weight @ gelu(lin[0].bias))
    out = m.action_head(torch.zeros(16), torch.zeros(1, 4, 4, 2))
    torch.testing.assert_close(out, expected)
    single = tiny_policy(head_hidden=16)
    single.head = torch.nn.Sequential(torch.nn.Linear(16 + 32, 4))
    torch.testing.assert_close(single.action_head(torch.zeros(16), torch.zeros(1, 4, 4, 2)), single.head[0].bias)


def test_late_fusion_path_is_live_without_early_fusion():
    m = tiny_policy(early_fusion=False)
    f, t, p, l = inputs()
    a = m(f, t, p, l)
    b = m(f, t + 0.1 * torch.randn_like(t), p, l)
    assert (a - b).abs().max() > 1e-6


def _grad_norms(m, f, t, p, l):
    t = t.clone().requires_grad_()
    m.zero_grad()
    m(f, t, p, l).sum().backward()
    g = lambda mod: sum(float(x.grad.abs().sum()) for x in mod.parameters() if x.grad is not None)
    tg = 0.0 if t.grad is None else float(t.grad.abs().sum())
    return g(m.track_embed), tg, m.head[0].in_features


def test_gradient_flow_probes():
    f, t, p, l = inputs()
    early, tg_early, width_early = _grad_norms(tiny_policy(late_fusion=False), f, t, p, l)
    late, tg_late, width_late = _grad_norms(tiny_policy(early_fusion=False), f, t, p, l)
    both, tg_both, width_both = _grad_norms(tiny_policy(), f, t, p, l)
    assert early > 0 and tg_early > 0 and width_early == 16
    assert late == 0 and tg_late > 0 and width_late == 16 + 4 * 4 * 2
    assert both > 0 and tg_both > 0 and width_both == width_late
    _, tg_bc, _ = _grad_norms(tiny_policy("bc"), f, t, p, l)
    assert tg_bc == 0


def test_gradcheck_double():
    m = tiny_policy(image_size=8, image_patch_size=4, num_points=2, track_length=2, frame_stack=2, dim=4, heads=1, head_hidden=4).double()
    f, t, p, l = inputs(S=2, K=2, L=2, size=8, dtype=torch.float64)
    names = [n for n, _ in m.named_parameters()]

    def fn(frames, tracks, *ps):
        return torch.func.functional_call(m, dict(zip(names, ps)), (frames, tracks, p, l))

    params = [x.detach().clone().requires_grad_() for x in m.parameters()]
    assert torch.autograd.gradcheck(fn, (f.requires_grad_(), t.requires_grad_(), *params), eps=1e-6, atol=1e-8, rtol=1e-4)


@pytest.mark.parametrize("delta", [0.0, 0.5, -2.0])
def test_bc_loss_offset(delta):
    target = torch.randn(3, 4)
    assert float(bc_loss(target + delta, target)) == pytest.approx(delta**2, abs=1e-6)
    assert float(bc_loss(torch.cat([target + delta] * 2), torch.cat([target] * 2))) == pytest.approx(delta**2, abs=1e-6)
    with pytest.raises(ValueError):
        bc_loss(target, target[:2])


def test_frame_stack_padding():
    np.testing.assert_array_equal(stack_indices(0, 4), [0, 0, 0, 0])
    np.testing.assert_array_equal(stack_indices(5, 3), [3, 4, 5])


def test_windows_supervise_each_step_once():
    demos = DemoSet(["v"], [np.zeros((7, 1, 2, 2, 3)), np.zeros((3, 1, 2, 2, 3))], [], [], [], [None, None], None, None)
    items = window_batches(demos, 3, np.random.default_rng(0))
    for e, T in enumerate([7, 3]):
        steps = np.concatenate([idx[valid] for ee, idx, valid in items if ee == e])
        assert sorted(steps.tolist()) == list(range(T))


def policy_config(**pol):
    p = dict(epochs=2, batch_size=8, dim=16, spatial_depth=1, temporal_depth=1, heads=2, head_hidden=16,
             frame_stack=2, image_patch_size=16, num_points=4, grid_rows=2, grid_cols=2, track_length=4, augment=False)
    p.update(pol)
    return TrainConfig.from_dict({"policy": p, "tracker": {"dim": 16, "depth": 1, "heads": 2, "image_patch_size": 16, "epochs": 1, "batch_size": 32}})


@pytest.fixture
def tracker_ckpt(synthetic_dataset, tmp_path):
    from atm.annotation import annotate_dataset
    from atm.config import AnnotationConfig
    from atm.track_transformer import train_track_transformer

    annotate_dataset(synthetic_dataset, AnnotationConfig(), seed=0)
    path = tmp_path / "tracker.pt"
    train_track_transformer(synthetic_dataset, policy_config(), path)
    return path


def test_variant_tracker_mismatch_errors(synthetic_dataset, tmp_path):
    with pytest.raises(ValueError, match="ATM variant needs"):
        train_policy(synthetic_dataset, policy_config(), "atm", tmp_path / "p.pt")
    with pytest.raises(ValueError, match="BC variant"):
        train_policy(synthetic_dataset, policy_config(), "bc", tmp_path / "p.pt", tracker_paths=["x.pt"])


def test_bc_trains_without_tracker_and_is_reproducible(synthetic_dataset, tmp_path):
    a = train_policy(synthetic_dataset, policy_config(), "bc", tmp_path / "a.pt")
    b = train_policy(synthetic_dataset, policy_config(), "bc", tmp_path / "b.pt")
    assert np.isfinite(a["final_train_loss"])
    assert abs(a["final_train_loss"] - b["final_train_loss"]) <= 1e-5


@pytest.mark.parametrize("augment", [False, True])
def test_atm_rollout_recomputes_tracks(synthetic_dataset, tracker_ckpt, tmp_path, augment):
    from atm.synthetic_env import DEFAULT_TASKS, TabletopEnv, proprio_vector

    out = tmp_path / "atm.pt"
    train_policy(synthetic_dataset, policy_config(augment=augment), "atm", out, tracker_paths=[str(tracker_ckpt)])
    pol = load_policy(out)
    env = TabletopEnv()
    h = ObsHistory(pol.model.frame_stack)
    state, frames = env.reset(DEFAULT_TASKS[0], 3)
    h.push(frames["agentview"][None], proprio_vector(state))
    a1 = rollout_step(pol, [h], [DEFAULT_TASKS[0].instruction])
    state, frames, _ = env.step(a1[0])
    h.push(frames["agentview"][None], proprio_vector(state))
    rollout_step(pol, [h], [DEFAULT_TASKS[0].instruction])
    assert h.tracks[0] is not None and h.tracks[1] is not None
    assert h.tracks[1].shape == (1, 4, 4, 2)
    # identical history -> identical action
    h2 = ObsHistory(pol.model.frame_stack)
    h2.push(h.frames[0], h.proprio[0])
    np.testing.assert_array_equal(a1, rollout_step(pol, [h2], [DEFAULT_TASKS[0].instruction]))
    assert a1.shape == (1, 4) and np.isfinite(a1).all()


def test_track_truncation_lengths(synthetic_dataset, tracker_ckpt, tmp_path):
    for L in (4, 8, 16):
        out = tmp_path / f"atm{L}.pt"
        train_policy(synthetic_dataset, policy_config(track_length=L, epochs=1), "atm", out, tracker_paths=[str(tracker_ckpt)])
        pol = load_policy(out)
        assert pol.track_length == L and pol.model.track_embed.in_features == 2 * L
