import numpy as np
import pytest

from photodepth import synth
from photodepth.core import DegenerateBatchError, InputError, NumericalError, ParamBlock, Rng
from photodepth.geometry import Camera, Pose
from photodepth.losses import LossConfig, smoothness_backward
from photodepth.optim import (
    INIT_POSE_NOISE,
    AdamMoments,
    OptimConfig,
    SceneState,
    adam_step,
    evaluate,
    forward_backward,
    gradcheck,
    lr_factor,
    perturbed_truth_state,
    solve,
)

from conftest import truth_state


def _grad_norm(state):
    return float(np.sqrt(sum(np.sum(b.grads**2) for b in state.blocks())))


def _small_state(scene, learn=False, pose_noise=INIT_POSE_NOISE):
    target, supports = synth.scene_frames(scene)
    return SceneState.initial(target.image, [(k, f.image) for k, f in supports.items()],
                              camera=None if learn else scene.camera, learn_intrinsics=learn,
                              pose_noise=pose_noise, rng=Rng(0))


# ---- forward / backward


def _stationarity(scene):
    st, _ = truth_state(scene)
    loss, _ = forward_backward(st, LossConfig(smoothness_weight=0.0))
    g_true = _grad_norm(st)
    disp_mean = float(np.mean(np.abs(st.disparity.grads)))
    init = _small_state(scene)
    init.disparity.values[:] = np.random.default_rng(0).normal(0, 1, len(init.disparity))
    forward_backward(init, LossConfig(smoothness_weight=0.0))
    return loss, g_true / _grad_norm(init), disp_mean


def test_truth_is_near_stationary(corner_scene):
    loss, ratio, disp_mean = _stationarity(corner_scene)
    assert loss < 1e-3
    assert disp_mean < 1e-6
    # measured ~3%: bilinear resampling biases the pose optimum slightly
    assert ratio < 5e-2


@pytest.mark.xfail(strict=True, reason="resampling bias leaves ~3% residual pose gradient at the truth")
def test_truth_gradient_below_one_percent_of_init(corner_scene):
    assert _stationarity(corner_scene)[1] < 1e-2


def test_disparity_gradient_at_truth_pose(small_scene):
    target, supports = synth.scene_frames(small_scene)
    st = perturbed_truth_state(target.image, [(k, f.image) for k, f in supports.items()], target.gt_depth,
                               small_scene.camera, small_scene.frames, np.random.default_rng(0),
                               learn_intrinsics=False, pose_noise=0.0)
    rep = gradcheck(st, blocks=("disparity",), rng=Rng(0))
    assert rep.checked > 100
    assert rep.max_rel_error < 1e-4


def test_gradcheck_all_blocks():
    scene = synth.make_scene(Rng(0), synth.two_plane_spec(16, 24))
    target, supports = synth.scene_frames(scene)
    st = perturbed_truth_state(target.image, [(k, f.image) for k, f in supports.items()], target.gt_depth,
                               scene.camera, scene.frames, np.random.default_rng(0))
    rep = gradcheck(st, rng=Rng(0))
    assert set(rep.per_block) == {"disparity", "pose", "intrinsics"}
    assert rep.passed(1e-4), rep.worst


def test_gradcheck_smoothness_only(small_scene):
    st = _small_state(small_scene)
    st.disparity.values[:] = np.random.default_rng(2).normal(0, 1, len(st.disparity))
    rep = gradcheck(st, terms="smoothness", rng=Rng(2))
    assert rep.checked > 100 and rep.passed(1e-4)


def test_textureless_scene_reports_degenerate_batch():
    img = np.full((8, 10, 3), 0.5)
    st = SceneState.initial(img, [(-1, img), (1, img)], camera=Camera(8, 8, 5, 4, 10, 8),
                            poses=[Pose(translation=(0.01, 0, 0)), Pose(translation=(-0.01, 0, 0))])
    with pytest.raises(DegenerateBatchError):
        forward_backward(st)
    # the smoothness term alone still has a (zero, for constant disparity) gradient
    forward_backward(st, terms="smoothness")
    assert not st.disparity.grads.any()


def test_smoothness_terms_match_direct_gradient(small_scene):
    st = _small_state(small_scene)
    st.disparity.values[:] = np.random.default_rng(3).normal(0, 1, len(st.disparity))
    forward_backward(st, terms="smoothness")
    s = st.disparity_values()
    expected = (smoothness_backward(s, st.target) * s * (1 - s)).ravel()
    np.testing.assert_allclose(st.disparity.grads, expected, rtol=1e-12)
    assert all(not p.grads.any() for p in st.poses)


def test_gradient_routing_ignores_never_chosen_frame(corner_scene, gen):
    target, supports = synth.scene_frames(corner_scene)
    good = supports[1].image
    # frame -1 is pure noise: never the argmin, and its identity loss never the minimum
    noise_a = gen.random(good.shape)
    noise_b = gen.random(good.shape)

    def run(noise):
        st = SceneState.initial(target.image, [(-1, noise), (1, good)], camera=corner_scene.camera,
                                poses=[Pose(), corner_scene.frames[1]])
        st.disparity.values[:] = truth_state(corner_scene)[0].disparity.values
        st.disparity.values[:] += np.random.default_rng(0).normal(0, 0.2, len(st.disparity))
        _, b = forward_backward(st)
        return st, b

    sa, ba = run(noise_a)
    sb, bb = run(noise_b)
    assert np.array_equal(ba.mask, bb.mask)
    assert not np.any(ba.argmin == 0) and not np.any(bb.argmin == 0)
    assert np.array_equal(sa.disparity.grads, sb.disparity.grads)
    assert not sa.poses[0].grads.any()


def test_forward_backward_zeroes_grads_first(small_scene):
    st = _small_state(small_scene)
    forward_backward(st)
    g1 = st.disparity.grads.copy()
    forward_backward(st)
    assert np.array_equal(g1, st.disparity.grads)


# ---- Adam


def test_adam_zero_grad_no_decay_keeps_values():
    b = ParamBlock(np.array([1.0, -2.0]), "disparity")
    adam_step(b, AdamMoments.zeros(b), OptimConfig(weight_decay=0.0), 1)
    assert b.values.tolist() == [1.0, -2.0]


def _textbook_adam(x, lr, steps, b1=0.9, b2=0.999, eps=1e-8):
    m = v = 0.0
    out = []
    for t in range(1, steps + 1):
        g = 2 * x
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        x = x - lr * (m / (1 - b1**t)) / (np.sqrt(v / (1 - b2**t)) + eps)
        out.append(x)
    return np.array(out)


def test_adam_quadratic_matches_textbook_simulation():
    b = ParamBlock(np.array([1.0]), "disparity")
    m = AdamMoments.zeros(b)
    cfg = OptimConfig(lr=0.1, weight_decay=0.0)
    xs = []
    for t in range(1, 51):
        b.grads[:] = 2 * b.values
        adam_step(b, m, cfg, t)
        xs.append(b.values[0])
    ref = _textbook_adam(1.0, 0.1, 50)
    np.testing.assert_allclose(xs, ref, rtol=1e-12, atol=1e-15)
    # |x| shrinks monotonically until the first sign change (step 11), then
    # momentum overshoots; the run still ends far below the start
    mags = np.abs(ref)
    first_cross = int(np.argmax(np.sign(ref) != np.sign(ref[0])))
    assert first_cross == 11
    assert np.all(np.diff(np.r_[1.0, mags[:first_cross]]) < 0)
    assert mags[-1] < 0.25


def test_adam_identical_blocks_identical_updates(gen):
    g = gen.normal(size=5)
    blocks = [ParamBlock(np.ones(5), "disparity") for _ in range(2)]
    moms = [AdamMoments.zeros(b) for b in blocks]
    for t in range(1, 4):
        for b, m in zip(blocks, moms):
            b.grads[:] = g
            adam_step(b, m, OptimConfig(), t)
    assert np.array_equal(blocks[0].values, blocks[1].values)


def test_decoupled_weight_decay_only_on_decay_tags():
    cfg = OptimConfig(lr=0.1, weight_decay=0.5)
    d = ParamBlock(np.array([2.0]), "disparity")
    p = ParamBlock(np.array([2.0]), "pose")
    adam_step(d, AdamMoments.zeros(d), cfg, 1)
    adam_step(p, AdamMoments.zeros(p), cfg, 1)
    # zero gradient: Adam moves nothing, decay scales by (1 - lr * wd)
    assert d.values[0] == pytest.approx(2.0 * 0.95)
    assert p.values[0] == 2.0


def test_lr_schedule():
    cfg = OptimConfig(iterations=300)
    f = [lr_factor(i, cfg) for i in range(300)]
    assert f[0] == pytest.approx(1 / 15) and f[14] == 1.0
    assert f[15] == 1.0 and f[199] == 1.0
    assert f[200] == 0.1 and f[299] == 0.1


def test_optim_config_validation():
    with pytest.raises(InputError):
        OptimConfig(lr=0)
    with pytest.raises(InputError):
        OptimConfig(beta1=1.0)


# ---- solve


def test_zero_iterations_returns_initialization(small_scene):
    st = _small_state(small_scene, pose_noise=0.0)
    res = solve(st, OptimConfig(iterations=0))
    assert res.iterations == 0
    assert np.all(res.disparity_logits == 0.0)
    np.testing.assert_allclose(res.depth, 1 / 5.005)
    assert res.poses == [Pose(), Pose()]


def test_identity_poses_leave_nothing_to_score(small_scene):
    # every warp reproduces its support exactly, so the strict automask is empty
    with pytest.raises(DegenerateBatchError):
        forward_backward(_small_state(small_scene, pose_noise=0.0))
    _, bundle = forward_backward(_small_state(small_scene))
    assert 0.0 < bundle.diagnostics["mask_coverage"] < 1.0


def test_solve_deterministic(small_scene):
    cfg = OptimConfig(lr=0.05, lr_pose=1e-3, iterations=30)
    a = solve(_small_state(small_scene, learn=True), cfg)
    b = solve(_small_state(small_scene, learn=True), cfg)
    assert np.array_equal(a.depth, b.depth)
    assert np.array_equal(a.loss_trace, b.loss_trace)
    assert a.camera == b.camera


def test_loss_trace_mostly_non_increasing():
    scene = synth.make_scene(Rng(5), synth.two_plane_spec(32, 48))
    target, supports = synth.scene_frames(scene)
    st = SceneState.initial(target.image, [(k, f.image) for k, f in supports.items()], camera=scene.camera,
                            poses=[scene.frames[k] for k in supports], frozen={"pose"})
    res = solve(st, OptimConfig(lr=0.05, iterations=400), LossConfig(smoothness_weight=0.05))
    tr = res.loss_trace
    assert np.all(np.isfinite(tr)) and len(tr) == 400
    warm = 20
    bad = [tr[i + 100] > tr[i] for i in range(warm, len(tr) - 100)]
    assert np.mean(bad) <= 0.05


def test_frozen_blocks_do_not_move(small_scene):
    target, supports = synth.scene_frames(small_scene)
    poses = [small_scene.frames[k] for k in supports]
    st = SceneState.initial(target.image, [(k, f.image) for k, f in supports.items()],
                            camera=small_scene.camera, poses=poses, frozen={"pose"})
    res = solve(st, OptimConfig(lr=0.05, iterations=10))
    assert res.poses == poses


def test_nan_aborts_with_snapshot(small_scene):
    st = _small_state(small_scene)
    st.disparity.values[0] = np.nan
    with pytest.raises(NumericalError) as exc:
        solve(st, OptimConfig(iterations=5))
    assert exc.value.snapshot["iteration"] == 0


def test_scene_state_invariants(small_scene):
    target, supports = synth.scene_frames(small_scene)
    img = target.image
    with pytest.raises(InputError):
        SceneState.initial(img, [(0, img)], camera=small_scene.camera)
    with pytest.raises(InputError):
        SceneState.initial(img, [], camera=small_scene.camera)
    with pytest.raises(InputError):
        SceneState.initial(img, [(1, img)])
    st = SceneState.initial(img, [(1, img), (-1, img)], camera=small_scene.camera)
    assert st.offsets == [-1, 1]


def test_learned_intrinsics_initial_prior(small_scene):
    st = _small_state(small_scene, learn=True)
    cam = st.current_camera()
    assert cam.fx == pytest.approx(0.58 * 24) and cam.fy == pytest.approx(0.58 * 24)
    assert (cam.cx, cam.cy) == (12.0, 8.0)
    assert evaluate(st).total > 0
