import numpy as np
import pytest

from duplex.optim import OptimizerState, adamw_step, global_grad_norm
from duplex.params import ParamTree, UNDERSTANDING, GENERATION, ARTIFACT, branch_of
from duplex.tensor import Tensor, backward


def make_tree(values):
    tree = ParamTree()
    for name, v in values.items():
        tree.register(name, np.asarray(v, dtype=np.float64))
    return tree


def test_branch_tags():
    assert branch_of("und.embed.w") == UNDERSTANDING
    assert branch_of("gen.layer0.mlp.w1") == GENERATION
    assert branch_of("codec.enc1.w") == ARTIFACT
    with pytest.raises(KeyError):
        branch_of("stray.w")


def test_duplicate_name_rejected():
    tree = make_tree({"und.a": [1.0]})
    with pytest.raises(KeyError):
        tree.register("und.a", np.zeros(1))


def test_set_value_shape_guard():
    tree = make_tree({"und.a": np.zeros((2, 3))})
    with pytest.raises(ValueError):
        tree.set_value("und.a", np.zeros((3, 2)))


def test_zero_grads_and_clear():
    tree = make_tree({"und.a": [1.0, 2.0]})
    backward((tree["und.a"] * 3.0).sum())
    tree.zero_grads()
    np.testing.assert_array_equal(tree["und.a"].grad, [0.0, 0.0])
    tree.clear_grads()
    assert tree["und.a"].grad is None


def test_names_tagged():
    tree = make_tree({"und.a": [1.0], "gen.b": [1.0], "und.c": [1.0]})
    assert tree.names_tagged(UNDERSTANDING) == ["und.a", "und.c"]
    assert tree.names_tagged(GENERATION) == ["gen.b"]


# -- adamw ----------------------------------------------------------------------

def test_zero_grad_leaves_params_unchanged():
    tree = make_tree({"und.a": [1.0, -2.0]})
    tree["und.a"].grad = np.zeros(2)
    before = tree["und.a"].data.copy()
    opt = OptimizerState.for_params(tree, ["und.a"])
    adamw_step(tree, opt, lr=0.1)
    np.testing.assert_array_equal(tree["und.a"].data, before)


def test_single_scalar_first_step_update_is_minus_lr():
    # g=1: m_hat = 1, v_hat = 1 -> update ~ -lr/(1+eps)
    tree = make_tree({"und.a": [0.0]})
    tree["und.a"].grad = np.ones(1)
    opt = OptimizerState.for_params(tree, ["und.a"])
    adamw_step(tree, opt, lr=0.01)
    np.testing.assert_allclose(tree["und.a"].data, [-0.01], rtol=1e-12)


def test_hand_derived_two_steps():
    tree = make_tree({"und.a": [0.5]})
    opt = OptimizerState.for_params(tree, ["und.a"])
    b1, b2, eps = 0.9, 0.95, 1e-15
    p, m, v = 0.5, 0.0, 0.0
    for step, g in enumerate([0.3, -0.2], start=1):
        tree["und.a"].grad = np.array([g])
        adamw_step(tree, opt, lr=0.1)
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        mh, vh = m / (1 - b1 ** step), v / (1 - b2 ** step)
        p = p - 0.1 * mh / (np.sqrt(vh) + eps)
        np.testing.assert_allclose(tree["und.a"].data, [p], rtol=1e-12)


def test_global_clip_before_moments():
    # gradient of norm 10 must enter moments scaled to norm 1
    tree = make_tree({"und.a": [0.0]})
    tree["und.a"].grad = np.array([10.0])
    opt = OptimizerState.for_params(tree, ["und.a"])
    norm = adamw_step(tree, opt, lr=1.0)
    assert norm == 10.0
    np.testing.assert_allclose(opt.m["und.a"], [0.1 * 1.0])  # (1-b1) * clipped g
    np.testing.assert_allclose(opt.v["und.a"], [0.05 * 1.0])
    # stored gradient untouched
    np.testing.assert_array_equal(tree["und.a"].grad, [10.0])


def test_clip_is_global_across_params():
    tree = make_tree({"und.a": [0.0], "und.b": [0.0]})
    tree["und.a"].grad = np.array([3.0])
    tree["und.b"].grad = np.array([4.0])
    opt = OptimizerState.for_params(tree, ["und.a", "und.b"])
    norm = adamw_step(tree, opt, lr=1.0)
    assert norm == 5.0
    np.testing.assert_allclose(opt.m["und.a"], [0.1 * 3.0 / 5.0])
    np.testing.assert_allclose(opt.m["und.b"], [0.1 * 4.0 / 5.0])


def test_missing_gradient_raises():
    tree = make_tree({"und.a": [0.0]})
    opt = OptimizerState.for_params(tree, ["und.a"])
    with pytest.raises(ValueError, match="missing gradient"):
        adamw_step(tree, opt, lr=0.1)


def test_frozen_params_not_in_state_untouched():
    tree = make_tree({"und.a": [1.0], "gen.b": [2.0]})
    tree["und.a"].grad = np.array([0.7])
    before = tree["gen.b"].data.copy()
    opt = OptimizerState.for_params(tree, ["und.a"])
    adamw_step(tree, opt, lr=0.1)
    assert np.array_equal(tree["gen.b"].data, before)
    assert "gen.b" not in opt.m


def test_adamw_deterministic():
    def run():
        tree = make_tree({"und.a": np.linspace(-1, 1, 7)})
        opt = OptimizerState.for_params(tree, ["und.a"])
        rng = np.random.default_rng(0)
        for _ in range(5):
            tree["und.a"].grad = rng.standard_normal(7)
            adamw_step(tree, opt, lr=0.02)
        return tree["und.a"].data.tobytes()

    assert run() == run()


def test_defaults_match_recipe():
    opt = OptimizerState(names=[])
    assert opt.betas == (0.9, 0.95)
    assert opt.eps == 1e-15
    assert opt.weight_decay == 0.0
    assert opt.clip_norm == 1.0


def test_global_grad_norm_value():
    tree = make_tree({"und.a": np.zeros(2), "und.b": np.zeros(1)})
    tree["und.a"].grad = np.array([1.0, 2.0])
    tree["und.b"].grad = np.array([2.0])
    assert global_grad_norm(tree, ["und.a", "und.b"]) == 3.0
