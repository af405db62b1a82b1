import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from zoneseg.errors import ConfigError, UsageError
from zoneseg.optim import Adam, AdamState, adam_step, glorot_bound, glorot_uniform_init
from zoneseg.tensor import Tensor


def test_glorot_bound_unit_fans():
    # fan_in = fan_out = 3 -> sqrt(6 / 6)
    assert glorot_bound((3, 3)) == 1.0
    w = glorot_uniform_init((3, 3), seed=0)
    assert np.all(np.abs(w) <= 1.0)


def test_glorot_receptive_field_counts_in_fans():
    assert glorot_bound((4, 2, 1, 3, 3)) == pytest.approx(np.sqrt(6.0 / (2 * 9 + 4 * 9)))


@given(st.integers(1, 8), st.integers(1, 8), st.sampled_from([(1, 1, 1), (1, 3, 3), (3, 3, 3), (2, 2, 2)]))
def test_glorot_samples_inside_bound(out_ch, in_ch, extent):
    shape = (out_ch, in_ch) + extent
    w = glorot_uniform_init(shape, seed=[out_ch, in_ch])
    assert w.shape == shape
    assert np.all(np.abs(w) <= glorot_bound(shape))


def test_glorot_deterministic():
    a = glorot_uniform_init((8, 4, 3, 3, 3), seed=11)
    b = glorot_uniform_init((8, 4, 3, 3, 3), seed=11)
    assert a.tobytes() == b.tobytes()
    assert a.tobytes() != glorot_uniform_init((8, 4, 3, 3, 3), seed=12).tobytes()


def test_glorot_sample_mean_near_zero():
    w = glorot_uniform_init((1000, 100), seed=3, dtype=np.float64)
    assert abs(w.mean()) < 0.01


def test_glorot_zero_fan():
    with pytest.raises(ConfigError):
        glorot_uniform_init((0, 3, 3), seed=0)
    with pytest.raises(ConfigError):
        glorot_uniform_init((5,), seed=0)


def param(values):
    return Tensor(np.asarray(values, dtype=np.float64), requires_grad=True, dtype=np.float64)


# lr * |g| / (|g| + eps) reaches 0.0999 only once |g| exceeds about 1e-5
@given(st.floats(1e-4, 1e3) | st.floats(-1e3, -1e-4))
def test_adam_first_step_moves_by_lr(g):
    p = param(np.zeros((2, 2)))
    adam_step([p], [np.full((2, 2), g)], AdamState(), lr=0.1)
    step = np.abs(p.data)
    assert np.all((step >= 0.0999) & (step <= 0.1))
    assert np.all(np.sign(p.data) == -np.sign(g))


def test_adam_hand_computed_second_step():
    p = param([[1.0]])
    state = AdamState()
    adam_step([p], [np.array([[2.0]])], state, lr=0.01)
    adam_step([p], [np.array([[-1.0]])], state, lr=0.01)
    m = 0.9 * 0.1 * 2.0 + 0.1 * -1.0
    v = 0.999 * 0.001 * 4.0 + 0.001 * 1.0
    m_hat, v_hat = m / (1 - 0.9**2), v / (1 - 0.999**2)
    expected = 1.0 - 0.01 * (2.0 / (2.0 + 1e-8)) - 0.01 * m_hat / (np.sqrt(v_hat) + 1e-8)
    assert p.data[0, 0] == pytest.approx(expected, rel=1e-12)
    assert state.step_count == 2


def test_adam_zero_grad_no_decay_is_noop():
    p = param(np.arange(6.0).reshape(2, 3))
    before = p.data.copy()
    adam_step([p], [np.zeros((2, 3))], AdamState(), lr=0.1)
    np.testing.assert_array_equal(p.data, before)


def test_adam_l2_shrinks_weights_not_biases():
    w = param([[0.5, -0.5], [2.0, -3.0]])
    b = param([0.5, -0.5])
    w0, b0 = np.abs(w.data).copy(), b.data.copy()
    adam_step([w, b], [np.zeros((2, 2)), np.zeros(2)], AdamState(), lr=1e-3, l2_lambda=1e-2)
    assert np.all(np.abs(w.data) < w0)
    np.testing.assert_array_equal(b.data, b0)


def test_adam_explicit_decay_mask():
    a, b = param([[1.0]]), param([[1.0]])
    adam_step([a, b], [np.zeros((1, 1))] * 2, AdamState(), lr=1e-3, l2_lambda=1.0, decay_mask=[False, True])
    assert a.data[0, 0] == 1.0 and b.data[0, 0] < 1.0


def test_adam_shape_mismatch():
    with pytest.raises(UsageError):
        adam_step([param([[1.0]])], [np.zeros(2)], AdamState(), lr=0.1)
    with pytest.raises(UsageError):
        adam_step([param([[1.0]])], [], AdamState(), lr=0.1)


def test_adam_state_validation():
    with pytest.raises(ConfigError):
        AdamState(beta1=1.0)
    with pytest.raises(ConfigError):
        AdamState(epsilon=0.0)
    with pytest.raises(ConfigError):
        Adam([param([1.0])], lr=0.0)


def test_adam_wrapper_reads_grad():
    p = param([[3.0]])
    opt = Adam([p], lr=0.5, l2_lambda=0.0)
    p.grad = np.array([[1.0]])
    opt.step()
    assert p.data[0, 0] == pytest.approx(2.5, abs=1e-6)
    opt.zero_grad()
    assert p.grad is None
