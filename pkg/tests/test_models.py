import numpy as np
import pytest

from zoneseg.errors import ConfigError, FormatError, ShapeError, UsageError
from zoneseg.models import (
    NetworkSpec,
    build_network,
    cumulative_pool,
    forward,
    load_checkpoint,
    parameter_count,
    parse_scale,
    required_input_multiple,
    save_checkpoint,
)
from zoneseg.tensor import Tensor, backward, no_grad, precision
from zoneseg.training import weighted_cross_entropy


def small(variant="aniso", labels=3, **kw):
    return NetworkSpec(variant, labels=labels, width_scale=kw.pop("width_scale", "1/16"), **kw)


def test_pool_windows():
    aniso = [lv.pool_window for lv in NetworkSpec("aniso").levels() if lv.pool_window]
    iso = [lv.pool_window for lv in NetworkSpec("iso").levels() if lv.pool_window]
    assert aniso == [(1, 2, 2), (1, 2, 2), (2, 2, 2)]
    assert iso == [(2, 2, 2)] * 3


def test_upsample_factors_mirror_pools():
    for variant in ("aniso", "iso"):
        levels = NetworkSpec(variant).levels()
        pools = [lv.pool_window for lv in levels[:3]]
        ups = [lv.upsample_factor for lv in levels[4:]]
        assert ups == pools[::-1]


def test_conv_patterns():
    aniso = [lv.conv_dims for lv in NetworkSpec("aniso").levels()]
    assert aniso == [(2, 2), (2, 2), (3, 3), (3, 3), (3, 3), (2, 2), (2, 2)]
    assert all(lv.conv_dims == (3, 2) for lv in NetworkSpec("iso").levels())
    assert all(lv.conv_dims == (2, 3) for lv in NetworkSpec("iso", iso_order="2d3d").levels())


@pytest.mark.parametrize("scale", ["1", "1/4", "1/8"])
def test_required_input_multiple(scale):
    assert required_input_multiple(NetworkSpec("aniso", width_scale=scale)) == (2, 8, 8)
    assert required_input_multiple(NetworkSpec("iso", width_scale=scale)) == (8, 8, 8)


def test_spec_validation():
    with pytest.raises(ConfigError):
        NetworkSpec("aniso", labels=4)
    with pytest.raises(ConfigError):
        NetworkSpec("flat")
    with pytest.raises(ConfigError):
        NetworkSpec("aniso", widths=(64, 128, 256, 512, 256, 128, 32))
    with pytest.raises(ConfigError):
        NetworkSpec("aniso", width_scale=0)


def test_parse_scale():
    assert parse_scale("1/8") == 0.125
    assert parse_scale(0.5) == 0.5


def test_effective_widths():
    assert NetworkSpec("aniso").effective_widths == (64, 128, 256, 512, 256, 128, 64)
    assert NetworkSpec("aniso", width_scale="1/8").effective_widths == (8, 16, 32, 64, 32, 16, 8)


def census(model):
    return sum(p.size for p in model.parameters())


@pytest.mark.parametrize("variant", ["aniso", "iso"])
@pytest.mark.parametrize("labels", [3, 6])
@pytest.mark.parametrize("normalization", [True, False])
def test_parameter_count_matches_census(variant, labels, normalization):
    spec = NetworkSpec(variant, labels=labels, width_scale="1/8", normalization=normalization)
    assert parameter_count(spec) == census(build_network(spec, 0))


def test_parameter_count_default_aniso_census():
    spec = NetworkSpec("aniso", normalization=False)
    assert parameter_count(spec) == census(build_network(spec, 0))


def test_parameter_count_single_level_arithmetic():
    # one 3x3x3 1->1 kernel plus bias is 28; in-plane 3x3 is 10
    spec = NetworkSpec("iso", widths=(1,) * 7, labels=3, normalization=False)
    model = build_network(spec, 0)
    assert model.params["conv1a.weight"].size + model.params["conv1a.bias"].size == 28
    assert model.params["conv1b.weight"].size + model.params["conv1b.bias"].size == 10


def test_same_seed_same_parameters():
    a = build_network(small(), 3)
    b = build_network(small(), 3)
    for (na, pa), (nb, pb) in zip(a.named_parameters(), b.named_parameters()):
        assert na == nb and pa.data.tobytes() == pb.data.tobytes()


def test_forward_shape_and_simplex(rng):
    model = build_network(small(), 0)
    x = Tensor(rng.standard_normal((1, 4, 16, 16)))
    with no_grad():
        probs, _ = forward(model, x)
    assert probs.shape == (3, 4, 16, 16)
    np.testing.assert_allclose(probs.data.sum(axis=0), 1.0, atol=1e-5)


def test_forward_default_width_contract(rng):
    model = build_network(NetworkSpec("aniso", labels=3), 0)
    x = Tensor(rng.standard_normal((1, 16, 64, 64)))
    with no_grad():
        probs, taps = model.forward(x, capture=["conv4b", "conv7b"])
    assert probs.shape == (3, 16, 64, 64)
    assert taps["conv7b"].shape == (64, 16, 64, 64)
    assert taps["conv4b"].shape == (512, 8, 8, 8)


def test_skip_extents_match_decoder(rng):
    for variant in ("aniso", "iso"):
        model = build_network(small(variant), 0)
        with no_grad():
            _, taps = model.forward(Tensor(rng.standard_normal((1, 8, 16, 16))), capture=[f"conv{i}b" for i in range(1, 8)])
        for i in (1, 2, 3):
            assert taps[f"conv{i}b"].shape[1:] == taps[f"conv{8 - i}b"].shape[1:]


def test_cumulative_pool():
    spec = NetworkSpec("aniso")
    assert cumulative_pool(spec, 1) == (1, 1, 1)
    assert cumulative_pool(spec, 4) == (2, 8, 8)
    assert cumulative_pool(spec, 7) == (1, 1, 1)


def test_boundary_inputs(rng):
    aniso, iso = build_network(small("aniso"), 0), build_network(small("iso"), 0)
    with no_grad():
        aniso.forward(Tensor(rng.standard_normal((1, 2, 8, 8))))
        iso.forward(Tensor(rng.standard_normal((1, 8, 8, 8))))
    with pytest.raises(ShapeError, match="depth"):
        iso.forward(Tensor(np.zeros((1, 2, 8, 8))))
    with pytest.raises(ShapeError, match="width"):
        aniso.forward(Tensor(np.zeros((1, 2, 8, 12))))


def test_forward_deterministic(rng):
    x = Tensor(rng.standard_normal((1, 4, 16, 16)))
    outs = []
    for _ in range(2):
        with no_grad():
            outs.append(build_network(small(), 5).forward(x)[0].data.tobytes())
    assert outs[0] == outs[1]


def test_unknown_tap():
    with pytest.raises(UsageError):
        build_network(small(), 0).forward(Tensor(np.zeros((1, 2, 8, 8))), capture=["conv9b"])


@pytest.mark.parametrize("variant", ["aniso", "iso"])
def test_full_network_gradient_matches_finite_differences(variant):
    depth = 4 if variant == "aniso" else 8
    with precision("float64"):
        rng = np.random.default_rng(7)
        model = build_network(small(variant), 1, dtype=np.float64)
        # zero biases put dead-input voxels exactly on the ReLU kink; move off it
        for name, p in model.params.items():
            if name.endswith(".bias"):
                p.data[...] = rng.normal(0.0, 0.1, p.shape)
        x = Tensor(rng.standard_normal((1, depth, 16, 16)))
        labels = rng.integers(0, 3, (depth, 16, 16))
        weights = [1.0, 2.0, 6.0]

        def loss_value():
            with no_grad():
                return float(weighted_cross_entropy(model.forward(x)[0], labels, weights).data)

        backward(weighted_cross_entropy(model.forward(x)[0], labels, weights))
        names = list(model.params)
        h = 1e-6
        for k in range(20):
            p = model.params[names[rng.integers(len(names))]]
            flat = p.data.reshape(-1)
            i = int(rng.integers(flat.size))
            old = flat[i]
            flat[i] = old + h
            up = loss_value()
            flat[i] = old - h
            down = loss_value()
            flat[i] = old
            numeric = (up - down) / (2 * h)
            analytic = p.grad.reshape(-1)[i]
            assert abs(numeric - analytic) / max(abs(numeric), abs(analytic), 1e-6) < 1e-3


def test_checkpoint_round_trip(tmp_path, rng):
    model = build_network(small(labels=6), 4)
    path = tmp_path / "m.ckpt"
    save_checkpoint(model, path)
    loaded = load_checkpoint(path)
    assert loaded.spec == model.spec
    for name, p in model.params.items():
        assert loaded.params[name].data.tobytes() == p.data.tobytes()
    save_checkpoint(loaded, tmp_path / "again.ckpt")
    assert (tmp_path / "again.ckpt").read_bytes() == path.read_bytes()


def test_checkpoint_errors(tmp_path):
    model = build_network(small(), 0)
    path = tmp_path / "m.ckpt"
    save_checkpoint(model, path)
    blob = path.read_bytes()
    (tmp_path / "short").write_bytes(blob[:4])
    (tmp_path / "cut").write_bytes(blob[:-10])
    (tmp_path / "junk").write_bytes(blob[:8] + b"{" * (len(blob) - 8))
    for name in ("short", "cut", "junk"):
        with pytest.raises(FormatError):
            load_checkpoint(tmp_path / name)
