import numpy as np
import pytest
import torch

from landau.errors import ArtifactError, NonFiniteGradient
from landau.services.autodiff import (
    AdamState,
    ParameterSet,
    Tape,
    adam_step,
    affine_network,
    decode_checkpoint,
    divergence_v,
    encode_checkpoint,
    forward,
    forward_jvp,
    grad,
    init_params,
    layout_for,
    load_checkpoint,
    output_and_divergence,
    save_checkpoint,
    time_derivative,
)


def test_layout_names_and_count(tiny_spec):
    layout = layout_for(tiny_spec)
    names = [name for name, _, _ in layout]
    assert names[:2] == ["vel.0.weight", "vel.0.bias"]
    assert names[-2:] == ["out.weight", "out.bias"]
    assert dict((n, s) for n, _, s in layout)["trunk.0.weight"] == (5, 4 + 3)
    assert init_params(tiny_spec, 0).values.size == tiny_spec.param_count


def test_init_is_seeded_and_scaled(tiny_spec):
    a = init_params(tiny_spec, 3)
    b = init_params(tiny_spec, 3)
    assert np.array_equal(a.values, b.values)
    assert not np.array_equal(a.values, init_params(tiny_spec, 4).values)
    for name, _, shape in a.layout:
        block = a.layer(name)
        if name.endswith(".bias"):
            assert np.all(block == 0)
        else:
            assert np.all(np.abs(block) <= 1.0 / np.sqrt(shape[1]))


def test_parameter_set_is_read_only(tiny_spec):
    params = init_params(tiny_spec, 0)
    with pytest.raises(ValueError):
        params.values[0] = 1.0
    bumped = params.with_layer("out.bias", np.array([1.0, 2.0]))
    assert np.array_equal(bumped.layer("out.bias"), [1.0, 2.0])
    assert np.all(params.layer("out.bias") == 0)
    with pytest.raises(ValueError):
        params.with_layer("out.bias", np.zeros(3))


def test_identity_network_matches_hand_composition(linear_spec, rng):
    params = ParameterSet.for_spec(linear_spec, rng.standard_normal(linear_spec.param_count))
    v = rng.standard_normal((6, 2))
    t = 0.7
    layer = params.layer
    h = v @ layer("vel.0.weight").T + layer("vel.0.bias")
    g = np.full((6, 1), t) @ layer("time.0.weight").T + layer("time.0.bias")
    z = np.concatenate([h, g], axis=1) @ layer("trunk.0.weight").T + layer("trunk.0.bias")
    expected = z @ layer("out.weight").T + layer("out.bias")
    assert np.allclose(forward(linear_spec, params, v, t), expected, rtol=1e-13, atol=1e-13)


def test_single_vector_input(tiny_spec, rng):
    params = init_params(tiny_spec, 1)
    v = rng.standard_normal(2)
    out = forward(tiny_spec, params, v, 0.3)
    assert out.shape == (2,)
    assert np.allclose(out, forward(tiny_spec, params, v[None, :], 0.3)[0])


def test_time_derivative_matches_central_differences(tiny_spec, rng):
    params = ParameterSet.for_spec(tiny_spec, rng.standard_normal(tiny_spec.param_count) * 0.5)
    v = rng.standard_normal((5, 2))
    t, h = 0.4, 1e-5
    _, dt = time_derivative(tiny_spec, params, v, t)
    fd = (forward(tiny_spec, params, v, t + h) - forward(tiny_spec, params, v, t - h)) / (2 * h)
    assert np.allclose(dt, fd, atol=1e-8)


def test_divergence_matches_central_differences(tiny_spec, rng):
    params = ParameterSet.for_spec(tiny_spec, rng.standard_normal(tiny_spec.param_count) * 0.5)
    v = rng.standard_normal((5, 2))
    h = 1e-5
    fd = np.zeros(5)
    for k in range(2):
        e = np.zeros(2)
        e[k] = h
        fd += (forward(tiny_spec, params, v + e, 0.2)[:, k] - forward(tiny_spec, params, v - e, 0.2)[:, k]) / (2 * h)
    out, div = output_and_divergence(tiny_spec, params, v, 0.2)
    assert np.allclose(div, fd, atol=1e-8)
    assert np.allclose(out, forward(tiny_spec, params, v, 0.2))
    assert np.allclose(divergence_v(tiny_spec, params, v, 0.2), div)


def test_jvp_is_linear_in_direction(tiny_spec, rng):
    params = init_params(tiny_spec, 2)
    v = rng.standard_normal((4, 2))
    a = np.array([1.0, 0.0, 0.0])
    b = np.array([0.0, -2.0, 0.5])
    _, ja = forward_jvp(tiny_spec, params, v, 0.1, a)
    _, jb = forward_jvp(tiny_spec, params, v, 0.1, b)
    _, jab = forward_jvp(tiny_spec, params, v, 0.1, a + b)
    assert np.allclose(jab, ja + jb)
    with pytest.raises(ValueError):
        forward_jvp(tiny_spec, params, v, 0.1, np.ones(2))


def test_parameter_gradient_through_divergence(tiny_spec, rng):
    params = ParameterSet.for_spec(tiny_spec, rng.standard_normal(tiny_spec.param_count) * 0.5)
    v = rng.standard_normal((4, 2))

    def loss_value(values):
        s, div = output_and_divergence(tiny_spec, ParameterSet.for_spec(tiny_spec, values), v, 0.3)
        return float(np.sum(s * s) + 2 * np.sum(div))

    tape = Tape(params)
    s, div = output_and_divergence(tiny_spec, tape.params(0), v, 0.3)
    g = grad(tape.scalar((s * s).sum() + 2 * div.sum()))
    h = 1e-6
    for k in rng.choice(params.values.size, size=8, replace=False):
        e = np.zeros(params.values.size)
        e[k] = h
        fd = (loss_value(params.values + e) - loss_value(params.values - e)) / (2 * h)
        assert g[k] == pytest.approx(fd, rel=1e-5, abs=1e-8)


def test_grad_requires_a_tape(tiny_spec):
    tape = Tape(init_params(tiny_spec, 0))
    with pytest.raises(ValueError):
        grad(torch.tensor(1.0))
    assert np.array_equal(grad(tape.scalar(3.0)), np.zeros(tape.size))


def test_adam_first_step_is_signed_lr():
    g = np.array([0.5, -2.0, 1e-3])
    values, state = adam_step(np.zeros(3), g, AdamState.zeros(3, lr=0.01))
    assert state.step == 1
    assert np.allclose(values, -0.01 * np.sign(g), rtol=1e-4)


def test_adam_rejects_non_finite_gradient():
    with pytest.raises(NonFiniteGradient) as info:
        adam_step(np.zeros(3), np.array([0.0, np.nan, 1.0]), AdamState.zeros(3))
    assert info.value.index == 1


def test_checkpoint_round_trip(tmp_path, tiny_spec):
    params = init_params(tiny_spec, 9)
    path = str(tmp_path / "net.ckpt")
    save_checkpoint(path, tiny_spec, params, {"role": "flow", "t0": 0.0})
    spec, loaded, meta = load_checkpoint(path)
    assert spec == tiny_spec
    assert np.array_equal(loaded.values, params.values)
    assert meta == {"role": "flow", "t0": 0.0}


def test_checkpoint_corruption_is_detected(tiny_spec):
    blob = bytearray(encode_checkpoint(tiny_spec, init_params(tiny_spec, 0)))
    blob[len(blob) // 2] ^= 0xFF
    with pytest.raises(ArtifactError):
        decode_checkpoint(bytes(blob))
    with pytest.raises(ArtifactError):
        decode_checkpoint(b"NOTACKPT" + bytes(blob[8:]))


@pytest.mark.parametrize("d", [2, 3])
def test_affine_network_realizes_its_map(d, rng):
    m = rng.standard_normal((d, d))
    b = rng.standard_normal(d)
    spec, params = affine_network(m, b)
    v = rng.standard_normal((8, d))
    for t in (0.0, 2.5):
        assert np.allclose(forward(spec, params, v, t), v @ m.T + b, rtol=1e-13, atol=1e-13)
        assert np.allclose(divergence_v(spec, params, v, t), np.trace(m), rtol=1e-13, atol=1e-13)
