import math

import numpy as np
import pytest

from mmdgm import numgrid as ng
from mmdgm.models import (CheckpointFormatError, DecoderNet, FeatureNet, MlpSpec, RecognitionNet,
                          build_model, class_grid, decode, features, generate, load_checkpoint,
                          one_hot, recognize, save_checkpoint)
from mmdgm.numgrid import ContractError, ParamStore, Tape
from oracles import central_diff, mlp_loop, rel_err

softplus = lambda s: math.log1p(math.exp(-abs(s))) + max(s, 0.0)
sigmoid = lambda s: 1.0 / (1.0 + math.exp(-s))


def _nets(conditional=False, likelihood="bernoulli", seed=0, D=5, K=2, M=3, widths=(4, 3)):
    rng = np.random.default_rng(seed)
    store = ParamStore()
    spec = MlpSpec(list(widths), "softplus")
    enc = RecognitionNet(store, D, K, spec, rng, n_classes=M, conditions_on_label=conditional)
    dec = DecoderNet(store, K, D, spec, rng, likelihood=likelihood, n_classes=M,
                     conditions_on_label=conditional)
    return store, enc, dec


def _layers(store, prefix, n):
    return [(store.value(f"{prefix}.h{i}.W"), store.value(f"{prefix}.h{i}.b")) for i in range(n)]


def test_mlp_spec_validation():
    with pytest.raises(ValueError):
        MlpSpec([], "softplus")
    with pytest.raises(ValueError):
        MlpSpec([3, 0])
    with pytest.raises(ValueError):
        MlpSpec([3], "swish")


def test_zero_weights_give_unit_gaussian_and_half_probabilities():
    store, enc, dec = _nets()
    for n in store.names():
        store.set_value(n, 0.0)
    q = recognize(enc, np.random.default_rng(1).random(5))
    assert not q.mu.value.any() and not q.log_var.value.any()
    p = decode(dec, np.array([0.3, -2.0]))["p"].value
    assert np.all(p == 0.5)


def test_recognize_matches_layer_loop():
    store, enc, _ = _nets(seed=2)
    x = np.random.default_rng(3).random(5)
    hidden = mlp_loop(x, _layers(store, "enc.trunk", 2), softplus)
    mu_ref = hidden[-1] @ store.value("enc.mu.W") + store.value("enc.mu.b")
    lv_ref = hidden[-1] @ store.value("enc.log_var.W") + store.value("enc.log_var.b")
    q = recognize(enc, x)
    np.testing.assert_allclose(q.mu.value, mu_ref, rtol=1e-12)
    np.testing.assert_allclose(q.log_var.value, lv_ref, rtol=1e-12)
    np.testing.assert_allclose(features(enc, x, source="last_hidden").value, hidden[-1], rtol=1e-12)
    np.testing.assert_allclose(features(enc, x, source="concat_hidden").value,
                               np.concatenate(hidden), rtol=1e-12)


def test_decode_matches_layer_loop_conditional():
    store, _, dec = _nets(conditional=True, seed=4)
    z, y = np.array([0.5, -1.0]), 2
    inp = np.concatenate([z, one_hot([y], 3)[0]])
    hidden = mlp_loop(inp, _layers(store, "dec.trunk", 2), softplus)
    logits = hidden[-1] @ store.value("dec.out.W") + store.value("dec.out.b")
    ref = np.array([sigmoid(v) for v in logits])
    np.testing.assert_allclose(decode(dec, z, y)["p"].value, ref, rtol=1e-12)


def test_label_contracts():
    _, enc, dec = _nets(conditional=False)
    with pytest.raises(ContractError):
        recognize(enc, np.zeros(5), 1)
    _, enc_c, dec_c = _nets(conditional=True)
    with pytest.raises(ContractError):
        recognize(enc_c, np.zeros(5))
    with pytest.raises(ContractError):
        decode(dec_c, np.zeros(2))
    with pytest.raises(ContractError):
        decode(dec, np.zeros(2), 0)


def test_per_sample_independence():
    _, enc, _ = _nets(seed=5)
    x = np.random.default_rng(6).random((4, 5))
    batch = recognize(enc, x).mu.value
    for i in range(4):
        np.testing.assert_allclose(recognize(enc, x[i]).mu.value, batch[i], rtol=1e-13)


def test_conditional_decoder_outputs_depend_on_label():
    _, _, dec = _nets(conditional=True, seed=7)
    z = np.array([0.1, 0.2])
    assert not np.allclose(decode(dec, z, 0)["p"].value, decode(dec, z, 1)["p"].value)


def test_fixed_label_matches_explicit_one_hot_input():
    store, _, dec = _nets(conditional=True, seed=8)
    z = np.random.default_rng(9).standard_normal((3, 2))
    via_label = decode(dec, z, 1)["p"].value
    h = np.concatenate([z, np.tile(one_hot([1], 3), (3, 1))], axis=1)
    for i in range(2):
        h = np.logaddexp(0, h @ store.value(f"dec.trunk.h{i}.W") + store.value(f"dec.trunk.h{i}.b"))
    ref = 1 / (1 + np.exp(-(h @ store.value("dec.out.W") + store.value("dec.out.b"))))
    np.testing.assert_allclose(via_label, ref, rtol=1e-12)


def test_feature_dimensions():
    _, enc, _ = _nets(widths=(4, 3))
    x = np.random.default_rng(1).random((2, 5))
    assert features(enc, x, source="concat_hidden").shape == (2, 7)
    assert enc.feature_dim("concat_hidden") == 7
    assert enc.feature_dim("last_hidden") == 3
    np.testing.assert_array_equal(features(enc, x, source="latent_mean").value,
                                  recognize(enc, x).mu.value)


def test_gaussian_decoder_outputs():
    _, _, dec = _nets(likelihood="gaussian")
    out = decode(dec, np.zeros((2, 2)))
    assert set(out) == {"mean", "log_var"}
    assert out["mean"].shape == (2, 5)


def test_generate_determinism_and_range():
    _, _, dec = _nets(seed=3)
    a = generate(dec, 6, seed=11)
    b = generate(dec, 6, seed=11)
    assert np.array_equal(a, b)
    assert np.all((a > 0) & (a < 1))


def test_class_grid_layout():
    _, _, dec = _nets(conditional=True, M=4)
    grid = class_grid(dec, 3, seed=2)
    assert grid.shape == (3, 4, 5)
    z = np.random.default_rng(2).standard_normal((3, 2))
    for c in range(4):
        np.testing.assert_array_equal(grid[:, c], generate(dec, 3, y=c, z=z))
    _, _, dec_u = _nets(conditional=False)
    with pytest.raises(ContractError):
        class_grid(dec_u, 2)


def test_initialization_is_reproducible():
    a = build_model(6, 3, 2, MlpSpec([5, 4]), seed=42)
    b = build_model(6, 3, 2, MlpSpec([5, 4]), seed=42)
    for n in a.store.names():
        assert np.array_equal(a.store.value(n), b.store.value(n))
    assert np.all(a.store.value("enc.log_var.b") == -1.0)
    assert not a.store.value("clf.lambda").any()


def test_build_model_variants():
    m = build_model(6, 3, 2, MlpSpec([5, 4]), seed=0, conditional=True,
                    classifier_spec=MlpSpec([7]))
    assert isinstance(m.clf_net, FeatureNet)
    assert m.store.value("clf.lambda").shape == (3, 7)
    assert m.predict(np.zeros((2, 6))).shape == (2,)
    with pytest.raises(ValueError):
        build_model(6, 3, 2, MlpSpec([5]), seed=0, conditional=True, feature_source="latent_mean")


def test_network_gradients_match_finite_differences():
    store, enc, dec = _nets(conditional=True, seed=12)
    rng = np.random.default_rng(13)
    x, z, y = rng.random((3, 5)), rng.standard_normal((3, 2)), np.array([0, 2, 1])

    def loss():
        q = recognize(enc, x, y)
        p = decode(dec, z, y)["p"]
        return ng.reduce_sum(ng.square(q.mu)) + ng.reduce_sum(q.log_var) + ng.reduce_sum(
            dec.log_lik(x, {"p": p}))

    with Tape() as tape:
        tape.backward(loss())
    for n in store.names():
        fd = central_diff(lambda: float(loss().value), store.value(n))
        assert rel_err(store.grad(n), fd) < 1e-4, n


def test_checkpoint_round_trip_bit_exact(tmp_path):
    m = build_model(6, 3, 2, MlpSpec([5, 4]), seed=1)
    extra = {"scalar": np.array(3.25), "empty": np.zeros((0, 3)), "weird": np.array([np.pi, -0.0, 1e-300])}
    arrays = {**dict(m.store.items()), **extra}
    path = tmp_path / "p.ckpt"
    save_checkpoint(path, arrays)
    back = load_checkpoint(path)
    assert list(back) == list(arrays)
    for n, v in arrays.items():
        assert back[n].shape == np.shape(v)
        assert back[n].tobytes() == np.asarray(v, dtype="<f8").tobytes()


def test_checkpoint_format_errors(tmp_path):
    path = tmp_path / "p.ckpt"
    save_checkpoint(path, {"a": np.arange(4.0)})
    blob = path.read_bytes()
    assert blob[:4] == b"MMDG"
    (tmp_path / "bad.ckpt").write_bytes(b"XXXX" + blob[4:])
    with pytest.raises(CheckpointFormatError, match="magic"):
        load_checkpoint(tmp_path / "bad.ckpt")
    (tmp_path / "short.ckpt").write_bytes(blob[:-3])
    with pytest.raises(CheckpointFormatError, match="byte"):
        load_checkpoint(tmp_path / "short.ckpt")
