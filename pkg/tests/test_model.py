import numpy as np
import pytest

from ddian import autodiff as ad
from ddian.autodiff import Tensor
from ddian.errors import DimensionError, ModelFormatError
from ddian.losses import HyperParams, classification_loss, cross_entropy, discriminative_loss, local_domain_loss_from_logits, total_objective
from ddian.model import ModelDims, build_model, forward_all, load, predict, save
from ddian.nn import SgdMomentum

DIMS = ModelDims(in_dim=2, n_classes=3, n_domains=3)


@pytest.fixture
def model():
    return build_model(DIMS, HyperParams(alpha=1.0, beta=0.5, gamma=0.5, phi=1e-3), seed=42)


def test_default_architecture(model):
    assert model.F.dims == [2, 32, 16]
    assert model.C.dims == [16, 3]
    assert model.G_d.dims == [16, 16, 3]
    assert [h.dims for h in model.local_heads] == [[16, 8, 3]] * 3
    assert model.centers.shape == (3, 16)
    ids = [id(p) for p in model.parameters()]
    assert len(ids) == len(set(ids))


def test_forward_shapes_single_sample(model):
    out = forward_all(model, Tensor([[0.3, -0.2]]), lam=0.5)
    assert out.features.shape == (1, 16)
    assert out.class_logits.shape == (1, 3)
    assert out.class_probs.shape == (1, 3)
    assert out.global_domain_logits.shape == (1, 3)
    assert [t.shape for t in out.local_domain_logits] == [(1, 3)] * 3
    np.testing.assert_allclose(out.class_probs.sum(axis=1), 1.0, atol=1e-9)


def test_forward_rejects_wrong_width(model):
    with pytest.raises(DimensionError):
        forward_all(model, Tensor(np.zeros((2, 3))), lam=0.0)


def test_disabled_branches_are_skipped(model):
    out = forward_all(model, Tensor(np.zeros((2, 2))), lam=0.5, use_global=False, use_local=False)
    assert out.global_domain_logits is None and out.local_domain_logits is None


def _objective(model, x, y, d, lam):
    out = forward_all(model, x, lam)
    parts = {
        "cls": classification_loss(out.class_logits, y),
        "dm": cross_entropy(out.global_domain_logits, d),
        "dc": local_domain_loss_from_logits(out.local_domain_logits, out.local_gate, d),
        "dis": discriminative_loss(out.features, model.centers, y, model.hp.phi),
    }
    return total_objective(parts, model.hp)[0]


def test_zero_lambda_blocks_discriminator_gradients_to_extractor(model, rng):
    x = Tensor(rng.standard_normal((6, 2)))
    y, d = rng.integers(0, 3, 6), rng.integers(0, 3, 6)
    ad.backward(_objective(model, x, y, d, lam=0.0))
    full = [p.grad.copy() for p in model.F.parameters()]
    model.zero_grad()
    out = forward_all(model, x, 0.0, use_global=False, use_local=False)
    parts = {"cls": classification_loss(out.class_logits, y), "dis": discriminative_loss(out.features, model.centers, y, model.hp.phi)}
    ad.backward(total_objective(parts, model.hp)[0])
    for a, p in zip(full, model.F.parameters()):
        np.testing.assert_array_equal(a, p.grad)


def test_zero_lambda_step_matches_detached_run(rng):
    x = Tensor(rng.standard_normal((8, 2)))
    y, d = rng.integers(0, 3, 8), rng.integers(0, 3, 8)
    a = build_model(DIMS, seed=1)
    b = build_model(DIMS, seed=1)
    ad.backward(_objective(a, x, y, d, lam=0.0))
    out = forward_all(b, x, 0.0, use_global=False, use_local=False)
    parts = {"cls": classification_loss(out.class_logits, y), "dis": discriminative_loss(out.features, b.centers, y, b.hp.phi)}
    ad.backward(total_objective(parts, b.hp)[0])
    for m in (a, b):
        SgdMomentum(m.param_groups(), 0.01, 0.9).step()
    for p, q in zip(a.F.parameters(), b.F.parameters()):
        np.testing.assert_array_equal(p.values, q.values)


def test_end_to_end_gradient_matches_finite_differences(rng):
    dims = ModelDims(in_dim=2, n_classes=3, n_domains=2, feature_hidden=(5,), d_feat=4, global_hidden=(3,), local_hidden=(3,))
    model = build_model(dims, HyperParams(phi=0.05), seed=3)
    x = Tensor(rng.standard_normal((4, 2)))
    y, d = np.array([0, 1, 2, 1]), np.array([0, 1, 1, 0])
    lam = 0.0  # reversal off, so the total is an ordinary differentiable function
    params = model.parameters()
    probs = forward_all(model, x, lam).class_probs

    def objective():
        out = forward_all(model, x, lam)
        parts = {
            "cls": classification_loss(out.class_logits, y),
            "dis": discriminative_loss(out.features, model.centers, y, model.hp.phi),
        }
        dm = cross_entropy(model.G_d(out.features), d)
        heads = [h(out.features * Tensor(probs[:, k : k + 1])) for k, h in enumerate(model.local_heads)]
        dc = local_domain_loss_from_logits(heads, probs, d)
        total, _ = total_objective(parts, model.hp)
        return total, dm, dc

    # analytic: reversal-free path for the discriminator terms, with probs frozen
    total, dm, dc = objective()
    ad.backward(total + 0.5 * dm + 0.5 * dc)
    got = [p.grad.copy() for p in params]

    def value():
        t, m_, c_ = objective()
        return t.item() + 0.5 * m_.item() + 0.5 * c_.item()

    from conftest import numeric_grad, rel_err

    want = numeric_grad(value, [p.values for p in params])
    assert max(rel_err(a, b) for a, b in zip(got, want)) < 1e-4


def test_predict_argmax_and_ties(model):
    for net in (model.F, model.C):
        for layer in net.layers:
            layer.weight.values[...] = 0.0
            layer.bias.values[...] = 0.0
    model.C.layers[0].bias.values[...] = [[0.1, 0.9, 0.9]]
    assert predict(model, np.zeros((1, 2))).tolist() == [1]
    model.C.layers[0].bias.values[...] = [[0.5, 0.5, 0.5]]
    assert predict(model, np.zeros((1, 2))).tolist() == [0]


def test_predict_batch_matches_rows_and_logit_shift(model, rng):
    x = rng.standard_normal((10, 2))
    batch = predict(model, x)
    assert batch.tolist() == [int(predict(model, x[i : i + 1])[0]) for i in range(10)]
    model.C.layers[0].bias.values += 123.25
    assert predict(model, x).tolist() == batch.tolist()


def test_predict_agrees_with_graph_forward(model, rng):
    x = rng.standard_normal((7, 2))
    logits = forward_all(model, Tensor(x), 0.0).class_logits.values
    assert predict(model, x).tolist() == np.argmax(logits, axis=1).tolist()


class TestFile:
    def test_round_trip_is_byte_identical(self, model, tmp_path, rng):
        for p in model.parameters():
            p.values += rng.standard_normal(p.shape)
        a, b = tmp_path / "a.ddia", tmp_path / "b.ddia"
        save(model, a)
        loaded = load(a)
        save(loaded, b)
        assert a.read_bytes() == b.read_bytes()
        assert loaded.dims == model.dims and loaded.hp == model.hp
        for p, q in zip(model.parameters(), loaded.parameters()):
            assert p.values.tobytes() == q.values.tobytes()
        x = rng.standard_normal((20, 2))
        assert predict(model, x).tolist() == predict(loaded, x).tolist()

    def test_header_layout(self, model, tmp_path):
        path = tmp_path / "m.ddia"
        save(model, path)
        raw = path.read_bytes()
        assert raw[:4] == b"DDIA"
        assert int.from_bytes(raw[4:8], "little") == 1

    @pytest.mark.parametrize("cut", [3, 10, 60, -1])
    def test_truncated_file_rejected(self, model, tmp_path, cut):
        path = tmp_path / "m.ddia"
        save(model, path)
        raw = path.read_bytes()
        path.write_bytes(raw[:cut])
        with pytest.raises(ModelFormatError):
            load(path)

    def test_wrong_version_and_trailing_bytes(self, model, tmp_path):
        path = tmp_path / "m.ddia"
        save(model, path)
        raw = bytearray(path.read_bytes())
        path.write_bytes(bytes(raw) + b"\x00")
        with pytest.raises(ModelFormatError, match="trailing"):
            load(path)
        raw[4] = 9
        path.write_bytes(bytes(raw))
        with pytest.raises(ModelFormatError, match="version"):
            load(path)

    def test_inconsistent_payload_count(self, model, tmp_path):
        path = tmp_path / "m.ddia"
        save(model, path)
        raw = bytearray(path.read_bytes())
        # d_feat lives at bytes 20..24; changing it breaks the value count
        raw[20:24] = (17).to_bytes(4, "little")
        path.write_bytes(bytes(raw))
        with pytest.raises(ModelFormatError):
            load(path)
