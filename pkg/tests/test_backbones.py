import numpy as np
import pytest

from fieldctr import model as mdl
from fieldctr.data import Batch
from fieldctr.enhancement import FieConfig, FreConfig
from fieldctr.training import grad_check

E_HAND = np.array([[1.0, 2.0], [3.0, 4.0]])
ONES2 = np.ones(2)


def _hand_bundle(kind="fm"):
    b = mdl.init_bundle(kind, (2, 2), dim=2, hidden_units=(3,), seed=0)
    b.params["embedding.0"][1] = E_HAND[0]
    b.params["embedding.1"][1] = E_HAND[1]
    return b


def test_lookup_embeddings(rng):
    tables = [rng.standard_normal((5, 3)), rng.standard_normal((4, 3))]
    idx = np.array([[0, 0], [4, 2]])
    E = mdl.lookup_embeddings(tables, idx)
    np.testing.assert_array_equal(E[0], [tables[0][0], tables[1][0]])
    np.testing.assert_array_equal(E[1], [tables[0][4], tables[1][2]])
    np.testing.assert_array_equal(mdl.lookup_embeddings([np.zeros((3, 2))] * 2, idx % 3), np.zeros((2, 2, 2)))
    with pytest.raises(IndexError):
        mdl.lookup_embeddings(tables, np.array([[5, 0]]))


def test_fm_examples():
    assert mdl.fm_forward(ONES2, np.eye(2), 0.5)[0] == 0.5
    assert mdl.fm_forward(ONES2, E_HAND)[0] == 11.0
    u = np.array([0.3, -1.2, 2.0])
    s = u @ u
    assert mdl.fm_forward(np.ones(3), np.tile(u, (3, 1)))[0] == pytest.approx(3 * s, abs=1e-12)


def test_fwfm_examples():
    assert mdl.fwfm_forward(ONES2, E_HAND, np.ones((2, 2)))[0] == mdl.fm_forward(ONES2, E_HAND)[0]
    assert mdl.fwfm_forward(ONES2, E_HAND, np.zeros((2, 2)), 0.25)[0] == 0.25
    assert mdl.fwfm_forward(ONES2, E_HAND, np.array([[1.0, 2.0], [2.0, 1.0]]))[0] == 22.0


def test_fmfm_examples():
    assert mdl.fmfm_forward(ONES2, E_HAND, np.eye(2)[None])[0] == 11.0
    assert mdl.fmfm_forward(ONES2, E_HAND, np.zeros((1, 2, 2)), -0.5)[0] == -0.5
    swap = np.array([[[0.0, 1.0], [1.0, 0.0]]])
    assert mdl.fmfm_forward(ONES2, E_HAND, swap)[0] == 10.0


def test_deepfm_examples(rng):
    E = rng.standard_normal((3, 4))
    x = np.ones(3)
    dead = [(np.zeros((12, 5)), np.zeros(5))]
    assert mdl.deepfm_forward(x, E, dead, np.zeros(5), 0.0, 0.2)[0] == mdl.fm_forward(x, E, 0.2)[0]
    # orthogonal embeddings silence the FM part
    Eo = np.eye(3)
    layers = [(rng.standard_normal((9, 4)), rng.standard_normal(4))]
    w, b = rng.standard_normal(4), 0.1
    assert mdl.deepfm_forward(x, Eo, layers, w, b)[0] == pytest.approx(mdl.mlp_forward(x, Eo, layers, w, b)[0])


def test_dnn_hand_chain():
    # 2 fields, D=1, one hidden unit: relu(1*2 + 2*(-1) + 0.5) * 3 - 1 = 0.5
    E = np.array([[1.0], [2.0]])
    layers = [(np.array([[2.0], [-1.0]]), np.array([0.5]))]
    assert mdl.mlp_forward(ONES2, E, layers, np.array([3.0]), -1.0)[0] == pytest.approx(0.5)
    # the FM part adds <1, 2> = 2
    assert mdl.deepfm_forward(ONES2, E, layers, np.array([3.0]), -1.0)[0] == pytest.approx(2.5)
    # negative pre-activation is cut by the ReLU, leaving the output bias
    layers = [(np.array([[-2.0], [-1.0]]), np.array([0.5]))]
    assert mdl.mlp_forward(ONES2, E, layers, np.array([3.0]), -1.0)[0] == -1.0
    assert mdl.mlp_forward(ONES2, E, [(np.zeros((2, 1)), np.zeros(1))], np.zeros(1), 0.7)[0] == 0.7


def test_predict_examples():
    assert mdl.predict(0.0) == 0.5
    with np.errstate(over="raise"):
        assert mdl.predict(1e4) == pytest.approx(1.0)
        assert mdl.predict(-1e4) == pytest.approx(0.0)
    assert mdl.predict(np.log(3.0)) == pytest.approx(0.75, abs=1e-15)


def test_bce_gradient_identity():
    loss, g = mdl.bce_from_logits(np.array([1.0]), np.array([0.0]))
    assert loss == pytest.approx(np.log(2))
    assert g[0] == -0.5


def test_fm_embedding_gradient_hand_example():
    b = _hand_bundle()
    idx, x = np.array([[1, 1]]), np.ones((1, 2))
    logit, cache = mdl.forward(b, idx, x)
    assert logit[0] == pytest.approx(11.0, abs=1e-12)
    grads = mdl.backward(b, cache, np.array([1.0]))
    np.testing.assert_array_equal(grads["embedding.0"][1], [3.0, 4.0])
    np.testing.assert_array_equal(grads["embedding.1"][1], [1.0, 2.0])
    # untouched OOV rows get exact zeros
    assert not grads["embedding.0"][0].any()


@pytest.mark.parametrize("kind", mdl.BACKBONES)
def test_bundle_forward_matches_spec_ops(kind, rng):
    b = mdl.init_bundle(kind, (4, 5, 3), dim=3, hidden_units=(4, 2), seed=1, init_std=0.5)
    for name in b.params:
        b.params[name] = b.params[name] + 0.1 * rng.standard_normal(b.params[name].shape)
    idx = rng.integers(0, 3, size=(6, 3))
    x = rng.uniform(0.5, 2.0, size=(6, 3))
    E = mdl.lookup_embeddings([b.field_table(k) for k in range(3)], idx)
    p = b.params
    lin = 0.0 if kind == "mlp" else mdl.linear_logit(p["bias"], [p[f"linear.{k}"] for k in range(3)], idx, x)
    layers = [(p[f"dnn.W{i}"], p[f"dnn.b{i}"]) for i in range(len(b.hidden_units))]
    expected = {
        "fm": lambda: mdl.fm_forward(x, E, lin),
        "fwfm": lambda: mdl.fwfm_forward(x, E, p["fwfm_r"], lin),
        "fmfm": lambda: mdl.fmfm_forward(x, E, p["fmfm_M"], lin),
        "deepfm": lambda: mdl.deepfm_forward(x, E, layers, p["dnn.out_w"], p["dnn.out_b"], lin),
        "mlp": lambda: mdl.mlp_forward(x, E, layers, p["dnn.out_w"], p["dnn.out_b"]),
    }[kind]()
    np.testing.assert_allclose(mdl.forward(b, idx, x)[0], expected, rtol=1e-12, atol=1e-12)


@pytest.mark.parametrize("kind", mdl.BACKBONES)
def test_parameter_sets_match_kind(kind):
    b = mdl.init_bundle(kind, (3, 3), dim=2, hidden_units=(2,))
    names = set(b.params)
    assert ("bias" in names) == (kind != "mlp")
    assert ("fwfm_r" in names) == (kind == "fwfm")
    assert ("fmfm_M" in names) == (kind == "fmfm")
    assert ("dnn.out_w" in names) == (kind in ("deepfm", "mlp"))
    assert not any(n.startswith(("adaptor", "rescale")) for n in names)


def test_enhancement_params_only_when_active():
    H = np.eye(3)
    b = mdl.init_bundle("fm", (3, 3, 3), dim=3, fre=FreConfig(0.1), fie=FieConfig(0.5, "explicit"),
                        field_embeddings=H)
    assert {"adaptor.W", "adaptor.b", "rescale"} <= set(b.params)
    np.testing.assert_array_equal(b.params["rescale"], [1.0, 0.0])
    with pytest.raises(ValueError, match="field embeddings"):
        mdl.init_bundle("fm", (3, 3, 3), dim=3, fre=FreConfig(0.1))
    with pytest.raises(ValueError):
        mdl.init_bundle("ffm", (3, 3))


def test_init_is_seeded():
    a = mdl.init_bundle("deepfm", (4, 4), dim=3, hidden_units=(5,), seed=9)
    b = mdl.init_bundle("deepfm", (4, 4), dim=3, hidden_units=(5,), seed=9)
    c = mdl.init_bundle("deepfm", (4, 4), dim=3, hidden_units=(5,), seed=10)
    for n in a.params:
        np.testing.assert_array_equal(a.params[n], b.params[n])
    assert not np.array_equal(a.params["embedding.0"], c.params["embedding.0"])


@pytest.mark.parametrize("kind", mdl.BACKBONES)
def test_grad_check_small_batch(kind, rng):
    b = mdl.init_bundle(kind, (4, 3, 5), dim=3, hidden_units=(4, 3), seed=2, init_std=0.3)
    batch = Batch(rng.integers(0, 3, size=(8, 3)), rng.uniform(0.5, 1.5, size=(8, 3)), rng.integers(0, 2, 8))
    report = grad_check(b, batch)
    assert report.passed, report.max_rel_error


def test_grad_check_fmfm_with_both_enhancements(rng):
    H = rng.standard_normal((3, 5))
    b = mdl.init_bundle("fmfm", (4, 3, 5), dim=3, seed=3, init_std=0.3, fre=FreConfig(0.5),
                        fie=FieConfig(0.7, "explicit"), field_embeddings=H)
    batch = Batch(rng.integers(0, 3, size=(8, 3)), np.ones((8, 3)), rng.integers(0, 2, 8))
    report = grad_check(b, batch)
    assert report.passed, report.max_rel_error
    # field 2 row 4 never appears in the batch
    assert report.max_rel_error["embedding.2"] < 1e-4


def test_checkpoint_round_trip(tmp_path, rng):
    H = rng.standard_normal((3, 4))
    b = mdl.init_bundle("deepfm", (4, 3, 5), dim=2, hidden_units=(3,), seed=4, fre=FreConfig(0.3, "cl"),
                        fie=FieConfig(0.1, "implicit"), field_embeddings=H, schema_digest="abc")
    mdl.save_checkpoint(b, tmp_path / "m.ckpt", {"note": 1})
    back, meta = mdl.load_checkpoint(tmp_path / "m.ckpt")
    assert meta == {"note": 1}
    assert (back.kind, back.vocab_sizes, back.hidden_units, back.fre, back.fie, back.schema_digest) == \
        (b.kind, b.vocab_sizes, b.hidden_units, b.fre, b.fie, b.schema_digest)
    for n in b.params:
        np.testing.assert_array_equal(back.params[n], b.params[n])
    np.testing.assert_array_equal(back.interaction, b.interaction)
    idx = rng.integers(0, 3, size=(5, 3))
    np.testing.assert_array_equal(mdl.predict_logits(back, idx, np.ones((5, 3))),
                                  mdl.predict_logits(b, idx, np.ones((5, 3))))
    mdl.save_checkpoint(back, tmp_path / "n.ckpt", {"note": 1})
    assert (tmp_path / "m.ckpt").read_bytes() == (tmp_path / "n.ckpt").read_bytes()


def test_checkpoint_rejects_garbage(tmp_path):
    (tmp_path / "x.ckpt").write_bytes(b"not a checkpoint")
    with pytest.raises(ValueError, match="not a fieldctr checkpoint"):
        mdl.load_checkpoint(tmp_path / "x.ckpt")
