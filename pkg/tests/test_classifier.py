import numpy as np
import pytest

from stickerguard import classifier as clf
from stickerguard import scenes


def _tiny_params(rng, n=3):
    return clf._init_params(n, clf.INPUT_SIZE, rng)


def test_gradients_match_finite_differences(rng):
    params = {k: v.astype(np.float64) for k, v in _tiny_params(rng).items()}
    x = rng.random((2, 32, 32, 3))
    labels = np.array([0, 2])
    onehot = np.eye(3)[labels]

    def loss(p):
        logits, _ = clf._forward(p, x)
        return -np.sum(np.log(clf.softmax(logits)) * onehot) / len(x)

    logits, cache = clf._forward(params, x)
    grads = clf._backward(params, cache, (clf.softmax(logits) - onehot) / len(x))
    for name in clf.PARAM_ORDER:
        flat = params[name].reshape(-1)
        for i in np.random.default_rng(0).choice(flat.size, size=min(5, flat.size), replace=False):
            old = flat[i]
            flat[i] = old + 1e-5
            up = loss(params)
            flat[i] = old - 1e-5
            down = loss(params)
            flat[i] = old
            assert grads[name].reshape(-1)[i] == pytest.approx((up - down) / 2e-5, rel=1e-3, abs=1e-7)


def test_model_file_layout(tmp_path, small_model):
    path = tmp_path / "m.bin"
    clf.save_model(small_model, path)
    raw = path.read_bytes()
    assert raw[:8] == b"SGCNN001"
    assert np.frombuffer(raw[8:16], "<u4").tolist() == [8, 32]
    sizes = [int(np.prod(s)) for s in clf.param_shapes(8).values()]
    assert len(raw) == 16 + 4 * sum(sizes)
    first = np.frombuffer(raw, "<f4", count=sizes[0], offset=16).reshape(3, 3, 3, 8)
    np.testing.assert_array_equal(first, small_model.params["conv1.w"])
    loaded = clf.load_model(path)
    assert loaded.model_id == small_model.model_id
    img = scenes.generate_sign(2, 0.5, 1)
    np.testing.assert_array_equal(clf.classify(loaded, img), clf.classify(small_model, img))


def test_load_model_rejects_garbage(tmp_path, small_model):
    (tmp_path / "bad.bin").write_bytes(b"NOTAMODEL" + b"\0" * 32)
    with pytest.raises(ValueError):
        clf.load_model(tmp_path / "bad.bin")
    (tmp_path / "short.bin").write_bytes(small_model.to_bytes()[:-4])
    with pytest.raises(ValueError):
        clf.load_model(tmp_path / "short.bin")


def test_model_rejects_non_finite(small_model):
    params = {k: np.array(v) for k, v in small_model.params.items()}
    params["dense.b"][0] = np.nan
    with pytest.raises(ValueError):
        clf.ClassifierModel(8, 32, params)


def test_training_is_bit_reproducible(small_data):
    train, _ = small_data
    data = [(s.image, s.true_label) for s in train[::4]]
    cfg = clf.TrainConfig(epochs=1, n_classes=8)
    assert clf.train(data, cfg, seed=3).to_bytes() == clf.train(data, cfg, seed=3).to_bytes()
    assert clf.train(data, cfg, seed=3).to_bytes() != clf.train(data, cfg, seed=4).to_bytes()


def test_training_errors():
    img = scenes.generate_sign(0)
    with pytest.raises(ValueError):
        clf.train([])
    with pytest.raises(ValueError):
        clf.train([(img, 1), (img, 1)])


def test_held_out_accuracy(small_model, small_data):
    _, test = small_data
    acc = clf.accuracy(small_model, np.stack([s.image for s in test]), [s.true_label for s in test])
    assert acc >= 0.95


def test_softmax_is_a_distribution(small_model, rng):
    probs = clf.classify_batch(small_model, rng.random((5, 64, 64, 3)))
    assert probs.shape == (5, 8)
    np.testing.assert_allclose(probs.sum(axis=1), 1.0, atol=1e-12)
    assert np.all(probs >= 0)


def test_ranking_breaks_ties_by_index():
    assert clf.rank_labels([0.2, 0.4, 0.4, 0.0]) == [1, 2, 0, 3]
    assert clf.argmax_lowest([0.3, 0.3, 0.1]) == 0


def test_top_k(small_model):
    img = scenes.generate_sign(4)
    top = clf.top_k(small_model, img, 3)
    assert [lbl for lbl, _ in top][0] == clf.predict(small_model, img)
    assert top[0][1] >= top[1][1] >= top[2][1]
    with pytest.raises(ValueError):
        clf.top_k(small_model, img, 9)


def test_preprocess_nearest_indices():
    assert clf.nearest_indices(64, 32).tolist() == list(range(0, 64, 2))
    img = np.random.default_rng(0).random((64, 64, 3))
    np.testing.assert_array_equal(clf.preprocess(img), img[::2, ::2])
    assert clf.preprocess(img[:48, :40]).shape == (32, 32, 3)
