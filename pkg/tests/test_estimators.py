"""Estimator-API tests: scikit-learn parameter plumbing, fitted-state
checks, and input validation."""

import numpy as np
import pytest
from sklearn.base import clone
from sklearn.exceptions import NotFittedError

from cascadeface import nets, train, validation
from cascadeface.estimators import HaarDetector, MtcnnDetector
from tests.test_haar import separable_windows


def test_get_params_round_trip():
    det = MtcnnDetector(min_face_size=24.0, random_state=7)
    params = det.get_params()
    assert params["min_face_size"] == 24.0
    assert params["random_state"] == 7
    det2 = MtcnnDetector(**params)
    assert det2.get_params() == params


def test_set_params_and_clone():
    det = MtcnnDetector()
    det.set_params(thresholds=(0.5, 0.6, 0.7), n_synth=500)
    assert det.thresholds == (0.5, 0.6, 0.7)
    dup = clone(det)
    assert dup.get_params() == det.get_params()


def test_haar_params_clone():
    det = HaarDetector(max_stages=3, stage_fp_rate=0.4)
    dup = clone(det)
    assert dup.get_params() == det.get_params()


def test_predict_before_fit_raises():
    img = np.zeros((40, 40, 3), np.uint8)
    with pytest.raises(NotFittedError):
        MtcnnDetector().predict(img)
    with pytest.raises(NotFittedError):
        HaarDetector().predict(img)


def test_mtcnn_load_weights_path(tmp_path):
    store = {}
    for build in (nets.build_pnet, nets.build_rnet, nets.build_onet):
        store.update(train.init_weights(build(), rng_seed=0))
    path = tmp_path / "all.mtw"
    nets.save_weights(store, path)
    det = MtcnnDetector().load_weights(path)
    out = det.predict(np.full((40, 40, 3), 128, np.uint8))
    assert out == []


def test_mtcnn_load_weights_rejects_incomplete(tmp_path):
    store = train.init_weights(nets.build_pnet(), rng_seed=0)
    path = tmp_path / "pnet-only.mtw"
    nets.save_weights(store, path)
    with pytest.raises(nets.MissingParameterError):
        MtcnnDetector().load_weights(path)


def test_mtcnn_fit_tiny_and_predict():
    det = MtcnnDetector(n_synth=160, epochs=(3, 1, 1), random_state=5)
    det.fit()
    assert set(det.history_) == {"pnet", "rnet", "onet"}
    for build in (nets.build_pnet, nets.build_rnet, nets.build_onet):
        nets.validate_store(det.store_, build())
    img = np.full((48, 48, 3), 100, np.uint8)
    dets = det.predict(img)
    assert isinstance(dets, list)
    result = det.detect(img)
    assert set(result.stage_counts) == {"stage1", "stage2", "stage3"}


def test_predict_single_vs_list_shapes(trained_haar):
    det = HaarDetector()
    det.model_ = trained_haar
    img = np.full((40, 40, 3), 80, np.uint8)
    single = det.predict(img)
    assert isinstance(single, list)
    many = det.predict([img, img])
    assert len(many) == 2 and all(isinstance(r, list) for r in many)


def test_haar_fit_separable_and_predict():
    windows, labels = separable_windows()
    det = HaarDetector(max_rounds=6, stage_fp_rate=0.5, max_stages=2)
    det.fit(windows, labels)
    assert hasattr(det, "model_")
    out = det.predict(np.full((30, 30), 90, np.uint8))
    assert isinstance(out, list)


def test_haar_fit_validates_inputs():
    with pytest.raises(ValueError):
        HaarDetector().fit(np.zeros((4, 10, 10), np.uint8), np.array([1, 0, 1, 0]))
    with pytest.raises(ValueError):
        HaarDetector().fit(np.zeros((4, 24, 24), np.uint8), np.array([1, 1, 1, 1]))
    with pytest.raises(ValueError):
        HaarDetector().fit(np.zeros((4, 24, 24), np.uint8), np.array([1, 0, 2, 0]))


# ---------------------------------------------------------------------------
# validation helpers


def test_check_image_promotes_2d():
    img = validation.check_image(np.zeros((5, 6), np.uint8))
    assert img.shape == (5, 6, 1)


def test_check_image_rejects_bad_inputs():
    with pytest.raises(ValueError):
        validation.check_image(np.zeros((5, 6, 2), np.uint8))
    with pytest.raises(ValueError):
        validation.check_image(np.zeros((5, 6, 3), np.float32))
    with pytest.raises(ValueError):
        validation.check_image(np.zeros((2, 3, 4, 3), np.uint8))


def test_check_images_single_vs_iterable():
    one = np.zeros((4, 4, 3), np.uint8)
    imgs, single = validation.check_images(one)
    assert single and len(imgs) == 1
    imgs, single = validation.check_images([one, one])
    assert not single and len(imgs) == 2
    with pytest.raises(ValueError):
        validation.check_images([])


def test_check_thresholds():
    assert validation.check_thresholds(["0.5", "0.6", "0.7"]) == (0.5, 0.6, 0.7)
    with pytest.raises(ValueError):
        validation.check_thresholds((0.5, 0.6))
    with pytest.raises(ValueError):
        validation.check_thresholds((0.0, 0.5, 0.5))
