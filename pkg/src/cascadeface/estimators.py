"""scikit-learn style estimator wrappers around the cascade detector and the
Haar baseline, so both compose with the wider ecosystem (get_params /
set_params / clone)."""

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.exceptions import NotFittedError

from . import haar, nets, pipeline, synth, train, validation


class MtcnnDetector(BaseEstimator):
    """Three-stage cascaded CNN face detector with landmark output.

    fit() trains the three stage networks on per-stage patch datasets
    (dict {12: [...], 24: [...], 48: [...]} of TrainingSample); with X=None it
    generates synthetic datasets of `n_synth` samples per stage. Already
    trained weights can be attached with `load_weights` instead.
    """

    def __init__(self, min_face_size=20.0, scale_factor=0.709,
                 thresholds=(0.6, 0.7, 0.7), n_synth=2000,
                 epochs=(30, 12, 8), learning_rate=0.1, batch_size=64,
                 ohem_keep_ratio=0.7, random_state=42):
        self.min_face_size = min_face_size
        self.scale_factor = scale_factor
        self.thresholds = thresholds
        self.n_synth = n_synth
        self.epochs = epochs
        self.learning_rate = learning_rate
        self.batch_size = batch_size
        self.ohem_keep_ratio = ohem_keep_ratio
        self.random_state = random_state

    def _config(self):
        return pipeline.CascadeConfig(
            thresholds=validation.check_thresholds(self.thresholds),
            pyramid=pipeline.PyramidConfig(
                min_face_size=float(self.min_face_size),
                scale_factor=float(self.scale_factor)))

    def fit(self, X=None, y=None):
        """Train pnet/rnet/onet; X may map patch size to TrainingSample lists.

        Returns self.
        """
        specs = (nets.build_pnet(), nets.build_rnet(), nets.build_onet())
        store = {}
        histories = {}
        for stage_i, spec in enumerate(specs):
            size = spec.input_size
            if X is not None and size in X:
                samples = X[size]
            else:
                samples = synth.synth_dataset(
                    int(self.n_synth), size, int(self.random_state) + stage_i)
            epochs = self.epochs[stage_i] if np.iterable(self.epochs) else self.epochs
            cfg = train.TrainConfig(
                learning_rate=float(self.learning_rate),
                batch_size=int(self.batch_size),
                epochs=int(epochs),
                ohem_keep_ratio=float(self.ohem_keep_ratio),
                rng_seed=int(self.random_state) + stage_i)
            init = train.init_weights(spec, rng_seed=int(self.random_state) + stage_i)
            trained, history = train.train_stage(spec, init, samples, cfg)
            store.update(trained)
            histories[spec.stage] = history
        self.store_ = store
        self.history_ = histories
        return self

    def load_weights(self, path):
        """Attach pre-trained weights instead of fitting; returns self."""
        store = nets.load_weights(path)
        for spec in (nets.build_pnet(), nets.build_rnet(), nets.build_onet()):
            nets.validate_store(store, spec)
        self.store_ = store
        return self

    def _check_fitted(self):
        if not hasattr(self, "store_"):
            raise NotFittedError(
                "this MtcnnDetector is not fitted yet; call fit() or load_weights()")

    def detect(self, image):
        """Full pipeline result (detections plus stage counts/times) for one
        image."""
        self._check_fitted()
        image = validation.check_image(image)
        return pipeline.detect(image, self.store_, self._config())

    def predict(self, X):
        """Detections for one image or a list of images.

        A single (H, W[, C]) image yields a list of Detection; an iterable of
        images yields a list of such lists.
        """
        self._check_fitted()
        images, single = validation.check_images(X)
        results = [self.detect(img).detections for img in images]
        return results[0] if single else results


class HaarDetector(BaseEstimator):
    """Viola-Jones-style cascade: fit on labeled 24x24 grayscale windows,
    predict on full images."""

    def __init__(self, stage_detection_rate=0.995, stage_fp_rate=0.25,
                 max_stages=10, max_rounds=60, scale_step=1.25, window_stride=2):
        self.stage_detection_rate = stage_detection_rate
        self.stage_fp_rate = stage_fp_rate
        self.max_stages = max_stages
        self.max_rounds = max_rounds
        self.scale_step = scale_step
        self.window_stride = window_stride

    def fit(self, X, y):
        """X: (n, 24, 24) uint8 windows; y: (n,) binary labels. Returns self."""
        X = validation.check_windows(X)
        y = validation.check_labels(y, len(X))
        if not (y == 1).any() or not (y == 0).any():
            raise ValueError("fit requires both positive and negative windows")
        self.model_ = haar.build_cascade(
            X[y == 1], X[y == 0],
            stage_targets=(float(self.stage_detection_rate), float(self.stage_fp_rate)),
            max_stages=int(self.max_stages),
            max_rounds=int(self.max_rounds))
        return self

    def _check_fitted(self):
        if not hasattr(self, "model_"):
            raise NotFittedError(
                "this HaarDetector is not fitted yet; call fit() or load_model()")

    def load_model(self, path):
        """Attach a serialized cascade instead of fitting; returns self."""
        self.model_ = haar.load_cascade(path)
        return self

    def predict(self, X):
        """Detections for one image or a list of images."""
        self._check_fitted()
        images, single = validation.check_images(X)
        results = [haar.detect_haar(img, self.model_,
                                    scale_step=float(self.scale_step),
                                    window_stride=int(self.window_stride))
                   for img in images]
        return results[0] if single else results
