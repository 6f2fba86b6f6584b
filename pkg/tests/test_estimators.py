import numpy as np
import pytest
from sklearn.base import clone
from sklearn.exceptions import NotFittedError
from sklearn.pipeline import Pipeline

from imix.data import synth_blobs
from imix.estimators import ContrastiveEncoder, LinearProbeClassifier
from imix.mathcore import Rng


def tiny_encoder(**kw):
    base = dict(method="npair", imix=True, tau=0.2, batch_size=16, epochs=3,
                base_lr=0.05, warmup_epochs=1, hidden_dims=(16,),
                maxout_sets=1, proj_hidden=16, proj_dim=8, random_state=0)
    base.update(kw)
    return ContrastiveEncoder(**base)


@pytest.fixture(scope="module")
def blobs():
    ds = synth_blobs(Rng(0), 96, 3, 4, 2, 3.0)
    return ds.features, ds.labels


class TestContrastiveEncoder:
    def test_fit_transform_shapes(self, blobs):
        X, _ = blobs
        enc = tiny_encoder().fit(X)
        feats = enc.transform(X)
        assert feats.shape == (96, 16)
        assert len(enc.loss_curve_) == 3

    def test_get_params_round_trip(self):
        enc = tiny_encoder(tau=0.33)
        params = enc.get_params()
        assert params["tau"] == 0.33
        enc2 = clone(enc)
        assert enc2.get_params() == params

    def test_set_params(self):
        enc = tiny_encoder()
        enc.set_params(method="byol", epochs=2)
        assert enc.method == "byol"

    def test_transform_before_fit(self, blobs):
        X, _ = blobs
        with pytest.raises(NotFittedError):
            tiny_encoder().transform(X)

    def test_deterministic_given_random_state(self, blobs):
        X, _ = blobs
        a = tiny_encoder(random_state=7).fit(X).transform(X)
        b = tiny_encoder(random_state=7).fit(X).transform(X)
        assert np.array_equal(a, b)

    def test_moco_uses_bank_size(self, blobs):
        X, _ = blobs
        enc = tiny_encoder(method="moco", bank_size=24).fit(X)
        assert enc.state_.ema is not None

    def test_supervised_pretext_consumes_y(self, blobs):
        X, y = blobs
        enc = tiny_encoder(method="sup_npair").fit(X, y)
        assert enc.transform(X).shape[0] == X.shape[0]


class TestLinearProbeClassifier:
    def test_pinv_solver(self, blobs):
        X, y = blobs
        clf = LinearProbeClassifier().fit(X, y)
        assert clf.predict(X).shape == y.shape
        assert clf.score(X, y) > 0.8

    def test_arbitrary_label_values(self):
        rng = Rng(1)
        X = np.vstack([rng.normal((20, 3)) + 3, rng.normal((20, 3)) - 3])
        y = np.array([7] * 20 + [-2] * 20)
        clf = LinearProbeClassifier().fit(X, y)
        assert set(clf.predict(X)) <= {7, -2}
        assert clf.score(X, y) == 1.0

    def test_sgd_solver(self):
        rng = Rng(2)
        X = np.vstack([rng.normal((30, 3)) + 3, rng.normal((30, 3)) - 3])
        y = np.array([0] * 30 + [1] * 30)
        clf = LinearProbeClassifier(solver="sgd", epochs=10).fit(X, y)
        assert clf.score(X, y) == 1.0

    def test_predict_before_fit(self):
        with pytest.raises(NotFittedError):
            LinearProbeClassifier().predict(np.ones((2, 3)))

    def test_pipeline_composition(self, blobs):
        X, y = blobs
        pipe = Pipeline([
            ("encode", tiny_encoder(epochs=2)),
            ("probe", LinearProbeClassifier()),
        ])
        pipe.fit(X, y)
        assert 0.0 <= pipe.score(X, y) <= 1.0
