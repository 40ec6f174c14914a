"""sklearn-facade behavior: params round trips, closed-form fits, and the
meta learner's task API."""

import numpy as np
import pytest
from sklearn.base import clone

from fsuda.estimator import CrossDomainProjector, MetaPromptLearner, RidgeHeadClassifier


def blobs(rng, centers, n_per, sigma=0.05):
    xs, ys = [], []
    for label, c in enumerate(centers):
        xs.append(c + sigma * rng.standard_normal((n_per, len(c))))
        ys.append(np.full(n_per, label))
    return np.vstack(xs), np.concatenate(ys)


class TestRidgeHeadClassifier:
    def test_get_set_params_clone(self):
        est = RidgeHeadClassifier(gamma=2.5)
        assert est.get_params() == {"gamma": 2.5}
        cloned = clone(est)
        assert cloned.get_params() == {"gamma": 2.5}
        est.set_params(gamma=0.1)
        assert est.gamma == 0.1

    def test_fit_predict_separable(self, rng):
        X, y = blobs(rng, np.eye(3) * 4.0, 10)
        est = RidgeHeadClassifier(gamma=0.01).fit(X, y)
        np.testing.assert_array_equal(est.predict(X), y)

    def test_noncontiguous_labels_restored(self, rng):
        X, y = blobs(rng, np.eye(2) * 4.0, 8)
        remapped = np.where(y == 0, 7, 42)
        est = RidgeHeadClassifier(gamma=0.01).fit(X, remapped)
        assert set(est.predict(X)) <= {7, 42}
        np.testing.assert_array_equal(est.predict(X), remapped)

    def test_validation_errors(self):
        with pytest.raises(ValueError, match="gamma"):
            RidgeHeadClassifier(gamma=-1.0).fit(np.eye(2), [0, 1])
        with pytest.raises(ValueError, match="labels"):
            RidgeHeadClassifier().fit(np.eye(2), [0, 1, 2])


class TestCrossDomainProjector:
    def test_projection_reduces_domain_gap(self, rng):
        centers = np.eye(4) * 3.0
        Xs, _ = blobs(rng, centers, 12)
        rot = np.eye(4)
        rot[0, 0] = rot[1, 1] = np.cos(0.4)
        rot[0, 1], rot[1, 0] = -np.sin(0.4), np.sin(0.4)
        Xt = Xs @ rot.T + 0.3
        proj = CrossDomainProjector(gamma=0.1).fit(Xt, Xs)
        before = np.abs(Xt.mean(axis=0) - Xs.mean(axis=0)).max()
        after = np.abs(proj.transform(Xt).mean(axis=0) - Xs.mean(axis=0)).max()
        assert after < before

    def test_transform_shape_and_niter(self, rng):
        Xs = rng.standard_normal((6, 3))
        Xt = rng.standard_normal((4, 3))
        proj = CrossDomainProjector().fit(Xt, Xs)
        assert proj.projection_.shape == (3, 3)
        assert proj.n_iter_ >= 1
        assert proj.transform(Xt).shape == (4, 3)

    def test_dim_mismatch(self, rng):
        with pytest.raises(ValueError, match="feature dim"):
            CrossDomainProjector().fit(rng.standard_normal((3, 2)), rng.standard_normal((3, 5)))


class TestMetaPromptLearner:
    def make_data(self, rng, n_classes=6, per_class=8, dim=8):
        centers = rng.standard_normal((n_classes, dim)) * 2.0
        Xs, ys = blobs(rng, centers, per_class, sigma=0.1)
        Xt, _ = blobs(rng, centers + 0.2, per_class, sigma=0.1)
        return Xs, ys, Xt

    def test_sklearn_params_protocol(self):
        est = MetaPromptLearner(way_count=3, episodes=2)
        params = est.get_params()
        assert params["way_count"] == 3
        cloned = clone(est)
        assert cloned.get_params() == params

    def test_fit_and_predict_task(self, rng):
        Xs, ys, Xt = self.make_data(rng)
        est = MetaPromptLearner(way_count=3, shot_count=2, query_count=2,
                                episodes=3, token_dim=8, n_dsp=2, n_tsp=1,
                                n_img=2, backbone_hidden=12, backbone_out=10,
                                head_out=8, seed=0)
        est.fit(Xs, ys, Xt)
        assert len(est.history_.records) == 3
        support = Xs[:6]
        support_y = ys[:6]
        preds = est.predict_task(support, support_y, Xt[:4])
        assert preds.shape == (4,)
        assert set(preds) <= set(support_y)

    def test_predict_before_fit_raises(self):
        est = MetaPromptLearner()
        with pytest.raises(RuntimeError, match="fit"):
            est.predict_task(np.eye(2), [0, 1], np.eye(2))

    def test_score_task_range(self, rng):
        Xs, ys, Xt = self.make_data(rng)
        est = MetaPromptLearner(way_count=3, shot_count=2, query_count=2,
                                episodes=2, token_dim=8, n_dsp=2, n_tsp=1,
                                n_img=2, backbone_hidden=12, backbone_out=10,
                                head_out=8, seed=1)
        est.fit(Xs, ys, Xt)
        score = est.score_task(Xs[:6], ys[:6], Xs[6:10], ys[6:10])
        assert 0.0 <= score <= 1.0
