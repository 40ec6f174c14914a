"""scikit-learn style facades over the closed-form solvers and the meta
prompt learner, so the pieces compose with the wider estimator ecosystem
(get_params/set_params, clone, pipelines over the transformer).
"""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin, TransformerMixin

from . import autodiff as ad
from . import solvers, trainer
from .config import RunConfig
from .episodes import FeaturePool
from .promptnet import build_backbone, embed, init_params
from .validation import as_float_matrix, as_label_vector, check_positive, check_same_cols


class RidgeHeadClassifier(BaseEstimator, ClassifierMixin):
    """Multiclass ridge regression onto one-hot targets with a closed-form fit.

    The solve automatically switches between the sample-space and
    feature-space forms depending on which is smaller.
    """

    def __init__(self, gamma=1.0):
        self.gamma = gamma

    def fit(self, X, y):
        X = as_float_matrix(X, "X")
        y = as_label_vector(y, "y", X.shape[0])
        check_positive(self.gamma, "gamma")
        self.classes_, encoded = np.unique(y, return_inverse=True)
        onehot = solvers.one_hot(encoded, len(self.classes_))
        solution = solvers.fit_ridge_classifier(ad.constant(X), onehot, self.gamma)
        self.coef_ = solution.theta.data
        return self

    def decision_function(self, X):
        X = as_float_matrix(X, "X")
        return X @ self.coef_

    def predict(self, X):
        scores = self.decision_function(X)
        return self.classes_[np.argmax(scores, axis=1)]


class CrossDomainProjector(BaseEstimator, TransformerMixin):
    """Learn a linear map pulling target-domain rows toward their most
    similar source rows, via the normalized Gaussian similarity and the
    closed-form weighted ridge projection."""

    def __init__(self, gamma=1000.0, sinkhorn_iters=100, sinkhorn_tol=1e-6):
        self.gamma = gamma
        self.sinkhorn_iters = sinkhorn_iters
        self.sinkhorn_tol = sinkhorn_tol

    def fit(self, X, X_source):
        X = as_float_matrix(X, "X")
        X_source = as_float_matrix(X_source, "X_source")
        check_same_cols(X, X_source, "X", "X_source")
        check_positive(self.gamma, "gamma")
        a = solvers.similarity_matrix(ad.constant(X), ad.constant(X_source))
        a_norm, iters = solvers.normalize_similarity(a, self.sinkhorn_iters, self.sinkhorn_tol)
        solution = solvers.fit_domain_adapter(
            ad.constant(X), ad.constant(X_source), a_norm, self.gamma,
            sinkhorn_iters_used=iters,
        )
        self.projection_ = solution.theta.data
        self.n_iter_ = solution.sinkhorn_iters_used
        return self

    def transform(self, X):
        X = as_float_matrix(X, "X")
        return X @ self.projection_


class MetaPromptLearner(BaseEstimator):
    """Episodic meta-trainer for few-shot cross-domain classification.

    `fit` consumes a labeled source array and an unlabeled target array and
    meta-trains the prompt parameters; `predict_task` then solves a single
    new task (labeled support + unlabeled target queries) in closed form.
    """

    def __init__(
        self,
        way_count=5,
        shot_count=1,
        query_count=15,
        episodes=200,
        learning_rate=0.005,
        lambda_d=0.01,
        lambda_f=0.01,
        token_dim=32,
        n_dsp=4,
        n_tsp=2,
        n_img=2,
        backbone_hidden=64,
        backbone_out=64,
        head_out=16,
        sinkhorn_iters=100,
        sinkhorn_tol=1e-6,
        seed=0,
    ):
        self.way_count = way_count
        self.shot_count = shot_count
        self.query_count = query_count
        self.episodes = episodes
        self.learning_rate = learning_rate
        self.lambda_d = lambda_d
        self.lambda_f = lambda_f
        self.token_dim = token_dim
        self.n_dsp = n_dsp
        self.n_tsp = n_tsp
        self.n_img = n_img
        self.backbone_hidden = backbone_hidden
        self.backbone_out = backbone_out
        self.head_out = head_out
        self.sinkhorn_iters = sinkhorn_iters
        self.sinkhorn_tol = sinkhorn_tol
        self.seed = seed

    def _config(self, raw_dim: int) -> RunConfig:
        return RunConfig(
            raw_dim=raw_dim,
            token_dim=self.token_dim,
            n_dsp=self.n_dsp,
            n_tsp=self.n_tsp,
            n_img=self.n_img,
            backbone_hidden=self.backbone_hidden,
            backbone_out=self.backbone_out,
            head_out=self.head_out,
            way_count=self.way_count,
            shot_count=self.shot_count,
            query_count=self.query_count,
            epochs=1,
            episodes_per_epoch=self.episodes,
            learning_rate=self.learning_rate,
            lambda_d=self.lambda_d,
            lambda_f=self.lambda_f,
            sinkhorn_iters=self.sinkhorn_iters,
            sinkhorn_tol=self.sinkhorn_tol,
            seed=self.seed,
            synth_per_class=max(40, self.shot_count + self.query_count),
            synth_signal_dim=0,  # data always arrives as arrays here
        )

    def fit(self, X, y, X_target):
        """Meta-train on a labeled source pool and an unlabeled target pool."""
        X = as_float_matrix(X, "X")
        y = as_label_vector(y, "y", X.shape[0])
        X_target = as_float_matrix(X_target, "X_target")
        check_same_cols(X, X_target, "X", "X_target")
        config = self._config(X.shape[1]).validate()
        src = FeaturePool(X, y, "source")
        tgt = FeaturePool(X_target, None, "target")
        self.config_ = config
        self.backbone_ = build_backbone(config, self.seed)
        params = init_params(config, self.seed)
        self.params_, self.history_ = trainer.meta_train(
            config, src, tgt, tuple(src.classes()), seed=self.seed,
            params=params, backbone=self.backbone_,
        )
        return self

    def predict_task(self, support_X, support_y, query_X):
        """Closed-form adaptation to one new task; returns predicted labels
        for the unlabeled target queries."""
        if not hasattr(self, "params_"):
            raise RuntimeError("fit must be called before predict_task")
        support_X = as_float_matrix(support_X, "support_X")
        support_y = as_label_vector(support_y, "support_y", support_X.shape[0])
        query_X = as_float_matrix(query_X, "query_X")
        classes, encoded = np.unique(support_y, return_inverse=True)

        frozen = trainer._detach_params(self.params_)
        z_sup = embed(support_X, frozen, self.backbone_)
        z_que = embed(query_X, frozen, self.backbone_)
        onehot = solvers.one_hot(encoded, len(classes))
        clf = solvers.fit_ridge_classifier(z_sup, onehot, frozen.gamma_clf())
        a = solvers.similarity_matrix(z_que, z_sup)
        a_norm, iters = solvers.normalize_similarity(
            a, self.sinkhorn_iters, self.sinkhorn_tol
        )
        adapter = solvers.fit_domain_adapter(
            z_que, z_sup, a_norm, frozen.gamma_adapter(), sinkhorn_iters_used=iters
        )
        logits = solvers.predict_target(z_que, adapter, clf)
        return classes[solvers.predict_labels(logits)]

    def score_task(self, support_X, support_y, query_X, query_y):
        predictions = self.predict_task(support_X, support_y, query_X)
        query_y = as_label_vector(query_y, "query_y", len(predictions))
        return float(np.mean(predictions == query_y))
