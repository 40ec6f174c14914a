"""Outer meta objective: classification + entropy + class-discrimination terms,
with exact gradients through the closed-form task solutions.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from . import solvers
from .autodiff import Tensor
from .episodes import Episode
from .promptnet import FrozenBackbone, PromptParams, embed


@dataclass
class LossBreakdown:
    l_c: float
    l_d: float
    l_f: float
    total: float
    lambda_d: float
    lambda_f: float


@dataclass
class PseudoLabelAssignment:
    """Matched (target index, support index, cosine similarity) triples.

    The assignment is a discrete decision frozen at forward time; gradients
    never flow through the threshold comparison or the argmax.
    """

    pairs: list = field(default_factory=list)
    threshold: float = 0.0


def classification_loss(logits, labels) -> Tensor:
    return ad.cross_entropy(ad.softmax_rows(logits), labels)


def entropy_loss(logits) -> Tensor:
    return ad.shannon_entropy_rows(ad.softmax_rows(logits))


def _row_normalized(data: np.ndarray) -> np.ndarray:
    norms = np.linalg.norm(data, axis=1, keepdims=True)
    safe = np.where(norms == 0.0, 1.0, norms)
    return data / safe


def discrimination_loss(
    z_src_que: Tensor,
    y_src_que,
    z_tgt: Tensor,
    z_src_sup: Tensor,
    y_src_sup,
    tau: Tensor,
    lambda_s: Tensor,
    soft_assignment: bool = False,
    soft_temperature: float = 0.05,
    scale_normalize: bool = True,
):
    """Scatter trade-off S_w - lambda_s * S_b over labeled source queries plus
    pseudo-labeled target samples.

    A target sample inherits the class of its most cosine-similar source
    support sample when that similarity exceeds `tau`; unmatched targets are
    excluded. With `soft_assignment`, every target enters weighted by
    sigmoid((sim - tau) / temperature) instead, which gives tau a smooth
    gradient path. Both scatters are trace-form scalars.

    With `scale_normalize` the pool is divided by its RMS feature norm
    (differentiated through, not detached). The raw trade-off pays
    unboundedly for inflating the embedding scale -- with a purely linear
    trainable head nothing else stops that direction, and in practice it
    blows up the similarity kernel -- so the normalized form keeps only the
    shape of the scatter objective. Disable it to get the textbook sums.
    """
    y_que = np.asarray(y_src_que, dtype=np.intp)
    y_sup = np.asarray(y_src_sup, dtype=np.intp)
    p = z_src_que.data.shape[0]
    if p == 0:
        raise ValueError("empty pool: no labeled source query samples")
    tau_val = float(tau.data)

    sims = _row_normalized(z_tgt.data) @ _row_normalized(z_src_sup.data).T
    best = np.argmax(sims, axis=1)
    best_sim = sims[np.arange(sims.shape[0]), best]

    assignment = PseudoLabelAssignment(threshold=tau_val)
    if soft_assignment:
        matched = np.arange(z_tgt.data.shape[0])
    else:
        matched = np.flatnonzero(best_sim > tau_val)
    for i in matched:
        assignment.pairs.append((int(i), int(best[i]), float(best_sim[i])))

    rows = [z_src_que]
    weights = [ad.constant(np.ones(p))]
    labels = [y_que]
    if matched.size:
        rows.append(ad.take_rows(z_tgt, matched))
        labels.append(y_sup[best[matched]])
        if soft_assignment:
            # smooth weight w = sigmoid((cos - tau) / T); cosine kept in-graph
            zt_sel = ad.take_rows(z_tgt, matched)
            zs_sel = ad.take_rows(z_src_sup, best[matched])
            dots = ad.tsum(ad.mul(zt_sel, zs_sel), axis=1)
            nt = ad.sqrt(ad.clamp_min(ad.tsum(ad.mul(zt_sel, zt_sel), axis=1), 1e-24))
            ns = ad.sqrt(ad.clamp_min(ad.tsum(ad.mul(zs_sel, zs_sel), axis=1), 1e-24))
            cos = ad.div(dots, ad.mul(nt, ns))
            weights.append(ad.sigmoid(ad.div(ad.sub(cos, tau), soft_temperature)))
        else:
            weights.append(ad.constant(np.ones(matched.size)))

    pool = ad.concat(rows, axis=0)
    w = ad.reshape(ad.concat(weights, axis=0), (-1, 1))
    pool_labels = np.concatenate(labels)

    total_w = ad.tsum(w)
    if scale_normalize:
        sq_norms = ad.tsum(ad.mul(pool, pool), axis=1, keepdims=True)
        rms = ad.sqrt(ad.clamp_min(ad.div(ad.tsum(ad.mul(w, sq_norms)), total_w), 1e-24))
        pool = ad.div(pool, rms)
    grand_mean = ad.div(ad.tsum(ad.mul(w, pool), axis=0, keepdims=True), total_w)

    s_w = ad.constant(0.0)
    s_b = ad.constant(0.0)
    for c in np.unique(pool_labels):
        idx = np.flatnonzero(pool_labels == c)
        xc = ad.take_rows(pool, idx)
        wc = ad.take_rows(w, idx)
        mass = ad.tsum(wc)
        mu_c = ad.div(ad.tsum(ad.mul(wc, xc), axis=0, keepdims=True), mass)
        diff = ad.sub(xc, mu_c)
        s_w = ad.add(s_w, ad.tsum(ad.mul(wc, ad.mul(diff, diff))))
        gap = ad.sub(mu_c, grand_mean)
        s_b = ad.add(s_b, ad.mul(mass, ad.tsum(ad.mul(gap, gap))))

    return ad.sub(s_w, ad.mul(lambda_s, s_b)), assignment


@dataclass
class EpisodeOutputs:
    """Everything the forward pass produced for one episode."""

    total: Tensor
    breakdown: LossBreakdown
    clf: solvers.ClassifierSolution
    adapter: solvers.AdapterSolution | None
    assignment: PseudoLabelAssignment | None
    logits_tgt: Tensor


def episode_outer_loss(
    episode: Episode,
    params: PromptParams,
    backbone: FrozenBackbone,
    config,
) -> EpisodeOutputs:
    """Run the full per-episode forward pass in training order: embed,
    fit both base learners, score both query sets, combine the three terms."""
    n_way = episode.way_count

    z_ss = embed(episode.support_x, params, backbone)
    z_sq = embed(episode.query_src_x, params, backbone)
    z_tq = embed(episode.query_tgt_x, params, backbone)

    y_onehot = solvers.one_hot(episode.support_y, n_way)
    clf = solvers.fit_ridge_classifier(z_ss, y_onehot, params.gamma_clf())

    adapter = None
    if config.disable_adapter:
        z_proj = z_tq
        logits_tgt = solvers.predict_source(z_tq, clf)
    else:
        a = solvers.similarity_matrix(z_tq, z_ss)
        a_norm, iters = solvers.normalize_similarity(
            a, config.sinkhorn_iters, config.sinkhorn_tol
        )
        adapter = solvers.fit_domain_adapter(
            z_tq, z_ss, a_norm, params.gamma_adapter(), sinkhorn_iters_used=iters
        )
        z_proj = solvers.project_target(z_tq, adapter)
        logits_tgt = ad.matmul(z_proj, clf.theta)

    logits_src = solvers.predict_source(z_sq, clf)
    l_c = classification_loss(logits_src, episode.query_src_y)

    if config.disable_ld:
        l_d = ad.constant(0.0)
    else:
        l_d = entropy_loss(logits_tgt)

    assignment = None
    if config.disable_lf:
        l_f = ad.constant(0.0)
    else:
        z_for_lf = z_tq if (config.lf_on_raw_target or adapter is None) else z_proj
        l_f, assignment = discrimination_loss(
            z_sq,
            episode.query_src_y,
            z_for_lf,
            z_ss,
            episode.support_y,
            params.tau(),
            params.lambda_s(),
            soft_assignment=config.lf_soft_assignment,
            soft_temperature=config.lf_soft_temperature,
            scale_normalize=config.lf_normalize_scale,
        )

    total = ad.add(l_c, ad.add(ad.mul(config.lambda_d, l_d), ad.mul(config.lambda_f, l_f)))
    breakdown = LossBreakdown(
        l_c=l_c.item(),
        l_d=l_d.item(),
        l_f=l_f.item(),
        total=total.item(),
        lambda_d=config.lambda_d,
        lambda_f=config.lambda_f,
    )
    return EpisodeOutputs(
        total=total,
        breakdown=breakdown,
        clf=clf,
        adapter=adapter,
        assignment=assignment,
        logits_tgt=logits_tgt,
    )


def outer_gradient(episode, params: PromptParams, backbone, config):
    """Exact reverse-mode gradient of the weighted outer loss with respect
    to every trainable parameter. Parameters untouched by the active loss
    paths get explicit zero gradients so optimizer state stays aligned."""
    outputs = episode_outer_loss(episode, params, backbone, config)
    if not np.isfinite(outputs.total.item()):
        raise FloatingPointError(f"non-finite outer loss: {outputs.breakdown}")
    named = params.named_parameters()
    for t in named.values():
        t.grad = None
    outputs.total.backward()
    grads = {
        name: (t.grad if t.grad is not None else np.zeros_like(t.data))
        for name, t in named.items()
    }
    return grads, outputs.breakdown
