"""Episodic meta-training loop, one-step test adaptation, and the
evaluation harness with stability statistics.
"""

from __future__ import annotations

import json
import logging
import os
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, fields

import numpy as np

from . import autodiff as ad
from . import solvers
from .episodes import Episode, FeaturePool, sample_episode
from .objective import outer_gradient
from .promptnet import FrozenBackbone, PromptParams, build_backbone, embed, init_params

log = logging.getLogger(__name__)

# named sub-streams of the master seed
STREAM_SAMPLER = 0xE0
STREAM_EVAL = 0xF0


@dataclass
class AdamState:
    m: dict
    v: dict
    step: int
    learning_rate: float
    beta1: float
    beta2: float
    eps: float


def init_adam(params: PromptParams, config) -> AdamState:
    named = params.named_parameters()
    return AdamState(
        m={k: np.zeros_like(t.data) for k, t in named.items()},
        v={k: np.zeros_like(t.data) for k, t in named.items()},
        step=0,
        learning_rate=config.learning_rate,
        beta1=config.adam_beta1,
        beta2=config.adam_beta2,
        eps=config.adam_eps,
    )


def adam_step(params: PromptParams, grads: dict, state: AdamState):
    """One bias-corrected Adam update. Raises on non-finite gradients
    before touching any state, so a skipped episode leaves everything as
    it was."""
    named = params.named_parameters()
    if set(grads) != set(named):
        raise ValueError("gradient keys do not match parameter keys")
    for k, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise FloatingPointError(f"non-finite gradient for {k!r}")
    state.step += 1
    t = state.step
    bc1 = 1.0 - state.beta1 ** t
    bc2 = 1.0 - state.beta2 ** t
    for k, tensor in named.items():
        g = grads[k]
        state.m[k] = state.beta1 * state.m[k] + (1.0 - state.beta1) * g
        state.v[k] = state.beta2 * state.v[k] + (1.0 - state.beta2) * (g * g)
        m_hat = state.m[k] / bc1
        v_hat = state.v[k] / bc2
        tensor.data = tensor.data - state.learning_rate * m_hat / (np.sqrt(v_hat) + state.eps)
    return params, state


@dataclass
class EpisodeRecord:
    episode: int
    l_c: float
    l_d: float
    l_f: float
    total: float


@dataclass
class TrainHistory:
    records: list = field(default_factory=list)
    timings_ms: list = field(default_factory=list)  # wall clock, sidecar only
    seed: int = 0
    config_digest: str = ""
    skipped_episodes: int = 0

    def to_ndjson(self) -> str:
        """Deterministic serialization: meta line then one record per episode.
        Wall-clock timings are deliberately excluded (see timing sidecar)."""
        lines = [json.dumps(
            {"config_digest": self.config_digest, "seed": self.seed,
             "skipped_episodes": self.skipped_episodes},
            sort_keys=True,
        )]
        for r in self.records:
            lines.append(json.dumps(
                {"episode": r.episode, "L_c": r.l_c, "L_d": r.l_d,
                 "L_f": r.l_f, "total": r.total},
                sort_keys=True,
            ))
        return "\n".join(lines) + "\n"

    def timing_sidecar(self) -> str:
        return json.dumps(
            {"per_episode_millis": self.timings_ms,
             "total_millis": float(sum(self.timings_ms))},
        )


def meta_train(
    config,
    src_pool: FeaturePool,
    tgt_pool: FeaturePool,
    train_classes,
    seed: int | None = None,
    params: PromptParams | None = None,
    backbone: FrozenBackbone | None = None,
):
    """Algorithm: per episode, embed -> closed-form classifier -> similarity
    + normalization + closed-form adapter -> predictions -> exact outer
    gradient -> Adam step on the prompt parameters.

    Episodes with non-finite losses or gradients are skipped with a warning;
    more than `max_nan_skips` consecutive skips aborts with a diagnostic.
    """
    seed = config.seed if seed is None else seed
    if backbone is None:
        backbone = build_backbone(config, seed)
    if params is None:
        params = init_params(config, seed)
    state = init_adam(params, config)
    history = TrainHistory(seed=seed, config_digest=config.digest())

    if len(tuple(train_classes)) == 0:
        raise ValueError("train class split is empty")

    sampler_rng = np.random.default_rng(np.random.SeedSequence([seed, STREAM_SAMPLER]))
    total_episodes = config.epochs * config.episodes_per_epoch
    consecutive_skips = 0
    for i in range(total_episodes):
        episode = sample_episode(
            src_pool, tgt_pool, train_classes,
            config.way_count, config.shot_count, config.query_count,
            sampler_rng, restrict_target=config.restrict_train_target,
        )
        t0 = time.perf_counter()
        try:
            grads, breakdown = outer_gradient(episode, params, backbone, config)
            params, state = adam_step(params, grads, state)
        except FloatingPointError as err:
            consecutive_skips += 1
            history.skipped_episodes += 1
            log.warning("episode %d skipped: %s", i, err)
            if consecutive_skips > config.max_nan_skips:
                raise RuntimeError(
                    f"aborting after {consecutive_skips} consecutive non-finite "
                    f"episodes (episode {i}); last error: {err}"
                ) from err
            continue
        consecutive_skips = 0
        history.timings_ms.append((time.perf_counter() - t0) * 1000.0)
        history.records.append(EpisodeRecord(
            episode=i, l_c=breakdown.l_c, l_d=breakdown.l_d,
            l_f=breakdown.l_f, total=breakdown.total,
        ))
    return params, history


@dataclass
class TaskResult:
    task_id: int
    accuracy: float
    seconds: float
    linear_solves: int
    optimizer_steps: int


def _detach_params(params: PromptParams) -> PromptParams:
    kwargs = {}
    for f in fields(PromptParams):
        v = getattr(params, f.name)
        kwargs[f.name] = None if v is None else ad.Tensor(v.data)
    return PromptParams(**kwargs)


def adapt_and_test(
    params: PromptParams,
    backbone: FrozenBackbone,
    episode: Episode,
    config,
    task_id: int = 0,
    timing_reps: int | None = None,
) -> TaskResult:
    """One-step adaptation on a new task: embed, one classifier solve, one
    adapter solve, predict. No gradients, no optimizer steps, no mutation
    of the trained parameters.

    Timing takes the minimum over `timing_reps` identical repetitions to
    shed scheduler noise; the solve count is measured at the kernel level.
    """
    if episode.query_tgt_labels_heldout is None:
        raise ValueError("episode carries no held-out target labels to score")
    if np.any(episode.query_tgt_labels_heldout < 0):
        raise ValueError("target query contains classes outside the episode")
    frozen = _detach_params(params)
    reps = config.timing_reps if timing_reps is None else timing_reps
    best = float("inf")
    predictions = None
    solves = 0
    for _ in range(max(1, reps)):
        ad.reset_spd_solve_count()
        t0 = time.perf_counter()
        z_sup = embed(episode.support_x, frozen, backbone)
        z_tq = embed(episode.query_tgt_x, frozen, backbone)
        y_onehot = solvers.one_hot(episode.support_y, episode.way_count)
        clf = solvers.fit_ridge_classifier(z_sup, y_onehot, frozen.gamma_clf())
        if config.disable_adapter:
            logits = solvers.predict_source(z_tq, clf)
        else:
            a = solvers.similarity_matrix(z_tq, z_sup)
            a_norm, iters = solvers.normalize_similarity(
                a, config.sinkhorn_iters, config.sinkhorn_tol
            )
            adapter = solvers.fit_domain_adapter(
                z_tq, z_sup, a_norm, frozen.gamma_adapter(), sinkhorn_iters_used=iters
            )
            logits = solvers.predict_target(z_tq, adapter, clf)
        predictions = solvers.predict_labels(logits)
        best = min(best, time.perf_counter() - t0)
        solves = ad.spd_solve_count()
    accuracy = float(np.mean(predictions == episode.query_tgt_labels_heldout))
    return TaskResult(
        task_id=task_id,
        accuracy=accuracy,
        seconds=best,
        linear_solves=solves,
        optimizer_steps=0,
    )


def percentile_linear(values, q: float) -> float:
    """Percentile with linear interpolation between closest ranks."""
    a = np.sort(np.asarray(values, dtype=np.float64))
    if a.size == 0:
        raise ValueError("percentile of empty sequence")
    h = (a.size - 1) * q
    lo = int(np.floor(h))
    hi = int(np.ceil(h))
    return float(a[lo] + (h - lo) * (a[hi] - a[lo]))


@dataclass
class EvalSummary:
    num_tasks: int
    way_count: int
    shot_count: int
    mean_accuracy: float
    accuracy_variance: float
    median_accuracy: float
    q1_accuracy: float
    q3_accuracy: float
    iqr_accuracy: float
    seed: int
    config_digest: str

    def to_json(self) -> str:
        payload = {f.name: getattr(self, f.name) for f in fields(self)}
        return json.dumps(payload, sort_keys=True, indent=2) + "\n"


@dataclass
class TimingReport:
    mean_seconds: float
    max_seconds: float
    per_task_seconds: list

    def to_json(self) -> str:
        return json.dumps(
            {"mean_seconds": self.mean_seconds, "max_seconds": self.max_seconds,
             "per_task_seconds": self.per_task_seconds},
        ) + "\n"


def evaluate_suite(
    params: PromptParams,
    backbone: FrozenBackbone,
    src_pool: FeaturePool,
    tgt_pool: FeaturePool,
    test_classes,
    config,
    num_tasks: int | None = None,
    seed: int | None = None,
    workers: int | None = None,
):
    """Score many sampled test tasks against one frozen parameter snapshot.

    Task i draws its episode from a seed stream keyed by (seed, i), so the
    result set is identical for any worker count; results merge by task
    index. Returns (EvalSummary, TimingReport, [TaskResult])."""
    seed = config.seed if seed is None else seed
    num_tasks = config.num_test_tasks if num_tasks is None else num_tasks
    if num_tasks < 1:
        raise ValueError(f"num_tasks must be >= 1, got {num_tasks}")
    workers = config.workers if workers is None else workers
    if workers == 0:
        workers = os.cpu_count() or 1

    def run_task(i: int) -> TaskResult:
        rng = np.random.default_rng(np.random.SeedSequence([seed, STREAM_EVAL, i]))
        episode = sample_episode(
            src_pool, tgt_pool, test_classes,
            config.way_count, config.shot_count, config.query_count,
            rng, restrict_target=True,
        )
        return adapt_and_test(params, backbone, episode, config, task_id=i)

    if workers <= 1:
        results = [run_task(i) for i in range(num_tasks)]
    else:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(run_task, range(num_tasks)))

    acc = np.array([r.accuracy for r in results])
    times = [r.seconds for r in results]
    q1 = percentile_linear(acc, 0.25)
    q3 = percentile_linear(acc, 0.75)
    summary = EvalSummary(
        num_tasks=num_tasks,
        way_count=config.way_count,
        shot_count=config.shot_count,
        mean_accuracy=float(acc.mean()),
        accuracy_variance=float(acc.var()),
        median_accuracy=percentile_linear(acc, 0.5),
        q1_accuracy=q1,
        q3_accuracy=q3,
        iqr_accuracy=q3 - q1,
        seed=seed,
        config_digest=config.digest(),
    )
    timing = TimingReport(
        mean_seconds=float(np.mean(times)),
        max_seconds=float(np.max(times)),
        per_task_seconds=times,
    )
    return summary, timing, results


def per_task_csv(results, config_digest: str, seed: int) -> str:
    lines = [f"# config_digest={config_digest} seed={seed}", "task_id,accuracy"]
    for r in results:
        lines.append(f"{r.task_id},{r.accuracy!r}")
    return "\n".join(lines) + "\n"
