"""Feature pools, N-way K-shot task sampling, and the synthetic two-domain generator."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import feature_io
from .validation import as_float_matrix, as_label_vector


@dataclass
class FeaturePool:
    """Labeled or unlabeled collection of raw feature vectors for one domain.

    Immutable after construction. For labeled pools `class_index` maps each
    class to the row indices holding its samples.
    """

    features: np.ndarray
    labels: np.ndarray | None
    domain_tag: str
    class_index: dict[int, np.ndarray] = field(default_factory=dict)

    def __post_init__(self):
        self.features = as_float_matrix(self.features, "features")
        if self.labels is not None:
            self.labels = as_label_vector(self.labels, "labels", self.features.shape[0])
            self.class_index = {
                int(c): np.flatnonzero(self.labels == c)
                for c in np.unique(self.labels)
            }
        if self.domain_tag not in ("source", "target"):
            raise ValueError(f"domain_tag must be source|target, got {self.domain_tag!r}")

    @property
    def num_samples(self) -> int:
        return self.features.shape[0]

    @property
    def raw_dim(self) -> int:
        return self.features.shape[1]

    def classes(self) -> np.ndarray:
        if self.labels is None:
            raise ValueError("pool is unlabeled")
        return np.array(sorted(self.class_index), dtype=np.int64)

    def save(self, path) -> None:
        feature_io.write_feature_file(path, self.features, self.labels)

    @classmethod
    def load(cls, path, domain_tag: str) -> "FeaturePool":
        features, labels = feature_io.read_feature_file(path)
        return cls(features.astype(np.float64), labels, domain_tag)


@dataclass
class Episode:
    """One N-way K-shot UDA task.

    Support and source query carry labels remapped to 0..N-1; the target
    query is unlabeled. `query_tgt_labels_heldout` exists only so the
    evaluation harness can score accuracy; no model path may read it.
    """

    support_x: np.ndarray
    support_y: np.ndarray
    query_src_x: np.ndarray
    query_src_y: np.ndarray
    query_tgt_x: np.ndarray
    way_count: int
    shot_count: int
    query_count: int
    episode_classes: np.ndarray
    query_tgt_labels_heldout: np.ndarray | None = None


@dataclass(frozen=True)
class ClassSplit:
    """Disjoint class sets for meta-train / validation / meta-test."""

    train_classes: tuple
    val_classes: tuple
    test_classes: tuple

    def __post_init__(self):
        sets = [set(self.train_classes), set(self.val_classes), set(self.test_classes)]
        total = sum(len(s) for s in sets)
        if len(sets[0] | sets[1] | sets[2]) != total:
            raise ValueError("class splits overlap")


def split_classes(classes, n_train: int, n_val: int, n_test: int, rng) -> ClassSplit:
    classes = np.asarray(classes)
    if n_train + n_val + n_test != classes.size:
        raise ValueError(
            f"split sizes {n_train}+{n_val}+{n_test} do not cover {classes.size} classes"
        )
    perm = rng.permutation(classes)
    return ClassSplit(
        train_classes=tuple(int(c) for c in perm[:n_train]),
        val_classes=tuple(int(c) for c in perm[n_train:n_train + n_val]),
        test_classes=tuple(int(c) for c in perm[n_train + n_val:]),
    )


def sample_episode(
    src: FeaturePool,
    tgt: FeaturePool,
    split_classes,
    way_count: int,
    shot_count: int,
    query_count: int,
    rng,
    restrict_target: bool = False,
) -> Episode:
    """Draw one episode: N classes, K support + N_q source query per class,
    N*N_q target queries.

    With `restrict_target` the target rows are drawn from the episode's own
    classes (meta-test protocol, so accuracy is well defined); otherwise
    uniformly from the target rows of all `split_classes` (meta-train).
    Deterministic given the rng state.
    """
    if src.labels is None:
        raise ValueError("source pool must be labeled")
    split = np.asarray(sorted(split_classes), dtype=np.int64)
    if way_count > split.size:
        raise ValueError(
            f"way_count {way_count} exceeds split size {split.size}"
        )
    need = shot_count + query_count
    for c in split:
        if len(src.class_index.get(int(c), ())) < need:
            raise ValueError(
                f"class {int(c)} has fewer than shot_count+query_count={need} source samples"
            )

    chosen = rng.choice(split, size=way_count, replace=False)
    sup_idx, que_idx, sup_y, que_y = [], [], [], []
    for new_label, c in enumerate(chosen):
        rows = src.class_index[int(c)]
        draw = rng.choice(rows, size=need, replace=False)
        sup_idx.append(draw[:shot_count])
        que_idx.append(draw[shot_count:])
        sup_y.append(np.full(shot_count, new_label, dtype=np.int64))
        que_y.append(np.full(query_count, new_label, dtype=np.int64))
    sup_idx = np.concatenate(sup_idx)
    que_idx = np.concatenate(que_idx)

    n_tgt = way_count * query_count
    if restrict_target or tgt.labels is not None:
        allowed = chosen if restrict_target else split
        if tgt.labels is None:
            raise ValueError("target pool must be labeled to restrict sampling by class")
        mask = np.isin(tgt.labels, allowed)
        candidates = np.flatnonzero(mask)
    else:
        candidates = np.arange(tgt.num_samples)
    if candidates.size < n_tgt:
        raise ValueError(
            f"target pool has {candidates.size} eligible rows, need {n_tgt}"
        )
    tgt_idx = rng.choice(candidates, size=n_tgt, replace=False)

    heldout = None
    if tgt.labels is not None:
        remap = {int(c): i for i, c in enumerate(chosen)}
        heldout = np.array(
            [remap.get(int(lbl), -1) for lbl in tgt.labels[tgt_idx]], dtype=np.int64
        )

    return Episode(
        support_x=src.features[sup_idx],
        support_y=np.concatenate(sup_y),
        query_src_x=src.features[que_idx],
        query_src_y=np.concatenate(que_y),
        query_tgt_x=tgt.features[tgt_idx],
        way_count=way_count,
        shot_count=shot_count,
        query_count=query_count,
        episode_classes=np.asarray(chosen, dtype=np.int64),
        query_tgt_labels_heldout=heldout,
    )


@dataclass
class DomainShiftSpec:
    """Parametric, reproducible domain gap: rotation + translation + noise.

    The rotation is a Cayley transform (I - sA)(I + sA)^{-1} of a seeded
    random skew-symmetric A, so `rotation_strength` dials the gap from the
    identity (0.0) upward while staying exactly orthogonal. An explicit
    `rotation_matrix` overrides the seeded construction.

    When the generator carves out a signal subspace (first `signal_dim`
    coordinates), `signal_leak` scales how much the rotation and
    translation bleed into it; at 0 the shift lives entirely in the
    complement.
    """

    rotation_seed: int | None = None
    rotation_strength: float = 1.0
    translation_scale: float = 0.0
    noise_sigma: float = 0.0
    rotation_matrix: np.ndarray | None = None
    signal_leak: float = 0.0

    def materialize(self, dim: int, signal_dim: int = 0):
        """Return (R, t) for feature dimension `dim`."""
        s = signal_dim
        if self.rotation_matrix is not None:
            R = np.asarray(self.rotation_matrix, dtype=np.float64)
            if R.shape != (dim, dim):
                raise ValueError(f"rotation_matrix shape {R.shape} != ({dim}, {dim})")
        elif self.rotation_seed is None or self.rotation_strength == 0.0:
            R = np.eye(dim)
        else:
            rng = np.random.default_rng(np.random.SeedSequence([self.rotation_seed, 0xA0]))
            G = rng.standard_normal((dim, dim))
            A = (G - G.T) * (self.rotation_strength / np.sqrt(dim))
            if s > 0:
                A[:s, :] *= self.signal_leak
                A[:, :s] *= self.signal_leak
            R = np.linalg.solve(np.eye(dim) + A, np.eye(dim) - A)
        if self.translation_scale == 0.0:
            t = np.zeros(dim)
        else:
            seed = 0 if self.rotation_seed is None else self.rotation_seed
            rng = np.random.default_rng(np.random.SeedSequence([seed, 0xA1]))
            t = rng.standard_normal(dim) * self.translation_scale
            if s > 0:
                t[:s] *= self.signal_leak
        return R, t


def plane_rotation(dim: int, i: int, j: int, angle: float) -> np.ndarray:
    """Rotation by `angle` radians in the (i, j) coordinate plane."""
    R = np.eye(dim)
    c, s = np.cos(angle), np.sin(angle)
    R[i, i] = c
    R[j, j] = c
    R[i, j] = -s
    R[j, i] = s
    return R


def synth_domains(
    num_classes: int,
    per_class: int,
    raw_dim: int,
    shift: DomainShiftSpec,
    seed: int,
    class_sep: float = 1.0,
    sigma_within: float = 0.15,
    signal_dim: int = 0,
    sigma_complement: float = 0.0,
):
    """Generate paired source/target pools with a controlled domain gap.

    Source classes are Gaussian clusters; target samples are fresh draws
    from the same class distributions pushed through the shift's rotation
    + translation + additive noise. Both pools carry labels; Episode
    construction withholds the target's (they are kept only for
    restricted test sampling and accuracy scoring).

    With `signal_dim` > 0 the class means live in the first `signal_dim`
    coordinates and the complement carries only within-class noise (std
    `sigma_complement` when set, else `sigma_within`). Suppressing the
    complement is then a class-generic skill that transfers to unseen
    classes, which gives meta-training something real to learn.
    """
    if raw_dim < 2:
        raise ValueError(f"raw_dim must be >= 2, got {raw_dim}")
    if num_classes < 1 or per_class < 1:
        raise ValueError("num_classes and per_class must be positive")
    if signal_dim < 0 or signal_dim > raw_dim:
        raise ValueError(f"signal_dim must lie in [0, {raw_dim}], got {signal_dim}")
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0xD0]))
    means = rng.standard_normal((num_classes, raw_dim)) * class_sep
    if signal_dim > 0:
        means[:, signal_dim:] = 0.0
    sigma = np.full(raw_dim, sigma_within)
    if signal_dim > 0 and sigma_complement > 0.0:
        sigma[signal_dim:] = sigma_complement

    def draw(pool_rng):
        feats = np.empty((num_classes * per_class, raw_dim))
        labels = np.empty(num_classes * per_class, dtype=np.int64)
        for c in range(num_classes):
            block = slice(c * per_class, (c + 1) * per_class)
            feats[block] = means[c] + sigma * pool_rng.standard_normal((per_class, raw_dim))
            labels[block] = c
        return feats, labels

    src_feats, src_labels = draw(np.random.default_rng(np.random.SeedSequence([seed, 0xD1])))
    tgt_base, tgt_labels = draw(np.random.default_rng(np.random.SeedSequence([seed, 0xD2])))

    R, t = shift.materialize(raw_dim, signal_dim)
    tgt_feats = tgt_base @ R.T + t
    if shift.noise_sigma > 0.0:
        noise_rng = np.random.default_rng(np.random.SeedSequence([seed, 0xD3]))
        tgt_feats = tgt_feats + shift.noise_sigma * noise_rng.standard_normal(tgt_feats.shape)

    return (
        FeaturePool(src_feats, src_labels, "source"),
        FeaturePool(tgt_feats, tgt_labels, "target"),
    )
