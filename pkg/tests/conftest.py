import numpy as np
import pytest

from fsuda.config import RunConfig


def tiny_config(**overrides) -> RunConfig:
    """Smallest dimensions at which finite-difference checks stay fast.

    sinkhorn_tol = 0 pins the normalization to a fixed unrolled depth so
    perturbed forward passes share the exact same graph structure.
    """
    base = dict(
        raw_dim=8,
        token_dim=8,
        n_dsp=2,
        n_tsp=1,
        n_img=2,
        backbone_hidden=12,
        backbone_out=10,
        head_out=8,
        way_count=3,
        shot_count=2,
        query_count=2,
        sinkhorn_iters=25,
        sinkhorn_tol=0.0,
        synth_classes=8,
        split_train_classes=5,
        split_val_classes=0,
        split_test_classes=3,
        synth_per_class=8,
        synth_signal_dim=4,
        synth_sigma_complement=0.4,
        episodes_per_epoch=5,
        num_test_tasks=4,
    )
    base.update(overrides)
    return RunConfig(**base).validate()


def fd_wrt_params(loss_fn, params, step=1e-5):
    """Central finite differences of loss_fn() with respect to every entry
    of every named parameter, by in-place perturbation."""
    grads = {}
    for name, tensor in params.named_parameters().items():
        flat = tensor.data.ravel()
        g = np.zeros_like(flat)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + step
            hi = loss_fn()
            flat[i] = orig - step
            lo = loss_fn()
            flat[i] = orig
            g[i] = (hi - lo) / (2.0 * step)
        grads[name] = g.reshape(tensor.data.shape)
    return grads


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
