"""Trainable prompt parameters and the frozen-backbone embedding pass.

Per sample the token block is

    [cls_token, f1(shared_prompts), f2(task_prompts(x)), lift(x)]

flattened and pushed through a frozen two-layer encoder, then the
trainable head. Gradients reach the shared prompt tokens, both prompt
MLPs, and the head; the backbone never changes. Learnable scalars live
as unconstrained reals and are reparameterized into their valid ranges
(softplus for the ridge strengths and the scatter trade-off, a scaled
sigmoid for the pseudo-label threshold).
"""

from __future__ import annotations

import hashlib
import io
import struct
from dataclasses import dataclass, fields

import numpy as np

from . import autodiff as ad
from .config import RunConfig

GAMMA_FLOOR = 1e-8
TAU_LOW = 0.65
TAU_SPAN = 0.15


def _inv_softplus(y: float) -> float:
    """rho such that softplus(rho) == y (exact to float64 for y > ~1e-15)."""
    if y > 30.0:
        return float(y)
    return float(np.log(np.expm1(y)))


@dataclass
class FrozenBackbone:
    """Deterministic frozen stand-in for the pretrained encoder stack.

    Holds the fixed classification token, the task-prompt generator, the
    affine lift of raw features into token chunks, and the two-layer
    encoder. All weights are functions of (seed, layout); no optimizer
    ever touches them.
    """

    seed: int
    raw_dim: int
    token_dim: int
    n_tsp: int
    n_img: int
    hidden: int
    backbone_out: int
    shared_tokens: int  # prompt tokens contributed by the shared block
    cls_token: np.ndarray
    g_w1: np.ndarray
    g_b1: np.ndarray
    g_w2: np.ndarray
    g_b2: np.ndarray
    lift_w: np.ndarray
    lift_b: np.ndarray
    enc_w1: np.ndarray
    enc_b1: np.ndarray
    enc_w2: np.ndarray
    enc_b2: np.ndarray

    @property
    def block_len(self) -> int:
        return (1 + self.shared_tokens + self.n_tsp + self.n_img) * self.token_dim

    def weight_hash(self) -> str:
        h = hashlib.sha256()
        for f in fields(self):
            v = getattr(self, f.name)
            if isinstance(v, np.ndarray):
                h.update(v.tobytes())
            else:
                h.update(str(v).encode())
        return h.hexdigest()


def _uniform(rng, shape, fan_in):
    bound = 1.0 / np.sqrt(max(1, fan_in))
    return rng.uniform(-bound, bound, size=shape)


def build_backbone(config: RunConfig, seed: int | None = None) -> FrozenBackbone:
    seed = config.seed if seed is None else seed
    d = config.token_dim
    n_tsp = config.n_tsp if config.task_prompts_enabled else 0
    shared = config.n_dsp if config.shared_prompts_enabled else 0
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0xB0]))
    block_len = (1 + shared + n_tsp + config.n_img) * d
    return FrozenBackbone(
        seed=seed,
        raw_dim=config.raw_dim,
        token_dim=d,
        n_tsp=n_tsp,
        n_img=config.n_img,
        hidden=config.backbone_hidden,
        backbone_out=config.backbone_out,
        shared_tokens=shared,
        cls_token=_uniform(rng, (1, d), d),
        g_w1=_uniform(rng, (config.raw_dim, d), config.raw_dim),
        g_b1=_uniform(rng, (d,), config.raw_dim),
        g_w2=_uniform(rng, (d, max(1, n_tsp) * d), d),
        g_b2=_uniform(rng, (max(1, n_tsp) * d,), d),
        lift_w=_uniform(rng, (config.raw_dim, config.n_img * d), config.raw_dim),
        lift_b=_uniform(rng, (config.n_img * d,), config.raw_dim),
        enc_w1=_uniform(rng, (block_len, config.backbone_hidden), block_len),
        enc_b1=_uniform(rng, (config.backbone_hidden,), block_len),
        enc_w2=_uniform(rng, (config.backbone_hidden, config.backbone_out), config.backbone_hidden),
        enc_b2=_uniform(rng, (config.backbone_out,), config.backbone_hidden),
    )


@dataclass
class PromptParams:
    """Everything the meta optimizer updates.

    Prompt-side fields are None when the corresponding block is disabled
    by config; `named_parameters` skips them so neither Adam nor the
    gradient checks ever see phantom parameters.
    """

    p_c: ad.Tensor | None        # shared prompt tokens [n_dsp x token_dim]
    m_w1: ad.Tensor | None       # shared-prompt MLP
    m_b1: ad.Tensor | None
    m_w2: ad.Tensor | None
    m_b2: ad.Tensor | None
    p_w1: ad.Tensor | None       # task-prompt MLP
    p_b1: ad.Tensor | None
    p_w2: ad.Tensor | None
    p_b2: ad.Tensor | None
    head_w: ad.Tensor            # [backbone_out x head_out]
    head_b: ad.Tensor            # [head_out]
    cls_token: ad.Tensor | None  # trainable only with train_cls_token
    rho_gamma_clf: ad.Tensor     # softplus -> ridge strength, classifier
    rho_gamma_adapter: ad.Tensor  # softplus -> ridge strength, adapter
    rho_lambda_s: ad.Tensor      # softplus -> scatter trade-off
    rho_tau: ad.Tensor           # scaled sigmoid -> threshold in (0.65, 0.80)

    def named_parameters(self) -> dict[str, ad.Tensor]:
        out = {}
        for f in fields(self):
            v = getattr(self, f.name)
            if v is not None:
                out[f.name] = v
        return out

    # reparameterized views (fresh graph nodes each call) ------------
    def gamma_clf(self) -> ad.Tensor:
        return ad.clamp_min(ad.softplus(self.rho_gamma_clf), GAMMA_FLOOR)

    def gamma_adapter(self) -> ad.Tensor:
        return ad.clamp_min(ad.softplus(self.rho_gamma_adapter), GAMMA_FLOOR)

    def lambda_s(self) -> ad.Tensor:
        return ad.softplus(self.rho_lambda_s)

    def tau(self) -> ad.Tensor:
        # two-sided clamp keeps tau strictly inside (0.65, 0.80) even when
        # the sigmoid saturates to exactly 0 or 1 in float arithmetic
        s = ad.clamp_min(ad.sigmoid(self.rho_tau), 1e-9)
        s = ad.sub(1.0, ad.clamp_min(ad.sub(1.0, s), 1e-9))
        return ad.add(TAU_LOW, ad.mul(TAU_SPAN, s))

    def state_hash(self) -> str:
        h = hashlib.sha256()
        for name, t in sorted(self.named_parameters().items()):
            h.update(name.encode())
            h.update(t.data.tobytes())
        return h.hexdigest()


def init_params(config: RunConfig, seed: int | None = None) -> PromptParams:
    """Fan-in scaled uniform init for tensors; scalars seeded to their
    configured starting values through the inverse reparameterizations."""
    seed = config.seed if seed is None else seed
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0xC0]))
    d = config.token_dim

    def p(shape, fan_in):
        return ad.parameter(_uniform(rng, shape, fan_in))

    shared = config.shared_prompts_enabled
    task = config.task_prompts_enabled
    backbone = build_backbone(config, seed)
    return PromptParams(
        p_c=p((config.n_dsp, d), d) if shared else None,
        m_w1=p((d, d), d) if shared else None,
        m_b1=p((d,), d) if shared else None,
        m_w2=p((d, d), d) if shared else None,
        m_b2=p((d,), d) if shared else None,
        p_w1=p((d, d), d) if task else None,
        p_b1=p((d,), d) if task else None,
        p_w2=p((d, d), d) if task else None,
        p_b2=p((d,), d) if task else None,
        head_w=ad.parameter(
            config.head_init_gain
            * _uniform(rng, (config.backbone_out, config.head_out), config.backbone_out)
        ),
        head_b=p((config.head_out,), config.backbone_out),
        cls_token=ad.parameter(backbone.cls_token.copy()) if config.train_cls_token else None,
        rho_gamma_clf=ad.parameter(_inv_softplus(config.gamma_clf_init)),
        rho_gamma_adapter=ad.parameter(_inv_softplus(config.gamma_adapter_init)),
        rho_lambda_s=ad.parameter(_inv_softplus(config.lambda_s_init)),
        rho_tau=ad.parameter(0.0),
    )


def generate_task_prompts(x_raw: np.ndarray, backbone: FrozenBackbone) -> np.ndarray:
    """Input-dependent prompts from the frozen generator, [b x n_tsp x token_dim].

    Depends only on the input and the backbone seed, never on the
    trainable parameters.
    """
    x = np.asarray(x_raw, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != backbone.raw_dim:
        raise ValueError(f"expected [b x {backbone.raw_dim}] input, got {x.shape}")
    if backbone.n_tsp == 0:
        return np.zeros((x.shape[0], 0, backbone.token_dim))
    h = np.tanh(x @ backbone.g_w1 + backbone.g_b1)
    flat = h @ backbone.g_w2 + backbone.g_b2
    return flat.reshape(x.shape[0], backbone.n_tsp, backbone.token_dim)


def _two_layer(x: ad.Tensor, w1, b1, w2, b2) -> ad.Tensor:
    return ad.add(ad.matmul(ad.tanh(ad.add(ad.matmul(x, w1), b1)), w2), b2)


def embed(x_raw, params: PromptParams, backbone: FrozenBackbone) -> ad.Tensor:
    """Embed a raw-feature batch into the head output space, [b x head_out].

    Differentiable with respect to every trainable parameter; the
    backbone enters only as constants.
    """
    x = np.asarray(x_raw, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != backbone.raw_dim:
        raise ValueError(f"expected [b x {backbone.raw_dim}] input, got {x.shape}")
    b = x.shape[0]
    d = backbone.token_dim

    blocks = []
    if params.cls_token is not None:
        blocks.append(ad.repeat_rows(params.cls_token, b))
    else:
        blocks.append(ad.constant(np.broadcast_to(backbone.cls_token, (b, d)).copy()))

    if backbone.shared_tokens > 0:
        if params.p_c is None:
            raise ValueError("backbone expects shared prompts but params carry none")
        mapped = _two_layer(params.p_c, params.m_w1, params.m_b1, params.m_w2, params.m_b2)
        flat = ad.reshape(mapped, (1, backbone.shared_tokens * d))
        blocks.append(ad.repeat_rows(flat, b))

    if backbone.n_tsp > 0:
        if params.p_w1 is None:
            raise ValueError("backbone expects task prompts but params carry none")
        pk = generate_task_prompts(x, backbone).reshape(b * backbone.n_tsp, d)
        mapped = _two_layer(ad.constant(pk), params.p_w1, params.p_b1, params.p_w2, params.p_b2)
        blocks.append(ad.reshape(mapped, (b, backbone.n_tsp * d)))

    blocks.append(ad.constant(x @ backbone.lift_w + backbone.lift_b))

    tokens = ad.concat(blocks, axis=1)
    h = ad.tanh(ad.add(ad.matmul(tokens, ad.constant(backbone.enc_w1)), ad.constant(backbone.enc_b1)))
    enc = ad.add(ad.matmul(h, ad.constant(backbone.enc_w2)), ad.constant(backbone.enc_b2))
    return ad.add(ad.matmul(enc, params.head_w), params.head_b)


# checkpoint format ----------------------------------------------------

CKPT_MAGIC = b"E2CK"
CKPT_VERSION = 1


class CheckpointError(Exception):
    pass


def save_checkpoint(path, params: PromptParams, backbone_seed: int, config_digest: str) -> None:
    buf = io.BytesIO()
    buf.write(CKPT_MAGIC)
    buf.write(struct.pack("<I", CKPT_VERSION))
    digest = config_digest.encode("ascii")
    buf.write(struct.pack("<H", len(digest)))
    buf.write(digest)
    buf.write(struct.pack("<q", backbone_seed))
    named = params.named_parameters()
    buf.write(struct.pack("<I", len(named)))
    for name in sorted(named):
        # asarray keeps 0-d shapes intact (ascontiguousarray would lift to 1-d)
        data = np.asarray(named[name].data, dtype=np.float64)
        nb = name.encode("ascii")
        buf.write(struct.pack("<H", len(nb)))
        buf.write(nb)
        buf.write(struct.pack("<B", data.ndim))
        for dim in data.shape:
            buf.write(struct.pack("<Q", dim))
        buf.write(data.tobytes())
    with open(path, "wb") as fh:
        fh.write(buf.getvalue())


def load_checkpoint(path):
    """Return (tensors: dict[str, ndarray], backbone_seed, config_digest)."""
    with open(path, "rb") as fh:
        blob = fh.read()
    off = 0

    def take(fmt):
        nonlocal off
        size = struct.calcsize(fmt)
        if off + size > len(blob):
            raise CheckpointError("truncated checkpoint")
        vals = struct.unpack_from(fmt, blob, off)
        off += size
        return vals

    magic = blob[:4]
    off = 4
    if magic != CKPT_MAGIC:
        raise CheckpointError(f"bad checkpoint magic {magic!r}")
    (version,) = take("<I")
    if version != CKPT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    (dlen,) = take("<H")
    digest = blob[off:off + dlen].decode("ascii")
    off += dlen
    (backbone_seed,) = take("<q")
    (count,) = take("<I")
    tensors = {}
    for _ in range(count):
        (nlen,) = take("<H")
        name = blob[off:off + nlen].decode("ascii")
        off += nlen
        (ndim,) = take("<B")
        shape = tuple(take("<Q")[0] for _ in range(ndim))
        size = int(np.prod(shape)) if shape else 1
        nbytes = size * 8
        if off + nbytes > len(blob):
            raise CheckpointError(f"truncated tensor payload for {name!r}")
        tensors[name] = np.frombuffer(blob, dtype="<f8", count=size, offset=off).reshape(shape).copy()
        off += nbytes
    return tensors, backbone_seed, digest


def params_from_checkpoint(path, config: RunConfig):
    """Rebuild (params, backbone) from a checkpoint, validating shapes
    against the supplied config."""
    tensors, backbone_seed, digest = load_checkpoint(path)
    backbone = build_backbone(config, backbone_seed)
    template = init_params(config, backbone_seed)
    expected = template.named_parameters()
    if set(expected) != set(tensors):
        missing = sorted(set(expected) ^ set(tensors))
        raise CheckpointError(f"checkpoint parameter set mismatch: {missing}")
    kwargs = {}
    for f in fields(PromptParams):
        if f.name in tensors:
            if tensors[f.name].shape != expected[f.name].data.shape:
                raise CheckpointError(
                    f"shape mismatch for {f.name}: checkpoint "
                    f"{tensors[f.name].shape} vs config {expected[f.name].data.shape}"
                )
            kwargs[f.name] = ad.parameter(tensors[f.name])
        else:
            kwargs[f.name] = None
    return PromptParams(**kwargs), backbone, digest
