"""Dual-branch Thin ResNet34 speaker embedder with channel co-attention.

Each feature domain (FBank magnitude, MODGD phase) gets its own branch: a
7x7 stride (2,1) stem (the phase branch adds a 7x1 stride (3,1) stem to
shrink its taller input), four stages of basic residual blocks, channel
co-attention between the stage-4 feature maps, self-attentive pooling per
branch, and a projection head that concatenates and mixes the two pooled
embeddings.  Classification runs through either plain softmax cross
entropy or an additive-angular-margin softmax on scaled cosines.

Everything is built on the float64 autodiff engine in
:mod:`mpspeaker.tensor`; batches ride a leading N axis.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from mpspeaker import tensor as T
from mpspeaker.tensor import BatchNormState, Tensor

FBANK_BINS = 192
MODGD_BINS = 201


class Module:
    """Lightweight parameter container with recursive discovery."""

    def named_parameters(self, prefix=""):
        out = []
        for attr, value in vars(self).items():
            name = f"{prefix}{attr}"
            if isinstance(value, Tensor) and value.requires_grad:
                out.append((name, value))
            elif isinstance(value, Module):
                out.extend(value.named_parameters(f"{name}."))
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        out.extend(item.named_parameters(f"{name}.{i}."))
        return out

    def named_buffers(self, prefix=""):
        out = []
        for attr, value in vars(self).items():
            name = f"{prefix}{attr}"
            if isinstance(value, BatchNormState):
                out.append((f"{name}.running_mean", value.running_mean))
                out.append((f"{name}.running_var", value.running_var))
            elif isinstance(value, Module):
                out.extend(value.named_buffers(f"{name}."))
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        out.extend(item.named_buffers(f"{name}.{i}."))
        return out

    def state_arrays(self):
        """Parameters plus running statistics, for checkpointing."""
        out = {name: p.data for name, p in self.named_parameters()}
        for name, buf in self.named_buffers():
            out[name] = buf
        return out

    def load_state(self, arrays):
        for name, p in self.named_parameters():
            if name not in arrays:
                raise KeyError(f"checkpoint is missing parameter {name!r}")
            if arrays[name].shape != p.data.shape:
                raise ValueError(
                    f"shape mismatch for {name!r}: checkpoint {arrays[name].shape}, model {p.data.shape}"
                )
            p.data = arrays[name].astype(np.float64).copy()
        for name, buf in self.named_buffers():
            if name in arrays:
                buf[...] = arrays[name]


def count_parameters(*modules):
    return sum(p.data.size for m in modules for _, p in m.named_parameters())


def zero_grad(module: Module):
    for _, p in module.named_parameters():
        p.zero_grad()


def _kaiming_uniform(rng, shape, fan_in):
    bound = np.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape)


class Conv2d(Module):
    def __init__(self, c_in, c_out, kernel, stride=(1, 1), pad=(0, 0), rng=None):
        kh, kw = kernel
        self.stride = stride
        self.pad = pad
        self.weight = Tensor(
            _kaiming_uniform(rng, (c_out, c_in, kh, kw), c_in * kh * kw), requires_grad=True
        )

    def __call__(self, x):
        return T.conv2d(x, self.weight, stride=self.stride, pad=self.pad)


class BatchNorm2d(Module):
    def __init__(self, channels, eps=1e-5, momentum=0.1):
        self.eps = eps
        self.momentum = momentum
        self.gamma = Tensor(np.ones(channels), requires_grad=True)
        self.beta = Tensor(np.zeros(channels), requires_grad=True)
        self.state = BatchNormState.for_channels(channels)

    def __call__(self, x, training):
        return T.batchnorm2d(
            x, self.gamma, self.beta, self.state, training, eps=self.eps, momentum=self.momentum
        )


class Linear(Module):
    def __init__(self, n_in, n_out, bias=True, rng=None):
        self.weight = Tensor(_kaiming_uniform(rng, (n_in, n_out), n_in), requires_grad=True)
        self.bias = Tensor(np.zeros(n_out), requires_grad=True) if bias else None

    def __call__(self, x):
        out = T.matmul(x, self.weight)
        if self.bias is not None:
            out = T.add(out, self.bias)
        return out


class BasicBlock(Module):
    """Two 3x3 convs with BN+ReLU and an identity or projection shortcut."""

    def __init__(self, c_in, c_out, stride, rng):
        self.conv1 = Conv2d(c_in, c_out, (3, 3), stride=stride, pad=(1, 1), rng=rng)
        self.bn1 = BatchNorm2d(c_out)
        self.conv2 = Conv2d(c_out, c_out, (3, 3), stride=(1, 1), pad=(1, 1), rng=rng)
        self.bn2 = BatchNorm2d(c_out)
        if stride != (1, 1) or c_in != c_out:
            self.proj_conv = Conv2d(c_in, c_out, (1, 1), stride=stride, rng=rng)
            self.proj_bn = BatchNorm2d(c_out)
        else:
            self.proj_conv = None
            self.proj_bn = None

    def __call__(self, x, training):
        h = T.relu(self.bn1(self.conv1(x), training))
        h = self.bn2(self.conv2(h), training)
        shortcut = x if self.proj_conv is None else self.proj_bn(self.proj_conv(x), training)
        return T.relu(T.add(h, shortcut))


@dataclass
class BranchConfig:
    """Thin ResNet34 branch layout: stem channels plus four stages.

    ``channels[0]`` is the stem width; ``channels[1:]`` pair with ``blocks``
    and ``stage_strides``.  The phase branch adds a 7x1 stride-(3,1) stem at
    the stem width.
    """

    channels: tuple = (16, 16, 32, 64, 128)
    blocks: tuple = (3, 4, 6, 3)
    stage_strides: tuple = ((1, 1), (2, 2), (2, 2), (1, 1))

    def __post_init__(self):
        if len(self.channels) != len(self.blocks) + 1 or len(self.blocks) != len(self.stage_strides):
            raise ValueError(
                f"inconsistent config: {len(self.channels)} channels, "
                f"{len(self.blocks)} block counts, {len(self.stage_strides)} strides"
            )
        if any(c <= 0 for c in self.channels) or any(b <= 0 for b in self.blocks):
            raise ValueError("channels and block counts must be positive")

    @property
    def embed_dim(self):
        return self.channels[-1]

    @classmethod
    def full(cls):
        return cls()

    @classmethod
    def tiny(cls):
        return cls(channels=(4, 4, 8, 16, 32), blocks=(1, 1, 1, 1))


class BranchModel(Module):
    """Stem conv(s) plus residual stages for one feature domain."""

    def __init__(self, cfg: BranchConfig, kind, rng):
        if kind not in ("fbank", "modgd"):
            raise ValueError(f"unknown branch kind {kind!r}")
        self.kind = kind
        self.input_bins = FBANK_BINS if kind == "fbank" else MODGD_BINS
        stem = cfg.channels[0]
        self.stem_conv = Conv2d(1, stem, (7, 7), stride=(2, 1), pad=(3, 3), rng=rng)
        self.stem_bn = BatchNorm2d(stem)
        if kind == "modgd":
            self.extra_stem_conv = Conv2d(stem, stem, (7, 1), stride=(3, 1), pad=(3, 0), rng=rng)
            self.extra_stem_bn = BatchNorm2d(stem)
        else:
            self.extra_stem_conv = None
            self.extra_stem_bn = None
        self.stages = []
        c_in = stem
        for c_out, n_blocks, stride in zip(cfg.channels[1:], cfg.blocks, cfg.stage_strides):
            stage = []
            for b in range(n_blocks):
                stage.append(BasicBlock(c_in, c_out, stride if b == 0 else (1, 1), rng))
                c_in = c_out
            self.stages.append(stage)
        self.embed_dim = cfg.embed_dim

    def named_parameters(self, prefix=""):
        out = super().named_parameters(prefix)
        for si, stage in enumerate(self.stages):
            for bi, block in enumerate(stage):
                out.extend(block.named_parameters(f"{prefix}stages.{si}.{bi}."))
        return out

    def named_buffers(self, prefix=""):
        out = super().named_buffers(prefix)
        for si, stage in enumerate(self.stages):
            for bi, block in enumerate(stage):
                out.extend(block.named_buffers(f"{prefix}stages.{si}.{bi}."))
        return out

    def __call__(self, x, training, trace=None):
        """Run (N, 1, F, T) or (1, F, T) features; returns the stage-4 map."""
        bins = x.shape[-2]
        if bins != self.input_bins:
            raise ValueError(
                f"{self.kind} branch expects {self.input_bins} frequency bins, got {bins}"
            )
        h = T.relu(self.stem_bn(self.stem_conv(x), training))
        if trace is not None:
            trace.append(h.shape[-2:])
        if self.extra_stem_conv is not None:
            h = T.relu(self.extra_stem_bn(self.extra_stem_conv(h), training))
            if trace is not None:
                trace.append(h.shape[-2:])
        for stage in self.stages:
            for block in stage:
                h = block(h, training)
            if trace is not None:
                trace.append(h.shape[-2:])
        return h


def build_branch(cfg: BranchConfig, kind, rng=None) -> BranchModel:
    return BranchModel(cfg, kind, rng if rng is not None else np.random.default_rng(0))


def adaptive_pool_matrix(h_in, h_out):
    """Row-stochastic averaging matrix mapping h_in rows onto h_out rows."""
    mat = np.zeros((h_out, h_in))
    for i in range(h_out):
        start = (i * h_in) // h_out
        end = -((-(i + 1) * h_in) // h_out)
        mat[i, start:end] = 1.0 / (end - start)
    return mat


class CoAttention(Module):
    """Channel co-attention between the two stage-4 feature maps.

    A query transform of the phase map and a key transform of the
    (frequency-aligned) magnitude map build a channel-by-channel
    correlation matrix; its row- and column-softmaxed forms re-weight the
    value transforms of each map.  Outputs keep each input's own spatial
    grid and, by default, are added back onto the inputs so an untrained
    block starts near the traditional-fusion behavior.

    The frequency alignment average-pools the magnitude map's height down
    to the phase map's height before the key transform; value transforms
    stay on their native grids.
    """

    def __init__(self, channels, rng):
        self.channels = channels
        self.query_conv = Conv2d(channels, channels, (1, 1), rng=rng)
        self.key_conv = Conv2d(channels, channels, (1, 1), rng=rng)
        self.value_conv_f = Conv2d(channels, channels, (1, 1), rng=rng)
        self.value_conv_g = Conv2d(channels, channels, (1, 1), rng=rng)
        self.last_row_sum_dev = None

    def __call__(self, f_g, f_f, residual=True):
        unbatched = f_g.ndim == 3
        if unbatched:
            f_g = T.reshape(f_g, (1,) + f_g.shape)
            f_f = T.reshape(f_f, (1,) + f_f.shape)
        n, c, h_g, w = f_g.shape
        n2, c2, h_f, w2 = f_f.shape
        if n != n2 or c != c2 or w != w2 or c != self.channels:
            raise ValueError(
                f"co-attention needs matching batch/channels/width, got {f_g.shape} vs {f_f.shape}"
            )

        aligned = f_f
        if h_f != h_g:
            aligned = T.matmul(Tensor(adaptive_pool_matrix(h_f, h_g)), f_f)

        query = T.reshape(self.query_conv(f_g), (n, c, h_g * w))
        key = T.reshape(self.key_conv(aligned), (n, c, h_g * w))
        corr = T.matmul(query, T.transpose_last2(key))

        s_col = T.softmax_axis(T.transpose_last2(corr), axis=-1)
        s_row = T.softmax_axis(corr, axis=-1)
        self.last_row_sum_dev = max(
            float(np.abs(s_col.data.sum(axis=-1) - 1.0).max()),
            float(np.abs(s_row.data.sum(axis=-1) - 1.0).max()),
        )

        value_f = T.reshape(self.value_conv_f(f_f), (n, c, h_f * w))
        value_g = T.reshape(self.value_conv_g(f_g), (n, c, h_g * w))
        out_f = T.reshape(T.matmul(s_col, value_f), (n, c, h_f, w))
        out_g = T.reshape(T.matmul(s_row, value_g), (n, c, h_g, w))
        if residual:
            out_f = T.add(f_f, out_f)
            out_g = T.add(f_g, out_g)
        if unbatched:
            out_f = T.reshape(out_f, (c, h_f, w))
            out_g = T.reshape(out_g, (c, h_g, w))
        return out_g, out_f


def co_attention(block: CoAttention, f_g, f_f, residual=True):
    return block(f_g, f_f, residual=residual)


class SelfAttentivePool(Module):
    """Collapse a feature map to one vector: mean over frequency, learned
    attention over time.

    Frames h_t are the per-time-step channel vectors after averaging the
    height axis; attention weights are softmax_t(v' tanh(W h_t + b)).
    """

    def __init__(self, channels, rng):
        self.weight = Tensor(_kaiming_uniform(rng, (channels, channels), channels), requires_grad=True)
        self.bias = Tensor(np.zeros(channels), requires_grad=True)
        self.context = Tensor(_kaiming_uniform(rng, (channels, 1), channels), requires_grad=True)

    def __call__(self, fmap):
        unbatched = fmap.ndim == 3
        if unbatched:
            fmap = T.reshape(fmap, (1,) + fmap.shape)
        n, c, _h, w = fmap.shape
        frames = T.transpose_last2(T.mean_axis(fmap, axis=2))  # (N, W, C)
        keys = T.tanh(T.add(T.matmul(frames, self.weight), self.bias))
        scores = T.reshape(T.matmul(keys, self.context), (n, 1, w))
        alpha = T.softmax_axis(scores, axis=-1)
        pooled = T.reshape(T.matmul(alpha, frames), (n, c))
        if unbatched:
            pooled = T.reshape(pooled, (c,))
        return pooled


def self_attentive_pool(fmap, layer: SelfAttentivePool):
    return layer(fmap)


class FusionHead(Module):
    """Project both pooled embeddings, concatenate, and mix back to D."""

    def __init__(self, dim, rng):
        self.dim = dim
        self.fbank_proj = Linear(dim, dim, bias=False, rng=rng)
        self.modgd_proj = Linear(dim, dim, bias=False, rng=rng)
        self.combine = Linear(2 * dim, dim, bias=False, rng=rng)

    def __call__(self, e_f, e_g):
        if e_f.shape[-1] != self.dim or e_g.shape[-1] != self.dim:
            raise ValueError(
                f"fusion head wants {self.dim}-dim embeddings, got {e_f.shape} and {e_g.shape}"
            )
        z = T.concat(self.fbank_proj(e_f), self.modgd_proj(e_g), axis=-1)
        return self.combine(z)


def fuse_embeddings(e_f, e_g, head: FusionHead):
    """Fuse two length-D vectors (or (N, D) batches) into one embedding."""
    single = e_f.ndim == 1
    if single:
        e_f = T.reshape(e_f, (1, -1))
        e_g = T.reshape(e_g, (1, -1))
    out = head(e_f, e_g)
    return T.reshape(out, (-1,)) if single else out


class ClassifierHead(Module):
    """Final classification layer, plain or additive-angular-margin."""

    def __init__(self, dim, n_classes, mode="softmax", margin=0.2, scale_factor=30.0, rng=None):
        if mode not in ("softmax", "aam"):
            raise ValueError(f"unknown classifier mode {mode!r}")
        if mode == "aam" and not (scale_factor > 0 and 0.0 <= margin < np.pi / 2):
            raise ValueError(f"need scale > 0 and 0 <= margin < pi/2, got {scale_factor}, {margin}")
        self.mode = mode
        self.margin = margin
        self.scale_factor = scale_factor
        self.n_classes = n_classes
        self.weight = Tensor(_kaiming_uniform(rng, (dim, n_classes), dim), requires_grad=True)
        self.bias = Tensor(np.zeros(n_classes), requires_grad=True) if mode == "softmax" else None


def cross_entropy_loss(emb, labels, head: ClassifierHead):
    """Mean cross entropy of softmax(W'x + b) at the true class."""
    emb = emb if isinstance(emb, Tensor) else Tensor(emb)
    logits = T.matmul(emb, head.weight)
    if head.bias is not None:
        logits = T.add(logits, head.bias)
    return T.cross_entropy_logits(logits, labels)


def aam_softmax_loss(emb, labels, head: ClassifierHead):
    """Additive-angular-margin softmax on scaled cosines.

    Embeddings and class weights are length-normalized; the true-class
    logit is s*cos(theta + m), the rest stay s*cos(theta).
    """
    if head.mode != "aam":
        raise ValueError("classifier head is not in aam mode")
    emb = emb if isinstance(emb, Tensor) else Tensor(emb)
    labels = np.asarray(labels)
    if labels.min() < 0 or labels.max() >= head.n_classes:
        raise ValueError(f"label out of range for {head.n_classes} classes")
    x = T.l2_normalize(emb, axis=-1)
    w = T.l2_normalize(head.weight, axis=0)
    cosine = T.matmul(x, w)
    theta = T.arccos_clamped(cosine)
    with_margin = T.cos(T.add(theta, head.margin))
    onehot = np.zeros(cosine.shape)
    onehot[np.arange(len(labels)), labels] = 1.0
    blended = T.add(T.mul(with_margin, onehot), T.mul(cosine, 1.0 - onehot))
    return T.cross_entropy_logits(T.scale(blended, head.scale_factor), labels)


def classification_logits(emb, head: ClassifierHead):
    """Inference-time class scores (no margin in aam mode)."""
    emb = emb if isinstance(emb, Tensor) else Tensor(emb)
    if head.mode == "softmax":
        logits = T.matmul(emb, head.weight)
        return T.add(logits, head.bias)
    x = T.l2_normalize(emb, axis=-1)
    w = T.l2_normalize(head.weight, axis=0)
    return T.scale(T.matmul(x, w), head.scale_factor)


class SpeakerEmbedder(Module):
    """Both branches plus co-attention, pooling, fusion, and classifier."""

    def __init__(
        self,
        cfg: BranchConfig,
        n_classes,
        loss="softmax",
        margin=0.2,
        scale_factor=30.0,
        use_coattention=True,
        seed=0,
    ):
        rng = np.random.default_rng(seed)
        self.fbank_branch = BranchModel(cfg, "fbank", rng)
        self.modgd_branch = BranchModel(cfg, "modgd", rng)
        dim = cfg.embed_dim
        self.coattention = CoAttention(dim, rng) if use_coattention else None
        self.fbank_pool = SelfAttentivePool(dim, rng)
        self.modgd_pool = SelfAttentivePool(dim, rng)
        self.fusion = FusionHead(dim, rng)
        self.classifier = ClassifierHead(
            dim, n_classes, mode=loss, margin=margin, scale_factor=scale_factor, rng=rng
        )
        self.embed_dim = dim

    def forward_embedding(self, fbank, modgd, training=False, mode="fused"):
        """Embeddings for (N, 1, F, T) feature tensors.

        ``mode`` selects the fused path or a single-branch ablation that
        bypasses co-attention and fusion entirely.
        """
        if mode == "fbank":
            return self.fbank_pool(self.fbank_branch(fbank, training))
        if mode == "modgd":
            return self.modgd_pool(self.modgd_branch(modgd, training))
        if mode != "fused":
            raise ValueError(f"unknown embedding mode {mode!r}")
        map_f = self.fbank_branch(fbank, training)
        map_g = self.modgd_branch(modgd, training)
        if self.coattention is not None:
            map_g, map_f = self.coattention(map_g, map_f)
        e_f = self.fbank_pool(map_f)
        e_g = self.modgd_pool(map_g)
        return self.fusion(e_f, e_g)

    def loss(self, fbank, modgd, labels, training=True, mode="fused"):
        emb = self.forward_embedding(fbank, modgd, training=training, mode=mode)
        if self.classifier.mode == "aam":
            return aam_softmax_loss(emb, labels, self.classifier)
        return cross_entropy_loss(emb, labels, self.classifier)


class SGD:
    """Gradient descent with optional classical momentum."""

    def __init__(self, lr=1e-4, momentum=0.0):
        self.lr = lr
        self.momentum = momentum
        self._velocity = {}

    def step(self, named_params):
        for name, p in named_params:
            if p.grad is None:
                continue
            g = p.grad
            if self.momentum > 0.0:
                v = self._velocity.get(name)
                v = g if v is None else self.momentum * v + g
                self._velocity[name] = v
                g = v
            p.data = p.data - self.lr * g


class Adam:
    """Adaptive-moment gradient descent (optional extra beyond plain SGD)."""

    def __init__(self, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8):
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self._m = {}
        self._v = {}
        self._t = 0

    def step(self, named_params):
        self._t += 1
        b1, b2 = self.beta1, self.beta2
        for name, p in named_params:
            if p.grad is None:
                continue
            g = p.grad
            m = self._m.get(name, 0.0) * b1 + (1 - b1) * g
            v = self._v.get(name, 0.0) * b2 + (1 - b2) * g * g
            self._m[name] = m
            self._v[name] = v
            m_hat = m / (1 - b1**self._t)
            v_hat = v / (1 - b2**self._t)
            p.data = p.data - self.lr * m_hat / (np.sqrt(v_hat) + self.eps)


def make_optimizer(kind, lr, momentum=0.0):
    if kind == "sgd":
        return SGD(lr=lr, momentum=momentum)
    if kind == "adam":
        return Adam(lr=lr)
    raise ValueError(f"unknown optimizer {kind!r}")


def train_step(model: SpeakerEmbedder, batch, optimizer):
    """One update on a (fbank, modgd, labels) batch; returns pre-update loss."""
    fbank, modgd, labels = batch
    zero_grad(model)
    loss = model.loss(Tensor(fbank), Tensor(modgd), np.asarray(labels), training=True)
    T.backward(loss)
    optimizer.step(model.named_parameters())
    return loss.item()


def extract_embedding(model: SpeakerEmbedder, fbank_features, modgd_features, mode="fused"):
    """Eval-mode embedding for one utterance's full feature matrices.

    Accepts FeatureMatrix objects or (T, F) arrays; returns a numpy [D]
    vector.
    """
    def to_input(fm):
        values = getattr(fm, "values", fm)
        return Tensor(np.ascontiguousarray(values.T)[None, None, :, :])

    with T.no_grad():
        emb = model.forward_embedding(
            to_input(fbank_features) if fbank_features is not None else None,
            to_input(modgd_features) if modgd_features is not None else None,
            training=False,
            mode=mode,
        )
    return emb.data.reshape(-1).copy()
