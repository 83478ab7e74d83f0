"""The parted-latent network.

The encoder maps an image batch to a feature vector h, one categorical
posterior per discrete variable, an attention-gated Gaussian posterior for
each class-related block u_k, and a Gaussian posterior for the
class-independent block z. A relaxed class sample gates h through a sigmoid
attention map before the u head reads it, so u_k sees only features deemed
relevant to the sampled class. The decoder consumes Concat(z, u) alone: the
class code influences the reconstruction only through u. A bank of learnable
Gaussian modes (one per class value per discrete variable) plays the role of
the conditional prior on each u_k.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .distributions import (
    CategoricalParams,
    DiagonalGaussian,
    GumbelConfig,
    gumbel_softmax_sample,
)
from .tensor import Tensor, concat, conv2d, conv2d_transpose, dense, relu, sigmoid

__all__ = ["ModelShape", "EncodeResult", "PartedModel"]


@dataclass(frozen=True)
class ModelShape:
    """Latent-space and image geometry of a model instance."""

    K: int
    L: tuple
    d_u: int
    d_z: int
    image_shape: tuple  # (channels, H, W)
    h_dim: int = 256

    def __post_init__(self):
        if self.K < 1:
            raise ValueError("need at least one discrete variable")
        if len(self.L) != self.K:
            raise ValueError("L must list one cardinality per discrete variable")
        if any(l < 2 for l in self.L):
            raise ValueError("every discrete variable needs at least 2 classes")
        if self.d_u < 1 or self.d_z < 0:
            raise ValueError("latent dims out of range")

    @property
    def latent_dim(self) -> int:
        return self.d_z + self.K * self.d_u


@dataclass
class EncodeResult:
    """Everything the posterior produces for one batch."""

    c_posteriors: list  # CategoricalParams per k, logits [B, L_k]
    c_samples: list  # relaxed (or forced one-hot) samples, [B, L_k]
    attention: list  # sigmoid maps in [0,1], [B, h_dim]
    u_posteriors: list  # DiagonalGaussian per k over d_u dims
    z_posterior: DiagonalGaussian
    h: Tensor


def _uniform_fanin(rng: np.random.Generator, shape: tuple, fan_in: int, dtype) -> np.ndarray:
    bound = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape).astype(dtype)


class PartedModel:
    """Encoder phi, decoder theta, and prior bank psi.

    ``arch`` selects a stride-2 conv stack (acceptance runs) or a dense stack
    (sub-second models for gradient checks). Parameters live in an ordered
    name -> Tensor dict; the name prefix (encoder/decoder/prior) defines the
    phi/theta/psi split used by the alternating trainer.
    """

    def __init__(
        self,
        shape: ModelShape,
        rng: np.random.Generator,
        arch: str = "conv",
        conv_channels: tuple = (32, 32, 64),
        mlp_hidden: tuple = (256, 256),
        dtype=np.float32,
        attention_init: str = "zeros",
    ):
        if shape.d_z < 1:
            raise ValueError("this network requires d_z >= 1")
        if arch not in ("conv", "mlp"):
            raise ValueError(f"unknown architecture {arch!r}")
        if attention_init not in ("zeros", "random"):
            raise ValueError(f"unknown attention init {attention_init!r}")
        self.shape = shape
        self.arch = arch
        self.conv_channels = tuple(conv_channels)
        self.mlp_hidden = tuple(mlp_hidden)
        self.dtype = np.dtype(dtype).type
        self.params: dict[str, Tensor] = {}

        c_img, h_img, w_img = shape.image_shape
        if arch == "conv":
            if h_img % (2 ** len(conv_channels)) or w_img % (2 ** len(conv_channels)):
                raise ValueError("image size must be divisible by 2 per conv layer")
            ch = c_img
            side = h_img
            for i, f in enumerate(conv_channels):
                self._add(f"encoder.conv{i}.w", _uniform_fanin(rng, (f, ch, 4, 4), ch * 16, self.dtype))
                self._add(f"encoder.conv{i}.b", np.zeros(f, dtype=self.dtype))
                ch, side = f, side // 2
            self._flat = ch * side * side
            self._dec_side = side
            self._dec_ch = ch
            self._add("encoder.fc.w", _uniform_fanin(rng, (self._flat, shape.h_dim), self._flat, self.dtype))
            self._add("encoder.fc.b", np.zeros(shape.h_dim, dtype=self.dtype))
        else:
            n_in = c_img * h_img * w_img
            widths = list(mlp_hidden) + [shape.h_dim]
            prev = n_in
            for i, w in enumerate(widths):
                self._add(f"encoder.fc{i}.w", _uniform_fanin(rng, (prev, w), prev, self.dtype))
                self._add(f"encoder.fc{i}.b", np.zeros(w, dtype=self.dtype))
                prev = w
            self._n_enc_fc = len(widths)

        for k, l in enumerate(shape.L):
            self._add(f"encoder.c{k}.w", _uniform_fanin(rng, (shape.h_dim, l), shape.h_dim, self.dtype))
            self._add(f"encoder.c{k}.b", np.zeros(l, dtype=self.dtype))
            if attention_init == "zeros":
                attn_w = np.zeros((l, shape.h_dim), dtype=self.dtype)
            else:
                attn_w = _uniform_fanin(rng, (l, shape.h_dim), l, self.dtype)
            self._add(f"encoder.attn{k}.w", attn_w)
            self._add(f"encoder.attn{k}.b", np.zeros(shape.h_dim, dtype=self.dtype))
            self._add(f"encoder.u{k}.w", _uniform_fanin(rng, (shape.h_dim, 2 * shape.d_u), shape.h_dim, self.dtype))
            self._add(f"encoder.u{k}.b", np.zeros(2 * shape.d_u, dtype=self.dtype))
        self._add("encoder.z.w", _uniform_fanin(rng, (shape.h_dim, 2 * shape.d_z), shape.h_dim, self.dtype))
        self._add("encoder.z.b", np.zeros(2 * shape.d_z, dtype=self.dtype))

        if arch == "conv":
            self._add("decoder.fc0.w", _uniform_fanin(rng, (shape.latent_dim, 256), shape.latent_dim, self.dtype))
            self._add("decoder.fc0.b", np.zeros(256, dtype=self.dtype))
            self._add("decoder.fc1.w", _uniform_fanin(rng, (256, self._flat), 256, self.dtype))
            self._add("decoder.fc1.b", np.zeros(self._flat, dtype=self.dtype))
            dec_channels = (32, 32)
            ch = self._dec_ch
            for i, f in enumerate(dec_channels):
                self._add(f"decoder.convt{i}.w", _uniform_fanin(rng, (ch, f, 4, 4), ch * 16, self.dtype))
                self._add(f"decoder.convt{i}.b", np.zeros(f, dtype=self.dtype))
                ch = f
            self._add(f"decoder.convt{len(dec_channels)}.w", _uniform_fanin(rng, (ch, c_img, 4, 4), ch * 16, self.dtype))
            self._add(f"decoder.convt{len(dec_channels)}.b", np.zeros(c_img, dtype=self.dtype))
            self._n_dec_convt = len(dec_channels) + 1
        else:
            n_out = c_img * h_img * w_img
            widths = list(reversed(mlp_hidden)) + [n_out]
            prev = shape.latent_dim
            for i, w in enumerate(widths):
                self._add(f"decoder.fc{i}.w", _uniform_fanin(rng, (prev, w), prev, self.dtype))
                self._add(f"decoder.fc{i}.b", np.zeros(w, dtype=self.dtype))
                prev = w
            self._n_dec_fc = len(widths)

        # prior bank: modes start identical (zero mean, unit variance) so any
        # separation is learned, not injected by initialization
        for k, l in enumerate(shape.L):
            self._add(f"prior.u{k}.mean", np.zeros((l, shape.d_u), dtype=self.dtype))
            self._add(f"prior.u{k}.log_var", np.zeros((l, shape.d_u), dtype=self.dtype))
        # p(c_k): uniform, fixed (balanced classes)
        self.prior_c = [np.full(l, 1.0 / l) for l in shape.L]

    # -- parameter bookkeeping -------------------------------------------

    def _add(self, name: str, value: np.ndarray) -> None:
        self.params[name] = Tensor(value, requires_grad=True, name=name)

    def parameters(self) -> list:
        return list(self.params.values())

    def encoder_parameters(self) -> list:
        return [t for n, t in self.params.items() if n.startswith("encoder.")]

    def decoder_parameters(self) -> list:
        return [t for n, t in self.params.items() if n.startswith("decoder.")]

    def prior_parameters(self) -> list:
        return [t for n, t in self.params.items() if n.startswith("prior.")]

    def prior_mode(self, k: int, class_index: int) -> DiagonalGaussian:
        """The Gaussian prior on u_k for one class value (a bank row)."""
        mean = self.params[f"prior.u{k}.mean"][class_index]
        log_var = self.params[f"prior.u{k}.log_var"][class_index]
        return DiagonalGaussian(mean, log_var)

    def prior_bank(self, k: int) -> DiagonalGaussian:
        """All modes of variable k at once, batched [L_k, d_u]."""
        return DiagonalGaussian(self.params[f"prior.u{k}.mean"], self.params[f"prior.u{k}.log_var"])

    # -- encoder -----------------------------------------------------------

    def _as_input(self, x) -> Tensor:
        t = x if isinstance(x, Tensor) else Tensor(x)
        if t.dtype != self.dtype:
            t = Tensor(t.data.astype(self.dtype))
        return t

    def features(self, x) -> Tensor:
        """Shared feature vector h."""
        t = self._as_input(x)
        if self.arch == "conv":
            out = t
            for i in range(len(self.conv_channels)):
                out = relu(conv2d(out, self.params[f"encoder.conv{i}.w"], self.params[f"encoder.conv{i}.b"]))
            out = out.reshape(out.shape[0], self._flat)
            return relu(dense(out, self.params["encoder.fc.w"], self.params["encoder.fc.b"]))
        out = t.reshape(t.shape[0], -1)
        for i in range(self._n_enc_fc):
            out = relu(dense(out, self.params[f"encoder.fc{i}.w"], self.params[f"encoder.fc{i}.b"]))
        return out

    def class_logits(self, h: Tensor, k: int) -> Tensor:
        return dense(h, self.params[f"encoder.c{k}.w"], self.params[f"encoder.c{k}.b"])

    def attention_map(self, c_sample: Tensor, k: int) -> Tensor:
        return sigmoid(dense(c_sample, self.params[f"encoder.attn{k}.w"], self.params[f"encoder.attn{k}.b"]))

    def u_posterior(self, h: Tensor, c_sample: Tensor, k: int) -> tuple:
        """(posterior, attention) for u_k given a class sample on the simplex."""
        a = self.attention_map(c_sample, k)
        stats = dense(h * a, self.params[f"encoder.u{k}.w"], self.params[f"encoder.u{k}.b"])
        d = self.shape.d_u
        return DiagonalGaussian(stats[:, :d], stats[:, d:]), a

    def u_posterior_for_class(self, h: Tensor, k: int, class_index: int) -> DiagonalGaussian:
        """u_k posterior under a hard one-hot class assignment."""
        onehot = np.zeros((h.shape[0], self.shape.L[k]), dtype=h.dtype)
        onehot[:, class_index] = 1.0
        post, _ = self.u_posterior(h, Tensor(onehot), k)
        return post

    def z_posterior(self, h: Tensor) -> DiagonalGaussian:
        stats = dense(h, self.params["encoder.z.w"], self.params["encoder.z.b"])
        d = self.shape.d_z
        return DiagonalGaussian(stats[:, :d], stats[:, d:])

    def encode(
        self,
        x,
        cfg: GumbelConfig,
        rng: np.random.Generator,
        force_classes: dict | None = None,
    ) -> EncodeResult:
        """Full posterior pass.

        ``force_classes`` replaces the relaxed sample of the listed variables
        with an exact one-hot (used by structural tests and transfers); the
        Gumbel noise is still drawn so RNG streams stay aligned across calls.
        """
        h = self.features(x)
        c_posteriors, c_samples, attention, u_posteriors = [], [], [], []
        for k in range(self.shape.K):
            q_k = CategoricalParams(self.class_logits(h, k))
            sample = gumbel_softmax_sample(q_k, cfg, rng)
            if force_classes is not None and k in force_classes:
                onehot = np.zeros_like(sample.data)
                onehot[:, force_classes[k]] = 1.0
                sample = Tensor(onehot)
            u_post, a = self.u_posterior(h, sample, k)
            c_posteriors.append(q_k)
            c_samples.append(sample)
            attention.append(a)
            u_posteriors.append(u_post)
        return EncodeResult(c_posteriors, c_samples, attention, u_posteriors, self.z_posterior(h), h)

    # -- decoder -----------------------------------------------------------

    def decode_logits(self, u, z: Tensor) -> Tensor:
        """Pre-sigmoid reconstruction; u may be a [B, K*d_u] tensor or a
        per-variable list. The class code is intentionally absent: it reaches
        the decoder only through u."""
        if isinstance(u, (list, tuple)):
            u = concat(list(u), axis=1) if len(u) > 1 else u[0]
        latent = concat([z, u], axis=1)
        if latent.shape[1] != self.shape.latent_dim:
            raise ValueError(f"latent dim {latent.shape[1]} != expected {self.shape.latent_dim}")
        if self.arch == "conv":
            out = relu(dense(latent, self.params["decoder.fc0.w"], self.params["decoder.fc0.b"]))
            out = relu(dense(out, self.params["decoder.fc1.w"], self.params["decoder.fc1.b"]))
            out = out.reshape(out.shape[0], self._dec_ch, self._dec_side, self._dec_side)
            for i in range(self._n_dec_convt):
                out = conv2d_transpose(out, self.params[f"decoder.convt{i}.w"], self.params[f"decoder.convt{i}.b"])
                if i < self._n_dec_convt - 1:
                    out = relu(out)
            return out
        out = latent
        for i in range(self._n_dec_fc):
            out = dense(out, self.params[f"decoder.fc{i}.w"], self.params[f"decoder.fc{i}.b"])
            if i < self._n_dec_fc - 1:
                out = relu(out)
        c_img, h_img, w_img = self.shape.image_shape
        return out.reshape(out.shape[0], c_img, h_img, w_img)

    def decode(self, u, z: Tensor) -> Tensor:
        """Reconstruction in [0,1]."""
        return sigmoid(self.decode_logits(u, z))

    # -- generation --------------------------------------------------------

    def sample_prior(self, rng: np.random.Generator, count: int = 1, fixed_c=None):
        """Ancestral sample: classes from p(c), u from the matching prior
        modes, z from the standard normal. Returns (c [n,K], u [n,K*d_u],
        z [n,d_z]) as plain arrays."""
        ks = self.shape.K
        if fixed_c is not None:
            fixed_c = list(fixed_c)
            if len(fixed_c) != ks:
                raise ValueError("fixed_c needs one class per discrete variable")
            for k, c in enumerate(fixed_c):
                if not 0 <= c < self.shape.L[k]:
                    raise ValueError(f"class {c} out of range for variable {k}")
            c = np.tile(np.array(fixed_c, dtype=np.int64), (count, 1))
        else:
            c = np.stack([rng.choice(self.shape.L[k], size=count, p=self.prior_c[k]) for k in range(ks)], axis=1)
        u_parts = []
        for k in range(ks):
            mean = self.params[f"prior.u{k}.mean"].data[c[:, k]]
            std = np.exp(0.5 * self.params[f"prior.u{k}.log_var"].data[c[:, k]])
            u_parts.append(mean + std * rng.standard_normal(mean.shape).astype(mean.dtype))
        u = np.concatenate(u_parts, axis=1)
        z = rng.standard_normal((count, self.shape.d_z)).astype(self.dtype)
        return c, u, z

    def traverse(self, base_latents, target, values) -> np.ndarray:
        """Re-decode a single latent point with one coordinate swept.

        ``target`` is ("z", dim), ("u", k, dim) or ("c", k); class traversal
        swaps the whole u_k block for the prior-bank mean of each class.
        """
        c, u, z = (np.array(a, copy=True) for a in base_latents)
        frames = []
        d_u = self.shape.d_u
        for v in values:
            ci, ui, zi = c.copy(), u.copy(), z.copy()
            if target[0] == "z":
                dim = target[1]
                if not 0 <= dim < self.shape.d_z:
                    raise IndexError(f"z dim {dim} out of range")
                zi[:, dim] = v
            elif target[0] == "u":
                _, k, dim = target
                if not (0 <= k < self.shape.K and 0 <= dim < d_u):
                    raise IndexError(f"u target {target} out of range")
                ui[:, k * d_u + dim] = v
            elif target[0] == "c":
                k = target[1]
                v = int(v)
                if not 0 <= v < self.shape.L[k]:
                    raise IndexError(f"class {v} out of range for variable {k}")
                ci[:, k] = v
                ui[:, k * d_u : (k + 1) * d_u] = self.params[f"prior.u{k}.mean"].data[v]
            else:
                raise ValueError(f"unknown traversal block {target[0]!r}")
            frames.append(self.decode(Tensor(ui.astype(self.dtype)), Tensor(zi.astype(self.dtype))).data)
        return np.concatenate(frames, axis=0)

    def attribute_transfer(self, x_content, x_style) -> np.ndarray:
        """Keep the class code and class-related factors of ``x_content``,
        take the class-independent factors of ``x_style``. Deterministic:
        posterior means plus hard class assignments, no sampling."""
        h_c = self.features(x_content)
        h_s = self.features(x_style)
        u_parts = []
        for k in range(self.shape.K):
            hard = np.argmax(self.class_logits(h_c, k).data, axis=-1)
            onehot = np.zeros((h_c.shape[0], self.shape.L[k]), dtype=h_c.dtype)
            onehot[np.arange(h_c.shape[0]), hard] = 1.0
            post, _ = self.u_posterior(h_c, Tensor(onehot), k)
            u_parts.append(post.mean)
        z_mean = self.z_posterior(h_s).mean
        return self.decode(u_parts, z_mean).data

    # -- inference helpers ----------------------------------------------------

    def class_probabilities(self, x, k: int = 0) -> np.ndarray:
        h = self.features(x)
        return CategoricalParams(self.class_logits(h, k)).probs.data

    def predict_classes(self, x, k: int = 0) -> np.ndarray:
        return np.argmax(self.class_probabilities(x, k), axis=-1)

    def latent_means(self, x) -> np.ndarray:
        """[posterior-mean z || posterior-mean u_k ...] as one matrix, with
        u computed under the argmax class (deterministic representation)."""
        h = self.features(x)
        blocks = [self.z_posterior(h).mean.data]
        for k in range(self.shape.K):
            hard = np.argmax(self.class_logits(h, k).data, axis=-1)
            onehot = np.zeros((h.shape[0], self.shape.L[k]), dtype=h.dtype)
            onehot[np.arange(h.shape[0]), hard] = 1.0
            post, _ = self.u_posterior(h, Tensor(onehot), k)
            blocks.append(post.mean.data)
        return np.concatenate(blocks, axis=1)
