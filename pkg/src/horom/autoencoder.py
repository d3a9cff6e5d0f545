"""K encoder/decoder MLP pairs with sine activations.

Pair k compresses frames of the k-th time derivative. Every hidden layer
applies ``sin``; the last layer of each encoder and decoder is affine.
Weights are stored as (fan_in, fan_out) matrices so a batch of frames is a
row-stacked matrix and each layer is ``x @ W + c``.
"""

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .container import read_container, write_container
from .errors import DatasetError, InvalidArgumentError, ShapeError


@dataclass(frozen=True)
class MLPSpec:
    widths: tuple

    def __post_init__(self):
        w = tuple(int(x) for x in self.widths)
        if len(w) < 2 or min(w) < 1:
            raise InvalidArgumentError(f"need at least two positive layer widths, got {self.widths}")
        object.__setattr__(self, "widths", w)

    @classmethod
    def parse(cls, text):
        """Accept ``"1001-250-100-5"`` or a sequence of ints."""
        if isinstance(text, str):
            return cls(tuple(int(p) for p in text.split("-")))
        return cls(tuple(text))

    @property
    def input_width(self):
        return self.widths[0]

    @property
    def latent_width(self):
        return self.widths[-1]

    @property
    def decoder_widths(self):
        return self.widths[::-1]

    def __str__(self):
        return "-".join(str(w) for w in self.widths)


def _layer_shapes(widths):
    return [(widths[i], widths[i + 1]) for i in range(len(widths) - 1)]


@dataclass
class AutoencoderStack:
    spec: MLPSpec
    K: int
    encoders: list  # K lists of [W, c] pairs
    decoders: list
    seed: int = 0
    epoch: int = 0
    meta: dict = field(default_factory=dict)

    @property
    def L(self):
        return self.spec.latent_width

    @property
    def n_u(self):
        return self.spec.input_width

    def _check_k(self, k):
        if not 0 <= k < self.K:
            raise IndexError(f"derivative index {k} outside 0..{self.K - 1}")

    def named_parameters(self):
        """(name, array) for every weight, in a fixed order; arrays are live."""
        out = []
        for part, nets in (("enc", self.encoders), ("dec", self.decoders)):
            for k, layers in enumerate(nets):
                for i, (W, c) in enumerate(layers):
                    out.append((f"{part}{k}.W{i}", W))
                    out.append((f"{part}{k}.c{i}", c))
        return out

    def copy(self):
        dup = lambda nets: [[(W.copy(), c.copy()) for W, c in layers] for layers in nets]
        return AutoencoderStack(self.spec, self.K, dup(self.encoders), dup(self.decoders),
                                self.seed, self.epoch, dict(self.meta))

    def activation_layout(self):
        """Per-layer activation names, for architecture introspection."""
        n = len(self.spec.widths) - 1
        return ["sin"] * (n - 1) + ["none"]


def init_stack(spec, K, seed=0):
    """Weights uniform in +-1/sqrt(fan_in), zero biases; deterministic in ``seed``."""
    if K < 1:
        raise InvalidArgumentError("K must be >= 1")
    spec = spec if isinstance(spec, MLPSpec) else MLPSpec.parse(spec)
    rng = np.random.default_rng(seed)

    def make(widths):
        layers = []
        for fan_in, fan_out in _layer_shapes(widths):
            bound = 1.0 / np.sqrt(fan_in)
            layers.append((rng.uniform(-bound, bound, size=(fan_in, fan_out)), np.zeros(fan_out)))
        return layers

    encoders, decoders = [], []
    for _ in range(K):
        encoders.append(make(spec.widths))
        decoders.append(make(spec.decoder_widths))
    return AutoencoderStack(spec, K, encoders, decoders, seed=seed)


def mlp_apply(layers, x):
    """Evaluate an MLP on a batch; works on arrays, tensors and duals."""
    n = len(layers)
    if isinstance(x, (ad.Tensor, ad.Dual)):
        for i, (W, c) in enumerate(layers):
            x = ad.affine(x, W, c)
            if i < n - 1:
                x = ad.sin(x)
        return x
    for i, (W, c) in enumerate(layers):
        x = x @ W + c
        if i < n - 1:
            x = np.sin(x)
    return x


def _as_batch(x, width, what):
    x = np.asarray(x, dtype=float)
    single = x.ndim == 1
    if single:
        x = x[None]
    if x.ndim != 2 or x.shape[1] != width:
        raise ShapeError(f"{what} must have {width} components per row, got shape {x.shape}")
    return x, single


def encode(stack, k, frames):
    """Latents for one frame (N_u,) or a batch (N, N_u)."""
    stack._check_k(k)
    x, single = _as_batch(frames, stack.n_u, "frames")
    z = mlp_apply(stack.encoders[k], x)
    return z[0] if single else z


def decode(stack, k, latents):
    stack._check_k(k)
    z, single = _as_batch(latents, stack.L, "latents")
    u = mlp_apply(stack.decoders[k], z)
    return u[0] if single else u


def save_stack(stack, path, extra_header=None, extra_arrays=None):
    header = {
        "kind": "autoencoder-stack",
        "spec": list(stack.spec.widths),
        "K": stack.K,
        "L": stack.L,
        "seed": int(stack.seed),
        "epoch": int(stack.epoch),
        "meta": stack.meta,
    }
    header.update(extra_header or {})
    arrays = dict(stack.named_parameters())
    arrays.update(extra_arrays or {})
    write_container(path, header, arrays)


def load_stack(path):
    """Returns ``(stack, header, arrays)``; arrays not part of the stack are left in ``arrays``."""
    header, arrays = read_container(path)
    if header.get("kind") != "autoencoder-stack":
        raise DatasetError(f"{path} does not hold an autoencoder stack")
    spec = MLPSpec(tuple(header["spec"]))
    K = int(header["K"])
    stack = init_stack(spec, K, seed=0)
    for name, arr in stack.named_parameters():
        if name not in arrays:
            raise DatasetError(f"{path}: missing weight {name}")
        arr[...] = arrays.pop(name)
    stack.seed = int(header["seed"])
    stack.epoch = int(header["epoch"])
    stack.meta = header.get("meta", {})
    return stack, header, arrays
