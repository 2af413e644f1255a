"""Embedding networks: per-modality base layers plus optional projection heads.

Each branch maps a precomputed feature vector to the joint space::

    h = x @ W_base.T + b_base                       (base layer, 1024-d)
    z = relu(h @ W_hid.T + b_hid) @ W_out.T + b_out (projection head, optional)

Without heads, ``z = h``. Parameters are exposed as a flat ``name -> array``
mapping so the optimizer and checkpoint code can treat them uniformly.
"""

from __future__ import annotations

import copy
import itertools
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, ShapeError, StaleCacheError

BASE_DIM = 1024
HIDDEN_DIM = 2048
JOINT_DIM = 1024
SWEEP_DIMS = (64, 128, 256, 512, 1024, 2048)


@dataclass
class LinearLayer:
    W: np.ndarray  # out_dim x in_dim
    b: np.ndarray  # out_dim

    @property
    def in_dim(self) -> int:
        return self.W.shape[1]

    @property
    def out_dim(self) -> int:
        return self.W.shape[0]

    def __call__(self, x: np.ndarray) -> np.ndarray:
        return x @ self.W.T + self.b

    def backward(self, x: np.ndarray, dy: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Return (dx, dW, db) for upstream gradient ``dy``."""
        return dy @ self.W, dy.T @ x, dy.sum(axis=0)


@dataclass
class ProjectionHead:
    hidden: LinearLayer
    out: LinearLayer


@dataclass(frozen=True)
class NetworkConfig:
    img_dim: int
    txt_dim: int
    base_dim: int = BASE_DIM
    heads: bool = False
    hidden_dim: int = HIDDEN_DIM
    joint_dim: int = JOINT_DIM

    def __post_init__(self):
        for name in ("img_dim", "txt_dim", "base_dim", "hidden_dim", "joint_dim"):
            value = getattr(self, name)
            if not isinstance(value, (int, np.integer)) or value < 1:
                raise ConfigError(f"{name} must be a positive integer, got {value!r}")

    @property
    def out_dim(self) -> int:
        return self.joint_dim if self.heads else self.base_dim

    def to_dict(self) -> dict:
        return {
            "img_dim": int(self.img_dim),
            "txt_dim": int(self.txt_dim),
            "base_dim": int(self.base_dim),
            "heads": bool(self.heads),
            "hidden_dim": int(self.hidden_dim),
            "joint_dim": int(self.joint_dim),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "NetworkConfig":
        return cls(**{k: d[k] for k in ("img_dim", "txt_dim", "base_dim", "heads", "hidden_dim", "joint_dim")})


_version_counter = itertools.count(1)


@dataclass
class EmbeddingNetwork:
    image_base: LinearLayer
    text_base: LinearLayer
    image_head: ProjectionHead | None = None
    text_head: ProjectionHead | None = None
    # bumped whenever parameters are replaced; forward caches record it
    version: int = field(default_factory=lambda: next(_version_counter))

    def __post_init__(self):
        if (self.image_head is None) != (self.text_head is None):
            raise ConfigError("projection heads must be present on both branches or neither")
        if self.image_base.out_dim != self.text_base.out_dim:
            raise ConfigError("image and text base layers disagree on output width")
        if self.has_heads and self.image_head.out.out_dim != self.text_head.out.out_dim:
            raise ConfigError("image and text heads disagree on joint dimensionality")

    @property
    def has_heads(self) -> bool:
        return self.image_head is not None

    @property
    def config(self) -> NetworkConfig:
        if self.has_heads:
            return NetworkConfig(self.image_base.in_dim, self.text_base.in_dim, self.image_base.out_dim,
                                 True, self.image_head.hidden.out_dim, self.image_head.out.out_dim)
        return NetworkConfig(self.image_base.in_dim, self.text_base.in_dim, self.image_base.out_dim)

    @property
    def joint_dim(self) -> int:
        return self.config.out_dim

    def named_layers(self) -> dict[str, LinearLayer]:
        layers = {"image_base": self.image_base, "text_base": self.text_base}
        if self.has_heads:
            layers.update({
                "image_head.hidden": self.image_head.hidden,
                "image_head.out": self.image_head.out,
                "text_head.hidden": self.text_head.hidden,
                "text_head.out": self.text_head.out,
            })
        return layers

    def params(self) -> dict[str, np.ndarray]:
        """Live references to every parameter array, in a fixed order."""
        out = {}
        for name, layer in self.named_layers().items():
            out[f"{name}.W"] = layer.W
            out[f"{name}.b"] = layer.b
        return out

    def set_params(self, params: dict[str, np.ndarray]) -> None:
        layers = self.named_layers()
        current = self.params()
        if set(params) != set(current):
            raise ShapeError(f"parameter names differ: {sorted(set(params) ^ set(current))}")
        for name, value in params.items():
            if value.shape != current[name].shape:
                raise ShapeError(f"{name}: expected shape {current[name].shape}, got {value.shape}")
            layer_name, attr = name.rsplit(".", 1)
            setattr(layers[layer_name], attr, np.asarray(value, dtype=np.float64))
        self.touch()

    def touch(self) -> None:
        """Mark parameters as modified so older forward caches are rejected."""
        self.version = next(_version_counter)

    def copy(self) -> "EmbeddingNetwork":
        net = copy.deepcopy(self)
        net.touch()
        return net


def glorot_layer(in_dim: int, out_dim: int, rng: np.random.Generator) -> LinearLayer:
    bound = np.sqrt(6.0 / (in_dim + out_dim))
    W = rng.uniform(-bound, bound, size=(out_dim, in_dim))
    return LinearLayer(W, np.zeros(out_dim))


def _init_head(in_dim: int, hidden_dim: int, joint_dim: int, rng) -> ProjectionHead:
    return ProjectionHead(glorot_layer(in_dim, hidden_dim, rng), glorot_layer(hidden_dim, joint_dim, rng))


def init_network(config: NetworkConfig, rng: np.random.Generator) -> EmbeddingNetwork:
    image_base = glorot_layer(config.img_dim, config.base_dim, rng)
    text_base = glorot_layer(config.txt_dim, config.base_dim, rng)
    if not config.heads:
        return EmbeddingNetwork(image_base, text_base)
    image_head = _init_head(config.base_dim, config.hidden_dim, config.joint_dim, rng)
    text_head = _init_head(config.base_dim, config.hidden_dim, config.joint_dim, rng)
    return EmbeddingNetwork(image_base, text_base, image_head, text_head)


def zeros_network(config: NetworkConfig) -> EmbeddingNetwork:
    """A network of the given shape with all parameters zero."""
    def layer(i, o):
        return LinearLayer(np.zeros((o, i)), np.zeros(o))
    image_base, text_base = layer(config.img_dim, config.base_dim), layer(config.txt_dim, config.base_dim)
    if not config.heads:
        return EmbeddingNetwork(image_base, text_base)
    heads = [ProjectionHead(layer(config.base_dim, config.hidden_dim), layer(config.hidden_dim, config.joint_dim))
             for _ in range(2)]
    return EmbeddingNetwork(image_base, text_base, *heads)


def init_from_base(base: EmbeddingNetwork, rng: np.random.Generator,
                   hidden_dim: int = HIDDEN_DIM, joint_dim: int = JOINT_DIM) -> EmbeddingNetwork:
    """Copy a headless network's base layers and attach freshly initialized heads."""
    if base.has_heads:
        raise ConfigError("init_from_base expects a network without projection heads")
    NetworkConfig(base.image_base.in_dim, base.text_base.in_dim, base.image_base.out_dim,
                  True, hidden_dim, joint_dim)  # validates dims
    image_base = copy.deepcopy(base.image_base)
    text_base = copy.deepcopy(base.text_base)
    in_dim = image_base.out_dim
    image_head = _init_head(in_dim, hidden_dim, joint_dim, rng)
    text_head = _init_head(in_dim, hidden_dim, joint_dim, rng)
    return EmbeddingNetwork(image_base, text_base, image_head, text_head)


def identity_head(width: int) -> ProjectionHead:
    """A head computing z = h exactly, with hidden width 2*width.

    relu(h) - relu(-h) == h, so the hidden layer stacks [I; -I] and the
    output layer recombines with [I, -I].
    """
    eye = np.eye(width)
    hidden = LinearLayer(np.vstack([eye, -eye]), np.zeros(2 * width))
    out = LinearLayer(np.hstack([eye, -eye]), np.zeros(width))
    return ProjectionHead(hidden, out)


@dataclass
class BranchCache:
    x: np.ndarray
    h: np.ndarray
    pre: np.ndarray | None = None
    act: np.ndarray | None = None


@dataclass
class ForwardCache:
    net_id: int
    version: int
    image: BranchCache
    text: BranchCache


def _branch_forward(base: LinearLayer, head: ProjectionHead | None, x: np.ndarray):
    h = base(x)
    if head is None:
        return h, BranchCache(x, h)
    pre = head.hidden(h)
    act = np.maximum(pre, 0.0)
    return head.out(act), BranchCache(x, h, pre, act)


def _check_input(x: np.ndarray, dim: int, what: str) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != dim:
        raise ShapeError(f"{what} features must have shape (N, {dim}), got {x.shape}")
    return x


def forward(net: EmbeddingNetwork, image_feats: np.ndarray, text_feats: np.ndarray):
    """Embed both modalities. Returns ``(Z_I, Z_C, cache)`` with unnormalized rows."""
    image_feats = _check_input(image_feats, net.image_base.in_dim, "image")
    text_feats = _check_input(text_feats, net.text_base.in_dim, "text")
    z_img, img_cache = _branch_forward(net.image_base, net.image_head, image_feats)
    z_txt, txt_cache = _branch_forward(net.text_base, net.text_head, text_feats)
    return z_img, z_txt, ForwardCache(id(net), net.version, img_cache, txt_cache)


def embed_images(net: EmbeddingNetwork, feats: np.ndarray) -> np.ndarray:
    return _branch_forward(net.image_base, net.image_head, _check_input(feats, net.image_base.in_dim, "image"))[0]


def embed_texts(net: EmbeddingNetwork, feats: np.ndarray) -> np.ndarray:
    return _branch_forward(net.text_base, net.text_head, _check_input(feats, net.text_base.in_dim, "text"))[0]


def base_embed_images(net: EmbeddingNetwork, feats: np.ndarray) -> np.ndarray:
    """The 1024-d intermediate before any projection head."""
    return net.image_base(_check_input(feats, net.image_base.in_dim, "image"))


def _branch_backward(prefix: str, base: LinearLayer, head: ProjectionHead | None,
                     cache: BranchCache, dz: np.ndarray, grads: dict) -> None:
    if head is None:
        dh = dz
    else:
        dact, grads[f"{prefix}_head.out.W"], grads[f"{prefix}_head.out.b"] = head.out.backward(cache.act, dz)
        dpre = dact * (cache.pre > 0.0)
        dh, grads[f"{prefix}_head.hidden.W"], grads[f"{prefix}_head.hidden.b"] = head.hidden.backward(cache.h, dpre)
    _, grads[f"{prefix}_base.W"], grads[f"{prefix}_base.b"] = base.backward(cache.x, dh)


def backward(net: EmbeddingNetwork, cache: ForwardCache, grad_z_img: np.ndarray,
             grad_z_txt: np.ndarray) -> dict[str, np.ndarray]:
    """Gradients of the loss w.r.t. every parameter, keyed like ``net.params()``."""
    if cache.net_id != id(net) or cache.version != net.version:
        raise StaleCacheError("forward cache does not belong to this network state")
    n_img, n_txt = cache.image.x.shape[0], cache.text.x.shape[0]
    d = net.joint_dim
    if grad_z_img.shape != (n_img, d) or grad_z_txt.shape != (n_txt, d):
        raise ShapeError(f"upstream gradients {grad_z_img.shape}, {grad_z_txt.shape} do not match "
                         f"embeddings ({n_img}, {d}), ({n_txt}, {d})")
    grads: dict[str, np.ndarray] = {}
    _branch_backward("image", net.image_base, net.image_head, cache.image, grad_z_img, grads)
    _branch_backward("text", net.text_base, net.text_head, cache.text, grad_z_txt, grads)
    return {name: grads[name] for name in net.params()}
