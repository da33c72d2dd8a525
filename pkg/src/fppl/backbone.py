"""Small frozen ViT-style feature extractor with per-layer prompt tokens.

Weights are generated once from a seed and made read-only. The forward pass
returns the final class-token embedding; the backward pass returns gradients
with respect to the prompt tokens only (the backbone itself is never trained).

Prompt arrays are stacked over insertion layers: shape ``(M, L_p, D)`` for a
prompt shared by the whole batch, or ``(B, M, L_p, D)`` for per-sample
prompts. Entry ``m`` is inserted at layer ``insert_start + m``.
"""

from __future__ import annotations

import hashlib
from dataclasses import asdict, dataclass

import numpy as np

LN_EPS = 1e-6
_GELU_C = np.sqrt(2.0 / np.pi)


@dataclass(frozen=True)
class BackboneConfig:
    embed_dim: int = 32
    num_layers: int = 6
    num_heads: int = 4
    patch_size: int = 4
    image_side: int = 8
    channels: int = 1
    insert_start: int = 1
    insert_end: int = 5
    mlp_ratio: int = 4
    seed: int = 0

    def __post_init__(self):
        for name in ("embed_dim", "num_layers", "num_heads", "patch_size",
                     "image_side", "channels", "mlp_ratio"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive, got {getattr(self, name)}")
        if self.embed_dim % self.num_heads:
            raise ValueError(
                f"num_heads={self.num_heads} does not divide embed_dim={self.embed_dim}")
        if self.image_side % self.patch_size:
            raise ValueError(
                f"image_side={self.image_side} is not a multiple of patch_size={self.patch_size}")
        if not 1 <= self.insert_start <= self.insert_end <= self.num_layers:
            raise ValueError(
                "need 1 <= insert_start <= insert_end <= num_layers, got "
                f"{self.insert_start}, {self.insert_end}, {self.num_layers}")
        if not 0 <= self.seed < 2**64:
            raise ValueError("seed must be a 64-bit unsigned integer")

    @property
    def num_prompt_layers(self) -> int:
        return self.insert_end - self.insert_start + 1

    @property
    def num_patches(self) -> int:
        return (self.image_side // self.patch_size) ** 2

    @property
    def image_shape(self) -> tuple[int, int, int]:
        return (self.channels, self.image_side, self.image_side)

    def to_dict(self) -> dict:
        return asdict(self)


# -- primitive forward/backward pieces ---------------------------------------

def _layer_norm(x, gamma, beta):
    mu = x.mean(-1, keepdims=True)
    xc = x - mu
    inv = 1.0 / np.sqrt((xc * xc).mean(-1, keepdims=True) + LN_EPS)
    xhat = xc * inv
    return xhat * gamma + beta, (xhat, inv, gamma)


def _layer_norm_bwd(dy, cache):
    xhat, inv, gamma = cache
    g = dy * gamma
    return inv * (g - g.mean(-1, keepdims=True)
                  - xhat * (g * xhat).mean(-1, keepdims=True))


def _gelu(u):
    t = np.tanh(_GELU_C * (u + 0.044715 * u ** 3))
    return 0.5 * u * (1.0 + t), t


def _gelu_bwd(du_out, u, t):
    dt = _GELU_C * (1.0 + 3 * 0.044715 * u * u)
    return du_out * (0.5 * (1.0 + t) + 0.5 * u * (1.0 - t * t) * dt)


def _softmax(s):
    s = s - s.max(-1, keepdims=True)
    e = np.exp(s)
    return e / e.sum(-1, keepdims=True)


class FrozenBackbone:
    """Seeded pre-LN transformer encoder. All weight arrays are read-only."""

    def __init__(self, config: BackboneConfig):
        self.config = config
        D = config.embed_dim
        H = D * config.mlp_ratio
        patch_dim = config.channels * config.patch_size ** 2
        rng = np.random.default_rng(np.random.SeedSequence(config.seed))

        def unif(fan_in, *shape):
            s = 1.0 / np.sqrt(fan_in)
            return rng.uniform(-s, s, size=shape)

        self.patch_w = unif(patch_dim, patch_dim, D)
        self.patch_b = unif(patch_dim, D)
        self.cls_token = unif(D, D)
        self.pos_embed = unif(D, config.num_patches + 1, D)
        self.layers = []
        for _ in range(config.num_layers):
            self.layers.append({
                "ln1_g": np.ones(D), "ln1_b": np.zeros(D),
                "wq": unif(D, D, D), "wk": unif(D, D, D),
                "wv": unif(D, D, D), "wo": unif(D, D, D),
                "ln2_g": np.ones(D), "ln2_b": np.zeros(D),
                "w1": unif(D, D, H), "w2": unif(H, H, D),
            })
        self.lnf_g = np.ones(D)
        self.lnf_b = np.zeros(D)
        for arr in self._arrays():
            arr.setflags(write=False)

    def _arrays(self):
        yield from (self.patch_w, self.patch_b, self.cls_token, self.pos_embed,
                    self.lnf_g, self.lnf_b)
        for layer in self.layers:
            yield from (layer[k] for k in sorted(layer))

    def checksum(self) -> str:
        h = hashlib.sha256()
        for arr in self._arrays():
            h.update(np.ascontiguousarray(arr, dtype="<f8").tobytes())
        return h.hexdigest()

    # -- forward -------------------------------------------------------------

    def _embed(self, images):
        cfg = self.config
        x = np.asarray(images, dtype=np.float64)
        if x.ndim == 3:
            x = x[None]
        if x.shape[1:] != cfg.image_shape:
            raise ValueError(f"expected images of shape {cfg.image_shape}, got {x.shape[1:]}")
        B, C, S, P = x.shape[0], cfg.channels, cfg.image_side, cfg.patch_size
        n = S // P
        patches = (x.reshape(B, C, n, P, n, P)
                   .transpose(0, 2, 4, 1, 3, 5)
                   .reshape(B, n * n, C * P * P))
        tok = patches @ self.patch_w + self.patch_b
        cls = np.broadcast_to(self.cls_token, (B, 1, cfg.embed_dim))
        return np.concatenate([cls, tok], axis=1) + self.pos_embed

    def _block(self, x, p):
        B, N, D = x.shape
        nh = self.config.num_heads
        dh = D // nh
        a_in, ln1 = _layer_norm(x, p["ln1_g"], p["ln1_b"])

        def heads(z):
            return z.reshape(B, N, nh, dh).transpose(0, 2, 1, 3)

        q, k, v = heads(a_in @ p["wq"]), heads(a_in @ p["wk"]), heads(a_in @ p["wv"])
        scale = 1.0 / np.sqrt(dh)
        att = _softmax(q @ k.transpose(0, 1, 3, 2) * scale)
        o = (att @ v).transpose(0, 2, 1, 3).reshape(B, N, D)
        h = x + o @ p["wo"]
        m_in, ln2 = _layer_norm(h, p["ln2_g"], p["ln2_b"])
        u = m_in @ p["w1"]
        z, t = _gelu(u)
        out = h + z @ p["w2"]
        cache = (ln1, q, k, v, att, o, ln2, m_in, u, t, z, scale)
        return out, cache

    def _block_bwd(self, dout, p, cache):
        ln1, q, k, v, att, o, ln2, m_in, u, t, z, scale = cache
        B, N, D = dout.shape
        nh = self.config.num_heads
        dz = dout @ p["w2"].T
        dm_in = _gelu_bwd(dz, u, t) @ p["w1"].T
        dh = dout + _layer_norm_bwd(dm_in, ln2)
        do = (dh @ p["wo"].T).reshape(B, N, nh, D // nh).transpose(0, 2, 1, 3)
        datt = do @ v.transpose(0, 1, 3, 2)
        dv = att.transpose(0, 1, 3, 2) @ do
        ds = att * (datt - (datt * att).sum(-1, keepdims=True)) * scale
        dq = ds @ k
        dk = ds.transpose(0, 1, 3, 2) @ q

        def merge(zz):
            return zz.transpose(0, 2, 1, 3).reshape(B, N, D)

        da_in = merge(dq) @ p["wq"].T + merge(dk) @ p["wk"].T + merge(dv) @ p["wv"].T
        return dh + _layer_norm_bwd(da_in, ln1)

    def _check_prompt(self, prompt, batch):
        cfg = self.config
        prompt = np.asarray(prompt, dtype=np.float64)
        M, D = cfg.num_prompt_layers, cfg.embed_dim
        if prompt.ndim == 3:
            prompt = np.broadcast_to(prompt, (batch,) + prompt.shape)
        if prompt.ndim != 4 or prompt.shape[0] != batch or prompt.shape[1] != M \
                or prompt.shape[3] != D:
            raise ValueError(
                f"prompt must have shape (M={M}, L_p, D={D}) or (B={batch}, M, L_p, D); "
                f"got {prompt.shape}")
        return prompt

    def forward(self, images, prompt=None):
        """Return ``(features (B, D), cache)``; ``prompt`` may be None."""
        x = self._embed(images)
        B, N = x.shape[:2]
        if prompt is not None:
            prompt = self._check_prompt(prompt, B)
            if prompt.shape[2] == 0:
                prompt = None
        start = self.config.insert_start
        caches = []
        for i, layer in enumerate(self.layers):
            m = i + 1 - start
            inserted = prompt is not None and 0 <= m < prompt.shape[1]
            if inserted:
                x = np.concatenate([x, prompt[:, m]], axis=1)
            x, c = self._block(x, layer)
            caches.append((c, inserted))
            if inserted:
                x = x[:, :N]
        feat, lnf = _layer_norm(x[:, 0], self.lnf_g, self.lnf_b)
        return feat, (caches, lnf, N, None if prompt is None else prompt.shape)

    def backward(self, cache, grad_features):
        """Gradient of a scalar loss w.r.t. the per-sample prompt, shape (B, M, L_p, D)."""
        caches, lnf, N, pshape = cache
        B, D = grad_features.shape
        dx = np.zeros((B, N, D))
        dx[:, 0] = _layer_norm_bwd(grad_features, lnf)
        dprompt = None if pshape is None else np.zeros(pshape)
        start = self.config.insert_start
        for i in reversed(range(len(self.layers))):
            c, inserted = caches[i]
            if inserted:
                dx = np.concatenate([dx, np.zeros((B, pshape[2], D))], axis=1)
            dx = self._block_bwd(dx, self.layers[i], c)
            if inserted:
                dprompt[:, i + 1 - start] = dx[:, N:]
                dx = dx[:, :N]
        if dprompt is None:
            return np.zeros((B, self.config.num_prompt_layers, 0, D))
        return dprompt


def build_frozen_backbone(config: BackboneConfig) -> FrozenBackbone:
    return FrozenBackbone(config)


def query_features(backbone: FrozenBackbone, x) -> np.ndarray:
    """Prompt-free class-token embedding. Accepts one image or a batch."""
    single = np.ndim(x) == 3
    feat, _ = backbone.forward(x)
    return feat[0] if single else feat


def prompted_features(backbone: FrozenBackbone, x, prompt) -> np.ndarray:
    single = np.ndim(x) == 3
    feat, _ = backbone.forward(x, prompt)
    return feat[0] if single else feat
