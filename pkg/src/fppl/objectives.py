"""Client and server losses with exact reverse-mode gradients.

The client loss is cross-entropy on the classifier output plus a
temperature-scaled contrastive term pulling each feature towards the global
prototype of its class. The server loss is cross-entropy of the classifier on
stored prototypes.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable, Mapping, Sequence

import numpy as np

from .backbone import FrozenBackbone
from .prompt import PromptBank, coslinear_backward, coslinear_logits, fusion_weights


@dataclass
class Classifier:
    weight: np.ndarray  # (D, N_all)
    bias: np.ndarray  # (N_all,)

    @classmethod
    def zeros(cls, dim: int, num_classes: int) -> "Classifier":
        return cls(np.zeros((dim, num_classes)), np.zeros(num_classes))

    @property
    def num_classes(self) -> int:
        return self.bias.shape[0]

    def logits(self, features: np.ndarray) -> np.ndarray:
        return features @ self.weight + self.bias

    def copy(self) -> "Classifier":
        return Classifier(self.weight.copy(), self.bias.copy())


@dataclass
class TunableParams:
    """The transmitted parameter set: coslinear, current task prompt, classifier."""

    psi: np.ndarray  # (D, t)
    prompt: np.ndarray  # (M, L_p, D)
    classifier: Classifier

    def arrays(self) -> dict[str, np.ndarray]:
        return {"psi": self.psi, "prompt": self.prompt,
                "weight": self.classifier.weight, "bias": self.classifier.bias}

    @classmethod
    def from_arrays(cls, a: Mapping[str, np.ndarray]) -> "TunableParams":
        return cls(a["psi"], a["prompt"], Classifier(a["weight"], a["bias"]))

    def copy(self) -> "TunableParams":
        return TunableParams.from_arrays({k: v.copy() for k, v in self.arrays().items()})

    def num_floats(self) -> int:
        return sum(v.size for v in self.arrays().values())


@dataclass
class LossBreakdown:
    ce: float
    ur: float

    @property
    def total(self) -> float:
        return self.ce + self.ur


# -- elementary losses -------------------------------------------------------

def _log_softmax(z):
    z = z - z.max(-1, keepdims=True)
    return z - np.log(np.exp(z).sum(-1, keepdims=True))


def cross_entropy_with_grad(logits: np.ndarray, labels) -> tuple[np.ndarray, np.ndarray]:
    """Per-row cross-entropy and its gradient w.r.t. the logits."""
    logits = np.atleast_2d(np.asarray(logits, dtype=np.float64))
    labels = np.atleast_1d(np.asarray(labels))
    n = logits.shape[1]
    if np.any(labels < 0) or np.any(labels >= n):
        raise ValueError(f"label out of range for {n} classes")
    lsm = _log_softmax(logits)
    rows = np.arange(len(labels))
    grad = np.exp(lsm)
    grad[rows, labels] -= 1.0
    return -lsm[rows, labels], grad


def classification_loss(logits, label: int) -> float:
    return float(cross_entropy_with_grad(logits, [label])[0][0])


def _cosine_with_grad(c: np.ndarray, protos: np.ndarray):
    """cos(c_b, proto_j) for a batch of features and a stack of prototypes."""
    cn = np.linalg.norm(c, axis=1, keepdims=True)
    pn = np.linalg.norm(protos, axis=1)
    if np.any(cn == 0) or np.any(pn == 0):
        raise ValueError("zero-norm vector in cosine similarity")
    chat = c / cn
    sim = chat @ (protos / pn[:, None]).T
    return sim, chat, cn


def ur_with_grad(features: np.ndarray, labels, prototypes: Mapping[int, np.ndarray],
                 tau: float, candidates: Iterable[int]) -> tuple[np.ndarray, np.ndarray]:
    """Per-sample unified-representation loss and gradient w.r.t. the features.

    Samples whose label has no global prototype contribute zero loss and zero
    gradient.
    """
    if tau <= 0:
        raise ValueError("temperature must be positive")
    features = np.atleast_2d(np.asarray(features, dtype=np.float64))
    labels = np.atleast_1d(np.asarray(labels))
    loss = np.zeros(len(labels))
    grad = np.zeros_like(features)
    classes = [y for y in sorted(set(candidates)) if y in prototypes]
    col = {y: j for j, y in enumerate(classes)}
    rows = np.array([i for i, y in enumerate(labels) if int(y) in col], dtype=int)
    if rows.size == 0:
        return loss, grad
    protos = np.stack([np.asarray(prototypes[y], dtype=np.float64) for y in classes])
    c = features[rows]
    sim, chat, cn = _cosine_with_grad(c, protos)
    target = np.array([col[int(labels[i])] for i in rows])
    lsm = _log_softmax(sim / tau)
    r = np.arange(len(rows))
    loss[rows] = -lsm[r, target]
    dsim = np.exp(lsm)
    dsim[r, target] -= 1.0
    dsim /= tau
    # d cos(c, g)/dc = (ghat - cos * chat) / |c|
    phat = protos / np.linalg.norm(protos, axis=1)[:, None]
    dc = dsim @ phat - (dsim * sim).sum(1, keepdims=True) * chat
    grad[rows] = dc / cn
    return loss, grad


def unified_representation_loss(c, label: int, prototypes: Mapping[int, np.ndarray],
                                tau: float, candidate_classes: Iterable[int]) -> float:
    return float(ur_with_grad(np.asarray(c)[None], [label], prototypes, tau,
                              candidate_classes)[0][0])


# -- client objective --------------------------------------------------------

@dataclass
class ClientGrads:
    psi: np.ndarray
    prompt: np.ndarray
    weight: np.ndarray
    bias: np.ndarray

    def arrays(self) -> dict[str, np.ndarray]:
        return {"psi": self.psi, "prompt": self.prompt, "weight": self.weight, "bias": self.bias}


def fused_prompts(bank: PromptBank, psi: np.ndarray, queries: np.ndarray,
                  use_fusion: bool = True):
    """Per-sample prompts for a batch of queries. Returns (prompts, weights, stack)."""
    if not use_fusion:
        return bank.current, None, None
    stack = bank.stacked()
    if psi.shape[1] != stack.shape[0]:
        raise ValueError(f"psi has {psi.shape[1]} columns for {stack.shape[0]} task prompts")
    w = fusion_weights(coslinear_logits(psi, queries))
    return np.tensordot(w, stack, axes=([1], [0])), w, stack


def extract_features(backbone: FrozenBackbone, images, bank: PromptBank, psi: np.ndarray,
                     queries: np.ndarray | None = None, use_fusion: bool = True) -> np.ndarray:
    """Prompted class-token features of a batch under the given model."""
    if queries is None and use_fusion:
        queries = backbone.forward(images)[0]
    prompts, _, _ = fused_prompts(bank, psi, queries, use_fusion)
    return backbone.forward(images, prompts)[0]


def client_loss_and_grad(images, labels, bank: PromptBank, psi: np.ndarray,
                         classifier: Classifier, backbone: FrozenBackbone,
                         prototypes: Mapping[int, np.ndarray], tau: float,
                         candidates: Iterable[int] = (), *, queries=None,
                         use_ur: bool = True, use_fusion: bool = True,
                         reduction: str = "sum", need_grad: bool = True):
    labels = np.atleast_1d(np.asarray(labels))
    if labels.size == 0:
        raise ValueError("empty batch")
    if reduction not in ("sum", "mean"):
        raise ValueError(f"unknown reduction {reduction!r}")
    scale = 1.0 / labels.size if reduction == "mean" else 1.0
    if use_fusion and queries is None:
        queries = backbone.forward(images)[0]
    prompts, w, stack = fused_prompts(bank, psi, queries, use_fusion)
    feats, cache = backbone.forward(images, prompts)
    ce, dlogits = cross_entropy_with_grad(classifier.logits(feats), labels)
    if use_ur:
        ur, dfeat_ur = ur_with_grad(feats, labels, prototypes, tau, candidates)
    else:
        ur, dfeat_ur = np.zeros_like(ce), np.zeros_like(feats)
    loss = LossBreakdown(float(ce.sum() * scale), float(ur.sum() * scale))
    if not need_grad:
        return loss, None

    dlogits *= scale
    dfeat = dlogits @ classifier.weight.T + dfeat_ur * scale
    dW = feats.T @ dlogits
    db = dlogits.sum(0)
    dprompts = backbone.backward(cache, dfeat)  # (B, M, L_p, D)
    if use_fusion:
        t = stack.shape[0]
        dp = np.tensordot(w[:, t - 1], dprompts, axes=(0, 0))
        dw = np.einsum("bmld,tmld->bt", dprompts, stack)
        dz = w * (dw - (dw * w).sum(1, keepdims=True))
        dpsi = coslinear_backward(psi, queries, dz)
    else:
        dp = dprompts.sum(0)
        dpsi = np.zeros_like(psi)
    return loss, ClientGrads(dpsi, dp, dW, db)


def client_loss(images, labels, bank, psi, classifier, backbone, prototypes, tau,
                candidates=(), **kwargs) -> LossBreakdown:
    kwargs["need_grad"] = False
    return client_loss_and_grad(images, labels, bank, psi, classifier, backbone,
                                prototypes, tau, candidates, **kwargs)[0]


# -- server objective --------------------------------------------------------

def debias_loss_and_grad(classifier: Classifier, prototypes: Sequence[tuple[int, np.ndarray]],
                         reduction: str = "sum"):
    if len(prototypes) == 0:
        raise ValueError("debias needs at least one prototype")
    labels = np.array([y for y, _ in prototypes])
    feats = np.stack([np.asarray(v, dtype=np.float64) for _, v in prototypes])
    ce, dlogits = cross_entropy_with_grad(classifier.logits(feats), labels)
    scale = 1.0 / len(labels) if reduction == "mean" else 1.0
    dlogits *= scale
    return float(ce.sum() * scale), feats.T @ dlogits, dlogits.sum(0)


def debias_loss(classifier: Classifier, prototypes, reduction: str = "sum") -> float:
    return debias_loss_and_grad(classifier, prototypes, reduction)[0]


class Adam:
    """Adam over a dict of named arrays, updated in place."""

    def __init__(self, lr: float = 1e-3, beta1: float = 0.9, beta2: float = 0.999,
                 eps: float = 1e-8, lr_overrides: Mapping[str, float] | None = None):
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.lr_overrides = dict(lr_overrides or {})
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}
        self.t = 0

    def step(self, params: Mapping[str, np.ndarray], grads: Mapping[str, np.ndarray]):
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        for k, g in grads.items():
            m = self.m.setdefault(k, np.zeros_like(g))
            v = self.v.setdefault(k, np.zeros_like(g))
            m *= b1
            m += (1 - b1) * g
            v *= b2
            v += (1 - b2) * g * g
            mhat = m / (1 - b1 ** self.t)
            vhat = v / (1 - b2 ** self.t)
            params[k] -= self.lr_overrides.get(k, self.lr) * mhat / (np.sqrt(vhat) + self.eps)
