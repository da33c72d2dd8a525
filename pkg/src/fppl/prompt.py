"""Task-prompt bank, cosine task scoring (coslinear) and softmax prompt fusion."""

from __future__ import annotations

import hashlib

import numpy as np

PSI_INIT_SCALE = 0.1
PSI_GROWTH_NOISE = 1e-3
PROMPT_INIT_SCALE = 1.0


def _frozen_copy(arr: np.ndarray) -> np.ndarray:
    out = np.array(arr, dtype=np.float64, copy=True)
    out.setflags(write=False)
    return out


def prompt_checksum(arr) -> str:
    return hashlib.sha256(np.ascontiguousarray(arr, dtype="<f8").tobytes()).hexdigest()


class PromptBank:
    """Frozen prompts for tasks ``1..t-1`` plus the tunable prompt of task ``t``.

    Every prompt set is an array of shape ``(M, L_p, D)``. Frozen entries are
    read-only copies, so in-place writes raise ``ValueError``.
    """

    def __init__(self, current: np.ndarray, frozen=(), task_index: int | None = None):
        current = np.array(current, dtype=np.float64, copy=True)
        if current.ndim != 3:
            raise ValueError(f"prompt set must be (M, L_p, D), got shape {current.shape}")
        self.frozen = tuple(_frozen_copy(p) for p in frozen)
        for p in self.frozen:
            if p.shape != current.shape:
                raise ValueError("all prompt sets in a bank must share (M, L_p, D)")
        self.current = current
        self.task_index = len(self.frozen) + 1 if task_index is None else task_index
        if self.task_index != len(self.frozen) + 1:
            raise ValueError("frozen list length must equal task_index - 1")

    @classmethod
    def initial(cls, num_layers: int, length: int, dim: int, rng) -> "PromptBank":
        p = rng.uniform(-PROMPT_INIT_SCALE, PROMPT_INIT_SCALE, size=(num_layers, length, dim))
        return cls(p)

    def stacked(self) -> np.ndarray:
        """All task prompts as one array ``(t, M, L_p, D)``; the last one is tunable."""
        return np.stack(self.frozen + (self.current,))

    def frozen_checksums(self) -> list[str]:
        return [prompt_checksum(p) for p in self.frozen]


def init_psi(dim: int, rng) -> np.ndarray:
    return rng.uniform(-PSI_INIT_SCALE, PSI_INIT_SCALE, size=(dim, 1))


def grow_psi(psi: np.ndarray, rng) -> np.ndarray:
    new_col = psi[:, -1] + rng.uniform(-PSI_GROWTH_NOISE, PSI_GROWTH_NOISE, size=psi.shape[0])
    return np.concatenate([psi, new_col[:, None]], axis=1)


def advance_task(bank: PromptBank, psi: np.ndarray, new_task: int, rng):
    """Freeze the received prompt, start task ``new_task`` from a copy of it, grow psi."""
    if bank.task_index != new_task - 1:
        raise ValueError(
            f"cannot advance bank at task {bank.task_index} to task {new_task}")
    if psi.shape[1] != bank.task_index:
        raise ValueError(f"psi has {psi.shape[1]} columns, bank is at task {bank.task_index}")
    new_bank = PromptBank(bank.current.copy(), bank.frozen + (bank.current,))
    return new_bank, grow_psi(psi, rng)


def coslinear_logits(psi: np.ndarray, q: np.ndarray) -> np.ndarray:
    """Cosine similarity between each query row and each column of ``psi``."""
    q = np.asarray(q, dtype=np.float64)
    qn = np.linalg.norm(q, axis=-1, keepdims=True)
    cn = np.linalg.norm(psi, axis=0)
    if np.any(qn == 0):
        raise ValueError("zero-norm query in coslinear")
    if np.any(cn == 0):
        raise ValueError("zero column in coslinear weights")
    return (q @ psi) / qn / cn


def coslinear_backward(psi: np.ndarray, q: np.ndarray, dlogits: np.ndarray) -> np.ndarray:
    """Gradient w.r.t. ``psi`` given upstream gradient on the cosine logits (batched)."""
    qn = np.linalg.norm(q, axis=-1, keepdims=True)
    cn = np.linalg.norm(psi, axis=0)
    qhat = q / qn
    cos = qhat @ psi / cn
    # d cos_bi / d psi_:,i = qhat_b / |psi_i| - cos_bi * psi_:,i / |psi_i|^2
    dpsi = qhat.T @ dlogits / cn
    dpsi -= psi * (dlogits * cos).sum(0) / cn ** 2
    return dpsi


def softmax(z: np.ndarray) -> np.ndarray:
    z = np.asarray(z, dtype=np.float64)
    e = np.exp(z - z.max(-1, keepdims=True))
    return e / e.sum(-1, keepdims=True)


def fusion_weights(logits: np.ndarray) -> np.ndarray:
    return softmax(logits)


def fuse(bank_or_stack, logits) -> np.ndarray:
    """Softmax-weighted sum of task prompts.

    ``logits`` of shape (t,) gives one fused prompt (M, L_p, D); shape (B, t)
    gives per-sample prompts (B, M, L_p, D).
    """
    stack = bank_or_stack.stacked() if isinstance(bank_or_stack, PromptBank) else bank_or_stack
    logits = np.asarray(logits, dtype=np.float64)
    if logits.shape[-1] != stack.shape[0]:
        raise ValueError(f"got {logits.shape[-1]} logits for {stack.shape[0]} task prompts")
    if stack.shape[0] == 1:
        return np.broadcast_to(stack[0], logits.shape[:-1] + stack.shape[1:]).copy()
    w = fusion_weights(logits)
    return np.tensordot(w, stack, axes=([-1], [0]))
