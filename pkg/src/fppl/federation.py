"""Federated rounds: client prompt tuning, weighted aggregation, prototype debiasing.

Server-side functions only ever receive parameters and prototype sets
(``ClientUpdate``); raw samples never leave ``Client``.
"""

from __future__ import annotations

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from typing import Sequence

import numpy as np

from .backbone import FrozenBackbone
from .objectives import (Adam, Classifier, LossBreakdown, TunableParams,
                         client_loss_and_grad, debias_loss_and_grad, extract_features)
from .prompt import PromptBank, advance_task, init_psi, prompt_checksum
from .prototype import (LocalPrototypeSet, PrototypePool, global_prototypes,
                        local_prototypes)

log = logging.getLogger(__name__)

_FEATURE_CHUNK = 256


@dataclass(frozen=True)
class Hyperparams:
    num_clients: int = 4
    num_tasks: int = 5
    total_rounds: int = 25
    local_epochs: int = 2
    server_epochs: int = 5
    batch_size: int = 32
    lr: float = 1e-3
    head_lr: float = 0.024
    server_lr: float = 0.024
    tau: float = 0.2
    prompt_length: int = 4
    reduction: str = "mean"
    ur_candidates: str = "task"  # "task": current-task classes, "seen": all seen so far
    parallel: bool = False
    seed: int = 2023

    def __post_init__(self):
        counts = ("num_clients", "num_tasks", "total_rounds", "batch_size")
        for name in counts:
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if self.local_epochs < 0 or self.server_epochs < 0 or self.prompt_length < 0:
            raise ValueError("epochs and prompt_length must be non-negative")
        if self.total_rounds % self.num_tasks:
            raise ValueError(
                f"total_rounds={self.total_rounds} not divisible by num_tasks={self.num_tasks}")
        if self.tau <= 0:
            raise ValueError("tau must be positive")
        if self.reduction not in ("sum", "mean"):
            raise ValueError(f"unknown reduction {self.reduction!r}")
        if self.ur_candidates not in ("task", "seen"):
            raise ValueError(f"unknown ur_candidates {self.ur_candidates!r}")

    @property
    def rounds_per_task(self) -> int:
        return self.total_rounds // self.num_tasks


@dataclass(frozen=True)
class AblationFlags:
    use_ur: bool = True
    use_fusion: bool = True
    use_debias: bool = True
    use_pool: bool = True


@dataclass
class ClientUpdate:
    """Everything a client sends to the server after one round."""

    client: int
    params: TunableParams
    prototypes: LocalPrototypeSet
    num_samples: int
    epoch_losses: list[LossBreakdown] = field(default_factory=list)

    def num_floats(self) -> int:
        return self.params.num_floats() + self.prototypes.num_floats()


@dataclass
class Shard:
    images: np.ndarray
    labels: np.ndarray
    queries: np.ndarray | None = None

    def __len__(self):
        return len(self.labels)


def stream(seed: int, *key: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([seed, *key]))


class Client:
    """One simulated client. Holds its replicated frozen prompts across tasks."""

    def __init__(self, client_id: int, backbone: FrozenBackbone):
        self.client_id = client_id
        self.backbone = backbone
        self.frozen: tuple[np.ndarray, ...] = ()

    def frozen_checksums(self) -> list[str]:
        return [prompt_checksum(p) for p in self.frozen]

    def update(self, task: int, rnd: int, w: TunableParams, G, shard: Shard,
               hp: Hyperparams, flags: AblationFlags, candidates=()) -> ClientUpdate:
        local = w.copy()
        bank = PromptBank(local.prompt, self.frozen)
        if rnd == 1 and task > 1:
            bank, local.psi = advance_task(bank, local.psi, task, stream(hp.seed, 0x951, task))
            self.frozen = bank.frozen
        if bank.task_index != task:
            raise ValueError(f"client {self.client_id} bank at task {bank.task_index}, "
                             f"round targets task {task}")
        local.prompt = bank.current  # optimizer updates the bank's tunable prompt in place

        if len(shard) == 0:
            log.warning("client %d has an empty shard for task %d", self.client_id, task)
            return ClientUpdate(self.client_id, local,
                                LocalPrototypeSet(self.client_id, task, {}), 0)

        queries = shard.queries
        if queries is None and flags.use_fusion:
            queries = self.backbone.forward(shard.images)[0]
        params = local.arrays()
        opt = Adam(hp.lr, lr_overrides={"weight": hp.head_lr, "bias": hp.head_lr})
        rng = stream(hp.seed, 0xC11, self.client_id, task, rnd)
        history = []
        for _ in range(hp.local_epochs):
            order = rng.permutation(len(shard))
            ce = ur = 0.0
            for s in range(0, len(order), hp.batch_size):
                b = order[s:s + hp.batch_size]
                loss, grads = client_loss_and_grad(
                    shard.images[b], shard.labels[b], bank, local.psi, local.classifier,
                    self.backbone, G, hp.tau, candidates,
                    queries=None if queries is None else queries[b],
                    use_ur=flags.use_ur, use_fusion=flags.use_fusion,
                    reduction=hp.reduction)
                ce += loss.ce * len(b)
                ur += loss.ur * len(b)
                opt.step(params, grads.arrays())
            history.append(LossBreakdown(ce / len(shard), ur / len(shard)))

        feats = np.concatenate([
            extract_features(self.backbone, shard.images[s:s + _FEATURE_CHUNK], bank, local.psi,
                             None if queries is None else queries[s:s + _FEATURE_CHUNK],
                             flags.use_fusion)
            for s in range(0, len(shard), _FEATURE_CHUNK)])
        protos = local_prototypes(feats, shard.labels, self.client_id, task)
        return ClientUpdate(self.client_id, local, protos, len(shard), history)


# -- server side -------------------------------------------------------------

def aggregate(client_params: Sequence[TunableParams], shard_sizes: Sequence[int]) -> TunableParams:
    """Sample-count weighted mean of every tunable array, summed in client order."""
    if len(client_params) != len(shard_sizes) or not client_params:
        raise ValueError("need one shard size per client parameter set")
    total = float(sum(shard_sizes))
    if total <= 0:
        raise ValueError("all shard sizes are zero")
    ref = client_params[0].arrays()
    for p in client_params[1:]:
        for k, v in p.arrays().items():
            if v.shape != ref[k].shape:
                raise ValueError(f"shape mismatch for {k}: {v.shape} vs {ref[k].shape}")
    if len(client_params) == 1:
        return client_params[0].copy()
    out = {k: np.zeros_like(v) for k, v in ref.items()}
    for p, n in zip(client_params, shard_sizes):
        if n == 0:
            continue
        for k, v in p.arrays().items():
            out[k] += (n / total) * v
    return TunableParams.from_arrays(out)


def debias_prototypes(pool: PrototypePool, uploads: Sequence[LocalPrototypeSet],
                      use_pool: bool = True) -> list[tuple[int, np.ndarray]]:
    current = [(y, v) for up in sorted(uploads, key=lambda u: u.client)
               for y, v in up.prototypes.items()]
    return (pool.labelled() if use_pool else []) + current


def debias(classifier: Classifier, pool: PrototypePool, uploads: Sequence[LocalPrototypeSet],
           hp: Hyperparams, flags: AblationFlags = AblationFlags()) -> tuple[Classifier, list[float]]:
    """Full-batch Adam on the prototype cross-entropy; returns (classifier, losses)."""
    protos = debias_prototypes(pool, uploads, flags.use_pool)
    out = classifier.copy()
    if not protos:
        log.info("no prototypes available, skipping debias")
        return out, []
    params = {"weight": out.weight, "bias": out.bias}
    opt = Adam(hp.server_lr)
    losses = []
    for _ in range(hp.server_epochs):
        loss, dW, db = debias_loss_and_grad(out, protos, hp.reduction)
        losses.append(loss)
        opt.step(params, {"weight": dW, "bias": db})
    return out, losses


@dataclass
class FederationState:
    params: TunableParams
    frozen: tuple[np.ndarray, ...] = ()
    G: dict = field(default_factory=dict)
    pool: PrototypePool = field(default_factory=PrototypePool)
    uploads: list[LocalPrototypeSet] = field(default_factory=list)
    task: int = 1
    round: int = 0

    def bank(self) -> PromptBank:
        return PromptBank(self.params.prompt, self.frozen)

    def frozen_checksums(self) -> list[str]:
        return [prompt_checksum(p) for p in self.frozen]


def initial_state(dim: int, num_classes: int, num_layers: int, hp: Hyperparams) -> FederationState:
    rng = stream(hp.seed, 0x1417)
    bank = PromptBank.initial(num_layers, hp.prompt_length, dim, rng)
    params = TunableParams(init_psi(dim, rng), bank.current, Classifier.zeros(dim, num_classes))
    return FederationState(params)


@dataclass
class RoundRecord:
    task: int
    round: int
    ce: float
    ur: float
    debias_loss: float | None
    upload_floats: list[int]
    download_floats: int
    num_global_prototypes: int


def run_round(state: FederationState, clients: Sequence[Client], shards: Sequence[Shard],
              task: int, rnd: int, hp: Hyperparams, flags: AblationFlags,
              candidates=()) -> tuple[FederationState, RoundRecord]:
    if rnd == 1 and task > 1:
        if len(state.frozen) != task - 2:
            raise ValueError("server frozen prompts out of step with the task counter")
        frozen = state.frozen + (_readonly(state.params.prompt),)
    else:
        frozen = state.frozen
    w, G = state.params, state.G
    download = w.num_floats() + sum(v.size for v in G.values())

    def work(k):
        return clients[k].update(task, rnd, w, G, shards[k], hp, flags, candidates)

    if hp.parallel and len(clients) > 1:
        with ThreadPoolExecutor(max_workers=len(clients)) as ex:
            updates = list(ex.map(work, range(len(clients))))
    else:
        updates = [work(k) for k in range(len(clients))]

    new_params = aggregate([u.params for u in updates], [u.num_samples for u in updates])
    uploads = [u.prototypes for u in updates]
    debias_losses: list[float] = []
    if flags.use_debias:
        new_params.classifier, debias_losses = debias(new_params.classifier, state.pool,
                                                      uploads, hp, flags)
    new_G = global_prototypes(uploads)

    n = sum(u.num_samples for u in updates)
    last = [(u.epoch_losses[-1], u.num_samples) for u in updates if u.epoch_losses]
    ce = sum(l.ce * c for l, c in last) / n if last else float("nan")
    ur = sum(l.ur * c for l, c in last) / n if last else float("nan")
    record = RoundRecord(task, rnd, ce, ur, debias_losses[-1] if debias_losses else None,
                         [u.num_floats() for u in updates], download, len(new_G))
    new_state = replace(state, params=new_params, frozen=frozen, G=new_G, uploads=uploads,
                        task=task, round=rnd)
    return new_state, record


def _readonly(a):
    a = np.array(a, copy=True)
    a.setflags(write=False)
    return a


def evaluate_model(state: FederationState, backbone: FrozenBackbone, images, queries,
                   flags: AblationFlags) -> np.ndarray:
    """Logits of the global model (aggregated, debiased) on a batch of images."""
    bank = state.bank()
    out = []
    for s in range(0, len(images), _FEATURE_CHUNK):
        feats = extract_features(backbone, images[s:s + _FEATURE_CHUNK], bank, state.params.psi,
                                 None if queries is None else queries[s:s + _FEATURE_CHUNK],
                                 flags.use_fusion)
        out.append(state.params.classifier.logits(feats))
    return np.concatenate(out)


def hyperparams_dict(hp: Hyperparams) -> dict:
    return asdict(hp)
