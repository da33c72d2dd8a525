"""End-to-end driver: data, federation loop over tasks, evaluation and artifacts."""

from __future__ import annotations

import csv
import json
import logging
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import __version__
from .backbone import build_frozen_backbone
from .config import ExperimentConfig
from .data import generate_synthetic_dataset, partition_plan, split_tasks, write_partition_csv
from .federation import (Client, FederationState, RoundRecord, Shard, evaluate_model,
                         initial_state, run_round)
from .metrics import (AccuracyMatrix, CostInputs, avg_accuracy, avg_forgetting, comm_cost,
                      evaluate_task, extra_storage, tunable_param_count)

log = logging.getLogger(__name__)


@dataclass
class RunArtifacts:
    config: ExperimentConfig
    matrix: AccuracyMatrix
    summary: dict
    rounds: list[RoundRecord]
    state: FederationState
    frozen_checks: list[dict] = field(default_factory=list)
    tasks: list[list[int]] = field(default_factory=list)
    backbone_checksum: str = ""


def cost_inputs(cfg: ExperimentConfig) -> CostInputs:
    return CostInputs(D=cfg.backbone.embed_dim, N_all=cfg.data.num_classes, T=cfg.hp.num_tasks,
                      L_p=cfg.hp.prompt_length, M=cfg.backbone.num_prompt_layers,
                      K=cfg.hp.num_clients)


def run_experiment(cfg: ExperimentConfig, out_dir=None) -> RunArtifacts:
    t0 = time.perf_counter()
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        (out / "checkpoints").mkdir(parents=True, exist_ok=True)
    try:
        art = _run(cfg, out)
    except Exception as exc:
        if out is not None:
            _write_manifest(out, cfg, status=f"failed: {exc!r}",
                            wall=time.perf_counter() - t0)
        raise
    if out is not None:
        _write_outputs(out, art, wall=time.perf_counter() - t0)
    return art


def _run(cfg: ExperimentConfig, out: Path | None) -> RunArtifacts:
    hp, flags, bcfg = cfg.hp, cfg.flags, cfg.backbone
    backbone = build_frozen_backbone(bcfg)
    checksum = backbone.checksum()
    ds = generate_synthetic_dataset(cfg.data.num_classes, cfg.data.train_per_class,
                                    cfg.data.test_per_class, bcfg.image_shape, cfg.data.seed)
    tasks = split_tasks(cfg.data.num_classes, hp.num_tasks, hp.seed)
    plan = partition_plan(ds, tasks, hp.num_clients, cfg.data, hp.seed)
    if out is not None:
        write_partition_csv(out / "partition.csv", plan, ds.train_y)

    # the backbone is frozen, so prompt-free queries are fixed per sample
    train_q = backbone.forward(ds.train_x)[0]
    test_q = backbone.forward(ds.test_x)[0]

    state = initial_state(bcfg.embed_dim, cfg.data.num_classes, bcfg.num_prompt_layers, hp)
    clients = [Client(k, backbone) for k in range(hp.num_clients)]
    matrix = AccuracyMatrix(hp.num_tasks)
    rounds: list[RoundRecord] = []
    frozen_checks = []
    seen: list[int] = []
    for t, classes in enumerate(tasks, start=1):
        seen += classes
        candidates = classes if hp.ur_candidates == "task" else list(seen)
        shards = [Shard(ds.train_x[idx], ds.train_y[idx], train_q[idx]) for idx in plan[t - 1]]
        for r in range(1, hp.rounds_per_task + 1):
            state, rec = run_round(state, clients, shards, t, r, hp, flags, candidates)
            rounds.append(rec)
            log.info("task %d round %d ce=%.4f ur=%.4f", t, r, rec.ce, rec.ur)
            frozen_checks.append({"task": t, "round": r,
                                  "server": state.frozen_checksums(),
                                  "clients": [c.frozen_checksums() for c in clients]})
        state.pool.merge(t, state.uploads)
        for i in range(1, t + 1):
            mask = np.isin(ds.test_y, tasks[i - 1])
            logits = evaluate_model(state, backbone, ds.test_x[mask], test_q[mask], flags)
            matrix.set(i, t, evaluate_task(logits, ds.test_y[mask], seen))
        if out is not None:
            _write_checkpoint(out / "checkpoints" / f"task_{t:03d}.npz", state)

    if backbone.checksum() != checksum:
        raise RuntimeError("backbone weights changed during the run")
    summary = _summary(cfg, matrix, rounds, checksum)
    return RunArtifacts(cfg, matrix, summary, rounds, state, frozen_checks, tasks, checksum)


def _summary(cfg, matrix, rounds, checksum) -> dict:
    A, A_bar = avg_accuracy(matrix)
    F_bar, degenerate = avg_forgetting(matrix)
    c = cost_inputs(cfg)
    return {
        "seed": cfg.hp.seed,
        "A_bar": A_bar,
        "A_T": A[-1],
        "A_t": A,
        "F_bar": F_bar,
        "F_bar_degenerate": degenerate,
        "COMM": comm_cost(c),
        "ESTG": extra_storage(c),
        "PARAM": tunable_param_count(c),
        "COMM_live_final_round": max(rounds[-1].upload_floats),
        "backbone_checksum": checksum,
    }


def _write_checkpoint(path: Path, state: FederationState) -> None:
    arrays = {f"w_{k}": np.asarray(v, dtype="<f8") for k, v in state.params.arrays().items()}
    for i, p in enumerate(state.frozen, start=1):
        arrays[f"frozen_{i:03d}"] = np.asarray(p, dtype="<f8")
    for y, v in state.G.items():
        arrays[f"global_{y}"] = np.asarray(v, dtype="<f8")
    for e in state.pool.entries():
        for y, v in e.prototypes.items():
            arrays[f"pool_t{e.task}_k{e.client}_c{y}"] = np.asarray(v, dtype="<f8")
    np.savez(path, **arrays)


def _write_manifest(out: Path, cfg: ExperimentConfig, status: str, wall: float,
                    extra: dict | None = None) -> None:
    manifest = {"status": status, "version": __version__, "config": cfg.to_dict(),
                "seed": cfg.hp.seed, "wall_time_s": wall}
    manifest.update(extra or {})
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2) + "\n")


def _write_outputs(out: Path, art: RunArtifacts, wall: float) -> None:
    with open(out / "metrics.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["round", "task", "task_round", "ce", "ur", "debias_loss",
                    "upload_floats_total", "upload_floats_max", "download_floats",
                    "global_prototypes"])
        for n, r in enumerate(art.rounds, start=1):
            w.writerow([n, r.task, r.round, repr(r.ce), repr(r.ur),
                        "" if r.debias_loss is None else repr(r.debias_loss),
                        sum(r.upload_floats), max(r.upload_floats), r.download_floats,
                        r.num_global_prototypes])
    art.matrix.write_csv(out / "accuracy_matrix.csv")
    (out / "summary.json").write_text(json.dumps(art.summary, indent=2, sort_keys=True) + "\n")
    _write_manifest(out, art.config, status="ok", wall=wall, extra={
        "backbone_checksum": art.backbone_checksum,
        "tasks": art.tasks,
        "frozen_prompt_checksums": art.frozen_checks[-1] if art.frozen_checks else {},
        "pool_entries": len(art.state.pool),
        "pool_floats": art.state.pool.num_floats(),
    })
