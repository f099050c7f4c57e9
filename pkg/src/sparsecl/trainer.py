"""The continual training loop and result persistence."""
from __future__ import annotations

import csv
import datetime as _dt
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import _accel
from .config import TrainConfig
from .ddr import MisclassCounter, RemovalPolicy, record_misclassifications, remove_easiest, removal_quota
from .dgm import apply_gradient_mask, build_gradient_mask
from .errors import SparseCLError
from .importance import compute_cgi, compute_cwi
from .masks import export_csr, mask_for_model, sparsity
from .metrics import (CLASS_IL, TASK_IL, FlopsLedger, MemoryReport, accumulate_training_flops,
                      activation_count, evaluate)
from .nn import build_cnn, build_mlp, resolve_dtype, save_checkpoint, sgd_step
from .rehearsal import (RehearsalBuffer, derpp_loss, er_loss, insert_batch, plain_loss,
                        sample_indices)
from .tdm import TdmSchedule, tdm_step

log = logging.getLogger(__name__)

STAGE_FIELDS = ["task", "epoch", "event", "sparsity", "removed_count", "grown_count",
                "gradient_sparsity", "active_examples"]
REMOVAL_FIELDS = ["task", "stage", "quota", "remaining_count"]


def build_model(cfg: TrainConfig, stream, seed):
    dtype = resolve_dtype(cfg.precision)
    shape = stream.input_shape
    if cfg.arch == "cnn":
        if len(shape) != 3:
            raise SparseCLError(f"cnn needs [C, H, W] inputs, got {shape}")
        model = build_cnn(shape, stream.class_count, dtype=dtype, seed=seed)
    else:
        model = build_mlp(int(np.prod(shape)), stream.class_count, hidden=(cfg.hidden,),
                          dtype=dtype, seed=seed, input_shape=shape)
    model.task_class_ranges = list(stream.class_ranges)
    model._check_ranges()
    return model


@dataclass
class RunReport:
    metrics: dict
    stages: list = field(default_factory=list)
    removals: list = field(default_factory=list)
    model: object = None
    weight_mask: object = None
    grad_mask: object = None
    buffer: object = None

    def to_json(self) -> str:
        return json.dumps(self.metrics, sort_keys=True, indent=2)


def _chunks(ids, size):
    return [ids[i:i + size] for i in range(0, len(ids), size)]


def _seed_int(ss):
    return int(ss.generate_state(1)[0])


class _FrozenCheck:
    """Tracks weights inside the weight mask but outside the gradient mask."""

    def __init__(self):
        self.snapshot = None
        self.violations = 0

    def start(self, model, wmask, gmask):
        self.snapshot = [(layer.weight[w & ~g].copy(), w & ~g)
                         for layer, w, g in zip(model.maskable_layers, wmask.layers, gmask.layers)]

    def finish(self, model):
        if self.snapshot is None:
            return
        for layer, (vals, sel) in zip(model.maskable_layers, self.snapshot):
            self.violations += int(np.count_nonzero(layer.weight[sel] != vals))
        self.snapshot = None


def run_experiment(cfg: TrainConfig, stream, callback=None) -> RunReport:
    """Train on every task of ``stream`` in order and evaluate at the end.

    ``callback(name, info)`` is invoked at epoch starts (``"epoch"``) and
    after every optimizer step (``"step"``); tests use it to observe
    invariants without the loop knowing about them.
    """
    cfg = cfg.resolved()
    ss = np.random.SeedSequence(cfg.seed)
    init_ss, mask_ss, data_ss, buf_ss, cwi_ss = ss.spawn(5)
    mask_rng = np.random.default_rng(mask_ss)
    data_rng = np.random.default_rng(data_ss)
    buf_rng = np.random.default_rng(buf_ss)
    cwi_rng = np.random.default_rng(cwi_ss)

    model = build_model(cfg, stream, _seed_int(init_ss))
    use_mask = cfg.s > 0 or cfg.q > 0
    wmask = mask_for_model(model, cfg.s, seed=_seed_int(mask_ss)) if use_mask else None
    if wmask is not None:
        wmask.apply(model)
    use_tdm = cfg.sparse_method
    use_dgm = wmask is not None and cfg.q > 0
    schedule = TdmSchedule(cfg.s, cfg.delta_k, cfg.p_intra, cfg.p_inter, cfg.alpha, cfg.beta) \
        if use_tdm else None
    buffer = RehearsalBuffer(cfg.buffer, stream.input_shape, stream.class_count, model.dtype) \
        if cfg.replay else None

    ledger = FlopsLedger()
    stages, removals = [], []
    events = {"inter_expand": 0, "inter_shrink": 0, "intra": 0, "ddr_removal": 0,
              "dgm_refresh": 0}
    inv = {"pruned_weight_violations": 0, "gradient_mask_nesting_violations": 0,
           "frozen_weight_violations": 0, "buffer_occupancy_violations": 0, "steps": 0}
    frozen = _FrozenCheck()
    gmask = None
    history = []

    for t, task in enumerate(stream.tasks, start=1):
        lo, hi = task.class_range
        seen = (0, hi)
        n_t = task.n_train
        active = np.arange(n_t)
        counter = MisclassCounter(n_t)
        policy = RemovalPolicy(cfg.rho, cfg.cutoff, n_t)

        def current_sample():
            perm = cwi_rng.permutation(active)
            return [(task.train_x[b], task.train_y[b])
                    for b in _chunks(perm, cfg.batch_size)[: cfg.cwi_batches]]

        def buffer_data():
            if buffer is None or len(buffer) == 0:
                return None
            x, y, _ = buffer.data()
            return x, y

        def scores(kind):
            fn = compute_cwi if kind == "cwi" else compute_cgi
            return fn(model, current_sample(), task.class_range, buffer_data(), cfg.alpha,
                      cfg.beta, seen)

        try:
            for e in range(1, cfg.epochs + 1):
                event = None
                refresh = use_dgm and (e == 1 or e % cfg.delta_k == 0)
                if refresh:
                    frozen.finish(model)
                if use_tdm:
                    event = tdm_step(t, e, wmask, schedule, mask_rng, lambda: scores("cwi"), model)
                    wmask = event.mask
                    for k in event.kind.split("+"):
                        if k in events:
                            events[k] += 1
                if refresh:
                    gmask = build_gradient_mask(wmask, scores("cgi"), cfg.q)
                    frozen.start(model, wmask, gmask)
                    events["dgm_refresh"] += 1
                if callback:
                    callback("epoch", {"task": t, "epoch": e, "mask": wmask, "gmask": gmask,
                                       "model": model, "event": event})
                stages.append({
                    "task": t, "epoch": e, "event": event.kind if event else "none",
                    "sparsity": sparsity(wmask) if wmask is not None else 0.0,
                    "removed_count": event.removed_count if event else 0,
                    "grown_count": event.grown_count if event else 0,
                    "gradient_sparsity": (1 - gmask.active_count / gmask.size) if gmask else
                    (sparsity(wmask) if wmask is not None else 0.0),
                    "active_examples": int(active.size),
                })

                for ids in _chunks(data_rng.permutation(active), cfg.batch_size):
                    x, y = task.train_x[ids], task.train_y[ids]
                    rl = _replay_loss(cfg, model, buffer, buf_rng, (x, y), task.class_range, seen)
                    grads = rl.gradients(model)
                    if gmask is not None:
                        grads = apply_gradient_mask(grads, gmask, model.maskable_indices)
                    sgd_step(model, grads, cfg.lr, wmask)
                    inv["steps"] += 1
                    if wmask is not None:
                        inv["pruned_weight_violations"] += wmask.violations(model)
                    if gmask is not None and not gmask.nested_in(wmask):
                        inv["gradient_mask_nesting_violations"] += 1

                    zc = rl.current_logits
                    pred = np.argmax(zc[:, lo:hi + 1], axis=1) + lo
                    record_misclassifications(counter, pred, y, ids)
                    if buffer is not None:
                        insert_batch(buffer, x, y, zc, t, buf_rng)
                        if len(buffer) != min(buffer.seen_count, buffer.capacity):
                            inv["buffer_occupancy_violations"] += 1
                    accumulate_training_flops(ledger, model, wmask, rl.logits.shape[0],
                                              gmask if use_dgm else None)
                    if callback:
                        callback("step", {"task": t, "epoch": e, "mask": wmask, "gmask": gmask,
                                          "model": model})

                if e % cfg.delta_k == 0:
                    stage = e // cfg.delta_k
                    quota = 0
                    if cfg.rho > 0:
                        if cfg.removal == "ddr":
                            quota = removal_quota(policy, stage)
                        elif stage == cfg.cutoff:
                            quota = policy.cumulative(cfg.cutoff)
                    if quota:
                        active, _ = remove_easiest(active, counter, quota)
                        events["ddr_removal"] += 1
                    if cfg.rho > 0:
                        removals.append({"task": t, "stage": stage, "quota": quota,
                                         "remaining_count": int(active.size)})
                    if cfg.counter_reset == "stage":
                        counter.reset()
        except SparseCLError as exc:
            exc.context.update(task=t, epoch=e)
            raise
        history.append(evaluate(model, stream.tasks, CLASS_IL, seen_tasks=t).average)
    frozen.finish(model)
    inv["frozen_weight_violations"] = frozen.violations

    cil = evaluate(model, stream.tasks, CLASS_IL)
    til = evaluate(model, stream.tasks, TASK_IL)
    mem = MemoryReport(cfg.batch_size, activation_count(model), model.n_maskable(), cfg.s,
                       cfg.q if use_dgm else 0.0, model.dtype.itemsize)
    metrics = {
        "timestamp": _dt.datetime.now(_dt.timezone.utc).isoformat(),
        "seed": cfg.seed,
        "config": cfg.to_dict(),
        "data": {**stream.description, "digest": stream.digest()},
        "backend": _accel.BACKEND,
        "class_il_avg": cil.average,
        "task_il_avg": til.average,
        "per_task": {"class_il": cil.per_task, "task_il": til.per_task},
        "class_il_after_task": history,
        "train_flops_forward": ledger.forward,
        "train_flops_backward": ledger.backward,
        "train_flops_total": ledger.total,
        "train_examples": ledger.examples,
        "memory_footprint_bytes": mem.footprint_bytes,
        "memory": mem.to_dict(),
        "final_sparsity": sparsity(wmask) if wmask is not None else 0.0,
        "final_gradient_sparsity": (1 - gmask.active_count / gmask.size) if gmask else None,
        "events": events,
        "invariants": inv,
    }
    return RunReport(metrics, stages, removals, model, wmask, gmask, buffer)


def _replay_loss(cfg, model, buffer, rng, current, task_range, seen):
    if cfg.replay is None:
        return plain_loss(model, current, task_range, seen)
    if buffer is None or len(buffer) == 0:
        return er_loss(model, current, None, task_range, seen)
    n = cfg.batch_size
    if cfg.replay == "er":
        bx, by, _ = buffer.data(sample_indices(buffer, n, rng))
        return er_loss(model, current, (bx, by), task_range, seen)
    a = buffer.data(sample_indices(buffer, n, rng))
    b = buffer.data(sample_indices(buffer, n, rng))
    return derpp_loss(model, current, a, b, cfg.coeff_mse, cfg.coeff_ce, task_range, seen)


def _write_csv(path, rows, fields):
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=fields, lineterminator="\n")
        w.writeheader()
        for row in rows:
            w.writerow({k: row.get(k, "") for k in fields})


def emit_report(report: RunReport, out_dir, buffer_dump=False) -> dict:
    """Write report.json, stages.csv, removal.csv, model.npz and csr.json."""
    out = Path(out_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
        paths = {"report": out / "report.json", "stages": out / "stages.csv",
                 "removal": out / "removal.csv", "checkpoint": out / "model.npz",
                 "csr": out / "csr.json"}
        paths["report"].write_text(report.to_json() + "\n")
        _write_csv(paths["stages"], report.stages, STAGE_FIELDS)
        _write_csv(paths["removal"], report.removals, REMOVAL_FIELDS)
        if report.model is not None:
            save_checkpoint(report.model, paths["checkpoint"],
                            extra={"data": report.metrics.get("data", {}),
                                   "config": report.metrics.get("config", {})})
            mask = report.weight_mask
            if mask is None:
                mask = mask_for_model(report.model, 0.0)
            export_csr(report.model, mask, paths["csr"])
        if buffer_dump and report.buffer is not None:
            paths["buffer"] = out / "buffer.jsonl"
            report.buffer.to_jsonl(paths["buffer"])
    except OSError as exc:
        raise SparseCLError(f"failed writing report to {out}: {exc}", path=str(out)) from exc
    return {k: str(v) for k, v in paths.items()}
