"""Federation runtime: partitioning, simulated clients and communication rounds.

One round broadcasts the global adapters, lets every client train locally,
aggregates with the configured strategy, optionally adds privacy noise, and
evaluates. Clients may run on a thread pool; every random stream is derived
from the root seed and the (client, round) pair, so the outcome does not
depend on scheduling.
"""
from __future__ import annotations

import logging
import math
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from . import aggregation as agg
from .config import ExperimentConfig
from .linalg import frobenius_norm
from .lora import LoraAdapter, delta_w
from .privacy import dp_per_adapter, dp_post_aggregation, noise_matrix
from .tasks import (AdaptedModel, LabeledDataset, TrainingConfig, _gradients, _unpack,
                    forward, load_dataset, make_model, make_synthetic)

log = logging.getLogger(__name__)

# Stream identifiers for seed derivation.
_DATA, _EVAL, _MODEL, _PARTITION, _CLIENT, _NOISE = range(1, 7)


def subseed(root: int, *keys: int) -> int:
    ss = np.random.SeedSequence(root, spawn_key=tuple(keys))
    return int(ss.generate_state(1, np.uint64)[0])


class RoundAborted(RuntimeError):
    """A client failed; the round is discarded without partial aggregation."""


@dataclass(frozen=True)
class PartitionPlan:
    kind: str = "iid"
    num_clients: int = 2
    label_weights: np.ndarray | None = None
    seed: int = 0

    def __post_init__(self):
        if self.kind not in ("iid", "label-skew"):
            raise ValueError(f"unknown partition kind {self.kind!r}")
        if self.num_clients < 1:
            raise ValueError("need at least one client")
        if self.kind == "label-skew":
            if self.label_weights is None:
                raise ValueError("label-skew partition needs label_weights")
            w = np.asarray(self.label_weights, dtype=float)
            if w.ndim != 2 or w.shape[1] != self.num_clients:
                raise ValueError(f"label_weights must be labels x {self.num_clients}, got {w.shape}")
            if np.any(w < 0) or np.any(w > 1):
                raise ValueError("label_weights entries must lie in [0, 1]")
            if np.any(np.abs(w.sum(axis=1) - 1.0) > 1e-9):
                raise ValueError("each label_weights row must sum to 1")
            object.__setattr__(self, "label_weights", w)


def largest_remainder(total: int, fractions: np.ndarray) -> np.ndarray:
    """Integer counts summing to ``total`` in proportion to ``fractions``.

    Leftover items go to the largest fractional parts; ties favour the lower
    index.
    """
    raw = total * np.asarray(fractions, dtype=float)
    counts = np.floor(raw).astype(int)
    short = total - counts.sum()
    order = np.argsort(-(raw - counts), kind="stable")
    counts[order[:short]] += 1
    return counts


def partition(dataset: LabeledDataset, plan: PartitionPlan) -> list[np.ndarray]:
    """Split sample indices of ``dataset`` into one disjoint shard per client."""
    n = len(dataset)
    if n == 0:
        raise ValueError("cannot partition an empty dataset")
    if plan.num_clients > n:
        raise ValueError(f"{plan.num_clients} clients but only {n} samples")
    rng = np.random.default_rng(plan.seed)
    if plan.kind == "iid":
        return [np.sort(s) for s in np.array_split(rng.permutation(n), plan.num_clients)]

    w = plan.label_weights
    if w.shape[0] != dataset.class_count:
        raise ValueError(f"label_weights has {w.shape[0]} rows for {dataset.class_count} labels")
    shards: list[list[np.ndarray]] = [[] for _ in range(plan.num_clients)]
    for label in range(dataset.class_count):
        idx = rng.permutation(np.flatnonzero(dataset.labels == label))
        bounds = np.concatenate([[0], np.cumsum(largest_remainder(len(idx), w[label]))])
        for k in range(plan.num_clients):
            shards[k].append(idx[bounds[k]:bounds[k + 1]])
    out = [np.sort(np.concatenate(parts)) for parts in shards]
    empty = [k for k, s in enumerate(out) if len(s) == 0]
    if empty:
        raise ValueError(f"client {empty[0]} received no samples")
    return out


@dataclass(frozen=True)
class ClientState:
    id: int
    shard: LabeledDataset
    model: AdaptedModel
    seed: int

    def __post_init__(self):
        if len(self.shard) == 0:
            raise ValueError(f"client {self.id} has an empty shard")

    @property
    def sample_count(self) -> int:
        return len(self.shard)

    @property
    def adapters(self) -> tuple[LoraAdapter, ...]:
        return self.model.adapters

    def round_rng(self, round_index: int) -> np.random.Generator:
        return np.random.default_rng(np.random.SeedSequence(self.seed, spawn_key=(round_index,)))


def local_train(client: ClientState, global_adapters: Sequence[LoraAdapter], config: TrainingConfig,
                *, freeze_a: bool = False, round_index: int = 0) -> list[agg.ClientUpdate]:
    """Minibatch SGD with L2 weight decay on the adapter factors only.

    Each step applies ``p <- p - lr * (grad + weight_decay * p)`` to ``b`` and,
    unless ``freeze_a``, to ``a``. Returns one update per adapted layer, weighted
    by the client's sample count.
    """
    model = client.model.with_adapters(global_adapters)
    w0s, bs, as_, scales, head = _unpack(model)
    bs = [b.copy() for b in bs]
    as_ = [a.copy() for a in as_]
    lr, wd = config.learning_rate, config.weight_decay
    x, y = client.shard.inputs, client.shard.labels
    n = len(y)
    rng = client.round_rng(round_index)
    steps = math.ceil(n / config.batch_size)
    if config.max_steps_per_epoch is not None:
        steps = min(steps, config.max_steps_per_epoch)

    for _ in range(config.local_epochs):
        order = rng.permutation(n)
        for s in range(steps):
            idx = order[s * config.batch_size:(s + 1) * config.batch_size]
            grads = _gradients(w0s, bs, as_, scales, head, x[idx], y[idx])
            for l, (gb, ga) in enumerate(grads):
                bs[l] -= lr * (gb + wd * bs[l])
                if not freeze_a:
                    as_[l] -= lr * (ga + wd * as_[l])

    return [agg.ClientUpdate(LoraAdapter(b, a, g.scaling), float(n))
            for b, a, g in zip(bs, as_, global_adapters)]


def evaluate(model: AdaptedModel, eval_split: LabeledDataset) -> float:
    """Fraction of samples whose argmax logit is the true label."""
    if len(eval_split) == 0:
        raise ValueError("evaluation split is empty")
    pred = np.argmax(forward(model, eval_split.inputs), axis=1)
    return float(np.mean(pred == eval_split.labels))


@dataclass(frozen=True)
class RoundRecord:
    """Metrics of one communication round.

    ``per_client_eval_accuracy`` is measured on each client's model after local
    training and before aggregation; ``global_eval_accuracy`` after aggregation.
    ``aggregation_err_norm`` is the Frobenius distance between the
    redistributed increment and the exact weighted mean of the client
    increments, pooled over layers (it includes any injected noise).
    """

    round_index: int
    strategy: str
    per_client_eval_accuracy: tuple[float, ...]
    global_eval_accuracy: float
    aggregation_err_norm: float
    wall_millis: float = 0.0


def _load_data(config: ExperimentConfig) -> tuple[LabeledDataset, LabeledDataset]:
    ds = config.dataset
    if ds.path is not None:
        train = load_dataset(ds.path, ds.classes)
        if ds.eval_path is None:
            raise ValueError("dataset.eval_path is required with dataset.path")
        return train, load_dataset(ds.eval_path, ds.classes)
    train = make_synthetic(ds.classes, ds.per_class, ds.dim, ds.separation, subseed(config.seed, _DATA))
    evals = make_synthetic(ds.classes, ds.eval_per_class, ds.dim, ds.separation, subseed(config.seed, _EVAL))
    return train, evals


class Federation:
    """Orchestrator state for one experiment.

    The orchestrator is the only writer of ``global_adapters``; clients get
    read-only snapshots.
    """

    def __init__(self, config: ExperimentConfig):
        self.config = config
        self.train_data, self.eval_data = _load_data(config)
        dim = self.train_data.dim
        self.base = make_model(dim, self.train_data.class_count, config.rank,
                               subseed(config.seed, _MODEL), scaling=config.scaling)
        plan = PartitionPlan(config.partition, config.clients,
                             None if config.label_weights is None else np.array(config.label_weights),
                             subseed(config.seed, _PARTITION))
        self.shards = partition(self.train_data, plan)
        self.clients = [
            ClientState(k, self.train_data.subset(idx), self.base, subseed(config.seed, _CLIENT, k))
            for k, idx in enumerate(self.shards)
        ]
        self.global_adapters: tuple[LoraAdapter, ...] = self.base.adapters
        # Freeze-A: the initial a factors are the shared frozen ones for the whole run.
        self.frozen_a = tuple(ad.a for ad in self.global_adapters)
        self.initial_eval_accuracy = evaluate(self.base, self.eval_data)
        self.records: list[RoundRecord] = []
        self.traces: list[list[agg.RoundTrace]] = []

    def _client_round(self, client: ClientState, round_index: int):
        cfg = self.config
        try:
            updates = local_train(client, self.global_adapters, cfg.training,
                                  freeze_a=cfg.strategy == "ffa", round_index=round_index)
            acc = evaluate(client.model.with_adapters([u.adapter for u in updates]), self.eval_data)
        except Exception as exc:
            raise RoundAborted(f"round {round_index}: client {client.id} failed: {exc}") from exc
        return updates, acc

    def _aggregate_layer(self, layer: int, updates: list[agg.ClientUpdate], round_index: int) -> LoraAdapter:
        cfg = self.config
        noise = cfg.noise.derive(round_index, layer) if cfg.noise else None
        if cfg.strategy == "fedavg":
            adapter = agg.aggregate_fedavg(updates).adapter
            if noise:
                adapter, _ = dp_per_adapter(adapter, noise)
        elif cfg.strategy == "ffa":
            adapter = agg.aggregate_ffa(updates, self.frozen_a[layer]).adapter
            if noise:
                adapter = adapter.replace(b=adapter.b + noise_matrix(*adapter.b.shape, noise))
        elif noise:
            adapter = dp_post_aggregation(agg.exact_delta(updates), cfg.rank, noise, adapter_scaling(updates)).adapter
        else:
            adapter = agg.aggregate_fra(updates, cfg.rank).adapter
        return adapter

    def step(self, round_index: int) -> RoundRecord:
        cfg = self.config
        start = time.perf_counter()
        if cfg.threads > 1:
            with ThreadPoolExecutor(max_workers=cfg.threads) as pool:
                results = list(pool.map(lambda c: self._client_round(c, round_index), self.clients))
        else:
            results = [self._client_round(c, round_index) for c in self.clients]

        per_layer = list(zip(*(updates for updates, _ in results)))
        new_adapters, err_sq, traces = [], 0.0, []
        for layer, updates in enumerate(per_layer):
            updates = list(updates)
            adapter = self._aggregate_layer(layer, updates, round_index)
            err_sq += frobenius_norm(delta_w(adapter) - agg.exact_delta(updates)) ** 2
            new_adapters.append(adapter)
            if cfg.trace:
                traces.append(agg.round_trace(updates, cfg.rank))

        self.global_adapters = tuple(new_adapters)
        global_model = self.base.with_adapters(self.global_adapters)
        record = RoundRecord(
            round_index=round_index,
            strategy=cfg.strategy,
            per_client_eval_accuracy=tuple(acc for _, acc in results),
            global_eval_accuracy=evaluate(global_model, self.eval_data),
            aggregation_err_norm=math.sqrt(err_sq),
            wall_millis=(time.perf_counter() - start) * 1000.0,
        )
        self.records.append(record)
        if cfg.trace:
            self.traces.append(traces)
        log.debug("round %d %s: global acc %.4f err %.3e", round_index, cfg.strategy,
                  record.global_eval_accuracy, record.aggregation_err_norm)
        return record

    def run(self) -> list[RoundRecord]:
        for r in range(1, self.config.rounds + 1):
            self.step(r)
        return list(self.records)


def adapter_scaling(updates: Sequence[agg.ClientUpdate]) -> float:
    return updates[0].adapter.scaling


def run_federation(config: ExperimentConfig) -> list[RoundRecord]:
    return Federation(config).run()


def write_traces(prefix: str | Path, traces: Sequence[Sequence[agg.RoundTrace]]) -> list[Path]:
    """One trace file per round and layer: ``<prefix>_trace_r<round>_l<layer>.txt``."""
    paths = []
    for r, layers in enumerate(traces, 1):
        for l, trace in enumerate(layers):
            path = Path(f"{prefix}_trace_r{r:03d}_l{l}.txt")
            agg.write_round_trace(path, trace)
            paths.append(path)
    return paths
