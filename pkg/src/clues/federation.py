"""The two-step collaborative workflow: score and select locally, then retrain and merge.

Clients and the server only interact through :class:`Message` objects
collected in a :class:`MessageLog`. Everything a client ships is an adapter
tensor, a slice of optimizer moments, a scalar or a score of *public*
(anchor) data; :func:`audit_messages` checks that no private sample bytes
ever appear in the log.

Two modes are supported:

* ``merge-once``: each client trains on its own data, scores it against its own
  checkpoints, and the retrained adapters are merged a single time.
* ``federated``: the global adapter is trained over ``rounds`` aggregation
  rounds; scoring uses the post-aggregation global checkpoints and retraining
  is again ``rounds`` rounds of local steps followed by a merge.
"""
from __future__ import annotations

import os
import struct
import threading
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from typing import Callable, Mapping, Sequence

import numpy as np

from .datagen import DatasetBundle
from .errors import ConfigError, StageError
from .merging import MergeMethod, merge
from .model import LoraAdapter, Sample, init_adapter, labels_sealed, mean_loss, trainable_layout
from .optim import (ADAMW, SGD, Checkpoint, OptimizerKind, OptimState, Trajectory, TrainingRunConfig,
                    train)
from .scoring import (DataInfConfig, QualityScore, ScoringConfig, datainf_scores, loss_scores,
                      random_scores, resolve_layer, score_dataset)
from .selection import (DEFAULT_FALLBACK_RATIO, AnchorScoreTable, GlobalThreshold, anchor_scores,
                        global_threshold, select_or_fallback)

MERGE_ONCE = "merge-once"
FEDERATED = "federated"
MODES = (MERGE_ONCE, FEDERATED)

SERVER = "server"
# Message kinds allowed on each side of the boundary.
UPLINK_KINDS = frozenset({"checkpoint", "local_update", "anchor_scores", "selection_size", "adapter"})
DOWNLINK_KINDS = frozenset({"global_checkpoint", "threshold", "global_adapter"})

_T_INIT, _T_TRAIN, _T_SAMPLE, _T_RANDOM = 20, 21, 22, 23
_STAGE1, _STAGE5 = 1, 5


def thread_count(requested: int | None = None) -> int:
    """``requested`` if given, else ``$CLUES_THREADS``, else 1."""
    if requested is None:
        env = os.environ.get("CLUES_THREADS", "").strip()
        requested = int(env) if env else 1
    if requested < 1:
        raise ConfigError("thread count must be >= 1")
    return requested


def _pmap(fn: Callable, items: Sequence, threads: int) -> list:
    """Order-preserving map; results are gathered in input order whatever the thread count."""
    if threads <= 1 or len(items) <= 1:
        return [fn(x) for x in items]
    with ThreadPoolExecutor(max_workers=min(threads, len(items))) as ex:
        return list(ex.map(fn, items))


# --- configuration --------------------------------------------------------

@dataclass(frozen=True)
class WorkflowConfig:
    """Workflow knobs.

    ``local_steps`` None means each round trains for the full ``epochs`` budget,
    which makes a one-round federated run the same computation as merge-once.
    ``cadence`` is the local checkpoint cadence in merge-once mode and keeps
    every ``cadence``-th round in federated mode ("epoch" keeps every round).
    """

    mode: str = MERGE_ONCE
    rounds: int = 30
    client_sample_size: int | None = None
    local_steps: int | None = 10
    epochs: int = 3
    batch_size: int = 16
    cadence: str | int = "epoch"
    optimizer: OptimizerKind = field(default_factory=lambda: OptimizerKind(ADAMW, lr=0.03))
    scoring: ScoringConfig = field(default_factory=lambda: ScoringConfig(variant=SGD))
    datainf: DataInfConfig = field(default_factory=DataInfConfig)
    merge: MergeMethod = field(default_factory=MergeMethod)
    rank: int = 4
    alpha: float | None = None
    seed: int = 0
    fallback_ratio: float = DEFAULT_FALLBACK_RATIO
    threads: int | None = None

    def __post_init__(self):
        if self.mode not in MODES:
            raise ConfigError(f"unknown mode {self.mode!r}; expected one of {MODES}")
        if self.rounds < 1:
            raise ConfigError("rounds must be >= 1")
        if self.local_steps is not None and self.local_steps < 1:
            raise ConfigError("local_steps must be >= 1")
        if self.client_sample_size is not None and self.client_sample_size < 1:
            raise ConfigError("client_sample_size must be >= 1")
        if self.epochs < 1 or self.batch_size < 1:
            raise ConfigError("epochs and batch_size must be >= 1")
        if not 0.0 < self.fallback_ratio <= 1.0:
            raise ConfigError("fallback_ratio must lie in (0, 1]")

    def participants(self, k: int) -> int:
        m = k if self.client_sample_size is None else self.client_sample_size
        if not 1 <= m <= k:
            raise ConfigError(f"client_sample_size {m} not in [1, {k}]")
        return m


# --- messages -------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class Message:
    sender: str
    receiver: str
    kind: str
    payload: Mapping[str, object]

    def blob(self) -> bytes:
        """Byte image of the payload as it would go over the wire."""
        parts = []
        for key in sorted(self.payload):
            val = self.payload[key]
            parts.append(key.encode("utf-8"))
            if isinstance(val, np.ndarray):
                parts.append(np.ascontiguousarray(val, dtype="<f8").tobytes())
            elif isinstance(val, float):
                parts.append(struct.pack("<d", val))
            elif isinstance(val, (int, np.integer)):
                parts.append(struct.pack("<q", int(val)))
            elif isinstance(val, str):
                parts.append(val.encode("utf-8"))
            else:
                parts.append(repr(val).encode("utf-8"))
        return b"".join(parts)


class MessageLog:
    def __init__(self):
        self._lock = threading.Lock()
        self._items: list[Message] = []

    def send(self, sender: str, receiver: str, kind: str, payload: Mapping[str, object]) -> Message:
        msg = Message(sender, receiver, kind, dict(payload))
        with self._lock:
            self._items.append(msg)
        return msg

    @property
    def messages(self) -> list[Message]:
        with self._lock:
            return list(self._items)

    def uplink(self) -> list[Message]:
        return [m for m in self.messages if m.receiver == SERVER]


@dataclass(frozen=True)
class AuditResult:
    n_messages: int
    n_uplink: int
    bytes_scanned: int
    violations: tuple[str, ...]

    @property
    def clean(self) -> bool:
        return not self.violations


_ALLOWED_VALUES = (np.ndarray, float, int, str, np.integer)


def audit_messages(log: MessageLog, private: Sequence[Sequence[Sample]]) -> AuditResult:
    """Check message kinds/value types and scan every uplink payload for private sample bytes."""
    violations: list[str] = []
    needles: list[tuple[int, bytes]] = []
    for client in private:
        for s in client:
            needles.append((s.id, np.ascontiguousarray(s.features, dtype="<f8").tobytes()))
            tgt = np.atleast_1d(np.asarray(s.target))
            if tgt.dtype.kind == "f":
                needles.append((s.id, np.ascontiguousarray(tgt, dtype="<f8").tobytes()))
    msgs = log.messages
    scanned = 0
    for i, m in enumerate(msgs):
        allowed = UPLINK_KINDS if m.receiver == SERVER else DOWNLINK_KINDS
        if m.kind not in allowed:
            violations.append(f"message {i}: kind {m.kind!r} not allowed from {m.sender} to {m.receiver}")
        for key, val in m.payload.items():
            if isinstance(val, Sample) or not isinstance(val, _ALLOWED_VALUES):
                violations.append(f"message {i}: field {key!r} has disallowed type {type(val).__name__}")
        if m.receiver != SERVER:
            continue
        blob = m.blob()
        scanned += len(blob)
        for sid, needle in needles:
            if needle in blob:
                violations.append(f"message {i} ({m.kind} from {m.sender}) contains bytes of sample {sid}")
    return AuditResult(len(msgs), sum(m.receiver == SERVER for m in msgs), scanned, tuple(violations))


def _adapter_payload(adapter: LoraAdapter) -> dict:
    out: dict[str, object] = {"rank": adapter.rank, "alpha": float(adapter.alpha)}
    for n, a, b in adapter.layers:
        out[f"A:{n}"] = a.copy()
        out[f"B:{n}"] = b.copy()
    return out


def _adapter_from_payload(p: Mapping, names: Sequence[str]) -> LoraAdapter:
    layers = tuple((n, np.array(p[f"A:{n}"]), np.array(p[f"B:{n}"])) for n in names)
    return LoraAdapter(layers, int(p["rank"]), float(p["alpha"]))


# --- state ----------------------------------------------------------------

@dataclass
class ClientState:
    client_id: int
    train: tuple[Sample, ...]
    trajectory: Trajectory | None = None
    scores: list[QualityScore] | None = None
    selected: tuple[int, ...] | None = None
    fell_back: bool = False
    adapter: LoraAdapter | None = None

    def name(self) -> str:
        return f"client{self.client_id}"


@dataclass
class ServerState:
    global_adapter: LoraAdapter
    anchor: tuple[Sample, ...]
    val: tuple[Sample, ...]
    threshold: GlobalThreshold | None = None
    round: int = 0
    trajectory: Trajectory | None = None
    client_trajectories: list[Trajectory] = field(default_factory=list)


@dataclass(frozen=True, eq=False)
class Stage1Result:
    trajectories: tuple[Trajectory, ...]
    global_trajectory: Trajectory | None


@dataclass(frozen=True, eq=False)
class SelectionResult:
    threshold: GlobalThreshold
    scores: tuple[tuple[QualityScore, ...], ...]
    selected: tuple[tuple[int, ...], ...]
    fell_back: tuple[bool, ...]
    anchor_table: AnchorScoreTable


@dataclass(frozen=True, eq=False)
class MergeResult:
    adapter: LoraAdapter
    val_loss: float
    val_curve: tuple[float, ...]
    provenance: dict
    sizes: tuple[int, ...]


@dataclass(frozen=True, eq=False)
class PipelineResult:
    stage1: Stage1Result
    selection: SelectionResult
    final: MergeResult
    timings: dict
    log: MessageLog


@dataclass(frozen=True, eq=False)
class Federation:
    """A bundle plus a workflow config: the shared context every stage needs."""

    bundle: DatasetBundle
    config: WorkflowConfig

    @property
    def base(self):
        return self.bundle.base

    @property
    def k(self) -> int:
        return self.bundle.n_clients

    def theta0(self) -> LoraAdapter:
        """Initial global adapter every client starts from."""
        cfg = self.config
        return init_adapter(self.base, rank=cfg.rank, alpha=cfg.alpha, seed=[cfg.seed, _T_INIT])

    def clients(self) -> list[ClientState]:
        for c, data in enumerate(self.bundle.clients):
            if not data:
                raise ConfigError(f"client {c} has an empty training set")
        return [ClientState(c, tuple(d)) for c, d in enumerate(self.bundle.clients)]

    def server(self) -> ServerState:
        return ServerState(self.theta0(), tuple(self.bundle.anchor), tuple(self.bundle.val))

    def threads(self) -> int:
        return thread_count(self.config.threads)

    def local_run(self, samples, start: LoraAdapter, stage: int, client: int, rnd: int,
                  steps: int | None, cadence="epoch") -> object:
        cfg = self.config
        return train(TrainingRunConfig(
            base=self.base, init=start, samples=list(samples), kind=cfg.optimizer,
            epochs=cfg.epochs, max_steps=steps, batch_size=cfg.batch_size, cadence=cadence,
            seed=[cfg.seed, _T_TRAIN, stage, client, rnd]))

    def sample_clients(self, stage: int, rnd: int) -> list[int]:
        m = self.config.participants(self.k)
        rng = np.random.default_rng([self.config.seed, _T_SAMPLE, stage, rnd])
        return sorted(int(i) for i in rng.permutation(self.k)[:m])


def _fed_cadence_keep(cadence, rnd: int, rounds: int) -> bool:
    if cadence == "epoch":
        return True
    return rnd % int(cadence) == 0 or rnd == rounds


def _average_states(states: Sequence[OptimState], weights: Sequence[float]) -> OptimState:
    total = float(sum(weights))
    m = np.zeros_like(states[0].m)
    v = np.zeros_like(states[0].v)
    for st, w in zip(states, weights):
        m = m + (w / total) * st.m
        v = v + (w / total) * st.v
    return OptimState(m, v, max(st.step for st in states))


def _needs_state(fed: Federation) -> bool:
    variant = fed.config.scoring.variant or fed.config.optimizer.variant
    return variant != SGD


# --- stage 1 --------------------------------------------------------------

def run_stage1_training(fed: Federation, clients: list[ClientState], server: ServerState,
                        log: MessageLog) -> Stage1Result:
    """Mixed-quality local training that produces the checkpoints used for scoring."""
    cfg = fed.config
    theta0 = server.global_adapter
    names = theta0.layer_names
    threads = fed.threads()
    traj_layer = resolve_layer(
        Trajectory((Checkpoint(1, theta0, 1.0, None),), "epoch", cfg.optimizer, fed.base), cfg.scoring)
    block = trainable_layout(fed.base, theta0)[traj_layer]

    if cfg.mode == MERGE_ONCE:
        results = _pmap(lambda c: fed.local_run(c.train, theta0, _STAGE1, c.client_id, 0, None, cfg.cadence),
                        clients, threads)
        rebuilt = []
        for c, res in zip(clients, results):
            c.trajectory = res.trajectory
            c.adapter = res.trainable
            cks = []
            for ck in res.trajectory.checkpoints:
                payload = _adapter_payload(ck.trainable)
                payload.update({"t": ck.t, "lr": float(ck.lr)})
                if _needs_state(fed) and ck.state is not None:
                    payload.update({"step": ck.state.step, f"m:{traj_layer}": ck.state.m[block].copy(),
                                    f"v:{traj_layer}": ck.state.v[block].copy()})
                msg = log.send(c.name(), SERVER, "checkpoint", payload)
                cks.append(_checkpoint_from_message(msg.payload, names, traj_layer, block, theta0))
            rebuilt.append(Trajectory(tuple(cks), res.trajectory.cadence, cfg.optimizer, fed.base))
        server.client_trajectories = rebuilt
        return Stage1Result(tuple(c.trajectory for c in clients), None)

    global_ad = theta0
    cks: list[Checkpoint] = []
    sizes_all = [len(c.train) for c in clients]
    for rnd in range(1, cfg.rounds + 1):
        chosen = fed.sample_clients(_STAGE1, rnd)
        start = global_ad
        for i in chosen:
            log.send(SERVER, clients[i].name(), "global_adapter", _adapter_payload(start))
        results = _pmap(lambda i: fed.local_run(clients[i].train, start, _STAGE1, i, rnd, cfg.local_steps),
                        chosen, threads)
        adapters, states = [], []
        for i, res in zip(chosen, results):
            payload = _adapter_payload(res.trainable)
            payload.update({"m": res.state.m.copy(), "v": res.state.v.copy(), "step": res.state.step,
                            "n": sizes_all[i]})
            msg = log.send(clients[i].name(), SERVER, "local_update", payload)
            adapters.append(_adapter_from_payload(msg.payload, names))
            states.append(OptimState(msg.payload["m"], msg.payload["v"], int(msg.payload["step"])))
        sizes = [sizes_all[i] for i in chosen]
        global_ad, _ = merge(adapters, cfg.merge, sizes)
        if _fed_cadence_keep(cfg.cadence, rnd, cfg.rounds):
            state = _average_states(states, sizes)
            cks.append(Checkpoint(rnd, global_ad, cfg.optimizer.lr_at(state.step + 1), state))
    traj = Trajectory(tuple(cks), cfg.cadence, cfg.optimizer, fed.base)
    server.trajectory = traj
    for c in clients:
        c.trajectory = traj
        for ck in cks:
            log.send(SERVER, c.name(), "global_checkpoint", _adapter_payload(ck.trainable))
    return Stage1Result((traj,), traj)


def _checkpoint_from_message(p: Mapping, names, layer: str, block: slice, template: LoraAdapter) -> Checkpoint:
    adapter = _adapter_from_payload(p, names)
    state = None
    if f"m:{layer}" in p:
        # Only the scoring layer's moments cross the boundary; the rest stays NaN so misuse is loud.
        n = template.flat().size
        m = np.full(n, np.nan)
        v = np.full(n, np.nan)
        m[block] = p[f"m:{layer}"]
        v[block] = p[f"v:{layer}"]
        state = OptimState(m, v, int(p["step"]))
    return Checkpoint(int(p["t"]), adapter, float(p["lr"]), state)


# --- stages 2-4 -----------------------------------------------------------

def _client_scores(fed: Federation, c: ClientState, scorer: str) -> list[QualityScore]:
    cfg = fed.config
    traj = c.trajectory
    if scorer == "clues":
        return score_dataset(c.train, fed.bundle.val, traj, cfg.scoring)
    if scorer == "loss":
        return loss_scores(c.train, traj.final(), fed.base)
    if scorer == "datainf":
        return datainf_scores(c.train, fed.bundle.val, traj.final(), fed.base, cfg.datainf)
    if scorer == "random":
        return random_scores(c.train, cfg.seed + _T_RANDOM)
    raise ConfigError(f"unknown scorer {scorer!r}")


def _anchor_table(fed: Federation, clients: list[ClientState], server: ServerState, scorer: str,
                  log: MessageLog) -> AnchorScoreTable:
    cfg = fed.config
    anchor = server.anchor
    if cfg.mode == MERGE_ONCE:
        trajs = {i: t for i, t in enumerate(server.client_trajectories)}
    else:
        trajs = {"global": server.trajectory}
    if scorer == "clues":
        return anchor_scores(anchor, trajs, server.val, cfg.scoring)
    if scorer == "loss":
        rows = [(src, q) for src, t in trajs.items() for q in loss_scores(anchor, t.final(), fed.base)]
        return AnchorScoreTable(tuple(rows), scorer)
    if scorer == "random":
        rows = [(src, q) for src in trajs for q in random_scores(anchor, cfg.seed + _T_RANDOM)]
        return AnchorScoreTable(tuple(rows), scorer)
    if scorer == "datainf":
        # The Hessian surrogate needs the client's own gradients, so clients score
        # the public anchors themselves and send only those numbers.
        rows = []
        for c in clients:
            qs = datainf_scores(anchor, server.val, c.trajectory.final(), fed.base, cfg.datainf,
                                population=c.train)
            msg = log.send(c.name(), SERVER, "anchor_scores",
                           {f"s:{q.sample_id}": float(q.score) for q in qs})
            rows += [(c.client_id, QualityScore(int(k[2:]), float(v))) for k, v in msg.payload.items()]
        return AnchorScoreTable(tuple(rows), scorer)
    raise ConfigError(f"unknown scorer {scorer!r}")


def run_stage2_to_4_selection(fed: Federation, clients: list[ClientState], server: ServerState,
                              log: MessageLog, scorer: str = "clues") -> SelectionResult:
    """Local scoring, the server's anchor threshold, and local filtering."""
    threads = fed.threads()
    scores = _pmap(lambda c: _client_scores(fed, c, scorer), clients, threads)
    table = _anchor_table(fed, clients, server, scorer, log)
    tau = global_threshold(replace(table, scorer=scorer), mode=fed.config.mode)
    server.threshold = tau
    selected, fell = [], []
    for c, sc in zip(clients, scores):
        log.send(SERVER, c.name(), "threshold", {"tau": float(tau.tau)})
        ids, fb = select_or_fallback(sc, tau.tau, fed.config.fallback_ratio, who=c.name())
        c.scores, c.selected, c.fell_back = sc, ids, fb
        selected.append(ids)
        fell.append(fb)
    return SelectionResult(tau, tuple(tuple(s) for s in scores), tuple(selected), tuple(fell), table)


# --- stages 5-6 -----------------------------------------------------------

def run_stage5_6_retrain_merge(fed: Federation, datasets: Sequence[Sequence[Sample]],
                               log: MessageLog, theta0: LoraAdapter | None = None) -> MergeResult:
    """Retrain from the initial global adapter on ``datasets`` (one per client) and merge."""
    cfg = fed.config
    theta0 = theta0 if theta0 is not None else fed.theta0()
    names = theta0.layer_names
    threads = fed.threads()
    for c, d in enumerate(datasets):
        if not d:
            raise ConfigError(f"client {c} has nothing to retrain on")
    sizes_all = [len(d) for d in datasets]

    def upload(i: int, adapter: LoraAdapter) -> LoraAdapter:
        payload = _adapter_payload(adapter)
        payload["n"] = sizes_all[i]
        msg = log.send(f"client{i}", SERVER, "adapter", payload)
        return _adapter_from_payload(msg.payload, names)

    if cfg.mode == MERGE_ONCE:
        ids = list(range(len(datasets)))
        results = _pmap(lambda i: fed.local_run(datasets[i], theta0, _STAGE5, i, 0, None), ids, threads)
        adapters = [upload(i, r.trainable) for i, r in zip(ids, results)]
        merged, prov = merge(adapters, cfg.merge, sizes_all)
        loss = mean_loss(fed.base, merged, fed.bundle.val)
        return MergeResult(merged, loss, (loss,), prov, tuple(sizes_all))

    global_ad = theta0
    curve = []
    prov: dict = {}
    for rnd in range(cfg.rounds):
        chosen = fed.sample_clients(_STAGE5, rnd)
        start = global_ad
        for i in chosen:
            log.send(SERVER, f"client{i}", "global_adapter", _adapter_payload(start))
        results = _pmap(lambda i: fed.local_run(datasets[i], start, _STAGE5, i, rnd, cfg.local_steps),
                        chosen, threads)
        adapters = [upload(i, r.trainable) for i, r in zip(chosen, results)]
        global_ad, prov = merge(adapters, cfg.merge, [sizes_all[i] for i in chosen])
        curve.append(mean_loss(fed.base, global_ad, fed.bundle.val))
    prov = dict(prov, rounds=cfg.rounds)
    return MergeResult(global_ad, curve[-1], tuple(curve), prov, tuple(sizes_all))


# --- end to end -----------------------------------------------------------

def staged(name: str, timings: dict, fn, *args, **kw):
    t0 = time.perf_counter()
    try:
        return fn(*args, **kw)
    except StageError:
        raise
    except Exception as exc:  # noqa: BLE001 - re-raised with the stage attached
        raise StageError(name, exc) from exc
    finally:
        timings[name] = timings.get(name, 0.0) + time.perf_counter() - t0


def selected_datasets(fed: Federation, selection: Sequence[Sequence[int]]) -> list[tuple[Sample, ...]]:
    out = []
    for data, ids in zip(fed.bundle.clients, selection):
        keep = set(ids)
        out.append(tuple(s for s in data if s.id in keep))
    return out


def full_pipeline(bundle: DatasetBundle, config: WorkflowConfig, scorer: str = "clues") -> PipelineResult:
    """Stages 1 to 6 with labels sealed throughout. Deterministic given the seeds."""
    fed = Federation(bundle, config)
    log = MessageLog()
    timings: dict[str, float] = {}
    with labels_sealed():
        clients = staged("setup", timings, fed.clients)
        server = staged("setup", timings, fed.server)
        s1 = staged("stage1_training", timings, run_stage1_training, fed, clients, server, log)
        sel = staged("stage2_4_selection", timings, run_stage2_to_4_selection, fed, clients, server, log, scorer)
        data = selected_datasets(fed, sel.selected)
        final = staged("stage5_6_retrain_merge", timings, run_stage5_6_retrain_merge, fed, data, log,
                        server.global_adapter)
    return PipelineResult(s1, sel, final, timings, log)

