"""Progressive-onboarding federation loop.

Batches of clients join one after another. Only the newest batch trains;
when a batch closes its mask is frozen and each of its clients gets a serving
snapshot. After every later batch, the server may synthesize a replay pool
from that batch's BN statistics and fine-tune earlier snapshots inside their
frozen masks.

Methods:

``pfeddsh``
    hypernetwork + batch masks + replay
``pfeddsh_noreplay`` / ``pfeddsh_nomask`` / ``pfedhn_nomask``
    ablations; without masks there is no isolated subnetwork to snapshot, so
    earlier clients are served live from the current hypernetwork
``fedavg``
    one shared parameter vector, mean of client deltas
``local_only``
    every client trains its own model in isolation
"""

from __future__ import annotations

import csv
import hashlib
import io
import json
import logging
import math
import shutil
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import __version__, _backend
from . import data as data_mod
from . import hypernet, masking, metrics, nn, replay
from .config import ExperimentConfig, stream, sub_seed
from .errors import NumericError, StateError
from .nn import BnStatSet, NetSpec

log = logging.getLogger(__name__)

HYPERNET_METHODS = ("pfeddsh", "pfeddsh_noreplay", "pfeddsh_nomask", "pfedhn_nomask")


def uses_hypernet(method: str) -> bool:
    return method in HYPERNET_METHODS


def uses_masks(method: str) -> bool:
    return method in ("pfeddsh", "pfeddsh_noreplay")


def uses_replay(cfg: ExperimentConfig) -> bool:
    return cfg.replay.enabled and cfg.run.method in ("pfeddsh", "pfeddsh_nomask")


@dataclass
class ClientRecord:
    cid: int
    batch: int
    train_idx: np.ndarray
    test_idx: np.ndarray
    embedding: np.ndarray | None = None
    stats: BnStatSet | None = None  # running statistics from local training
    velocity: np.ndarray | None = None
    params: np.ndarray | None = None  # local_only model
    serving: np.ndarray | None = None  # snapshot taken at batch close
    serving_stats: BnStatSet | None = None
    rounds_trained: int = 0
    label_counts: np.ndarray | None = None  # train label histogram, reported at join

    @property
    def label_support(self) -> list[int]:
        return [] if self.label_counts is None else np.flatnonzero(self.label_counts).tolist()


@dataclass
class LocalResult:
    cid: int
    delta: np.ndarray  # theta_before - theta_after
    mask_grad: np.ndarray | None
    loss: float
    stats: BnStatSet
    params_after: np.ndarray


@dataclass
class FederationState:
    cfg: ExperimentConfig
    spec: NetSpec
    dataset: data_mod.LabeledDataset
    plan: data_mod.PartitionPlan
    clients: dict[int, ClientRecord]
    hyper: hypernet.HypernetState | None = None
    global_params: np.ndarray | None = None
    global_stats: BnStatSet | None = None
    masks: dict[int, masking.MaskState] = field(default_factory=dict)
    active_batch: int = 0
    closed: set = field(default_factory=set)
    global_round: int = 0
    ledger: metrics.MetricsLedger = field(default_factory=metrics.MetricsLedger)
    events: list = field(default_factory=list)
    pools: dict[int, replay.SyntheticPool] = field(default_factory=dict)
    timings: dict[str, float] = field(default_factory=dict)
    sampler: np.random.Generator | None = None
    jobs: int = 1

    @property
    def method(self) -> str:
        return self.cfg.run.method

    @property
    def seed(self) -> int:
        return self.cfg.run.seed

    def batch_clients(self, t: int) -> list[int]:
        return sorted(c for c, rec in self.clients.items() if rec.batch == t)

    def client_data(self, cid: int, split: str = "train") -> tuple[np.ndarray, np.ndarray]:
        rec = self.clients[cid]
        return self.dataset.subset(rec.train_idx if split == "train" else rec.test_idx)

    def log_event(self, kind: str, **payload) -> None:
        self.events.append({"kind": kind, "round": self.global_round, "batch": self.active_batch, **payload})

    def _timed(self, phase: str, t0: float) -> None:
        self.timings[phase] = self.timings.get(phase, 0.0) + time.perf_counter() - t0


def init_state(cfg: ExperimentConfig, jobs: int = 1) -> FederationState:
    cfg.validate()
    d, seed = cfg.data, cfg.run.seed
    dataset = data_mod.gen_blobs(d.classes, d.dim, d.per_class, d.spread, sub_seed(seed, "data"))
    plan = data_mod.dirichlet_partition(dataset.labels, d.clients, d.alpha, sub_seed(seed, "partition"), d.test_fraction)
    plan.batches = data_mod.schedule_batches(d.clients, cfg.schedule.batch_sizes, sub_seed(seed, "schedule"))
    spec = nn.mlp_spec(d.dim, d.classes, cfg.net.hidden, cfg.net.depth)
    clients = {
        c: ClientRecord(
            c,
            plan.batches[c],
            plan.train[c],
            plan.test[c],
            stats=BnStatSet.identity(spec),
            label_counts=np.bincount(dataset.labels[plan.train[c]], minlength=d.classes),
        )
        for c in range(d.clients)
    }
    state = FederationState(cfg, spec, dataset, plan, clients, sampler=stream(seed, "sampling"), jobs=max(1, int(jobs)))
    state.ledger.batches = {c: rec.batch for c, rec in clients.items()}
    init_rng = stream(seed, "init")
    if uses_hypernet(cfg.run.method):
        state.hyper = hypernet.init_hypernet(spec, cfg.hypernet.embed_dim, cfg.hypernet.hidden, init_rng, cfg.hypernet.head_scale)
    elif cfg.run.method == "fedavg":
        state.global_params = nn.init_params(spec, init_rng)
        state.global_stats = BnStatSet.identity(spec)
    return state


# ---------------------------------------------------------------- local work


def local_train(
    spec: NetSpec,
    theta: np.ndarray,
    x: np.ndarray,
    y: np.ndarray,
    stats: BnStatSet,
    epochs: int,
    lr: float,
    momentum: float,
    batch_size: int,
    rng: np.random.Generator,
    mask_values: np.ndarray | None = None,
) -> tuple[np.ndarray, BnStatSet, float]:
    """Minibatch SGD on ``theta``; the network sees ``mask_values * theta``.

    Returns the trained parameters, updated running statistics and the mean
    minibatch loss.
    """
    theta = theta.copy()
    vel = np.zeros_like(theta)
    losses = []
    n = len(y)
    if n < 2:
        # batch statistics need two samples; a one-sample client cannot train
        return theta, stats, float("nan")
    for _ in range(epochs):
        order = rng.permutation(n)
        for idx in minibatches(order, batch_size):
            eff = theta if mask_values is None else mask_values * theta
            logits, trace = nn.forward(spec, eff, x[idx], stats, "train")
            loss, d_logits = nn._backend.kernels.softmax_xent(logits, y[idx])
            g, _ = nn.backward(spec, eff, trace, d_logits)
            if mask_values is not None:
                g = g * mask_values
            theta, vel = nn.sgd_step(theta, g, lr, momentum, vel)
            stats = nn.commit_stats(stats, trace)
            losses.append(float(loss))
    if not np.all(np.isfinite(theta)):
        raise NumericError("local training diverged", phase="local_training")
    return theta, stats, float(np.mean(losses)) if losses else float("nan")


def minibatches(order: np.ndarray, batch_size: int) -> list[np.ndarray]:
    """Split ``order`` into chunks, folding a trailing singleton into the previous chunk."""
    chunks = [order[s : s + batch_size] for s in range(0, len(order), batch_size)]
    if len(chunks) > 1 and len(chunks[-1]) == 1:
        chunks[-2] = np.concatenate(chunks[-2:])
        chunks.pop()
    return chunks


def _serving_eval(state: FederationState, cid: int) -> float:
    theta, stats = serving_model(state, cid)
    x, y = state.client_data(cid, "test")
    return nn.accuracy(state.spec, theta, x, y, stats)


def serving_model(state: FederationState, cid: int) -> tuple[np.ndarray, BnStatSet]:
    """Parameters and BN statistics the client currently serves with."""
    rec, method = state.clients[cid], state.method
    if method == "fedavg":
        return state.global_params, state.global_stats
    if method == "local_only":
        return rec.params, rec.serving_stats or rec.stats
    if uses_masks(method) and rec.serving is not None:
        return rec.serving, rec.serving_stats
    theta = hypernet.generate(state.hyper, rec.embedding)
    if uses_masks(method):
        mode = "soft" if state.cfg.mask.soft_eval else "hard"
        theta = masking.apply(masking.materialize(state.masks[rec.batch], mode), theta)
    return theta, rec.stats


def _record_all(state: FederationState, label: str, upto_batch: int, only_before: bool = False) -> None:
    for cid in sorted(state.clients):
        b = state.clients[cid].batch
        if b < upto_batch or (b == upto_batch and not only_before):
            state.ledger.record(cid, label, _serving_eval(state, cid))


# ---------------------------------------------------------------- phases


def local_pretrain(state: FederationState, cid: int) -> float:
    """Standalone local-only model for the PA baseline; discarded afterwards."""
    cfg, spec = state.cfg, state.spec
    x, y = state.client_data(cid, "train")
    rng = stream(state.seed, "pretrain", cid)
    theta = nn.init_params(spec, rng)
    stats = BnStatSet.identity(spec)
    E = cfg.schedule.pretrain_epochs
    for ep in range(E):
        lr = nn.cosine_lr(ep, E, cfg.schedule.client_lr)
        theta, stats, _ = local_train(spec, theta, x, y, stats, 1, lr, cfg.schedule.momentum, cfg.schedule.batch_size, rng)
    xt, yt = state.client_data(cid, "test")
    return nn.accuracy(spec, theta, xt, yt, stats)


def onboard_batch(state: FederationState, t: int) -> None:
    """Close batch ``t-1`` if needed, set up batch ``t``'s mask, embeddings
    and pre-join local baselines."""
    t0 = time.perf_counter()
    cfg = state.cfg
    if t > 1 and (t - 1) not in state.closed:
        close_batch(state, t - 1)
    state.active_batch = t
    if uses_masks(state.method):
        P = state.spec.n_params
        if t == 1:
            state.masks[t] = masking.new_mask(t, P, cfg.mask.gamma, cfg.mask.init_logit)
        else:
            prev = [state.masks[s] for s in range(1, t)]
            state.masks[t] = masking.reuse_biased_mask(t, prev, P, cfg.mask.gamma, cfg.mask.reuse_logit, cfg.mask.init_logit)
    for cid in state.batch_clients(t):
        rec = state.clients[cid]
        if uses_hypernet(state.method):
            rec.embedding = hypernet.init_embedding(cid, cfg.hypernet.embed_dim, sub_seed(state.seed, "embed")).vector
        elif state.method == "local_only":
            rec.params = nn.init_params(state.spec, stream(state.seed, "local_init", cid))
        state.ledger.record(cid, metrics.LOCAL, local_pretrain(state, cid))
        state.ledger.record(cid, metrics.at_join(t), _join_accuracy(state, cid))
    state.log_event("onboard", clients=state.batch_clients(t))
    state._timed("onboard", t0)


def _join_accuracy(state: FederationState, cid: int) -> float:
    theta, _ = serving_model(state, cid)
    x, y = state.client_data(cid, "train")
    stats = nn.population_stats(state.spec, theta, x)
    xt, yt = state.client_data(cid, "test")
    return nn.accuracy(state.spec, theta, xt, yt, stats)


def n_sampled(fraction: float, n: int) -> int:
    return max(1, math.ceil(fraction * n - 1e-9))


def sample_clients(rng: np.random.Generator, pool: list[int], k: int) -> list[int]:
    """Uniform draw of ``k`` distinct clients, returned in id order."""
    return sorted(int(c) for c in rng.choice(pool, size=k, replace=False))


def _client_step(state: FederationState, cid: int, lr: float) -> LocalResult:
    cfg, spec = state.cfg, state.spec
    rec = state.clients[cid]
    x, y = state.client_data(cid, "train")
    rng = stream(state.seed, "local", state.global_round, cid)
    sch = cfg.schedule
    mask_grad, mask_values = None, None
    if uses_hypernet(state.method):
        theta = hypernet.generate(state.hyper, rec.embedding)
        if uses_masks(state.method):
            m = state.masks[rec.batch]
            mask_grad, _, _ = masking.mask_grads(spec, state.hyper, rec.embedding, m, x, y, cfg.mask.lam, theta=theta)
            mask_values = masking.materialize(m, "soft")
    elif state.method == "fedavg":
        theta = state.global_params
    else:
        theta = rec.params
    after, stats, loss = local_train(
        spec, theta, x, y, rec.stats, sch.local_epochs, lr, sch.momentum, sch.batch_size, rng, mask_values
    )
    return LocalResult(cid, theta - after, mask_grad, loss, stats, after)


def _mean_loss(results: list[LocalResult]) -> float | None:
    """Mean loss over clients that trained; None when none did (E = 0 or tiny clients)."""
    vals = [r.loss for r in results if np.isfinite(r.loss)]
    return float(np.mean(vals)) if vals else None


def run_round(state: FederationState, t: int, r: int) -> None:
    """One communication round of batch ``t`` (``r`` counts from 0 within the batch)."""
    if t != state.active_batch or t in state.closed:
        raise StateError(f"batch {t} is not the active batch")
    t0 = time.perf_counter()
    cfg = state.cfg
    pool = state.batch_clients(t)
    if not pool:
        raise StateError(f"batch {t} has no clients to sample")
    sampled = sample_clients(state.sampler, pool, n_sampled(cfg.schedule.sample_fraction, len(pool)))
    lr = nn.cosine_lr(r, cfg.schedule.rounds_for(t), cfg.schedule.client_lr)
    if state.jobs > 1 and len(sampled) > 1:
        with ThreadPoolExecutor(max_workers=state.jobs) as ex:
            results = list(ex.map(lambda c: _client_step(state, c, lr), sampled))
    else:
        results = [_client_step(state, c, lr) for c in sampled]
    # aggregation consumes results in client-id order
    agg_norm = 0.0
    alpha = cfg.hypernet.server_lr
    if cfg.hypernet.robbins_monro:
        alpha = alpha / (1.0 + state.global_round)
    if uses_hypernet(state.method):
        h = state.hyper
        g_phi = np.zeros_like(h.phi)
        g_emb = {}
        for res in results:
            gp, ge = hypernet.backprop(h, state.clients[res.cid].embedding, res.delta)
            g_phi += gp
            g_emb[res.cid] = ge
        agg_norm = float(g_phi @ g_phi)
        clip = cfg.hypernet.clip_norm
        total = math.sqrt(agg_norm + sum(float(ge @ ge) for ge in g_emb.values()))
        if clip > 0 and total > clip:
            g_phi *= clip / total
            g_emb = {c: ge * (clip / total) for c, ge in g_emb.items()}
        h.phi -= alpha * g_phi
        if cfg.hypernet.train_embeddings:
            for cid, ge in g_emb.items():
                state.clients[cid].embedding = state.clients[cid].embedding - alpha * ge
        if uses_masks(state.method):
            m = state.masks[t]
            masking.update(m, sum(res.mask_grad for res in results), cfg.mask.lr)
            m.gamma = min(m.gamma * cfg.mask.gamma_growth, cfg.mask.gamma_max)
        if not np.all(np.isfinite(h.phi)):
            raise NumericError("hypernetwork parameters became non-finite", phase="aggregation")
    elif state.method == "fedavg":
        mean_delta = np.mean([res.delta for res in results], axis=0)
        agg_norm = float(mean_delta @ mean_delta)
        state.global_params = state.global_params - mean_delta
    for res in results:
        rec = state.clients[res.cid]
        rec.stats = res.stats
        rec.rounds_trained += 1
        if state.method == "local_only":
            rec.params = res.params_after
    if state.method == "fedavg":
        state.global_stats = replay.capture_bn_stats([state.clients[c].stats for c in sampled])
    state.log_event(
        "round",
        sampled=sampled,
        lr=lr,
        server_lr=alpha,
        loss=_mean_loss(results),
        agg_grad_sq=agg_norm,
    )
    state.global_round += 1
    if state.global_round % cfg.schedule.eval_every == 0:
        _record_all(state, metrics.round_eval(state.global_round), t)
    state._timed("rounds", t0)


def close_batch(state: FederationState, t: int) -> None:
    """Freeze batch ``t``'s mask, snapshot its clients, record post-batch accuracy."""
    if t in state.closed:
        return
    t0 = time.perf_counter()
    spec = state.spec
    if uses_masks(state.method):
        state.masks[t] = masking.freeze(state.masks[t])
    for cid in state.batch_clients(t):
        rec = state.clients[cid]
        if state.method == "fedavg":
            continue
        rec.serving_stats = rec.stats
        if uses_masks(state.method):
            theta = hypernet.generate(state.hyper, rec.embedding)
            rec.serving = masking.apply(masking.materialize(state.masks[t], "hard"), theta)
    state.closed.add(t)
    _record_all(state, metrics.post_batch(t), t)
    state.log_event("close", frozen=uses_masks(state.method))
    state._timed("close", t0)


def representative_model(state: FederationState, t: int) -> np.ndarray:
    """Hypernetwork output at the mean embedding of batch ``t``, masked by ``m_t``."""
    emb = np.mean([state.clients[c].embedding for c in state.batch_clients(t)], axis=0)
    theta = hypernet.generate(state.hyper, emb)
    if uses_masks(state.method):
        theta = masking.apply(masking.materialize(state.masks[t], "hard"), theta)
    return theta


def evidence_classes(state: FederationState, t: int) -> list[int]:
    """Classes holding at least ``replay.min_class_share`` of batch ``t``'s train samples."""
    counts = sum(state.clients[c].label_counts for c in state.batch_clients(t))
    share = counts / max(counts.sum(), 1)
    return [int(k) for k in np.flatnonzero((counts > 0) & (share >= state.cfg.replay.min_class_share))]


def _client_pool(state: FederationState, pool: replay.SyntheticPool, rec: ClientRecord) -> replay.SyntheticPool | None:
    """The part of ``pool`` that matches the client's label mix, or None when
    the pool misses too much of the client's label mass to tune it safely."""
    counts = rec.label_counts.astype(np.float64)
    have = np.bincount(pool.y, minlength=len(counts))[: len(counts)] > 0
    if counts.sum() == 0 or counts[have].sum() / counts.sum() < state.cfg.replay.min_coverage:
        return None
    own = pool.restrict(counts)
    return own if len(own) else None


def run_replay_phase(state: FederationState, t: int) -> None:
    """Synthesize batch ``t``'s pool and fine-tune every earlier batch."""
    cfg = state.cfg
    if not uses_replay(cfg):
        state.log_event("replay_skipped", reason="replay disabled")
        return
    if t <= 1:
        raise StateError("replay runs only after the first batch")
    if t not in state.closed:
        raise StateError(f"batch {t} must finish training before replay")
    t0 = time.perf_counter()
    spec, hp = state.spec, cfg.replay.hyperparams()
    target = replay.capture_bn_stats([state.clients[c].serving_stats for c in state.batch_clients(t)])
    rep = representative_model(state, t)
    support = evidence_classes(state, t)
    prov = {"model": f"batch{t}/mean-embedding", "stats": f"batch{t}/aggregated"}
    pool = replay.build_pool(spec, rep, target, hp, sub_seed(state.seed, "synthesis"), t, prov, classes=support)
    state.pools[t] = pool
    ft_seed = sub_seed(state.seed, "finetune", t)
    skipped = []
    if uses_masks(state.method):
        for s in range(1, t):
            mask = state.masks[s]
            for cid in state.batch_clients(s):
                rec = state.clients[cid]
                own = _client_pool(state, pool, rec)
                if own is None:
                    skipped.append(cid)
                    continue
                before = rec.serving
                rec.serving = replay.finetune_prior(
                    spec, before, mask, own, hp.finetune_epochs, hp.finetune_lr, rec.serving_stats, seed=ft_seed + cid
                )
                if cfg.replay.update_hypernet:
                    gp, _ = hypernet.backprop(state.hyper, rec.embedding, before - rec.serving)
                    state.hyper.phi -= cfg.hypernet.server_lr * gp
    else:
        ones = masking.freeze(masking.new_mask(0, spec.n_params, 1.0, 1.0))
        g_phi = np.zeros_like(state.hyper.phi)
        for cid in state.clients:
            rec = state.clients[cid]
            if rec.batch >= t:
                continue
            own = _client_pool(state, pool, rec)
            if own is None:
                skipped.append(cid)
                continue
            before = hypernet.generate(state.hyper, rec.embedding)
            after = replay.finetune_prior(spec, before, ones, own, hp.finetune_epochs, hp.finetune_lr, rec.serving_stats, seed=ft_seed + cid)
            g_phi += hypernet.backprop(state.hyper, rec.embedding, before - after)[0]
        state.hyper.phi -= cfg.hypernet.server_lr * g_phi
    _record_all(state, metrics.post_replay(t), t, only_before=True)
    state.log_event("replay", pool_size=len(pool), missing_classes=pool.provenance["missing_classes"], skipped=skipped)
    state._timed("replay", t0)


def run_batches(state: FederationState) -> FederationState:
    cfg = state.cfg
    for t in range(1, cfg.n_batches + 1):
        onboard_batch(state, t)
        for r in range(cfg.schedule.rounds_for(t)):
            run_round(state, t, r)
        close_batch(state, t)
        if t > 1:
            run_replay_phase(state, t)
    return state


def simulate(cfg: ExperimentConfig, jobs: int = 1) -> FederationState:
    """Run the whole schedule and return the final state."""
    state = init_state(cfg, jobs)
    return run_batches(state)


# ---------------------------------------------------------------- manifest

MANIFEST_FILES = (
    "config.cfg",
    "manifest.json",
    "ledger.csv",
    "report.csv",
    "capacity.csv",
    "events.jsonl",
    "snapshots.npz",
    "partition.json",
)
CAPACITY_HEADER = [
    "batch",
    "active",
    "new",
    "reused",
    "reuse_fraction",
    "total_consumed",
    "active_fraction",
    "neurons_active",
    "neurons_new",
    "neurons_reused",
    "neuron_total",
]


@dataclass
class RunManifest:
    """Everything a finished run leaves behind, plus where it was written."""

    config_text: str
    version: str
    backend: str
    ledger: metrics.MetricsLedger
    report: metrics.BatchReport
    events: list
    masks: dict[int, masking.MaskState]
    timings: dict[str, float]
    summary: dict
    out_dir: Path | None = None

    @property
    def ledger_csv(self) -> str:
        return self.ledger.to_csv()

    def to_json(self) -> dict:
        return {
            "version": self.version,
            "backend": self.backend,
            "ledger_sha256": hashlib.sha256(self.ledger_csv.encode()).hexdigest(),
            "config_sha256": hashlib.sha256(self.config_text.encode()).hexdigest(),
            "summary": self.summary,
            "timings": {k: round(v, 6) for k, v in sorted(self.timings.items())},
            "replay_phases": sum(1 for e in self.events if e["kind"] == "replay"),
            "files": list(MANIFEST_FILES),
        }


def effective_masks(state: FederationState) -> dict[int, masking.MaskState]:
    """Frozen per-batch masks; methods without masks use an all-ones mask."""
    if uses_masks(state.method):
        return {t: state.masks[t] for t in sorted(state.masks) if state.masks[t].frozen}
    ones = masking.freeze(masking.new_mask(0, state.spec.n_params, 1.0, 1.0))
    return {t: masking.MaskState(t, ones.logits, ones.gamma, True, ones.hard) for t in sorted(state.closed)}


def summarize(state: FederationState) -> dict:
    """Headline numbers: final mean accuracy, PA/RI of the last batch, sparsity."""
    led, T = state.ledger, state.cfg.n_batches
    final = {}
    for c in sorted(state.clients):
        labels = [metrics.post_replay(T), metrics.post_batch(T)]
        final[c] = next(led.get(c, lab) for lab in labels if led.has(c, lab))
    out = {"accuracy": 100.0 * float(np.mean(list(final.values()))), "PA": metrics.compute_pa(led, T)}
    out["RI"] = metrics.compute_ri(led, T) if T >= 2 else 0.0
    masks = effective_masks(state)
    if masks:
        cap = masking.capacity_report(list(masks.values()), state.spec)
        last = cap.rows()[-1]
        out["sparsity"] = 100.0 * (1.0 - float(np.mean([masking.active_fraction(m) for m in masks.values()])))
        out["active_neuron_fraction"] = last["neurons_active"] / max(last["neuron_total"], 1)
    return out


def build_manifest(state: FederationState) -> RunManifest:
    return RunManifest(
        config_text=state.cfg.to_text(),
        version=__version__,
        backend=_backend.name(),
        ledger=state.ledger,
        report=metrics.batch_report(state.ledger, state.method),
        events=state.events,
        masks=effective_masks(state),
        timings=dict(state.timings),
        summary=summarize(state),
    )


def _capacity_csv(state: FederationState, masks: dict[int, masking.MaskState]) -> str:
    buf = io.StringIO()
    w = csv.DictWriter(buf, CAPACITY_HEADER, lineterminator="\n")
    w.writeheader()
    if masks:
        for row in masking.capacity_report(list(masks.values()), state.spec).rows():
            w.writerow({k: repr(v) if isinstance(v, float) else v for k, v in row.items()})
    return buf.getvalue()


def prepare_out_dir(out: Path, force: bool = False) -> Path:
    out = Path(out)
    if out.exists() and any(out.iterdir()):
        if not force:
            raise FileExistsError(f"{out} is not empty; pass --force to overwrite")
        for name in MANIFEST_FILES:
            (out / name).unlink(missing_ok=True)
        for sub in ("masks", "pools"):
            if (out / sub).is_dir():
                shutil.rmtree(out / sub)
    out.mkdir(parents=True, exist_ok=True)
    return out


def write_run(state: FederationState, manifest: RunManifest, out: Path) -> None:
    out = Path(out)
    (out / "config.cfg").write_text(manifest.config_text)
    (out / "ledger.csv").write_text(manifest.ledger_csv)
    (out / "report.csv").write_text(manifest.report.to_csv())
    (out / "capacity.csv").write_text(_capacity_csv(state, manifest.masks))
    with open(out / "events.jsonl", "w") as f:
        for ev in manifest.events:
            f.write(json.dumps(ev, sort_keys=True) + "\n")
    (out / "masks").mkdir(exist_ok=True)
    for t, m in manifest.masks.items():
        (out / "masks" / f"batch_{t}.bin").write_bytes(masking.to_bytes(m))
    arrays = {}
    for c, rec in sorted(state.clients.items()):
        theta, _ = serving_model(state, c)
        arrays[f"client_{c}"] = theta
    if state.hyper is not None:
        arrays["phi"] = state.hyper.phi
    np.savez(out / "snapshots.npz", **arrays)
    for pool in state.pools.values():
        pool.save(out / "pools")
    data_mod.save_plan(state.plan, out / "partition.json")
    (out / "manifest.json").write_text(json.dumps(manifest.to_json(), indent=1, sort_keys=True) + "\n")


def run_experiment(
    cfg: ExperimentConfig, out: Path | str | None = None, jobs: int = 1, force: bool = False
) -> RunManifest:
    """Validate, run the whole schedule and (optionally) write the run directory."""
    cfg.validate()
    if out is not None:
        out = prepare_out_dir(Path(out), force)
    state = simulate(cfg, jobs)
    manifest = build_manifest(state)
    if out is not None:
        write_run(state, manifest, out)
        manifest.out_dir = out
    return manifest
