"""Accuracy ledger and the onboarding metrics computed from it.

The ledger stores accuracies as fractions in [0, 1]; every reported metric is
in percentage points. PA and RI are means of per-client paired differences
over identical client sets.
"""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field

import numpy as np

from .errors import DataError, InputError

LOCAL = "local_pretrain"


def at_join(t: int) -> str:
    return f"at_join:{t}"


def post_batch(t: int) -> str:
    return f"post_batch:{t}"


def post_replay(t: int) -> str:
    return f"post_replay:{t}"


def round_eval(r: int) -> str:
    return f"round:{r}"


@dataclass
class MetricsLedger:
    batches: dict[int, int] = field(default_factory=dict)  # client -> batch
    entries: dict[tuple[int, str], float] = field(default_factory=dict)

    def record(self, client: int, label: str, acc: float) -> None:
        acc = float(acc)
        if not 0.0 <= acc <= 1.0:
            raise InputError(f"accuracy {acc} outside [0, 1]")
        key = (int(client), label)
        if key in self.entries:
            raise InputError(f"duplicate ledger entry for client {client} at {label}")
        self.entries[key] = acc

    def get(self, client: int, label: str) -> float:
        try:
            return self.entries[(client, label)]
        except KeyError:
            raise DataError(f"client {client} has no entry at {label}") from None

    def has(self, client: int, label: str) -> bool:
        return (client, label) in self.entries

    def clients_of(self, batch: int) -> list[int]:
        return sorted(c for c, b in self.batches.items() if b == batch)

    def clients_before(self, batch: int) -> list[int]:
        return sorted(c for c, b in self.batches.items() if b < batch)

    @property
    def n_batches(self) -> int:
        return max(self.batches.values(), default=0)

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["client", "batch", "label", "accuracy"])
        for (c, label), acc in self.entries.items():
            w.writerow([c, self.batches.get(c, ""), label, repr(acc)])
        return buf.getvalue()

    @classmethod
    def from_csv(cls, text: str) -> "MetricsLedger":
        led = cls()
        for row in csv.DictReader(io.StringIO(text)):
            c = int(row["client"])
            if row["batch"]:
                led.batches[c] = int(row["batch"])
            led.record(c, row["label"], float(row["accuracy"]))
        return led


def _end_label(ledger: MetricsLedger, client: int, t: int, use_replay: bool) -> str:
    if use_replay and ledger.has(client, post_replay(t)):
        return post_replay(t)
    return post_batch(t)


def compute_pa(ledger: MetricsLedger, t: int) -> float:
    """Mean over batch-``t`` clients of (trained accuracy - local-only accuracy), in points."""
    clients = ledger.clients_of(t)
    if not clients:
        raise DataError(f"batch {t} has no clients")
    diffs = [ledger.get(c, post_batch(t)) - ledger.get(c, LOCAL) for c in clients]
    return 100.0 * float(np.mean(diffs))


def compute_ri(ledger: MetricsLedger, t: int, use_replay: bool = True) -> float:
    """Mean accuracy change of clients from batches before ``t`` across the
    integration of batch ``t``, in points. With ``use_replay`` the after
    checkpoint is the post-replay one when present."""
    if t < 2:
        raise InputError("RI is defined from the second batch on")
    clients = ledger.clients_before(t)
    if not clients:
        raise DataError(f"no clients before batch {t}")
    diffs = []
    for c in clients:
        before = ledger.get(c, _end_label(ledger, c, t - 1, use_replay))
        after = ledger.get(c, _end_label(ledger, c, t, use_replay))
        diffs.append(after - before)
    return 100.0 * float(np.mean(diffs))


def mutual(pa: float, ri: float) -> float:
    if not (np.isfinite(pa) and np.isfinite(ri)):
        raise InputError("PA and RI must be finite")
    return (pa + ri) / 2.0


def mean_accuracy(ledger: MetricsLedger, clients: list[int], label: str) -> float:
    return 100.0 * float(np.mean([ledger.get(c, label) for c in clients]))


def first_batch_trajectory(ledger: MetricsLedger) -> list[tuple[str, float]]:
    """Mean batch-1 accuracy at each post-batch / post-replay checkpoint."""
    clients = ledger.clients_of(1)
    out = []
    for t in range(1, ledger.n_batches + 1):
        for label in (post_batch(t), post_replay(t)):
            if all(ledger.has(c, label) for c in clients):
                out.append((label, mean_accuracy(ledger, clients, label)))
    return out


REPORT_HEADER = ["method", "batch", "checkpoint", "metric", "value"]


@dataclass
class BatchReport:
    method: str
    rows: list[tuple[str, int, str, str, float]]

    def value(self, metric: str, batch: int, checkpoint: str | None = None) -> float:
        for _, b, cp, m, v in self.rows:
            if m == metric and b == batch and (checkpoint is None or cp == checkpoint):
                return v
        raise KeyError((metric, batch, checkpoint))

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(REPORT_HEADER)
        for row in self.rows:
            w.writerow([*row[:4], repr(row[4])])
        return buf.getvalue()


def batch_report(ledger: MetricsLedger, method: str) -> BatchReport:
    rows = []
    T = ledger.n_batches
    for t in range(1, T + 1):
        clients = ledger.clients_of(t)
        labels = [LOCAL] + [lab for s in range(t, T + 1) for lab in (post_batch(s), post_replay(s))]
        for label in labels:
            if clients and all(ledger.has(c, label) for c in clients):
                rows.append((method, t, label, "accuracy", mean_accuracy(ledger, clients, label)))
        pa = compute_pa(ledger, t) if all(ledger.has(c, LOCAL) and ledger.has(c, post_batch(t)) for c in clients) else None
        if pa is not None:
            rows.append((method, t, post_batch(t), "PA", pa))
        if t >= 2:
            ri = compute_ri(ledger, t)
            cp = post_replay(t) if any(ledger.has(c, post_replay(t)) for c in ledger.clients_before(t)) else post_batch(t)
            rows.append((method, t, cp, "RI", ri))
            if pa is not None:
                rows.append((method, t, cp, "mutual", mutual(pa, ri)))
    return BatchReport(method, rows)
