"""Reference computations: exhaustive filter-group enumeration for the toy
brute-force study, and classic input-channel pruning for the N = 1 check."""
from __future__ import annotations

import csv
import io
import itertools
import math
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .errors import ConfigError
from .model import ConvLayerSpec, Model
from .pruning import (
    GroupAssignment,
    GroupStructure,
    PrunedStructure,
    build_structure,
    prune,
    redundant_by_rate,
    redundant_by_ratio,
)

MAX_FILTERS = 12
RATES = (0.25, 0.5, 0.75)


class CapacityError(ConfigError):
    pass


def enumerate_partitions(n_filters: int, n_groups: int) -> list[GroupAssignment]:
    """All assignments of ``n_filters`` filters to at most ``n_groups`` groups,
    one per partition (group relabelings identified).

    Canonical form is the restricted-growth string: filter 0 is in group 0 and
    each filter's label is at most one more than the largest label before it.
    Output is in lexicographic order of that string.
    """
    if n_filters > MAX_FILTERS:
        raise CapacityError(f"refusing to enumerate {n_filters} filters (limit {MAX_FILTERS})")
    if n_filters < 1 or n_groups < 1:
        raise ConfigError("need at least one filter and one group")
    out: list[GroupAssignment] = []
    labels = [0] * n_filters

    def grow(k: int, top: int) -> None:
        if k == n_filters:
            out.append(GroupAssignment(tuple(labels), n_groups))
            return
        for g in range(min(top + 2, n_groups)):
            labels[k] = g
            grow(k + 1, max(top, g))

    grow(1, 0)
    return out


def canonical_labels(labels) -> tuple[int, ...]:
    """Relabel groups in order of first appearance."""
    seen: dict[int, int] = {}
    return tuple(seen.setdefault(g, len(seen)) for g in labels)


def dedup_partition_count(n_filters: int, n_groups: int) -> int:
    """Independent count: generate every labeling and dedup under relabeling."""
    return len({canonical_labels(p) for p in itertools.product(range(n_groups), repeat=n_filters)})


def channel_prune_baseline(
    model: Model, layers: list[str], beta: float | None = None, rate: float | None = None
) -> PrunedStructure:
    """Classic input-channel pruning: rank channels by squared norm summed over
    all filters and apply the same ratio (or fixed-rate) rule per layer."""
    if (beta is None) == (rate is None):
        raise ConfigError("give exactly one of beta or rate")
    groups = {}
    for name in layers:
        w = model.params[f"{name}.weight"].data
        scores = channel_norms(w)
        pruned = redundant_by_ratio(scores, beta) if rate is None else redundant_by_rate(scores, rate)
        total = scores.sum()
        gather = [m for m in range(w.shape[1]) if m not in set(pruned)]
        ratio = float(scores[pruned].sum() / total) if total > 0 else 0.0
        groups[name] = [GroupStructure(list(range(w.shape[0])) if gather else [], gather, pruned, ratio)]
    return build_structure(model, groups, beta, rate)


def channel_norms(w: np.ndarray) -> np.ndarray:
    """Squared norm of each input channel over all filters and kernel positions."""
    return (w * w).sum(axis=(2, 3)).sum(axis=0)


@dataclass
class PartitionResult:
    labels: tuple[int, ...]
    rate: float
    accuracy: float

    def groups(self) -> list[list[int]]:
        out: dict[int, list[int]] = {}
        for k, g in enumerate(self.labels):
            out.setdefault(g, []).append(k)
        return [out[g] for g in sorted(out)]


class PartitionEvaluator:
    """Validation accuracy of the pruned net for many assignments of one conv layer.

    Activations entering ``layer`` are computed once. Pruning only zeroes
    (filter, input channel) blocks of the layer, so per batch the layer's
    output is split into per-block partial maps with the original weights and
    each assignment sums the blocks it keeps; the rest of the network then
    runs with the pruned state. No fine-tuning.
    """

    def __init__(self, model: Model, layer: str, images: np.ndarray, labels: np.ndarray, batch_size: int = 1000):
        self.model = model
        self.layer = layer
        self.labels = labels
        self.batch_size = batch_size
        self.start = model.spec.index_of(layer)
        self.conv = model.spec.layers[self.start]
        if not isinstance(self.conv, ConvLayerSpec):
            raise ConfigError(f"{layer} is not a convolution")
        with T.no_grad():
            self.cache = [
                model.forward(images[s : s + batch_size], "eval", stop=self.start).data
                for s in range(0, len(labels), batch_size)
            ]

    def _partials(self, x: np.ndarray) -> tuple[np.ndarray, tuple[int, int, int]]:
        """(C_out, C_in, B*Ho*Wo) contributions of each weight block."""
        w = self.model.params[f"{self.layer}.weight"].data
        c_out, c_in, kh, kw = w.shape
        cols, ho, wo = T._im2col(x, kh, kw, self.conv.stride, self.conv.padding)
        blocks = w.reshape(c_out, c_in, kh * kw).transpose(1, 0, 2)
        part = np.matmul(blocks, cols.reshape(c_in, kh * kw, -1))
        return np.ascontiguousarray(part.transpose(1, 0, 2)), (x.shape[0], ho, wo)

    def _probe(self, assignment: GroupAssignment, rate: float):
        _, state = prune(self.model, {self.layer: assignment}, rate=rate)
        probe = self.model.copy()
        probe.load_state(state)
        keep = np.abs(state[f"{self.layer}.weight"]).sum(axis=(2, 3)) != 0  # (C_out, C_in)
        bias = state.get(f"{self.layer}.bias")
        return probe, keep, bias

    def accuracies(self, queries) -> list[float]:
        """Accuracy for each ``(assignment, rate)`` in ``queries``."""
        queries = list(queries)
        probes = [None if rate == 0 else self._probe(a, rate) for a, rate in queries]
        correct = [0] * len(queries)
        with T.no_grad():
            for b, s in enumerate(range(0, len(self.labels), self.batch_size)):
                x, y = self.cache[b], self.labels[s : s + self.batch_size]
                partials = shape = full = None
                for q, probe in enumerate(probes):
                    if probe is None:
                        logits = self.model.forward(x, "eval", start=self.start).data
                    else:
                        if partials is None:
                            partials, shape = self._partials(x)
                            full = partials.sum(axis=1)
                        model, keep, bias = probe
                        out = np.empty((keep.shape[0], partials.shape[2]))
                        for k in range(keep.shape[0]):
                            kept, dropped = np.flatnonzero(keep[k]), np.flatnonzero(~keep[k])
                            if len(dropped) < len(kept):
                                out[k] = full[k] - partials[k, dropped].sum(axis=0)
                            else:
                                out[k] = partials[k, kept].sum(axis=0)
                        out = out.reshape(-1, *shape).transpose(1, 0, 2, 3)
                        if bias is not None:
                            out = out + bias[None, :, None, None]
                        logits = model.forward(np.ascontiguousarray(out), "eval", start=self.start + 1).data
                    correct[q] += int((logits.argmax(axis=1) == y).sum())
        return [100.0 * c / max(len(self.labels), 1) for c in correct]

    def accuracy(self, assignment: GroupAssignment, rate: float) -> float:
        return self.accuracies([(assignment, rate)])[0]


def evaluate_partition(
    model: Model, layer: str, assignment: GroupAssignment, rate: float, images: np.ndarray, labels: np.ndarray
) -> float:
    """Accuracy after pruning ``rate`` of each group's lowest-importance channels."""
    return PartitionEvaluator(model, layer, images, labels).accuracy(assignment, rate)


@dataclass
class BruteForceReport:
    results: list[PartitionResult]
    learned: dict[float, PartitionResult]
    unpruned: float

    def at_rate(self, rate: float) -> list[PartitionResult]:
        return [r for r in self.results if r.rate == rate]

    def summary(self) -> list[dict]:
        """Best / worst / average / learned rows per rate."""
        rows = []
        for rate in sorted({r.rate for r in self.results}):
            rs = self.at_rate(rate)
            best = max(rs, key=lambda r: r.accuracy)
            worst = min(rs, key=lambda r: r.accuracy)
            mean = float(np.mean([r.accuracy for r in rs]))
            rows.append({"rate": rate, "case": "best", "groups": _fmt(best), "accuracy": best.accuracy})
            rows.append({"rate": rate, "case": "worst", "groups": _fmt(worst), "accuracy": worst.accuracy})
            rows.append({"rate": rate, "case": "average", "groups": "-", "accuracy": mean})
            if rate in self.learned:
                l = self.learned[rate]
                rows.append({"rate": rate, "case": "learned", "groups": _fmt(l), "accuracy": l.accuracy})
        return rows

    def mean(self, rate: float) -> float:
        accs = [r.accuracy for r in self.at_rate(rate)]
        return math.fsum(accs) / len(accs)  # exact sum: ties must not drift above the common value

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["partition", "rate", "accuracy"])
        for r in self.results:
            w.writerow([_fmt(r), r.rate, f"{r.accuracy:.2f}"])
        return buf.getvalue()

    def summary_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["rate", "case", "groups", "accuracy"])
        for row in self.summary():
            w.writerow([row["rate"], row["case"], row["groups"], f"{row['accuracy']:.2f}"])
        return buf.getvalue()


def _fmt(r: PartitionResult) -> str:
    return "".join("[" + ",".join(str(k) for k in g) + "]" for g in r.groups())


def brute_force_study(
    model: Model,
    layer: str,
    n_groups: int,
    images: np.ndarray,
    labels: np.ndarray,
    rates=RATES,
    learned: GroupAssignment | None = None,
    on_result=None,
) -> BruteForceReport:
    """Evaluate every partition of ``layer``'s filters at each pruning rate."""
    n_filters = model.params[f"{layer}.weight"].shape[0]
    partitions = enumerate_partitions(n_filters, n_groups)
    ev = PartitionEvaluator(model, layer, images, labels)
    queries = [(a, rate) for rate in rates for a in partitions]
    results = []
    for (a, rate), acc in zip(queries, ev.accuracies(queries)):
        r = PartitionResult(a.group_of_filter, rate, acc)
        results.append(r)
        if on_result is not None:
            on_result(r)
    learned_rows = {}
    if learned is not None:
        key = canonical_labels(learned.group_of_filter)
        for r in results:
            if r.labels == key:
                learned_rows[r.rate] = r
    return BruteForceReport(results, learned_rows, ev.accuracy(partitions[0], 0.0))
