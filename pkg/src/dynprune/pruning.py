"""One-shot group-channel pruning.

After group learning every grouped layer's filters are partitioned by the
argmax of their logits. Within each group the input channels ("group
channels") are ranked by energy and the cheapest ones are removed for as long
as the removed energy stays below a fraction ``beta`` of the group's total.

The result is a :class:`PrunedStructure`: per conv/linear layer, a list of
groups with the filters they own and the input channels they still read.
Gather lists may overlap between groups; filter sets never do.
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field

import numpy as np

from .errors import ConfigError, StructuralError
from .grouping import GroupParameters
from .model import ConvLayerSpec, LinearSpec, Model, NetworkSpec


@dataclass(frozen=True)
class GroupAssignment:
    """``group_of_filter[k]`` is the (0-based) group of filter k."""

    group_of_filter: tuple[int, ...]
    n_groups: int

    def __post_init__(self):
        object.__setattr__(self, "group_of_filter", tuple(int(g) for g in self.group_of_filter))
        if self.n_groups < 1:
            raise ValueError("n_groups must be >= 1")
        if any(g < 0 or g >= self.n_groups for g in self.group_of_filter):
            raise ValueError(f"group labels must lie in [0, {self.n_groups}): {self.group_of_filter}")

    @property
    def n_filters(self) -> int:
        return len(self.group_of_filter)

    def groups(self) -> list[list[int]]:
        out: list[list[int]] = [[] for _ in range(self.n_groups)]
        for k, g in enumerate(self.group_of_filter):
            out[g].append(k)
        return out

    def one_hot(self) -> np.ndarray:
        a = np.zeros((self.n_filters, self.n_groups))
        a[np.arange(self.n_filters), self.group_of_filter] = 1.0
        return a

    @classmethod
    def from_groups(cls, groups, n_filters: int | None = None) -> "GroupAssignment":
        n_filters = sum(len(g) for g in groups) if n_filters is None else n_filters
        labels = [-1] * n_filters
        for p, members in enumerate(groups):
            for k in members:
                if labels[k] != -1:
                    raise ValueError(f"filter {k} appears in two groups")
                labels[k] = p
        if -1 in labels:
            raise ValueError("every filter needs a group")
        return cls(tuple(labels), len(groups))


def discretize_alpha(params: GroupParameters) -> dict[str, GroupAssignment]:
    """Assign each filter to argmax_j pi[k, j]; ties go to the lowest group index."""
    return {
        name: GroupAssignment(tuple(np.argmax(pi, axis=1)), params.n_groups) for name, pi in sorted(params.logits.items())
    }


def compute_importance(weight: np.ndarray, assignment: GroupAssignment) -> np.ndarray:
    """Scores (N, C_in): squared norm of each group's slice at each input channel."""
    if weight.shape[0] != assignment.n_filters:
        raise StructuralError(f"weight has {weight.shape[0]} filters, assignment {assignment.n_filters}")
    per_filter = (weight * weight).sum(axis=(2, 3))  # (C_out, C_in)
    out = np.zeros((assignment.n_groups, weight.shape[1]))
    for p, members in enumerate(assignment.groups()):
        if members:
            out[p] = per_filter[members].sum(axis=0)
    return out


def _check_beta(beta: float) -> None:
    if not (0.0 <= beta < 1.0):
        raise ConfigError(f"beta must lie in [0, 1), got {beta}")


def _ascending(scores: np.ndarray) -> np.ndarray:
    # stable sort: equal scores keep index order
    return np.argsort(scores, kind="stable")


def redundant_by_ratio(scores: np.ndarray, beta: float) -> list[int]:
    """Largest prefix of the ascending order whose energy share stays below ``beta``.

    A group with zero total energy counts as ratio 0, so everything goes for
    any beta > 0 and nothing for beta = 0.
    """
    _check_beta(beta)
    scores = np.asarray(scores, dtype=np.float64)
    total = scores.sum()
    pruned: list[int] = []
    acc = 0.0
    for m in _ascending(scores):
        nxt = acc + scores[m]
        ratio = nxt / total if total > 0 else 0.0
        if not ratio < beta:
            break
        pruned.append(int(m))
        acc = nxt
    return sorted(pruned)


def redundant_by_rate(scores: np.ndarray, rate: float) -> list[int]:
    """The ``round(rate * n)`` lowest-scoring entries."""
    if not (0.0 <= rate <= 1.0):
        raise ConfigError(f"rate must lie in [0, 1], got {rate}")
    n = int(round(rate * len(scores)))
    return sorted(int(m) for m in _ascending(np.asarray(scores, dtype=np.float64))[:n])


def find_redundant_channels(
    scores: np.ndarray, assignment: GroupAssignment, beta: float
) -> list[list[int]]:
    """Per-group pruned input channels under the energy-ratio bound; empty groups prune nothing."""
    _check_beta(beta)
    out = []
    for p, members in enumerate(assignment.groups()):
        out.append(redundant_by_ratio(scores[p], beta) if members else [])
    return out


def prune_filters(weight: np.ndarray, beta: float) -> list[int]:
    """Kept filter indices under the same energy-ratio rule applied over whole filters."""
    energy = (weight.reshape(weight.shape[0], -1) ** 2).sum(axis=1)
    drop = set(redundant_by_ratio(energy, beta))
    return [k for k in range(weight.shape[0]) if k not in drop]


@dataclass
class GroupStructure:
    filters: list[int]
    gather: list[int]
    pruned_channels: list[int] = field(default_factory=list)
    energy_ratio: float = 0.0

    @property
    def pruned_fraction(self) -> float:
        n = len(self.gather) + len(self.pruned_channels)
        return len(self.pruned_channels) / n if n else 0.0


@dataclass
class LayerStructure:
    kind: str  # "conv" or "linear"
    in_channels: int
    out_channels: int
    groups: list[GroupStructure]

    def kept_filters(self) -> list[int]:
        return sorted(k for g in self.groups for k in g.filters)

    def used_inputs(self) -> set[int]:
        return {m for g in self.groups if g.filters for m in g.gather}


@dataclass
class PrunedStructure:
    layers: dict[str, LayerStructure]
    beta: float | None = None
    rate: float | None = None

    def to_json(self) -> str:
        return json.dumps(
            {"beta": self.beta, "rate": self.rate, "layers": {k: asdict(v) for k, v in self.layers.items()}},
            sort_keys=True,
            indent=1,
        )

    @classmethod
    def from_json(cls, text: str) -> "PrunedStructure":
        raw = json.loads(text)
        layers = {}
        for name, l in raw["layers"].items():
            groups = [GroupStructure(**g) for g in l["groups"]]
            layers[name] = LayerStructure(l["kind"], l["in_channels"], l["out_channels"], groups)
        return cls(layers, raw.get("beta"), raw.get("rate"))

    def validate(self) -> None:
        for name, layer in self.layers.items():
            seen: set[int] = set()
            for p, g in enumerate(layer.groups):
                if list(g.gather) != sorted(set(g.gather)):
                    raise StructuralError(f"{name} group {p}: gather list not strictly increasing")
                if any(m < 0 or m >= layer.in_channels for m in g.gather):
                    raise StructuralError(f"{name} group {p}: gather index out of range")
                if seen & set(g.filters):
                    raise StructuralError(f"{name} group {p}: filter owned by two groups")
                seen |= set(g.filters)
            if not seen:
                raise StructuralError(f"{name}: no surviving filters")


def _layer_links(spec: NetworkSpec) -> list[tuple[int, int]]:
    """(producer, consumer) pairs of consecutive conv/linear layers."""
    idx = [i for i, l in enumerate(spec.layers) if isinstance(l, (ConvLayerSpec, LinearSpec))]
    return list(zip(idx[:-1], idx[1:]))


def _propagate(spec: NetworkSpec, layers: dict[str, LayerStructure]) -> None:
    """Drop channels nobody reads and reads of channels nobody produces, to a fixed point."""
    changed = True
    while changed:
        changed = False
        for i, j in _layer_links(spec):
            prod, cons = layers[spec.name(i)], layers[spec.name(j)]
            alive = set(prod.kept_filters())
            for g in cons.groups:
                kept = [m for m in g.gather if m in alive]
                if kept != g.gather:
                    g.gather = kept
                    changed = True
                if not g.gather and g.filters:
                    g.filters = []
                    changed = True
            used = cons.used_inputs()
            for g in prod.groups:
                kept = [k for k in g.filters if k in used]
                if kept != g.filters:
                    g.filters = kept
                    changed = True


def _group_channels(weight, assignment, beta, rate):
    scores = compute_importance(weight, assignment)
    c_in = weight.shape[1]
    groups = []
    for p, members in enumerate(assignment.groups()):
        if not members:
            groups.append(GroupStructure([], [], [], 0.0))
            continue
        if rate is not None:
            pruned = redundant_by_rate(scores[p], rate)
        else:
            pruned = redundant_by_ratio(scores[p], beta)
        total = scores[p].sum()
        ratio = float(scores[p][pruned].sum() / total) if total > 0 else 0.0
        gather = [m for m in range(c_in) if m not in set(pruned)]
        groups.append(GroupStructure(list(members) if gather else [], gather, pruned, ratio))
    return groups


def build_structure(
    model: Model,
    layer_groups: dict[str, list[GroupStructure]],
    beta: float | None = None,
    rate: float | None = None,
    filter_keep: dict[str, list[int]] | None = None,
) -> PrunedStructure:
    """Complete per-layer group lists with identity groups for untouched layers,
    apply filter pruning, then propagate dead channels between layers."""
    spec = model.spec
    filter_keep = filter_keep or {}
    layers: dict[str, LayerStructure] = {}
    for i, layer in enumerate(spec.layers):
        name = spec.name(i)
        if isinstance(layer, ConvLayerSpec):
            c_in, c_out, kind = layer.in_channels, layer.out_channels, "conv"
        elif isinstance(layer, LinearSpec):
            shp = spec.input_shape_of(i)
            c_in = shp[0] if len(shp) == 3 else layer.in_features
            c_out, kind = layer.out_features, "linear"
        else:
            continue
        groups = layer_groups.get(name) or [GroupStructure(list(range(c_out)), list(range(c_in)))]
        if name in filter_keep:
            keep = set(filter_keep[name])
            for g in groups:
                g.filters = [k for k in g.filters if k in keep]
        layers[name] = LayerStructure(kind, c_in, c_out, groups)
    _propagate(spec, layers)
    for name, l in layers.items():
        if not l.kept_filters():
            raise StructuralError(f"pruning leaves layer {name} without output filters")
    out = PrunedStructure(layers, beta, rate)
    out.validate()
    return out


def prune(
    model: Model,
    assignments: dict[str, GroupAssignment],
    beta: float | None = None,
    rate: float | None = None,
    filter_beta: dict[str, float] | None = None,
) -> tuple[PrunedStructure, dict[str, np.ndarray]]:
    """Group-channel pruning of every assigned layer (by ``beta`` or a fixed ``rate``).

    ``filter_beta`` additionally removes whole filters of the named layers
    under the same energy-ratio rule. Returns the structure and the masked
    dense weights (pruned entries zeroed).
    """
    if (beta is None) == (rate is None):
        raise ConfigError("give exactly one of beta or rate")
    if beta is not None:
        _check_beta(beta)
    layer_groups = {}
    for name, assignment in assignments.items():
        w = model.params[f"{name}.weight"].data
        layer_groups[name] = _group_channels(w, assignment, beta, rate)
    filter_keep = {}
    for name, fb in (filter_beta or {}).items():
        filter_keep[name] = prune_filters(model.params[f"{name}.weight"].data, fb)
    structure = build_structure(model, layer_groups, beta, rate, filter_keep)
    return structure, masked_weights(model, structure)


def layer_masks(spec: NetworkSpec, structure: PrunedStructure) -> dict[str, np.ndarray]:
    """0/1 masks over conv (C_out, C_in) and linear (out, in) weights."""
    masks = {}
    for i, layer in enumerate(spec.layers):
        name = spec.name(i)
        if name not in structure.layers:
            continue
        ls = structure.layers[name]
        if isinstance(layer, ConvLayerSpec):
            m = np.zeros((layer.out_channels, layer.in_channels))
            for g in ls.groups:
                if g.filters and g.gather:
                    m[np.ix_(g.filters, g.gather)] = 1.0
            masks[name] = m[:, :, None, None] * np.ones((1, 1) + tuple(layer.kernel))
        elif isinstance(layer, LinearSpec):
            block = spec.channel_block(i) if ls.in_channels != layer.in_features else 1
            cols = np.zeros(layer.in_features)
            for g in ls.groups:
                for m in g.gather:
                    cols[m * block : (m + 1) * block] = 1.0
            rows = np.zeros(layer.out_features)
            for g in ls.groups:
                rows[g.filters] = 1.0
            masks[name] = rows[:, None] * cols[None, :]
    return masks


def masked_weights(model: Model, structure: PrunedStructure) -> dict[str, np.ndarray]:
    """Copy of the model state with every pruned weight set to zero."""
    state = model.state()
    for name, mask in layer_masks(model.spec, structure).items():
        state[f"{name}.weight"] = state[f"{name}.weight"] * mask
    return state


def masked_model(model: Model, structure: PrunedStructure) -> Model:
    out = model.copy()
    out.load_state(masked_weights(model, structure))
    return out


def structure_report(structure: PrunedStructure) -> str:
    """Human-readable per-layer summary: groups, kept filters, gather lists."""
    lines = []
    if structure.beta is not None:
        lines.append(f"beta = {structure.beta}")
    if structure.rate is not None:
        lines.append(f"rate = {structure.rate}")
    for name, layer in structure.layers.items():
        lines.append("")
        kept = layer.kept_filters()
        lines.append(f"[{name}] {layer.kind} in={layer.in_channels} out={layer.out_channels} kept_filters={len(kept)}")
        for p, g in enumerate(layer.groups):
            if not g.filters:
                lines.append(f"  group {p}: empty (eliminated)")
                continue
            lines.append(
                f"  group {p}: filters={g.filters} gather={g.gather} "
                f"pruned={len(g.pruned_channels)}/{len(g.gather) + len(g.pruned_channels)} "
                f"energy_ratio={g.energy_ratio:.4f}"
            )
    return "\n".join(lines).lstrip("\n") + "\n"
