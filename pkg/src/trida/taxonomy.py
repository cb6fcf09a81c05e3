"""Taxonomy-based semantic similarity and pre-training class selection.

Similarity between two classes is ``1 / (1 + d)`` where ``d`` is the
unweighted shortest-path length between their nodes in a hierarchy tree
(WordNet-style).  A pre-training class is kept when its maximum similarity
to any target class strictly exceeds a threshold ``tau``.  Class names may
resolve to several nodes (synsets); similarity then takes the maximum over
node pairs.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import networkx as nx
import numpy as np

from trida.data import SHAPE_CATALOG, LabeledDataset
from trida.errors import LookupFailure, ValidationError

# Hierarchy used by the toy benchmark: every shape-class name is a leaf.
TOY_TAXONOMY_EDGES = [
    ("shape", "round"), ("shape", "polygon"), ("shape", "stroke"),
    ("round", "circle"), ("round", "ring"),
    ("polygon", "square"), ("polygon", "triangle"), ("polygon", "diamond"),
    ("polygon", "pentagon"),
    ("stroke", "cross"), ("stroke", "xmark"), ("stroke", "hbar"),
    ("stroke", "lshape"),
]
assert set(SHAPE_CATALOG) <= {c for _, c in TOY_TAXONOMY_EDGES}


class Taxonomy:
    """Connected hierarchy graph with class-name to node resolution."""

    def __init__(self, edges: list[tuple[str, str]],
                 class_map: dict[str, list[str]] | None = None):
        g = nx.Graph()
        g.add_edges_from(edges)
        if g.number_of_nodes() == 0:
            raise ValidationError("taxonomy has no edges")
        if not nx.is_connected(g):
            comps = sorted(nx.connected_components(g), key=len, reverse=True)
            orphans = [sorted(c)[:5] for c in comps[1:4]]
            raise ValidationError(
                f"taxonomy is disconnected; orphan components (samples): {orphans}")
        self.graph = g
        self.class_map = dict(class_map or {})

    @property
    def n_nodes(self) -> int:
        return self.graph.number_of_nodes()

    def has_node(self, node: str) -> bool:
        return self.graph.has_node(node)

    def resolve(self, class_id: str) -> list[str]:
        """Nodes for a class name: explicit mapping first, then the literal
        name, then a lowercase/underscore normalization of it."""
        if class_id in self.class_map:
            return self.class_map[class_id]
        if self.graph.has_node(class_id):
            return [class_id]
        normalized = class_id.lower().replace(" ", "_").replace("-", "_")
        if self.graph.has_node(normalized):
            return [normalized]
        raise LookupFailure(f"class {class_id!r} resolves to no taxonomy node")

    def distances_from(self, nodes: list[str]) -> dict[str, int]:
        """Min unweighted distance from any of ``nodes`` to every node."""
        dist: dict[str, int] = {}
        for layer, members in enumerate(nx.bfs_layers(self.graph, nodes)):
            for m in members:
                dist[m] = layer
        return dist


def load_taxonomy(source, class_map_path=None) -> Taxonomy:
    """Load the builtin toy taxonomy (``"builtin:toy"``) or a ``parent child``
    edge-list file, with an optional ``class synset`` mapping file."""
    if source == "builtin:toy":
        edges = list(TOY_TAXONOMY_EDGES)
    else:
        path = Path(source)
        if not path.is_file():
            raise FileNotFoundError(f"taxonomy file not found: {path}")
        edges = []
        for ln, line in enumerate(path.read_text().splitlines(), start=1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            tokens = line.split()
            if len(tokens) != 2:
                raise ValidationError(
                    f"{path}:{ln}: expected 'parent child', got {line!r}")
            edges.append((tokens[0], tokens[1]))
    tax = Taxonomy(edges)
    if class_map_path is not None:
        tax.class_map = load_class_map(class_map_path, tax)
    return tax


def load_class_map(path, taxonomy: Taxonomy | None = None) -> dict[str, list[str]]:
    """Read ``class_id synset_id`` lines; repeated class ids accumulate."""
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"class map not found: {path}")
    mapping: dict[str, list[str]] = {}
    for ln, line in enumerate(path.read_text().splitlines(), start=1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        tokens = line.split()
        if len(tokens) != 2:
            raise ValidationError(
                f"{path}:{ln}: expected 'class synset', got {line!r}")
        cls, synset = tokens
        if taxonomy is not None and not taxonomy.has_node(synset):
            raise ValidationError(
                f"{path}:{ln}: unknown node reference {synset!r}")
        mapping.setdefault(cls, []).append(synset)
    return mapping


def path_similarity(tax: Taxonomy, c1: str, c2: str) -> float:
    """1 / (1 + shortest-path length), maximized over node pairs."""
    nodes1, nodes2 = tax.resolve(c1), tax.resolve(c2)
    dist = tax.distances_from(nodes1)
    best = None
    for n in nodes2:
        if n in dist and (best is None or dist[n] < best):
            best = dist[n]
    if best is None:  # unreachable cannot happen on a connected graph
        return 0.0
    return 1.0 / (1.0 + best)


@dataclass
class SelectionResult:
    selected: list[str]                       # descending score, then name
    best_match: dict[str, tuple[str, float]]  # class -> (target class, score)
    tau: float

    def scores(self) -> dict[str, float]:
        return {c: s for c, (_, s) in self.best_match.items()}


def select_pretrain_classes(tax: Taxonomy, pretrain_classes: list[str],
                            target_classes: list[str], tau: float) -> SelectionResult:
    """Keep pre-training classes whose best target-class similarity > tau."""
    if not 0.0 <= tau < 1.0:
        raise ValidationError("tau must lie in [0, 1)")
    # one BFS per target class, then score every pre-training class
    target_dists = {tc: tax.distances_from(tax.resolve(tc))
                    for tc in target_classes}
    best_match: dict[str, tuple[str, float]] = {}
    for pc in pretrain_classes:
        nodes = tax.resolve(pc)
        best_tc, best_sim = None, -1.0
        for tc in sorted(target_dists):
            dmap = target_dists[tc]
            ds = [dmap[n] for n in nodes if n in dmap]
            if not ds:
                continue
            sim = 1.0 / (1.0 + min(ds))
            if sim > best_sim:
                best_tc, best_sim = tc, sim
        if best_tc is None:
            raise LookupFailure(f"class {pc!r} unreachable from target classes")
        best_match[pc] = (best_tc, best_sim)
    selected = [pc for pc in pretrain_classes if best_match[pc][1] > tau]
    selected.sort(key=lambda pc: (-best_match[pc][1], pc))
    return SelectionResult(selected, best_match, tau)


def build_pretrain_subset(dataset: LabeledDataset, selection: SelectionResult,
                          per_class_cap: int | None = None) -> LabeledDataset:
    """Filter to the selected classes, cap samples per class, relabel
    compactly into 0..len(selected)-1 following the selection order."""
    missing = [c for c in selection.selected if c not in dataset.class_set]
    if missing:
        raise ValidationError(f"selected classes not in dataset: {missing}")
    old_index = {c: i for i, c in enumerate(dataset.class_set)}
    keep_idx, new_labels = [], []
    for new_label, cls in enumerate(selection.selected):
        cls_positions = np.flatnonzero(dataset.labels == old_index[cls])
        if per_class_cap is not None:
            cls_positions = cls_positions[:per_class_cap]
        keep_idx.extend(cls_positions.tolist())
        new_labels.extend([new_label] * len(cls_positions))
    keep_idx = np.asarray(keep_idx, dtype=np.int64)
    return LabeledDataset(dataset.images[keep_idx], np.asarray(new_labels),
                          list(selection.selected), dataset.domain_role)


def export_selection_csv(selection: SelectionResult, path) -> None:
    """Audit CSV, one row per evaluated class (descending score)."""
    rows = sorted(selection.best_match.items(), key=lambda kv: (-kv[1][1], kv[0]))
    chosen = set(selection.selected)
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["class", "best_match", "score", "selected"])
        for cls, (tc, score) in rows:
            writer.writerow([cls, tc, f"{score:.6f}", int(cls in chosen)])
