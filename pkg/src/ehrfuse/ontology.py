"""Code ontologies and graph-attention embedding of their leaves.

Each code kind (diagnosis, medication) gets its own rooted tree whose leaves
are vocabulary codes. Leaf embeddings are produced in two attention passes:
every internal node first aggregates itself and its direct children, then
every leaf aggregates itself and its ancestors using the enhanced internal
features.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import torch
from torch import nn

from .numerics import ShapeError, softmax
from .vocab import CodeVocab, VocabError


class OntologyError(ValueError):
    pass


@dataclass
class OntologyTree:
    """A rooted forest; ``roots`` holds one root per code kind."""

    names: list[str]
    parent: list[int]
    leaves: dict[str, int]  # code -> node id
    roots: list[int] = field(default_factory=list)

    def __post_init__(self):
        n = len(self.names)
        if len(self.parent) != n:
            raise OntologyError("parent array length mismatch")
        self.children: list[list[int]] = [[] for _ in range(n)]
        for child, par in enumerate(self.parent):
            if par >= 0:
                self.children[par].append(child)
        if not self.roots:
            self.roots = [i for i, p in enumerate(self.parent) if p < 0]
        self.depth = [self._depth(i) for i in range(n)]
        leaf_nodes = set(self.leaves.values())
        for code, node in self.leaves.items():
            if self.children[node]:
                raise OntologyError(f"code {code!r} is attached to an internal node")
        for i in range(n):
            if not self.children[i] and i not in leaf_nodes and self.parent[i] >= 0:
                raise OntologyError(f"leaf node {self.names[i]!r} carries no code")

    def _depth(self, i: int) -> int:
        d, seen = 0, set()
        while self.parent[i] >= 0:
            if i in seen:
                raise OntologyError("cycle in ontology")
            seen.add(i)
            i = self.parent[i]
            d += 1
        return d

    @property
    def n_nodes(self) -> int:
        return len(self.names)

    @property
    def internal(self) -> list[int]:
        return [i for i in range(self.n_nodes) if self.children[i]]

    def ancestors(self, node: int) -> list[int]:
        out = []
        while self.parent[node] >= 0:
            node = self.parent[node]
            out.append(node)
        return out

    def subtree(self, root: int) -> "OntologyTree":
        keep, stack = [], [root]
        while stack:
            i = stack.pop()
            keep.append(i)
            stack.extend(reversed(self.children[i]))
        keep.sort()
        remap = {old: new for new, old in enumerate(keep)}
        return OntologyTree(
            names=[self.names[i] for i in keep],
            parent=[remap[self.parent[i]] if i != root else -1 for i in keep],
            leaves={c: remap[n] for c, n in self.leaves.items() if n in remap},
        )

    # -- JSON: {"roots": [...], "edges": [[parent, child], ...], "leaves": {"code": node}}
    def to_json(self) -> dict:
        return {
            "roots": [self.names[r] for r in self.roots],
            "edges": [[self.names[p], self.names[c]] for c, p in enumerate(self.parent) if p >= 0],
            "leaves": {code: self.names[n] for code, n in sorted(self.leaves.items())},
        }

    @classmethod
    def from_json(cls, d: dict) -> "OntologyTree":
        names: list[str] = []
        index: dict[str, int] = {}

        def node(name: str) -> int:
            if name not in index:
                index[name] = len(names)
                names.append(name)
            return index[name]

        for r in d["roots"]:
            node(r)
        edges = [(node(p), node(c)) for p, c in d["edges"]]
        parent = [-1] * len(names)
        for p, c in edges:
            if parent[c] >= 0:
                raise OntologyError(f"node {names[c]!r} has more than one parent")
            parent[c] = p
        roots = [index[r] for r in d["roots"]]
        if sorted(roots) != sorted(i for i, p in enumerate(parent) if p < 0):
            raise OntologyError("declared roots do not match parentless nodes")
        leaves = {}
        for code, name in d["leaves"].items():
            if name not in index:
                raise OntologyError(f"leaf {name!r} for code {code!r} not in edges")
            leaves[code] = index[name]
        return cls(names=names, parent=parent, leaves=leaves, roots=roots)

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_json(), indent=1) + "\n", encoding="utf-8")

    @classmethod
    def load(cls, path: str | Path) -> "OntologyTree":
        return cls.from_json(json.loads(Path(path).read_text(encoding="utf-8")))


class _Builder:
    def __init__(self):
        self.names: list[str] = []
        self.parent: list[int] = []
        self.leaves: dict[str, int] = {}
        self.index: dict[str, int] = {}

    def add(self, name: str, parent: int) -> int:
        if name in self.index:
            return self.index[name]
        self.index[name] = len(self.names)
        self.names.append(name)
        self.parent.append(parent)
        return self.index[name]

    def build(self) -> OntologyTree:
        return OntologyTree(self.names, self.parent, self.leaves)


def _add_synthetic(b: _Builder, kind: str, codes: Sequence[str], n_groups: int | None) -> None:
    codes = sorted(codes)
    root = b.add(f"{kind}/<root>", -1)
    if n_groups is None:
        n_groups = max(1, math.ceil(len(codes) / 10))
    size = math.ceil(len(codes) / n_groups)
    for i, code in enumerate(codes):
        g = b.add(f"{kind}/<G{i // size:02d}>", root)
        b.leaves[code] = b.add(f"{kind}/{code}", g)


def _add_prefix(b: _Builder, kind: str, codes: Sequence[str]) -> None:
    root = b.add(f"{kind}/<root>", -1)
    for code in sorted(codes):
        node = b.add(f"{kind}/<{code[:1]}>", root)
        if len(code) > 3:
            node = b.add(f"{kind}/<{code[:3]}>", node)
        b.leaves[code] = b.add(f"{kind}/{code}", node)


def build_ontology(
    code_vocab: CodeVocab | Sequence[str],
    scheme: str = "synthetic-3-level",
    groups: dict[str, int] | None = None,
) -> OntologyTree:
    """Build a forest with one tree per code kind.

    ``synthetic-3-level``: root -> contiguous groups (about 10 codes each
    unless ``groups[kind]`` says otherwise) -> codes. ``prefix-grouping``:
    root -> first character -> first three characters -> code, where the
    three-character level is skipped if it would equal the code itself.
    A plain sequence of codes is treated as a single ``diag`` tree.
    """
    if isinstance(code_vocab, CodeVocab):
        by_kind = {k: code_vocab.codes_of_kind(k) for k in ("diag", "med")}
    else:
        by_kind = {"diag": list(code_vocab)}
    by_kind = {k: v for k, v in by_kind.items() if v}
    if not by_kind:
        raise OntologyError("empty code vocabulary")
    for codes in by_kind.values():
        if any(not c for c in codes):
            raise OntologyError("empty code string")
    groups = groups or {}
    b = _Builder()
    for kind, codes in by_kind.items():
        if scheme == "synthetic-3-level":
            _add_synthetic(b, kind, codes, groups.get(kind))
        elif scheme == "prefix-grouping":
            _add_prefix(b, kind, codes)
        else:
            raise OntologyError(f"unknown ontology scheme {scheme!r}")
    return b.build()


# ---------------------------------------------------------------------------
# graph attention


def _neighborhood_table(targets: Sequence[int], hoods: Sequence[Sequence[int]]):
    width = max(len(h) for h in hoods)
    idx = torch.zeros(len(targets), width, dtype=torch.long)
    keep = torch.zeros(len(targets), width, dtype=torch.bool)
    for r, (t, h) in enumerate(zip(targets, hoods)):
        if t not in h:
            raise OntologyError(f"neighborhood of node {t} lacks its self-loop")
        idx[r, : len(h)] = torch.as_tensor(list(h))
        keep[r, : len(h)] = True
    return idx, keep


class GatLayer(nn.Module):
    """Multi-head additive graph attention with concatenated heads."""

    def __init__(self, in_width: int, heads: int, head_width: int, slope: float = 0.2, bias: bool = True):
        super().__init__()
        self.heads, self.head_width, self.slope = heads, head_width, slope
        bound = 1.0 / math.sqrt(in_width)
        self.weight = nn.Parameter(torch.empty(in_width, heads * head_width).uniform_(-bound, bound))
        a_bound = 1.0 / math.sqrt(head_width)
        self.att_src = nn.Parameter(torch.empty(heads, head_width).uniform_(-a_bound, a_bound))
        self.att_dst = nn.Parameter(torch.empty(heads, head_width).uniform_(-a_bound, a_bound))
        self.bias = nn.Parameter(torch.zeros(heads * head_width)) if bias else None

    @property
    def out_width(self) -> int:
        return self.heads * self.head_width

    def forward(self, feats, targets, nbr_idx, nbr_keep, return_weights: bool = False):
        """feats [N, in]; targets [T]; nbr_idx/nbr_keep [T, D] -> [T, heads*head_width]."""
        if nbr_idx.shape[0] != targets.shape[0]:
            raise ShapeError("one neighborhood row per target required")
        self_present = ((nbr_idx == targets[:, None]) & nbr_keep).any(dim=1)
        if not bool(self_present.all()):
            raise OntologyError("every neighborhood must include its target (self-loop)")
        proj = (feats @ self.weight).view(-1, self.heads, self.head_width)  # [N, h, w]
        src = proj[nbr_idx]  # [T, D, h, w]
        dst = proj[targets]  # [T, h, w]
        score = (src * self.att_src).sum(-1) + (dst * self.att_dst).sum(-1)[:, None, :]  # [T, D, h]
        score = torch.nn.functional.leaky_relu(score, self.slope)
        alpha = softmax(score, axis=1, mask=nbr_keep[:, :, None])
        out = (alpha[..., None] * src).sum(1).reshape(len(targets), -1)
        if self.bias is not None:
            out = out + self.bias
        return (out, alpha) if return_weights else out


def gat_aggregate(feats, neighborhoods: dict[int, Sequence[int]], layer: GatLayer):
    """Functional form: ``neighborhoods`` maps target node -> member nodes (incl. itself)."""
    targets = list(neighborhoods)
    if any(len(neighborhoods[t]) == 0 for t in targets):
        raise OntologyError("empty neighborhood")
    idx, keep = _neighborhood_table(targets, [neighborhoods[t] for t in targets])
    return layer(feats, torch.as_tensor(targets), idx, keep)


class OntologyEmbedding(nn.Module):
    """Learned node table plus the two GAT passes over one tree.

    ``forward()`` returns leaf embeddings ordered as ``self.codes``.
    ``ancestor_scope`` is ``"all"`` (leaf attends to its whole ancestor chain)
    or ``"parent"`` (direct parent only).
    """

    def __init__(self, tree: OntologyTree, width: int, heads: int, slope: float = 0.2,
                 ancestor_scope: str = "all"):
        super().__init__()
        if width % heads:
            raise ShapeError(f"ontology width {width} not divisible by {heads} heads")
        if ancestor_scope not in ("all", "parent"):
            raise OntologyError(f"ancestor_scope must be 'all' or 'parent', got {ancestor_scope!r}")
        self.codes = sorted(tree.leaves)
        self.node_table = nn.Parameter(torch.empty(tree.n_nodes, width).normal_(0.0, 0.02))
        self.stage1 = GatLayer(width, heads, width // heads, slope)
        self.stage2 = GatLayer(width, heads, width // heads, slope)

        internal = tree.internal
        idx, keep = _neighborhood_table(internal, [[a] + tree.children[a] for a in internal])
        self.register_buffer("internal_nodes", torch.as_tensor(internal, dtype=torch.long), persistent=False)
        self.register_buffer("s1_idx", idx, persistent=False)
        self.register_buffer("s1_keep", keep, persistent=False)

        leaves = [tree.leaves[c] for c in self.codes]
        if ancestor_scope == "all":
            hoods = [[n] + tree.ancestors(n) for n in leaves]
        else:
            hoods = [[n] + tree.ancestors(n)[:1] for n in leaves]
        idx, keep = _neighborhood_table(leaves, hoods)
        self.register_buffer("leaf_nodes", torch.as_tensor(leaves, dtype=torch.long), persistent=False)
        self.register_buffer("s2_idx", idx, persistent=False)
        self.register_buffer("s2_keep", keep, persistent=False)

    def forward(self):
        w_a = self.node_table
        enhanced = self.stage1(w_a, self.internal_nodes, self.s1_idx, self.s1_keep)
        feats = w_a.index_copy(0, self.internal_nodes, enhanced)
        return self.stage2(feats, self.leaf_nodes, self.s2_idx, self.s2_keep)


class CodeTable(nn.Module):
    """Full code embedding table indexed by code id.

    Special ids take free-standing learned rows; every other id takes the
    leaf embedding from its kind's ontology. Recomputed on every call so
    gradients reach the node tables and attention parameters.
    """

    def __init__(self, tree: OntologyTree, code_vocab: CodeVocab, width: int, heads: int,
                 slope: float = 0.2, ancestor_scope: str = "all"):
        super().__init__()
        n_special = len(code_vocab) - len(code_vocab.entries)
        self.specials = nn.Parameter(torch.empty(n_special, width).normal_(0.0, 0.02))
        self.kinds = nn.ModuleDict()
        self.vocab_size = len(code_vocab)
        covered: set[str] = set()
        for root in tree.roots:
            sub = tree.subtree(root)
            kinds = {code_vocab.kinds.get(c) for c in sub.leaves}
            for c in sub.leaves:
                if c not in code_vocab:
                    raise VocabError(f"ontology leaf {c!r} missing from code vocabulary")
            if len(kinds) != 1:
                raise OntologyError(f"tree {tree.names[root]!r} mixes code kinds {kinds}")
            kind = kinds.pop()
            if kind in self.kinds:
                raise OntologyError(f"two trees for code kind {kind!r}")
            emb = OntologyEmbedding(sub, width, heads, slope, ancestor_scope)
            self.kinds[kind] = emb
            self.register_buffer(f"ids_{kind}", torch.as_tensor([code_vocab.id(c) for c in emb.codes]),
                                 persistent=False)
            covered.update(sub.leaves)
        missing = set(code_vocab.entries) - covered
        if missing:
            raise OntologyError(f"codes without an ontology leaf: {sorted(missing)[:5]}")

    def forward(self):
        rows = [self.specials]
        ids = [torch.arange(self.specials.shape[0])]
        for kind, emb in self.kinds.items():
            rows.append(emb())
            ids.append(getattr(self, f"ids_{kind}"))
        order = torch.cat(ids).argsort()
        return torch.cat(rows)[order]


def ontology_embed(table: CodeTable) -> torch.Tensor:
    """Enhanced embedding for every code id, shape ``[|CodeVocab|, width]``."""
    return table()
