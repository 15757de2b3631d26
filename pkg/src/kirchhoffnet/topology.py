"""Directed multigraph connectivity for a single KirchhoffNet layer.

Nodes are indexed ``0 .. num_nodes-1`` over the non-ground nodes; the ground
node is implicit and never appears in ``edges``. Learnable devices from a node
to ground are listed separately in ``ground_edges``.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable, Optional

import numpy as np

from .errors import InvalidArgument, ParseError


@dataclass(frozen=True)
class Topology:
    num_nodes: int
    edges: tuple[tuple[int, int], ...]
    ground_edges: tuple[int, ...] = ()

    def __post_init__(self):
        object.__setattr__(self, "edges", tuple((int(s), int(d)) for s, d in self.edges))
        object.__setattr__(self, "ground_edges", tuple(int(j) for j in self.ground_edges))

    @property
    def num_edges(self) -> int:
        return len(self.edges)

    @property
    def num_devices(self) -> int:
        """Learnable devices: node-to-node edges followed by ground edges."""
        return len(self.edges) + len(self.ground_edges)

    def src_dst(self) -> tuple[np.ndarray, np.ndarray]:
        """Index arrays over all devices; ground edges get destination ``num_nodes``."""
        e = np.asarray(self.edges, dtype=np.int64).reshape(-1, 2)
        g = np.asarray(self.ground_edges, dtype=np.int64)
        src = np.concatenate([e[:, 0], g])
        dst = np.concatenate([e[:, 1], np.full(len(g), self.num_nodes, dtype=np.int64)])
        return src, dst

    def with_ground_edges(self, nodes: Iterable[int], repeat: int = 1) -> "Topology":
        """Return a copy with ``repeat`` ground devices on each of ``nodes``."""
        _check_positive(repeat=repeat)
        extra = tuple(j for j in nodes for _ in range(repeat))
        return Topology(self.num_nodes, self.edges, self.ground_edges + extra)

    def to_text(self) -> str:
        lines = [f"nodes {self.num_nodes}"]
        lines += [f"edge {s} {d}" for s, d in self.edges]
        lines += [f"gedge {j}" for j in self.ground_edges]
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text: str) -> "Topology":
        num_nodes = None
        edges, gedges = [], []
        for lineno, raw in enumerate(text.splitlines(), 1):
            parts = raw.split()
            if not parts:
                continue
            try:
                if parts[0] == "nodes" and len(parts) == 2 and num_nodes is None:
                    num_nodes = int(parts[1])
                elif parts[0] == "edge" and len(parts) == 3 and num_nodes is not None:
                    edges.append((int(parts[1]), int(parts[2])))
                elif parts[0] == "gedge" and len(parts) == 2 and num_nodes is not None:
                    gedges.append(int(parts[1]))
                else:
                    raise ValueError(raw)
            except ValueError:
                raise ParseError(f"line {lineno}: cannot parse {raw!r}") from None
        if num_nodes is None:
            raise ParseError("missing 'nodes' header")
        topo = cls(num_nodes, tuple(edges), tuple(gedges))
        problem = validate(topo)
        if problem is not None:
            raise ParseError(problem)
        return topo


def _check_positive(**kwargs):
    for name, value in kwargs.items():
        if int(value) < 1:
            raise InvalidArgument(f"{name} must be >= 1, got {value}")


def fc_topo(num_node: int, repeat: int = 1) -> Topology:
    """Every ordered pair ``(i, j)``, ``i != j``, repeated ``repeat`` times."""
    _check_positive(num_node=num_node, repeat=repeat)
    edges = [(i, j) for i in range(num_node) for j in range(num_node) if i != j for _ in range(repeat)]
    return Topology(num_node, tuple(edges))


def _kernel_windows(c: int, w: int, h: int, k: int) -> list[list[int]]:
    # Same ordering as an im2col unfold: window positions row-major, and within a
    # window channel-major then kernel row then kernel column.
    ind = np.arange(c * w * h).reshape(c, w, h)
    windows = []
    for r in range(w - k + 1):
        for q in range(h - k + 1):
            windows.append(ind[:, r:r + k, q:q + k].reshape(-1).tolist())
    return windows


def ne_topo(c: int, w: int, h: int, k: int, repeat: int = 1) -> Topology:
    """Neighbor-emphasizing layer: nodes sharing any k-by-k window are fully connected.

    Stride is 1 and every channel is included in each window, so a pair of nodes
    lying in ``m`` common windows is connected ``m * repeat`` times per direction.
    """
    _check_positive(c=c, w=w, h=h, k=k, repeat=repeat)
    if k > min(w, h):
        raise InvalidArgument(f"kernel {k} exceeds grid {w}x{h}")
    edges = [
        (win[a], win[b])
        for win in _kernel_windows(c, w, h, k)
        for a in range(len(win))
        for b in range(len(win))
        if a != b
        for _ in range(repeat)
    ]
    return Topology(c * w * h, tuple(edges))


def proj_topo(c: int, w: int, h: int, k: int, n_proj: int,
              repeat_ne: int = 1, repeat_proj: int = 1) -> Topology:
    """NE layer plus ``n_proj`` projected nodes wired both ways to every grid node."""
    _check_positive(n_proj=n_proj, repeat_proj=repeat_proj)
    base = ne_topo(c, w, h, k, repeat_ne)
    m = base.num_nodes
    edges = list(base.edges)
    for p in range(m, m + n_proj):
        for j in range(m):
            for _ in range(repeat_proj):
                edges.append((p, j))
                edges.append((j, p))
    return Topology(m + n_proj, tuple(edges))


def validate(topology: Topology) -> Optional[str]:
    """Return a description of the first invariant violation, or ``None`` if valid."""
    n = topology.num_nodes
    if n < 1:
        return f"num_nodes must be >= 1, got {n}"
    for idx, (s, d) in enumerate(topology.edges):
        if not (0 <= s < n and 0 <= d < n):
            return f"edge {idx} ({s}, {d}): index out of range for {n} nodes"
        if s == d:
            return f"edge {idx} ({s}, {d}): self-loop"
    for idx, j in enumerate(topology.ground_edges):
        if not 0 <= j < n:
            return f"ground edge {idx} ({j}): index out of range for {n} nodes"
    return None
