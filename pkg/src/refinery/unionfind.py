"""Union-find over dense integer ids with path compression."""

from __future__ import annotations


class UnionFind:
    __slots__ = ("parent",)

    def __init__(self) -> None:
        self.parent: list[int] = []

    def make(self) -> int:
        i = len(self.parent)
        self.parent.append(i)
        return i

    def __len__(self) -> int:
        return len(self.parent)

    def find(self, x: int) -> int:
        p = self.parent
        root = x
        while p[root] != root:
            root = p[root]
        while p[x] != root:
            p[x], x = root, p[x]
        return root

    def union(self, a: int, b: int) -> int:
        """Merge the sets of ``a`` and ``b``; the smaller root id survives."""
        ra, rb = self.find(a), self.find(b)
        if ra == rb:
            return ra
        if rb < ra:
            ra, rb = rb, ra
        self.parent[rb] = ra
        return ra

    def canon(self, ids: tuple[int, ...]) -> tuple[int, ...]:
        find = self.find
        return tuple([find(i) for i in ids])
