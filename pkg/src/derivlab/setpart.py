"""Set partitions of ``{1, ..., n}``.

Partitions index the terms of the multivariate chain rule for the diffusion
coefficient.  Every partition is stored in canonical form: indices sorted
inside each block and blocks sorted by their minimum.  Families are emitted in
lexicographic order of that canonical form so fixtures are reproducible.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterator

#: Default ceiling on ``n``; Bell(12) is roughly 4.2 million partitions.
MAX_ENUMERATION_N = 12


class PartitionError(ValueError):
    """Raised for malformed partitions or families."""


@dataclass(frozen=True)
class SetPartition:
    """A partition of ``{1, ..., n}`` into nonempty disjoint blocks."""

    n: int
    blocks: tuple[tuple[int, ...], ...]

    def __post_init__(self) -> None:
        if self.n < 0:
            raise PartitionError(f"ground set size must be >= 0, got {self.n}")
        seen: set[int] = set()
        prev_min = 0
        for block in self.blocks:
            if not block:
                raise PartitionError("empty block")
            if any(a >= b for a, b in zip(block, block[1:])):
                raise PartitionError(f"block {block} is not strictly increasing")
            if block[0] <= prev_min:
                raise PartitionError("blocks are not in block-min order")
            prev_min = block[0]
            for i in block:
                if i in seen:
                    raise PartitionError(f"index {i} appears in two blocks")
                seen.add(i)
        if seen != set(range(1, self.n + 1)):
            raise PartitionError(f"blocks do not cover {{1..{self.n}}}")

    @classmethod
    def from_blocks(cls, n: int, blocks) -> "SetPartition":
        """Build the canonical partition from blocks given in any order."""
        canon = sorted(tuple(sorted(b)) for b in blocks)
        return cls(n, tuple(canon))

    @property
    def num_blocks(self) -> int:
        return len(self.blocks)

    def block_sizes(self) -> tuple[int, ...]:
        return tuple(len(b) for b in self.blocks)

    def __iter__(self) -> Iterator[tuple[int, ...]]:
        return iter(self.blocks)

    def __len__(self) -> int:
        return len(self.blocks)

    def __str__(self) -> str:
        inner = ", ".join("{" + ",".join(map(str, b)) + "}" for b in self.blocks)
        return "{" + inner + "}"


@dataclass(frozen=True)
class PartitionFamily:
    """A finite family of distinct partitions of the same ground set."""

    n: int
    members: tuple[SetPartition, ...]

    def __post_init__(self) -> None:
        for p in self.members:
            if p.n != self.n:
                raise PartitionError(
                    f"member {p} partitions {{1..{p.n}}}, family expects n={self.n}"
                )
        if len(set(self.members)) != len(self.members):
            raise PartitionError("family members are not pairwise distinct")

    def __iter__(self) -> Iterator[SetPartition]:
        return iter(self.members)

    def __len__(self) -> int:
        return len(self.members)

    def __contains__(self, item) -> bool:
        return item in set(self.members)


def bell_number(n: int) -> int:
    """Number of partitions of an ``n``-set (Bell triangle)."""
    if n < 0:
        raise ValueError("n must be >= 0")
    row = [1]
    for _ in range(n):
        nxt = [row[-1]]
        for x in row:
            nxt.append(nxt[-1] + x)
        row = nxt
    return row[0]


def _check_cap(n: int, allow_large: bool) -> None:
    if n > MAX_ENUMERATION_N and not allow_large:
        raise PartitionError(
            f"n={n} exceeds the enumeration cap {MAX_ENUMERATION_N}; "
            "pass allow_large=True to override"
        )


def _restricted_growth(n: int) -> Iterator[list[int]]:
    # a[i] <= 1 + max(a[:i]); each string is one partition.
    a = [0] * n
    m = [0] * n  # running max of a[:i+1]
    while True:
        yield a
        i = n - 1
        while i > 0 and a[i] == m[i - 1] + 1:
            i -= 1
        if i == 0:
            return
        a[i] += 1
        m[i] = max(m[i - 1], a[i])
        for j in range(i + 1, n):
            a[j] = 0
            m[j] = m[i]


def enumerate_partitions(n: int, *, allow_large: bool = False) -> PartitionFamily:
    """Return all partitions of ``{1..n}`` in lexicographic canonical order.

    For ``n = 0`` the family holds exactly one member, the partition of the
    empty set with no blocks, so that ``len`` equals the Bell number for all n.
    """
    if n < 0:
        raise PartitionError("n must be >= 0")
    _check_cap(n, allow_large)
    if n == 0:
        return PartitionFamily(0, (SetPartition(0, ()),))
    canon = []
    for rgs in _restricted_growth(n):
        blocks: list[list[int]] = []
        for idx, label in enumerate(rgs, start=1):
            if label == len(blocks):
                blocks.append([idx])
            else:
                blocks[label].append(idx)
        canon.append(tuple(tuple(b) for b in blocks))
    canon.sort()
    return PartitionFamily(n, tuple(SetPartition(n, b) for b in canon))


def extend_recursive(family: PartitionFamily) -> PartitionFamily:
    """Build the partitions of ``{1..n+1}`` from those of ``{1..n}``.

    Each partition either receives ``{n+1}`` as a new singleton block or has
    ``n+1`` inserted into exactly one of its blocks.
    """
    n = family.n
    if n == 0:
        raise PartitionError("extension needs n >= 1; enumerate_partitions owns base cases")
    if len(family) != bell_number(n):
        raise PartitionError(
            f"family has {len(family)} members, a complete family for n={n} has {bell_number(n)}"
        )
    _check_cap(n + 1, allow_large=True)
    new_singleton = [p.blocks + ((n + 1,),) for p in family]
    inserted = [
        p.blocks[:i] + (p.blocks[i] + (n + 1,),) + p.blocks[i + 1 :]
        for p in family
        for i in range(len(p.blocks))
    ]
    canon = sorted(new_singleton + inserted)
    return PartitionFamily(n + 1, tuple(SetPartition(n + 1, b) for b in canon))


def pair_partitions(family: PartitionFamily) -> PartitionFamily:
    """Members whose blocks all have at most two elements."""
    kept = tuple(p for p in family if all(len(b) <= 2 for b in p.blocks))
    return PartitionFamily(family.n, kept)


def pair_partition_blocks(n: int, *, allow_large: bool = False) -> list[tuple[tuple[int, ...], ...]]:
    """Canonical blocks of every partition of ``{1..n}`` with block sizes <= 2.

    Generated directly (matchings plus fixed points) without enumerating the
    full family, in the same lexicographic order as ``pair_partitions``.
    """
    if n < 0:
        raise PartitionError("n must be >= 0")
    _check_cap(n, allow_large)
    if n == 0:
        return [()]

    def rec(rest: tuple[int, ...]) -> list[list[tuple[int, ...]]]:
        if not rest:
            return [[]]
        head, tail = rest[0], rest[1:]
        out = [[(head,)] + r for r in rec(tail)]
        for idx, partner in enumerate(tail):
            remaining = tail[:idx] + tail[idx + 1 :]
            out.extend([[(head, partner)] + r for r in rec(remaining)])
        return out

    return sorted(tuple(blocks) for blocks in rec(tuple(range(1, n + 1))))


def singleton_count(p: SetPartition) -> int:
    """Number of singleton blocks of a partition with blocks of size <= 2."""
    if any(len(b) > 2 for b in p.blocks):
        raise PartitionError(f"{p} has a block with more than two elements")
    return sum(1 for b in p.blocks if len(b) == 1)


def falling_half_product(k: int) -> int:
    """``prod_{i=0}^{k-1} (1 - 2i)``; the empty product for ``k = 0`` is 1."""
    out = 1
    for i in range(k):
        out *= 1 - 2 * i
    return out

