"""Architecture encodings, chain and cell search spaces, and sampling.

An architecture is a fixed-length vector of option indices, one per decision
site. Spaces expose per-site option counts; ids are the mixed-radix integer
of the choice vector (most significant site first). Two string notations are
supported: chain encodings render as "1-3-0-2" and cell encodings as
"|op~0|+|op~0|op~1|+|op~0|op~1|op~2|".

Without an external benchmark table we enumerate the raw product space;
filtered counts from dedup'd external id schemes can differ, and reports say
which enumeration produced them.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Iterator

import numpy as np

from .errors import ConfigError, ContractError

CELL_OPS = ("zero", "skip_connect", "conv1x1", "conv3x3", "avgpool3x3")

ENUMERATE_CAP = 10**6


@dataclass(frozen=True)
class ArchEncoding:
    choices: tuple[int, ...]
    space_id: str

    def __post_init__(self):
        if any(c < 0 for c in self.choices):
            raise ContractError(f"negative choice in {self.choices}")

    def __str__(self) -> str:
        return "-".join(str(c) for c in self.choices)


@dataclass(frozen=True)
class ChainSpace:
    """Sequential choice-block space with optional shared downsampling.

    Each option is (depth, groups): a stack of `depth` grouped 3x3 convs.
    With depth == groups every option has an identical convolution parameter
    count (depth * 9C^2/groups = 9C^2), so the default options are
    cost-matched by construction and trade channel connectivity for depth.
    """

    num_layers: int = 8
    options: tuple[tuple[int, int], ...] = ((1, 1), (2, 2), (4, 4), (8, 8))
    strides: tuple[int, ...] = (1, 2, 1, 2, 1, 1, 1, 1)
    downsample_shared: bool = True
    space_id: str = "chain"

    def __post_init__(self):
        if len(self.strides) != self.num_layers:
            raise ConfigError(
                f"chain space: {len(self.strides)} strides for {self.num_layers} layers"
            )
        for d, g in self.options:
            if d % g:
                raise ConfigError(f"option (depth={d}, groups={g}): groups must divide depth")

    @property
    def num_sites(self) -> int:
        return self.num_layers

    def site_options(self, site: int) -> int:
        return len(self.options)

    def radices(self) -> tuple[int, ...]:
        return tuple(len(self.options) for _ in range(self.num_layers))


@dataclass(frozen=True)
class CellSpace:
    """Cell search space: a DAG over nodes where every edge picks one op.

    Node k's output is the sum of its incoming edge outputs. With the default
    4 nodes there are 6 edges; the edge order is (1,0), (2,0), (2,1), (3,0),
    (3,1), (3,2) to match the nested string notation.
    """

    num_nodes: int = 4
    op_set: tuple[str, ...] = CELL_OPS
    space_id: str = "cell"

    def __post_init__(self):
        for op in self.op_set:
            if op not in CELL_OPS:
                raise ConfigError(f"unknown cell op '{op}'")

    @property
    def num_sites(self) -> int:
        return self.num_nodes * (self.num_nodes - 1) // 2

    def site_options(self, site: int) -> int:
        return len(self.op_set)

    def radices(self) -> tuple[int, ...]:
        return tuple(len(self.op_set) for _ in range(self.num_sites))

    def edges(self) -> list[tuple[int, int]]:
        return [(dst, src) for dst in range(1, self.num_nodes) for src in range(dst)]


Space = ChainSpace | CellSpace
ArchFilter = Callable[[ArchEncoding], bool]


def space_size(space: Space) -> int:
    size = 1
    for r in space.radices():
        size *= r
    return size


def arch_id(arch: ArchEncoding, space: Space) -> int:
    """Mixed-radix integer of the choice vector, most significant site first."""
    radices = space.radices()
    if len(arch.choices) != len(radices):
        raise ContractError(
            f"encoding length {len(arch.choices)} != {len(radices)} sites in '{space.space_id}'"
        )
    val = 0
    for c, r in zip(arch.choices, radices):
        if c >= r:
            raise ContractError(f"choice {c} out of range for site with {r} options")
        val = val * r + c
    return val


def arch_from_id(val: int, space: Space) -> ArchEncoding:
    radices = space.radices()
    if not 0 <= val < space_size(space):
        raise ContractError(f"id {val} outside [0, {space_size(space)}) for '{space.space_id}'")
    out = []
    for r in reversed(radices):
        out.append(val % r)
        val //= r
    return ArchEncoding(choices=tuple(reversed(out)), space_id=space.space_id)


def enumerate_space(
    space: Space, arch_filter: ArchFilter | None = None, cap: int = ENUMERATE_CAP
) -> Iterator[ArchEncoding]:
    """Yield every encoding exactly once in lexicographic order."""
    size = space_size(space)
    if size > cap:
        raise ConfigError(
            f"space '{space.space_id}' has {size} architectures (cap {cap}); "
            f"use sample_uniform instead"
        )
    for val in range(size):
        arch = arch_from_id(val, space)
        if arch_filter is None or arch_filter(arch):
            yield arch


def sample_uniform(space: Space, rng: np.random.Generator) -> ArchEncoding:
    """Sample each decision site independently and uniformly."""
    choices = tuple(int(rng.integers(0, r)) for r in space.radices())
    return ArchEncoding(choices=choices, space_id=space.space_id)


def mutate(arch: ArchEncoding, space: Space, rng: np.random.Generator, k: int = 1) -> ArchEncoding:
    """Change exactly k sites, each to a different valid option."""
    radices = space.radices()
    if k > len(radices):
        raise ContractError(f"k={k} exceeds {len(radices)} sites")
    if k == 0:
        return arch
    mutable = [i for i, r in enumerate(radices) if r > 1]
    if len(mutable) < k:
        raise ContractError(f"only {len(mutable)} sites have alternatives, k={k}")
    sites = rng.choice(len(mutable), size=k, replace=False)
    choices = list(arch.choices)
    for s in sites:
        site = mutable[int(s)]
        r = radices[site]
        shift = int(rng.integers(1, r))
        choices[site] = (choices[site] + shift) % r
    return ArchEncoding(choices=tuple(choices), space_id=arch.space_id)


def op_filter(space: CellSpace, exclude: tuple[str, ...]) -> ArchFilter:
    """Filter dropping any encoding that uses one of the excluded ops."""
    banned = {space.op_set.index(op) for op in exclude if op in space.op_set}

    def pred(arch: ArchEncoding) -> bool:
        return not any(c in banned for c in arch.choices)

    return pred


def render_arch(arch: ArchEncoding, space: Space) -> str:
    """Compact string: "1-3-0-2" for chains, nested "|op~src|" form for cells."""
    if isinstance(space, ChainSpace):
        return str(arch)
    parts = []
    i = 0
    for dst in range(1, space.num_nodes):
        seg = []
        for src in range(dst):
            seg.append(f"{space.op_set[arch.choices[i]]}~{src}")
            i += 1
        parts.append("|" + "|".join(seg) + "|")
    return "+".join(parts)


def parse_arch(text: str, space: Space) -> ArchEncoding:
    """Inverse of render_arch; accepts either notation for the right space."""
    text = text.strip()
    if isinstance(space, ChainSpace) or ("|" not in text and "-" in text or text.isdigit()):
        try:
            choices = tuple(int(tok) for tok in text.split("-"))
        except ValueError as exc:
            raise ConfigError(f"bad chain encoding '{text}': {exc}") from exc
        arch = ArchEncoding(choices=choices, space_id=space.space_id)
        arch_id(arch, space)  # validates length and ranges
        return arch
    choices = []
    node_strs = text.split("+")
    if len(node_strs) != space.num_nodes - 1:
        raise ConfigError(
            f"cell string has {len(node_strs)} node groups, expected {space.num_nodes - 1}"
        )
    for dst, node_str in enumerate(node_strs, start=1):
        segs = [s for s in node_str.split("|") if s]
        if len(segs) != dst:
            raise ConfigError(f"node {dst} has {len(segs)} edges, expected {dst}")
        for src, seg in enumerate(segs):
            op, _, src_str = seg.partition("~")
            if op not in space.op_set:
                raise ConfigError(f"unknown op '{op}' in '{text}'")
            if int(src_str) != src:
                raise ConfigError(f"edge source {src_str} out of order in '{text}'")
            choices.append(space.op_set.index(op))
    return ArchEncoding(choices=tuple(choices), space_id=space.space_id)


def toy_chain_space() -> ChainSpace:
    """Two layers, three options: the 9-architecture space used by fast tests."""
    return ChainSpace(
        num_layers=2,
        options=((1, 1), (2, 2), (4, 4)),
        strides=(1, 2),
        downsample_shared=True,
        space_id="chain_toy",
    )
