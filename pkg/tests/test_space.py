"""Search-space encodings: ids, enumeration, sampling, mutation, notation."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from pinas.errors import ConfigError, ContractError
from pinas.space import (
    CELL_OPS, ArchEncoding, CellSpace, ChainSpace, arch_from_id, arch_id,
    enumerate_space, mutate, op_filter, parse_arch, render_arch,
    sample_uniform, space_size, toy_chain_space,
)


def test_space_sizes():
    assert space_size(ChainSpace()) == 4**8 == 65536
    assert space_size(CellSpace()) == 5**6 == 15625
    assert space_size(toy_chain_space()) == 9


def test_chain_space_validates():
    with pytest.raises(ConfigError, match="strides"):
        ChainSpace(num_layers=3, strides=(1, 2))
    with pytest.raises(ConfigError, match="divide"):
        ChainSpace(num_layers=2, options=((3, 2),), strides=(1, 1))


def test_cell_space_validates_ops():
    with pytest.raises(ConfigError, match="unknown cell op"):
        CellSpace(op_set=("conv9x9",))


def test_cell_edge_order():
    assert CellSpace().edges() == [(1, 0), (2, 0), (2, 1), (3, 0), (3, 1), (3, 2)]


def test_arch_id_round_trip_toy():
    space = toy_chain_space()
    seen = set()
    for arch in enumerate_space(space):
        val = arch_id(arch, space)
        assert arch_from_id(val, space) == arch
        seen.add(val)
    assert seen == set(range(9))


def test_arch_id_mixed_radix_convention():
    # most significant site first: (1, 2) in radix (3, 3) -> 1*3 + 2
    space = toy_chain_space()
    assert arch_id(ArchEncoding((1, 2), "chain_toy"), space) == 5


def test_arch_id_validates():
    space = toy_chain_space()
    with pytest.raises(ContractError, match="length"):
        arch_id(ArchEncoding((0,), "chain_toy"), space)
    with pytest.raises(ContractError, match="out of range"):
        arch_id(ArchEncoding((0, 3), "chain_toy"), space)
    with pytest.raises(ContractError, match="outside"):
        arch_from_id(9, space)
    with pytest.raises(ContractError, match="negative"):
        ArchEncoding((-1, 0), "chain_toy")


def test_enumerate_lexicographic_unique():
    space = CellSpace(num_nodes=3, op_set=("zero", "skip_connect"))
    archs = list(enumerate_space(space))
    assert len(archs) == 8
    assert [arch_id(a, space) for a in archs] == list(range(8))


def test_enumerate_cap():
    with pytest.raises(ConfigError, match="cap"):
        list(enumerate_space(ChainSpace(), cap=100))


def test_sample_uniform_chi_squared():
    # per-site frequencies over 3 options: chi2(2df) < 13.8 (p ~ 0.001)
    space = toy_chain_space()
    rng = np.random.default_rng(0)
    counts = np.zeros((2, 3))
    n = 3000
    for _ in range(n):
        arch = sample_uniform(space, rng)
        for site, c in enumerate(arch.choices):
            counts[site, c] += 1
    expected = n / 3
    chi2 = ((counts - expected) ** 2 / expected).sum(axis=1)
    assert np.all(chi2 < 13.8)


def test_mutate_changes_exactly_k_sites():
    space = ChainSpace()
    rng = np.random.default_rng(4)
    base = sample_uniform(space, rng)
    for k in (1, 2, 5):
        out = mutate(base, space, rng, k=k)
        diff = sum(a != b for a, b in zip(base.choices, out.choices))
        assert diff == k
    assert mutate(base, space, rng, k=0) == base


def test_mutate_validates():
    space = toy_chain_space()
    rng = np.random.default_rng(0)
    arch = sample_uniform(space, rng)
    with pytest.raises(ContractError, match="exceeds"):
        mutate(arch, space, rng, k=3)
    single = ChainSpace(num_layers=1, options=((1, 1),), strides=(1,))
    with pytest.raises(ContractError, match="alternatives"):
        mutate(ArchEncoding((0,), "chain"), single, rng, k=1)


def test_render_parse_chain():
    space = toy_chain_space()
    arch = ArchEncoding((2, 1), "chain_toy")
    assert render_arch(arch, space) == "2-1"
    assert parse_arch("2-1", space) == arch
    with pytest.raises(ConfigError, match="bad chain"):
        parse_arch("2-x", space)
    with pytest.raises(ContractError):
        parse_arch("2-1-0", space)


def test_render_parse_cell():
    space = CellSpace()
    arch = ArchEncoding((1, 0, 2, 3, 4, 1), "cell")
    text = render_arch(arch, space)
    assert text == (
        "|skip_connect~0|+|zero~0|conv1x1~1|+|conv3x3~0|avgpool3x3~1|skip_connect~2|"
    )
    assert parse_arch(text, space) == arch


def test_parse_cell_rejects_malformed():
    space = CellSpace()
    with pytest.raises(ConfigError, match="node groups"):
        parse_arch("|zero~0|", space)
    with pytest.raises(ConfigError, match="unknown op"):
        parse_arch("|warp~0|+|zero~0|zero~1|+|zero~0|zero~1|zero~2|", space)
    with pytest.raises(ConfigError, match="out of order"):
        parse_arch("|zero~1|+|zero~0|zero~1|+|zero~0|zero~1|zero~2|", space)


def test_op_filter_excludes():
    space = CellSpace()
    pred = op_filter(space, exclude=("zero", "avgpool3x3"))
    keep = [a for a in enumerate_space(space) if pred(a)]
    assert len(keep) == 3**6  # only skip/conv1x1/conv3x3 remain
    banned = {CELL_OPS.index("zero"), CELL_OPS.index("avgpool3x3")}
    assert all(not set(a.choices) & banned for a in keep)


def test_toy_space_is_cost_matched():
    # depth == groups for every option: conv params per site are constant
    space = toy_chain_space()
    c = 16
    totals = {(d, g): d * 9 * c * (c // g) for d, g in space.options}
    assert len(set(totals.values())) == 1


@settings(max_examples=60, deadline=None)
@given(val=st.integers(0, 5**6 - 1))
def test_cell_render_parse_round_trip(val):
    space = CellSpace()
    arch = arch_from_id(val, space)
    assert parse_arch(render_arch(arch, space), space) == arch
    assert arch_id(arch, space) == val
