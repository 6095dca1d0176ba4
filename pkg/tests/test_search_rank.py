"""Rank correlation, trial records, benchmark tables, search, and sensitivity."""

import itertools
import math

import numpy as np
import pytest
import scipy.stats
from hypothesis import given, settings
from hypothesis import strategies as st

from pinas.errors import ConfigError, ContractError, NumericError
from pinas.search import (
    BenchmarkTable,
    OracleConfig,
    TrialRecord,
    evaluate_candidates,
    evolutionary_search,
    kendall_tau,
    ranking_report,
    select_ranking_set,
    skip_sensitivity,
    threshold_query,
    train_oracle,
)
from pinas.space import (
    ArchEncoding,
    CellSpace,
    ChainSpace,
    enumerate_space,
    parse_arch,
    toy_chain_space,
)
from pinas.supernet import Supernet, SupernetConfig, recalibrate_bn
from pinas.linear_eval import make_head


def brute_tau(xs, ys):
    # literal O(n^2) pair counting, tau-b tie correction
    n = len(xs)
    conc = disc = tx = ty = 0
    for i in range(n):
        for j in range(i + 1, n):
            a = xs[i] - xs[j]
            b = ys[i] - ys[j]
            if a == 0:
                tx += 1
            if b == 0:
                ty += 1
            if a * b > 0:
                conc += 1
            elif a * b < 0:
                disc += 1
    n0 = n * (n - 1) // 2
    return (conc - disc) / math.sqrt((n0 - tx) * (n0 - ty))


class TestKendallTau:
    def test_all_permutations_n4(self):
        allowed = {-1.0, -2 / 3, -1 / 3, 0.0, 1 / 3, 2 / 3, 1.0}
        ys = [0.0, 1.0, 2.0, 3.0]
        for perm in itertools.permutations([0.0, 1.0, 2.0, 3.0]):
            tau = kendall_tau(list(perm), ys)
            assert tau == pytest.approx(brute_tau(list(perm), ys), abs=1e-12)
            assert any(math.isclose(tau, v, abs_tol=1e-12) for v in allowed)

    def test_identity_and_reversal(self):
        xs = [0.1, 0.5, 0.7, 0.9, 1.3]
        assert kendall_tau(xs, xs) == pytest.approx(1.0)
        assert kendall_tau(xs, xs[::-1]) == pytest.approx(-1.0)

    def test_random_tied_lists_match_brute_force(self):
        rng = np.random.default_rng(20240817)
        done = 0
        while done < 100:
            n = int(rng.integers(3, 12))
            xs = rng.integers(0, 4, size=n).astype(np.float64)
            ys = rng.integers(0, 4, size=n).astype(np.float64)
            if len(set(xs)) < 2 or len(set(ys)) < 2:
                continue
            assert kendall_tau(xs, ys) == pytest.approx(brute_tau(xs, ys), abs=1e-12)
            done += 1

    def test_matches_scipy_tau_b(self):
        rng = np.random.default_rng(7)
        for _ in range(25):
            xs = rng.integers(0, 5, size=10).astype(np.float64)
            ys = rng.integers(0, 5, size=10).astype(np.float64)
            if len(set(xs)) < 2 or len(set(ys)) < 2:
                continue
            ref = scipy.stats.kendalltau(xs, ys, variant="b").statistic
            assert kendall_tau(xs, ys) == pytest.approx(ref, abs=1e-12)

    def test_all_ties_rejected(self):
        with pytest.raises(NumericError, match="all ties"):
            kendall_tau([1.0, 1.0, 1.0], [0.0, 1.0, 2.0])
        with pytest.raises(NumericError, match="all ties"):
            kendall_tau([0.0, 1.0, 2.0], [5.0, 5.0, 5.0])

    def test_shape_validation(self):
        with pytest.raises(ContractError, match="shapes"):
            kendall_tau([1.0, 2.0], [1.0, 2.0, 3.0])
        with pytest.raises(ContractError, match=">=2"):
            kendall_tau([1.0], [1.0])

    @given(
        st.lists(st.integers(min_value=0, max_value=6), min_size=3, max_size=20),
        st.data(),
    )
    @settings(max_examples=60, deadline=None)
    def test_antisymmetry_and_bounds(self, xs, data):
        ys = data.draw(
            st.lists(
                st.integers(min_value=0, max_value=6),
                min_size=len(xs),
                max_size=len(xs),
            )
        )
        if len(set(xs)) < 2 or len(set(ys)) < 2:
            return
        tau = kendall_tau(xs, ys)
        assert -1.0 <= tau <= 1.0
        neg = kendall_tau(xs, [-y for y in ys])
        assert neg == pytest.approx(-tau, abs=1e-12)


class TestTrialRecord:
    def test_round_trip(self):
        rec = TrialRecord(
            arch="1-2", space_id="chain_toy", est_acc=0.625,
            oracle_acc=0.75, seed=3, eval_index=4,
        )
        again = TrialRecord.from_line(rec.to_line())
        assert again == rec

    def test_line_is_versioned_and_key_sorted(self):
        line = TrialRecord(arch="0-0", space_id="chain_toy", est_acc=0.5).to_line()
        assert '"v":1' in line
        keys = [part.split(":")[0].strip('"{') for part in line.strip("{}").split(",")]
        assert keys == sorted(keys)

    def test_validation(self):
        with pytest.raises(ContractError, match="est_acc"):
            TrialRecord(arch="0-0", space_id="chain_toy", est_acc=1.5)
        with pytest.raises(ContractError, match="oracle_acc"):
            TrialRecord(arch="0-0", space_id="chain_toy", est_acc=0.5, oracle_acc=-0.1)
        with pytest.raises(ConfigError, match="source"):
            TrialRecord(arch="0-0", space_id="chain_toy", est_acc=0.5, source="guess")

    def test_version_gate(self):
        line = TrialRecord(arch="0-0", space_id="chain_toy", est_acc=0.5).to_line()
        stale = line.replace('"v":1', '"v":0')
        with pytest.raises(ConfigError, match="version"):
            TrialRecord.from_line(stale)


class TestBenchmarkTable:
    def test_text_round_trip(self, tmp_path):
        table = BenchmarkTable({"0-1": 0.5, "2-2": 0.9375, "1-0": 0.25})
        text = table.to_text()
        assert text.startswith("# pinas benchmark table v1\n")
        again = BenchmarkTable.from_text(text)
        assert again.mapping == table.mapping
        p = tmp_path / "bench.tsv"
        p.write_text(text)
        assert BenchmarkTable.load(p).mapping == table.mapping

    def test_comments_blanks_and_space_separated(self):
        table = BenchmarkTable.from_text("# hi\n\n0-1 0.5\n2-2\t0.25\n")
        assert table.mapping == {"0-1": 0.5, "2-2": 0.25}

    def test_bad_lines_carry_line_numbers(self):
        with pytest.raises(ConfigError, match="line 2"):
            BenchmarkTable.from_text("# ok\n0-1\n")
        with pytest.raises(ConfigError, match="line 1"):
            BenchmarkTable.from_text("0-1\tnot_a_float\n")

    def test_accuracy_range(self):
        with pytest.raises(ConfigError, match="expected \\[0,1\\]"):
            BenchmarkTable({"0-0": 1.2})

    def test_lookup_canonicalizes_through_space(self):
        space = CellSpace()
        arch = ArchEncoding((1, 0, 2, 3, 4, 1), space.space_id)
        table = BenchmarkTable({str(arch): 0.77})
        assert table.lookup(arch) == 0.77
        genotype = "|skip_connect~0|+|zero~0|conv1x1~1|+|conv3x3~0|avgpool3x3~1|skip_connect~2|"
        assert table.lookup(genotype, space) == 0.77

    def test_lookup_missing(self):
        with pytest.raises(ContractError, match="no entry"):
            BenchmarkTable({"0-0": 0.5}).lookup("1-1")


@pytest.fixture(scope="module")
def eval_setup():
    space = toy_chain_space()
    cfg = SupernetConfig(in_channels=2, width=8, embed_dim=16, num_classes=4)
    net = Supernet(space, cfg, seed=3)
    net.freeze()
    head = make_head(cfg.width, cfg.num_classes, seed=3)
    rng = np.random.default_rng(11)
    calib = [rng.random((8, 2, 16, 16), dtype=np.float32) for _ in range(2)]
    val_x = rng.random((32, 2, 16, 16), dtype=np.float32)
    val_y = rng.integers(0, 4, size=32).astype(np.int64)
    return space, net, head, calib, val_x, val_y


class TestEvaluateCandidates:
    def test_sorted_and_indexed(self, eval_setup):
        space, net, head, calib, val_x, val_y = eval_setup
        archs = list(enumerate_space(space))
        records = evaluate_candidates(net, head, archs, calib, val_x, val_y, seed=5)
        assert len(records) == 9
        accs = [r.est_acc for r in records]
        assert accs == sorted(accs, reverse=True)
        # eval_index recovers the enumeration order that produced each record
        by_index = sorted(records, key=lambda r: r.eval_index)
        assert [r.arch for r in by_index] == [str(a) for a in archs]
        assert {r.seed for r in records} == {5}

    def test_deterministic(self, eval_setup):
        space, net, head, calib, val_x, val_y = eval_setup
        archs = list(enumerate_space(space))
        a = evaluate_candidates(net, head, archs, calib, val_x, val_y)
        b = evaluate_candidates(net, head, archs, calib, val_x, val_y)
        assert [r.to_line() for r in a] == [r.to_line() for r in b]


class TestEvolutionarySearch:
    def test_budget_covers_space_is_exhaustive(self, eval_setup):
        space, net, head, calib, val_x, val_y = eval_setup
        rng = np.random.default_rng(0)
        best, log = evolutionary_search(
            net, head, space, budget=9, rng=rng,
            calib_batches=calib, val_images=val_x, val_labels=val_y,
        )
        assert len(log) == 9
        assert {r.arch for r in log} == {str(a) for a in enumerate_space(space)}
        assert best.est_acc == max(r.est_acc for r in log)

    def test_budget_below_population_rejected(self, eval_setup):
        space, net, head, calib, val_x, val_y = eval_setup
        with pytest.raises(ConfigError, match="population"):
            evolutionary_search(
                net, head, space, budget=4, rng=np.random.default_rng(0),
                calib_batches=calib, val_images=val_x, val_labels=val_y,
                population=8,
            )

    def test_partial_budget_distinct_and_deterministic(self, eval_setup):
        space, net, head, calib, val_x, val_y = eval_setup
        kwargs = dict(
            calib_batches=calib, val_images=val_x, val_labels=val_y,
            population=4, tournament=2, mutation_k=1,
        )
        best1, log1 = evolutionary_search(
            net, head, space, budget=6, rng=np.random.default_rng(9), **kwargs
        )
        best2, log2 = evolutionary_search(
            net, head, space, budget=6, rng=np.random.default_rng(9), **kwargs
        )
        assert [r.to_line() for r in log1] == [r.to_line() for r in log2]
        assert best1.to_line() == best2.to_line()
        assert len(log1) <= 6
        assert len({r.arch for r in log1}) == len(log1)
        assert best1.est_acc == max(r.est_acc for r in log1)


class TestRankingReport:
    def _records(self, pairs):
        return [
            TrialRecord(
                arch=f"{i}-0", space_id="chain_toy", est_acc=e, oracle_acc=o, eval_index=i
            )
            for i, (e, o) in enumerate(pairs)
        ]

    def test_known_tau_and_pairs(self):
        # one discordant pair out of six -> tau = (5 - 1) / 6
        recs = self._records([(0.1, 0.1), (0.2, 0.2), (0.3, 0.4), (0.4, 0.3)])
        report = ranking_report(recs)
        assert report["n"] == 4
        assert report["tau"] == pytest.approx(4 / 6)
        assert report["pairs"][0] == ("0-0", 0.1, 0.1)

    def test_missing_oracle_rejected(self):
        recs = self._records([(0.1, 0.1), (0.2, 0.2)])
        recs.append(TrialRecord(arch="9-9", space_id="chain_toy", est_acc=0.5))
        with pytest.raises(ContractError, match="missing oracle_acc"):
            ranking_report(recs)

    def test_filter_needs_space(self):
        recs = self._records([(0.1, 0.1), (0.2, 0.2)])
        with pytest.raises(ConfigError, match="space"):
            ranking_report(recs, arch_filter=lambda a: True)

    def test_filter_subsets(self):
        space = toy_chain_space()
        recs = [
            TrialRecord(arch=str(a), space_id=space.space_id,
                        est_acc=0.1 * i, oracle_acc=0.1 * i, eval_index=i)
            for i, a in enumerate(enumerate_space(space))
        ]
        report = ranking_report(
            recs, arch_filter=lambda a: a.choices[0] == 0, space=space
        )
        assert report["n"] == 3
        assert report["tau"] == pytest.approx(1.0)

    def test_too_few_after_filter(self):
        space = toy_chain_space()
        recs = [
            TrialRecord(arch="0-0", space_id=space.space_id, est_acc=0.5,
                        oracle_acc=0.5)
        ]
        with pytest.raises(ContractError, match="need >=2"):
            ranking_report(recs, arch_filter=lambda a: True, space=space)


class TestSelectRankingSet:
    def test_small_space_returns_everything(self):
        space = toy_chain_space()
        chosen = select_ranking_set([], space, top_k=5, random_k=8)
        assert chosen == list(enumerate_space(space))

    def test_top_plus_random_disjoint(self):
        space = ChainSpace(
            num_layers=2,
            options=((1, 1), (2, 2), (4, 4), (2, 1)),
            strides=(1, 2),
            space_id="chain_test16",
        )
        ranked = [
            TrialRecord(arch=str(a), space_id=space.space_id,
                        est_acc=1.0 - 0.01 * i, eval_index=i)
            for i, a in enumerate(enumerate_space(space))
        ]
        chosen = select_ranking_set(ranked, space, top_k=2, random_k=3, seed=4)
        assert len(chosen) == 5
        assert [str(a) for a in chosen[:2]] == [ranked[0].arch, ranked[1].arch]
        assert len({a.choices for a in chosen}) == 5
        again = select_ranking_set(ranked, space, top_k=2, random_k=3, seed=4)
        assert [a.choices for a in again] == [a.choices for a in chosen]


class TestSkipSensitivity:
    def _chain_fixture(self):
        space = toy_chain_space()
        est = {a.choices: 0.5 + 0.04 * a.choices[0] - 0.02 * a.choices[1]
               for a in enumerate_space(space)}
        actual = {a.choices: 0.4 + 0.05 * a.choices[0] - 0.01 * a.choices[1]
                  for a in enumerate_space(space)}
        records = [
            TrialRecord(arch=str(a), space_id=space.space_id, est_acc=est[a.choices])
            for a in enumerate_space(space)
        ]
        table = BenchmarkTable(
            {str(a): actual[a.choices] for a in enumerate_space(space)}
        )
        return space, records, table, est, actual

    def test_hand_enumerated_pairs(self):
        space, records, table, est, actual = self._chain_fixture()
        pairs = skip_sensitivity(records, table, space, op_from=2, op_to=0)
        # choice 2 appears at site 0 in three archs and site 1 in three archs
        assert len(pairs) == 6
        for p in pairs:
            base = parse_arch(p["arch"], space).choices
            sub = parse_arch(p["sub_arch"], space).choices
            assert base[p["site"]] == 2 and sub[p["site"]] == 0
            assert p["d_est"] == pytest.approx(est[sub] - est[base])
            assert p["d_actual"] == pytest.approx(actual[sub] - actual[base])
        both = [p for p in pairs if p["arch"] == "2-2"]
        assert {p["site"] for p in both} == {0, 1}

    def test_named_ops_resolve_through_op_set(self):
        space = CellSpace()
        base = ArchEncoding((3, 0, 0, 0, 0, 0), space.space_id)
        sub = ArchEncoding((1, 0, 0, 0, 0, 0), space.space_id)
        records = [
            TrialRecord(arch=str(base), space_id=space.space_id, est_acc=0.6),
            TrialRecord(arch=str(sub), space_id=space.space_id, est_acc=0.55),
        ]
        table = BenchmarkTable({str(base): 0.7, str(sub): 0.68})
        pairs = skip_sensitivity(records, table, space, op_from="conv3x3")
        assert len(pairs) == 1
        assert pairs[0]["site"] == 0
        assert pairs[0]["d_est"] == pytest.approx(-0.05)
        assert pairs[0]["d_actual"] == pytest.approx(-0.02)

    def test_unknown_op_name(self):
        space = CellSpace()
        with pytest.raises(ConfigError, match="not in space op set"):
            skip_sensitivity([], BenchmarkTable({}), space, op_from="conv7x7")

    def test_missing_estimate_for_substitution(self):
        space = toy_chain_space()
        records = [TrialRecord(arch="2-0", space_id=space.space_id, est_acc=0.5)]
        table = BenchmarkTable({"2-0": 0.5, "0-0": 0.4})
        with pytest.raises(ContractError, match="no supernet estimate"):
            skip_sensitivity(records, table, space, op_from=2, op_to=0)

    def test_threshold_query(self):
        pairs = [
            {"arch": "a", "site": 0, "sub_arch": "b", "d_est": 0.005, "d_actual": 0.1},
            {"arch": "c", "site": 1, "sub_arch": "d", "d_est": -0.02, "d_actual": 0.0},
            {"arch": "e", "site": 0, "sub_arch": "f", "d_est": -0.003, "d_actual": 0.2},
        ]
        near = threshold_query(pairs, threshold=0.01)
        assert [p["arch"] for p in near] == ["a", "e"]


class TestTrainOracle:
    def test_separable_task_learned_and_deterministic(self):
        space = toy_chain_space()
        cfg = SupernetConfig(in_channels=2, width=8, embed_dim=16, num_classes=2)
        rng = np.random.default_rng(5)
        n = 64
        labels = np.arange(n) % 2
        base = np.where(labels == 0, 0.2, 0.8).astype(np.float32)
        images = np.repeat(base[:, None, None, None], 2, axis=1)
        images = np.broadcast_to(images, (n, 2, 16, 16)).copy()
        images += rng.normal(0.0, 0.02, images.shape).astype(np.float32)
        images = np.clip(images, 0.0, 1.0).astype(np.float32)
        labels = labels.astype(np.int64)
        ocfg = OracleConfig(epochs=3, lr=0.05, batch_size=32)
        arch = ArchEncoding((0, 0), space.space_id)
        acc = train_oracle(
            space, arch, cfg, images[:48], labels[:48], images[48:], labels[48:],
            ocfg, seed=2,
        )
        assert acc >= 0.9
        again = train_oracle(
            space, arch, cfg, images[:48], labels[:48], images[48:], labels[48:],
            ocfg, seed=2,
        )
        assert again == acc
