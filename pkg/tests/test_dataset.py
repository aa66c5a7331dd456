import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from salsearch.dataset import (AttributeSchema, AttributeStats, Binary, Exclusive, ManifestError,
                               SynthBenchConfig, binary_schema, derive_categories, estimate_attribute_stats,
                               generate_synth_benchmark, generating_stats, load_manifest, sample_unseen_attributes,
                               save_manifest, split_by_category, write_synth_benchmark)


def write(tmp_path, text, name="m.tsv"):
    p = tmp_path / name
    p.write_text(text)
    return p


MANIFEST = """#schema: hat:binary, bag:binary
visual\that\tbag
img/a.jpg\t1\t0
img/b.jpg\t1\t0
img/c.jpg\t0\t1
img/d.jpg\t0\t1
"""


class TestSchema:
    def test_total_dim_is_sum_of_widths(self, schema):
        assert schema.total_dim == 1 + 3 + 1

    def test_exclusive_values_unique(self):
        with pytest.raises(ValueError):
            Exclusive("age", ("a", "a"))

    def test_exclusive_needs_two_values(self):
        with pytest.raises(ValueError):
            Exclusive("age", ("a",))

    def test_header_round_trip(self, schema):
        assert AttributeSchema.parse(schema.header()) == schema

    def test_from_spec(self):
        s = AttributeSchema.from_spec({"binary": 6, "exclusive": [3, 3]})
        assert s.total_dim == 12
        assert sum(isinstance(g, Exclusive) for g in s.groups) == 2

    def test_validate_rejects_two_active(self, schema):
        with pytest.raises(ManifestError, match="exclusivity violated"):
            schema.validate(np.array([1, 1, 1, 0, 0]))


class TestManifest:
    def test_four_rows_two_categories(self, tmp_path):
        ds = load_manifest(write(tmp_path, MANIFEST))
        assert len(ds) == 4 and ds.num_categories == 2
        assert ds.visuals[2] == "img/c.jpg"
        assert list(ds.categories) == [0, 0, 1, 1]

    def test_exclusivity_violation_names_group_and_row(self, tmp_path):
        text = ("#schema: age:exclusive(a|b|c|d)\nvisual\tage=a\tage=b\tage=c\tage=d\n"
                "x\t1\t0\t0\t0\ny\t1\t1\t0\t0\n")
        with pytest.raises(ManifestError, match=r"exclusivity violated in group 'age' at row 1"):
            load_manifest(write(tmp_path, text))

    def test_malformed_row_names_index(self, tmp_path):
        text = MANIFEST + "img/e.jpg\t1\n"
        with pytest.raises(ManifestError, match="row 4"):
            load_manifest(write(tmp_path, text))

    def test_non_integer_cell(self, tmp_path):
        text = MANIFEST.replace("img/b.jpg\t1", "img/b.jpg\tx")
        with pytest.raises(ManifestError, match="row 1"):
            load_manifest(write(tmp_path, text))

    def test_header_mismatch(self, tmp_path):
        with pytest.raises(ManifestError, match="column header"):
            load_manifest(write(tmp_path, MANIFEST.replace("visual\that\tbag", "visual\tbag\that")))

    def test_missing_schema(self, tmp_path):
        with pytest.raises(ManifestError, match="schema"):
            load_manifest(write(tmp_path, "visual\ta\nx\t1\n"))

    def test_peta_style_65_attributes(self, tmp_path):
        schema = binary_schema(65)
        ds = derive_categories(schema, np.eye(65, dtype=int)[:3], ["a", "b", "c"])
        save_manifest(ds, tmp_path / "peta.tsv")
        assert load_manifest(tmp_path / "peta.tsv").schema.total_dim == 65

    def test_feature_mode_round_trip(self, tmp_path, small_bench):
        train, _ = small_bench
        save_manifest(train, tmp_path / "train.tsv")
        back = load_manifest(tmp_path / "train.tsv")
        assert back.has_features
        np.testing.assert_array_equal(back.visuals, train.visuals)
        np.testing.assert_array_equal(back.attrs, train.attrs)
        np.testing.assert_array_equal(back.categories, train.categories)

    def test_missing_feature_file(self, tmp_path):
        text = "#schema: a:binary\n#features: nope.npy\nvisual\ta\nfeat:0\t1\n"
        with pytest.raises(FileNotFoundError):
            load_manifest(write(tmp_path, text))

    def test_feature_index_out_of_range(self, tmp_path):
        np.save(tmp_path / "f.npy", np.zeros((1, 3)))
        text = "#schema: a:binary\n#features: f.npy\nvisual\ta\nfeat:0\t1\nfeat:5\t0\n"
        with pytest.raises(ManifestError, match="row 1"):
            load_manifest(write(tmp_path, text))


class TestCategories:
    def test_identity_grouping(self):
        ds = derive_categories(binary_schema(2), [[1, 0], [1, 0], [0, 1]])
        assert list(ds.categories) == [0, 0, 1] and ds.num_categories == 2

    def test_all_identical(self):
        ds = derive_categories(binary_schema(3), [[1, 0, 1]] * 7)
        assert ds.num_categories == 1

    def test_market_style_529_combinations(self):
        rng = np.random.default_rng(0)
        combos = set()
        while len(combos) < 529:
            combos.add(tuple(rng.integers(0, 2, 27)))
        combos = np.array(sorted(combos))
        rows = combos[rng.integers(0, 529, 3000)]
        rows = np.concatenate([combos, rows])
        assert derive_categories(binary_schema(27), rows).num_categories == 529

    def test_empty_input(self):
        with pytest.raises(ValueError):
            derive_categories(binary_schema(2), np.zeros((0, 2)))

    @given(st.lists(st.lists(st.integers(0, 1), min_size=4, max_size=4), min_size=1, max_size=40))
    def test_idempotent(self, rows):
        ds = derive_categories(binary_schema(4), rows)
        again = derive_categories(ds.schema, ds.attrs)
        np.testing.assert_array_equal(again.categories, ds.categories)
        # same attrs -> same category
        for i in range(len(rows)):
            for j in range(len(rows)):
                assert (ds.categories[i] == ds.categories[j]) == (rows[i] == rows[j])


class TestSplit:
    def make(self, m=10, per=3):
        attrs = np.repeat(np.array([[int(b) for b in f"{i:04b}"] for i in range(m)]), per, axis=0)
        return derive_categories(binary_schema(4), attrs)

    def test_half_split_disjoint(self):
        ds = self.make()
        train, test = split_by_category(ds, 0.5, seed=0)
        assert train.num_categories == 5 and test.num_categories == 5
        tr = {r.tobytes() for r in train.attrs}
        te = {r.tobytes() for r in test.attrs}
        assert not tr & te
        assert len(tr | te) == 10
        assert len(train) + len(test) == len(ds)

    def test_deterministic(self):
        ds = self.make()
        a = split_by_category(ds, 0.5, seed=7)
        b = split_by_category(ds, 0.5, seed=7)
        np.testing.assert_array_equal(a[0].attrs, b[0].attrs)
        np.testing.assert_array_equal(a[1].attrs, b[1].attrs)

    def test_eval_categories_all_unseen(self):
        train, test = split_by_category(self.make(16), 0.6, seed=1)
        seen = {r.tobytes() for r in train.category_attrs()}
        assert all(r.tobytes() not in seen for r in test.category_attrs())

    def test_needs_two_categories(self):
        with pytest.raises(ValueError):
            split_by_category(derive_categories(binary_schema(2), [[1, 0]] * 3), 0.5, 0)

    @pytest.mark.parametrize("frac", [0.0, 1.0, -0.1])
    def test_fraction_range(self, frac):
        with pytest.raises(ValueError):
            split_by_category(self.make(), frac, 0)


class TestStatsAndSampler:
    def test_binary_frequency(self):
        ds = derive_categories(binary_schema(1), [[1], [1], [1], [0]])
        assert estimate_attribute_stats(ds).probs[0] == pytest.approx(0.75)

    def test_exclusive_counts(self):
        schema = AttributeSchema((Exclusive("c", ("x", "y", "z")),))
        ds = derive_categories(schema, [[1, 0, 0], [1, 0, 0], [0, 1, 0], [0, 1, 0]])
        np.testing.assert_allclose(estimate_attribute_stats(ds).probs[0], [0.5, 0.5, 0.0])

    def test_bad_stats_rejected(self, schema):
        with pytest.raises(ValueError):
            AttributeStats(schema, [0.5, [0.5, 0.6, 0.0], 0.5])

    def test_one_active_per_exclusive_group(self, schema, rng):
        stats = AttributeStats(schema, [0.5, [0.2, 0.3, 0.5], 0.1])
        a = sample_unseen_attributes(schema, stats, 500, rng)
        assert (a[:, 1:4].sum(axis=1) == 1).all()

    def test_certain_attribute(self, schema, rng):
        stats = AttributeStats(schema, [1.0, [0.2, 0.3, 0.5], 0.0])
        a = sample_unseen_attributes(schema, stats, 200, rng)
        assert (a[:, 0] == 1).all() and (a[:, 4] == 0).all()

    def test_bernoulli_concentration(self, rng):
        schema = binary_schema(1)
        a = sample_unseen_attributes(schema, AttributeStats(schema, [0.3]), 100_000, rng)
        assert 0.28 <= a.mean() <= 0.32

    def test_schema_mismatch(self, schema, rng):
        with pytest.raises(ValueError):
            sample_unseen_attributes(binary_schema(5), AttributeStats(schema, [0.5, [1, 0, 0], 0.5]), 3, rng)

    @settings(max_examples=30, deadline=None)
    @given(st.lists(st.one_of(st.just(1), st.integers(2, 5)), min_size=1, max_size=6), st.integers(0, 2**31))
    def test_exclusivity_property(self, widths, seed):
        groups = tuple(Binary(f"g{i}") if w == 1 else Exclusive(f"g{i}", tuple(map(str, range(w))))
                       for i, w in enumerate(widths))
        schema = AttributeSchema(groups)
        r = np.random.default_rng(seed)
        probs = [float(r.random()) if w == 1 else r.dirichlet(np.ones(w)) for w in widths]
        a = sample_unseen_attributes(schema, AttributeStats(schema, probs), 64, r)
        schema.validate(a)

    def test_stats_match_generator_at_10k(self):
        # Monte-Carlo: 10k draws from the benchmark's generating marginals recover them within 0.02
        cfg = SynthBenchConfig(seed=4)
        truth = generating_stats(cfg)
        a = sample_unseen_attributes(cfg.schema, truth, 10_000, np.random.default_rng(5))
        est = estimate_attribute_stats(derive_categories(cfg.schema, a))
        np.testing.assert_allclose(est.expected_vector(), truth.expected_vector(), atol=0.02)


class TestSynthBenchmark:
    def test_counts_and_disjoint_combinations(self):
        train, test = generate_synth_benchmark(SynthBenchConfig(num_seen_categories=50, num_unseen_categories=20))
        assert train.num_categories == 50 and test.num_categories == 20
        tr = {r.tobytes() for r in train.category_attrs()}
        assert all(r.tobytes() not in tr for r in test.category_attrs())

    def test_zero_noise_identical_visuals(self):
        train, _ = generate_synth_benchmark(SynthBenchConfig(intra_class_noise_scale=0.0))
        for c in range(train.num_categories):
            v = train.visuals[train.categories == c]
            assert np.array_equal(v, np.repeat(v[:1], len(v), axis=0))

    def test_same_seed_bitwise_identical_manifests(self, tmp_path):
        cfg = SynthBenchConfig(seed=11)
        write_synth_benchmark(cfg, tmp_path / "a")
        write_synth_benchmark(cfg, tmp_path / "b")
        for name in ("train.tsv", "train.npy", "eval.tsv", "eval.npy", "bench_config.json"):
            assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()

    def test_config_echo(self, tmp_path):
        cfg = SynthBenchConfig(seed=2)
        write_synth_benchmark(cfg, tmp_path)
        assert SynthBenchConfig.from_dict(json.loads((tmp_path / "bench_config.json").read_text())) == cfg

    def test_capacity_error(self):
        with pytest.raises(ValueError, match="combinations"):
            generate_synth_benchmark(SynthBenchConfig(num_seen_categories=10, num_unseen_categories=10,
                                                      schema_spec={"binary": 4}))

    @pytest.mark.parametrize("bad", [dict(num_seen_categories=0), dict(intra_class_noise_scale=-1.0),
                                     dict(samples_per_category_range=(5, 2))])
    def test_invalid_config(self, bad):
        with pytest.raises(ValueError):
            SynthBenchConfig(**bad)
