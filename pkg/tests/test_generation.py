import numpy as np
import pytest

from tstgen.datapipe import Schema, SeriesRecord, fit_normalizer, ingest, normalize
from tstgen.errors import ConfigError, DataError
from tstgen.generation import (GenerationConfig, TransformerPredictor, generate_batch, generate_dataset,
                               generate_one, seed_rows_for, stop_decision, write_synthetic)
from tstgen.model import init_params
from tstgen.toy import tiny_model_config


class FlagStub:
    """Predicts a fixed measurement row and fixed (continue, end) flags at every position."""

    def __init__(self, cont, end, value=0.5):
        self.flags = (cont, end)
        self.value = value
        self.calls = 0

    def __call__(self, prefix):
        self.calls += 1
        T, F = prefix.shape
        out = np.full((T, F), self.value)
        out[:, -2:] = self.flags
        return out


def corpus(n=12, F=2, seed=0):
    rng = np.random.default_rng(seed)
    labels = ["FAIL", "FINISH", "KILL"]
    return [SeriesRecord(f"r{i}", rng.uniform(-3, 9, size=(int(rng.integers(3, 9)), F)),
                         {"end_event_type": labels[i % 3]}) for i in range(n)]


class TestStopDecision:
    @pytest.mark.parametrize("pair,stop", [((0.4, 0.6), True), ((0.6, 0.4), False), ((0.5, 0.5), False)])
    def test_rule(self, pair, stop):
        assert stop_decision(pair) is stop


class TestGenerateOne:
    def test_stops_immediately(self):
        seq, length = generate_one(FlagStub(0.1, 0.9), np.zeros((2, 4)), GenerationConfig(2, 10))
        assert length == 3 and seq.shape == (3, 4)

    def test_runs_to_cap(self):
        stub = FlagStub(0.9, 0.1)
        seq, length = generate_one(stub, np.zeros((2, 4)), GenerationConfig(2, 10))
        assert length == 10 and stub.calls == 8

    def test_tie_continues(self):
        _, length = generate_one(FlagStub(0.5, 0.5), np.zeros((2, 4)), GenerationConfig(2, 7))
        assert length == 7

    def test_seed_rows_kept_verbatim(self):
        seed = np.random.default_rng(0).uniform(size=(3, 4))
        seq, _ = generate_one(FlagStub(0.1, 0.9), seed, GenerationConfig(3, 10))
        np.testing.assert_array_equal(seq[:3], seed)
        np.testing.assert_array_equal(seq[3], [0.5, 0.5, 0.1, 0.9])

    def test_seed_shape_checked(self):
        with pytest.raises(ConfigError):
            generate_one(FlagStub(0.1, 0.9), np.zeros((3, 4)), GenerationConfig(2, 10))

    @pytest.mark.parametrize("seed_len,max_len", [(2, 2), (0, 5), (5, 3)])
    def test_config_bounds(self, seed_len, max_len):
        with pytest.raises(ConfigError):
            GenerationConfig(seed_len, max_len)


@pytest.fixture(scope="module")
def transformer():
    mc = tiny_model_config(4, max_window=24)
    return TransformerPredictor(init_params(mc, 11), mc)


class TestTransformerDecoding:
    def test_sigmoid_outputs_in_open_unit_interval(self, transformer):
        seq, length = generate_one(transformer, np.full((2, 4), 0.5), GenerationConfig(2, 24))
        assert 3 <= length <= 24
        assert ((seq[2:] > 0) & (seq[2:] < 1)).all()

    def test_batch_matches_single(self, transformer):
        seeds = np.random.default_rng(1).uniform(size=(5, 2, 4))
        cfg = GenerationConfig(2, 20)
        batched = generate_batch(transformer, seeds, cfg)
        for s, b in zip(seeds, batched):
            single, _ = generate_one(transformer, s, cfg)
            assert single.shape == b.shape
            np.testing.assert_allclose(single, b, atol=1e-5)


class TestGenerateDataset:
    def setup_method(self):
        self.real = corpus()
        self.stats = fit_normalizer(self.real)

    def test_exact_count(self):
        out = generate_dataset(FlagStub(0.1, 0.9), self.real, self.stats, 100, GenerationConfig(2, 10))
        assert len(out) == 100 and len({r.id for r in out}) == 100

    def test_class_filter_inherited(self):
        out = generate_dataset(FlagStub(0.1, 0.9), self.real, self.stats, 30, GenerationConfig(2, 10),
                               class_filter={"end_event_type": "FAIL"})
        assert all(r.metadata == {"end_event_type": "FAIL"} for r in out)
        fails = {r.id for r in self.real if r.metadata["end_event_type"] == "FAIL"}
        assert {r.seed_id for r in out} <= fails

    def test_empty_filter(self):
        with pytest.raises(DataError):
            generate_dataset(FlagStub(0.1, 0.9), self.real, self.stats, 5, GenerationConfig(2, 10),
                             class_filter={"end_event_type": "EVICT"})

    def test_deterministic(self, transformer):
        cfg = GenerationConfig(2, 16, seed=3)
        a = generate_dataset(transformer, self.real, self.stats, 8, cfg)
        b = generate_dataset(transformer, self.real, self.stats, 8, cfg)
        assert [r.seed_id for r in a] == [r.seed_id for r in b]
        assert all(x.measurements.tobytes() == y.measurements.tobytes() for x, y in zip(a, b))

    def test_seed_rows_denormalize_back(self):
        out = generate_dataset(FlagStub(0.9, 0.1), self.real, self.stats, 20, GenerationConfig(2, 6))
        by_id = {r.id: r for r in self.real}
        for syn in out:
            np.testing.assert_allclose(syn.measurements[:2], by_id[syn.seed_id].measurements[:2], atol=1e-9)
            assert syn.n_features == 2 and syn.length == 6

    def test_within_denormalized_range(self):
        # a stub that overshoots the range is clipped back inside the training min/max
        out = generate_dataset(FlagStub(0.9, 0.1, value=1.7), self.real, self.stats, 10, GenerationConfig(2, 5))
        for syn in out:
            assert (syn.measurements >= self.stats.mins - 1e-12).all()
            assert (syn.measurements <= self.stats.maxs + 1e-12).all()
            np.testing.assert_allclose(syn.measurements[2:], np.broadcast_to(self.stats.maxs, (3, 2)))

    def test_seed_covering_whole_record_is_returned_as_is(self):
        short = [SeriesRecord("s", [[1.0, 2.0], [3.0, 4.0]], {"end_event_type": "KILL"})]
        out = generate_dataset(FlagStub(0.9, 0.1), short, fit_normalizer(short), 3, GenerationConfig(2, 6))
        for syn in out:
            np.testing.assert_allclose(syn.measurements, short[0].measurements, atol=1e-12)

    def test_too_short_records_cannot_seed(self):
        short = [SeriesRecord("s", [[1.0, 2.0]], {"end_event_type": "KILL"})]
        with pytest.raises(DataError):
            generate_dataset(FlagStub(0.9, 0.1), short, fit_normalizer(short), 3, GenerationConfig(2, 6))

    def test_seed_steps_match_normalized_real(self):
        rec = self.real[0]
        rows = seed_rows_for(rec, self.stats, 2)
        np.testing.assert_array_equal(rows[:, :2], normalize(rec, self.stats).measurements[:2])
        assert rows.shape == (2, 4)

    def test_output_reingests(self, tmp_path):
        out = generate_dataset(FlagStub(0.6, 0.4), self.real, self.stats, 7, GenerationConfig(2, 5),
                               checkpoint_id="ck.bin")
        write_synthetic(tmp_path / "syn.jsonl", out)
        back = ingest(tmp_path / "syn.jsonl", Schema(2, {"end_event_type": ["FAIL", "FINISH", "KILL"]}))
        assert [r.id for r in back] == [r.id for r in out]
        first = out[0].to_json()
        assert first["provenance"] == {"seed_id": out[0].seed_id, "checkpoint": "ck.bin"}
