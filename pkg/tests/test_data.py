import re

import pytest
import yaml

from daclr.config import ConfigError, RunConfig, config_from_dict, load_config, set_path
from daclr.data import (
    IngestError,
    attach_summaries,
    default_splits,
    load_corpus,
    save_dataset,
    synth_dataset,
)
from daclr.events import Modality, validate_summary
from daclr.sparse import build_index, tokenize

from conftest import write_fixture


class TestLoad:
    def test_three_claim_fixture(self, tmp_path):
        ds = load_corpus(write_fixture(tmp_path / "d"))
        assert [c.id for c in ds.claims] == ["c1", "c2", "c3"]
        assert ds.doc("e3").modality is Modality.IMAGE and ds.doc("e3").media_path == "eve.png"
        assert ds.qrels == {"c1": {"e1"}, "c2": {"e2"}, "c3": {"e3"}}
        assert sorted(ds.missing_summaries) == ["c1", "c2", "c3", "e1", "e2", "e3", "e4"]
        assert sorted(sum(ds.splits.values(), [])) == ["c1", "c2", "c3"]

    def test_unknown_qrels_evidence(self, tmp_path):
        with pytest.raises(IngestError) as err:
            load_corpus(write_fixture(tmp_path / "d", qrels="c1\te1\nc2\te99\n"))
        assert err.value.line == 2 and "e99" in str(err.value)

    def test_unknown_qrels_claim(self, tmp_path):
        with pytest.raises(IngestError):
            load_corpus(write_fixture(tmp_path / "d", qrels="c9\te1\n"))

    def test_duplicate_id(self, tmp_path):
        claims = [{"id": "c1", "text": "a"}, {"id": "c1", "text": "b"}]
        with pytest.raises(IngestError) as err:
            load_corpus(write_fixture(tmp_path / "d", claims=claims, qrels="c1\te1\n"))
        assert err.value.line == 2

    def test_image_without_path(self, tmp_path):
        ev = [{"id": "e1", "modality": "image"}]
        with pytest.raises(IngestError):
            load_corpus(write_fixture(tmp_path / "d", evidence=ev, qrels=""))

    def test_bad_json_line(self, tmp_path):
        root = write_fixture(tmp_path / "d")
        (root / "claims.jsonl").write_text('{"id": "c1", "text": "x"}\n{oops\n')
        with pytest.raises(IngestError) as err:
            load_corpus(root)
        assert err.value.line == 2

    def test_missing_file(self, tmp_path):
        with pytest.raises(IngestError):
            load_corpus(tmp_path)

    def test_split_with_unknown_claim(self, tmp_path):
        with pytest.raises(IngestError):
            load_corpus(write_fixture(tmp_path / "d", splits={"train": ["zz"]}))

    def test_default_splits_ignore_order(self):
        ids = [f"c{i}" for i in range(50)]
        assert default_splits(ids) == default_splits(list(reversed(ids)))
        sizes = [len(v) for v in default_splits(ids).values()]
        assert sizes == [30, 10, 10]

    def test_attach_then_save_round_trip(self, tmp_path):
        ds = attach_summaries(load_corpus(write_fixture(tmp_path / "d")))
        # the image has no text, so only the MLLM client can summarise it
        assert ds.missing_summaries == ["e3"]
        assert all(validate_summary(x.summary).ok for x in [*ds.claims, *ds.corpus] if x.id != "e3")
        save_dataset(ds, tmp_path / "out")
        back = load_corpus(tmp_path / "out")
        assert back.missing_summaries == ["e3"]
        assert [c.summary for c in back.claims] == [c.summary for c in ds.claims]
        assert back.splits == ds.splits


YEAR = re.compile(r"\b(1[6-9]\d\d)\b")


class TestSynth:
    def test_deterministic(self, tmp_path):
        a, b = synth_dataset(3, 30, 150, 3), synth_dataset(3, 30, 150, 3)
        save_dataset(a, tmp_path / "a")
        save_dataset(b, tmp_path / "b")
        for f in sorted(p.name for p in (tmp_path / "a").iterdir()):
            assert (tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes()
        assert synth_dataset(4, 30, 150, 3).claims != a.claims

    def test_shape(self, small_ds):
        assert len(small_ds.claims) == 40 and len(small_ds.corpus) == 200
        small_ds.check()
        assert all(len(rel) == 1 for rel in small_ds.qrels.values())

    def test_gold_shares_scene(self, small_ds):
        for c in small_ds.claims:
            (gold,) = small_ds.qrels[c.id]
            text = small_ds.doc(gold).raw_text
            assert YEAR.search(c.raw_text).group(1) == YEAR.search(text).group(1)

    def test_lexical_baseline_is_imperfect(self, small_ds):
        idx = build_index(small_ds.corpus, field="raw")
        hits = [idx.rank(tokenize(c.raw_text), c.id, "bm25").ids[0] in small_ds.qrels[c.id] for c in small_ds.claims]
        assert 0.0 < sum(hits) / len(hits) < 1.0

    def test_rejects_bad_sizes(self):
        with pytest.raises(ValueError):
            synth_dataset(1, 10, 5, 3)
        with pytest.raises(ValueError):
            synth_dataset(1, 10, 50, 1)


class TestConfig:
    def test_defaults_valid(self):
        cfg = load_config(None)
        assert cfg.train.K == 16 and cfg.retrieval.p == 100 and cfg.bm25.k1 == 1.2

    def test_yaml_round_trip(self, tmp_path):
        cfg = RunConfig()
        cfg.train.epochs = 7
        cfg.retrieval.ks = [5, 50]
        (tmp_path / "c.yaml").write_text(yaml.safe_dump(cfg.to_dict()))
        assert load_config(tmp_path / "c.yaml") == cfg

    def test_partial_yaml(self, tmp_path):
        (tmp_path / "c.yaml").write_text("train:\n  K: 8\n")
        cfg = load_config(tmp_path / "c.yaml")
        assert cfg.train.K == 8 and cfg.train.epochs == 40

    def test_unknown_key(self):
        with pytest.raises(ConfigError, match="train.bogus"):
            config_from_dict({"train": {"bogus": 1}})

    @pytest.mark.parametrize(
        "data",
        [
            {"train": {"delta_min": 0.5, "delta_max": 0.5}},
            {"retrieval": {"p": 5, "q": 5}},
            {"train": {"negative_mode": "mixed"}},
            {"train": {"beta_override": 2.0}},
        ],
    )
    def test_invalid_values(self, data):
        with pytest.raises(ConfigError):
            config_from_dict(data)

    def test_set_path(self):
        cfg = RunConfig()
        set_path(cfg, "train.K", 4)
        assert cfg.train.K == 4
        with pytest.raises(ConfigError):
            set_path(cfg, "train.nope", 1)
