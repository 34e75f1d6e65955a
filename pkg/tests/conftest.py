import json

import pytest

from daclr.config import RunConfig
from daclr.workflow import make_synth


def small_config() -> RunConfig:
    """A run small enough for unit tests: a few seconds end to end."""
    cfg = RunConfig()
    cfg.synth.n_claims, cfg.synth.n_evidence, cfg.synth.n_clusters = 40, 200, 4
    cfg.encoder.hash_dim, cfg.encoder.embed_dim = 4096, 16
    t = cfg.train
    t.epochs, t.batch_size, t.K = 3, 8, 8
    t.U_eval, t.U_hard, t.mine_m = 2, 2, 8
    cfg.preselect.pages, cfg.preselect.per_doc = 20, 10
    cfg.retrieval.p, cfg.retrieval.q, cfg.retrieval.ks = 20, 5, [5, 10, 20]
    return cfg.validate()


def write_fixture(root, claims=None, evidence=None, qrels=None, splits=None):
    root.mkdir(parents=True, exist_ok=True)
    claims = claims or [
        {"id": "c1", "text": "Alice met Bob in Paris"},
        {"id": "c2", "text": "Carol sued Dan"},
        {"id": "c3", "text": "Eve won in 2020"},
    ]
    evidence = evidence or [
        {"id": "e1", "modality": "text", "text": "Alice and Bob met in Paris"},
        {"id": "e2", "modality": "table", "text": "plaintiff | Carol ; defendant | Dan"},
        {"id": "e3", "modality": "image", "image_path": "eve.png"},
        {"id": "e4", "modality": "text", "text": "unrelated weather report"},
    ]
    qrels = qrels if qrels is not None else "c1\te1\nc2\te2\nc3\te3\n"
    (root / "claims.jsonl").write_text("".join(json.dumps(c) + "\n" for c in claims))
    (root / "evidence.jsonl").write_text("".join(json.dumps(e) + "\n" for e in evidence))
    (root / "qrels.tsv").write_text(qrels)
    if splits is not None:
        (root / "splits.json").write_text(json.dumps(splits))
    return root


@pytest.fixture
def small_cfg() -> RunConfig:
    return small_config()


@pytest.fixture(scope="session")
def small_ds():
    return make_synth(small_config())


# ---------------------------------------------------------------- acceptance summary

_criteria: dict[int, dict] = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(number, title): acceptance criterion checked by this test")


def pytest_collection_modifyitems(items):
    for item in items:
        mark = item.get_closest_marker("criterion")
        if mark is not None:
            number, title = mark.args
            item.user_properties += [("criterion", number), ("title", title)]


def pytest_runtest_logreport(report):
    props = dict(report.user_properties)
    if "criterion" not in props:
        return
    entry = _criteria.setdefault(props["criterion"], {"title": props["title"], "passed": True, "measured": []})
    if report.failed:
        entry["passed"] = False
    if report.when == "call":
        entry["measured"] += [v for k, v in report.user_properties if k == "measured"]


def pytest_terminal_summary(terminalreporter):
    if not _criteria:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_criteria):
        e = _criteria[number]
        status = "PASS" if e["passed"] else "FAIL"
        detail = "; ".join(e["measured"])
        terminalreporter.write_line(f"{status} #{number:<2} {e['title']}" + (f" | {detail}" if detail else ""))


@pytest.fixture
def measured(request):
    """Record a measured value to show next to the criterion in the summary."""

    def record(text: str) -> None:
        request.node.user_properties.append(("measured", text))

    return record
