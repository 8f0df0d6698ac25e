import csv
import hashlib
import io
import json

import numpy as np
import pytest

from peertruth import events as ev
from peertruth.cli import main
from peertruth.forest import Forest
from peertruth.mechanism import keyed_rng
from peertruth.simulation import default_world, generate_world, make_reports, report_distribution, truthful, world_events

SMALL = {
    "seed": 3,
    "world": {"n_items": 60},
    "experiments": [
        {"mechanism": "original", "replications": 4,
         "population": [{"strategy": {"kind": "truthful"}, "weight": 1},
                        {"strategy": {"kind": "noisy_truthful", "gamma": 0.5}, "weight": 1}]},
        {"mechanism": "augmented", "world": {"numeric_means": [[10, 20, 30]], "numeric_std": [6]},
         "convergence": {"strategy": {"kind": "descriptor_map",
                                      "rule": {"numeric": 0, "threshold": 20, "below": "s", "above": "e"}},
                         "schedule": [200, 400], "replications": 2, "test_items": 100,
                         "forest": {"tree_count": 5}}},
    ],
}


def write_json(path, obj):
    path.write_text(json.dumps(obj))
    return str(path)


def write_log(path, events):
    ev.dump_events(events, path)
    return str(path)


def events_from(rows):
    return [ev.LedgerEvent(i + 1, kind, payload) for i, (kind, payload) in enumerate(rows)]


def join(*users, r0=0):
    return [(ev.USER_JOINED, {"user": u, "r0": r0}) for u in users]


def rating(rater, item, label, question="contribution"):
    return (ev.RATING_SUBMITTED, {"rater": rater, "item": item, "question": question, "label": label})


def publish(item, author):
    return (ev.PROJECT_PUBLISHED, {"item": item, "author": author, "descriptors": {"categorical": [0]}})


def parse_csv(text):
    return list(csv.reader(io.StringIO(text)))


class TestSimulate:
    def test_default_bundled_config(self, capsys):
        assert main(["simulate", "--format", "csv"]) == 0
        rows = parse_csv(capsys.readouterr().out)
        assert rows[0] == ["mechanism", "strategy", "N", "mean", "stderr", "reps"]
        assert {r[1] for r in rows[1:]} >= {"truthful", "constant(e)", "noisy_truthful(0.5)"}

    def test_same_seed_identical_csv(self, tmp_path, capsys):
        cfg = write_json(tmp_path / "sim.json", SMALL)
        digests = []
        for run in ("a", "b"):
            assert main(["simulate", "--config", cfg, "--seed", "9", "--out", str(tmp_path / run)]) == 0
            digests.append(hashlib.sha256((tmp_path / run / "results.csv").read_bytes()).hexdigest())
        assert digests[0] == digests[1]
        rows = parse_csv((tmp_path / "a" / "results.csv").read_text())
        assert [r[2] for r in rows[1:]] == ["300", "300", "200", "400"]

    def test_missing_config(self, tmp_path, capsys):
        path = str(tmp_path / "nope.json")
        assert main(["simulate", "--config", path]) == 2
        assert path in capsys.readouterr().err

    def test_bad_json_reports_line(self, tmp_path, capsys):
        path = tmp_path / "bad.json"
        path.write_text('{\n "seed": 1,\n oops\n}')
        assert main(["simulate", "--config", str(path)]) == 2
        assert "line 3" in capsys.readouterr().err

    def test_bad_field_named(self, tmp_path, capsys):
        cfg = json.loads(json.dumps(SMALL))
        cfg["experiments"][0]["population"][1]["strategy"] = {"kind": "lazy"}
        assert main(["simulate", "--config", write_json(tmp_path / "c.json", cfg)]) == 2
        assert "experiments[0].population[1].strategy" in capsys.readouterr().err

    def test_bad_seed(self, capsys):
        assert main(["simulate", "--seed", "-1"]) == 2
        assert main(["simulate", "--seed", str(2**64)]) == 2


class TestReplay:
    def test_empty_log(self, tmp_path, capsys):
        path = tmp_path / "empty.ndjson"
        path.write_text("")
        assert main(["replay", "--log", str(path), "--format", "csv"]) == 0
        assert parse_csv(capsys.readouterr().out) == [["user", "r0", "rp", "rr", "ep", "er", "total"]]

    def test_single_join(self, tmp_path, capsys):
        log = write_log(tmp_path / "one.ndjson", events_from(join("ada", r0=10)))
        assert main(["replay", "--log", log, "--format", "csv", "--out", str(tmp_path / "o")]) == 0
        rows = parse_csv(capsys.readouterr().out)
        assert len(rows) == 2 and rows[1][0] == "ada" and float(rows[1][-1]) == 10
        assert (tmp_path / "o" / "reputation.csv").exists()

    def test_corrupted_line(self, tmp_path, capsys):
        log = tmp_path / "bad.ndjson"
        write_log(log, events_from(join("a", "b", "c", "d", "e", "f")))
        lines = log.read_text().splitlines()
        assert len(lines) == 7
        lines[6] = lines[6][:-5]
        log.write_text("\n".join(lines) + "\n")
        assert main(["replay", "--log", str(log)]) == 2
        assert "line 7" in capsys.readouterr().err

    def test_invalid_event_names_line_and_seq(self, tmp_path, capsys):
        log = write_log(tmp_path / "x.ndjson", events_from([*join("a"), rating("a", "p9", "s")]))
        assert main(["replay", "--log", log]) == 2
        err = capsys.readouterr().err
        assert "line 3" in err and "seq 2" in err

    def test_table_output(self, tmp_path, capsys):
        log = write_log(tmp_path / "one.ndjson", events_from(join("ada", r0=10)))
        assert main(["replay", "--log", log]) == 0
        out = capsys.readouterr().out.splitlines()
        assert out[0].split() == ["user", "r0", "rp", "rr", "ep", "er", "total"]
        assert out[2].split()[-1] == "10.0000"


class TestScore:
    def test_single_item_pending(self, tmp_path, capsys):
        rows = [*join("a", "b", "c"), publish("p0", "a"), rating("b", "p0", "s"), rating("c", "p0", "s")]
        log = write_log(tmp_path / "l.ndjson", events_from(rows))
        assert main(["score", "--log", log, "--format", "csv"]) == 0
        out = parse_csv(capsys.readouterr().out)[1:]
        assert [(r[0], float(r[3]), r[4]) for r in out] == [("b", 0.0, "pending"), ("c", 0.0, "pending")]

    def test_two_agreeing_raters_positive(self, tmp_path, capsys):
        rows = [*join("a", "b", "c", "d", "e"), publish("p0", "a"), publish("p1", "a"),
                rating("b", "p0", "s"), rating("c", "p0", "s"), rating("d", "p1", "e"), rating("e", "p1", "e")]
        log = write_log(tmp_path / "l.ndjson", events_from(rows))
        assert main(["score", "--log", log, "--mechanism", "original", "--format", "csv"]) == 0
        out = {(r[0], r[1]): float(r[3]) for r in parse_csv(capsys.readouterr().out)[1:]}
        assert out[("b", "p0")] > 0 and out[("c", "p0")] > 0

    def test_augmented_without_corpus(self, tmp_path, capsys):
        rows = [*join("a", "b", "c"), publish("p0", "a"), rating("b", "p0", "s"), rating("c", "p0", "s")]
        log = write_log(tmp_path / "l.ndjson", events_from(rows))
        assert main(["score", "--log", log, "--mechanism", "augmented"]) == 1
        assert "EmptyTrainingSet" in capsys.readouterr().err


@pytest.fixture(scope="module")
def synthetic_log(tmp_path_factory):
    cfg = default_world(n_items=2000, seed=21)
    world = generate_world(cfg)
    reports, _ = make_reports(world, [(truthful(), 1)], keyed_rng(21, "reports"))
    path = tmp_path_factory.mktemp("synth") / "synthetic.ndjson"
    ev.dump_events(world_events(world, reports), path)
    return cfg, str(path)


class TestTrainBenchmark:
    def test_no_finalized_ratings(self, tmp_path, capsys):
        rows = [*join("a", "b"), publish("p0", "a"), rating("b", "p0", "s")]
        log = write_log(tmp_path / "l.ndjson", events_from(rows))
        assert main(["train-benchmark", "--log", log, "--out", str(tmp_path)]) == 1

    def test_synthetic_log(self, synthetic_log, tmp_path, capsys):
        cfg, log = synthetic_log
        assert main(["train-benchmark", "--log", log, "--out", str(tmp_path), "--format", "csv"]) == 0
        row = parse_csv(capsys.readouterr().out)[1]
        assert row[1] == "10000"
        assert float(row[3]) < 0.05
        forest = Forest.load(tmp_path / "forest.ndjson")
        cells = np.array([[a, b] for a in range(3) for b in range(3)])
        truth = report_distribution(cfg, np.zeros((9, 0)), cells)
        predicted = forest.predict_matrix(cells.astype(float))
        # held-out rows fall in each cell with its generative probability
        emit = np.array(cfg.categorical)
        p_cell = np.array([np.dot(cfg.prior, emit[0][:, a] * emit[1][:, b]) for a, b in cells])
        assert p_cell.sum() == pytest.approx(1.0)
        assert np.average(np.abs(predicted - truth).sum(axis=1), weights=p_cell) < 0.05

    def test_retrain_same_digest(self, synthetic_log, tmp_path, capsys):
        _, log = synthetic_log
        digests = []
        for run in ("a", "b"):
            assert main(["train-benchmark", "--log", log, "--seed", "4", "--out", str(tmp_path / run)]) == 0
            digests.append(hashlib.sha256((tmp_path / run / "forest.ndjson").read_bytes()).hexdigest())
        assert digests[0] == digests[1]


class TestReport:
    def test_renders_table(self, tmp_path, capsys):
        path = tmp_path / "r.csv"
        path.write_text("mechanism,strategy,N,mean,stderr,reps\noriginal,truthful,2500,1.08,0.01,50\n")
        assert main(["report", str(path)]) == 0
        out = capsys.readouterr().out.splitlines()
        assert out[2].split() == ["original", "truthful", "2500", "1.0800", "0.0100", "50"]

    def test_missing(self, tmp_path, capsys):
        assert main(["report", str(tmp_path / "none.csv")]) == 2


def test_log_level_env(monkeypatch, tmp_path, capsys):
    monkeypatch.setenv("PTE_LOG_LEVEL", "debug")
    log = write_log(tmp_path / "one.ndjson", events_from(join("ada")))
    assert main(["replay", "--log", log]) == 0
