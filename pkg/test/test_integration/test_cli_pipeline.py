import csv
import json
from pathlib import Path

import numpy as np
import pytest

from uae_card.cli import EXIT_INVALID, EXIT_OK, EXIT_RUNTIME, main
from uae_card.persistence import load_model, load_table

CITIES = ["Brno", "Praha", "Ostrava", "Plzen", "Olomouc"]


def write_csv(path: Path, rows: int, seed: int) -> None:
    rng = np.random.default_rng(seed)
    with open(path, "w", newline="", encoding="utf-8") as handle:
        writer = csv.writer(handle)
        writer.writerow(["age", "city", "score"])
        for _ in range(rows):
            age = int(rng.integers(0, 100))
            city = CITIES[min(age // 20, 4)] if rng.random() < 0.7 else str(rng.choice(CITIES))
            score = "" if rng.random() < 0.05 else str(int(rng.integers(0, 10)))
            writer.writerow([age, city, score])


@pytest.fixture
def workspace(tmp_path: Path) -> Path:
    write_csv(tmp_path / "people.csv", 400, seed=0)
    assert main(["-q", "ingest", str(tmp_path / "people.csv"), "--out", str(tmp_path / "people.uaet"),
                 "--numeric", "age,score"]) == EXIT_OK
    assert main(["-q", "gen-workload", "--table", str(tmp_path / "people.uaet"), "--bounded-column", "age",
                 "--target-volume", "0.1", "--filters-min", "1", "--train-count", "40", "--test-count", "10",
                 "--seed", "1", "--out", str(tmp_path / "wl")]) == EXIT_OK
    return tmp_path


def _train(ws: Path, out: str, *extra: str) -> int:
    return main(["-q", "train", "--table", str(ws / "people.uaet"), "--workload", str(ws / "wl" / "train.jsonl"),
                 "--hidden-units", "16", "--epochs", "1", "--batch", "100", "--query-batch", "8",
                 "--samples", "8", "--out", str(ws / out), *extra])


def test_ingest_and_schema(workspace: Path, capsys: pytest.CaptureFixture[str]) -> None:
    table = load_table(workspace / "people.uaet")
    assert table.row_count == 400
    assert table.schema[2].has_null
    assert main(["schema", "--table", str(workspace / "people.uaet")]) == EXIT_OK
    printed = json.loads(capsys.readouterr().out)
    assert printed["rows"] == 400
    assert [c["name"] for c in printed["columns"]] == ["age", "city", "score"]


def test_generated_workload_files(workspace: Path) -> None:
    lines = {name: (workspace / "wl" / name).read_text(encoding="utf-8").splitlines()
             for name in ("train.jsonl", "test_in_workload.jsonl", "test_random.jsonl")}
    assert [len(v) for v in lines.values()] == [40, 10, 10]
    record = json.loads(lines["train.jsonl"][0])
    assert record["card"] >= 1


def test_train_estimate_eval_refine(workspace: Path, monkeypatch: pytest.MonkeyPatch) -> None:
    ws = workspace
    assert _train(ws, "m.uae", "--log", str(ws / "log.csv"), "--checkpoint-dir", str(ws / "ckpt")) == EXIT_OK
    with open(ws / "log.csv", newline="", encoding="utf-8") as handle:
        log = list(csv.reader(handle))
    assert log[0] == ["step", "loss", "data_loss", "query_loss", "wall_ms"]
    assert len(log) == 1 + 4
    assert (ws / "ckpt" / "epoch001.uae").exists()

    estimates = []
    for threads in ("1", "3"):
        monkeypatch.setenv("UAE_THREADS", threads)
        out = ws / f"est{threads}.csv"
        assert main(["-q", "estimate", "--model", str(ws / "m.uae"), "--table", str(ws / "people.uaet"),
                     "--workload", str(ws / "wl" / "test_random.jsonl"), "--samples", "20",
                     "--out", str(out)]) == EXIT_OK
        with open(out, newline="", encoding="utf-8") as handle:
            estimates.append([row[:5] for row in csv.reader(handle)])
    assert estimates[0] == estimates[1]
    assert len(estimates[0]) == 1 + 10

    reports = []
    for threads in ("1", "2"):
        monkeypatch.setenv("UAE_THREADS", threads)
        out = ws / f"report{threads}.csv"
        assert main(["-q", "eval", "--model", str(ws / "m.uae"), "--table", str(ws / "people.uaet"),
                     "--workload", str(ws / "wl" / "test_in_workload.jsonl"),
                     "--workload", str(ws / "wl" / "test_random.jsonl"), "--samples", "20",
                     "--out", str(out), "--results-dir", str(ws / "results")]) == EXIT_OK
        reports.append(out.read_bytes())
    assert reports[0] == reports[1]
    assert reports[0].decode("utf-8").splitlines()[1].startswith("test_in_workload,10,")
    assert (ws / "results" / "test_random.csv").exists()

    assert main(["-q", "refine", "--model", str(ws / "m.uae"), "--table", str(ws / "people.uaet"),
                 "--new-workload", str(ws / "wl" / "test_in_workload.jsonl"), "--epochs", "1",
                 "--samples", "8", "--out", str(ws / "m_workload.uae")]) == EXIT_OK
    before = load_model(ws / "m.uae")
    after = load_model(ws / "m_workload.uae")
    assert any(not np.array_equal(before.parameters[k], after.parameters[k]) for k in before.parameters)

    with open(ws / "people.csv", encoding="utf-8") as handle:
        head = handle.read().splitlines()[:31]
    (ws / "new.csv").write_text("\n".join(head) + "\n", encoding="utf-8")
    assert main(["-q", "refine", "--model", str(ws / "m.uae"), "--table", str(ws / "people.uaet"),
                 "--new-data", str(ws / "new.csv"), "--epochs", "1", "--table-out", str(ws / "more.uaet"),
                 "--out", str(ws / "m_data.uae")]) == EXIT_OK
    assert load_table(ws / "more.uaet").row_count == 430


def test_training_is_deterministic(workspace: Path) -> None:
    assert _train(workspace, "a.uae", "--seed", "5") == EXIT_OK
    assert _train(workspace, "b.uae", "--seed", "5") == EXIT_OK
    assert (workspace / "a.uae").read_bytes() == (workspace / "b.uae").read_bytes()


def test_query_only_training_from_scratch(workspace: Path) -> None:
    assert _train(workspace, "q.uae", "--mode", "query-only", "--input-encoding", "one_hot") == EXIT_OK
    assert load_model(workspace / "q.uae").encoding.style.value == "one_hot"


def test_invalid_input_exit_codes(workspace: Path, monkeypatch: pytest.MonkeyPatch) -> None:
    ws = workspace
    (ws / "empty.csv").write_text("", encoding="utf-8")
    assert main(["-q", "ingest", str(ws / "empty.csv"), "--out", str(ws / "x.uaet")]) == EXIT_INVALID
    assert main(["-q", "train", "--table", str(ws / "people.uaet"), "--out", str(ws / "x.uae")]) == EXIT_INVALID
    assert main(["-q", "gen-workload", "--table", str(ws / "people.uaet"), "--bounded-column", "city",
                 "--target-volume", "0.01", "--out", str(ws / "bad")]) == EXIT_INVALID

    assert _train(ws, "m.uae") == EXIT_OK
    assert main(["-q", "refine", "--model", str(ws / "m.uae"), "--table", str(ws / "people.uaet"),
                 "--new-data", str(ws / "people.csv"),
                 "--new-workload", str(ws / "wl" / "train.jsonl")]) == EXIT_INVALID

    write_csv(ws / "other.csv", 50, seed=1)
    with open(ws / "other.csv", encoding="utf-8") as handle:
        text = handle.read().replace("age,city,score", "years,town,points")
    (ws / "other.csv").write_text(text, encoding="utf-8")
    assert main(["-q", "ingest", str(ws / "other.csv"), "--out", str(ws / "other.uaet")]) == EXIT_OK
    assert main(["-q", "estimate", "--model", str(ws / "m.uae"), "--table", str(ws / "other.uaet"),
                 "--workload", str(ws / "wl" / "test_random.jsonl")]) == EXIT_INVALID

    monkeypatch.setenv("UAE_THREADS", "many")
    assert main(["-q", "estimate", "--model", str(ws / "m.uae"), "--table", str(ws / "people.uaet"),
                 "--workload", str(ws / "wl" / "test_random.jsonl")]) == EXIT_INVALID


def test_missing_file_is_a_runtime_failure(tmp_path: Path) -> None:
    assert main(["-q", "ingest", str(tmp_path / "nope.csv"), "--out", str(tmp_path / "x.uaet")]) == EXIT_RUNTIME
