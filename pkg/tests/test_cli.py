import json
import subprocess
import sys

import pytest

from conftest import UC2_INJECTION
from taskdecomp.bench import asset_text
from taskdecomp.cli import main


def test_validate_bundled(capsys):
    assert main(["validate", "uc1"]) == 0
    assert capsys.readouterr().out.startswith("valid")


def test_validate_cycle_and_placeholder(tmp_path, capsys, uc2):
    from taskdecomp.pipeline import pipeline_to_dict

    doc = pipeline_to_dict(uc2)
    doc["edges"].append({"from": "S5", "to": "S1", "skip_arc": False})
    path = tmp_path / "cycle.json"
    path.write_text(json.dumps(doc))
    assert main(["validate", str(path)]) == 2
    assert "cycle" in capsys.readouterr().err

    doc = pipeline_to_dict(uc2)
    doc["subtasks"][1]["prompt_template"] += " {logs}"
    path.write_text(json.dumps(doc))
    assert main(["validate", str(path)]) == 2
    assert "subtasks[1].prompt_template" in capsys.readouterr().err


def test_run_injected_summary(tmp_path, capsys):
    records = tmp_path / "r.jsonl"
    code = main(["run", "--pipeline", "uc2", "--strategy", "rstd", "--backend", "mock:uc2-script",
                 "--inject", *UC2_INJECTION.split(), "--records", str(records)])
    assert code == 0
    summary = json.loads(capsys.readouterr().out)
    assert summary["retry_tokens"] == 436 and summary["call_count"] == 6
    assert len(records.read_text().splitlines()) == 7


def test_run_monolithic_clean(capsys):
    assert main(["run", "--pipeline", "uc2", "--strategy", "monolithic", "--backend", "mock:uc2-script"]) == 0
    assert json.loads(capsys.readouterr().out)["call_count"] == 1


def test_run_repeat_is_deterministic(tmp_path):
    from taskdecomp.metrics import strip_timing

    outs = []
    for name in ("a", "b"):
        path = tmp_path / f"{name}.jsonl"
        main(["run", "--pipeline", "uc1", "--strategy", "static", "--backend", "mock:uc1-script", "--seed", "5",
              "--records", str(path)])
        outs.append([strip_timing(json.loads(x)) for x in path.read_text().splitlines()])
    assert outs[0] == outs[1]


def test_exit_codes(tmp_path, capsys):
    assert main(["run", "--pipeline", "uc2", "--strategy", "rstd", "--backend", "mock:nope"]) == 2
    assert main(["run", "--pipeline", "missing.json", "--strategy", "rstd", "--backend", "mock:uc2-script"]) == 2
    assert main(["run", "--pipeline", "uc2", "--strategy", "rstd", "--backend", "mock:uc2-script",
                 "--inject", "target=S3", "path=$.nothere"]) == 2
    # a script that never produces valid monolithic output -> hard failure
    script = json.loads(asset_text("uc2_script.json"))
    for e in script["entries"]:
        if e["subtask"] == "monolithic":
            e["response"] = {"S1": []}
    path = tmp_path / "bad.json"
    path.write_text(json.dumps(script))
    assert main(["run", "--pipeline", "uc2", "--strategy", "monolithic", "--backend", f"mock:{path}"]) == 3
    http_cfg = tmp_path / "http.json"
    http_cfg.write_text(json.dumps({"base_url": "http://127.0.0.1:9", "model": "m", "timeout_seconds": 0.5}))
    assert main(["run", "--pipeline", "uc2", "--strategy", "monolithic", "--backend", f"http:{http_cfg}"]) == 4


def test_bench_and_report(tmp_path, capsys):
    out = tmp_path / "bench"
    code = main(["bench", "--pipeline", "uc1", "--backend", "mock:uc1-script", "--repetitions", "1",
                 "--inject", "target=A3", "path=$.fix.fixes[0].patch", "--out-dir", str(out), "--clock", "frozen"])
    assert code == 0
    printed = capsys.readouterr().out
    table = (out / "table.txt").read_text()
    assert printed == table
    assert "Retry tokens" in table and " 460 ± 0" in table
    assert main(["report", str(out / "records.jsonl")]) == 0
    assert capsys.readouterr().out == table
    assert main(["report", str(out / "records.jsonl"), "--format", "csv"]) == 0
    assert capsys.readouterr().out == (out / "table.csv").read_text()


def test_bench_jobs_merge_deterministically(tmp_path):
    streams = []
    for jobs in ("1", "4"):
        out = tmp_path / jobs
        main(["bench", "--pipeline", "uc2", "--backend", "mock:uc2-script", "--repetitions", "3", "--jobs", jobs,
              "--inject", *UC2_INJECTION.split(), "--out-dir", str(out), "--clock", "frozen"])
        streams.append((out / "records.jsonl").read_bytes())
    assert streams[0] == streams[1]


def test_module_entry_point():
    proc = subprocess.run([sys.executable, "-m", "taskdecomp", "validate", "uc2"], capture_output=True, text=True)
    assert proc.returncode == 0 and "valid" in proc.stdout


@pytest.mark.parametrize("argv", [["bench", "--pipeline", "uc1", "--backend", "mock:uc1-script", "--repetitions", "0"],
                                  ["bench", "--pipeline", "uc1", "--backend", "mock:uc1-script", "--strategies", "x"]])
def test_bad_bench_plans(argv, tmp_path):
    assert main([*argv, "--out-dir", str(tmp_path)]) == 2
