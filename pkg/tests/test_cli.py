import json

from harness import scenario_path
from orderhub.cli import main
from orderhub.scenario import open_engine, save_engine


def run(capsys, *argv):
    code = main([str(a) for a in argv])
    out, err = capsys.readouterr()
    return code, out, err


def test_catalog_validate(capsys, fixtures):
    code, out, _ = run(capsys, "catalog", "validate", fixtures / "catalog.yaml")
    assert code == 0 and out.startswith("ok:")
    code, out, _ = run(capsys, "catalog", "validate", fixtures / "catalog_invalid.yaml")
    assert code == 1 and "CYCLE" in out
    code, _, err = run(capsys, "catalog", "validate", fixtures / "nope.yaml")
    assert code == 2 and err


def test_usage_errors(capsys):
    assert run(capsys, "fly")[0] == 2
    assert run(capsys)[0] == 2
    assert run(capsys, "task", "complete", "T-1", "--data", "novalue")[0] == 2


def test_run_scenario_text_and_json(capsys, tmp_path):
    code, out, _ = run(capsys, "--home", tmp_path / "h", "run", "scenario", scenario_path("multiplay"))
    assert code == 0 and "PASS state A" in out
    code, out, _ = run(capsys, "--home", tmp_path / "h", "run", "scenario", scenario_path("multiplay"), "--reset", "--json")
    assert json.loads(out)["ok"] is True


def test_run_scenario_failure_exit_code(capsys, tmp_path):
    code, _, err = run(capsys, "--home", tmp_path, "run", "scenario", scenario_path("missing_catalog"))
    assert code == 2 and "catalog" in err


def test_events_file(capsys, tmp_path):
    events = tmp_path / "events.jsonl"
    code, _, _ = run(capsys, "--home", tmp_path / "h", "run", "scenario", scenario_path("reference"),
                     "--parallel-dispatch", "--duplicate-deliveries", "--workers", 2, "--events", events)
    assert code == 0
    records = [json.loads(line) for line in events.read_text().splitlines()]
    assert records[-1]["event"] == "completed"


def test_submit_status_and_dump(capsys, tmp_path, fixtures):
    home = tmp_path / "h"
    assert run(capsys, "--home", home, "run", "scenario", scenario_path("empty"))[0] == 0
    code, out, _ = run(capsys, "--home", home, "order", "submit", "--channel", "POS", fixtures / "orders/multiplay.pos")
    assert code == 0
    order_id, state = out.split()
    assert state == "COMPLETED"
    code, out, _ = run(capsys, "--home", home, "order", "status", order_id)
    status = json.loads(out)
    assert status["state"] == "COMPLETED" and len(status["suborders"]) == 3
    code, out, _ = run(capsys, "--home", home, "platform", "dump", "voice")
    assert "+15550100" in out
    assert run(capsys, "--home", home, "platform", "dump", "fax")[0] == 1
    assert run(capsys, "--home", home, "order", "status", "nope")[0] == 1
    assert run(capsys, "--home", home, "order", "submit", "--channel", "FAX", fixtures / "orders/multiplay.pos")[0] == 2


def test_task_commands(capsys, tmp_path):
    home = tmp_path / "h"
    run(capsys, "--home", home, "run", "scenario", scenario_path("long_lived"))
    code, out, _ = run(capsys, "--home", home, "task", "list")
    (line,) = out.splitlines()
    task_id = line.split("\t")[0]
    assert "visit.confirmation" in line
    assert run(capsys, "--home", home, "task", "complete", task_id)[0] == 2  # missing output key
    assert run(capsys, "--home", home, "task", "complete", "T-404", "--data", "a=b")[0] == 1
    code, out, _ = run(capsys, "--home", home, "task", "complete", task_id, "--data", "visit.confirmation=OK")
    assert code == 0 and out.strip().endswith("COMPLETED")
    assert run(capsys, "--home", home, "task", "complete", task_id, "--data", "visit.confirmation=OK")[0] == 1
    assert run(capsys, "--home", home, "task", "list")[1] == ""


def test_bus_dead(capsys, tmp_path):
    home = tmp_path / "h"
    run(capsys, "--home", home, "run", "scenario", scenario_path("empty"))
    engine, cfg = open_engine(home)
    engine.bus.send("orders.management", "<garbage/>")
    engine.run_until_idle()
    save_engine(home, engine, cfg)
    code, out, _ = run(capsys, "--home", home, "bus", "dead", "orders.management")
    assert code == 0
    assert json.loads(out)["payload"] == "<garbage/>"
    assert run(capsys, "--home", home, "bus", "dead", "orders.results")[1] == ""


def test_commands_need_a_home(capsys, tmp_path):
    code, _, err = run(capsys, "--home", tmp_path / "nothing", "task", "list")
    assert code == 2 and "no engine" in err
