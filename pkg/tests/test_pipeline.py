import csv
import json

import pytest

import synthetic as syn
from eventadl.backend import ScriptedBackend
from eventadl.cli import main
from eventadl.config import ConfigError, load_config
from eventadl.evaluation import import_predictions
from eventadl.pipeline import evaluate_files, prepare, run, sweep


@pytest.fixture
def home(tmp_path):
    """A prepared synthetic dataset with a full response script."""
    cfg_path = syn.write_dataset(tmp_path / "home")
    assert main(["prepare", "--config", str(cfg_path)]) == 0
    syn.write_responses(cfg_path, syn.basic_responses)
    return cfg_path


def read_csv(path):
    with open(path, newline="") as fh:
        return list(csv.reader(fh))


class TestPrepare:
    def test_bundle(self, home, capsys):
        prepared = load_config(home).prepared_dir
        for name in ("events.csv", "test_events.csv", "timeline.csv", "inventory.yaml", "split.json"):
            assert (prepared / name).exists()
        split = json.loads((prepared / "split.json").read_text())
        assert split["test_events"] == syn.N_EVENTS
        assert split["skipped_readings"] > 0

    def test_summary(self, tmp_path):
        cfg = load_config(syn.write_dataset(tmp_path))
        summary = prepare(cfg)
        assert sorted(summary.activities) == sorted(syn.LABELS)
        assert "activities: 5" in summary.render()

    def test_missing_raw_exits_1(self, tmp_path, capsys):
        cfg = syn.write_dataset(tmp_path, dataset={"raw": "nowhere.txt"})
        assert main(["prepare", "--config", str(cfg)]) == 1
        assert "error" in capsys.readouterr().err

    def test_missing_config_exits_1(self, tmp_path):
        assert main(["prepare", "--config", str(tmp_path / "nope.yaml")]) == 1

    def test_bad_config(self, tmp_path):
        path = tmp_path / "c.yaml"
        path.write_text("repetitions: 0\ncatalog: {labels: [a, other]}\n")
        with pytest.raises((ConfigError, ValueError)):
            load_config(path)


class TestRun:
    def test_end_to_end_f1(self, home):
        cfg = load_config(home)
        result = run(cfg)
        preds = import_predictions(result.predictions_path)
        assert len(preds) == syn.N_WINDOWS
        assert [p.window_id for p in preds] == [syn.event_index(j) for j in range(syn.N_WINDOWS)]
        res = evaluate_files(result.predictions_path, cfg.prepared_dir / "timeline.csv", cfg.output_dir / "eval")
        expected = syn.weighted_f1(syn.expected_confusion(lambda j: syn.WRONG.get(j, syn.truth(j))))
        assert res.report.weighted_f1 == pytest.approx(float(expected), abs=1e-9)
        assert res.report.excluded_seconds == syn.FIRST_TARGET

    def test_manifest(self, home):
        m = run(load_config(home)).manifest
        assert m["windows"] == syn.N_WINDOWS
        assert m["outcomes"]["valid"] == 5 * syn.N_WINDOWS
        assert m["backend_calls"] == 5 * syn.N_WINDOWS
        assert m["cache_entries"] == 5 * syn.N_WINDOWS
        assert m["seed"] == 7 and m["tie_break"] == "seeded-random"
        assert m["temperature"] == 1.0

    def test_rerun_is_byte_identical(self, home, tmp_path):
        cfg = load_config(home)
        first = run(cfg).predictions_path.read_bytes()
        other = cfg.with_overrides(cache=tmp_path / "again" / "cache.jsonl")
        again = run(other, out_dir=tmp_path / "again")
        assert again.manifest["backend_calls"] == 5 * syn.N_WINDOWS
        assert again.predictions_path.read_bytes() == first

    def test_resume_without_backend_calls(self, home):
        cfg = load_config(home)
        path = run(cfg).predictions_path
        full = path.read_bytes()
        lines = path.read_text().splitlines(keepends=True)
        path.write_text("".join(lines[: len(lines) // 2]))

        class Refuse(ScriptedBackend):
            def complete(self, *a, **kw):
                raise AssertionError("backend contacted")

        result = run(cfg, backend=Refuse({}))
        assert result.manifest["backend_calls"] == 0
        assert result.manifest["resumed_windows"] == len(lines) // 2
        assert path.read_bytes() == full

    def test_resume_after_cache_loss_only_queries_missing(self, home):
        cfg = load_config(home)
        path = run(cfg).predictions_path
        lines = path.read_text().splitlines(keepends=True)
        path.write_text("".join(lines[:100]))
        cfg.cache_path.unlink()
        m = run(cfg).manifest
        assert m["backend_calls"] == 5 * (syn.N_WINDOWS - 100)

    def test_changed_settings_start_over(self, home):
        cfg = load_config(home)
        run(cfg)
        m = run(cfg.with_overrides(tie_seed=8)).manifest
        assert m["resumed_windows"] == 0
        assert m["backend_calls"] == 0  # cache still answers

    def test_cli_run(self, home, capsys):
        assert main(["run", "--config", str(home)]) == 0
        assert f"{syn.N_WINDOWS} windows" in capsys.readouterr().out
        assert main(["run", "--config", str(home), "--fresh"]) == 0
        assert "1430 cache hits" in capsys.readouterr().out

    def test_missing_script_entry_exits_1(self, tmp_path):
        cfg = syn.write_dataset(tmp_path)
        assert main(["prepare", "--config", str(cfg)]) == 0
        (tmp_path / "script.json").write_text("{}")
        assert main(["run", "--config", str(cfg)]) == 1

    def test_single_shot_uses_base_temperature(self, home):
        m = run(load_config(home).with_overrides(n=1)).manifest
        assert m["temperature"] == 0
        assert m["cache_entries"] == syn.N_WINDOWS


class TestEvalCli:
    def test_thresholds_csv(self, home, tmp_path):
        cfg = load_config(home)
        pred = run(cfg).predictions_path
        out = tmp_path / "report"
        code = main(["eval", "--predictions", str(pred), "--timeline", str(cfg.prepared_dir / "timeline.csv"),
                     "--out", str(out), "--thresholds", "0,0.66,0.8,1.0", "--config", str(home)])
        assert code == 0
        rows = read_csv(out / "thresholds.csv")
        assert [r[0] for r in rows] == ["th", "0", "0.66", "0.8", "1"]
        per_class = read_csv(out / "per_class.csv")
        assert [r[0] for r in per_class[1:-1]] == syn.LABELS
        assert (out / "report.md").read_text().startswith("# Evaluation")

    def test_schema_error_exits_2(self, home, tmp_path, capsys):
        bad = tmp_path / "bad.jsonl"
        bad.write_text('{"activity": "eating"}\n')
        timeline = load_config(home).prepared_dir / "timeline.csv"
        assert main(["eval", "--predictions", str(bad), "--timeline", str(timeline)]) == 2
        assert "line 1" in capsys.readouterr().err

    def test_missing_prediction_file_exits_1(self, home, tmp_path):
        timeline = load_config(home).prepared_dir / "timeline.csv"
        assert main(["eval", "--predictions", str(tmp_path / "x.jsonl"), "--timeline", str(timeline)]) == 1


class TestSweep:
    @pytest.fixture
    def fallback_home(self, tmp_path):
        cfg = syn.write_dataset(tmp_path, backend={"kind": "scripted", "model": "scripted-test",
                                                   "default": "sleeping"})
        assert main(["prepare", "--config", str(cfg)]) == 0
        return cfg

    def test_k_axis(self, fallback_home, capsys):
        assert main(["sweep", "--config", str(fallback_home), "--axis", "k", "--values", "5,10,20,30,50",
                     "--n", "1"]) == 0
        rows = read_csv(load_config(fallback_home).output_dir / "sweep_k.csv")
        assert rows[0] == ["k", "weighted_f1", "accuracy", "discarded_pct", "windows"]
        assert [r[0] for r in rows[1:]] == ["5", "10", "20", "30", "50"]
        assert [int(r[4]) for r in rows[1:]] == [(syn.N_EVENTS - k) // syn.S + 1 for k in (5, 10, 20, 30, 50)]

    def test_n_axis(self, home):
        path = sweep(load_config(home), "N", [1, 3, 5])
        rows = read_csv(path)
        assert [r[0] for r in rows[1:]] == ["1", "3", "5"]
        assert len({r[1] for r in rows[1:]}) == 1  # the script answers identically

    def test_th_axis(self, home):
        rows = read_csv(sweep(load_config(home), "th", [0, 0.66, 0.8, 1.0]))
        pcts = [float(r[3]) for r in rows[1:]]
        assert pcts == sorted(pcts)

    def test_bad_axis(self, home):
        with pytest.raises(ValueError):
            sweep(load_config(home), "q", [1])


def test_stats_cli(home, tmp_path, capsys):
    out = tmp_path / "spans.csv"
    assert main(["stats", "--config", str(home), "--k", "5,30", "--out", str(out)]) == 0
    rows = read_csv(out)
    assert rows[0] == ["k", "min", "p25", "median", "p75", "max"]
    assert rows[2][3] == str(29 * syn.EVENT_GAP * 1.0)
    assert main(["stats"]) == 1


ARUBA_RAW = ["Sleeping", "Bed_to_Toilet", "Meal_Preparation", "Relax", "Housekeeping", "Eating", "Wash_Dishes",
             "Leave_Home", "Enter_Home", "Work", "Respirate"]


def test_aruba_format_with_preset(tmp_path, capsys):
    """A small log in the Aruba layout (tabs, mixed timestamp precision, raw labels)."""
    from datetime import datetime, timedelta

    lines, t = [], datetime(2010, 11, 4)
    for day in range(3):
        for i, raw in enumerate(ARUBA_RAW):
            for step in range(40):
                t += timedelta(seconds=20)
                sensor = f"M{(step % 9) + 1:03d}" if step % 7 else "D001"
                value = ("ON" if step % 2 else "OFF") if sensor[0] == "M" else ("OPEN" if step % 2 else "CLOSE")
                stamp = t.strftime("%Y-%m-%d\t%H:%M:%S") + ("" if step % 5 == 0 else ".%06d" % (step * 1234))
                mark = f"\t{raw} begin" if step == 5 else f"\t{raw} end" if step == 30 else ""
                lines.append(f"{stamp}\t{sensor}\t{value}{mark}")
            lines.append(t.strftime("%Y-%m-%d %H:%M:%S.000001") + " T002 23.5")
    (tmp_path / "data").write_text("\n".join(lines) + "\n")
    cfg = tmp_path / "aruba.yaml"
    cfg.write_text("dataset: {raw: data, preset: aruba}\ntest_span: {start: last, days: 1}\noutput_dir: out\n")
    assert main(["prepare", "--config", str(cfg)]) == 0
    assert "activities: 12" in capsys.readouterr().out
    out = tmp_path / "spans.csv"
    assert main(["stats", "--config", str(cfg), "--k", "30", "--out", str(out)]) == 0
    import statistics

    from eventadl.ingest import read_events_csv

    prepared = load_config(cfg).prepared_dir
    events = read_events_csv(prepared / "test_events.csv")
    spans = [(events[i + 29].t - events[i].t).total_seconds() for i in range(len(events) - 29)]
    assert float(read_csv(out)[1][3]) == pytest.approx(statistics.median(spans), abs=1e-6)
    inventory = (prepared / "inventory.yaml").read_text()
    assert "D001" in inventory and "magnetic" in inventory
