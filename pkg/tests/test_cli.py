"""End-to-end tests for the command-line verbs, run in process."""

import csv
import io
import json

import pytest

from moekit.cli import main

PRESET_52B = "1.3B+MoE-128"


def run(capsys, *argv):
    code = main(list(argv))
    out = capsys.readouterr()
    return code, out.out, out.err


def rows_of(text):
    return list(csv.DictReader(io.StringIO(text)))


def write_config(tmp_path, data, name="cfg.json"):
    path = tmp_path / name
    path.write_text(json.dumps(data))
    return str(path)


# ---------------------------------------------------------------------------
# params
# ---------------------------------------------------------------------------


def test_params_lists_all_presets(capsys):
    code, out, _ = run(capsys, "params")
    assert code == 0
    rows = rows_of(out)
    assert len(rows) >= 10
    names = {r["name"] for r in rows}
    assert PRESET_52B in names and "dense-1.3B" in names


def test_params_single_preset_total(capsys):
    code, out, _ = run(capsys, "params", "--preset", PRESET_52B)
    assert code == 0
    rows = rows_of(out)
    assert len(rows) == 1
    assert int(rows[0]["total_params"]) == 52_471_430_656
    assert int(rows[0]["flops_per_token"]) == 2 * int(rows[0]["active_params_per_token"])


def test_params_unknown_preset_is_config_error(capsys):
    code, _, err = run(capsys, "params", "--preset", "nonesuch")
    assert code == 2
    assert "unknown preset" in err


def test_params_model_from_config(tmp_path, capsys):
    cfg = write_config(
        tmp_path, {"model": {"num_layers": 24, "hidden": 2048, "heads": 16, "experts": 128}}
    )
    code, out, _ = run(capsys, "params", "--config", cfg)
    assert code == 0
    assert int(rows_of(out)[0]["total_params"]) == 52_471_430_656


# ---------------------------------------------------------------------------
# config validation
# ---------------------------------------------------------------------------


def test_unknown_top_level_key_rejected(tmp_path, capsys):
    cfg = write_config(tmp_path, {"seed": 1, "modle": {}})
    code, _, err = run(capsys, "params", "--config", cfg)
    assert code == 2
    assert "unknown config keys" in err


def test_unknown_model_key_rejected(tmp_path, capsys):
    cfg = write_config(tmp_path, {"model": {"hidden": 512, "depth": 12}})
    code, _, err = run(capsys, "params", "--config", cfg)
    assert code == 2
    assert "unknown model keys" in err


def test_unknown_option_key_rejected(tmp_path, capsys):
    cfg = write_config(tmp_path, {"options": {"tokens": 64, "warmup": 5}})
    code, _, err = run(capsys, "route-bench", "--config", cfg)
    assert code == 2
    assert "route-bench options" in err


def test_malformed_json_rejected(tmp_path, capsys):
    path = tmp_path / "bad.json"
    path.write_text("{not json")
    code, _, err = run(capsys, "params", "--config", str(path))
    assert code == 2
    assert "not valid JSON" in err


def test_missing_config_file_rejected(capsys):
    code, _, err = run(capsys, "params", "--config", "/nonexistent/cfg.json")
    assert code == 2
    assert "cannot read" in err


def test_experts_and_schedule_conflict(tmp_path, capsys):
    cfg = write_config(
        tmp_path, {"model": {"experts": 8, "expert_schedule": [8, 8, 8, 8, 8, 8, 8, 8, 8, 8, 16, 16]}}
    )
    code, _, err = run(capsys, "params", "--config", cfg)
    assert code == 2
    assert "not both" in err


# ---------------------------------------------------------------------------
# route-bench
# ---------------------------------------------------------------------------


def test_route_bench_accounting(tmp_path, capsys):
    cfg = write_config(
        tmp_path,
        {"options": {"tokens": 128, "experts": 8, "k": 2, "capacity_factor": 1.0, "instances": 5}},
    )
    code, out, _ = run(capsys, "route-bench", "--config", cfg)
    assert code == 0
    rows = rows_of(out)
    assert len(rows) == 5
    for r in rows:
        assert int(r["kept"]) + int(r["dropped"]) == 128 * 2
        assert float(r["max_abs_err"]) <= 1e-9
        ratio = float(r["op_ratio"])
        assert 0.8 * 8 <= ratio <= 1.2 * 8


def test_route_bench_is_deterministic(tmp_path, capsys):
    cfg = write_config(tmp_path, {"options": {"instances": 3}})
    _, out1, _ = run(capsys, "route-bench", "--config", cfg, "--seed", "7")
    _, out2, _ = run(capsys, "route-bench", "--config", cfg, "--seed", "7")
    assert out1 == out2


def test_route_bench_seed_changes_output(tmp_path, capsys):
    cfg = write_config(tmp_path, {"options": {"instances": 3}})
    _, out1, _ = run(capsys, "route-bench", "--config", cfg, "--seed", "7")
    _, out2, _ = run(capsys, "route-bench", "--config", cfg, "--seed", "8")
    assert out1 != out2


def test_route_bench_bad_gating_options(tmp_path, capsys):
    cfg = write_config(tmp_path, {"options": {"k": 3}})
    code, _, err = run(capsys, "route-bench", "--config", cfg)
    assert code == 2


# ---------------------------------------------------------------------------
# simulate
# ---------------------------------------------------------------------------


def test_simulate_summary_all_schedules(tmp_path, capsys):
    cfg = write_config(
        tmp_path,
        {"cluster": {"nodes": 4, "gpus_per_node": 4}, "options": {"tensor_slice": 4}},
    )
    code, out, _ = run(capsys, "simulate", "--config", cfg)
    assert code == 0
    rows = {r["schedule"]: r for r in rows_of(out)}
    assert set(rows) == {"flat", "hierarchical", "coordinated"}
    assert int(rows["hierarchical"]["volume_bytes"]) == 2 * int(rows["flat"]["volume_bytes"])
    assert int(rows["flat"]["rounds"]) == 16
    assert int(rows["hierarchical"]["rounds"]) == 8
    assert int(rows["coordinated"]["rounds"]) == 4 + 4


def test_simulate_trace_output(tmp_path, capsys):
    cfg = write_config(
        tmp_path,
        {"cluster": {"nodes": 2, "gpus_per_node": 2}, "options": {"schedule": "flat", "emit": "trace"}},
    )
    code, out, _ = run(capsys, "simulate", "--config", cfg)
    assert code == 0
    assert out.splitlines()[0] == "step,kind,src,dst,nbytes,latency_s"


def test_simulate_trace_needs_single_schedule(tmp_path, capsys):
    cfg = write_config(tmp_path, {"options": {"emit": "trace"}})
    code, _, err = run(capsys, "simulate", "--config", cfg)
    assert code == 2


def test_simulate_bad_slice_is_invalid_request(tmp_path, capsys):
    cfg = write_config(
        tmp_path,
        {
            "cluster": {"nodes": 2, "gpus_per_node": 3},
            "options": {"schedule": "coordinated", "tensor_slice": 4},
        },
    )
    code, _, err = run(capsys, "simulate", "--config", cfg)
    assert code == 3
    assert "invalid request" in err


# ---------------------------------------------------------------------------
# plan
# ---------------------------------------------------------------------------


def test_plan_full_spread(tmp_path, capsys):
    cfg = write_config(tmp_path, {"cluster": {"nodes": 16, "gpus_per_node": 8}})
    code, out, _ = run(capsys, "plan", "--config", cfg, "--preset", PRESET_52B)
    assert code == 0
    rows = rows_of(out)
    assert len(rows) == 12
    for r in rows:
        assert int(r["ep_degree"]) == 128
        assert int(r["expert_dp"]) == 1
    # memory columns repeat the per-device totals on every row
    totals = {r["total_bytes_per_device"] for r in rows}
    assert len(totals) == 1


def test_plan_rejects_oversized_tensor_slice(tmp_path, capsys):
    cfg = write_config(
        tmp_path,
        {"cluster": {"nodes": 16, "gpus_per_node": 8}, "options": {"tensor_slice": 16}},
    )
    code, _, err = run(capsys, "plan", "--config", cfg, "--preset", PRESET_52B)
    assert code == 3
    assert "invalid request" in err


def test_plan_requires_model(tmp_path, capsys):
    cfg = write_config(tmp_path, {"cluster": {"nodes": 2, "gpus_per_node": 2}})
    code, _, err = run(capsys, "plan", "--config", cfg)
    assert code == 2


# ---------------------------------------------------------------------------
# distill / kd-demo
# ---------------------------------------------------------------------------


def test_distill_reports_student_size(tmp_path, capsys):
    cfg = write_config(tmp_path, {"options": {"target_depth": 21}})
    code, out, _ = run(capsys, "distill", "--config", cfg, "--preset", "1.3B+PR-MoE-64/128")
    assert code == 0
    row = rows_of(out)[0]
    assert int(row["student_params"]) == 26_943_890_176
    assert row["removed_layers"] == "1 2 3"


def test_distill_rejects_bad_depth(tmp_path, capsys):
    cfg = write_config(tmp_path, {"options": {"target_depth": 99}})
    code, _, err = run(capsys, "distill", "--config", cfg, "--preset", "1.3B+PR-MoE-64/128")
    assert code == 3


def test_kd_demo_small_run(tmp_path, capsys):
    cfg = write_config(tmp_path, {"options": {"seeds": 2, "steps": 6}})
    code, out, _ = run(capsys, "kd-demo", "--config", cfg)
    assert code == 0
    rows = rows_of(out)
    assert len(rows) == 2
    assert all(r["staged_wins"] in ("0", "1") for r in rows)


def test_kd_demo_divergence_is_numeric_failure(tmp_path, capsys):
    import numpy as np

    cfg = write_config(tmp_path, {"options": {"seeds": 1, "steps": 10, "lr": 1e8}})
    with np.errstate(over="ignore", invalid="ignore"):
        code, _, err = run(capsys, "kd-demo", "--config", cfg)
    assert code == 4
    assert "numerical failure" in err


# ---------------------------------------------------------------------------
# shared flags
# ---------------------------------------------------------------------------


def test_out_flag_writes_file(tmp_path, capsys):
    out_path = tmp_path / "params.csv"
    code, out, _ = run(capsys, "params", "--preset", PRESET_52B, "--out", str(out_path))
    assert code == 0
    assert out == ""
    rows = rows_of(out_path.read_text())
    assert int(rows[0]["total_params"]) == 52_471_430_656


def test_config_seed_used_when_flag_absent(tmp_path, capsys):
    cfg7 = write_config(tmp_path, {"seed": 7, "options": {"instances": 2}}, "a.json")
    cfg_default = write_config(tmp_path, {"options": {"instances": 2}}, "b.json")
    _, out_cfg, _ = run(capsys, "route-bench", "--config", cfg7)
    _, out_flag, _ = run(capsys, "route-bench", "--config", cfg_default, "--seed", "7")
    _, out_default, _ = run(capsys, "route-bench", "--config", cfg_default, "--seed", "42")
    _, out_bare, _ = run(capsys, "route-bench", "--config", cfg_default)
    assert out_cfg == out_flag
    assert out_bare == out_default  # default seed is 42
    assert out_cfg != out_default


def test_bad_seed_type_rejected(tmp_path, capsys):
    cfg = write_config(tmp_path, {"seed": "forty-two"})
    code, _, err = run(capsys, "params", "--config", cfg)
    assert code == 2


def test_unknown_verb_exits_nonzero(capsys):
    assert main(["frobnicate"]) == 2
