import csv
import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from fuzzy_takeoff import cli
from fuzzy_takeoff.clearance import DEFAULT_RULES
from fuzzy_takeoff.scenario import (
    ACTIVATION_COLUMNS,
    COST_COLUMNS,
    TRAJECTORY_COLUMNS,
    ScenarioError,
    activation_row,
    emit,
    format_activation_rows,
    parse_scenario,
    validate,
)

MINIMAL = {
    "ownship": {"position": [0, 0, 0], "velocity": [80, 0, 0]},
    "goal": [15000, 0, 1000],
    "obstacles": [],
}


def with_(base=MINIMAL, **changes):
    doc = json.loads(json.dumps(base))
    doc.update(changes)
    return doc


def bird(oid, size=40.0, position=(5000.0, 0.0, 0.0)):
    return {"id": oid, "type": "bird", "size": size, "position": list(position), "velocity": [0, 0, 0]}


def codes(doc):
    return {v.code for v in validate(parse_scenario(json.dumps(doc)))}


def parse_error(doc):
    with pytest.raises(ScenarioError) as info:
        parse_scenario(json.dumps(doc))
    return str(info.value)


# --- parsing --------------------------------------------------------------


def test_minimal_file_gets_defaults():
    s = parse_scenario(json.dumps(MINIMAL))
    assert s.config.tick_interval == 1.0 and s.config.n_control_nodes == 25
    assert s.config.w_obstacle == 1e3 and s.config.mf_overrides == {}
    assert np.array_equal(s.runway_end_position, [0, 0, 0])
    assert validate(s) == []


def test_unknown_key_rejected():
    assert "unknown key 'wind'" in parse_error(with_(wind=3))
    assert "unknown key 'config.colour'" in parse_error(with_(config={"colour": 1}))


def test_missing_key_named():
    doc = with_()
    del doc["goal"]
    assert "missing required key 'goal'" in parse_error(doc)


def test_type_mismatch_has_path():
    msg = parse_error(with_(obstacles=[{**bird(1), "size": "big"}]))
    assert "obstacles.0.size" in msg


def test_bad_obstacle_type():
    assert "obstacles.0.type" in parse_error(with_(obstacles=[{**bird(1), "type": "kite"}]))


def test_duplicate_id_named():
    msg = parse_error(with_(obstacles=[bird(7), bird(7, position=(6000, 0, 0))]))
    assert "DUPLICATE_ID" in msg and "7" in msg


def test_bird_size_bound_cited():
    msg = parse_error(with_(obstacles=[bird(1, size=500)]))
    assert "BIRD_SIZE" in msg and "[1, 277]" in msg


def test_non_finite_rejected():
    with pytest.raises(ScenarioError):
        parse_scenario('{"ownship": {"position": [0,0,0], "velocity": [NaN,0,0]}, "goal": [1,2,3], "obstacles": []}')


def test_malformed_json():
    with pytest.raises(ScenarioError):
        parse_scenario("{not json")


# --- validation -----------------------------------------------------------


def test_runway_clearance():
    assert codes(with_(obstacles=[bird(1, position=(900, 0, 0))])) == {"RUNWAY_CLEARANCE"}
    assert codes(with_(obstacles=[bird(1, position=(1000, 0, 0))])) == set()


def test_runway_end_used_when_given():
    doc = with_(runway_end=[-2000, 0, 0], obstacles=[bird(1, position=(-1500, 0, 0))])
    assert codes(doc) == {"RUNWAY_CLEARANCE"}


def test_speed_bound():
    doc = with_(ownship={"position": [0, 0, 0], "velocity": [200, 0, 0]})
    assert codes(doc) == {"SPEED_BOUND"}


@pytest.mark.parametrize(
    "config, code",
    [
        ({"tick_interval": 0.0}, "TICK_INTERVAL"),
        ({"max_ticks": 0}, "MAX_TICKS"),
        ({"w_obstacle": -1.0}, "WEIGHT"),
        ({"n_control_nodes": 30, "n_integration_steps": 20}, "DISCRETIZATION"),
        ({"t_min": 10.0, "t_max": 5.0}, "TIME_BOUNDS"),
    ],
)
def test_config_codes(config, code):
    assert codes(with_(config=config)) == {code}


def test_violations_carry_messages():
    doc = with_(ownship={"position": [0, 0, 0], "velocity": [200, 0, 0]}, obstacles=[bird(1, position=(900, 0, 0))])
    for v in validate(parse_scenario(json.dumps(doc))):
        assert v.code.isupper() and v.message


def test_mf_override_applied():
    override = {"urgency": {"distance": {"Medium": {"shape": "triangle", "params": [400, 1800, 4200]}}}}
    s = parse_scenario(json.dumps(with_(config={"mf_overrides": override})))
    assert validate(s) == []
    rules = s.rules()
    assert rules.urgency(1000.0, -50.0) != DEFAULT_RULES.urgency(1000.0, -50.0)
    assert rules.radius("bird", 50.0) == DEFAULT_RULES.radius("bird", 50.0)


def test_mf_override_coverage_hole():
    override = {"urgency": {"distance": {"Large": {"shape": "trapezoid", "params": [4500, 5000, 6000, 6000]}}}}
    assert codes(with_(config={"mf_overrides": override})) == {"MF_COVERAGE"}


@pytest.mark.parametrize(
    "override",
    [
        {"speed": {"distance": {"Small": {"shape": "triangle", "params": [0, 1, 2]}}}},
        {"urgency": {"altitude": {"Small": {"shape": "triangle", "params": [0, 1, 2]}}}},
        {"urgency": {"distance": {"Huge": {"shape": "triangle", "params": [0, 1, 2]}}}},
        {"urgency": {"distance": {"Small": {"shape": "triangle", "params": [3, 1, 2]}}}},
    ],
)
def test_mf_override_malformed(override):
    assert "MF_OVERRIDE" in parse_error(with_(config={"mf_overrides": override}))


# --- round trip -----------------------------------------------------------

coords = st.floats(-20000, 20000, allow_nan=False)
vec3 = st.tuples(coords, coords, coords)


@st.composite
def scenarios(draw):
    n = draw(st.integers(0, 4))
    ids = draw(st.lists(st.integers(-100, 100), min_size=n, max_size=n, unique=True))
    obstacles = [
        {
            "id": i,
            "type": draw(st.sampled_from(["air_vehicle", "bird"])),
            "size": draw(st.floats(1, 277)),
            "position": list(draw(vec3)),
            "velocity": list(draw(vec3)),
        }
        for i in ids
    ]
    doc = {
        "ownship": {"position": list(draw(vec3)), "velocity": list(draw(vec3))},
        "goal": list(draw(vec3)),
        "obstacles": obstacles,
    }
    if draw(st.booleans()):
        doc["runway_end"] = list(draw(vec3))
    if draw(st.booleans()):
        doc["config"] = {"tick_interval": draw(st.floats(0.1, 5)), "w_obstacle": draw(st.floats(0, 1e7))}
    return json.dumps(doc)


@settings(max_examples=60)
@given(scenarios())
def test_round_trip(text):
    first = parse_scenario(text)
    assert parse_scenario(emit(first)) == first


# --- trace formatting -----------------------------------------------------


def test_activation_row_full_precision():
    d = DEFAULT_RULES.decide_geometry(3, "bird", 50.0, 2000.0 / 3.0, -100.0 / 7.0)
    line = format_activation_rows([activation_row(4, d)]).splitlines()[1].split(",")
    assert float(line[2]) == d.distance and float(line[3]) == d.closing_rate
    assert float(line[5]) == d.urgency and line[7] in ("0", "1")


# --- command line ---------------------------------------------------------


def read_table(path):
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    return rows[0], np.array(rows[1:], dtype=float)


def test_validate_bad_scenario(scenario_path, capsys):
    assert cli.main(["validate", str(scenario_path("bad_scenario"))]) == 1
    err = capsys.readouterr().err
    assert "RUNWAY_CLEARANCE" in err and "SPEED_BOUND" in err


def test_validate_good_scenarios(scenario_path, capsys):
    for name in ("empty_sky", "head_on", "mixed", "receding"):
        assert cli.main(["validate", "--scenario", str(scenario_path(name))]) == 0
    assert capsys.readouterr().err == ""


def test_fuzzy_eval_example(capsys):
    code = cli.main(["fuzzy-eval", "--type", "air_vehicle", "--size", "30", "--d", "2000", "--cr", "-150"])
    assert code == 0
    header, row = capsys.readouterr().out.strip().splitlines()
    assert header.split(",") == list(ACTIVATION_COLUMNS)
    fields = dict(zip(ACTIVATION_COLUMNS, row.split(",")))
    assert float(fields["radius"]) == 5556.0 and fields["active"] == "1"


def test_fuzzy_eval_matches_library_bit_for_bit(capsys):
    argv = [
        "fuzzy-eval", "--type", "bird", "--size", "73.5", "--id", "9",
        "--position", "3100.5,-220.25,480", "--velocity=-12.5,3,0",
        "--own-position", "10,0,5", "--own-velocity", "80,0,4",
    ]
    assert cli.main(argv) == 0
    from fuzzy_takeoff.clearance import ObstacleObservation, OwnshipState, decide

    d = decide(
        ObstacleObservation(9, "bird", 73.5, [3100.5, -220.25, 480], [-12.5, 3, 0]),
        OwnshipState([10, 0, 5], [80, 0, 4]),
    )
    assert capsys.readouterr().out == format_activation_rows([activation_row(0, d)])


def test_fuzzy_eval_uses_scenario_overrides(tmp_path, capsys):
    override = {"urgency": {"distance": {"Medium": {"shape": "triangle", "params": [400, 1800, 4200]}}}}
    path = tmp_path / "s.json"
    path.write_text(json.dumps(with_(config={"mf_overrides": override})))
    args = ["fuzzy-eval", "--type", "bird", "--size", "50", "--d", "1000", "--cr", "-50"]
    cli.main(args)
    plain = capsys.readouterr().out
    cli.main(args + ["--scenario", str(path)])
    assert capsys.readouterr().out != plain


def test_simulate_empty_sky(scenario_path, tmp_path, capsys):
    code = cli.main(["simulate", "--scenario", str(scenario_path("empty_sky")), "--out", str(tmp_path), "--seed", "7"])
    assert code == 0
    out = capsys.readouterr().out
    assert "solves,1" in out
    header, cost = read_table(tmp_path / "cost.csv")
    assert tuple(header) == COST_COLUMNS
    resolved = cost[:, header.index("resolved")]
    assert resolved[0] == 1 and not resolved[1:].any()
    header, traj = read_table(tmp_path / "trajectory.csv")
    assert tuple(header) == TRAJECTORY_COLUMNS and traj.shape == (150, 7)
    header, act = read_table(tmp_path / "activation.csv")
    assert tuple(header) == ACTIVATION_COLUMNS and act.shape == (0,)


def test_simulate_tables_rectangular(scenario_path, tmp_path, capsys):
    code = cli.main(["simulate", str(scenario_path("mixed")), "--out", str(tmp_path), "--max-ticks", "12"])
    assert code == 0
    for name, cols in (("trajectory", TRAJECTORY_COLUMNS), ("cost", COST_COLUMNS), ("activation", ACTIVATION_COLUMNS)):
        header, table = read_table(tmp_path / f"{name}.csv")
        assert tuple(header) == cols
        assert table.ndim == 2 and table.shape[1] == len(cols)
        assert np.all(np.isfinite(table))
    assert read_table(tmp_path / "activation.csv")[1].shape[0] == 24


def test_plan_writes_trajectory(scenario_path, tmp_path, capsys):
    assert cli.main(["plan", str(scenario_path("head_on")), "--out", str(tmp_path)]) == 0
    lines = dict(line.split(",", 1) for line in capsys.readouterr().out.splitlines())
    assert {"time_cost", "obstacle_penalty", "terminal_penalty", "bounds_penalty", "total"} <= set(lines)
    header, traj = read_table(tmp_path / "trajectory.csv")
    assert traj.shape == (101, 7)
    assert float(lines["t_final"]) == traj[-1, 0]


def test_plan_solver_failure(monkeypatch, scenario_path, tmp_path, capsys):
    from dataclasses import replace

    real = cli.solve

    def failing(problem, **kw):
        return replace(real(problem, max_iter=1), status="diverged", converged=False, message="injected")

    monkeypatch.setattr(cli, "solve", failing)
    assert cli.main(["plan", str(scenario_path("empty_sky")), "--out", str(tmp_path)]) == 2
    assert "injected" in capsys.readouterr().err


def test_invalid_scenario_exit_one(scenario_path, tmp_path, capsys):
    assert cli.main(["simulate", str(scenario_path("bad_scenario")), "--out", str(tmp_path)]) == 1
    assert cli.main(["plan", str(tmp_path / "missing.json")]) == 1


@pytest.mark.parametrize(
    "argv",
    [
        [],
        ["fly"],
        ["simulate", "--bogus"],
        ["simulate", "x.json", "--max-ticks", "many"],
        ["simulate"],
        ["fuzzy-eval", "--type", "bird"],
        ["fuzzy-eval", "--type", "bird", "--size", "10", "--d", "100"],
        ["fuzzy-eval", "--type", "bird", "--size", "10", "--position", "1,2"],
    ],
)
def test_bad_flags_exit_64(argv, capsys):
    assert cli.main(argv) == 64
    assert "usage" in capsys.readouterr().err


def test_help_exits_zero(capsys):
    assert cli.main(["--help"]) == 0
    assert "simulate" in capsys.readouterr().out
