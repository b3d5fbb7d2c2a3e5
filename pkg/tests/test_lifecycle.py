import json

import pytest
from hypothesis import given, strategies as st

from liquid.errors import IllegalTransition, MalformedConfig, StorageFailure
from liquid.lifecycle import (DEFAULT_CONFIG, Event, EventKind, ExitReport, Phase, ServiceState,
                              StartOptionConfig, StartupMode, State, parse_start_option, read_start_option,
                              transition, write_start_option)

LEGAL = {
    (State.STANDBY, EventKind.START_REQUESTED): State.STARTING,
    (State.STANDBY, EventKind.RESTORE_REQUESTED): State.RESTORING,
    (State.STARTING, EventKind.BECAME_RUNNING): State.RUNNING,
    (State.RESTORING, EventKind.BECAME_RUNNING): State.RUNNING,
    (State.RUNNING, EventKind.CHECKPOINT_REQUESTED): State.CHECKPOINTING,
    (State.CHECKPOINTING, EventKind.CHECKPOINT_ABORTED): State.RUNNING,
}
EXITABLE = {State.STARTING, State.RESTORING, State.RUNNING, State.CHECKPOINTING}
REPORT = ExitReport(0)


def _event(kind, mode=StartupMode.STANDBY):
    if kind is EventKind.EXITED:
        return Event.exited(REPORT)
    if kind is EventKind.RESTART_DECIDED:
        return Event.restart_decided(mode)
    return Event(kind)


@pytest.mark.parametrize("state", list(State))
@pytest.mark.parametrize("kind", list(EventKind))
def test_transition_table_is_exactly_the_legal_edges(state, kind):
    current = ServiceState(state)
    if kind is EventKind.EXITED:
        expected = State.EXITED if state in EXITABLE else None
    elif kind is EventKind.RESTART_DECIDED:
        expected = State.STANDBY if state is State.EXITED else None
    else:
        expected = LEGAL.get((state, kind))
    if expected is None:
        with pytest.raises(IllegalTransition):
            transition(current, _event(kind))
    else:
        assert transition(current, _event(kind)).kind is expected


@pytest.mark.parametrize("mode,target", [(StartupMode.STANDBY, State.STANDBY),
                                         (StartupMode.FROM_SCRATCH, State.STARTING),
                                         (StartupMode.RESTORE, State.RESTORING)])
def test_restart_decision_selects_next_state(mode, target):
    exited = ServiceState(State.EXITED, REPORT)
    assert transition(exited, Event.restart_decided(mode)).kind is target


@given(st.lists(st.sampled_from(list(EventKind)), max_size=40), st.sampled_from(list(StartupMode)))
def test_random_event_walks_stay_inside_the_state_set(kinds, mode):
    s = ServiceState(State.STANDBY)
    for k in kinds:
        try:
            nxt = transition(s, _event(k, mode))
        except IllegalTransition:
            continue
        if nxt.kind is State.EXITED:
            assert nxt.report is REPORT
        s = nxt
    assert s.kind in State


def test_exited_carries_report():
    s = transition(ServiceState(State.RUNNING), Event.exited(ExitReport(3)))
    assert s.report.exit_code == 3
    assert s.to_dict()["exit_report"]["exit_code"] == 3


@given(st.integers(min_value=1, max_value=64))
def test_signal_returncode_maps_to_128_plus_signal(sig):
    r = ExitReport.from_returncode(-sig, Phase.CHECKPOINT)
    assert (r.exit_code, r.signal, r.phase) == (128 + sig, sig, Phase.CHECKPOINT)


@given(st.integers(min_value=0, max_value=255))
def test_plain_returncode_kept(code):
    r = ExitReport.from_returncode(code)
    assert r.exit_code == code and r.signal is None


def test_exit_report_validation():
    with pytest.raises(ValueError):
        ExitReport(256)
    with pytest.raises(ValueError):
        ExitReport(-1)
    with pytest.raises(ValueError):
        ExitReport(1, signal=9)


def test_log_tail_bounded():
    r = ExitReport.from_returncode(1, log_tail=[str(i) for i in range(50)], bound=10)
    assert r.log_tail == tuple(str(i) for i in range(40, 50))
    assert ExitReport.from_dict(r.to_dict()).log_tail == r.log_tail


configs = st.builds(
    lambda mode, cmd, loc, reason, gen: StartOptionConfig(
        mode, tuple(cmd), loc if mode is not StartupMode.RESTORE else (loc or "/b"), reason, gen),
    st.sampled_from(list(StartupMode)), st.lists(st.text(max_size=8), max_size=4),
    st.one_of(st.none(), st.text(min_size=1, max_size=20)), st.text(max_size=20),
    st.integers(min_value=0, max_value=10 ** 6))


@given(configs)
def test_start_option_round_trips(cfg):
    parsed, err = parse_start_option(cfg.dumps())
    assert err is None and parsed == cfg


def test_absent_config_is_standby():
    assert parse_start_option(None) == (DEFAULT_CONFIG, None)
    assert DEFAULT_CONFIG.mode is StartupMode.STANDBY


@pytest.mark.parametrize("raw", [b"{not json", b"[]", b'{"mode": "sideways"}', b'{"mode": "restore"}',
                                 b'{"app_command": "python"}', b'{"generation": -2}', b"\xff\xfe"])
def test_malformed_config_falls_back_to_standby(raw):
    cfg, err = parse_start_option(raw)
    assert isinstance(err, MalformedConfig)
    assert cfg.mode is StartupMode.STANDBY and cfg.reason == "malformed-config"


def test_restore_requires_location():
    with pytest.raises(MalformedConfig):
        StartOptionConfig(StartupMode.RESTORE)


def test_writes_bump_generation_atomically(tmp_path):
    loc = tmp_path / "start_option.conf"
    gens = [write_start_option(StartOptionConfig(StartupMode.FROM_SCRATCH, ("x",)), loc).generation
            for _ in range(5)]
    assert gens == [1, 2, 3, 4, 5]
    on_disk, err = read_start_option(loc)
    assert err is None and on_disk.generation == 5 and on_disk.written_at
    assert [p.name for p in tmp_path.iterdir()] == ["start_option.conf"]
    assert json.loads(loc.read_text())["mode"] == "from_scratch"


def test_write_failure_is_storage_failure(tmp_path):
    with pytest.raises(StorageFailure):
        write_start_option(StartOptionConfig(), tmp_path / "missing" / "start_option.conf")
