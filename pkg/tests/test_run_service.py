import pytest

from grapemae.db import Phase, RunStatus, create_db_and_tables, get_session, make_engine
from grapemae.run_service import RunService
from grapemae.train_state import TrainState


@pytest.fixture
def service():
    engine = make_engine("sqlite://")
    create_db_and_tables(engine)
    return RunService(lambda: get_session(engine))


def test_run_lifecycle(service):
    run_id = service.start_run("pretrain", Phase.PRETEXT, "T", 0, config_hash="abc", out_dir="runs/x")
    assert service.list_runs()[0]["status"] == "running"
    assert service.finish_run(run_id, "runs/x/pretrain.ckpt", {"final_loss": 0.12})
    runs = service.list_runs(command="pretrain")
    assert runs[0]["status"] == "completed"
    assert runs[0]["metrics"] == {"final_loss": 0.12}
    assert not service.finish_run(999)


def test_failed_runs_are_kept(service):
    run_id = service.start_run("finetune", Phase.DOWNSTREAM, "S", 1)
    service.fail_run(run_id, "boom")
    assert service.list_runs(status=RunStatus.FAILED)[0]["id"] == run_id
    assert service.list_runs(status=RunStatus.COMPLETED) == []


def test_cached_pretext_needs_completed_run(service):
    first = service.start_run("pretrain", Phase.PRETEXT, "T", 0, config_hash="h1")
    assert service.cached_pretext("h1") is None
    service.finish_run(first, "a.ckpt")
    second = service.start_run("pretrain", Phase.PRETEXT, "T", 0, config_hash="h1")
    service.finish_run(second, "b.ckpt")
    assert service.cached_pretext("h1") == "b.ckpt"
    assert service.cached_pretext("h2") is None


def test_sweep_points(service):
    service.record_point("s1", "mask_ratio", 0.5, 0, 0.8, RunStatus.COMPLETED)
    service.record_point("s1", "mask_ratio", 0.75, 0, None, RunStatus.FAILED, error="diverged")
    service.record_point("s2", "mask_ratio", 0.5, 0, 0.7, RunStatus.COMPLETED)
    points = service.sweep_points("s1")
    assert [(p["value"], p["status"]) for p in points] == [("0.5", "completed"), ("0.75", "failed")]


def test_train_state_keeps_earliest_best():
    state = TrainState()
    state.advance_epoch({"epoch": 1})
    assert state.offer(0.5)
    state.advance_epoch({"epoch": 2})
    assert not state.offer(0.5)
    state.advance_epoch({"epoch": 3})
    assert state.offer(0.6)
    assert (state.best_epoch, state.best_score) == (3, 0.6)
    restored = TrainState.from_meta(state.to_meta())
    assert restored == state
