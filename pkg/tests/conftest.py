import numpy as np
import pytest

from roadloc.geoworld import WorldConfig, generate_world, simulate_rides

SMALL_WORLD = WorldConfig(width=600.0, height=400.0, block_x=150.0, block_y=200.0)


@pytest.fixture(scope="session")
def small_world():
    return generate_world(SMALL_WORLD, seed=3)


@pytest.fixture(scope="session")
def small_frames(small_world):
    return simulate_rides(small_world, range(1, 41), 30.0, 5.0)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


# desk-sized pipeline for CLI runs: a few seconds end to end
SMALL_PIPELINE = {
    "world": {"width": 1000.0, "height": 500.0},
    "benchmark": {"n_rides": 60, "duration": 20.0, "validation_every": 3, "test_area": [300.0, 180.0, 700.0, 320.0],
                  "sweep_rides": 5, "calibration_rides": 12, "e2e_rides": 3, "budgets": [50.0]},
    "train": {"steps": 300},
}
PIPELINE_STEPS = [
    ["generate", "--seed", "1"],
    ["train", "--triplets", "regular"],
    ["train", "--triplets", "all"],
    ["index"],
    ["localize"],
    ["fuse"],
    ["eval", "retrieval"],
    ["eval", "sweep"],
    ["eval", "e2e"],
]


def run_pipeline(out, config_path):
    from roadloc.cli import main

    for step in PIPELINE_STEPS:
        extra = ["--config", str(config_path)] if step[0] == "generate" else []
        rc = main([*step, "--out", str(out), *extra])
        if rc != 0:
            raise RuntimeError(f"`roadloc {' '.join(step)}` exited with {rc}")
    return out


@pytest.fixture(scope="session")
def pipeline_runs(tmp_path_factory):
    """Two independent runs of every subcommand with the same seed and config."""
    import json

    base = tmp_path_factory.mktemp("pipeline")
    cfg = base / "small.json"
    cfg.write_text(json.dumps(SMALL_PIPELINE))
    return run_pipeline(base / "a", cfg), run_pipeline(base / "b", cfg)


# --- standard benchmark, shared by the trained-model and acceptance tests ---

STANDARD_SEED = 1


@pytest.fixture(scope="session")
def standard():
    """Standard benchmark, both trained models and their thresholds, with wall-clock cost."""
    import time

    from roadloc.embedding import TrainSchedule
    from roadloc.experiments import build_benchmark, train_model
    from roadloc.retrieval import calibrate_threshold

    t0 = time.perf_counter()
    bench = build_benchmark(STANDARD_SEED)
    schedule = TrainSchedule(seed=STANDARD_SEED)
    models, histories, thresholds = {}, {}, {}
    for key in ("regular", "all"):
        models[key], histories[key] = train_model(bench.train, key, schedule)
        thresholds[key] = calibrate_threshold(models[key], bench.validation)
    return {"bench": bench, "models": models, "histories": histories, "thresholds": thresholds,
            "seconds": time.perf_counter() - t0}


@pytest.fixture(scope="session")
def retrieval(standard):
    import time

    from roadloc.experiments import experiment_retrieval

    t0 = time.perf_counter()
    thr = standard["thresholds"]
    result = experiment_retrieval(standard["bench"], standard["models"], {"VL-GIST": thr["regular"], "VL-GIST*": thr["all"]})
    return result, standard["seconds"] + time.perf_counter() - t0


@pytest.fixture(scope="session")
def end_to_end(standard):
    from roadloc.experiments import experiment_end_to_end

    return experiment_end_to_end(standard["bench"], standard["models"]["all"], standard["thresholds"]["all"])


# --- acceptance report: one line per criterion in the terminal summary ---

ACCEPTANCE: dict = {}


def record_criterion(number: int, ok: bool, detail: str) -> None:
    ACCEPTANCE[number] = (bool(ok), detail)


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE):
        ok, detail = ACCEPTANCE[n]
        terminalreporter.write_line(f"criterion {n:2d}: {'PASS' if ok else 'FAIL'}  {detail}")
