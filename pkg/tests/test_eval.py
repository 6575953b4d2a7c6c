import json

import numpy as np
import pytest

from ata import evaluation as ev
from ata.errors import DataError
from ata.router import LABEL_TO_CLASS


def make_episode(i, decision, outcome, suite="Goal", variant="swap",
                 wall_time=3.0, cf=False):
    return ev.Episode(
        episode_id=f"ep{i}", suite=suite, variant=variant, decision=decision,
        outcome=outcome, wall_time_s=wall_time, counterfactual_failure=cf,
    )


# --- classification report -----------------------------------------------------


def test_perfect_predictions():
    rep = ev.classification_report([0, 1, 2, 0, 1, 2], [0, 1, 2, 0, 1, 2])
    assert rep.macro_f1 == 1.0
    np.testing.assert_array_equal(rep.confusion, np.diag([2, 2, 2]))


def test_hand_counted_confusion():
    # truth = [Act, Act, Think, Abstain], pred = [Act, Think, Think, Abstain]
    rep = ev.classification_report([0, 0, 1, 2], [0, 1, 1, 2])
    np.testing.assert_array_equal(rep.confusion, [[1, 1, 0], [0, 1, 0], [0, 0, 1]])
    assert rep.macro_f1 == pytest.approx(7 / 9)
    assert rep.f1 == pytest.approx([2 / 3, 2 / 3, 1.0])


def test_all_act_on_balanced_truth():
    rep = ev.classification_report([0, 0, 1, 1, 2, 2], [0] * 6)
    assert rep.f1[0] == pytest.approx(0.5)
    assert rep.f1[1] == 0.0 and rep.f1[2] == 0.0
    assert rep.macro_f1 == pytest.approx(1 / 6)


def test_zero_support_class_excluded_from_macro():
    rep = ev.classification_report([0, 0, 2, 2], [0, 0, 2, 2])
    assert rep.supports == [2, 0, 2]
    assert rep.macro_f1 == 1.0  # Think has no support and does not drag the mean


def test_report_rejects_empty_or_mismatched():
    with pytest.raises(DataError):
        ev.classification_report([], [])
    with pytest.raises(DataError):
        ev.classification_report([0, 1], [0])


# --- rollout accounting --------------------------------------------------------


def test_all_abstain_prevented_failures():
    log = [make_episode(i, "Abstain", "not_executed", cf=True) for i in range(30)]
    stats = ev.rollout_account(log)[("Goal", "swap")]
    assert stats.success_rate == 0.0
    assert stats.prevented_failures == 30
    assert stats.abstain == 30
    assert stats.mean_wall_time_s == pytest.approx(3.0)


def test_table_fixture_goal_swap():
    """0 Act / 2 Think / 28 Abstain with 28 prevented failures."""
    log = (
        [make_episode(i, "Think", "success", wall_time=6.0) for i in range(2)]
        + [make_episode(10 + i, "Abstain", "not_executed", cf=True) for i in range(28)]
    )
    stats = ev.rollout_account(log)[("Goal", "swap")]
    assert (stats.act, stats.think, stats.abstain) == (0, 2, 28)
    assert stats.prevented_failures == 28
    assert stats.episodes == 30


def test_random_log_matches_hand_tally(rng):
    decisions = ["Act", "Think", "Abstain"]
    log = []
    for i in range(100):
        d = decisions[rng.integers(3)]
        outcome = "not_executed" if d == "Abstain" else ("success", "failure")[rng.integers(2)]
        log.append(make_episode(
            i, d, outcome, suite=("Goal", "Spatial")[rng.integers(2)], variant="v",
            wall_time=float(rng.uniform(1, 10)), cf=bool(rng.integers(2)),
        ))
    accounts = ev.rollout_account(log)
    # independent single-pass tally
    for key, stats in accounts.items():
        eps = [e for e in log if (e.suite, e.variant) == key]
        assert stats.episodes == len(eps)
        assert stats.successes == sum(e.outcome == "success" for e in eps)
        assert stats.abstain == sum(e.decision == "Abstain" for e in eps)
        assert stats.think == sum(e.decision == "Think" for e in eps)
        assert stats.act == sum(e.decision == "Act" for e in eps)
        assert stats.prevented_failures == sum(
            e.decision == "Abstain" and e.counterfactual_failure for e in eps
        )
        assert stats.total_wall_time_s == pytest.approx(sum(e.wall_time_s for e in eps))


def test_abstain_must_not_execute():
    with pytest.raises(DataError, match="must not execute"):
        make_episode(0, "Abstain", "success").validate()


def test_episode_log_round_trip(tmp_path):
    log = [make_episode(i, "Act", "success") for i in range(3)]
    path = tmp_path / "log.jsonl"
    with open(path, "w") as fh:
        for e in log:
            fh.write(json.dumps({
                "episode_id": e.episode_id, "suite": e.suite, "variant": e.variant,
                "decision": e.decision, "outcome": e.outcome,
                "wall_time_s": e.wall_time_s,
                "counterfactual_failure": e.counterfactual_failure,
            }) + "\n")
    assert ev.read_episode_log(path) == log


def test_empty_log_rejected():
    with pytest.raises(DataError):
        ev.rollout_account([])


# --- synthetic benchmark and sweeps --------------------------------------------


def test_benchmark_structure(small_bench):
    features, manifest, truth = small_bench
    assert set(features) == {"vision", "text"}
    assert features["vision"].n_samples == 1000
    labels = {label: len(manifest.ids(label=label)) for label in ("ID", "PartialOOD", "FullOOD")}
    assert labels == {"ID": 400, "PartialOOD": 200, "FullOOD": 400}
    # already partitioned
    assert len(manifest.ids(split="detector")) > 0
    assert truth.rotation.shape == (32, 32)


def test_benchmark_deterministic():
    a = ev.make_benchmark(seed=3, n_id=40, n_think=20, n_ood=40, dim=8, text_dim=6)
    b = ev.make_benchmark(seed=3, n_id=40, n_think=20, n_ood=40, dim=8, text_dim=6)
    assert a[0]["vision"].data.tobytes() == b[0]["vision"].data.tobytes()
    assert a[0]["text"].data.tobytes() == b[0]["text"].data.tobytes()


def test_bayes_oracle_beats_chance(small_bench):
    features, manifest, truth = small_bench
    eval_ids = manifest.ids(split="validation")
    table = manifest.sample_table()
    y = np.array([LABEL_TO_CLASS[table[s].label] for s in eval_ids])
    pred = ev.bayes_oracle_predict(features["vision"].rows_for(eval_ids), truth)
    rep = ev.classification_report(y, pred)
    assert rep.macro_f1 >= 0.95  # the generator is constructed to be nearly separable


def test_sweep_single_cell_matches_direct_run(small_bench):
    features, manifest, _ = small_bench
    result = ev.sweep_k(features, manifest, [3], [0])
    direct, _, _ = ev.evaluate_config(features, manifest, "gmm_vision", seed=0, k=3)
    assert result.cells[(3, 0)] == direct.macro_f1
    assert result.mean == [direct.macro_f1]


def test_sweep_data_fraction_one_reproduces(small_bench):
    features, manifest, _ = small_bench
    results = ev.sweep_data(features, manifest, fractions=[1.0], seeds=[0])
    direct, _, _ = ev.evaluate_config(features, manifest, "gmm_vision", seed=0)
    assert results["gmm_vision"].cells[(1.0, 0)] == direct.macro_f1


def test_sweep_data_records_failures_without_crashing(small_bench):
    features, manifest, _ = small_bench
    # 0.001 of this small draw keeps a single detector row: too few to fit
    results = ev.sweep_data(features, manifest, fractions=[0.001], seeds=[0])
    cell = results["gmm_vision"].cells[(0.001, 0)]
    assert isinstance(cell, str) and cell.startswith("failed:")


def test_evaluate_config_unknown_split(small_bench):
    features, manifest, _ = small_bench
    with pytest.raises(DataError):
        ev.evaluate_config(features, manifest, "gmm_vision", eval_split="test")
