import json
import math
import sys

import pytest

from conftest import random_stat_dataset
from poollab.errors import ConfigError, TrainerError
from poollab.orchestrator import (
    EarlyStopPolicy,
    early_stop_check,
    job_result,
    load_workflow,
    run,
    run_iterative,
    run_sweep,
)

FAILING_TRAINER = {"command": [sys.executable, "-c", "import sys; sys.exit(1)"]}


def write_dataset(path, n=60, stats=("sig0", "sig1"), seed=0):
    ds = random_stat_dataset(n, list(stats), seed)
    ds.to_jsonl(path)
    return ds


def probe_config(workdir, dataset_path, ops=("sig0",), target=10, seed=7, max_parallel=1, trainer_params=None, phases_extra=None):
    phases = {
        "probe": [
            {
                "id": "probe1",
                "kind": "probe",
                "params": {
                    "dataset": str(dataset_path),
                    "ops": list(ops),
                    "target_pool_size": target,
                    "trainer_params": trainer_params
                    or {"base": {"score": 1.0}, "weights": {"sig0": 1.0}, "centers": {"sig0": 0.5}},
                },
            }
        ]
    }
    if phases_extra:
        phases.update(phases_extra)
    return {
        "workdir": str(workdir),
        "seed": seed,
        "max_parallel": max_parallel,
        "registries": {"factories": {"trainer": "synthetic"}},
        "phases": phases,
    }


class TestLoadWorkflow:
    def test_single_op_probe_expands_to_four_pools_and_analysis(self, tmp_path):
        dataset = tmp_path / "d.jsonl"
        write_dataset(dataset)
        plan = load_workflow(probe_config(tmp_path / "run", dataset))
        kinds = [job.kind for job in plan.jobs()]
        assert kinds.count("build_pool") == 4  # 3 splits + random control
        assert kinds.count("trial") == 4
        assert kinds.count("rank") == 1

    def test_unregistered_hook_rejected_at_load_time(self, tmp_path):
        config = probe_config(tmp_path, tmp_path / "d.jsonl")
        config["registries"]["hooks"] = ["foo"]
        with pytest.raises(ConfigError, match="unknown hook 'foo'"):
            load_workflow(config)

    def test_unregistered_factory_rejected(self, tmp_path):
        config = probe_config(tmp_path, tmp_path / "d.jsonl")
        config["registries"]["factories"]["trainer"] = "quantum"
        with pytest.raises(ConfigError, match="unknown factory"):
            load_workflow(config)

    def test_empty_phases_are_a_valid_noop_plan(self, tmp_path):
        plan = load_workflow({"workdir": str(tmp_path), "phases": {}})
        assert plan.jobs() == []
        ledger = run(plan)
        assert ledger.entries == ()

    def test_duplicate_job_ids_rejected(self, tmp_path):
        config = {
            "workdir": str(tmp_path),
            "phases": {
                "probe": [
                    {"id": "j", "kind": "rank", "params": {"trials": []}},
                    {"id": "j", "kind": "rank", "params": {"trials": []}},
                ]
            },
        }
        with pytest.raises(ConfigError, match="duplicate job ids"):
            load_workflow(config)

    def test_unknown_kind_rejected(self, tmp_path):
        config = {
            "workdir": str(tmp_path),
            "phases": {"probe": [{"id": "j", "kind": "teleport"}]},
        }
        with pytest.raises(ConfigError, match="unknown job kind"):
            load_workflow(config)

    def test_dangling_needs_rejected(self, tmp_path):
        config = {
            "workdir": str(tmp_path),
            "phases": {"probe": [{"id": "j", "kind": "rank", "needs": ["ghost"]}]},
        }
        with pytest.raises(ConfigError, match="ghost"):
            load_workflow(config)

    def test_needs_may_not_point_to_later_phases(self, tmp_path):
        config = {
            "workdir": str(tmp_path),
            "phases": {
                "probe": [{"id": "early", "kind": "rank", "needs": ["late"]}],
                "evaluate": [{"id": "late", "kind": "report"}],
            },
        }
        with pytest.raises(ConfigError, match="earlier phase"):
            load_workflow(config)

    def test_dependency_cycles_rejected(self, tmp_path):
        config = {
            "workdir": str(tmp_path),
            "phases": {
                "probe": [
                    {"id": "a", "kind": "rank", "needs": ["b"]},
                    {"id": "b", "kind": "rank", "needs": ["a"]},
                ]
            },
        }
        with pytest.raises(ConfigError, match="cycle"):
            load_workflow(config)

    def test_yaml_errors_carry_line_info(self, tmp_path):
        bad = tmp_path / "bad.yaml"
        bad.write_text("workdir: x\nphases:\n  probe: [encoding\n")
        with pytest.raises(ConfigError, match=r"bad\.yaml:\d+"):
            load_workflow(bad)

    def test_unknown_phase_rejected(self, tmp_path):
        with pytest.raises(ConfigError, match="unknown phases"):
            load_workflow({"workdir": str(tmp_path), "phases": {"deploy": []}})

    def test_missing_workdir_rejected(self):
        with pytest.raises(ConfigError, match="workdir"):
            load_workflow({"phases": {}})

    def test_probe_requires_three_splits_for_ranking(self, tmp_path):
        config = probe_config(tmp_path, tmp_path / "d.jsonl")
        config["phases"]["probe"][0]["params"]["n_splits"] = 5
        with pytest.raises(ConfigError, match="n_splits=3"):
            load_workflow(config)


class TestRun:
    def test_two_op_probe_ledger_counts(self, tmp_path):
        dataset = tmp_path / "d.jsonl"
        write_dataset(dataset)
        config = probe_config(tmp_path / "run", dataset, ops=("sig0", "sig1"))
        ledger = run(load_workflow(config))
        assert len(ledger.by_kind("build_pool")) == 7  # 3N + 1
        assert len(ledger.by_kind("trial")) == 7
        assert len(ledger.by_kind("rank")) == 1
        assert all(entry.status == "completed" for entry in ledger.entries)

    def test_rank_artifacts_exist_and_have_all_ops(self, tmp_path):
        dataset = tmp_path / "d.jsonl"
        write_dataset(dataset)
        workdir = tmp_path / "run"
        run(load_workflow(probe_config(workdir, dataset, ops=("sig0", "sig1"))))
        rank = job_result(workdir, "probe1.rank")
        assert {row["op_name"] for row in rank["rows"]} == {"sig0", "sig1"}
        assert (workdir / "jobs" / "probe1.rank" / "ranking.csv").exists()

    def test_same_seed_reproduces_ranking_bytes(self, tmp_path):
        dataset = tmp_path / "d.jsonl"
        write_dataset(dataset, n=120)
        outputs = []
        for name in ("run_a", "run_b"):
            workdir = tmp_path / name
            run(load_workflow(probe_config(workdir, dataset, ops=("sig0", "sig1"))))
            outputs.append((workdir / "jobs" / "probe1.rank" / "ranking.csv").read_bytes())
        assert outputs[0] == outputs[1]

    def test_parallelism_does_not_change_outputs(self, tmp_path):
        dataset = tmp_path / "d.jsonl"
        write_dataset(dataset, n=120)
        outputs = []
        for name, parallel in (("seq", 1), ("par", 8)):
            workdir = tmp_path / name
            config = probe_config(workdir, dataset, ops=("sig0", "sig1"), max_parallel=parallel)
            run(load_workflow(config))
            outputs.append((workdir / "jobs" / "probe1.rank" / "ranking.csv").read_bytes())
        assert outputs[0] == outputs[1]

    def test_output_digests_identical_across_parallelism(self, tmp_path):
        import shutil

        dataset = tmp_path / "d.jsonl"
        write_dataset(dataset, n=120)
        workdir = tmp_path / "run"
        digest_maps = []
        for parallel in (1, 8):
            if workdir.exists():
                shutil.rmtree(workdir)
            config = probe_config(workdir, dataset, ops=("sig0", "sig1"), max_parallel=parallel)
            ledger = run(load_workflow(config))
            digest_maps.append(
                {entry.job_id: entry.output_digest for entry in ledger.entries}
            )
        assert digest_maps[0] == digest_maps[1]

    def test_existing_ledger_requires_resume(self, tmp_path):
        dataset = tmp_path / "d.jsonl"
        write_dataset(dataset)
        config = probe_config(tmp_path / "run", dataset)
        run(load_workflow(config))
        with pytest.raises(ConfigError, match="resume"):
            run(load_workflow(config))

    def test_resume_skips_every_completed_job(self, tmp_path):
        dataset = tmp_path / "d.jsonl"
        write_dataset(dataset)
        config = probe_config(tmp_path / "run", dataset, ops=("sig0", "sig1"))
        first = run(load_workflow(config))
        second = run(load_workflow(config), resume=True)
        assert all(entry.status == "completed" for entry in first.entries)
        assert all(entry.status == "skipped" for entry in second.entries)
        assert len(second.entries) == len(first.entries)

    def test_resume_executes_only_new_jobs(self, tmp_path):
        dataset = tmp_path / "d.jsonl"
        write_dataset(dataset)
        workdir = tmp_path / "run"
        run(load_workflow(probe_config(workdir, dataset)))
        extended = probe_config(
            workdir,
            dataset,
            phases_extra={
                "evaluate": [
                    {
                        "id": "bundle",
                        "kind": "report",
                        "params": {"rankings": ["probe1.rank"]},
                        "needs": ["probe1.rank"],
                    }
                ]
            },
        )
        ledger = run(load_workflow(extended), resume=True)
        by_status = {}
        for entry in ledger.entries:
            by_status.setdefault(entry.status, []).append(entry.job_id)
        assert by_status["completed"] == ["bundle"]
        assert len(by_status["skipped"]) == len(ledger.entries) - 1

    def test_input_change_invalidates_resume(self, tmp_path):
        dataset = tmp_path / "d.jsonl"
        write_dataset(dataset)
        config = probe_config(tmp_path / "run", dataset)
        run(load_workflow(config))
        write_dataset(dataset, seed=99)  # contents changed on disk
        ledger = run(load_workflow(config), resume=True)
        assert all(entry.status == "completed" for entry in ledger.entries)

    def test_failure_halts_dependents_but_not_unrelated_jobs(self, tmp_path):
        dataset = tmp_path / "d.jsonl"
        write_dataset(dataset)
        config = {
            "workdir": str(tmp_path / "run"),
            "seed": 1,
            "registries": {"factories": {"trainer": "synthetic"}},
            "phases": {
                "probe": [
                    {
                        "id": "pool_a",
                        "kind": "build_pool",
                        "params": {"dataset": str(dataset), "op": "sig0", "split": "high", "target_size": 5},
                    },
                    {
                        "id": "bad_trial",
                        "kind": "trial",
                        "params": {"pool": "pool_a", "trainer": "external", "trainer_params": FAILING_TRAINER},
                        "needs": ["pool_a"],
                    },
                    {
                        "id": "doomed_rank",
                        "kind": "rank",
                        "params": {"trials": ["bad_trial"]},
                        "needs": ["bad_trial"],
                    },
                    {
                        "id": "good_trial",
                        "kind": "trial",
                        "params": {"pool": "pool_a", "trainer": "synthetic", "trainer_params": {"base": {"score": 1.0}}},
                        "needs": ["pool_a"],
                    },
                ]
            },
        }
        ledger = run(load_workflow(config))
        status = {entry.job_id: entry.status for entry in ledger.entries}
        assert status["bad_trial"] == "failed"
        assert status["doomed_rank"] == "skipped"
        assert status["good_trial"] == "completed"
        assert status["pool_a"] == "completed"


class TestEarlyStop:
    def test_partial_below_margin_aborts(self):
        policy = EarlyStopPolicy(fraction=0.5, margin=0.05)
        assert early_stop_check(0.40, 0.50, policy) == "abort"

    def test_infinite_margin_never_aborts(self):
        policy = EarlyStopPolicy(fraction=0.5, margin=math.inf)
        assert early_stop_check(-1e9, 0.5, policy) == "continue"

    def test_boundary_is_strict(self):
        policy = EarlyStopPolicy(fraction=0.5, margin=0.05)
        assert early_stop_check(0.45, 0.50, policy) == "continue"

    def test_policy_validation(self):
        with pytest.raises(ValueError):
            EarlyStopPolicy(fraction=0.0, margin=1.0)
        with pytest.raises(ValueError):
            EarlyStopPolicy(fraction=0.5, margin=math.nan)

    def test_surviving_trial_records_the_continue_decision(self, tmp_path):
        dataset = tmp_path / "d.jsonl"
        write_dataset(dataset, n=90)
        trainer_params = {"base": {"score": 1.0}, "weights": {"sig0": 1.0}, "centers": {"sig0": 0.5}}
        config = {
            "workdir": str(tmp_path / "run"),
            "seed": 3,
            "registries": {"factories": {"trainer": "synthetic"}},
            "phases": {
                "probe": [
                    {
                        "id": "pool_high",
                        "kind": "build_pool",
                        "params": {"dataset": str(dataset), "op": "sig0", "split": "high", "target_size": 30},
                    },
                    {
                        "id": "pool_rand",
                        "kind": "build_pool",
                        "params": {"dataset": str(dataset), "split": "random", "target_size": 30},
                    },
                    {
                        "id": "baseline",
                        "kind": "trial",
                        "params": {"pool": "pool_rand", "baseline": True, "trainer_params": trainer_params},
                        "needs": ["pool_rand"],
                    },
                    {
                        "id": "candidate",
                        "kind": "trial",
                        "params": {
                            "pool": "pool_high",
                            "trainer_params": trainer_params,
                            "baseline_trial": "baseline",
                            "early_stop": {"fraction": 0.5, "margin": 0.05},
                        },
                        "needs": ["pool_high", "baseline"],
                    },
                ]
            },
        }
        ledger = run(load_workflow(config))
        status = {entry.job_id: entry.status for entry in ledger.entries}
        assert status["candidate"] == "completed"
        result = job_result(tmp_path / "run", "candidate")
        assert result["early_stop"]["decision"] == "continue"

    def test_unpromising_trial_is_aborted_in_the_ledger(self, tmp_path):
        dataset = tmp_path / "d.jsonl"
        write_dataset(dataset, n=90)
        trainer_params = {"base": {"score": 1.0}, "weights": {"sig0": 1.0}, "centers": {"sig0": 0.5}}
        config = {
            "workdir": str(tmp_path / "run"),
            "seed": 3,
            "registries": {"factories": {"trainer": "synthetic"}},
            "phases": {
                "probe": [
                    {
                        "id": "pool_low",
                        "kind": "build_pool",
                        "params": {"dataset": str(dataset), "op": "sig0", "split": "low", "target_size": 30},
                    },
                    {
                        "id": "pool_rand",
                        "kind": "build_pool",
                        "params": {"dataset": str(dataset), "split": "random", "target_size": 30},
                    },
                    {
                        "id": "baseline",
                        "kind": "trial",
                        "params": {"pool": "pool_rand", "baseline": True, "trainer_params": trainer_params},
                        "needs": ["pool_rand"],
                    },
                    {
                        "id": "candidate",
                        "kind": "trial",
                        "params": {
                            "pool": "pool_low",
                            "trainer_params": trainer_params,
                            "baseline_trial": "baseline",
                            "early_stop": {"fraction": 0.5, "margin": 0.05},
                        },
                        "needs": ["pool_low", "baseline"],
                    },
                ]
            },
        }
        ledger = run(load_workflow(config))
        status = {entry.job_id: entry.status for entry in ledger.entries}
        assert status["candidate"] == "aborted"
        result = job_result(tmp_path / "run", "candidate")
        assert result["aborted"] is True and result["partial_metric"] < 1.0


class TestHooks:
    def test_registered_hooks_fire_around_jobs(self, tmp_path):
        from poollab.orchestrator import register_hook

        events = []
        register_hook("record_events", lambda event, job, ledger: events.append((event, job.job_id)))
        try:
            dataset = tmp_path / "d.jsonl"
            write_dataset(dataset)
            config = probe_config(tmp_path / "run", dataset)
            config["registries"]["hooks"] = ["record_events"]
            run(load_workflow(config))
        finally:
            from poollab.orchestrator import HOOKS

            HOOKS.pop("record_events", None)
        fired = {event for event, _ in events}
        assert fired == {"pre_job", "post_job"}
        assert ("pre_job", "probe1.rank") in events


class TestIterative:
    def _config(self, tmp_path, dataset):
        return probe_config(tmp_path / "chain", dataset, ops=("sig0", "sig1"))

    def test_two_iterations_thread_checkpoints(self, tmp_path):
        dataset = tmp_path / "d.jsonl"
        write_dataset(dataset, n=90)
        chain, ledgers = run_iterative(self._config(tmp_path, dataset), iterations=2)
        assert len(chain.links) == 2 and len(ledgers) == 2
        first, second = chain.links
        assert first.checkpoint_in is None
        assert second.checkpoint_in == first.checkpoint_out
        assert json.loads(open(second.checkpoint_out).read())["lineage"]

    def test_single_iteration_reduces_to_plain_run(self, tmp_path):
        dataset = tmp_path / "d.jsonl"
        write_dataset(dataset, n=90)
        chain, ledgers = run_iterative(self._config(tmp_path, dataset), iterations=1)
        assert len(chain.links) == 1
        assert chain.links[0].checkpoint_in is None
        assert chain.links[0].recipe["op"] in {"sig0", "sig1"}

    def test_checkpointless_trainer_cannot_chain(self, tmp_path):
        dataset = tmp_path / "d.jsonl"
        write_dataset(dataset)
        config = self._config(tmp_path, dataset)
        config["registries"]["factories"]["trainer"] = "external"
        config["phases"]["probe"][0]["params"]["trainer_params"] = FAILING_TRAINER
        with pytest.raises(TrainerError, match="checkpoint"):
            run_iterative(config, iterations=2)


class TestCorrelateAndClusterRecipes:
    def _config(self, tmp_path, dataset):
        config = probe_config(tmp_path / "run", dataset, ops=("sig0", "sig1"))
        config["phases"]["refine"] = [
            {
                "id": "corr",
                "kind": "correlate",
                "params": {"dataset": str(dataset), "ops": ["sig0", "sig1"], "k": 2},
            },
            {
                "id": "recipes",
                "kind": "propose",
                "params": {
                    "rank": "probe1.rank",
                    "strategy": "cluster-representative",
                    "clusters_from": "corr",
                    "max_order": 2,
                },
                "needs": ["corr"],
            },
        ]
        return config

    def test_correlation_artifacts_and_cluster_recipes(self, tmp_path):
        dataset = tmp_path / "d.jsonl"
        write_dataset(dataset, n=80)
        run(load_workflow(self._config(tmp_path, dataset)))
        corr = job_result(tmp_path / "run", "corr")
        assert corr["labels"] == ["sig0", "sig1"]
        assert len(corr["clusters"]) == 2
        csv_lines = (tmp_path / "run" / "jobs" / "corr" / "correlation.csv").read_text().splitlines()
        assert csv_lines[0] == "label,sig0,sig1"
        recipes = job_result(tmp_path / "run", "recipes")["recipes"]
        # two singleton clusters -> recipes over both representatives
        names = [tuple(op["op_name"] for op in recipe["ops"]) for recipe in recipes]
        assert ("sig0",) in names and ("sig1",) in names
        assert any(len(recipe) == 2 for recipe in names)

    def test_cluster_strategy_requires_cluster_source(self, tmp_path):
        dataset = tmp_path / "d.jsonl"
        write_dataset(dataset, n=40)
        config = self._config(tmp_path, dataset)
        del config["phases"]["refine"][1]["params"]["clusters_from"]
        ledger = run(load_workflow(config))
        status = {entry.job_id: entry.status for entry in ledger.entries}
        assert status["recipes"] == "failed"


class TestSweep:
    def _fixture(self, tmp_path):
        ds = random_stat_dataset(40, ["sig0"], seed=0)
        dataset_path = tmp_path / "d.jsonl"
        ds.to_jsonl(dataset_path)
        from poollab.pools import sample_random_control

        pool = sample_random_control(ds, 20, seed=1)
        manifest = tmp_path / "pool.json"
        pool.save(manifest)
        return {
            "pool_manifest": str(manifest),
            "dataset": str(dataset_path),
            "trainer": "synthetic",
            "trainer_params": {"base": {"score": 1.0}, "noise_scale": 0.1},
        }

    def test_one_trial_per_grid_point_plus_ranking(self, tmp_path):
        template = self._fixture(tmp_path)
        grid = [{"prompt": f"variant {i}"} for i in range(10)]
        ledger = run_sweep(template, grid, workdir=tmp_path / "sweep")
        assert len(ledger.by_kind("trial")) == 10
        assert len(ledger.by_kind("sweep_rank")) == 1
        rows = job_result(tmp_path / "sweep", "sweep.rank")["rows"]
        assert len(rows) == 10
        assert sum(1 for row in rows if row["baseline"]) == 1
        improvements = [row["improvement_pct"] for row in rows]
        assert improvements == sorted(improvements, reverse=True)

    def test_grid_of_one(self, tmp_path):
        template = self._fixture(tmp_path)
        ledger = run_sweep(template, [{"prompt": "only"}], workdir=tmp_path / "sweep")
        assert len(ledger.by_kind("trial")) == 1

    def test_duplicate_points_deduplicated_with_warning(self, tmp_path, caplog):
        template = self._fixture(tmp_path)
        grid = [{"prompt": "same"}, {"prompt": "same"}, {"prompt": "other"}]
        with caplog.at_level("WARNING"):
            ledger = run_sweep(template, grid, workdir=tmp_path / "sweep")
        assert len(ledger.by_kind("trial")) == 2
        assert any("duplicates" in message for message in caplog.messages)

    def test_empty_grid_rejected(self, tmp_path):
        with pytest.raises(ValueError, match="empty"):
            run_sweep(self._fixture(tmp_path), [], workdir=tmp_path / "sweep")
