"""Command-line harness: config merging, subcommands, exit codes, artifacts."""

import json

import numpy as np
import pytest

from relprune.cli import (
    RunConfig,
    build_parser,
    collect_config,
    main,
    parse_ints,
    parse_seeds,
)
from relprune.errors import ConfigError
from relprune.fixtures import make_fixture
from relprune.formats import write_dataset_file
from relprune.search import SearchSpace, SearchLog


@pytest.fixture(scope="module")
def fixture_dir(tmp_path_factory):
    out = tmp_path_factory.mktemp("fx")
    make_fixture("planted-cnn", seed=11, out_dir=out)
    return out


def run_cli(*argv):
    return main([str(a) for a in argv])


def prune_args(fixture_dir, out, *extra):
    return (
        "prune",
        "--model", fixture_dir / "model.nnix",
        "--data", fixture_dir / "test.dset",
        "--out", out,
        "--target", "filters",
        *extra,
    )


SMALL_SPACE = json.dumps(
    {
        "LLL": ["epsilon", "z_plus"],
        "MLL": ["epsilon"],
        "HLL": ["epsilon"],
        "FCL": ["epsilon", "z_plus"],
        "magnitude": [False, True],
    }
)


class TestFlagParsing:
    def test_seed_lists(self):
        assert parse_seeds("0,1,2") == (0, 1, 2)
        assert parse_seeds("0-4") == (0, 1, 2, 3, 4)
        assert parse_seeds("1,3-5,9") == (1, 3, 4, 5, 9)
        assert parse_seeds("-3") == (-3,)
        assert parse_seeds([4, 5]) == (4, 5)

    def test_bad_seed_lists(self):
        with pytest.raises(ConfigError):
            parse_seeds("x")
        with pytest.raises(ConfigError):
            parse_seeds("")
        with pytest.raises(ConfigError):
            parse_seeds("5-2")

    def test_int_lists(self):
        assert parse_ints("1,4,10", "count") == (1, 4, 10)
        assert parse_ints([2, 3], "count") == (2, 3)
        with pytest.raises(ConfigError):
            parse_ints("a,b", "count")
        with pytest.raises(ConfigError):
            parse_ints("", "count")


class TestRunConfig:
    def minimal(self, **extra):
        return {"model": "m.nnix", "data": "d.dset", "out": "o", **extra}

    def test_defaults(self):
        cfg = RunConfig.from_mapping(self.minimal())
        assert cfg.target == "filters"
        assert cfg.kind == "conv_filter"
        assert cfg.method == "lrp"
        assert cfg.steps == 20
        assert cfg.n_ref == 10
        assert cfg.seeds == (0,)
        assert cfg.jobs == 1

    def test_kind_mapping(self):
        for target, kind in [
            ("filters", "conv_filter"),
            ("neurons", "linear_neuron"),
            ("heads", "attention_head"),
        ]:
            assert RunConfig.from_mapping(self.minimal(target=target)).kind == kind

    def test_string_conversions(self):
        cfg = RunConfig.from_mapping(
            self.minimal(classes="0,2", seeds="0-2", steps="8", n_ref="4")
        )
        assert cfg.classes == (0, 2)
        assert cfg.seeds == (0, 1, 2)
        assert cfg.steps == 8
        assert cfg.n_ref == 4

    def test_unknown_key(self):
        with pytest.raises(ConfigError, match="unknown config keys"):
            RunConfig.from_mapping(self.minimal(extra=1))

    def test_missing_required(self):
        with pytest.raises(ConfigError, match="missing required"):
            RunConfig.from_mapping({"model": "m.nnix"})

    def test_null_means_unset(self):
        cfg = RunConfig.from_mapping(self.minimal(seeds=None, preset=None))
        assert cfg.seeds == (0,)
        assert cfg.preset is None

    def test_preset_and_composite_conflict(self):
        composite = {"LLL": "eps", "MLL": "eps", "HLL": "eps", "FCL": "eps"}
        with pytest.raises(ConfigError, match="not both"):
            RunConfig.from_mapping(self.minimal(preset="eps-all", composite=composite))

    def test_bad_choices(self):
        with pytest.raises(ConfigError, match="unknown target"):
            RunConfig.from_mapping(self.minimal(target="layers"))
        with pytest.raises(ConfigError, match="unknown scoring method"):
            RunConfig.from_mapping(self.minimal(method="taylor"))
        with pytest.raises(ConfigError, match="unknown preset"):
            RunConfig.from_mapping(self.minimal(preset="no-such"))
        with pytest.raises(ConfigError, match="missing group rules"):
            RunConfig.from_mapping(self.minimal(composite={"LLL": "eps"}))

    def test_json_round_trip(self):
        cfg = RunConfig.from_mapping(
            self.minimal(target="neurons", classes="1,2", seeds="0-3", preset="yeom")
        )
        assert RunConfig.from_mapping(cfg.to_json()) == cfg

    def test_config_file_merge(self, tmp_path):
        cfg_file = tmp_path / "cfg.json"
        cfg_file.write_text(
            json.dumps({"model": "a.nnix", "data": "b.dset", "out": "c", "steps": 5})
        )
        args = build_parser().parse_args(
            ["prune", "--config", str(cfg_file), "--steps", "9", "--seeds", "0,1"]
        )
        cfg = collect_config(args)
        assert cfg.model.name == "a.nnix"
        assert cfg.steps == 9  # flag wins over the file
        assert cfg.seeds == (0, 1)

    def test_config_file_errors(self, tmp_path):
        args = build_parser().parse_args(["prune", "--config", str(tmp_path / "nope.json")])
        with pytest.raises(ConfigError, match="config file not found"):
            collect_config(args)
        bad = tmp_path / "bad.json"
        bad.write_text("{not json")
        args = build_parser().parse_args(["prune", "--config", str(bad)])
        with pytest.raises(ConfigError, match="not valid JSON"):
            collect_config(args)

    def test_inline_composite_parsing(self):
        args = build_parser().parse_args(
            ["prune", "--model", "m", "--data", "d", "--out", "o", "--composite", "{bad"]
        )
        with pytest.raises(ConfigError, match="not valid JSON"):
            collect_config(args)


class TestFixtureCommand:
    def test_writes_bundle(self, tmp_path):
        out = tmp_path / "fx"
        assert run_cli("fixture", "--kind", "trained-mlp", "--seed", "3", "--out", out) == 0
        for name in ("model.nnix", "train.dset", "test.dset", "manifest.json"):
            assert (out / name).exists()
        manifest = json.loads((out / "manifest.json").read_text())
        assert manifest["kind"] == "trained-mlp"
        assert manifest["seed"] == 3

    def test_unknown_kind_is_usage_error(self):
        with pytest.raises(SystemExit) as exc:
            run_cli("fixture", "--kind", "giant-cnn", "--out", "x")
        assert exc.value.code == 2


class TestPruneCommand:
    def test_artifacts(self, fixture_dir, tmp_path):
        out = tmp_path / "run"
        code = run_cli(
            *prune_args(fixture_dir, out, "--preset", "eps-all",
                        "--steps", "4", "--n-ref", "4", "--seeds", "0,1")
        )
        assert code == 0
        run = json.loads((out / "run.json").read_text())
        assert run["seeds"] == [0, 1]
        assert 0.0 <= run["result"]["a_pr_mean"] <= 1.0
        assert run["result"]["composite_id"] == "eps/eps/eps/eps/mag"
        lines = (out / "sweep.csv").read_text().splitlines()
        assert lines[0] == "rate,acc_mean,acc_sem,method,composite_id,seed_count"
        assert len(lines) == 5
        ranked = json.loads((out / "ranked.json").read_text())
        assert ranked["kind"] == "conv_filter"
        assert len(ranked["ranking"]) == 32
        assert set(ranked["ranking"]) == set(ranked["scores"])

    def test_missing_model_exits_2(self, fixture_dir, tmp_path, capsys):
        code = run_cli(
            "prune", "--model", tmp_path / "nope.nnix",
            "--data", fixture_dir / "test.dset", "--out", tmp_path / "o",
        )
        assert code == 2
        assert "model not found" in capsys.readouterr().err

    def test_attribution_beats_random(self, fixture_dir, tmp_path):
        """On the planted fixture the relevance ordering clears the random
        ordering by a wide margin of mean accuracy over rates."""
        results = {}
        for method in ("lrp", "random"):
            out = tmp_path / method
            extra = ["--preset", "eps-all"] if method == "lrp" else []
            code = run_cli(
                *prune_args(fixture_dir, out, "--method", method, "--steps", "4",
                            "--n-ref", "4", "--seeds", "0-19", *extra)
            )
            assert code == 0
            results[method] = json.loads((out / "run.json").read_text())["result"]
        gap = results["lrp"]["a_pr_mean"] - results["random"]["a_pr_mean"]
        assert gap >= 0.1

    def test_yeom_preset_smoke(self, fixture_dir, tmp_path):
        out = tmp_path / "run"
        code = run_cli(
            *prune_args(fixture_dir, out, "--preset", "yeom",
                        "--steps", "4", "--n-ref", "2")
        )
        assert code == 0
        lines = (out / "sweep.csv").read_text().splitlines()
        assert lines[1].endswith("lrp,zplus/zplus/zplus/zplus,1")

    def test_inline_composite(self, fixture_dir, tmp_path):
        out = tmp_path / "run"
        composite = json.dumps({"LLL": "eps", "MLL": "eps", "HLL": "eps", "FCL": "z+"})
        code = run_cli(
            *prune_args(fixture_dir, out, "--composite", composite,
                        "--steps", "4", "--n-ref", "2")
        )
        assert code == 0
        run = json.loads((out / "run.json").read_text())
        assert run["result"]["composite_id"] == "eps/eps/eps/zplus"

    def test_class_restriction(self, fixture_dir, tmp_path):
        out = tmp_path / "run"
        code = run_cli(
            *prune_args(fixture_dir, out, "--preset", "eps-all", "--classes", "0,1",
                        "--steps", "4", "--n-ref", "2")
        )
        assert code == 0
        acc0 = float((out / "sweep.csv").read_text().splitlines()[1].split(",")[1])
        assert 0.0 <= acc0 <= 1.0

    def test_reruns_are_byte_identical(self, fixture_dir, tmp_path):
        outs = []
        for name in ("a", "b"):
            out = tmp_path / name
            run_cli(
                *prune_args(fixture_dir, out, "--preset", "eps-all",
                            "--steps", "4", "--n-ref", "4", "--seeds", "0,1")
            )
            outs.append((out / "sweep.csv").read_bytes())
        assert outs[0] == outs[1]

    def test_jobs_do_not_change_results(self, fixture_dir, tmp_path):
        outs = []
        for name, jobs in (("serial", "1"), ("pooled", "4")):
            out = tmp_path / name
            run_cli(
                *prune_args(fixture_dir, out, "--preset", "eps-all", "--steps", "4",
                            "--n-ref", "4", "--seeds", "0-3", "--jobs", jobs)
            )
            outs.append((out / "sweep.csv").read_bytes())
        assert outs[0] == outs[1]

    def test_shape_mismatch_is_internal_error(self, fixture_dir, tmp_path, capsys):
        bad = tmp_path / "bad.dset"
        rng = np.random.default_rng(0)
        write_dataset_file(rng.normal(size=(8, 2, 8, 8)), np.zeros(8, dtype=np.int64), bad)
        code = run_cli(
            "prune", "--model", fixture_dir / "model.nnix", "--data", bad,
            "--out", tmp_path / "o", "--preset", "eps-all",
            "--steps", "4", "--n-ref", "2",
        )
        assert code == 1
        assert capsys.readouterr().err.startswith("error:")


class TestSearchCommand:
    def search_args(self, fixture_dir, out, *extra):
        return (
            "search",
            "--model", fixture_dir / "model.nnix",
            "--data", fixture_dir / "test.dset",
            "--out", out,
            "--target", "filters",
            "--steps", "4", "--n-ref", "2", "--init", "3",
            "--space", SMALL_SPACE,
            *extra,
        )

    def test_artifacts_and_exhaustive_budget(self, fixture_dir, tmp_path):
        out = tmp_path / "s"
        code = run_cli(*self.search_args(fixture_dir, out, "--budget", "8"))
        assert code == 0
        best = json.loads((out / "best_composite.json").read_text())
        assert best["space_size"] == 8
        assert best["n_evaluations"] == 8
        log_lines = (out / "search.jsonl").read_text().splitlines()
        assert len(log_lines) == 8
        # Exhaustive budget means the best is the argmax over the whole space.
        records = [json.loads(line) for line in log_lines]
        top = max(r["a_pr"] for r in records if r.get("a_pr") is not None)
        assert best["a_pr"] == top
        # Masking only planted-irrelevant filters keeps accuracy at its
        # unpruned level for every rate in the grid.
        assert best["a_pr"] >= 0.9

    def test_resume_skips_done_configs(self, fixture_dir, tmp_path):
        out = tmp_path / "s"
        argv = self.search_args(fixture_dir, out, "--budget", "8")
        assert run_cli(*argv) == 0
        first = (out / "best_composite.json").read_bytes()
        log_before = (out / "search.jsonl").read_text()
        assert run_cli(*argv) == 0
        assert (out / "search.jsonl").read_text() == log_before
        assert (out / "best_composite.json").read_bytes() == first

    def test_log_rows_parse_as_records(self, fixture_dir, tmp_path):
        out = tmp_path / "s"
        assert run_cli(*self.search_args(fixture_dir, out)) == 0
        space = SearchSpace.from_json(json.loads(SMALL_SPACE))
        records = SearchLog(out / "search.jsonl").load()
        assert all(space.index_of(r.composite) in range(space.size) for r in records)

    def test_invalid_space_exits_2(self, fixture_dir, tmp_path, capsys):
        out = tmp_path / "s"
        code = run_cli(
            "search", "--model", fixture_dir / "model.nnix",
            "--data", fixture_dir / "test.dset", "--out", out,
            "--space", '{"XXX": ["eps"]}',
        )
        assert code == 2
        assert "unknown search space keys" in capsys.readouterr().err

    def test_space_that_is_neither_file_nor_json_exits_2(self, fixture_dir, tmp_path):
        code = run_cli(
            "search", "--model", fixture_dir / "model.nnix",
            "--data", fixture_dir / "test.dset", "--out", tmp_path / "s",
            "--space", "not-a-file",
        )
        assert code == 2


@pytest.fixture(scope="module")
def run_dir(fixture_dir, tmp_path_factory):
    out = tmp_path_factory.mktemp("run")
    run_cli(
        *prune_args(fixture_dir, out, "--preset", "eps-all",
                    "--steps", "4", "--n-ref", "4", "--seeds", "0,1")
    )
    return out


class TestReportCommand:
    def test_artifacts(self, run_dir):
        assert run_cli("report", "--run", run_dir, "--counts", "1,2") == 0
        report = run_dir / "report"
        refcount = (report / "refcount.csv").read_text().splitlines()
        assert refcount[0] == "n_ref,rate,acc_mean,acc_sem,method,composite_id,seed_count"
        # 2 counts x 4 rates, every row tagged with the multi-seed count.
        assert len(refcount) == 9
        assert all(line.startswith(("1,", "2,")) for line in refcount[1:])
        assert all(line.endswith(",2") for line in refcount[1:])
        flow = (report / "flow.csv").read_text().splitlines()
        assert flow[0] == "layer,count,mean_abs,max_abs"
        assert [line.split(",")[0] for line in flow[1:]] == ["conv1", "conv2"]
        drift = (report / "drift.csv").read_text().splitlines()
        assert drift[0] == "rate,similarity,confidence"
        assert len(drift) == 5

    def test_reruns_match_golden_bytes(self, run_dir, tmp_path):
        a, b = tmp_path / "a", tmp_path / "b"
        for out in (a, b):
            assert run_cli("report", "--run", run_dir, "--out", out, "--counts", "1,2") == 0
        for name in ("refcount.csv", "flow.csv", "drift.csv"):
            assert (a / name).read_bytes() == (b / name).read_bytes()

    def test_empty_run_dir_exits_2(self, tmp_path, capsys):
        code = run_cli("report", "--run", tmp_path / "empty")
        assert code == 2
        assert "no run artifacts" in capsys.readouterr().err

    def test_corrupt_run_record_exits_2(self, tmp_path):
        bad = tmp_path / "run"
        bad.mkdir()
        (bad / "run.json").write_text("{broken")
        assert run_cli("report", "--run", bad) == 2

    def test_random_method_run_skips_drift(self, fixture_dir, tmp_path):
        out = tmp_path / "run"
        run_cli(
            *prune_args(fixture_dir, out, "--method", "random",
                        "--steps", "4", "--n-ref", "2")
        )
        assert run_cli("report", "--run", out) == 0
        report = out / "report"
        assert (report / "refcount.csv").exists()
        assert (report / "flow.csv").exists()
        assert not (report / "drift.csv").exists()
