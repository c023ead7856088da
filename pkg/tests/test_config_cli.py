import json
from pathlib import Path

import numpy as np
import pytest

from camil import pipeline
from camil.cli import MANIFEST_NAME, digest, main
from camil.config import ConfigError, dump_config, get_list, get_typed, load_config
from camil.data_model import (
    Cohort,
    FeatureBag,
    PatientRecord,
    TargetSpec,
    binarize_target,
    load_cohort,
    write_cohort,
)
from camil.splitting import read_fold_plan, site_aware_folds

SMALL = [
    "synth.n_patients=40",
    "synth.n_sites=5",
    "synth.instances_min=6",
    "synth.instances_max=10",
    "synth.d=8",
    "split.k=3",
    "train.epochs=2",
    "train.h_att=16",
    "train.h_mlp=16",
]


def _paths(root: Path) -> list[str]:
    return [
        f"run.out_root={root}",
        f"cohort.features_dir={root}/synth/features",
        f"cohort.clinical_table={root}/synth/clinical.csv",
        f"split.plan={root}/split/fold_plan.csv",
        f"evaluate.models_dir={root}/train",
        f"survival.models_dir={root}/train",
        f"heatmap.models_dir={root}/train",
    ]


def _run(command: str, root: Path, *extra: str) -> int:
    return main([command, *extra, *SMALL, *_paths(root)])


def _tree(path: Path) -> dict[str, bytes]:
    return {
        p.relative_to(path).as_posix(): p.read_bytes()
        for p in sorted(path.rglob("*"))
        if p.is_file() and p.name != MANIFEST_NAME
    }


def _manifest_core(path: Path) -> dict:
    m = json.loads(path.read_text())
    m.pop("wall_time_s")
    return m


def _pipeline(root: Path) -> None:
    for command in ("synth", "split", "train", "evaluate"):
        assert _run(command, root) == 0, command


@pytest.fixture(scope="module")
def run_root(tmp_path_factory) -> Path:
    root = tmp_path_factory.mktemp("run")
    _pipeline(root)
    return root


class TestConfig:
    def test_defaults_and_overrides(self):
        cp = load_config(None, ["split.k=7", "run.seed = 3"])
        assert get_typed(cp, "split", "k", int) == 7
        assert get_typed(cp, "run", "seed", int) == 3
        assert get_typed(cp, "synth", "signal_dim_count", int) == 3
        assert get_list(cp, "compare", "presets") == [
            "camil_classification",
            "graziani_regression",
            "camil_regression",
        ]

    def test_include_then_own_keys_then_overrides(self, tmp_path):
        (tmp_path / "base.ini").write_text("[split]\nk = 4\ntol = 0.2\n")
        (tmp_path / "run.ini").write_text("[include]\nfiles = base.ini\n[split]\nk = 6\n")
        cp = load_config(tmp_path / "run.ini", ["split.val_frac=0.3"])
        assert cp.get("split", "k") == "6"
        assert cp.get("split", "tol") == "0.2"
        assert cp.get("split", "val_frac") == "0.3"

    def test_include_cycle(self, tmp_path):
        (tmp_path / "a.ini").write_text("[include]\nfiles = b.ini\n")
        (tmp_path / "b.ini").write_text("[include]\nfiles = a.ini\n")
        with pytest.raises(ConfigError, match="cycle"):
            load_config(tmp_path / "a.ini")

    def test_errors(self, tmp_path):
        with pytest.raises(ConfigError, match="unknown config sections"):
            load_config(None, ["bogus.k=1"])
        with pytest.raises(ConfigError, match="section.key=value"):
            load_config(None, ["k=1"])
        with pytest.raises(ConfigError, match="not found"):
            load_config(tmp_path / "missing.ini")
        with pytest.raises(ConfigError, match="not a valid int"):
            get_typed(load_config(None, ["split.k=five"]), "split", "k", int)

    def test_dump_round_trips(self, tmp_path):
        cp = load_config(None, ["split.k=9"])
        (tmp_path / "dump.ini").write_text(dump_config(cp))
        assert dump_config(load_config(tmp_path / "dump.ini")) == dump_config(cp)


class TestExitCodes:
    def test_unknown_command_is_usage_error(self, capsys):
        assert main(["frobnicate"]) == 2

    def test_missing_config_file(self, tmp_path, capsys):
        assert main(["split", "--config", str(tmp_path / "nope.ini")]) == 2
        err = json.loads(capsys.readouterr().err.strip().splitlines()[-1])
        assert err["exit_code"] == 2 and err["stage"] == "split"

    def test_missing_feature_directory_leaves_no_output(self, tmp_path, capsys):
        out = tmp_path / "out"
        code = main(["split", "--out", str(out), f"cohort.features_dir={tmp_path}/none"])
        assert code == 2
        assert not out.exists()
        assert list(tmp_path.iterdir()) == []

    def test_bad_preset_field(self, tmp_path, capsys):
        assert _run("train", tmp_path, "train.not_a_field=1") == 2

    def test_stage_failure_is_exit_one(self, tmp_path, capsys):
        # a constant target cannot be median-split
        rng = np.random.default_rng(0)
        recs = [PatientRecord(f"p{i}", f"S{i % 3}", 1.0) for i in range(6)]
        bags = {r.patient_id: FeatureBag(r.patient_id, r.site_id, rng.standard_normal((3, 4))) for r in recs}
        cohort = Cohort("flat", bags, {r.patient_id: r for r in recs})
        write_cohort(cohort, tmp_path / "f", tmp_path / "c.csv")
        code = main(
            [
                "split",
                "--out",
                str(tmp_path / "out"),
                f"cohort.features_dir={tmp_path}/f",
                f"cohort.clinical_table={tmp_path}/c.csv",
            ]
        )
        assert code == 1
        err = json.loads(capsys.readouterr().err.strip().splitlines()[-1])
        assert err["exit_code"] == 1 and err["error"] == "DegenerateError"
        assert not (tmp_path / "out").exists()

    def test_print_config(self, capsys):
        assert main(["train", "--print-config", "--seed", "5", "--preset", "camil_regression+use_sgd"]) == 0
        text = capsys.readouterr().out
        assert "[run]" in text and "seed = 5" in text
        assert "ablation = use_sgd" in text


class TestPipelineRun:
    def test_outputs_and_manifests(self, run_root):
        for stage in ("synth", "split", "train/camil_regression", "evaluate"):
            d = run_root / stage
            assert len(list(d.rglob(MANIFEST_NAME))) == 1, stage
            m = json.loads((d / MANIFEST_NAME).read_text())
            assert m["command"] == stage.split("/")[0]
            assert MANIFEST_NAME not in m["outputs"]
            assert all((d / o).is_file() for o in m["outputs"])
            for path, h in m["inputs"].items():
                assert len(h) == 16 and h == digest(path)
        assert sorted(p.name for p in (run_root / "train/camil_regression").glob("*.milm")) == [
            "fold0.milm",
            "fold1.milm",
            "fold2.milm",
        ]
        header = (run_root / "evaluate/summary.csv").read_text().splitlines()[0]
        assert "auroc" in header

    def test_reruns_are_byte_identical(self, run_root, tmp_path):
        _pipeline(tmp_path)
        for stage in ("synth", "split", "train", "evaluate"):
            assert _tree(run_root / stage) == _tree(tmp_path / stage), stage

    def test_rerun_manifest_differs_only_in_paths_and_time(self, run_root, tmp_path):
        assert _run("synth", tmp_path) == 0
        a = _manifest_core(run_root / "synth" / MANIFEST_NAME)
        b = _manifest_core(tmp_path / "synth" / MANIFEST_NAME)
        assert a["outputs"] == b["outputs"] and a["seed"] == b["seed"]
        assert a["config"]["synth"] == b["config"]["synth"]

    def test_seed_changes_the_cohort(self, run_root, tmp_path):
        assert _run("synth", tmp_path, "--seed", "1") == 0
        assert _tree(run_root / "synth") != _tree(tmp_path / "synth")

    def test_survival_and_heatmap_stages(self, run_root, tmp_path):
        assert _run("train", run_root, "--preset", "camil_classification") == 0
        assert _run("survival", run_root, "--out", str(tmp_path / "surv")) == 0
        assert (tmp_path / "surv/survival.csv").read_text().count("\n") >= 2
        assert _run("heatmap", run_root, "--out", str(tmp_path / "heat"), "heatmap.n_top=2") == 0
        assert len(list((tmp_path / "heat").rglob("*.png"))) >= 2


class TestEvaluateReadsTestBagsOnly:
    def test_only_test_bags_are_scored(self, small_synth, monkeypatch):
        cohort, truth, labels, plan = small_synth

        class Tracking(dict):
            seen: set = set()

            def __getitem__(self, key):
                Tracking.seen.add(key)
                return super().__getitem__(key)

        tracked = Cohort(cohort.name, Tracking(cohort.bags), cohort.records)
        model = pipeline.train_folds(
            cohort, plan, pipeline.resolve_preset("camil_regression", epochs=1, h_att=8, h_mlp=8), 0, [0]
        )[0][0]
        scored = []
        monkeypatch.setattr(
            pipeline, "predict_scores", lambda m, bags: scored.extend(b.patient_id for b in bags) or np.zeros(len(bags))
        )
        for fold in range(plan.k):
            Tracking.seen = set()
            scored.clear()
            s = pipeline.test_scoreset(tracked, plan, fold, model, TargetSpec("target"))
            test_ids = set(plan.folds[fold].test_ids)
            assert Tracking.seen == test_ids
            assert set(scored) == test_ids == set(s.patient_ids)


class TestSplitStage:
    def test_cli_plan_matches_library(self, run_root):
        plan = read_fold_plan(run_root / "split/fold_plan.csv", 0)
        cohort = load_cohort(run_root / "synth/features", run_root / "synth/clinical.csv", TargetSpec("target"))
        labels = binarize_target(cohort.targets(), TargetSpec("target"), cohort.patient_ids)
        lib = site_aware_folds(cohort, labels, 3, 0.2, 0, 0.1)
        for got, want in zip(plan.folds, lib.folds, strict=True):
            assert (got.train_ids, got.val_ids, got.test_ids) == (want.train_ids, want.val_ids, want.test_ids)
        summary = (run_root / "split/fold_summary.csv").read_text().splitlines()
        assert len(summary) == 1 + 3

    def test_site_aware_folds_is_a_pure_function(self, small_synth):
        cohort, _, labels, _ = small_synth
        a = site_aware_folds(cohort, labels, 3, 0.2, 0, 0.1)
        b = site_aware_folds(cohort, labels, 3, 0.2, 0, 0.1)
        assert a == b
