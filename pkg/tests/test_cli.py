import csv
import json
from pathlib import Path

import numpy as np
import pytest

from spaen import ablations, data, evaluation, spaces, trainer
from spaen.cli import main

GEN_FLAGS = [
    "--seed", "0", "--classes", "6", "--attributes", "8", "--per-class", "6",
    "--image-size", "8", "--noise-std", "0.02", "--unseen-count", "2",
    "--val-count", "1",
]
FAST_TRAIN_FLAGS = ["--lr", "0.05", "--batch-size", "16", "--n-critic", "1"]


@pytest.fixture(scope="module")
def dataset_dir(tmp_path_factory):
    out = tmp_path_factory.mktemp("cli") / "dataset"
    assert main(["generate-data", "--out", str(out), *GEN_FLAGS]) == 0
    return out


@pytest.fixture(scope="module")
def clsonly_run(tmp_path_factory, dataset_dir):
    out = tmp_path_factory.mktemp("cli") / "clsonly"
    rc = main([
        "train", "--dataset", str(dataset_dir), "--out", str(out),
        "--variant", "cls-only", "--epochs", "2", *FAST_TRAIN_FLAGS,
    ])
    assert rc == 0
    return out


class TestGenerateData:
    def test_writes_expected_files(self, dataset_dir):
        for name in ("classes.csv", "splits.csv", "gen_config.json", "config.json"):
            assert (dataset_dir / name).exists(), name
        images = list((dataset_dir / "images").glob("*.ppm"))
        assert len(images) == 6 * 6

    def test_config_echo_records_flags(self, dataset_dir):
        payload = json.loads((dataset_dir / "config.json").read_text())
        assert payload["seed"] == 0
        assert payload["classes"] == 6
        assert payload["unseen_count"] == 2

    def test_regeneration_is_byte_identical(self, dataset_dir, tmp_path):
        twin = tmp_path / "twin"
        assert main(["generate-data", "--out", str(twin), *GEN_FLAGS]) == 0
        for name in ("classes.csv", "splits.csv", "gen_config.json"):
            assert (twin / name).read_bytes() == (dataset_dir / name).read_bytes(), name
        for ppm in sorted((dataset_dir / "images").glob("*.ppm")):
            assert (twin / "images" / ppm.name).read_bytes() == ppm.read_bytes(), ppm.name

    def test_matches_library_generation(self, dataset_dir):
        dataset, splits = data.load_dataset(dataset_dir)
        cfg = data.GenConfig(n_classes=6, n_attributes=8, n_per_class=6, image_size=8,
                             noise_std=0.02, low_variance_fraction=0.25,
                             unseen_count=2, seed=0)
        oracle = data.generate_synthetic(cfg)
        oracle_splits = data.make_splits(oracle, unseen_count=2, val_count=1, seed=0)
        np.testing.assert_array_equal(dataset.class_attributes, oracle.class_attributes)
        assert list(dataset.labels) == list(oracle.labels)
        assert splits == oracle_splits
        for i in (0, 7, 35):
            np.testing.assert_allclose(
                dataset.image(i), oracle.image(i), atol=1 / 255 + 1e-12
            )


class TestExitCodes:
    def test_missing_required_flag_is_usage_error(self):
        with pytest.raises(SystemExit) as exc:
            main(["train", "--out", "/tmp/x"])
        assert exc.value.code == 2

    def test_unknown_command_is_usage_error(self):
        with pytest.raises(SystemExit) as exc:
            main(["transcode"])
        assert exc.value.code == 2

    def test_unknown_variant_is_usage_error(self, dataset_dir, tmp_path):
        with pytest.raises(SystemExit) as exc:
            main(["train", "--dataset", str(dataset_dir), "--out", str(tmp_path / "o"),
                  "--variant", "vae"])
        assert exc.value.code == 2

    def test_missing_dataset_is_runtime_error(self, tmp_path, capsys):
        rc = main(["train", "--dataset", str(tmp_path / "nope"),
                   "--out", str(tmp_path / "out"), "--epochs", "1"])
        assert rc == 1
        assert "error:" in capsys.readouterr().err

    def test_analyze_without_inputs_is_runtime_error(self, tmp_path, capsys):
        rc = main(["analyze-attributes", "--out", str(tmp_path / "out")])
        assert rc == 1
        assert "provide" in capsys.readouterr().err

    def test_eval_with_missing_checkpoint(self, dataset_dir, tmp_path, capsys):
        rc = main(["eval", "--dataset", str(dataset_dir),
                   "--checkpoint", str(tmp_path / "nope"),
                   "--out", str(tmp_path / "out")])
        assert rc == 1
        assert "error:" in capsys.readouterr().err


class TestTrain:
    def test_outputs(self, clsonly_run):
        assert (clsonly_run / "config.json").exists()
        assert (clsonly_run / "checkpoint" / "manifest.json").exists()
        assert (clsonly_run / "train_state" / "state.json").exists()
        rows = trainer.read_train_log(clsonly_run / "train_log.csv")
        assert [r.epoch for r in rows] == [0, 1]
        for row in rows:  # classification-only: every other column is silent
            assert row.feat == 0.0 and row.pixel == 0.0 and row.rec == 0.0
            assert row.adv_e == 0.0 and row.adv_d == 0.0
            assert row.total == row.cls

    def test_deterministic_across_runs(self, dataset_dir, clsonly_run, tmp_path):
        twin = tmp_path / "twin"
        rc = main([
            "train", "--dataset", str(dataset_dir), "--out", str(twin),
            "--variant", "cls-only", "--epochs", "2", *FAST_TRAIN_FLAGS,
        ])
        assert rc == 0
        assert (twin / "train_log.csv").read_bytes() == \
            (clsonly_run / "train_log.csv").read_bytes()
        for npy in sorted((clsonly_run / "checkpoint").glob("*.npy")):
            assert (twin / "checkpoint" / npy.name).read_bytes() == npy.read_bytes(), npy.name

    def test_resumed_run_matches_straight_run(self, dataset_dir, clsonly_run, tmp_path):
        resumed = tmp_path / "resumed"
        rc = main([
            "train", "--dataset", str(dataset_dir), "--out", str(resumed),
            "--variant", "cls-only", "--epochs", "1",
            "--resume", str(clsonly_run / "train_state"), *FAST_TRAIN_FLAGS,
        ])
        assert rc == 0
        straight = tmp_path / "straight"
        rc = main([
            "train", "--dataset", str(dataset_dir), "--out", str(straight),
            "--variant", "cls-only", "--epochs", "3", *FAST_TRAIN_FLAGS,
        ])
        assert rc == 0
        assert (resumed / "train_log.csv").read_bytes() == \
            (straight / "train_log.csv").read_bytes()

    def test_resume_rejected_for_other_variants(self, dataset_dir, tmp_path, capsys):
        rc = main([
            "train", "--dataset", str(dataset_dir), "--out", str(tmp_path / "out"),
            "--variant", "sae", "--epochs", "1",
            "--resume", str(tmp_path / "state"), *FAST_TRAIN_FLAGS,
        ])
        assert rc == 1
        assert "--resume" in capsys.readouterr().err


class TestEval:
    def test_matches_library_report(self, dataset_dir, clsonly_run, tmp_path):
        out = tmp_path / "eval"
        rc = main([
            "eval", "--dataset", str(dataset_dir),
            "--checkpoint", str(clsonly_run / "checkpoint"),
            "--out", str(out), "--gamma-grid", "51",
        ])
        assert rc == 0

        dataset, splits = data.load_dataset(dataset_dir)
        bundle = ablations.load_bundle(clsonly_run / "checkpoint")
        report = evaluation.full_report(bundle, dataset, splits, n_gamma=51)

        with open(out / "metrics.csv", newline="") as fh:
            got = {row[0]: float(row[1]) for row in list(csv.reader(fh))[1:]}
        assert got == {
            "acc_UU": report.acc_uu,
            "acc_UT": report.acc_ut,
            "acc_ST": report.acc_st,
            "H": report.h,
            "AUSUC": report.ausuc,
        }
        with open(out / "suc.csv", newline="") as fh:
            points = [(float(a), float(b)) for a, b in list(csv.reader(fh))[1:]]
        assert points == [(float(a), float(b)) for a, b in report.suc_points]
        assert float((out / "ausuc.txt").read_text()) == report.ausuc


class TestAblate:
    def test_report_and_artifacts(self, dataset_dir, tmp_path):
        out = tmp_path / "ablate"
        rc = main([
            "ablate", "--dataset", str(dataset_dir), "--out", str(out),
            "--epochs", "1", "--variants", "cls-only", "sae", "split-branch",
            "--sheet-items", "4", *FAST_TRAIN_FLAGS,
        ])
        assert rc == 0
        with open(out / "ablation_report.csv", newline="") as fh:
            rows = list(csv.reader(fh))
        assert rows[0] == ["variant", "acc_UU", "acc_UT", "acc_ST", "H", "recon_mse"]
        assert [r[0] for r in rows[1:]] == ["cls_only", "sae", "split_branch"]
        assert rows[1][5] == ""  # no decoder route, no reconstruction error
        assert float(rows[2][5]) >= 0.0

        assert not (out / "cls_only" / "contact_sheet.ppm").exists()
        assert (out / "sae" / "contact_sheet.ppm").exists()
        assert (out / "split_branch" / "contact_sheet.ppm").exists()
        sheet = data.read_ppm(out / "sae" / "contact_sheet.ppm")
        assert sheet.shape == (16, 32, 3)  # 2 x 4 tiles of 8 x 8

        with open(out / "splitbranch_merge_weights.csv", newline="") as fh:
            weights = list(csv.reader(fh))
        assert weights[0] == ["branch", "frobenius_norm"]
        assert [r[0] for r in weights[1:]] == ["cls_branch", "rec_branch"]
        for _, norm in weights[1:]:
            assert float(norm) > 0.0

        for variant in ("cls_only", "sae", "split_branch"):
            assert (out / variant / "checkpoint" / "manifest.json").exists()


class TestAnalyzeAttributes:
    def test_dataset_mode_matches_library(self, dataset_dir, tmp_path):
        out = tmp_path / "an"
        rc = main(["analyze-attributes", "--dataset", str(dataset_dir),
                   "--out", str(out)])
        assert rc == 0

        dataset, splits = data.load_dataset(dataset_dir)
        train_rows = np.stack(
            [dataset.attribute_row(dataset.label(i)) for i in splits.train_ids]
        )
        test_ids = splits.seen_test_ids + splits.unseen_test_ids
        test_rows = np.stack(
            [dataset.attribute_row(dataset.label(i)) for i in test_ids]
        )
        oracle = spaces.variance_cosine(
            spaces.attribute_variance(train_rows), spaces.attribute_variance(test_rows)
        )
        got = float((out / "variance_cosine.txt").read_text())
        assert got == oracle
        assert 0.0 < got < 1.0  # test side includes held-out high-variance rows

        with open(out / "variance_profile.csv", newline="") as fh:
            rows = list(csv.reader(fh))
        assert rows[0] == ["attribute", "var_train", "var_test"]
        assert len(rows) - 1 == dataset.n_attributes
        assert rows[1][0] == "a_1"

    def test_class_mode_matches_library(self, dataset_dir, tmp_path):
        dataset, splits = data.load_dataset(dataset_dir)
        roles_path = tmp_path / "roles.csv"
        data.save_class_roles(roles_path, splits)
        out = tmp_path / "an"
        rc = main(["analyze-attributes", "--classes", str(dataset_dir / "classes.csv"),
                   "--class-roles", str(roles_path), "--out", str(out)])
        assert rc == 0

        matrix, roles = data.load_external_attributes(
            dataset_dir / "classes.csv", roles_path
        )
        oracle = spaces.variance_cosine(
            spaces.attribute_variance(matrix[roles.seen_classes]),
            spaces.attribute_variance(matrix[roles.unseen_classes]),
        )
        assert float((out / "variance_cosine.txt").read_text()) == oracle

    def test_image_table_mode(self, tmp_path):
        attr_path = tmp_path / "image_attributes.csv"
        with open(attr_path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["image_id", "a_1", "a_2"])
            values = [
                (0, 0.1, 0.9), (1, 0.3, 0.8), (2, 0.2, 0.7),
                (3, 0.9, 0.1), (4, 0.8, 0.2), (5, 0.1, 0.4),
            ]
            for row in values:
                writer.writerow(row)
        splits_path = tmp_path / "image_splits.csv"
        with open(splits_path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["image_id", "split", "class_id"])
            for i, split in ((0, "train"), (1, "train"), (2, "train"),
                             (3, "seen_test"), (4, "unseen_test"), (5, "unseen_test")):
                writer.writerow([i, split, 0])
        out = tmp_path / "an"
        rc = main(["analyze-attributes", "--image-attributes", str(attr_path),
                   "--image-splits", str(splits_path), "--out", str(out)])
        assert rc == 0

        train = np.array([[0.1, 0.9], [0.3, 0.8], [0.2, 0.7]])
        test = np.array([[0.9, 0.1], [0.8, 0.2], [0.1, 0.4]])
        oracle = spaces.variance_cosine(
            spaces.attribute_variance(train), spaces.attribute_variance(test)
        )
        assert float((out / "variance_cosine.txt").read_text()) == pytest.approx(
            oracle, rel=1e-12
        )

    def test_image_table_requires_splits(self, tmp_path, capsys):
        rc = main(["analyze-attributes", "--image-attributes", str(tmp_path / "a.csv"),
                   "--out", str(tmp_path / "out")])
        assert rc == 1
        assert "--image-splits" in capsys.readouterr().err


class TestSweepAlpha:
    def test_outputs_per_alpha(self, dataset_dir, tmp_path):
        out = tmp_path / "sweep"
        rc = main([
            "sweep-alpha", "--dataset", str(dataset_dir), "--out", str(out),
            "--epochs", "1", "--alphas", "0,0.5", "--sheet-items", "4",
            *FAST_TRAIN_FLAGS,
        ])
        assert rc == 0
        with open(out / "recon_mse_vs_alpha.csv", newline="") as fh:
            rows = list(csv.reader(fh))
        assert rows[0] == ["alpha", "recon_mse"]
        assert [float(r[0]) for r in rows[1:]] == [0.0, 0.5]
        for r in rows[1:]:
            assert float(r[1]) >= 0.0
        for name in ("alpha_0", "alpha_0.5"):
            assert (out / name / "contact_sheet.ppm").exists()
            assert (out / name / "checkpoint" / "manifest.json").exists()

    def test_empty_alphas_rejected(self, dataset_dir, tmp_path, capsys):
        rc = main(["sweep-alpha", "--dataset", str(dataset_dir),
                   "--out", str(tmp_path / "out"), "--alphas", ",", "--epochs", "1"])
        assert rc == 1
        assert "--alphas" in capsys.readouterr().err
