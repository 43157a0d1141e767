import numpy as np
import pytest
import yaml
from click.testing import CliRunner

from pointafford.cli import main
from pointafford.data import load_dataset, read_records


@pytest.fixture(scope="module")
def cli_workspace(tmp_path_factory):
    """gen-data + train once; downstream CLI commands reuse the artifacts."""
    root = tmp_path_factory.mktemp("cli")
    data_dir = root / "data"
    runner = CliRunner()
    result = runner.invoke(
        main,
        ["gen-data", "--out", str(data_dir), "--objects", "8", "--points", "96",
         "--seed", "3", "--partial-fraction", "0.25"],
    )
    assert result.exit_code == 0, result.output
    config = {
        "encoder": {"model_dim": 16, "n_groups": 4, "group_size": 16,
                    "out_dim": 16, "propagation_knn": 6, "n_heads": 2},
        "joint": True,
        "steps_joint": 10,
        "batch_size": 4,
        "seed": 1,
    }
    config_path = root / "config.yaml"
    config_path.write_text(yaml.safe_dump(config), encoding="utf-8")
    ckpt_path = root / "model.ckpt"
    result = runner.invoke(
        main,
        ["train", "--config", str(config_path), "--data", str(data_dir),
         "--split", "seen", "--out", str(ckpt_path)],
    )
    assert result.exit_code == 0, result.output
    return root, data_dir, config_path, ckpt_path


class TestCli:
    def test_gen_data_wrote_dataset(self, cli_workspace):
        _, data_dir, _, _ = cli_workspace
        manifest, records = load_dataset(data_dir)
        assert manifest.record_count == len(records)

    def test_augment_rule_adds_variants(self, cli_workspace):
        _, data_dir, _, _ = cli_workspace
        before = len(read_records(data_dir))
        result = CliRunner().invoke(main, ["augment", "--data", str(data_dir), "--rule", "--variants", "2"])
        assert result.exit_code == 0, result.output
        records = read_records(data_dir)
        assert len(records) > before
        assert any(r.source == "rule" for r in records)
        load_dataset(data_dir)  # still valid

    def test_eval_writes_report_and_figures(self, cli_workspace, tmp_path):
        _, data_dir, _, ckpt_path = cli_workspace
        out = tmp_path / "report"
        result = CliRunner().invoke(
            main,
            ["eval", "--checkpoint", str(ckpt_path), "--data", str(data_dir),
             "--split", "seen", "--out", str(out)],
        )
        assert result.exit_code == 0, result.output
        assert (out / "report.txt").exists()
        assert (out / "report.tsv").exists()
        assert (out / "metrics_by_affordance.png").exists()
        assert "MEAN/SUM" in result.output

    def test_eval_prompt_variant(self, cli_workspace, tmp_path):
        _, data_dir, _, ckpt_path = cli_workspace
        result = CliRunner().invoke(
            main,
            ["eval", "--checkpoint", str(ckpt_path), "--data", str(data_dir),
             "--prompt-variant", "hi", "--out", str(tmp_path / "r")],
        )
        assert result.exit_code == 0, result.output

    def test_infer_writes_ply_and_figure(self, cli_workspace, tmp_path):
        _, data_dir, _, ckpt_path = cli_workspace
        _, records = load_dataset(data_dir)
        cloud = data_dir / records[0].input
        out = tmp_path / "map.ply"
        fig = tmp_path / "map.png"
        result = CliRunner().invoke(
            main,
            ["infer", "--checkpoint", str(ckpt_path), "--cloud", str(cloud),
             "--instruct", records[0].instruct, "--out", str(out), "--figure", str(fig)],
        )
        assert result.exit_code == 0, result.output
        assert out.exists() and fig.exists()
        assert "predicted label:" in result.output

    def test_export_vis(self, cli_workspace, tmp_path):
        _, data_dir, _, _ = cli_workspace
        _, records = load_dataset(data_dir)
        out = tmp_path / "gt.ply"
        result = CliRunner().invoke(
            main,
            ["export-vis", "--cloud", str(data_dir / records[0].input),
             "--scores", str(data_dir / records[0].affordance_path), "--out", str(out)],
        )
        assert result.exit_code == 0, result.output
        from pointafford.visualize import read_ply

        points, colors = read_ply(out)
        assert points.shape[0] == 96

    def test_train_flag_overrides(self, cli_workspace, tmp_path):
        _, data_dir, config_path, _ = cli_workspace
        ckpt = tmp_path / "m2.ckpt"
        result = CliRunner().invoke(
            main,
            ["train", "--config", str(config_path), "--data", str(data_dir),
             "--out", str(ckpt), "--steps-joint", "2", "--seed", "9", "--encoder-kind", "baseline"],
        )
        assert result.exit_code == 0, result.output
        from pointafford.checkpoint import load_checkpoint

        loaded = load_checkpoint(ckpt)
        assert loaded.config["seed"] == 9
        assert loaded.config["steps_joint"] == 2
        assert loaded.config["encoder_kind"] == "baseline"

    def test_unseen_split_training(self, cli_workspace, tmp_path):
        _, data_dir, config_path, _ = cli_workspace
        result = CliRunner().invoke(
            main,
            ["train", "--config", str(config_path), "--data", str(data_dir),
             "--split", "unseen", "--steps-joint", "2", "--out", str(tmp_path / "m3.ckpt")],
        )
        assert result.exit_code == 0, result.output
