import json

import pytest

from bcqlm.pipeline.cli import main


@pytest.fixture(scope="module")
def run_dir(tmp_path_factory):
    out = tmp_path_factory.mktemp("cli")
    data = out / "data"
    assert main(["synth-data", "--n", "12", "--out", str(data)]) == 0
    common = ["--data", str(data), "--out", str(out)]
    assert main(["pretrain", *common, "--epochs", "1", "--checkpoint-every", "0"]) == 0
    assert main(["finetune", *common, "--epochs", "2", "--checkpoint-every", "0"]) == 0
    assert main(["eval", *common]) == 0
    return out


class TestExitCodes:
    def test_unknown_flag(self, capsys):
        assert main(["flops", "--bogus"]) == 1

    def test_unknown_command(self):
        assert main(["teleport"]) == 1

    def test_missing_config_file(self, tmp_path):
        assert main(["flops", "--config", str(tmp_path / "absent.json"), "--out", str(tmp_path)]) == 2

    def test_bad_json(self, tmp_path):
        bad = tmp_path / "bad.json"
        bad.write_text("{not json")
        assert main(["flops", "--config", str(bad), "--out", str(tmp_path)]) == 1

    def test_invalid_value(self, tmp_path):
        bad = tmp_path / "bad.json"
        bad.write_text(json.dumps({"tau": -1.0}))
        assert main(["flops", "--config", str(bad), "--out", str(tmp_path)]) == 1

    def test_missing_checkpoint(self, tmp_path):
        assert main(["eval", "--n", "4", "--out", str(tmp_path)]) == 2


class TestCommands:
    def test_flops_preset_filename(self, tmp_path, capsys):
        assert main(["flops", "--config", "tiny.json", "--instrumented", "--out", str(tmp_path)]) == 0
        report = json.loads((tmp_path / "flops.json").read_text())
        assert report["match"] is True
        assert report["total"] == sum(report["modules"].values())
        assert json.loads(capsys.readouterr().out)["total"] == report["total"]

    def test_gradcheck_qgcam(self, tmp_path):
        assert main(["gradcheck", "--component", "qgcam", "--out", str(tmp_path)]) == 0
        body = json.loads((tmp_path / "gradcheck.json").read_text())
        assert body["passed"] and body["max_error"] < 1e-4

    def test_outputs(self, run_dir):
        s1 = json.loads((run_dir / "metrics_stage1.json").read_text())
        assert len(s1["records"]) == 2
        s2 = json.loads((run_dir / "metrics_stage2.json").read_text())
        assert s2["breezeclip_frozen"] is True
        ev = json.loads((run_dir / "metrics_eval.json").read_text())
        assert ev["efficiency"]["flops_per_sample"] > 0
        assert 0.0 <= ev["vqa_accuracy"] <= 1.0
        assert (run_dir / "predictions.csv").read_text().startswith("id,question,answer,prediction")
        assert len((run_dir / "predictions.jsonl").read_text().splitlines()) == 12
        assert {p.name for p in run_dir.glob("*.bcqt")} == {"stage1_final.bcqt", "stage2_final.bcqt"}

    def test_pca_export(self, run_dir):
        assert main(["pca-export", "--data", str(run_dir / "data"), "--out", str(run_dir)]) == 0
        assert len((run_dir / "pca.csv").read_text().splitlines()) == 1 + 24

    def test_infer_one_line(self, run_dir, capsys):
        image = next((run_dir / "data" / "images").glob("*.png"))
        capsys.readouterr()
        assert main(["infer", "--image", str(image), "--question", "what color is the circle?",
                     "--out", str(run_dir)]) == 0
        assert len(capsys.readouterr().out.splitlines()) == 1

    def test_answer_uses_known_words(self, run_dir, capsys):
        # the tiny embedding table is wider than the 25-word vocabulary
        vocab = json.loads((run_dir / "vocab.json").read_text())
        words = set(vocab["tokens"])
        image = next((run_dir / "data" / "images").glob("*.png"))
        capsys.readouterr()
        assert main(["infer", "--image", str(image), "--question", "zyzzyva?", "--out", str(run_dir)]) == 0
        assert set(capsys.readouterr().out.split()) <= words


class TestDeterminism:
    def test_repeat_runs_byte_identical(self, tmp_path):
        blobs = []
        for k in range(2):
            out = tmp_path / f"r{k}"
            assert main(["pretrain", "--n", "8", "--epochs", "1", "--out", str(out), "--checkpoint-every", "0"]) == 0
            assert main(["finetune", "--n", "8", "--epochs", "1", "--out", str(out), "--checkpoint-every", "0"]) == 0
            assert main(["flops", "--out", str(out)]) == 0
            blobs.append({n: (out / n).read_bytes()
                          for n in ("metrics_stage1.json", "metrics_stage2.json", "flops.json")})
        assert blobs[0] == blobs[1]
