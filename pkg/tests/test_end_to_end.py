"""
Desk-scale experiment: default corpus, default two-stage schedule, layout-consistency report
Run with: pytest -m slow tests/test_end_to_end.py
"""
import json

import pytest

from terragen.cli import ABLATION_PRESETS, main
from terragen.config import config_hash
from terragen.diffusion import SampleConfig, TrainConfig, TrainingExample, image_to_tensor, train
from terragen.evaluation import EvalConfig, layout_consistency_report
from terragen.synthdata import DataConfig, read_dataset, write_dataset
from conftest import tiny_model_config

MIOU_MARGIN = 0.15
FID_RATIO = 5.0

pytestmark = pytest.mark.slow


@pytest.fixture(scope="module")
def trained(tmp_path_factory):
    root = tmp_path_factory.mktemp("e2e")
    write_dataset(DataConfig(seed=0), root / "data")
    examples = [TrainingExample(image_to_tensor(s.image), s.layout) for s in read_dataset(root / "data", split="train")]
    checkpoint = train(TrainConfig(seed=0), examples, root / "train")
    return root, checkpoint


def test_layout_following_beats_shuffled_layouts(trained):
    root, checkpoint = trained
    report = layout_consistency_report(checkpoint, root / "data", SampleConfig(seed=0), EvalConfig())
    assert report.miou_mean - report.miou_shuffled >= MIOU_MARGIN
    assert report.fid_noise_baseline >= FID_RATIO * report.fid
    assert report.miou_real_ceiling >= 0.99


def test_every_ablation_preset_trains(tmp_path):
    config = tmp_path / "tiny.json"
    config.write_text(json.dumps({
        "data": {"train": 8, "val": 2, "test": 4, "image_size": 16},
        "train": {
            "model": tiny_model_config().model_dump(mode="json"),
            "stage1": {"steps": 2, "lr_peak": 1e-3, "warmup_steps": 0},
            "stage2": {"steps": 2, "lr_peak": 5e-4, "warmup_steps": 0},
            "micro_batch": 2, "accumulation": 1,
        },
        "sample": {"ddim_steps": 2, "batch_size": 4},
    }))
    data = tmp_path / "data_run"
    assert main(["gen-data", "--out", str(data), "--config", str(config)]) == 0

    hashes, reports = set(), {}
    for name in ABLATION_PRESETS:
        out = tmp_path / name
        common = ["--out", str(out), "--config", str(config), "--ablation", name, "--data", str(data / "data")]
        assert main(["train", *common]) == 0, name
        assert main(["eval", *common]) == 0, name
        run = json.loads((out / "run.json").read_text())
        hashes.add(config_hash(TrainConfig.model_validate(run["train"])))
        report = json.loads((out / "eval" / "report.json").read_text())
        reports[name] = (report["fid"], report["miou_mean"], report["ap50"], report["caption_consistency"])
    assert len(hashes) == len(ABLATION_PRESETS)
    assert len(set(reports.values())) == len(ABLATION_PRESETS), reports
