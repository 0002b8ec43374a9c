from pathlib import Path

import pytest

from ddeq import config as C
from ddeq.errors import ConfigError

CONFIGS = Path(__file__).resolve().parents[1] / "configs"


class TestParse:
    def test_defaults_follow_training_protocol(self):
        cfg = C.defaults()
        assert cfg["model.latent_dim"] == 128 and cfg["model.bilinear_dim"] == 16
        assert cfg["model.cross_encoder_layers"] == 3
        assert cfg["flow.iterations"] == 200 and cfg["flow.step_size"] == 5.0
        assert cfg["train.batch_size"] == 64 and cfg["train.lr"] == 1e-3
        assert (cfg["train.lr_drop_first"], cfg["train.lr_drop_second"]) == (0.4, 0.8)

    def test_comments_and_blank_lines(self):
        cfg = C.parse_text("# a comment\n\ntask = complete\n  flow.iterations = 7  \n")
        assert cfg["task"] == "complete" and cfg["flow.iterations"] == 7

    @pytest.mark.parametrize("text,needle", [
        ("model.depth = 3", "unknown key"),
        ("seed = 1\nseed = 2", "duplicate key"),
        ("seed = one", "bad value"),
        ("flow.rescale_by_n = maybe", "bad value"),
        ("just words", "expected 'key = value'"),
        ("task = segment", "task"),
        ("model.latent_dim = 9\nmodel.per_head_dim = 3\ntask = complete", "even"),
    ])
    def test_errors(self, text, needle):
        with pytest.raises(ConfigError, match=needle):
            C.parse_text(text)

    def test_error_names_line(self):
        with pytest.raises(ConfigError, match=r"<config>:2:"):
            C.parse_text("seed = 1\nbogus = 2")

    def test_round_trip(self):
        cfg = C.parse_text("task = complete\nmodel.latent_dim = 16\ntrain.lr = 0.0005\n")
        assert C.parse_text(C.dump(cfg)) == cfg

    def test_missing_file(self, tmp_path):
        with pytest.raises(ConfigError, match="config file not found"):
            C.load(tmp_path / "nope.cfg")


class TestBuild:
    def test_shipped_configs(self):
        model, tc = C.build(C.load(CONFIGS / "desk-classify.cfg"))
        assert model.latent_dim == 32 and model.num_classes == 3 and not model.coupling
        assert tc.flow.iterations == 50 and tc.epochs == 10
        model, tc = C.build(C.load(CONFIGS / "desk-complete.cfg"))
        assert model.coupling and model.num_classes == 0 and tc.task == "complete"

    def test_clip_zero_disables(self):
        _, tc = C.build(C.parse_text("train.clip_norm = 0"))
        assert tc.clip_norm is None
        _, tc = C.build(C.parse_text("train.clip_norm = 10"))
        assert tc.clip_norm == 10.0


class TestDatasets:
    def test_synthetic_sizes(self):
        cfg = C.parse_text("data.classes = 2\ndata.train_per_class = 3\ndata.test_per_class = 2\n"
                           "data.particles = 12\n")
        train, test = C.datasets(cfg)
        assert len(train) == 6 and len(test) == 4
        assert C.num_classes(train) == 2

    def test_synthetic_completion(self):
        cfg = C.parse_text("task = complete\ndata.classes = 1\ndata.train_per_class = 2\n"
                           "data.test_per_class = 1\ndata.particles = 16\ndata.shape_family = ring\n")
        train, _ = C.datasets(cfg)
        assert all(s.target is not None and s.removed is not None for s in train)

    def test_manifest(self, tmp_path):
        from ddeq import measure

        samples = measure.synth_dataset(dict(classes=2, samples_per_class=2, particles=6, seed=0))
        measure.save_points_csv(samples, tmp_path / "train.csv")
        (tmp_path / "data.json").write_text('{"task": "classify", "splits": {"train": "train.csv"}}')
        cfg = C.parse_text(f"data.source = {tmp_path / 'data.json'}")
        train, test = C.datasets(cfg)
        assert len(train) == 4 and test == []

    def test_manifest_task_mismatch(self, tmp_path):
        (tmp_path / "t.csv").write_text("sample_id,point_id,x0,x1\n")
        (tmp_path / "data.json").write_text('{"task": "complete", "splits": {"train": "t.csv"}}')
        with pytest.raises(ConfigError, match="does not match"):
            C.datasets(C.parse_text(f"data.source = {tmp_path / 'data.json'}"))

    def test_manifest_missing(self, tmp_path):
        with pytest.raises(ConfigError, match="not found"):
            C.load_manifest(tmp_path / "none.json")
