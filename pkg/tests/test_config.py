import pytest

from fundus_cl import config
from fundus_cl.config import ConfigError, RunConfig


class TestConfig:
    def test_defaults_valid(self):
        cfg = config.load(None)
        assert cfg.policy().output_size == 224 and cfg.encoder_config().embedding_dim == 128

    def test_canonical_round_trip(self):
        cfg = config.parse('seed = 4\n[pretrain]\nbatch_size = 16\n[finetune]\nlr_grid = [0.001]\n')
        again = config.parse(cfg.canonical())
        assert again == cfg and again.digest() == cfg.digest()

    def test_int_coerced_to_float(self):
        assert config.parse("[finetune]\nlr_grid = [1]\n").finetune.lr_grid == [1.0]

    @pytest.mark.parametrize("text", [
        "bogus = 1\n",
        "[pretrain]\nbatchsize = 3\n",
        "[pretrain]\nbatch_size = 'big'\n",
        "[augment]\np_nst = 2.0\n",
        "[data]\nsplit_train = 0.9\n",
        "[sweep]\ninits = ['imagenet']\n",
        "seed = 'x'\n",
        "not toml at all [",
    ])
    def test_rejected(self, text):
        with pytest.raises(ConfigError):
            config.parse(text)

    def test_relative_paths_resolved(self, tmp_path):
        (tmp_path / "run.toml").write_text('[data]\nmanifest = "data/m.csv"\n')
        cfg = config.load(tmp_path / "run.toml")
        assert cfg.data.manifest == str(tmp_path / "data" / "m.csv")

    def test_single_grid_point(self):
        cfg = config.parse("[finetune]\nlr_grid = [0.01]\noptimizer_grid = ['sgd']\nbatch_grid = [8]\n")
        assert cfg.single_grid_point().optimizer == "sgd"
        assert RunConfig().single_grid_point() is None

    def test_seed_flows_into_views(self):
        cfg = config.parse("seed = 9\n")
        assert cfg.pretrain_config().seed == 9 and cfg.finetune_config().seed == 9
