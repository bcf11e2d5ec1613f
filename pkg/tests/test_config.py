import pytest

from cosam.config import PRESETS, build_config, with_overrides
from cosam.errors import ConfigError


class TestPresets:
    def test_prostate_values(self):
        cfg = build_config("prostate")
        assert cfg.alpha == 0.2
        assert cfg.k_points == 64
        assert cfg.t_iters == 4
        assert cfg.lambda_r == 1.0
        assert cfg.lambda_g == 0.1
        assert cfg.epochs == 100
        assert cfg.batch_size == 16
        assert cfg.base_lr == 1e-4
        assert cfg.poly_power == 0.9
        assert cfg.optimizer == "adam"
        assert cfg.preset == "prostate"

    def test_od_values(self):
        cfg = build_config("od")
        assert (cfg.alpha, cfg.k_points, cfg.t_iters) == (0.1, 8, 4)
        assert (cfg.lambda_r, cfg.lambda_g) == (1.0, 0.1)
        assert (cfg.epochs, cfg.batch_size, cfg.optimizer) == (10, 8, "adamw")

    def test_oc_values(self):
        cfg = build_config("oc")
        assert (cfg.alpha, cfg.k_points, cfg.t_iters) == (0.2, 16, 1)
        assert (cfg.lambda_r, cfg.lambda_g) == (1.0, 0.25)
        assert (cfg.epochs, cfg.batch_size, cfg.optimizer) == (20, 8, "adamw")

    def test_all_presets_build(self):
        for name in PRESETS:
            assert build_config(name).preset == name

    def test_unknown_preset(self):
        with pytest.raises(ConfigError, match="unknown preset"):
            build_config("sonnet")


class TestLayering:
    def test_default_no_preset(self):
        cfg = build_config()
        assert cfg.preset == ""
        assert cfg.dims == 128

    def test_override_beats_preset(self):
        cfg = build_config("prostate", overrides={"k_points": 8})
        assert cfg.k_points == 8
        assert cfg.alpha == 0.2  # preset value untouched

    def test_file_between_preset_and_override(self, tmp_path):
        f = tmp_path / "c.yaml"
        f.write_text("k_points: 32\nalpha: 0.3\n")
        cfg = build_config("prostate", f, {"alpha": 0.15})
        assert cfg.k_points == 32  # from file
        assert cfg.alpha == 0.15  # override wins

    def test_missing_file(self):
        with pytest.raises(ConfigError, match="not found"):
            build_config(config_file="/nonexistent.yaml")

    def test_non_mapping_file(self, tmp_path):
        f = tmp_path / "c.yaml"
        f.write_text("- just\n- a\n- list\n")
        with pytest.raises(ConfigError, match="mapping"):
            build_config(config_file=f)


class TestDottedKeys:
    def test_nested_override(self):
        cfg = build_config(overrides={"data.per_domain": "12", "arch.embed_dim": 32})
        assert cfg.data.per_domain == 12
        assert cfg.arch.embed_dim == 32

    def test_nested_file_mapping(self, tmp_path):
        f = tmp_path / "c.yaml"
        f.write_text("data:\n  n_domains: 3\n  master_seed: 9\n")
        cfg = build_config(config_file=f)
        assert cfg.data.n_domains == 3
        assert cfg.data.master_seed == 9

    def test_channel_tuple_coercion(self):
        cfg = build_config(overrides={"arch.enc_channels": "8,16,32"})
        assert cfg.arch.enc_channels == (8, 16, 32)

    def test_unknown_key(self):
        with pytest.raises(ConfigError, match="unknown config key"):
            build_config(overrides={"learning_rate": 1.0})

    def test_unknown_section(self):
        with pytest.raises(ConfigError, match="section"):
            build_config(overrides={"model.depth": 3})

    def test_unknown_nested_key(self):
        with pytest.raises(ConfigError, match="unknown config key"):
            build_config(overrides={"data.shards": 4})

    def test_string_coercion(self):
        cfg = build_config(overrides={"alpha": "0.3", "epochs": "5",
                                      "use_box": "false"})
        assert cfg.alpha == 0.3
        assert cfg.epochs == 5
        assert cfg.use_box is False


class TestValidation:
    @pytest.mark.parametrize("bad", [
        {"alpha": 1.5},
        {"alpha": -0.1},
        {"k_points": 0},
        {"t_iters": 0},
        {"lambda_r": -1.0},
        {"threshold": 0.0},
        {"threshold": 1.0},
        {"optimizer": "sgd"},
        {"mode": "finetune"},
        {"point_selection": "grid"},
        {"omega_counts_from": "both"},
        {"error_target_from": "noisy"},
    ])
    def test_rejected(self, bad):
        with pytest.raises(ConfigError):
            build_config(overrides=bad)


class TestHash:
    def test_stable(self):
        assert build_config("toy").hash() == build_config("toy").hash()

    def test_sensitive_to_values(self):
        a = build_config("toy")
        b = with_overrides(a, alpha=0.31)
        assert a.hash() != b.hash()

    def test_sensitive_to_nested(self):
        a = build_config("toy")
        b = build_config("toy", overrides={"data.master_seed": 999})
        assert a.hash() != b.hash()
