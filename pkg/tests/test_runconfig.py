"""Config file parsing, serialization, and the typed views."""

import pytest

from flowsync.errors import ConfigError, DataIOError
from flowsync.runconfig import (
    DEFAULTS,
    RunConfig,
    load_config,
    parse_config,
    serialize_config,
    write_resolved_config,
)


class TestDefaults:
    def test_every_key_has_a_section(self):
        assert all("." in key for key in DEFAULTS)

    def test_default_views_construct(self):
        cfg = RunConfig()
        assert cfg.facegen_cfg().frame_h == 32
        assert cfg.train_cfg().n_steps == 2000
        assert cfg.train_cfg().batch_size == 32
        assert cfg.sampler_cfg().tau_start == 0.92
        assert cfg.sampler_cfg().n_steps == 50
        assert cfg.guidance_cfg().mode == "dscfg"
        assert cfg.guidance_cfg().spatial is not None

    def test_hidden_sizes_parsing(self):
        assert RunConfig().hidden_sizes() == (1536,)
        cfg = RunConfig().with_overrides({"model.hidden": "64,32"})
        assert cfg.hidden_sizes() == (64, 32)
        with pytest.raises(ConfigError):
            RunConfig().with_overrides({"model.hidden": "64,banana"}).hidden_sizes()
        with pytest.raises(ConfigError):
            RunConfig().with_overrides({"model.hidden": "0"}).hidden_sizes()


class TestParse:
    def test_roundtrip_is_exact(self):
        cfg = RunConfig().with_overrides(
            {
                "train.lr": "0.0012345678901234567",
                "guidance.omega_peak": "2.5",
                "train.single_pool": "true",
                "model.hidden": "64,32",
                "data.fps": "30.0",
            }
        )
        text = serialize_config(cfg)
        assert parse_config(text) == cfg
        assert serialize_config(parse_config(text)) == text

    def test_comments_and_blanks_ignored(self):
        cfg = parse_config("# a comment\n\ntrain.steps = 7\n  # indented comment\n")
        assert cfg["train.steps"] == 7

    def test_unknown_key_named(self):
        with pytest.raises(ConfigError, match="train.velocity"):
            parse_config("train.velocity = 3\n")

    def test_duplicate_key_named(self):
        with pytest.raises(ConfigError, match="duplicate.*train.steps"):
            parse_config("train.steps = 1\ntrain.steps = 2\n")

    def test_missing_equals(self):
        with pytest.raises(ConfigError, match="line 1"):
            parse_config("train.steps 5\n")

    def test_bad_int(self):
        with pytest.raises(ConfigError, match="train.steps"):
            parse_config("train.steps = 5.5\n")

    def test_bad_bool(self):
        with pytest.raises(ConfigError, match="train.single_pool"):
            parse_config("train.single_pool = yes\n")

    def test_bool_coercion(self):
        assert parse_config("train.single_pool = true\n")["train.single_pool"] is True
        assert parse_config("train.single_pool = false\n")["train.single_pool"] is False

    def test_unknown_key_on_getitem(self):
        with pytest.raises(ConfigError, match="nope"):
            RunConfig()["nope.key"]

    def test_unknown_key_on_override(self):
        with pytest.raises(ConfigError, match="sample.warp"):
            RunConfig().with_overrides({"sample.warp": "1"})


class TestTypedViews:
    def test_facegen_carries_geometry(self):
        cfg = RunConfig().with_overrides({"data.mouth_ry": "3", "data.pose_max": "2"})
        fg = cfg.facegen_cfg()
        assert fg.mouth_ry == 3
        assert fg.pose_max == 2

    def test_train_cfg_carries_every_knob(self):
        cfg = RunConfig().with_overrides(
            {
                "train.threshold": "0.8",
                "train.lr": "0.01",
                "train.batch": "4",
                "train.steps": "12",
                "train.dropout": "0.25",
                "train.seed": "5",
                "data.clip_len": "3",
                "train.single_pool": "true",
                "model.hidden": "8",
                "model.audio_dim": "2",
            }
        )
        tc = cfg.train_cfg()
        assert (tc.tau_threshold, tc.learning_rate, tc.batch_size) == (0.8, 0.01, 4)
        assert (tc.n_steps, tc.audio_dropout_p, tc.seed) == (12, 0.25, 5)
        assert (tc.clip_len, tc.single_pool, tc.hidden, tc.audio_dim) == (3, True, (8,), 2)

    def test_guidance_modes(self):
        cfg = RunConfig()
        off = cfg.guidance_cfg(mode="off")
        assert off.mode == "off" and off.spatial is None
        static = cfg.guidance_cfg(mode="static", static_scale=4.0)
        assert static.static_scale == 4.0
        ds = cfg.guidance_cfg()
        assert ds.spatial.as_matrix().shape == (32, 32)

    def test_spatial_profile_centered_on_configured_mouth(self):
        prof = RunConfig().spatial()
        gain = prof.as_matrix()
        assert gain[21, 16] == 1.0

    def test_sampler_cfg_accepts_guidance_override(self):
        cfg = RunConfig()
        sc = cfg.sampler_cfg(guidance=cfg.guidance_cfg(mode="off"))
        assert sc.guidance.mode == "off"


class TestFiles:
    def test_load_roundtrip(self, tmp_path):
        path = tmp_path / "run.txt"
        cfg = RunConfig().with_overrides({"train.steps": "3"})
        path.write_text(serialize_config(cfg))
        assert load_config(path) == cfg

    def test_load_missing_file(self, tmp_path):
        with pytest.raises(DataIOError):
            load_config(tmp_path / "absent.txt")

    def test_write_resolved_config(self, tmp_path):
        out = tmp_path / "run"
        path = write_resolved_config(RunConfig(), out)
        assert path.name == "run_config.txt"
        assert parse_config(path.read_text()) == RunConfig()

    def test_serialized_layout_groups_sections(self):
        text = serialize_config(RunConfig())
        blocks = text.strip().split("\n\n")
        sections = [block.splitlines()[0].split(".", 1)[0] for block in blocks]
        assert sections == sorted(set(sections))
        assert "train.lr = 0.001" in text
