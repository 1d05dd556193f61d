"""Config parsing, validation, round-trip identity, and presets."""

import numpy as np
import pytest

from driftlab.config import (
    ConfigError,
    RunConfig,
    apply_axis_value,
    build_domain,
    format_corruption,
    parse_config,
    parse_corruption,
    serialize_config,
)
from driftlab.presets import PRESET_NAMES, preset_config, preset_text

MINIMAL = """
[model]
input_dim = 4
hidden = 8
classes = 3

[episode]
mode = ctta
batch_size = 16
domains = fog

[domain:fog]
corrupt = noise(0.5)
batches = 10
"""


class TestParsing:
    def test_minimal_config(self):
        cfg = parse_config(MINIMAL)
        assert cfg.model.hidden == (8,)
        assert cfg.episode.domains[0].name == "fog"
        assert cfg.episode.domains[0].batches == 10

    def test_unknown_section_rejected(self):
        with pytest.raises(ConfigError, match="unknown section"):
            parse_config(MINIMAL + "\n[extras]\nfoo = 1\n")

    def test_unknown_key_rejected(self):
        with pytest.raises(ConfigError, match="unknown key"):
            parse_config(MINIMAL + "\n[engine]\nlearning = 3\n")

    def test_missing_domain_section_named(self):
        text = MINIMAL.replace("domains = fog", "domains = fog,smoke")
        with pytest.raises(ConfigError, match="smoke"):
            parse_config(text)

    def test_missing_source_path_for_file_kind(self):
        with pytest.raises(ConfigError, match="dataset_path"):
            parse_config(MINIMAL + "\n[source]\nkind = file\n")

    def test_bad_strategy_rejected(self):
        with pytest.raises(ConfigError, match="strategy"):
            parse_config(MINIMAL + "\n[selection]\nstrategy = clustering\n")

    def test_bad_alpha_rejected(self):
        with pytest.raises(ConfigError, match="alpha"):
            parse_config(MINIMAL + "\n[engine]\nalpha = 1.5\n")

    def test_priors_validated_against_classes(self):
        text = MINIMAL.replace("corrupt = noise(0.5)",
                               "corrupt = noise(0.5)\npriors = 0.5,0.5")
        with pytest.raises(ConfigError, match="priors"):
            parse_config(text)

    def test_infinite_threshold_accepted(self):
        cfg = parse_config(MINIMAL + "\n[engine]\nthreshold_factor = inf\n")
        assert np.isinf(cfg.engine.threshold_factor)


class TestCorruptionExpressions:
    def test_single_term(self):
        spec = parse_corruption("rotate(0.35)")
        assert spec.kind == "feature-rotation"
        assert spec.angle == 0.35

    def test_composition_order(self):
        spec = parse_corruption("rotate(0.3)+noise(0.2)")
        assert spec.kind == "compose"
        assert [p.kind for p in spec.parts] == ["feature-rotation",
                                                "additive-gaussian"]

    def test_vector_argument(self):
        spec = parse_corruption("shift(1.0|2.0|-0.5)")
        assert np.array_equal(spec.delta, [1.0, 2.0, -0.5])

    def test_format_round_trip(self):
        for expr in ("rotate(0.35)", "noise(0.5)", "shift(1.0|2.0)",
                     "scale(1.6)", "rotate(0.3)+noise(0.2)+scale(0.5)"):
            spec = parse_corruption(expr)
            assert format_corruption(spec) == format_corruption(
                parse_corruption(format_corruption(spec)))

    def test_unknown_term_rejected(self):
        with pytest.raises(ConfigError, match="unknown corruption"):
            parse_corruption("blur(0.5)")

    def test_build_domain(self):
        from driftlab.config import ConfigDomain
        dom = build_domain(ConfigDomain(name="d", corrupt="noise(0.1)", batches=3,
                                        priors=(0.5, 0.25, 0.25)))
        assert dom.batch_count == 3
        assert np.allclose(dom.priors, [0.5, 0.25, 0.25])


class TestRoundTrip:
    def test_parse_serialize_parse_identity(self):
        cfg = parse_config(MINIMAL)
        text = serialize_config(cfg)
        again = parse_config(text)
        assert again == cfg
        assert serialize_config(again) == text

    def test_round_trip_with_all_sections(self):
        text = preset_text("budget-sweep")
        cfg = parse_config(text)
        assert cfg.ablate is not None
        again = parse_config(serialize_config(cfg))
        assert again == cfg


class TestPresets:
    @pytest.mark.parametrize("name", PRESET_NAMES)
    def test_all_presets_parse_and_validate(self, name):
        cfg = preset_config(name)
        assert isinstance(cfg, RunConfig)

    def test_unknown_preset_rejected(self):
        with pytest.raises(ConfigError):
            preset_text("imagenet")

    def test_sweep_presets_carry_grids(self):
        assert preset_config("hyper-sweep").ablate.axis == "sigma"
        assert preset_config("strategy-sweep").ablate.axis == "strategy"
        assert preset_config("budget-sweep").ablate.axis == "budget"


class TestAxisValues:
    def test_sigma(self):
        cfg = preset_config("ctta-suite")
        assert apply_axis_value(cfg, "sigma", "0.1").selection.sigma == 0.1

    def test_budget(self):
        cfg = preset_config("ctta-suite")
        out = apply_axis_value(cfg, "budget", "1:5")
        assert out.budget.labels_per_batch == 1
        assert out.budget.batches_per_label == 5

    def test_toggles(self):
        cfg = preset_config("ctta-suite")
        out = apply_axis_value(cfg, "toggles", "pd+gnd")
        assert out.engine.pd and out.engine.gnd
        assert not out.engine.cb and not out.engine.ema
        none = apply_axis_value(cfg, "toggles", "none")
        assert not any((none.engine.pd, none.engine.cb, none.engine.gnd,
                        none.engine.ema))

    def test_bad_values_rejected(self):
        cfg = preset_config("ctta-suite")
        with pytest.raises(ConfigError):
            apply_axis_value(cfg, "budget", "1per5")
        with pytest.raises(ConfigError):
            apply_axis_value(cfg, "toggles", "pd+magic")
        with pytest.raises(ConfigError):
            apply_axis_value(cfg, "strategy", "clustering")
