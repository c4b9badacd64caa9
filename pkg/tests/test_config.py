import pytest
import yaml

from langevin_rom.config import KINDS, ConfigError, RunConfig, load_config, preset_names
from langevin_rom.mobility import MobilityTrainConfig
from langevin_rom.sde import Affine2dParams


def test_shipped_presets():
    assert set(preset_names()) >= {"paper-affine2d", "desk-affine2d", "cir-analytic", "cir-mc", "ou-oracle"}
    for name in preset_names():
        cfg = load_config(name)
        assert cfg.kind in KINDS and cfg.name == name


def test_paper_preset_values():
    cfg = load_config("paper-affine2d")
    d = cfg.data
    assert (d.n_traj, d.T, d.dt, d.save_interval, d.burn_in) == (36, 3000.0, 1e-3, 1e-2, 0.10)
    assert cfg.score.sigma_min == cfg.score.sigma_max == 0.05
    assert cfg.score.stationary.widths == (128, 64) and cfg.score.joint.widths == (256, 128)
    m = cfg.mobility
    assert m.widths == (128, 128) and m.epochs == 250 and m.lr == 3e-4
    assert m.pairs_per_lag == 32768 and m.lags_per_batch == 4 and m.n_anchors == 32768
    assert m.weight_decay == 1e-6 and m.epsilon == 1e-4
    assert (cfg.lags.step, cfg.lags.n) == (0.05, 20)
    assert cfg.system_params() == Affine2dParams()


def test_desk_preset_differs_only_in_scale():
    desk, paper = load_config("desk-affine2d"), load_config("paper-affine2d")
    assert (desk.data.n_traj, desk.data.T) == (8, 500.0)
    assert (desk.mobility.pairs_per_lag, desk.mobility.epochs) == (8192, 100)
    assert desk.system == paper.system and desk.lags == paper.lags
    assert desk.mobility.widths == paper.mobility.widths and desk.mobility.lr == paper.mobility.lr


def test_paper_defaults_match_dataclass_defaults():
    # the preset states each default once; dataclass defaults carry the same values
    assert load_config("paper-affine2d").mobility == MobilityTrainConfig(seed=2)


def test_unknown_keys_and_kinds(tmp_path):
    with pytest.raises(ConfigError, match="unknown keys"):
        RunConfig.from_dict({"kind": "affine2d", "mobilty": {}})
    with pytest.raises(ConfigError, match="unknown keys"):
        RunConfig.from_dict({"kind": "affine2d", "mobility": {"lambda": 1.0}})
    with pytest.raises(ConfigError, match="kind"):
        RunConfig.from_dict({"kind": "lorenz"})
    with pytest.raises(ConfigError):
        RunConfig.from_dict({"data": {"dt": 1e-3, "save_interval": 0.0155}})
    with pytest.raises(ConfigError):
        load_config("no-such-preset")
    bad = tmp_path / "bad.yaml"
    bad.write_text("kind: [unclosed\n")
    with pytest.raises(ConfigError):
        load_config(bad)


def test_bad_system_parameters():
    cfg = RunConfig.from_dict({"kind": "cir-mc", "system": {"kappa": 1.0, "theta": 0.1, "gamma": 1.0}})
    with pytest.raises(ConfigError):
        cfg.system_params()


def test_yaml_round_trip_and_digest(tmp_path):
    cfg = load_config("desk-affine2d")
    path = tmp_path / "c.yaml"
    cfg.to_yaml(path)
    back = load_config(path)
    assert back == cfg and back.digest() == cfg.digest()
    moved = RunConfig.from_dict({**yaml.safe_load(path.read_text()), "out": "elsewhere"})
    assert moved.digest() == cfg.digest()
    assert cfg.with_seed(5).digest() != cfg.digest()


def test_with_seed_reseeds_every_stage():
    cfg = load_config("desk-affine2d").with_seed(10)
    seeds = [cfg.data.seed, cfg.score.stationary.seed, cfg.score.joint.seed, cfg.mobility.seed, cfg.rom_run().seed]
    assert seeds[0] == 10 and len(set(seeds)) >= 4
    assert load_config("desk-affine2d").data.seed == 0
