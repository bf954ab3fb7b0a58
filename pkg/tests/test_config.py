import pytest
import yaml

from omnifuse.config import ConfigError, ExperimentConfig, dump_config, from_dict, load_config


def test_defaults_validate():
    cfg = load_config()
    assert cfg.fusion.kind == "ae" and len(cfg.transfer.tasks) == 10
    assert cfg.digest() == ExperimentConfig().validate().digest()
    assert len(cfg.run_id) == 12


def test_yaml_file_merges_over_defaults(tmp_path):
    p = tmp_path / "c.yaml"
    p.write_text("seed: 4\nfusion:\n  kind: pca\n  latent: 16\n")
    cfg = load_config(p)
    assert (cfg.seed, cfg.fusion.kind, cfg.fusion.latent, cfg.fusion.epochs) == (4, "pca", 16, 60)


@pytest.mark.parametrize("text", ["bogus: 1\n", "fusion:\n  kidn: ae\n", "world:\n  d_y: 3\n"])
def test_unknown_keys_rejected(tmp_path, text):
    p = tmp_path / "c.yaml"
    p.write_text(text)
    with pytest.raises(ConfigError):
        load_config(p)


def test_unknown_key_in_list_item():
    d = ExperimentConfig().to_dict()
    d["transfer"]["tasks"][0]["colour"] = "red"
    with pytest.raises(ConfigError):
        from_dict(d)


def test_top_level_must_be_mapping(tmp_path):
    p = tmp_path / "c.yaml"
    p.write_text("- 1\n- 2\n")
    with pytest.raises(ConfigError):
        load_config(p)


def test_set_overrides_parse_yaml_values():
    cfg = load_config(overrides=["fusion.kind=vae", "transfer.epochs=5", "distill.student_hidden=[8, 8]",
                                 "experts.0.d_m=3", "transfer.tasks.1.n_train=40"])
    assert cfg.fusion.kind == "vae" and cfg.transfer.epochs == 5
    assert cfg.distill.student_hidden == [8, 8]
    assert cfg.experts[0].d_m == 3 and cfg.transfer.tasks[1].n_train == 40


@pytest.mark.parametrize("bad", ["fusion.kind=xyz", "nokey", "fusion.nope=1", "transfer.modes=[ZZ]",
                                 "sweep.dims=[64, 32]", "distill.student_mode=conv", "transfer.lr=0",
                                 "pool.domain_id=9"])
def test_bad_overrides(bad):
    with pytest.raises(ConfigError):
        load_config(overrides=[bad])


def test_later_override_wins():
    assert load_config(overrides=["seed=1", "seed=2"]).seed == 2


def test_digest_tracks_results_not_location():
    a = load_config()
    assert load_config(overrides=["output_dir=/tmp/elsewhere"]).digest() == a.digest()
    assert load_config(overrides=["seed=1"]).digest() != a.digest()
    assert load_config(overrides=["fusion.epochs=61"]).digest() != a.digest()


def test_dump_roundtrip():
    cfg = load_config(overrides=["fusion.latent=8", "world.image_mode=true", "world.d_x=256"])
    again = from_dict(yaml.safe_load(dump_config(cfg)))
    assert again.digest() == cfg.digest()
    assert again.experts[0].hidden == cfg.experts[0].hidden
