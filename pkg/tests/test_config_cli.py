import hashlib
from pathlib import Path

import pytest

from crossreid.cli import main
from crossreid.config import ConfigError, dump_config, load_config, parse_config, preset
from crossreid.losses import PRESETS

TOY = """
[experiment]
seed = 3
out = {out}

[dataset]
n_source_ids = 10
n_target_ids = 10
m_source_cams = 3
m_target_cams = 4
images_per_id_per_cam = 2
n_test_ids = 4
image_h = 32
image_w = 16

[model]
desk_channels = 4,4,8,8

[recipe]
class_src = 8
class_st = 8
cofwd_t = 4

[schedule]
total_epochs = 2
steps_per_epoch = 2
"""


def _sha(path):
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


@pytest.fixture
def toy(tmp_path):
    cfg = tmp_path / "toy.ini"
    cfg.write_text(TOY.format(out=tmp_path / "run"))
    return cfg, tmp_path / "run"


def test_seed_is_mandatory():
    with pytest.raises(ConfigError, match="seed"):
        parse_config("[experiment]\nout = x\n")
    assert parse_config("[experiment]\nout = x\n", seed=4).seed == 4


@pytest.mark.parametrize("text,msg", [
    ("[experiment]\nseed = 1\n[bogus]\nx = 1\n", "unknown section"),
    ("[experiment]\nseed = 1\n[weights]\ndelta = 1\n", "unknown key"),
    ("[experiment]\nseed = 1\n[weights]\nalpha = -1\n", "invalid"),
    ("[experiment]\nseed = 1\n[schedule]\ntotal_epochs = many\n", "cannot parse"),
    ("[experiment]\nseed = 1\n[engine]\nkind = magic\n", "engine"),
    ("[experiment]\nseed = 1\npreset = nope\n", "preset"),
])
def test_config_validation(text, msg):
    with pytest.raises(ConfigError, match=msg):
        parse_config(text)


def test_resolved_config_round_trips():
    for name in ("desk", "duke2market", "market2duke"):
        cfg = preset(name, 7)
        if cfg.dataset.kind == "real":
            cfg.dataset.source_root, cfg.dataset.target_root = "a", "b"
        back = parse_config(dump_config(cfg))
        assert back == cfg and back.hash == cfg.hash


def test_presets_embed_reference_weights():
    assert preset("duke2market", 0).weights == PRESETS["duke2market"]
    assert preset("market2duke", 0).weights == PRESETS["market2duke"]
    assert preset("market2duke", 0).recipe.class_st == 128


def test_shipped_configs_parse():
    root = Path(__file__).resolve().parents[1] / "configs"
    for path in sorted(root.glob("*.ini")):
        assert load_config(path).seed == 0


def test_synth_counts_and_rerun_hash(toy):
    cfg, out = toy
    assert main(["synth", "--config", str(cfg)]) == 0
    world = out / "world"
    assert len(list(world.glob("*.png"))) == 140
    first = _sha(world / "manifest.tsv")
    assert main(["synth", "--config", str(cfg)]) == 0
    assert _sha(world / "manifest.tsv") == first


def test_missing_config_or_seed_is_validation_error(tmp_path):
    assert main(["synth", "--config", str(tmp_path / "absent.ini")]) == 1
    bad = tmp_path / "noseed.ini"
    bad.write_text("[experiment]\nout = x\n")
    assert main(["synth", "--config", str(bad)]) == 1
    assert main(["synth", "--config", str(bad), "--seed", "1", "--out", str(tmp_path / "o")]) == 0


def test_missing_predecessor_names_command(toy, capsys):
    cfg, _ = toy
    assert main(["generate", "--config", str(cfg)]) == 1
    assert "crossreid train-style" in capsys.readouterr().err
    assert main(["train-style", "--config", str(cfg)]) == 1
    assert "crossreid synth" in capsys.readouterr().err
    assert main(["train", "--config", str(cfg)]) == 1
    assert main(["eval", "--config", str(cfg)]) == 1


def test_pipeline_end_to_end(toy):
    cfg, out = toy
    c = str(cfg)
    assert main(["synth", "--config", c]) == 0
    assert main(["train-style", "--config", c]) == 0
    assert main(["generate", "--config", c]) == 0
    rows = lambda p: [l for l in p.read_text().splitlines() if not l.startswith("#")]
    assert len(rows(out / "generated" / "st" / "manifest.tsv")) == 240
    assert len(rows(out / "generated" / "tt" / "manifest.tsv")) == 320
    assert main(["train", "--config", c]) == 0
    resolved = out / "run" / "config.resolved"
    assert parse_config(resolved.read_text()).hash == load_config(cfg).hash
    assert main(["eval", "--config", c]) == 0
    assert (out / "report.json").exists()
    assert main(["train", "--config", c, "--resume", "latest"]) == 0  # already finished: no steps, no error


def test_train_reduction_to_source_classification(toy):
    cfg, out = toy
    cfg.write_text(cfg.read_text() + "\n[weights]\nalpha = 0\ngamma2 = 0\n")
    c = str(cfg)
    assert main(["synth", "--config", c]) == 0
    # the reduced objective needs neither the style engine nor generated data
    assert main(["train", "--config", c]) == 0
    lines = (out / "run" / "metrics.log").read_text().splitlines()
    cols = lines[0].lstrip("#").split("\t")
    table = [dict(zip(cols, l.split("\t"))) for l in lines[1:]]
    assert len({r["cls_s"] for r in table}) > 1
    for k in ("cls_stt", "tri_s", "tri_st", "tri_ttt"):
        assert {r[k] for r in table} == {"0.0"}


def test_runtime_failure_exit_code(toy):
    cfg, _ = toy
    # no parameter can satisfy a negative tolerance, so the check itself reports failure
    assert main(["gradcheck", "--config", str(cfg), "--n-params", "3", "--tol", "-1"]) == 2


def test_oracle_command(toy, capsys):
    cfg, _ = toy
    assert main(["oracle", "--config", str(cfg), "--trials", "20"]) == 0
    assert "CMC mismatches 0" in capsys.readouterr().out
