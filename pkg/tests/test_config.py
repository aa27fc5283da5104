import pytest

from taac.config import RunConfig, load_config, parse_config
from taac.errors import ConfigError, FormatError


def test_empty_file_gives_presets(tmp_path):
    p = tmp_path / "empty.cfg"
    p.write_text("")
    c = load_config(p)
    assert c == RunConfig()
    assert (c.phase.batch_size, c.phase.epochs, c.optimizer.lr, c.optimizer.weight_decay) == (32, 10, 1e-4, 0.01)
    assert (c.phase.lambda_ortho, c.phase.lambda_recon, c.phase.threshold) == (10.0, 10.0, 0.4)


def test_sections_and_types():
    c = parse_config("""
# comment
[phase]
phase = 3
lambda_cls = 0.5
; other comment
[dp]
enabled = yes
noise_multiplier = 1.1
[encryption]
key = key.txt
strength = 10
[optimizer]
sdae_lr = none
""")
    assert c.phase.phase == 3 and c.phase.lambda_cls == 0.5
    assert c.dp.enabled is True and c.dp.noise_multiplier == 1.1
    assert c.encryption.key == "key.txt" and c.encryption.strength == 10
    assert c.optimizer.sdae_lr is None


def test_duplicate_key_last_wins():
    with pytest.warns(UserWarning, match="duplicate key 'epochs'"):
        c = parse_config("[phase]\nepochs = 3\nepochs = 5\n")
    assert c.phase.epochs == 5


def test_missing_file_names_path(tmp_path):
    p = tmp_path / "nope.cfg"
    with pytest.raises(ConfigError, match="nope.cfg"):
        load_config(p)


@pytest.mark.parametrize("text,line", [
    ("[phase]\nepochs 3\n", 2),
    ("epochs = 3\n", 1),
    ("[phase]\n\n[bogus]\n", 3),
    ("[phase]\nepochs = three\n", 2),
    ("[phase]\nunknown = 1\n", 2),
    ("[phase\n", 1),
    ("[dp]\nenabled = maybe\n", 2),
])
def test_malformed_reports_line(text, line):
    with pytest.raises(FormatError, match=f"run.cfg:{line}:"):
        parse_config(text, "run.cfg")


def test_set_and_json():
    c = RunConfig()
    c.set("phase", "epochs", "7")
    assert c.phase.epochs == 7
    with pytest.raises(ConfigError):
        c.set("nope", "x", 1)
    assert '"epochs": 7' in c.to_json()
