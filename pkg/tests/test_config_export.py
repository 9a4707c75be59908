import numpy as np
import pytest

from cmanet.cma import upsample_nearest
from cmanet.config import ConfigSyntaxError, ExperimentConfig, format_config, load_config, parse_config, set_value
from cmanet.export import pgm_bytes, read_pgm, to_gray8, write_attention_map


def test_parse_every_kind_of_value():
    cfg = parse_config(
        """
        # comment line
        lr = 0.05            # trailing comment
        flip_averaging = true
        weights_odd = 3, 1
        cma_insertion = 2:0, 1:1
        n_classes = 6
        n_train = 12
        """
    )
    assert cfg.train.lr == 0.05 and cfg.train.flip_averaging is True
    assert cfg.train.weights_odd == (3.0, 1.0)
    assert cfg.model.cma_insertion == ((2, 0), (1, 1))
    assert cfg.data.n_classes == 6 and cfg.n_train == 12


def test_empty_insertion_list():
    assert parse_config("cma_insertion =\n").model.cma_insertion == ()


@pytest.mark.parametrize("text", ["bogus = 1", "lr 0.1", "lr = abc", "flip_averaging = maybe", "lr = -1"])
def test_bad_lines(text):
    with pytest.raises(ConfigSyntaxError):
        parse_config(text)


def test_format_round_trip(tmp_path):
    cfg = ExperimentConfig()
    set_value(cfg, "seed", "7")
    set_value(cfg, "stage_channels", "4, 8, 8")
    text = format_config(cfg)
    p = tmp_path / "c.cfg"
    p.write_text(text)
    assert format_config(load_config(p)) == text


def test_every_field_addressable():
    cfg = ExperimentConfig()
    for line in format_config(cfg).splitlines():
        if line.startswith("#"):
            continue
        key, _, value = line.partition(" = ")
        set_value(cfg, key, value)
    assert format_config(cfg) == format_config(ExperimentConfig())


def test_gray8_normalises_to_own_max():
    img = to_gray8(np.array([[0.0, 0.1], [0.2, 0.4]]))
    assert img.dtype == np.uint8 and img.max() == 255 and img[0, 0] == 0 and img[1, 0] == 128
    assert not to_gray8(np.zeros((2, 2))).any()


def test_pgm_round_trip(tmp_path):
    img = np.arange(12, dtype=np.uint8).reshape(3, 4)
    buf = pgm_bytes(img)
    assert buf.startswith(b"P5\n4 3\n255\n")
    p = tmp_path / "a.pgm"
    p.write_bytes(buf)
    assert np.array_equal(read_pgm(p), img)


def test_upsample_nearest_blocks():
    up = upsample_nearest(np.array([[1, 2], [3, 4]]), (4, 4))
    assert up.tolist() == [[1, 1, 2, 2], [1, 1, 2, 2], [3, 3, 4, 4], [3, 3, 4, 4]]


def test_attention_map_files(tmp_path):
    row = np.array([0.1, 0.2, 0.3, 0.4])
    write_attention_map(tmp_path / "m.pgm", tmp_path / "m.csv", row, (2, 2), (8, 8))
    img = read_pgm(tmp_path / "m.pgm")
    assert img.shape == (8, 8) and img[7, 7] == 255 and img[0, 0] == round(0.25 * 255)
    lines = (tmp_path / "m.csv").read_text().splitlines()
    assert lines[0] == "key_y,key_x,weight" and len(lines) == 5
    assert abs(sum(float(l.split(",")[2]) for l in lines[1:]) - 1.0) <= 1e-9
