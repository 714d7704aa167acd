import csv
import json
import os
import struct
import subprocess
import sys

import numpy as np
import pytest

from tokenwarp import cli
from tokenwarp.config import ConfigError, parse_config
from tokenwarp.container import FormatError, decode, encode, read_container, write_container
from tokenwarp.types import FlowField, OcclusionMask, TokenGrid, VideoTensor


# --- container ------------------------------------------------------------------


@pytest.mark.parametrize("shape", [(7,), (3, 4), (2, 3, 4), (2, 3, 4, 5)])
def test_roundtrip_bitwise(tmp_path, shape):
    a = np.random.default_rng(0).normal(size=shape).astype(np.float32)
    p = tmp_path / "t.tkwp"
    write_container(p, a)
    b = read_container(p)
    assert b.dtype == np.float32 and b.shape == shape
    assert a.tobytes() == b.tobytes()


def test_hand_assembled_bytes():
    buf = b"TKWP" + struct.pack("<I", 1) + bytes([1, 1]) + struct.pack("<Q", 2) + struct.pack("<2f", 1.0, 2.0)
    assert len(buf) == 18 + 8
    np.testing.assert_array_equal(decode(buf), [1.0, 2.0])
    assert encode(np.array([1.0, 2.0])) == buf


def test_bad_magic_names_it():
    buf = bytearray(encode(np.zeros(2)))
    buf[:4] = b"XXXX"
    with pytest.raises(FormatError, match="XXXX") as exc:
        decode(bytes(buf))
    assert exc.value.offset == 0


@pytest.mark.parametrize("offset,value,needle", [(4, 2, "version"), (8, 3, "dtype")])
def test_bad_version_and_dtype(offset, value, needle):
    buf = bytearray(encode(np.zeros(2)))
    buf[offset] = value
    with pytest.raises(FormatError, match=needle) as exc:
        decode(bytes(buf))
    assert exc.value.offset == offset


def test_truncated_and_trailing():
    buf = encode(np.arange(6, dtype=np.float32).reshape(2, 3))
    with pytest.raises(FormatError, match="truncated"):
        decode(buf[:-1])
    with pytest.raises(FormatError, match="truncated"):
        decode(buf[:12])
    with pytest.raises(FormatError, match="trailing"):
        decode(buf + b"\0")


def test_roles(tmp_path):
    p = tmp_path / "f.tkwp"
    write_container(p, np.zeros((4, 5, 2)))
    assert isinstance(read_container(p, "flow"), FlowField)
    assert isinstance(read_container(p, "grid"), TokenGrid)
    with pytest.raises(FormatError):
        read_container(p, "video")
    write_container(p, np.zeros((4, 5, 3)))
    with pytest.raises(FormatError):
        read_container(p, "flow")
    write_container(p, np.ones((4, 5)))
    assert isinstance(read_container(p, "mask"), OcclusionMask)
    write_container(p, np.ones((2, 4, 5, 1)))
    assert isinstance(read_container(p, "video"), VideoTensor)


def test_failed_write_leaves_no_partial_file(tmp_path):
    p = tmp_path / "x.tkwp"
    write_container(p, np.ones(3))
    with pytest.raises(ValueError):
        write_container(p, np.ones(()))
    np.testing.assert_array_equal(read_container(p), np.ones(3))
    assert sorted(os.listdir(tmp_path)) == ["x.tkwp"]


# --- config -------------------------------------------------------------------


def test_config_defaults_and_strictness():
    cfg = parse_config({"seed": 3})
    assert cfg.steps == 50 and cfg.clip_len == 8 and cfg.translation_config().seed == 3
    with pytest.raises(ConfigError, match="bogus"):
        parse_config({"bogus": 1})
    with pytest.raises(ConfigError, match="extra"):
        parse_config({"attention": {"extra": True}})
    with pytest.raises(ConfigError):
        parse_config({"steps": "fifty"})
    with pytest.raises(ConfigError):
        parse_config({"seed": 1.5})
    with pytest.raises(ConfigError):
        parse_config({"clip_len": 0})
    with pytest.raises(ConfigError):
        parse_config({"scene": {"objects": [{"shape": "star"}]}})
    with pytest.raises(ConfigError):
        parse_config({}).require_seed("translate")


def test_config_layer_selection():
    cfg = parse_config({"attention": {"layer_selection": [0, 2]}})
    assert cfg.attention_config().layer_selection == frozenset({0, 2})


# --- CLI -------------------------------------------------------------------------


SMALL = {
    "seed": 1,
    "steps": 3,
    "clip_len": 2,
    "scene": {"h": 12, "w": 12, "n": 4, "objects": [{"size": [4, 4], "position": [1, 4], "velocity": [1, 0]}]},
}


def _write_cfg(path, body):
    path.write_text(json.dumps(body))
    return str(path)


@pytest.fixture
def scene_dir(tmp_path):
    cfg = _write_cfg(tmp_path / "cfg.json", SMALL)
    out = tmp_path / "scene"
    assert cli.main(["synth", "--config", cfg, "--out-dir", str(out)]) == 0
    return tmp_path, cfg, out


def test_synth_layout(scene_dir):
    _, _, out = scene_dir
    names = sorted(os.listdir(out))
    assert names == ["bwd_001.tkwp", "bwd_002.tkwp", "bwd_003.tkwp", "fwd_001.tkwp", "fwd_002.tkwp",
                     "fwd_003.tkwp", "occ_001.tkwp", "occ_002.tkwp", "occ_003.tkwp", "video.tkwp"]
    assert read_container(out / "video.tkwp").shape == (4, 12, 12, 3)


def test_static_scene_eval(tmp_path):
    body = dict(SMALL, scene=dict(SMALL["scene"], objects=[{"size": [4, 4], "position": [1, 4], "velocity": [0, 0]}]))
    cfg = _write_cfg(tmp_path / "c.json", body)
    d = tmp_path / "s"
    assert cli.main(["synth", "--config", cfg, "--out-dir", str(d)]) == 0
    rep = tmp_path / "r.csv"
    code = cli.main(["eval", "--video", str(d / "video.tkwp"), "--flows-dir", str(d), "--masks-dir", str(d),
                     "--out", str(rep)])
    assert code == 0
    assert rep.read_text().splitlines() == ["variant,warp_err,tem_con", "video,0.000000,1.000000"]


def test_flow_and_occl(scene_dir):
    tmp, _, d = scene_dir
    v = read_container(d / "video.tkwp")
    write_container(tmp / "a.tkwp", v[0])
    write_container(tmp / "b.tkwp", v[1])
    assert cli.main(["flow", "--prev", str(tmp / "a.tkwp"), "--next", str(tmp / "b.tkwp"), "--block", "3",
                     "--radius", "2", "--levels", "1", "--out", str(tmp / "f.tkwp")]) == 0
    assert read_container(tmp / "f.tkwp").shape == (12, 12, 2)
    assert cli.main(["occl", "--fwd", str(d / "fwd_001.tkwp"), "--bwd", str(d / "bwd_001.tkwp"),
                     "--out", str(tmp / "m.tkwp")]) == 0
    m = read_container(tmp / "m.tkwp", "mask")
    gt = read_container(d / "occ_001.tkwp", "mask")
    assert np.array_equal(m.m, gt.m)


def test_translate_is_byte_identical(scene_dir):
    tmp, cfg, d = scene_dir
    outs = []
    for k in range(2):
        o = tmp / f"out{k}.tkwp"
        assert cli.main(["translate", "--config", cfg, "--video", str(d / "video.tkwp"), "--flows-dir", str(d),
                         "--masks-dir", str(d), "--out", str(o)]) == 0
        outs.append(o.read_bytes())
    assert outs[0] == outs[1]
    assert decode(outs[0]).shape == (4, 12, 12, 3)


def test_ablate_rows(tmp_path):
    body = dict(SMALL, denoiser={"blocks": 2})
    cfg = _write_cfg(tmp_path / "c.json", body)
    rep = tmp_path / "a.csv"
    assert cli.main(["ablate", "--config", cfg, "--out", str(rep)]) == 0
    rows = list(csv.DictReader(rep.open()))
    assert [r["variant"] for r in rows] == ["baseline", "q_warp", "kv_warp", "full", "blocks_1", "blocks_2",
                                            "blocks_12"]


def test_exit_codes(scene_dir, tmp_path, capsys):
    tmp, cfg, d = scene_dir
    video = str(d / "video.tkwp")
    out = str(tmp / "o.tkwp")
    # usage
    assert cli.main(["translate"]) == cli.EXIT_USAGE
    assert cli.main(["flow", "--prev", video, "--next", video, "--block", "4", "--out", out]) == cli.EXIT_USAGE
    # missing file
    assert cli.main(["translate", "--config", cfg, "--video", str(tmp / "nope.tkwp"), "--flows-dir", str(d),
                     "--masks-dir", str(d), "--out", out]) == cli.EXIT_MISSING
    assert cli.main(["eval", "--video", video, "--flows-dir", str(tmp / "none"), "--masks-dir", str(d),
                     "--out", str(tmp / "r.csv")]) == cli.EXIT_MISSING
    # malformed container
    bad = tmp / "bad.tkwp"
    bad.write_bytes(b"XXXX" + b"\0" * 20)
    assert cli.main(["eval", "--video", str(bad), "--flows-dir", str(d), "--masks-dir", str(d),
                     "--out", str(tmp / "r.csv")]) == cli.EXIT_FORMAT
    # flow count does not match frame count
    short = tmp / "short.tkwp"
    write_container(short, read_container(video)[:2])
    assert cli.main(["eval", "--video", str(short), "--flows-dir", str(d), "--masks-dir", str(d),
                     "--out", str(tmp / "r.csv")]) == cli.EXIT_FORMAT
    # configuration
    noseed = _write_cfg(tmp / "noseed.json", {k: v for k, v in SMALL.items() if k != "seed"})
    assert cli.main(["translate", "--config", noseed, "--video", video, "--flows-dir", str(d),
                     "--masks-dir", str(d), "--out", out]) == cli.EXIT_CONFIG
    broken = tmp / "broken.json"
    broken.write_text("{not json")
    assert cli.main(["ablate", "--config", str(broken), "--out", str(tmp / "a.csv")]) == cli.EXIT_CONFIG
    offcanvas = _write_cfg(tmp / "off.json", dict(SMALL, scene=dict(SMALL["scene"], n=20)))
    assert cli.main(["synth", "--config", offcanvas, "--out-dir", str(tmp / "z")]) == cli.EXIT_CONFIG
    # no partial outputs were left behind
    assert not os.path.exists(out) and not (tmp / "r.csv").exists() and not (tmp / "a.csv").exists()
    # one diagnostic line per failure that got past argument parsing
    err = capsys.readouterr().err.splitlines()
    assert sum(line.startswith("tokenwarp: error:") for line in err) == 8


def test_module_entry_point(tmp_path):
    r = subprocess.run([sys.executable, "-m", "tokenwarp", "--help"], capture_output=True, text=True)
    assert r.returncode == 0 and "translate" in r.stdout
