import numpy as np
import pytest

from psgkit import io as pio
from psgkit.scene import CorpusConfig, generate_corpus


def test_empty_corpus(tmp_path):
    p = tmp_path / "e.psgc"
    pio.save_corpus([], p, {"seed": 0})
    scenes, cfg = pio.load_corpus(p)
    assert scenes == [] and cfg == {"seed": 0}


def test_round_trip(tmp_path):
    cfg = CorpusConfig(num_scenes=10, ambiguity_rate=0.3, seed=2)
    scenes = generate_corpus(cfg)
    p = tmp_path / "c.psgc"
    pio.save_corpus(scenes, p, cfg.to_dict())
    back, meta = pio.load_corpus(p)
    assert back == scenes
    assert CorpusConfig.from_dict(meta) == cfg
    assert any(s.hidden for s in back)
    assert pio.dump_corpus(back, meta) == p.read_bytes()


def test_missing_file(tmp_path):
    with pytest.raises(FileNotFoundError):
        pio.load_corpus(tmp_path / "nope.psgc")


def _flip_all(buf, positions, parse):
    undetected = []
    for pos, xor in positions:
        bad = bytearray(buf)
        bad[pos] ^= xor
        try:
            parse(bytes(bad))
        except pio.FormatError:
            continue
        undetected.append(pos)
    return undetected


def test_mask_payload_corruption_detected():
    cfg = CorpusConfig(num_scenes=3, height=8, width=8, channels=2, seed=1)
    scenes = generate_corpus(cfg)
    buf = pio.dump_corpus(scenes, cfg.to_dict())
    # the tail of each record holds the mask runs, labels and triplets
    rng = np.random.default_rng(0)
    positions = [(int(p), int(rng.integers(1, 256))) for p in rng.integers(len(buf) - 200, len(buf), 100)]
    assert _flip_all(buf, positions, pio.parse_corpus) == []


def test_checkpoint_round_trip(tmp_path):
    rng = np.random.default_rng(3)
    params = {"a.w": rng.standard_normal((3, 4)), "b": rng.standard_normal(5), "s": np.array(2.5)}
    p = tmp_path / "m.ckpt"
    pio.save_checkpoint(p, params, {"role": "student"})
    back, meta = pio.load_checkpoint(p)
    assert meta == {"role": "student"} and set(back) == set(params)
    for k in params:
        assert back[k].shape == params[k].shape and back[k].tobytes() == params[k].tobytes()


def test_trailing_bytes_rejected():
    buf = pio.dump_checkpoint({"x": np.ones(2)})
    with pytest.raises(pio.FormatError):
        pio.parse_checkpoint(buf + b"\0")
    with pytest.raises(pio.FormatError):
        pio.parse_checkpoint(buf[:-1])
    with pytest.raises(pio.FormatError):
        pio.parse_corpus(b"XXXX" + pio.dump_corpus([])[4:])
