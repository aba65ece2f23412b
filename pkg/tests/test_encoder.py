import json
import struct

import numpy as np
import pytest

from cldino.encoder import (CHECKPOINT_VERSION, Checkpoint, Encoder, EncoderConfig, embed,
                            load_checkpoint, save_checkpoint)
from cldino.errors import CheckpointError, ConfigError, IntegrityError, ShapeError, TooShortError
from cldino.frontend import FrontendConfig, Waveform, mfcc

from oracles import encoder_param_count


@pytest.fixture(scope="module")
def encoder():
    return Encoder(EncoderConfig(), seed=0)


def test_param_count_matches_closed_form(encoder):
    c = EncoderConfig()
    expected = encoder_param_count(c.feature_dim, c.channels, c.res2net_scale, c.se_reduction,
                                   c.embedding_dim, c.attention_channels)
    assert encoder.n_parameters() == expected == 166032


@pytest.mark.parametrize("kw", [dict(channels=32, res2net_scale=4, se_reduction=8),
                                dict(channels=16, embedding_dim=8, attention_channels=12)])
def test_param_count_other_widths(kw):
    c = EncoderConfig(**kw)
    assert Encoder(c).n_parameters() == encoder_param_count(
        c.feature_dim, c.channels, c.res2net_scale, c.se_reduction, c.embedding_dim,
        c.attention_channels)


def test_output_shape_and_variable_length(encoder):
    rng = np.random.default_rng(0)
    for T in (50, 173):
        assert encoder.forward(rng.standard_normal((3, 40, T))).shape == (3, 64)


def test_embed_is_deterministic_in_eval(encoder):
    feats = mfcc(Waveform(np.random.default_rng(1).standard_normal(24000)), FrontendConfig())
    a, b = embed(encoder, feats), embed(encoder, feats)
    assert a.tobytes() == b.tobytes()
    assert encoder.training  # mode restored


def test_frame_order_matters(encoder):
    encoder.eval()
    x = np.random.default_rng(2).standard_normal((1, 40, 60))
    perm = np.random.default_rng(3).permutation(60)
    a, b = encoder.forward(x), encoder.forward(x[:, :, perm])
    encoder.train()
    assert not np.allclose(a, b)


def test_too_short(encoder):
    with pytest.raises(TooShortError):
        encoder.forward(np.zeros((1, 40, 1)))


def test_wrong_feature_dim(encoder):
    with pytest.raises(ShapeError, match="40"):
        encoder.forward(np.zeros((1, 20, 30)))


@pytest.mark.parametrize("kw", [dict(channels=63), dict(dilations=(3, 2, 4)),
                                dict(dilations=(1, 2)), dict(se_reduction=5)])
def test_bad_config(kw):
    with pytest.raises(ConfigError):
        EncoderConfig(**kw).validate()


class TestCheckpoint:
    def make(self, dtype=np.float32):
        enc = Encoder(EncoderConfig(), seed=4).astype(dtype)
        return Checkpoint(EncoderConfig(), enc.state_dict(),
                          optimizer={"t": np.array(7)}, epoch=3, meta={"note": "x"})

    @pytest.mark.parametrize("dtype", [np.float32, np.float64])
    def test_round_trip_bit_exact(self, tmp_path, dtype):
        ck = self.make(dtype)
        save_checkpoint(ck, tmp_path / "a.ckpt")
        back = load_checkpoint(tmp_path / "a.ckpt")
        assert back.epoch == 3 and back.meta == {"note": "x"}
        assert back.encoder_config == ck.encoder_config
        for k, v in ck.encoder.items():
            assert back.encoder[k].dtype == v.dtype
            assert back.encoder[k].tobytes() == v.tobytes()
        assert int(back.optimizer["t"]) == 7

    def test_resave_is_byte_identical(self, tmp_path):
        save_checkpoint(self.make(), tmp_path / "a.ckpt")
        save_checkpoint(load_checkpoint(tmp_path / "a.ckpt"), tmp_path / "b.ckpt")
        assert (tmp_path / "a.ckpt").read_bytes() == (tmp_path / "b.ckpt").read_bytes()

    def test_truncated(self, tmp_path):
        p = save_checkpoint(self.make(), tmp_path / "a.ckpt")
        p.write_bytes(p.read_bytes()[:-10])
        with pytest.raises(IntegrityError, match="length"):
            load_checkpoint(p)

    def test_bad_magic(self, tmp_path):
        p = tmp_path / "x.ckpt"
        p.write_bytes(b"not a checkpoint at all")
        with pytest.raises(IntegrityError):
            load_checkpoint(p)

    def test_version_mismatch(self, tmp_path):
        p = save_checkpoint(self.make(), tmp_path / "a.ckpt")
        raw = p.read_bytes()
        (hlen,) = struct.unpack("<Q", raw[8:16])
        header = json.loads(raw[16 : 16 + hlen])
        header["version"] = CHECKPOINT_VERSION + 1
        new = json.dumps(header, sort_keys=True).encode()
        p.write_bytes(raw[:8] + struct.pack("<Q", len(new)) + new + raw[16 + hlen :])
        with pytest.raises(CheckpointError, match="version"):
            load_checkpoint(p)

    def test_shape_mismatch(self, tmp_path):
        ck = self.make()
        ck.encoder["fc.weight"] = ck.encoder["fc.weight"][:, :-1]
        p = save_checkpoint(ck, tmp_path / "a.ckpt")
        with pytest.raises(ShapeError, match="fc.weight"):
            load_checkpoint(p)
