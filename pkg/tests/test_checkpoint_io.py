"""
チェックポイント入出力のユニットテスト
"""

import shutil
import struct
import tempfile
import zlib

import numpy as np
import pytest

from models.architecture import AttentionSpec, ModelConfig
from nn.tensor import Tensor
from services.architectures import build_model
from utils.checkpoint_io import (
    CHECKPOINT_MAGIC, CheckpointError, ChecksumError, UnsupportedVersionError,
    decode_checkpoint, encode_checkpoint, load_checkpoint, read_checkpoint, save_checkpoint
)
from utils.file_manager import FileManager


def _with_crc(body: bytes) -> bytes:
    return body + struct.pack("<I", zlib.crc32(body) & 0xFFFFFFFF)


class TestCheckpointFormat:
    """チェックポイント形式のテスト"""

    def setup_method(self):
        """テストセットアップ"""
        self.config = ModelConfig(family="wrn", attention=AttentionSpec(kind="eca"), in_channels=3,
                                  num_classes=4, name="WRNB0-ECA")
        self.model = build_model(self.config, seed=3)
        self.data = encode_checkpoint(self.config, self.model.state_dict(), {"epoch": 7})

    def test_decode(self):
        """デコードのテスト"""
        checkpoint = decode_checkpoint(self.data)
        assert checkpoint.config == self.config
        assert checkpoint.config.name == "WRNB0-ECA"
        assert checkpoint.metadata == {"epoch": 7}
        assert list(checkpoint.tensors) == list(self.model.state_dict())
        for name, array in self.model.state_dict().items():
            np.testing.assert_array_equal(checkpoint.tensors[name], array)

    def test_starts_with_magic(self):
        """先頭がマジックナンバーであることのテスト"""
        assert self.data[:4] == CHECKPOINT_MAGIC
        assert struct.unpack_from("<H", self.data, 4) == (1,)

    def test_flipped_byte_fails_checksum(self):
        """1バイトの破損でCRC-32が一致しなくなることのテスト"""
        data = bytearray(self.data)
        data[len(data) // 2] ^= 0xFF
        with pytest.raises(ChecksumError, match="CRC-32"):
            decode_checkpoint(bytes(data))

    def test_checksum_is_verified_before_magic(self):
        """マジックナンバーより先にCRC-32が検証されることのテスト"""
        data = b"XXXX" + self.data[4:]
        with pytest.raises(ChecksumError):
            decode_checkpoint(data)

    def test_bad_magic(self):
        """CRC-32が正しく、マジックナンバーが不正な場合のテスト"""
        data = _with_crc(b"XXXX" + self.data[4:-4])
        with pytest.raises(CheckpointError, match="マジックナンバー"):
            decode_checkpoint(data)

    def test_unsupported_version(self):
        """未対応バージョンのテスト"""
        body = bytearray(self.data[:-4])
        struct.pack_into("<H", body, 4, 2)
        with pytest.raises(UnsupportedVersionError, match="バージョン: 2"):
            decode_checkpoint(_with_crc(bytes(body)))

    def test_too_short(self):
        """短すぎるデータのテスト"""
        with pytest.raises(CheckpointError, match="短すぎます"):
            decode_checkpoint(b"SZOO")

    def test_truncated_body(self):
        """CRC-32が正しく、本体が途切れている場合のテスト"""
        with pytest.raises(CheckpointError, match="途切れています"):
            decode_checkpoint(_with_crc(self.data[:-40]))

    def test_trailing_bytes(self):
        """本体の後の余分なデータのテスト"""
        with pytest.raises(CheckpointError, match="末尾に余分"):
            decode_checkpoint(_with_crc(self.data[:-4] + b"\x00\x00"))

    def test_values_stored_as_f32(self):
        """f64のテンソルもf32で保存されることのテスト"""
        tensors = {name: array.astype(np.float64) for name, array in self.model.state_dict().items()}
        checkpoint = decode_checkpoint(encode_checkpoint(self.config, tensors))
        assert all(array.dtype == np.float32 for array in checkpoint.tensors.values())


class TestCheckpointFiles:
    """チェックポイントファイルのテスト"""

    def setup_method(self):
        """テストセットアップ"""
        self.temp_dir = tempfile.mkdtemp()
        self.file_manager = FileManager(self.temp_dir)
        self.config = ModelConfig(family="wrn", in_channels=3, num_classes=4)

    def teardown_method(self):
        """テストクリーンアップ"""
        shutil.rmtree(self.temp_dir, ignore_errors=True)

    def test_saved_model_gives_same_logits(self):
        """保存したモデルが同じ出力を返すことのテスト"""
        model = build_model(self.config, seed=1).eval()
        save_checkpoint(model, "m.ckpt", {"note": "テスト"}, file_manager=self.file_manager)
        restored = load_checkpoint("m.ckpt", file_manager=self.file_manager)
        x = Tensor(np.random.default_rng(0).standard_normal((2, 3, 8, 8)), dtype=np.float32)
        assert not restored.training
        np.testing.assert_array_equal(restored(x).numpy(), model(x).numpy())
        assert read_checkpoint("m.ckpt", self.file_manager).metadata == {"note": "テスト"}

    def test_load_as_f64(self):
        """f64で読み込むテスト"""
        save_checkpoint(build_model(self.config), "m.ckpt", file_manager=self.file_manager)
        restored = load_checkpoint("m.ckpt", dtype=np.float64, file_manager=self.file_manager)
        assert all(p.data.dtype == np.float64 for p in restored.parameters())

    def test_error_names_path_and_keeps_type(self):
        """エラーにパスが含まれ、種類が保たれることのテスト"""
        data = bytearray(encode_checkpoint(self.config, build_model(self.config).state_dict()))
        data[10] ^= 0x01
        self.file_manager.atomic_write("bad.ckpt", bytes(data))
        with pytest.raises(ChecksumError, match="bad.ckpt"):
            read_checkpoint("bad.ckpt", self.file_manager)

    def test_missing_file(self):
        """存在しないファイルのテスト"""
        with pytest.raises(CheckpointError, match="読み込みに失敗"):
            read_checkpoint("missing.ckpt", self.file_manager)

    def test_tensors_do_not_match_config(self):
        """テンソルがモデル構成と一致しない場合のテスト"""
        other = build_model(ModelConfig(family="wrn", in_channels=3, num_classes=7))
        self.file_manager.atomic_write("mismatch.ckpt", encode_checkpoint(self.config, other.state_dict()))
        with pytest.raises(CheckpointError, match="テンソルがモデル構成と一致しません"):
            load_checkpoint("mismatch.ckpt", file_manager=self.file_manager)
