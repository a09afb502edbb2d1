"""
チェックポイント入出力
モデル設定と名前付きテンソルをCRC-32付きのバイナリ形式で保存・読み込み

形式（リトルエンディアン）:
    "SZOO" | u16 版 | u32 ヘッダー長 | ヘッダーJSON（モデル設定・メタデータ）
    | u32 テンソル数 | テンソル毎に [u16 名前長 | 名前 | u8 次元数 | u32×次元数 | f32×要素数]
    | u32 直前までの全バイトのCRC-32
"""

import json
import logging
import struct
import zlib
from collections import OrderedDict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, Optional, Union

import numpy as np

from models.architecture import ModelConfig
from services.architectures import ClassifierModel, build_model
from utils.file_manager import FileManager, FileOperationError


logger = logging.getLogger(__name__)

CHECKPOINT_MAGIC = b"SZOO"
CHECKPOINT_VERSION = 1

_PREAMBLE = struct.Struct("<4sHI")
_U32 = struct.Struct("<I")
_U16 = struct.Struct("<H")


class CheckpointError(Exception):
    """チェックポイント関連のエラー"""
    pass


class ChecksumError(CheckpointError):
    """CRC-32が一致しないエラー"""
    pass


class UnsupportedVersionError(CheckpointError):
    """未対応の形式バージョンのエラー"""
    pass


@dataclass
class Checkpoint:
    """読み込んだチェックポイントの内容"""
    config: ModelConfig
    tensors: "OrderedDict[str, np.ndarray]"
    metadata: Dict[str, Any] = field(default_factory=dict)


def encode_checkpoint(config: ModelConfig, tensors: Dict[str, np.ndarray],
                      metadata: Optional[Dict[str, Any]] = None) -> bytes:
    """設定とテンソルをバイト列に変換"""
    header = json.dumps(
        {"config": config.to_dict(), "metadata": metadata or {}}, ensure_ascii=False, sort_keys=True,
    ).encode("utf-8")
    parts = [_PREAMBLE.pack(CHECKPOINT_MAGIC, CHECKPOINT_VERSION, len(header)), header, _U32.pack(len(tensors))]
    for name, array in tensors.items():
        encoded_name = name.encode("utf-8")
        array = np.asarray(array)
        parts.append(_U16.pack(len(encoded_name)))
        parts.append(encoded_name)
        parts.append(struct.pack(f"<B{array.ndim}I", array.ndim, *array.shape))
        parts.append(np.ascontiguousarray(array, dtype="<f4").tobytes())
    body = b"".join(parts)
    return body + _U32.pack(zlib.crc32(body) & 0xFFFFFFFF)


class _Reader:
    """境界チェック付きの逐次読み取り"""

    def __init__(self, data: bytes, end: int):
        self.data = data
        self.offset = 0
        self.end = end

    def take(self, size: int) -> bytes:
        if self.offset + size > self.end:
            raise CheckpointError(f"チェックポイントが途切れています (オフセット {self.offset})")
        chunk = self.data[self.offset:self.offset + size]
        self.offset += size
        return chunk

    def unpack(self, fmt: struct.Struct):
        return fmt.unpack(self.take(fmt.size))


def decode_checkpoint(data: bytes) -> Checkpoint:
    """
    バイト列をチェックポイントに変換

    検証順: CRC-32 → マジックナンバー → バージョン → 本体
    """
    if len(data) < _PREAMBLE.size + _U32.size:
        raise CheckpointError(f"チェックポイントが短すぎます: {len(data)}バイト")
    body_end = len(data) - _U32.size
    (stored_crc,) = _U32.unpack_from(data, body_end)
    actual_crc = zlib.crc32(data[:body_end]) & 0xFFFFFFFF
    if stored_crc != actual_crc:
        raise ChecksumError(f"CRC-32が一致しません: 記録値 {stored_crc:08x} != 計算値 {actual_crc:08x}")

    reader = _Reader(data, body_end)
    magic, version, header_len = reader.unpack(_PREAMBLE)
    if magic != CHECKPOINT_MAGIC:
        raise CheckpointError(f"マジックナンバーが不正です: {magic!r}")
    if version != CHECKPOINT_VERSION:
        raise UnsupportedVersionError(
            f"未対応のチェックポイント形式バージョン: {version} (対応: {CHECKPOINT_VERSION})"
        )
    try:
        header = json.loads(reader.take(header_len).decode("utf-8"))
        config = ModelConfig.from_dict(header["config"])
    except (ValueError, KeyError, TypeError) as e:
        raise CheckpointError(f"ヘッダーの解析に失敗しました: {str(e)}")

    (count,) = reader.unpack(_U32)
    tensors: "OrderedDict[str, np.ndarray]" = OrderedDict()
    for _ in range(count):
        (name_len,) = reader.unpack(_U16)
        name = reader.take(name_len).decode("utf-8")
        (ndim,) = struct.unpack("<B", reader.take(1))
        shape = struct.unpack(f"<{ndim}I", reader.take(4 * ndim))
        size = int(np.prod(shape, dtype=np.int64))
        tensors[name] = np.frombuffer(reader.take(4 * size), dtype="<f4").reshape(shape).astype(np.float32)
    if reader.offset != body_end:
        raise CheckpointError(f"末尾に余分なデータがあります: {body_end - reader.offset}バイト")
    return Checkpoint(config=config, tensors=tensors, metadata=header.get("metadata", {}))


def save_checkpoint(model: ClassifierModel, path: Union[str, Path],
                    metadata: Optional[Dict[str, Any]] = None,
                    file_manager: Optional[FileManager] = None) -> Path:
    """
    モデルをチェックポイントとして保存

    Args:
        model: 保存するモデル
        path: 保存先
        metadata: ヘッダーに含める任意の情報
        file_manager: 書き込みに使うFileManager

    Returns:
        書き込んだファイルのパス
    """
    file_manager = file_manager or FileManager()
    data = encode_checkpoint(model.config, model.state_dict(), metadata)
    try:
        written = file_manager.atomic_write(path, data)
    except FileOperationError as e:
        raise CheckpointError(str(e))
    logger.info(f"チェックポイントを保存しました: {written} ({len(data):,}バイト)")
    return written


def read_checkpoint(path: Union[str, Path], file_manager: Optional[FileManager] = None) -> Checkpoint:
    """チェックポイントファイルを読み込み（モデルは構築しない）"""
    file_manager = file_manager or FileManager()
    try:
        data = file_manager.read_bytes(path)
    except FileOperationError as e:
        raise CheckpointError(str(e))
    try:
        return decode_checkpoint(data)
    except CheckpointError as e:
        raise type(e)(f"{path}: {str(e)}")


def load_checkpoint(path: Union[str, Path], dtype: type = np.float32,
                    file_manager: Optional[FileManager] = None) -> ClassifierModel:
    """
    チェックポイントからモデルを復元

    Args:
        path: チェックポイントのパス
        dtype: モデルの精度

    Returns:
        重みを読み込んだモデル（推論モード）
    """
    checkpoint = read_checkpoint(path, file_manager)
    model = build_model(checkpoint.config, dtype=dtype)
    try:
        model.load_state_dict(checkpoint.tensors, strict=True)
    except (KeyError, ValueError) as e:
        raise CheckpointError(f"テンソルがモデル構成と一致しません: {str(e)}")
    model.eval()
    logger.info(f"チェックポイントを読み込みました: {path} ({checkpoint.config.name or checkpoint.config.family})")
    return model
