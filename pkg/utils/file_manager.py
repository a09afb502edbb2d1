"""
ファイル管理システム
パッチファイル・データセットマニフェスト・PGM画像・レポートの読み書きを管理するクラス
"""

import csv
import io
import json
import logging
import math
import struct
import tempfile
import threading
from contextlib import contextmanager
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np

from models.dataset import DatasetDescriptor, DescriptorError, PatchDataset, PatchSample
from models.metrics import LabelSet


PATCH_MAGIC = b"S2PX"
PATCH_VERSION = 1
PATCH_HEADER = struct.Struct("<4sHHHHI")
MANIFEST_NAME = "manifest.json"


class FileOperationError(Exception):
    """ファイル操作関連のエラー"""
    pass


class PatchFormatError(FileOperationError):
    """パッチファイルの形式エラー"""
    pass


def encode_patch(pixels: np.ndarray, labels: LabelSet) -> bytes:
    """
    パッチをバイト列に変換

    形式: "S2PX", u16 版, u16 C, u16 H, u16 W, u32 クラス数,
    ラベルビットマスク（ceil(K/8)バイト、ビットkはバイトk//8のビットk%8）, C·H·W個のf32（リトルエンディアン）
    """
    pixels = np.asarray(pixels)
    if pixels.ndim != 3:
        raise PatchFormatError(f"ピクセルはC×H×Wである必要があります: shape={pixels.shape}")
    c, h, w = pixels.shape
    mask_bytes = labels.mask.to_bytes(math.ceil(labels.num_classes / 8), "little")
    header = PATCH_HEADER.pack(PATCH_MAGIC, PATCH_VERSION, c, h, w, labels.num_classes)
    return header + mask_bytes + pixels.astype("<f4").tobytes(order="C")


def decode_patch(data: bytes) -> Tuple[np.ndarray, LabelSet]:
    """バイト列をパッチ（ピクセル, ラベル）に変換"""
    if len(data) < PATCH_HEADER.size:
        raise PatchFormatError(f"ヘッダーが途切れています: {len(data)}バイト")
    magic, version, c, h, w, classes = PATCH_HEADER.unpack_from(data, 0)
    if magic != PATCH_MAGIC:
        raise PatchFormatError(f"マジックナンバーが不正です: {magic!r}")
    if version != PATCH_VERSION:
        raise PatchFormatError(f"未対応のパッチ形式バージョン: {version}")
    if classes < 1:
        raise PatchFormatError("クラス数が0です")
    mask_len = math.ceil(classes / 8)
    expected = PATCH_HEADER.size + mask_len + 4 * c * h * w
    if len(data) != expected:
        raise PatchFormatError(f"ファイルサイズが不正です: {len(data)} != {expected}バイト")
    offset = PATCH_HEADER.size
    mask = int.from_bytes(data[offset:offset + mask_len], "little")
    if mask >> classes:
        raise PatchFormatError(f"ラベルビットマスクがクラス数{classes}を超えています")
    pixels = np.frombuffer(data, dtype="<f4", count=c * h * w, offset=offset + mask_len)
    return pixels.reshape(c, h, w).astype(np.float32), LabelSet(mask, classes)


def encode_pgm(heatmap: np.ndarray) -> bytes:
    """[0,1]のヒートマップをバイナリPGM（P5, maxval 255）に変換"""
    heatmap = np.asarray(heatmap, dtype=np.float64)
    if heatmap.ndim != 2:
        raise FileOperationError(f"ヒートマップはH×Wである必要があります: shape={heatmap.shape}")
    h, w = heatmap.shape
    quantized = np.floor(np.clip(heatmap, 0.0, 1.0) * 255.0 + 0.5).astype(np.uint8)
    return f"P5\n{w} {h}\n255\n".encode("ascii") + quantized.tobytes(order="C")


def decode_pgm(data: bytes) -> np.ndarray:
    """バイナリPGMを uint8 の H×W 配列に変換"""
    tokens: List[bytes] = []
    offset = 0
    while len(tokens) < 4:
        while offset < len(data) and data[offset:offset + 1].isspace():
            offset += 1
        if data[offset:offset + 1] == b"#":
            while offset < len(data) and data[offset:offset + 1] != b"\n":
                offset += 1
            continue
        start = offset
        while offset < len(data) and not data[offset:offset + 1].isspace():
            offset += 1
        if start == offset:
            raise FileOperationError("PGMヘッダーが途切れています")
        tokens.append(data[start:offset])
    if tokens[0] != b"P5":
        raise FileOperationError(f"P5形式のPGMではありません: {tokens[0]!r}")
    w, h, maxval = (int(t) for t in tokens[1:])
    if maxval != 255:
        raise FileOperationError(f"未対応のmaxval: {maxval}")
    offset += 1
    body = data[offset:offset + w * h]
    if len(body) != w * h:
        raise FileOperationError(f"PGMの画素データが不足しています: {len(body)} != {w * h}")
    return np.frombuffer(body, dtype=np.uint8).reshape(h, w).copy()


class FileManager:
    """ファイル管理クラス"""

    def __init__(self, root: Union[str, Path] = "."):
        """
        初期化

        Args:
            root: 出力先のルートディレクトリ
        """
        self.root = Path(root)
        self.logger = logging.getLogger(__name__)

        # ファイルロック用の辞書
        self._file_locks: Dict[str, threading.Lock] = {}
        self._locks_lock = threading.Lock()

    @contextmanager
    def _get_file_lock(self, filepath: str):
        """ファイルロックを取得"""
        with self._locks_lock:
            if filepath not in self._file_locks:
                self._file_locks[filepath] = threading.Lock()
            lock = self._file_locks[filepath]

        with lock:
            yield

    def resolve(self, path: Union[str, Path]) -> Path:
        path = Path(path)
        return path if path.is_absolute() else self.root / path

    def ensure_directory_exists(self, path: Optional[Path] = None) -> None:
        """
        ディレクトリの存在を確認し、必要に応じて作成

        Args:
            path: 作成するディレクトリのパス（Noneの場合はルート）
        """
        target_path = path if path else self.root
        try:
            target_path.mkdir(parents=True, exist_ok=True)
        except Exception as e:
            raise FileOperationError(f"ディレクトリの作成に失敗しました: {target_path} - {str(e)}")

    def atomic_write(self, path: Union[str, Path], content: Union[str, bytes]) -> Path:
        """
        アトミックなファイル書き込み

        Args:
            path: ファイルパス
            content: 書き込み内容（文字列またはバイト列）

        Returns:
            書き込んだファイルのパス
        """
        file_path = self.resolve(path)
        self.ensure_directory_exists(file_path.parent)
        data = content.encode("utf-8") if isinstance(content, str) else content
        temp_path = None
        try:
            with self._get_file_lock(str(file_path)):
                with tempfile.NamedTemporaryFile(
                    mode="wb",
                    dir=file_path.parent,
                    prefix=f".{file_path.stem}_",
                    suffix=".tmp",
                    delete=False
                ) as temp_file:
                    temp_file.write(data)
                    temp_path = Path(temp_file.name)

                # アトミックに移動
                temp_path.replace(file_path)
                self.logger.debug(f"アトミック書き込み成功: {file_path}")
                return file_path
        except Exception as e:
            if temp_path is not None and temp_path.exists():
                temp_path.unlink()
            raise FileOperationError(f"書き込みに失敗しました: {file_path} - {str(e)}")

    def read_bytes(self, path: Union[str, Path]) -> bytes:
        file_path = self.resolve(path)
        try:
            return file_path.read_bytes()
        except OSError as e:
            raise FileOperationError(f"読み込みに失敗しました: {file_path} - {str(e)}")

    # JSON / CSV

    def write_json(self, path: Union[str, Path], data: Any) -> Path:
        return self.atomic_write(path, json.dumps(data, ensure_ascii=False, indent=2, sort_keys=False) + "\n")

    def read_json(self, path: Union[str, Path]) -> Any:
        try:
            return json.loads(self.read_bytes(path).decode("utf-8"))
        except json.JSONDecodeError as e:
            raise FileOperationError(f"JSONの解析に失敗しました: {path} - {str(e)}")

    def write_csv(self, path: Union[str, Path], rows: Sequence[Dict[str, Any]],
                  fieldnames: Optional[Sequence[str]] = None) -> Path:
        """辞書の行をCSVとして書き込み（行が空でもヘッダーは出力）"""
        if fieldnames is None:
            fieldnames = list(rows[0].keys()) if rows else []
        buffer = io.StringIO()
        writer = csv.DictWriter(buffer, fieldnames=list(fieldnames), lineterminator="\n")
        writer.writeheader()
        for row in rows:
            writer.writerow(row)
        return self.atomic_write(path, buffer.getvalue())

    # パッチ

    def write_patch(self, path: Union[str, Path], sample: PatchSample) -> Path:
        return self.atomic_write(path, encode_patch(sample.pixels, sample.labels))

    def read_patch(self, path: Union[str, Path], sample_id: Optional[str] = None) -> PatchSample:
        try:
            pixels, labels = decode_patch(self.read_bytes(path))
        except PatchFormatError as e:
            raise PatchFormatError(f"{path}: {str(e)}")
        return PatchSample(id=sample_id or Path(path).stem, pixels=pixels, labels=labels)

    def write_dataset(self, dataset: PatchDataset, directory: Union[str, Path]) -> Path:
        """
        パッチファイルとマニフェストを書き込み

        Args:
            dataset: データセット
            directory: 出力ディレクトリ

        Returns:
            マニフェストのパス
        """
        directory = self.resolve(directory)
        entries = []
        for sample in dataset.samples:
            relative = f"patches/{sample.id}.s2px"
            self.write_patch(directory / relative, sample)
            entries.append({"id": sample.id, "path": relative, "split": dataset.descriptor.split})
        manifest = {"descriptor": dataset.descriptor.to_dict(), "samples": entries}
        path = self.write_json(directory / MANIFEST_NAME, manifest)
        self.logger.info(f"データセットを書き込みました: {len(entries)}件 → {directory}")
        return path

    def load_dataset(self, directory: Union[str, Path],
                     descriptor: Optional[DatasetDescriptor] = None) -> PatchDataset:
        """
        マニフェストからデータセットを読み込み

        Args:
            directory: データセットのディレクトリ
            descriptor: 期待する記述子（省略時はマニフェストの記述子）

        Returns:
            データセット
        """
        directory = self.resolve(directory)
        manifest = self.read_json(directory / MANIFEST_NAME)
        try:
            stored = DatasetDescriptor.from_dict(manifest["descriptor"])
            entries = manifest["samples"]
        except (KeyError, TypeError) as e:
            raise DescriptorError(f"マニフェストの形式が不正です: {str(e)}")
        expected = descriptor or stored
        if descriptor is not None and descriptor.bands != stored.bands:
            extra = [band for band in stored.bands if band not in descriptor.bands]
            missing = [band for band in descriptor.bands if band not in stored.bands]
            raise DescriptorError(f"バンド構成が一致しません: 不足={missing}, 余分={extra}")
        samples = [self.read_patch(directory / entry["path"], entry["id"]) for entry in entries]
        dataset = PatchDataset(expected, samples)
        self.logger.info(f"データセットを読み込みました: {len(samples)}件 ← {directory}")
        return dataset

    # PGM

    def write_pgm(self, path: Union[str, Path], heatmap: np.ndarray) -> Path:
        return self.atomic_write(path, encode_pgm(heatmap))

    def read_pgm(self, path: Union[str, Path]) -> np.ndarray:
        return decode_pgm(self.read_bytes(path))
