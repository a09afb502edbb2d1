"""
設定ファイル読み込み機能

設定は「デフォルト値 ← YAMLファイル ← 環境変数」の順に重ねて解決する。
YAML内の ${VAR} は環境変数で展開し、SCALEZOO_<セクション>__<フィールド> 形式の
環境変数（.envも可）はファイルの値を上書きする。
"""

import difflib
import logging
import os
import re
from dataclasses import fields
from typing import Any, Dict, Iterator, List, Mapping, Optional, Tuple

import yaml
from dotenv import load_dotenv

from models.config import (
    AppConfig, DataConfig, EngineConfig, LoggingConfig, OutputConfig, TrainConfig, WorkerPoolConfig
)


ENV_PATTERN = re.compile(r'\$\{([^}]+)\}')
ENV_OVERRIDE_PREFIX = "SCALEZOO_"

SECTION_TYPES = {
    "engine": EngineConfig,
    "training": TrainConfig,
    "distributed": WorkerPoolConfig,
    "data": DataConfig,
    "output": OutputConfig,
    "logging": LoggingConfig,
}
KNOWN_SECTIONS = tuple(SECTION_TYPES)

SEARCH_PATHS = (
    "config.yaml",
    "config.yml",
    ".config/scalezoo.yaml",
    ".config/scalezoo.yml",
    "~/.config/scalezoo/config.yaml",
)

DEFAULT_CONFIG_HEADER = (
    "# 複合モデルスケーリングの設定\n"
    "# 値は ${VAR} で環境変数を参照でき、SCALEZOO_TRAINING__EPOCHS=5 のような環境変数で上書きできる\n"
)


class ConfigLoadError(Exception):
    """設定読み込み関連のエラー"""
    pass


def section_fields(section: str) -> Tuple[str, ...]:
    """セクションのフィールド名"""
    return tuple(f.name for f in fields(SECTION_TYPES[section]))


def parse_scalar(text: str) -> Any:
    """環境変数の値をYAMLのスカラーとして解釈（数値・真偽値・null）"""
    try:
        value = yaml.safe_load(text)
    except yaml.YAMLError:
        return text
    return value if value is None or isinstance(value, (bool, int, float, str)) else text


def expand_env_refs(text: str, environ: Mapping[str, str]) -> str:
    """文字列内の ${VAR} を展開（未設定のものはそのまま残す）"""
    return ENV_PATTERN.sub(lambda match: environ.get(match.group(1), match.group(0)), text)


def iter_env_refs(value: Any) -> Iterator[str]:
    """設定値から参照されている環境変数名を列挙"""
    if isinstance(value, str):
        yield from ENV_PATTERN.findall(value)
    elif isinstance(value, dict):
        for item in value.values():
            yield from iter_env_refs(item)
    elif isinstance(value, list):
        for item in value:
            yield from iter_env_refs(item)


def env_overrides(environ: Mapping[str, str]) -> Dict[str, Dict[str, Any]]:
    """
    SCALEZOO_<セクション>__<フィールド> 形式の環境変数を設定辞書に変換

    Raises:
        ConfigLoadError: セクションやフィールドが存在しない場合
    """
    overrides: Dict[str, Dict[str, Any]] = {}
    for name in sorted(environ):
        if not name.startswith(ENV_OVERRIDE_PREFIX):
            continue
        section, sep, field_name = name[len(ENV_OVERRIDE_PREFIX):].lower().partition("__")
        if not sep or section not in SECTION_TYPES or field_name not in section_fields(section):
            raise ConfigLoadError(f"環境変数 {name} は設定項目に対応していません（形式: SCALEZOO_TRAINING__EPOCHS）")
        overrides.setdefault(section, {})[field_name] = parse_scalar(environ[name])
    return overrides


class ConfigLoader:
    """設定ファイル読み込みクラス"""

    def __init__(self, environ: Optional[Mapping[str, str]] = None):
        """
        初期化

        Args:
            environ: 参照する環境変数（省略時は.envを読み込んだ上でos.environ）
        """
        self.logger = logging.getLogger(__name__)
        if environ is None:
            load_dotenv()
        self._environ = environ

    @property
    def environ(self) -> Mapping[str, str]:
        return os.environ if self._environ is None else self._environ

    def load_config(self, config_path: Optional[str] = None) -> AppConfig:
        """
        設定を読み込み

        Args:
            config_path: 設定ファイルのパス（Noneの場合は検索し、見つからなければデフォルト値に環境変数だけを重ねる）

        Returns:
            AppConfigオブジェクト
        """
        try:
            if config_path is None:
                config_path = self.find_config_file()
            if config_path:
                self.logger.info(f"設定ファイルを読み込み: {config_path}")
                config_dict = self.expand_environment_variables(self._load_yaml_file(config_path))
            else:
                self.logger.info("設定ファイルが見つからないため、デフォルト設定を使用します")
                config_dict = {}

            self._validate_config_dict(config_dict)
            overrides = env_overrides(self.environ)
            for section, values in overrides.items():
                self.logger.info(f"環境変数で上書き: {section}.{', '.join(values)}")
                config_dict[section] = {**(config_dict.get(section) or {}), **values}

            app_config = AppConfig.from_dict(config_dict)
            app_config.validate()
            return app_config

        except Exception as e:
            self.logger.error(f"設定読み込みエラー: {str(e)}")
            raise ConfigLoadError(f"設定の読み込みに失敗しました: {str(e)}") from e

    def find_config_file(self) -> Optional[str]:
        """既定の場所から設定ファイルを検索"""
        for path in SEARCH_PATHS:
            if os.path.exists(os.path.expanduser(path)):
                self.logger.debug(f"設定ファイルを発見: {path}")
                return path
        return None

    def _load_yaml_file(self, file_path: str) -> Dict[str, Any]:
        try:
            with open(file_path, 'r', encoding='utf-8') as f:
                config_dict = yaml.safe_load(f)
        except yaml.YAMLError as e:
            raise ConfigLoadError(f"YAML解析エラー: {str(e)}")
        except FileNotFoundError:
            raise ConfigLoadError(f"設定ファイルが見つかりません: {file_path}")
        except PermissionError:
            raise ConfigLoadError(f"設定ファイルの読み取り権限がありません: {file_path}")

        if config_dict is None:
            return {}
        if not isinstance(config_dict, dict):
            raise ConfigLoadError("設定ファイルの形式が正しくありません（辞書である必要があります）")
        return config_dict

    def expand_environment_variables(self, value: Any) -> Any:
        """
        設定内の ${VAR} を展開

        値全体が ${VAR} の場合はYAMLのスカラーとして再解釈する（epochs: ${EPOCHS} は整数になる）。
        """
        if isinstance(value, dict):
            return {key: self.expand_environment_variables(item) for key, item in value.items()}
        if isinstance(value, list):
            return [self.expand_environment_variables(item) for item in value]
        if not isinstance(value, str):
            return value

        for name in iter_env_refs(value):
            if name not in self.environ:
                self.logger.warning(f"環境変数が設定されていません: {name}")
        expanded = expand_env_refs(value, self.environ)
        if expanded != value and ENV_PATTERN.fullmatch(value.strip()):
            return parse_scalar(expanded)
        return expanded

    def _validate_config_dict(self, config_dict: Dict[str, Any]) -> None:
        """セクションとフィールドの名前を検証（未知の名前には近い候補を示す）"""
        for section, values in config_dict.items():
            if section not in SECTION_TYPES:
                raise ConfigLoadError(f"未知のセクション: {section}. 有効な値: {list(KNOWN_SECTIONS)}")
            if values is None:
                continue
            if not isinstance(values, dict):
                raise ConfigLoadError(f"{section}設定は辞書である必要があります")
            known = section_fields(section)
            for key in values:
                if key not in known:
                    close = difflib.get_close_matches(str(key), known, n=1)
                    hint = f"（もしかして: {close[0]}）" if close else ""
                    raise ConfigLoadError(f"未知のフィールド: {section}.{key}{hint}")

    def create_default_config(self, output_path: str = "config.yaml") -> None:
        """
        デフォルト設定ファイルを作成

        Args:
            output_path: 出力先パス
        """
        try:
            body = yaml.dump(AppConfig().to_dict(), default_flow_style=False, allow_unicode=True, sort_keys=False)
            with open(output_path, 'w', encoding='utf-8') as f:
                f.write(DEFAULT_CONFIG_HEADER + body)
            self.logger.info(f"デフォルト設定ファイルを作成しました: {output_path}")
        except Exception as e:
            raise ConfigLoadError(f"デフォルト設定ファイルの作成に失敗しました: {str(e)}")

    def validate_config_file(self, config_path: str) -> Dict[str, Any]:
        """
        設定ファイルを検証

        Returns:
            is_valid, errors, warnings, missing_env_vars を持つ辞書
        """
        validation_result: Dict[str, Any] = {
            "is_valid": True,
            "errors": [],
            "warnings": [],
            "missing_env_vars": [],
        }
        errors: List[str] = validation_result["errors"]

        if not os.path.exists(config_path):
            errors.append(f"設定ファイルが存在しません: {config_path}")
        else:
            try:
                config_dict = self._load_yaml_file(config_path)
                self._validate_config_dict(config_dict)
            except ConfigLoadError as e:
                errors.append(str(e))
            else:
                missing = sorted({name for name in iter_env_refs(config_dict) if name not in self.environ})
                validation_result["missing_env_vars"] = missing
                if missing:
                    validation_result["warnings"].append(f"未設定の環境変数: {', '.join(missing)}")
                else:
                    try:
                        AppConfig.from_dict(self.expand_environment_variables(config_dict))
                    except (TypeError, ValueError) as e:
                        errors.append(f"設定値が不正です: {str(e)}")

        validation_result["is_valid"] = not errors
        return validation_result
