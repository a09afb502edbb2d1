#!/usr/bin/env python3
"""
複合モデルスケーリング・ベンチマークツール
メインエントリーポイント
"""

import sys
import argparse
import logging
from dataclasses import replace
from pathlib import Path
from typing import Optional

import numpy as np

from utils.config_loader import ConfigLoader, ConfigLoadError
from utils.checkpoint_io import CheckpointError, load_checkpoint, save_checkpoint
from utils.file_manager import FileManager, FileOperationError
from models.architecture import ConfigurationError
from models.config import AppConfig, DataConfig
from models.dataset import DescriptorError
from models.scaling import ScalingCoefficients
from services.benchmark_runner import (
    BenchmarkRunner, channel_suite, ladder_table_markdown, model_config_for, parse_manifest,
    prepare_datasets, resolution_suite, scale_plan, BenchmarkEntry,
)
from services.distributed import distributed_train
from services.explain import gradcam, localization_score, write_gradcam
from services.synthetic_data import synth_splits
from services.trainer import evaluate, finetune, low_data_study, predict
from services.zoo_registry import ZooRegistry


EXIT_OK = 0
EXIT_FAILURE = 1
EXIT_CONFIG = 2
EXIT_INTERRUPTED = 130


def setup_logging(level: str = "INFO", log_file: Optional[str] = None):
    """ログ設定をセットアップ"""
    log_level = getattr(logging, level.upper(), logging.INFO)

    # ログフォーマット
    formatter = logging.Formatter(
        '%(asctime)s - %(name)s - %(levelname)s - %(message)s'
    )

    # ルートロガー設定
    logger = logging.getLogger()
    logger.setLevel(log_level)

    # コンソールハンドラー
    console_handler = logging.StreamHandler()
    console_handler.setFormatter(formatter)
    logger.addHandler(console_handler)

    # ファイルハンドラー（指定されている場合）
    if log_file:
        file_handler = logging.FileHandler(log_file, encoding='utf-8')
        file_formatter = logging.Formatter(
            '%(asctime)s - %(name)s - %(levelname)s - %(funcName)s:%(lineno)d - %(message)s'
        )
        file_handler.setFormatter(file_formatter)
        logger.addHandler(file_handler)


def create_argument_parser() -> argparse.ArgumentParser:
    """コマンドライン引数パーサーを作成"""
    parser = argparse.ArgumentParser(
        description="複合モデルスケーリング・ベンチマークツール",
        formatter_class=argparse.RawDescriptionHelpFormatter,
        epilog="""
使用例:
  %(prog)s scale-plan --model WRNB0-ECA           # B0〜B7のスケールラダー
  %(prog)s synth --n-train 2000 --n-test 500      # 合成データセットを書き出し
  %(prog)s train --model WRNB0-ECA --workers 4    # 4ワーカーで学習
  %(prog)s eval --checkpoint out/WRNB0-ECA.szoo   # チェックポイントを評価
  %(prog)s bench --manifest suite.json            # ベンチマークを実行
  %(prog)s gradcam --checkpoint out/WRNB0-ECA.szoo --samples 4
  %(prog)s zoo list                               # モデルズーの一覧
  %(prog)s config --validate                      # 設定検証
        """
    )

    # 共通オプション
    parser.add_argument(
        "-c", "--config",
        help="設定ファイルのパス（デフォルト: config.yaml）"
    )
    parser.add_argument(
        "-v", "--verbose",
        action="store_true",
        help="詳細ログを出力"
    )
    parser.add_argument(
        "--log-file",
        help="ログファイルのパス"
    )
    parser.add_argument(
        "--seed",
        type=int,
        help="乱数シード（学習のシャッフルと重みの初期化）"
    )
    parser.add_argument(
        "--workers",
        type=int,
        help="分散学習のワーカー数"
    )
    parser.add_argument(
        "--out",
        help="出力ディレクトリ"
    )
    parser.add_argument(
        "--precision",
        choices=["f32", "f64"],
        help="計算精度"
    )

    # サブコマンド
    subparsers = parser.add_subparsers(dest="command", help="利用可能なコマンド")

    # scale-planコマンド
    plan_parser = subparsers.add_parser("scale-plan", help="スケールラダーを表示")
    plan_parser.add_argument("--model", default="WRNB0-ECA", help="基本モデル名（デフォルト: WRNB0-ECA）")
    plan_parser.add_argument("--alpha", type=float, help="深さ係数α")
    plan_parser.add_argument("--beta", type=float, help="幅係数β")
    plan_parser.add_argument("--gamma", type=float, help="解像度係数γ")
    plan_parser.add_argument("--max-phi", type=int, default=7, help="最大のφ（デフォルト: 7）")

    # trainコマンド
    train_parser = subparsers.add_parser("train", help="モデルを学習")
    train_parser.add_argument("--model", default="WRNB0-ECA", help="モデル名")
    train_parser.add_argument("--epochs", type=int, help="エポック数")
    train_parser.add_argument("--checkpoint", help="保存先（デフォルト: <out>/<モデル名>.szoo）")
    train_parser.add_argument("--from-checkpoint", help="このチェックポイントから転移学習する")
    train_parser.add_argument("--freeze-backbone", action="store_true", help="転移学習時にヘッド以外を固定")
    train_parser.add_argument("--low-data", type=float, nargs="+", metavar="FRACTION",
                              help="転移学習と初期状態からの学習を指定の割合のデータで比較")
    train_parser.add_argument("--export", action="store_true", help="学習済みモデルをズーにエクスポート")

    # evalコマンド
    eval_parser = subparsers.add_parser("eval", help="チェックポイントを評価")
    eval_source = eval_parser.add_mutually_exclusive_group(required=True)
    eval_source.add_argument("--checkpoint", help="チェックポイントのパス")
    eval_source.add_argument("--zoo-name", help="ズーに登録されたモデル名")

    # benchコマンド
    bench_parser = subparsers.add_parser("bench", help="ベンチマークを実行")
    bench_source = bench_parser.add_mutually_exclusive_group(required=True)
    bench_source.add_argument("--manifest", help="マニフェスト（JSON）のパス")
    bench_source.add_argument("--suite", choices=["resolution", "channels"], help="アブレーションのスイート")
    bench_parser.add_argument("--model", default="WRNB0-ECA", help="スイートのモデル名")
    bench_parser.add_argument("--parallel-entries", type=int, default=1, help="同時に実行するエントリ数")
    bench_parser.add_argument("--mask-timing", action="store_true", help="時間に依存する列を伏せる")
    bench_parser.add_argument("--export", action="store_true", help="学習済みモデルをズーにエクスポート")

    # gradcamコマンド
    cam_parser = subparsers.add_parser("gradcam", help="Grad-CAMヒートマップを出力")
    cam_parser.add_argument("--checkpoint", required=True, help="チェックポイントのパス")
    cam_parser.add_argument("--samples", type=int, default=4, help="評価データの先頭から処理する件数")
    cam_parser.add_argument("--class-index", type=int, help="対象クラス（省略時は確率最大のクラス）")

    # zooコマンド
    zoo_parser = subparsers.add_parser("zoo", help="モデルズー管理")
    zoo_parser.add_argument("action", choices=["list", "manifest", "export", "import"], help="操作")
    zoo_parser.add_argument("--name", help="登録名")
    zoo_parser.add_argument("--checkpoint", help="エクスポートするチェックポイント / インポート先")

    # synthコマンド
    synth_parser = subparsers.add_parser("synth", help="合成データセットを書き出し")
    synth_parser.add_argument("--n-train", type=int, help="学習用サンプル数")
    synth_parser.add_argument("--n-test", type=int, help="評価用サンプル数")
    synth_parser.add_argument("--resolution", type=int, help="解像度")
    synth_parser.add_argument("--classes", type=int, help="クラス数")
    synth_parser.add_argument("--mode", choices=["rgb", "rgb_nir", "all", "mm"], help="チャネルモード")

    # configコマンド
    config_parser = subparsers.add_parser("config", help="設定管理")
    config_group = config_parser.add_mutually_exclusive_group(required=True)
    config_group.add_argument(
        "--validate",
        action="store_true",
        help="設定ファイルを検証"
    )
    config_group.add_argument(
        "--create",
        action="store_true",
        help="デフォルト設定ファイルを作成"
    )
    config_group.add_argument(
        "--show",
        action="store_true",
        help="現在の設定を表示"
    )
    config_parser.add_argument(
        "--output",
        help="出力ファイルのパス（--createで使用）"
    )

    return parser


def load_config(config_path: Optional[str]) -> AppConfig:
    """設定を読み込み"""
    config_loader = ConfigLoader()
    return config_loader.load_config(config_path)


def apply_overrides(config: AppConfig, args) -> AppConfig:
    """共通オプションで設定を上書き"""
    if args.seed is not None:
        config.training = replace(config.training, seed=args.seed)
    if args.workers is not None:
        config.distributed = replace(config.distributed, workers=args.workers)
    if args.out:
        config.output = replace(config.output, directory=args.out)
    if args.precision:
        config.engine = replace(config.engine, precision=args.precision)
    return config


def model_dtype(config: AppConfig) -> type:
    return np.float64 if config.engine.precision == "f64" else np.float32


def aligned_data_config(config: AppConfig, model_config) -> DataConfig:
    """モデルの入力形状に合わせたデータ設定"""
    return replace(config.data, resolution=model_config.resolution, num_classes=model_config.num_classes)


def print_metrics(report) -> None:
    summary = report.summary()
    print(f"  Accuracy: {summary['accuracy']:.2f}%")
    print(f"  Precision: {summary['precision']:.2f}%")
    print(f"  Recall: {summary['recall']:.2f}%")
    print(f"  F-Score: {summary['f_score']:.2f}% (マクロ {summary['macro_f']:.2f}%)")
    if report.inference_rate is not None:
        print(f"  推論速度: {report.inference_rate:.1f}画像/秒")
    if report.degenerate_flags:
        print(f"  ⚠️  縮退したスコア: {', '.join(report.degenerate_flags)}")


def command_scale_plan(args, config: AppConfig) -> int:
    """スケールラダーコマンドの実行"""
    coefficients = None
    if any(value is not None for value in (args.alpha, args.beta, args.gamma)):
        if None in (args.alpha, args.beta, args.gamma):
            print("❌ --alpha, --beta, --gammaは全て指定してください", file=sys.stderr)
            return EXIT_CONFIG
        try:
            coefficients = ScalingCoefficients.checked(args.alpha, args.beta, args.gamma)
        except ValueError as e:
            print(f"❌ 係数が不正です: {e}", file=sys.stderr)
            return EXIT_CONFIG
    rows = scale_plan(args.model, coefficients, range(args.max_phi + 1))

    table = ladder_table_markdown(rows)
    print(table)
    file_manager = FileManager(config.output.directory)
    safe_name = args.model.replace("/", "_")
    file_manager.atomic_write(f"scale_plan_{safe_name}.md", table)
    path = file_manager.write_csv(f"scale_plan_{safe_name}.csv", [row.to_row() for row in rows])
    print(f"📄 スケールラダー: {path}")
    return EXIT_OK


def command_train(args, config: AppConfig) -> int:
    """学習コマンドの実行"""
    training = config.training if args.epochs is None else replace(config.training, epochs=args.epochs)
    dtype = model_dtype(config)
    file_manager = FileManager(config.output.directory)

    print("📦 データを準備中...")
    train_set, test_set = prepare_datasets(config.data)
    print(f"  学習: {len(train_set)}件, 評価: {len(test_set)}件, "
          f"{train_set.descriptor.channels}チャネル, {train_set.descriptor.resolution}px")

    if args.low_data:
        if not args.from_checkpoint:
            print("❌ --low-dataには--from-checkpointが必要です", file=sys.stderr)
            return EXIT_CONFIG
        rows = low_data_study(args.from_checkpoint, train_set, test_set, training, fractions=tuple(args.low_data),
                              freeze_backbone=args.freeze_backbone, tau=training.threshold)
        path = file_manager.write_csv("low_data_study.csv", [row.to_row() for row in rows])
        for row in rows:
            print(f"  {row.fraction:.0%} シード{row.seed}: 転移 {row.pretrained_f:.2f} / 初期 {row.scratch_f:.2f} "
                  f"(差 {row.gain:+.2f})")
        print(f"📄 低データ比較: {path}")
        return EXIT_OK

    if args.from_checkpoint:
        print(f"🔁 転移学習: {args.from_checkpoint}")
        model, stats = finetune(args.from_checkpoint, train_set, train_set.descriptor.num_classes,
                                args.freeze_backbone, training, seed=training.seed, dtype=dtype)
        train_rows = stats.to_csv_rows()
        wall_time = stats.wall_time
    else:
        model_config = model_config_for(args.model, train_set)
        pool = config.distributed
        print(f"🚀 学習を開始します: {model_config.name} ({pool.workers}ワーカー × バッチ{pool.per_worker_batch})")
        model, stats = distributed_train(model_config, train_set, pool, training, seed=training.seed, dtype=dtype)
        train_rows = stats.train.to_csv_rows()
        wall_time = stats.train.wall_time

    report = evaluate(model, test_set, tau=training.threshold) if len(test_set) else None
    name = model.config.name or args.model
    checkpoint_path = args.checkpoint or Path(config.output.directory) / f"{name.replace('/', '_')}.szoo"
    metadata = {"metrics": report.summary() if report else {}, "training_seconds": wall_time}
    save_checkpoint(model, checkpoint_path, metadata=metadata, file_manager=file_manager)
    file_manager.write_csv(f"{name.replace('/', '_')}_train.csv", train_rows)

    print(f"✅ 学習完了: {wall_time:.1f}秒")
    if report:
        print_metrics(report)
    print(f"💾 チェックポイント: {checkpoint_path}")

    if args.export:
        zoo = ZooRegistry(Path(config.output.directory) / "zoo")
        entry = zoo.export(model, metrics=report.summary() if report else {})
        print(f"📚 ズーにエクスポートしました: {entry.name}")
    return EXIT_OK


def command_eval(args, config: AppConfig) -> int:
    """評価コマンドの実行"""
    dtype = model_dtype(config)
    if args.zoo_name:
        model = ZooRegistry(Path(config.output.directory) / "zoo").import_model(args.zoo_name, dtype=dtype)
    else:
        model = load_checkpoint(args.checkpoint, dtype=dtype)

    _, test_set = prepare_datasets(aligned_data_config(config, model.config))
    report = evaluate(model, test_set, tau=config.training.threshold)
    print(f"📊 評価結果: {model.config.name or model.config.family} ({len(test_set)}件)")
    print_metrics(report)

    file_manager = FileManager(config.output.directory)
    name = (model.config.name or model.config.family).replace("/", "_")
    file_manager.write_csv(f"{name}_eval.csv", report.to_csv_rows())
    path = file_manager.atomic_write(f"{name}_classes.md", report.class_table_markdown())
    print(f"📄 クラス毎のFスコア: {path}")
    return EXIT_OK


def command_bench(args, config: AppConfig) -> int:
    """ベンチマークコマンドの実行"""
    if args.manifest:
        manifest = FileManager().read_json(args.manifest)
        entries = parse_manifest(manifest, defaults=config)
    else:
        template = BenchmarkEntry(model=args.model, training=config.training, data=config.data,
                                  workers=config.distributed.workers,
                                  topology=config.distributed.reduction_topology)
        suite = resolution_suite if args.suite == "resolution" else channel_suite
        entries = suite(args.model, template=template)

    zoo = ZooRegistry(Path(config.output.directory) / "zoo") if args.export else None
    runner = BenchmarkRunner(config, parallel_entries=args.parallel_entries, zoo=zoo)
    print(f"🚀 ベンチマークを開始します: {len(entries)}エントリ")
    result = runner.run_benchmark(entries)
    markdown_path, csv_path = runner.write_reports(result, mask_timing=args.mask_timing)

    summary = result.get_summary()
    if summary["failed_entries"] == 0:
        print(f"✅ ベンチマーク完了: {summary['successful_entries']}/{summary['total_entries']}エントリ")
    else:
        print(f"⚠️  ベンチマーク完了（一部エラー）: {summary['successful_entries']}/{summary['total_entries']}エントリ")
        for error in result.errors:
            print(f"   - {error}")
    print(f"📄 レポート: {markdown_path}, {csv_path}")
    return result.exit_code


def command_gradcam(args, config: AppConfig) -> int:
    """Grad-CAMコマンドの実行"""
    model = load_checkpoint(args.checkpoint, dtype=model_dtype(config))
    _, test_set = prepare_datasets(aligned_data_config(config, model.config))
    count = min(args.samples, len(test_set))
    file_manager = FileManager(Path(config.output.directory) / "gradcam")

    probabilities, _ = predict(model, test_set.subset(range(count)))
    scores = []
    for index in range(count):
        sample = test_set[index]
        class_index = args.class_index
        if class_index is None:
            class_index = int(np.argmax(probabilities[index]))
        result = gradcam(model, sample, class_index)
        write_gradcam(result, f"{sample.id}_{class_index}", file_manager, sample.labels, config.training.threshold)
        line = f"  {sample.id}: {result.class_name} (確率 {result.probability:.3f})"
        if sample.masks is not None and class_index in sample.labels:
            score = localization_score(result.heatmap, sample.masks[class_index])
            scores.append(score)
            line += f", 局在化 {score:.2f}"
        print(line)

    if scores:
        print(f"📍 平均局在化スコア: {float(np.mean(scores)):.3f}")
    print(f"📄 ヒートマップ: {file_manager.root}")
    return EXIT_OK


def command_zoo(args, config: AppConfig) -> int:
    """ズーコマンドの実行"""
    zoo = ZooRegistry(Path(config.output.directory) / "zoo")
    if args.action == "list":
        print(f"📚 モデルズー: {zoo.root}")
        for row in zoo.list_models():
            mark = "✅" if row["exported"] else "  "
            print(f"  {mark} {row['name']:<28} {row['family']:<12} {row['resolution']:>4}px {row['param_count']:>12,}")
        return EXIT_OK
    if args.action == "manifest":
        path = zoo.write_manifest()
        print(f"📄 マニフェスト: {path}")
        return EXIT_OK
    if args.action == "export":
        if not args.checkpoint:
            print("❌ exportには--checkpointが必要です", file=sys.stderr)
            return EXIT_CONFIG
        model = load_checkpoint(args.checkpoint)
        entry = zoo.export(model, name=args.name)
        print(f"✅ エクスポートしました: {entry.name} → {zoo.root / entry.checkpoint}")
        return EXIT_OK

    if not args.name:
        print("❌ importには--nameが必要です", file=sys.stderr)
        return EXIT_CONFIG
    model = zoo.import_model(args.name, dtype=model_dtype(config))
    target = args.checkpoint or Path(config.output.directory) / ZooRegistry.checkpoint_filename(args.name)
    save_checkpoint(model, target, metadata={"zoo_name": args.name, "metrics": zoo.entries[args.name].metrics})
    print(f"✅ インポートしました: {args.name} → {target}")
    return EXIT_OK


def command_synth(args, config: AppConfig) -> int:
    """合成データコマンドの実行"""
    data = config.data
    overrides = {
        "n_train": args.n_train, "n_test": args.n_test, "resolution": args.resolution,
        "num_classes": args.classes, "channel_mode": args.mode,
    }
    data = replace(data, **{key: value for key, value in overrides.items() if value is not None})
    train_set, test_set = synth_splits(
        data.n_train, data.n_test, seed=data.seed, num_classes=data.num_classes,
        resolution=data.resolution, noise=data.noise, mode=data.channel_mode,
    )
    root = Path(data.root or Path(config.output.directory) / "data")
    file_manager = FileManager()
    file_manager.write_dataset(train_set, root / "train")
    file_manager.write_dataset(test_set, root / "test")
    print(f"✅ 合成データを書き出しました: {root} (学習 {len(train_set)}件, 評価 {len(test_set)}件)")
    return EXIT_OK


def command_config(args, config_path: Optional[str]) -> int:
    """設定コマンドの実行"""
    config_loader = ConfigLoader()

    if args.validate:
        # 設定検証
        if not config_path:
            config_path = config_loader.find_config_file()
            if not config_path:
                print("❌ 設定ファイルが見つかりません", file=sys.stderr)
                return EXIT_CONFIG

        print(f"🔍 設定ファイルを検証中: {config_path}")
        validation = config_loader.validate_config_file(config_path)

        if validation["is_valid"]:
            print("✅ 設定ファイルは有効です")
        else:
            print("❌ 設定ファイルに問題があります")

            if validation["errors"]:
                print("\nエラー:")
                for error in validation["errors"]:
                    print(f"  - {error}")

        if validation["warnings"]:
            print("\n警告:")
            for warning in validation["warnings"]:
                print(f"  - {warning}")

        if validation["missing_env_vars"]:
            print(f"\n未設定の環境変数: {', '.join(validation['missing_env_vars'])}")

        return EXIT_OK if validation["is_valid"] else EXIT_CONFIG

    elif args.create:
        # デフォルト設定作成
        output_path = args.output or "config.yaml"
        print(f"📝 デフォルト設定ファイルを作成中: {output_path}")

        config_loader.create_default_config(output_path)
        print("✅ デフォルト設定ファイルを作成しました")
        return EXIT_OK

    # 現在の設定表示
    config = load_config(config_path)

    print("📋 現在の設定:")
    print(f"  精度: {config.engine.precision}")
    print(f"  エポック数: {config.training.epochs}, 学習率: {config.training.base_lr:g}, "
          f"バッチ: {config.training.batch_size}")
    print(f"  ワーカー数: {config.distributed.workers} ({config.distributed.reduction_topology})")
    print(f"  データ: {config.data.root or '合成'} ({config.data.channel_mode}, {config.data.resolution}px)")
    print(f"  出力: {config.output.directory}")
    print(f"  Log Level: {config.logging.level}")

    # 包括的検証結果も表示
    validation_summary = config.get_validation_summary()
    print(f"\n{validation_summary}")
    return EXIT_OK


COMMANDS = {
    "scale-plan": command_scale_plan,
    "train": command_train,
    "eval": command_eval,
    "bench": command_bench,
    "gradcam": command_gradcam,
    "zoo": command_zoo,
    "synth": command_synth,
}


def main(argv=None) -> int:
    """メイン関数"""
    try:
        parser = create_argument_parser()
        args = parser.parse_args(argv)

        # コマンドが指定されていない場合
        if not args.command:
            parser.print_help()
            return EXIT_FAILURE

        # 設定コマンドは特別扱い（設定ファイルが不要な場合があるため）
        if args.command == "config":
            setup_logging("DEBUG" if args.verbose else "INFO", args.log_file)
            return command_config(args, args.config)

        config = apply_overrides(load_config(args.config), args)

        # ログレベル設定
        log_level = "DEBUG" if args.verbose else config.logging.level
        setup_logging(log_level, args.log_file or config.logging.file)

        # 設定の包括的検証
        validation = config.validate_comprehensive()
        if not validation["is_valid"]:
            print("❌ 設定に問題があります:", file=sys.stderr)
            for error in validation["errors"]:
                print(f"  - {error}", file=sys.stderr)
            return EXIT_CONFIG

        # 警告があれば表示
        if validation["warnings"]:
            print("⚠️  警告:")
            for warning in validation["warnings"]:
                print(f"  - {warning}")

        return COMMANDS[args.command](args, config)

    except KeyboardInterrupt:
        print("\n⚠️  操作がキャンセルされました", file=sys.stderr)
        return EXIT_INTERRUPTED
    except (ConfigLoadError, ConfigurationError, DescriptorError) as e:
        print(f"❌ 設定エラー: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except (CheckpointError, FileOperationError) as e:
        print(f"❌ ファイルエラー: {e}", file=sys.stderr)
        return EXIT_FAILURE
    except Exception as e:
        print(f"❌ 予期しないエラーが発生しました: {e}", file=sys.stderr)
        logging.getLogger(__name__).exception("予期しないエラー")
        return EXIT_FAILURE


if __name__ == "__main__":
    sys.exit(main())
