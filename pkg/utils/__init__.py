# 設定・ファイル入出力・チェックポイントのユーティリティパッケージ
