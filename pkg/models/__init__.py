# モデル構成・データセット・評価指標の型定義パッケージ
