# 学習・評価・分散学習・ベンチマークのサービスパッケージ
