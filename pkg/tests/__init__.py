# Notion-Obsidian同期のためのテストパッケージ