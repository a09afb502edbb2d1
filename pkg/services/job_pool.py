"""
ジョブプール
グリッド探索の候補・ベンチマークのエントリ・Grad-CAMのサンプルのような独立した実験ジョブを
スレッドで並行実行し、エポック単位の進捗をログに出す
"""

import logging
import time
from concurrent.futures import ThreadPoolExecutor, as_completed
from dataclasses import dataclass
from typing import Any, Callable, Dict, Generic, List, Optional, Sequence, TypeVar


T = TypeVar("T")
R = TypeVar("R")


@dataclass
class JobOutcome(Generic[R]):
    """ジョブ1件の結果（失敗時は例外の型とメッセージを保持）"""
    key: str
    value: Optional[R] = None
    error: Optional[str] = None
    error_type: Optional[str] = None
    elapsed: float = 0.0

    @property
    def ok(self) -> bool:
        return self.error_type is None

    def describe(self) -> str:
        if self.ok:
            return f"{self.key}: 成功 ({self.elapsed:.2f}秒)"
        return f"{self.key}: {self.error_type}: {self.error}"

    def to_dict(self) -> Dict[str, Any]:
        return {
            "key": self.key,
            "ok": self.ok,
            "error": self.error,
            "error_type": self.error_type,
            "elapsed": self.elapsed,
        }


def first_failure(outcomes: Sequence[JobOutcome]) -> Optional[JobOutcome]:
    """入力順で最初の失敗"""
    return next((outcome for outcome in outcomes if not outcome.ok), None)


class JobPool:
    """実験ジョブのスレッドプール"""

    def __init__(self, max_workers: int = 1, name: str = "job"):
        """
        初期化

        Args:
            max_workers: 同時に実行するジョブ数（1の場合は呼び出し元のスレッドで逐次実行）
            name: スレッド名とログの見出し
        """
        if max_workers < 1:
            raise ValueError(f"max_workersは1以上である必要があります: {max_workers}")
        self.max_workers = max_workers
        self.name = name
        self.logger = logging.getLogger(__name__)
        self.jobs_run = 0
        self.jobs_failed = 0
        self.busy_seconds = 0.0

    def _run_one(self, key: str, job: Callable[[T], R], item: T) -> JobOutcome[R]:
        start = time.perf_counter()
        try:
            value = job(item)
        except Exception as e:
            self.logger.error(f"{self.name}の失敗 ({key}): {type(e).__name__}: {e}")
            return JobOutcome(key=key, error=str(e), error_type=type(e).__name__,
                              elapsed=time.perf_counter() - start)
        return JobOutcome(key=key, value=value, elapsed=time.perf_counter() - start)

    def map(self,
            job: Callable[[T], R],
            items: Sequence[T],
            key: Optional[Callable[[T], str]] = None,
            on_progress: Optional[Callable[[int, int], None]] = None) -> List[JobOutcome[R]]:
        """
        全アイテムにジョブを適用

        失敗したジョブは例外を送出せず結果に記録する。結果は完了順ではなく入力順。

        Args:
            job: 1件を処理する関数
            items: 入力
            key: 結果に付ける名前を作る関数（省略時は入力の位置）
            on_progress: (完了件数, 総件数) を受け取る関数

        Returns:
            入力順の結果
        """
        keys = [key(item) if key else str(index) for index, item in enumerate(items)]
        outcomes: List[Optional[JobOutcome[R]]] = [None] * len(items)
        start = time.perf_counter()

        if self.max_workers == 1 or len(items) <= 1:
            for index, item in enumerate(items):
                outcomes[index] = self._run_one(keys[index], job, item)
                if on_progress:
                    on_progress(index + 1, len(items))
        else:
            with ThreadPoolExecutor(max_workers=self.max_workers, thread_name_prefix=self.name) as executor:
                pending = {executor.submit(self._run_one, keys[i], job, item): i for i, item in enumerate(items)}
                for done, future in enumerate(as_completed(pending), 1):
                    outcomes[pending[future]] = future.result()
                    if on_progress:
                        on_progress(done, len(items))

        failed = sum(1 for outcome in outcomes if not outcome.ok)
        self.jobs_run += len(items)
        self.jobs_failed += failed
        self.busy_seconds += time.perf_counter() - start
        self.logger.info(f"{self.name}: {len(items)}件（失敗{failed}件）, 並列{self.max_workers}")
        return outcomes

    def summary(self) -> Dict[str, Any]:
        """これまでに実行したジョブの集計"""
        return {
            "jobs": self.jobs_run,
            "failed": self.jobs_failed,
            "success_rate": round(100.0 * (self.jobs_run - self.jobs_failed) / self.jobs_run, 2) if self.jobs_run else 0.0,
            "seconds": self.busy_seconds,
        }


class EpochProgress:
    """エポック単位の進捗ログ（残り時間は完了済みエポックの平均から推定）"""

    def __init__(self, total: int, label: str = "学習", min_interval: float = 1.0):
        self.total = total
        self.label = label
        self.min_interval = min_interval
        self.done = 0
        self.started = time.perf_counter()
        self._last_log = float("-inf")
        self.logger = logging.getLogger(__name__)

    def eta_seconds(self) -> Optional[float]:
        if self.done == 0:
            return None
        elapsed = time.perf_counter() - self.started
        return elapsed / self.done * (self.total - self.done)

    def advance(self, done: int, total: Optional[int] = None, detail: str = "") -> None:
        """
        進捗を更新（最終エポック以外は min_interval 秒ごとにしかログを出さない）

        Args:
            done: 完了数
            total: 総数（変わった場合）
            detail: 損失など付加情報
        """
        if total is not None:
            self.total = total
        self.done = done
        now = time.perf_counter()
        if done < self.total and now - self._last_log < self.min_interval:
            return
        self._last_log = now

        message = f"{self.label}: {self.done}/{self.total}"
        eta = self.eta_seconds()
        if eta is not None and self.done < self.total:
            message += f" - 残り約{eta:.1f}秒"
        if detail:
            message += f" - {detail}"
        self.logger.info(message)

    def finish(self) -> None:
        elapsed = time.perf_counter() - self.started
        self.logger.info(f"{self.label}完了: {self.done}/{self.total} - {elapsed:.2f}秒")
