"""
嵌入索引存储
单个 SQLite 文件：meta 表（格式版本、C、K、条数）+ embeddings 表（每行一张图像）
每行向量为 float32 小端 blob，依次为 global、foreground、K 个部件，共 (2+K)·C 个数
"""
import logging
import sqlite3
from contextlib import contextmanager
from pathlib import Path
from typing import Optional

import numpy as np

from .errors import DataError, DimensionError
from .retrieval import EmbeddingIndex

logger = logging.getLogger(__name__)

FORMAT_VERSION = 1
_DTYPE = np.dtype("<f4")


class EmbeddingIndexStore:
    """嵌入索引文件管理器"""

    def __init__(self, db_path):
        """
        Args:
            db_path: 索引文件路径（不存在时创建）
        """
        self.db_path = Path(db_path)
        self.db_path.parent.mkdir(parents=True, exist_ok=True)
        self._ensure_tables()

    @contextmanager
    def get_connection(self):
        """
        数据库连接上下文：正常退出提交，异常回滚

        Yields:
            sqlite3.Connection
        """
        conn = sqlite3.connect(str(self.db_path))
        conn.row_factory = sqlite3.Row
        try:
            yield conn
            conn.commit()
        except Exception as e:
            conn.rollback()
            logger.error(f"索引文件操作失败: {e}")
            raise
        finally:
            conn.close()

    def _ensure_tables(self):
        with self.get_connection() as conn:
            cursor = conn.cursor()
            cursor.execute("""
                CREATE TABLE IF NOT EXISTS meta (
                    key TEXT PRIMARY KEY,
                    value INTEGER NOT NULL
                )
            """)
            cursor.execute("""
                CREATE TABLE IF NOT EXISTS embeddings (
                    id INTEGER PRIMARY KEY AUTOINCREMENT,
                    identity INTEGER NOT NULL,
                    camera INTEGER NOT NULL,
                    split TEXT NOT NULL,
                    image_path TEXT,
                    visibility TEXT NOT NULL,
                    vectors BLOB NOT NULL
                )
            """)
            cursor.execute("""
                CREATE INDEX IF NOT EXISTS idx_split
                ON embeddings(split)
            """)
            cursor.execute("""
                CREATE INDEX IF NOT EXISTS idx_identity
                ON embeddings(identity)
            """)

    def header(self) -> Optional[dict]:
        """
        Returns:
            dict: {format_version, embed_dim, num_parts, count}；空文件返回 None
        """
        with self.get_connection() as conn:
            rows = conn.execute("SELECT key, value FROM meta").fetchall()
        if not rows:
            return None
        return {row["key"]: row["value"] for row in rows}

    def append(self, index: EmbeddingIndex, split: str) -> int:
        """
        追加一批嵌入

        Args:
            index: 检索索引（BN 之后的嵌入）
            split: 划分名（query / gallery / train）

        Returns:
            int: 追加后的总条数

        Raises:
            DimensionError: 与已有文件的 C 或 K 不一致
        """
        header = self.header()
        if header is not None:
            if header["format_version"] != FORMAT_VERSION:
                raise DataError(f"索引文件版本 {header['format_version']} 不受支持")
            if (header["embed_dim"], header["num_parts"]) != (index.embed_dim, index.num_parts):
                raise DimensionError(
                    f"追加的嵌入 [K={index.num_parts}, C={index.embed_dim}] 与索引文件 "
                    f"[K={header['num_parts']}, C={header['embed_dim']}] 不一致"
                )

        paths = index.image_paths or [None] * len(index)
        records = []
        for i in range(len(index)):
            vectors = np.concatenate([
                index.global_emb[i][None], index.foreground_emb[i][None], index.part_embs[i]
            ]).astype(_DTYPE)
            bits = "".join("1" if v else "0" for v in index.visibility[i])
            records.append((int(index.identities[i]), int(index.cameras[i]), split,
                            paths[i], bits, vectors.tobytes()))

        with self.get_connection() as conn:
            conn.executemany(
                "INSERT INTO embeddings (identity, camera, split, image_path, visibility, vectors) "
                "VALUES (?, ?, ?, ?, ?, ?)",
                records,
            )
            count = conn.execute("SELECT COUNT(*) FROM embeddings").fetchone()[0]
            for key, value in (("format_version", FORMAT_VERSION), ("embed_dim", index.embed_dim),
                               ("num_parts", index.num_parts), ("count", count)):
                conn.execute("INSERT OR REPLACE INTO meta (key, value) VALUES (?, ?)", (key, value))

        logger.info(f"已写入 {len(records)} 条 {split} 嵌入，索引共 {count} 条")
        return count

    def load(self, split: Optional[str] = None) -> EmbeddingIndex:
        """
        读取索引（按写入顺序）

        Args:
            split: 只读取某个划分，None 读取全部
        """
        header = self.header()
        if header is None:
            raise DataError(f"索引文件为空: {self.db_path}")
        c, k = header["embed_dim"], header["num_parts"]

        query = "SELECT identity, camera, image_path, visibility, vectors FROM embeddings"
        params = ()
        if split is not None:
            query += " WHERE split = ?"
            params = (split,)
        query += " ORDER BY id"
        with self.get_connection() as conn:
            rows = conn.execute(query, params).fetchall()

        if not rows:
            raise DataError(f"索引文件中没有 {split or '任何'} 记录")
        vectors = np.stack([np.frombuffer(r["vectors"], dtype=_DTYPE).reshape(2 + k, c) for r in rows])
        return EmbeddingIndex(
            global_emb=vectors[:, 0].copy(),
            foreground_emb=vectors[:, 1].copy(),
            part_embs=vectors[:, 2:].copy(),
            visibility=np.array([[b == "1" for b in r["visibility"]] for r in rows], dtype=bool).reshape(-1, k),
            identities=np.array([r["identity"] for r in rows], dtype=np.int64),
            cameras=np.array([r["camera"] for r in rows], dtype=np.int64),
            image_paths=[r["image_path"] or "" for r in rows],
        )

    def merge_from(self, other: "EmbeddingIndexStore") -> int:
        """把另一个索引文件的全部记录追加到本文件"""
        with other.get_connection() as conn:
            splits = [r[0] for r in conn.execute("SELECT DISTINCT split FROM embeddings ORDER BY split")]
        count = self.header()["count"] if self.header() else 0
        for split in splits:
            count = self.append(other.load(split), split)
        return count
