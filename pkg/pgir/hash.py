from pathlib import Path
import hashlib


def text_digest(text: str) -> str:
    return hashlib.sha256(text.encode("utf-8")).hexdigest()


def file_digest(path: Path, chunk_size: int = 1 << 16) -> str:
    h = hashlib.sha256()
    with Path(path).open("rb") as f:
        while chunk := f.read(chunk_size):
            h.update(chunk)
    return h.hexdigest()


def pair_id(lineage_id: str, index_a: int, index_b: int) -> str:
    # Stable across runs, used to key replay transcripts
    return f"{lineage_id}#{index_a}-{index_b}"
