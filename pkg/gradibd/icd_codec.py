# icd_codec.py
"""ICD code truncation and the integer vocabulary built on top of it.

Codes are reduced to their 3-character chapter (``"K50.90"`` -> ``"K50"``),
uppercased, and mapped to dense ids in lexicographic order. The id after the
last code is reserved for codes never seen while building the vocabulary.
"""
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, Iterable, List, Tuple, Union
import logging

from gradibd.errors import EmptyCode, ParseError, ShortCode

logger = logging.getLogger(__name__)

CHAPTER_LENGTH = 3
UNK_TOKEN = "<UNK>"


def truncate_code(raw: str) -> str:
    """Return the uppercased chapter prefix of a raw ICD code.

    Raises:
        EmptyCode: If the code is blank.
        ShortCode: If fewer than 3 characters remain after trimming.
    """
    code = raw.strip()
    if not code:
        raise EmptyCode(f"empty diagnosis code {raw!r}")
    if len(code) < CHAPTER_LENGTH:
        raise ShortCode(f"diagnosis code {raw!r} is shorter than {CHAPTER_LENGTH} characters")
    return code[:CHAPTER_LENGTH].upper()


@dataclass(frozen=True)
class CodeVocab:
    """Immutable chapter vocabulary; ``unk_id`` is always the last slot."""
    codes: Tuple[str, ...]
    index: Dict[str, int] = field(init=False, repr=False, compare=False)

    def __post_init__(self) -> None:
        index: Dict[str, int] = {}
        for i, code in enumerate(self.codes):
            if len(code) != CHAPTER_LENGTH:
                raise ShortCode(f"vocabulary entry {code!r} is not a {CHAPTER_LENGTH}-character chapter")
            if code in index:
                raise ParseError(f"duplicate vocabulary entry {code!r}", line_no=i + 1)
            index[code] = i
        object.__setattr__(self, "index", index)

    @property
    def unk_id(self) -> int:
        return len(self.codes)

    @property
    def n(self) -> int:
        """Vocabulary size N including the UNK slot."""
        return len(self.codes) + 1

    def encode(self, raw: str) -> int:
        return self.index.get(truncate_code(raw), self.unk_id)

    def decode(self, code_id: int) -> str:
        if code_id == self.unk_id:
            return UNK_TOKEN
        if not 0 <= code_id < len(self.codes):
            raise IndexError(f"code id {code_id} outside vocabulary of size {self.n}")
        return self.codes[code_id]

    def save(self, path: Union[str, Path]) -> None:
        """Write one chapter per line in id order; UNK stays implicit."""
        path = Path(path)
        path.parent.mkdir(exist_ok=True, parents=True)
        path.write_text("".join(f"{code}\n" for code in self.codes), encoding="utf-8")

    @classmethod
    def load(cls, path: Union[str, Path]) -> "CodeVocab":
        """Read a vocabulary file; each line is normalized with ``truncate_code``.

        Raises:
            ParseError: On a listed UNK, a line too short to be a chapter, or a
                line that repeats an earlier one after normalization.
        """
        codes: List[str] = []
        for line_no, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), start=1):
            if not line.strip():
                continue
            if line.strip() == UNK_TOKEN:
                raise ParseError("UNK is implicit and must not be listed", line_no=line_no)
            try:
                code = truncate_code(line)
            except ShortCode as e:
                raise ParseError(str(e), line_no=line_no) from None
            if code in codes:
                raise ParseError(f"duplicate vocabulary entry {code!r}", line_no=line_no)
            codes.append(code)
        logger.info(f"Loaded vocabulary of {len(codes)} codes from {path}")
        return cls(tuple(codes))


def build_vocab(corpus: Iterable[str]) -> CodeVocab:
    """Build a vocabulary from raw codes; duplicates and order do not matter."""
    return CodeVocab(tuple(sorted({truncate_code(raw) for raw in corpus})))


def encode(vocab: CodeVocab, raw: str) -> int:
    """Map a raw code to its id, falling back to ``vocab.unk_id``."""
    return vocab.encode(raw)
