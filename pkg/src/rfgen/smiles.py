"""SMILES-style string handling: tokenization, syntactic validation,
descriptors, a dedup normal form, and token n-gram fingerprints.

Validation here is purely syntactic (token grammar, paren balance, ring
pairing, bracket well-formedness). It is a decidable stand-in for real
chemical validity: strings it accepts are well-formed, not necessarily
sensible molecules. Likewise the n-gram fingerprint stands in for
circular substructure fingerprints while preserving Tanimoto structure.
"""

from __future__ import annotations

import hashlib
import re
from dataclasses import dataclass, field
from functools import lru_cache
from importlib import resources
from typing import Dict, Iterable, List, Optional, Sequence, Tuple

import numpy as np

__all__ = [
    "GO_TOKEN",
    "EOS_TOKEN",
    "Vocabulary",
    "MolString",
    "Fingerprint",
    "tokenize",
    "detokenize",
    "validate",
    "analyze",
    "descriptors",
    "normal_form",
    "fingerprint",
    "tanimoto",
    "read_corpus",
    "bundled_corpus",
    "bundled_mutations",
]

GO_TOKEN = "<GO>"
EOS_TOKEN = "<EOS>"

# Multi-character tokens; everything not matched here becomes a single char.
_TOKEN_RE = re.compile(r"(\[[^\]]*\]|Br|Cl|%\d\d)")

_ORGANIC_ATOMS = frozenset("B C N O P S F I Br Cl".split())
_AROMATIC_ATOMS = frozenset("b c n o p s".split())
_BOND_TOKENS = frozenset("-=#/\\:")
_RING_DIGITS = frozenset("0123456789")


def tokenize(s: str) -> List[str]:
    """Split a string into SMILES tokens.

    Bracket atoms ``[...]``, two-letter halogens (Cl, Br) and ``%nn`` ring
    closures come out as single tokens; every other character is its own
    token. The split is lossless: ``detokenize(tokenize(s)) == s`` for any
    string. An unterminated ``[`` swallows the rest of the string as one
    token, which the validator then rejects.
    """
    tokens: List[str] = []
    i = 0
    n = len(s)
    while i < n:
        m = _TOKEN_RE.match(s, i)
        if m:
            tokens.append(m.group(0))
            i = m.end()
        elif s[i] == "[":
            # no closing bracket anywhere ahead
            tokens.append(s[i:])
            break
        else:
            tokens.append(s[i])
            i += 1
    return tokens


def detokenize(tokens: Iterable[str]) -> str:
    return "".join(tokens)


def _is_bracket(token: str) -> bool:
    return token.startswith("[")


def _is_atom(token: str) -> bool:
    return token in _ORGANIC_ATOMS or token in _AROMATIC_ATOMS or _is_bracket(token)


def _is_ring(token: str) -> bool:
    return token in _RING_DIGITS or (token.startswith("%") and len(token) == 3)


def _bracket_element(token: str) -> str:
    """Element symbol inside a bracket atom, e.g. '[13cH+]' -> 'c'."""
    body = token[1:-1] if token.endswith("]") else token[1:]
    body = body.lstrip("0123456789")
    m = re.match(r"([A-Za-z][a-z]?)", body)
    return m.group(1) if m else ""


def _atom_element(token: str) -> str:
    if _is_bracket(token):
        return _bracket_element(token)
    return token


def _is_aromatic_atom(token: str) -> bool:
    if token in _AROMATIC_ATOMS:
        return True
    if _is_bracket(token):
        el = _bracket_element(token)
        return bool(el) and el[0].islower()
    return False


def validate(tokens: Sequence[str], valence_check: bool = False) -> Tuple[bool, List[str]]:
    """Syntactic validity check. Returns (is_valid, diagnostics).

    Rules: every token must be known (atom, bond, paren or ring closure);
    brackets well-formed; parentheses balanced, non-empty and attached to
    an atom; every ring index opened and closed in pairs (indexes may be
    reused after closing); bond symbols must sit between an atom/ring/')'
    and an atom/ring; at least one atom. The optional valence check counts
    explicit bond orders for plain C/N/O atoms (<=4/3/2); it is off by
    default because aromatic forms trip it without full perception.
    """
    diags: List[str] = []
    tokens = list(tokens)
    if not tokens:
        return False, ["empty string"]

    for t in tokens:
        if _is_bracket(t):
            if not t.endswith("]"):
                diags.append(f"unterminated bracket atom {t!r}")
            elif len(t) <= 2:
                diags.append("empty bracket atom")
            elif not _bracket_element(t):
                diags.append(f"bracket atom {t!r} has no element symbol")
        elif _is_atom(t) or _is_ring(t) or t in _BOND_TOKENS or t in "()":
            continue
        else:
            diags.append(f"unknown token {t!r}")
    if diags:
        return False, diags

    depth = 0
    open_rings: Dict[str, int] = {}
    prev: Optional[str] = None
    n_atoms = 0
    for pos, t in enumerate(tokens):
        if _is_atom(t):
            n_atoms += 1
        elif t == "(":
            depth += 1
            if prev is None or not (_is_atom(prev) or _is_ring(prev) or prev == ")"):
                diags.append(f"branch at position {pos} does not follow an atom")
        elif t == ")":
            depth -= 1
            if depth < 0:
                diags.append(f"unbalanced ')' at position {pos}")
                depth = 0
            if prev == "(":
                diags.append(f"empty branch at position {pos}")
        elif t in _BOND_TOKENS:
            if prev is None:
                diags.append("bond symbol at start of string")
            elif not (_is_atom(prev) or _is_ring(prev) or prev == ")"):
                diags.append(f"bond at position {pos} does not follow an atom")
        elif _is_ring(t):
            if prev is None or not (
                _is_atom(prev) or _is_ring(prev) or prev in _BOND_TOKENS
            ):
                diags.append(f"ring closure at position {pos} does not follow an atom")
            if t in open_rings:
                del open_rings[t]
            else:
                open_rings[t] = pos
        if prev in _BOND_TOKENS and not (_is_atom(t) or _is_ring(t)):
            diags.append(f"bond at position {pos - 1} not followed by an atom")
        prev = t
    if prev in _BOND_TOKENS:
        diags.append("bond symbol at end of string")
    if depth > 0:
        diags.append(f"{depth} unclosed '('")
    for idx in sorted(open_rings):
        diags.append(f"unclosed ring index {idx}")
    if n_atoms == 0:
        diags.append("no atoms")

    if not diags and valence_check:
        diags.extend(_check_valence(tokens))
    return not diags, diags


_VALENCE_LIMITS = {"C": 4, "N": 3, "O": 2}
_BOND_ORDER = {"-": 1, "=": 2, "#": 3, "/": 1, "\\": 1, ":": 1}


def _check_valence(tokens: Sequence[str]) -> List[str]:
    """Sum explicit bond orders per atom for plain C/N/O; assumes tokens
    already passed the structural checks."""
    order: List[float] = []  # bond-order sum per atom index
    element: List[str] = []
    stack: List[int] = []
    prev_atom = -1
    pending = 1
    ring_anchor: Dict[str, Tuple[int, int]] = {}
    diags: List[str] = []
    for t in tokens:
        if _is_atom(t):
            order.append(0.0)
            element.append(_atom_element(t) if not _is_bracket(t) else "")
            idx = len(order) - 1
            if prev_atom >= 0:
                order[prev_atom] += pending
                order[idx] += pending
            prev_atom = idx
            pending = 1
        elif t == "(":
            stack.append(prev_atom)
        elif t == ")":
            prev_atom = stack.pop()
        elif t in _BOND_ORDER:
            pending = _BOND_ORDER[t]
        elif _is_ring(t):
            if t in ring_anchor:
                a, bond = ring_anchor.pop(t)
                order[a] += max(bond, pending)
                order[prev_atom] += max(bond, pending)
            else:
                ring_anchor[t] = (prev_atom, pending)
            pending = 1
    for i, el in enumerate(element):
        limit = _VALENCE_LIMITS.get(el)
        if limit is not None and order[i] > limit:
            diags.append(f"atom {i} ({el}) exceeds valence {limit}")
    return diags


@dataclass
class MolString:
    """One analyzed molecule string."""

    raw: str
    tokens: List[str]
    valid: bool
    diagnostics: List[str] = field(default_factory=list)

    @property
    def key(self) -> str:
        return normal_form(self.raw)


def analyze(s: str, valence_check: bool = False) -> MolString:
    tokens = tokenize(s)
    valid, diags = validate(tokens, valence_check=valence_check)
    return MolString(raw=s, tokens=tokens, valid=valid, diagnostics=diags)


def descriptors(tokens: Sequence[str]) -> Dict[str, float]:
    """Cheap counting descriptors over a token list.

    heavy_atoms counts atom tokens (bracket hydrogens excluded),
    ring_closures counts closed ring bonds (pairs), aromatic_fraction and
    hetero_fraction are over atom tokens, length is the token count.
    Raises ValueError when the tokens contain something unrecognizable.
    """
    atoms = 0
    aromatic = 0
    hetero = 0
    ring_marks = 0
    for t in tokens:
        if _is_atom(t):
            el = _atom_element(t)
            if el == "H":
                continue
            atoms += 1
            if _is_aromatic_atom(t):
                aromatic += 1
            if el.upper() not in ("C", ""):
                hetero += 1
        elif _is_ring(t):
            ring_marks += 1
        elif t in _BOND_TOKENS or t in "()":
            pass
        else:
            raise ValueError(f"descriptors: invalid token {t!r}")
    return {
        "heavy_atoms": atoms,
        "ring_closures": ring_marks // 2,
        "aromatic_fraction": aromatic / atoms if atoms else 0.0,
        "hetero_fraction": hetero / atoms if atoms else 0.0,
        "length": len(tokens),
    }


def normal_form(s: str) -> str:
    """Deduplication key: the string with all whitespace removed.

    This is a *syntactic* identity, not chemical canonicalization:
    'CCO' and 'OCC' stay distinct. Uniqueness metrics built on it are
    therefore upper bounds.
    """
    return "".join(s.split())


# ---------------------------------------------------------------------------
# Fingerprints

@dataclass(frozen=True)
class Fingerprint:
    """Fixed-width bitset over hashed token n-grams."""

    bits: np.ndarray  # bool array, length = width
    radius: int

    @property
    def width(self) -> int:
        return int(self.bits.size)

    @property
    def popcount(self) -> int:
        return int(self.bits.sum())


def _hash_ngram(ngram: Tuple[str, ...], width: int) -> int:
    digest = hashlib.blake2b("\x1f".join(ngram).encode("utf-8"), digest_size=8).digest()
    return int.from_bytes(digest, "little") % width


@lru_cache(maxsize=65536)
def _fingerprint_cached(tokens: Tuple[str, ...], radius: int, width: int) -> Fingerprint:
    bits = np.zeros(width, dtype=bool)
    n = len(tokens)
    for size in range(1, radius + 1):
        for i in range(n - size + 1):
            bits[_hash_ngram(tokens[i : i + size], width)] = True
    bits.setflags(write=False)
    return Fingerprint(bits=bits, radius=radius)


def fingerprint(tokens: Sequence[str], radius: int = 3, bits: int = 1024) -> Fingerprint:
    """Hash all token n-grams of length 1..radius into a `bits`-wide bitset."""
    return _fingerprint_cached(tuple(tokens), radius, bits)


def tanimoto(a: Fingerprint, b: Fingerprint) -> float:
    """|a & b| / |a | b|, defined as 1.0 when both fingerprints are empty."""
    if a.width != b.width:
        raise ValueError(f"tanimoto: widths differ ({a.width} vs {b.width})")
    union = int(np.logical_or(a.bits, b.bits).sum())
    if union == 0:
        return 1.0
    inter = int(np.logical_and(a.bits, b.bits).sum())
    return inter / union


# ---------------------------------------------------------------------------
# Vocabulary

class Vocabulary:
    """Bijective token <-> id map with reserved GO/EOS ids 0 and 1.

    Body tokens are stored sorted so the same token set always produces
    the same ids, which keeps checkpoints reproducible.
    """

    GO = 0
    EOS = 1

    def __init__(self, body_tokens: Iterable[str]):
        body = sorted(set(body_tokens))
        for t in (GO_TOKEN, EOS_TOKEN):
            if t in body:
                raise ValueError(f"special token {t!r} cannot appear as a body token")
        self.tokens: Tuple[str, ...] = (GO_TOKEN, EOS_TOKEN) + tuple(body)
        self.index: Dict[str, int] = {t: i for i, t in enumerate(self.tokens)}

    def __len__(self) -> int:
        return len(self.tokens)

    def __contains__(self, token: str) -> bool:
        return token in self.index

    def encode(self, tokens: Iterable[str]) -> List[int]:
        try:
            return [self.index[t] for t in tokens]
        except KeyError as e:
            raise KeyError(f"token {e.args[0]!r} not in vocabulary") from None

    def decode(self, ids: Iterable[int]) -> List[str]:
        return [self.tokens[i] for i in ids]

    def to_string(self, ids: Iterable[int]) -> str:
        """Detokenized molecule body, GO/EOS stripped."""
        return "".join(
            self.tokens[i] for i in ids if i not in (self.GO, self.EOS)
        )

    @classmethod
    def from_corpus(cls, strings: Iterable[str]) -> "Vocabulary":
        seen = set()
        for s in strings:
            seen.update(tokenize(normal_form(s)))
        return cls(seen)

    @classmethod
    def default(cls) -> "Vocabulary":
        return cls(DEFAULT_TOKENS)

    def save(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            for t in self.tokens:
                fh.write(t + "\n")

    @classmethod
    def load(cls, path) -> "Vocabulary":
        with open(path, "r", encoding="utf-8") as fh:
            tokens = [line.rstrip("\n") for line in fh if line.rstrip("\n")]
        if len(tokens) < 2 or tokens[0] != GO_TOKEN or tokens[1] != EOS_TOKEN:
            raise ValueError(f"{path}: not a vocabulary file (missing GO/EOS header)")
        vocab = cls(tokens[2:])
        if list(vocab.tokens) != tokens:
            raise ValueError(f"{path}: vocabulary tokens not in canonical order")
        return vocab


DEFAULT_TOKENS = (
    "B Br C Cl F I N O P S b c n o p s ( ) - = # / \\ 1 2 3 4 5 6 [nH]".split()
)


# ---------------------------------------------------------------------------
# Corpus files

def read_corpus(path) -> List[str]:
    """One molecule string per line; blank lines and '#' comments skipped."""
    out: List[str] = []
    with open(path, "r", encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if line and not line.startswith("#"):
                out.append(line)
    return out


def _bundled(name: str) -> List[str]:
    text = resources.files("rfgen").joinpath("data", name).read_text("utf-8")
    return [
        line.strip()
        for line in text.splitlines()
        if line.strip() and not line.strip().startswith("#")
    ]


def bundled_corpus() -> List[str]:
    """The bundled 1,000-string valid corpus."""
    return _bundled("corpus.smi")


def bundled_mutations() -> List[str]:
    """Corrupted variants of corpus strings; all syntactically invalid."""
    return _bundled("mutations.smi")
