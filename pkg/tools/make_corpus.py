#!/usr/bin/env python3
"""Regenerate the bundled corpus and mutation files.

Writes src/rfgen/data/corpus.smi (1,000 unique strings, all accepted by
the validator) and src/rfgen/data/mutations.smi (corrupted variants, all
rejected). Corruptions break paren balance or ring-index pairing, so
rejection is guaranteed by parity, not by filtering through the
validator.
"""

import argparse
import os
import sys

import numpy as np

sys.path.insert(0, os.path.join(os.path.dirname(__file__), "..", "src"))

from rfgen import smiles

ALIPHATIC = ["C", "C", "C", "C", "N", "O", "S", "P", "[C@H]", "[C@@H]", "[N+]", "[O-]"]
HALOGENS = ["F", "Cl", "Br", "I"]
BONDS = ["=", "#", "/", "\\"]


def ring_label(rng, digit):
    # occasional %nn two-digit ring closure
    if rng.random() < 0.05:
        return f"%1{digit - 1}"
    return str(digit)


def ring_unit(rng, digit, aromatic):
    size = int(rng.choice([5, 6], p=[0.3, 0.7]))
    if aromatic:
        atoms = ["c"] * size
        extra = int(rng.integers(0, 3))
        for _ in range(extra):
            i = int(rng.integers(1, size))
            atoms[i] = str(rng.choice(["n", "s", "o", "[nH]"]))
    else:
        atoms = [str(rng.choice(ALIPHATIC)) for _ in range(size)]
    label = ring_label(rng, digit)
    tokens = [atoms[0], label]
    for j, a in enumerate(atoms[1:]):
        tokens.append(a)
        # the closing label must directly follow the last ring atom
        if j < size - 2 and rng.random() < 0.15:
            if rng.random() < 0.25 and not aromatic and digit < 3:
                tokens.extend(["("] + ring_unit(rng, digit + 1, False) + [")"])
            else:
                tokens.extend(substituent(rng))
    tokens.append(label)
    return tokens


def substituent(rng):
    inner = [str(rng.choice(ALIPHATIC + HALOGENS))]
    while rng.random() < 0.35 and inner[-1] not in HALOGENS:
        if rng.random() < 0.25:
            inner.append(str(rng.choice(BONDS)))
        inner.append(str(rng.choice(ALIPHATIC)))
    return ["("] + inner + [")"]


def chain(rng, min_units=2, max_units=7, allow_aromatic=True, digit=1):
    tokens = []
    n_units = int(rng.integers(min_units, max_units + 1))
    for u in range(n_units):
        r = rng.random()
        if r < 0.12 and allow_aromatic:
            unit = ring_unit(rng, digit, aromatic=True)
        elif r < 0.22:
            unit = ring_unit(rng, digit, aromatic=False)
        else:
            unit = [str(rng.choice(ALIPHATIC))]
            if rng.random() < 0.3:
                unit += substituent(rng)
        if tokens and rng.random() < 0.12 and unit[0] not in "(":
            tokens.append(str(rng.choice(BONDS)))
        tokens.extend(unit)
    if rng.random() < 0.15:
        tokens.append(str(rng.choice(HALOGENS)))
    return tokens


def make_corpus(rng, n):
    out = []
    seen = set()
    while len(out) < n:
        toks = chain(rng)
        s = smiles.detokenize(toks)
        if not (8 <= len(toks) <= 45):
            continue
        ok, diags = smiles.validate(smiles.tokenize(s))
        if not ok:
            raise AssertionError(f"generator produced invalid string {s!r}: {diags}")
        if s in seen:
            continue
        seen.add(s)
        out.append(s)
    return out


def corrupt(rng, s, kind):
    toks = smiles.tokenize(s)
    parens = [i for i, t in enumerate(toks) if t in "()"]
    rings = [i for i, t in enumerate(toks) if t in "123456789"]
    if kind == 0 and parens:  # drop one paren
        del toks[int(rng.choice(parens))]
    elif kind == 1 and rings:  # drop one ring digit
        del toks[int(rng.choice(rings))]
    elif kind == 2 and rings:  # retarget one ring digit
        i = int(rng.choice(rings))
        old = toks[i]
        others = [d for d in "123456789" if d != old]
        toks[i] = str(rng.choice(others))
    elif kind == 3:  # insert a lone paren
        toks.insert(int(rng.integers(0, len(toks) + 1)), str(rng.choice(["(", ")"])))
    else:  # insert a lone ring digit at a fresh index
        unused = [d for d in "789" if d not in toks]
        toks.insert(int(rng.integers(1, len(toks) + 1)), unused[0])
    return smiles.detokenize(toks)


def make_mutations(rng, corpus, n):
    out = []
    i = 0
    while len(out) < n:
        s = corpus[i % len(corpus)]
        mutant = corrupt(rng, s, len(out) % 5)
        ok, _ = smiles.validate(smiles.tokenize(mutant))
        if ok:
            raise AssertionError(f"corruption left {mutant!r} valid (from {s!r})")
        out.append(mutant)
        i += 1
    return out


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--seed", type=int, default=20240701)
    ap.add_argument("--n-corpus", type=int, default=1000)
    ap.add_argument("--n-mutations", type=int, default=500)
    args = ap.parse_args()

    rng = np.random.default_rng(args.seed)
    corpus = make_corpus(rng, args.n_corpus)
    mutations = make_mutations(rng, corpus, args.n_mutations)

    data_dir = os.path.join(os.path.dirname(__file__), "..", "src", "rfgen", "data")
    os.makedirs(data_dir, exist_ok=True)
    with open(os.path.join(data_dir, "corpus.smi"), "w", encoding="utf-8") as fh:
        fh.write("# bundled training corpus: syntactically valid molecule strings\n")
        fh.write("\n".join(corpus) + "\n")
    with open(os.path.join(data_dir, "mutations.smi"), "w", encoding="utf-8") as fh:
        fh.write("# corrupted corpus strings: all syntactically invalid\n")
        fh.write("\n".join(mutations) + "\n")

    from rfgen.smiles import analyze

    arom = [smiles.descriptors(analyze(s).tokens)["aromatic_fraction"] for s in corpus]
    lens = [len(analyze(s).tokens) for s in corpus]
    print(f"corpus: {len(corpus)} strings, token length {min(lens)}-{max(lens)}")
    print(f"mean aromatic fraction: {np.mean(arom):.3f}")
    print(f"strings with any aromatics: {np.mean([a > 0 for a in arom]):.3f}")
    print(f"mutations: {len(mutations)} strings, all invalid")


if __name__ == "__main__":
    main()
