"""Generate the bundled word list (src/actground/data/words.txt).

No English dictionary ships with the base image, so the list is built
deterministically from consonant-vowel syllable patterns.  The words are
pronounceable pseudo-words of 3-10 lowercase letters; for the string task
only the letter statistics matter (vowel/consonant structure similar to
English), not whether the words are real.

Run from the repo root:  python3 tools/make_wordlist.py
"""

import pathlib

import numpy as np

VOWELS = "aeiou"
CONSONANTS = "bcdfghjklmnpqrstvwxyz"
ONSETS = list(CONSONANTS) + ["bl", "br", "ch", "cl", "cr", "dr", "fl", "fr",
                             "gl", "gr", "pl", "pr", "sh", "sk", "sl", "sm",
                             "sn", "sp", "st", "sw", "th", "tr", "tw", "wh"]
CODAS = ["", "", "", "b", "d", "g", "k", "l", "m", "n", "p", "r", "s", "t",
         "x", "ck", "ft", "ld", "lt", "mp", "nd", "ng", "nk", "nt", "rd",
         "rk", "rn", "rt", "sh", "sk", "sp", "st", "th"]

TARGET = 10_000
SEED = 20240811


def sample_word(rng):
    syllables = int(rng.integers(1, 4))
    parts = []
    for i in range(syllables):
        onset = ONSETS[rng.integers(len(ONSETS))]
        vowel = VOWELS[rng.integers(len(VOWELS))]
        coda = CODAS[rng.integers(len(CODAS))] if i == syllables - 1 or rng.random() < 0.3 else ""
        parts.append(onset + vowel + coda)
    return "".join(parts)


def main():
    rng = np.random.default_rng(SEED)
    words = set()
    while len(words) < TARGET:
        w = sample_word(rng)
        if 3 <= len(w) <= 10:
            words.add(w)
    out = pathlib.Path(__file__).resolve().parents[1] / "src/actground/data/words.txt"
    out.write_text("\n".join(sorted(words)) + "\n")
    print(f"wrote {len(words)} words to {out}")


if __name__ == "__main__":
    main()
