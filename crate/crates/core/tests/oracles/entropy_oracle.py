"""High-precision normalized Shannon entropy, independent of the Rust code.

Usage: python3 entropy_oracle.py 18 2 [more counts...]
Prints H'(counts) = -sum(p ln p) / ln k to 20 significant digits, where k is
the number of counts given (zero counts included).
"""

import sys

from mpmath import mp, mpf, log

mp.dps = 50


def normalized_entropy(counts):
    total = mpf(sum(counts))
    k = len(counts)
    h = mpf(0)
    for c in counts:
        if c:
            p = mpf(c) / total
            h -= p * log(p)
    return h / log(k)


if __name__ == "__main__":
    counts = [int(a) for a in sys.argv[1:]] or [18, 2]
    print(mp.nstr(normalized_entropy(counts), 20))
