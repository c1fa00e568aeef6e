"""High-precision reference values frozen into the C++ test suites.

Independent of the C++ implementation: plain mpmath evaluation of the
mixed-class contrastive loss, the prior-compensated cross entropy and the
feature-space scores on the small hand-built cases used in the tests.
"""
import mpmath as mp

mp.mp.dps = 40


def contrastive_terms(emb, recs, tau):
    """Returns the per-type anchor-averaged loss with per-anchor weights."""
    n = len(emb)
    dot = lambda a, b: sum(x * y for x, y in zip(a, b))
    totals = {"f": [], "b": [], "c": []}
    for i in range(n):
        fi, bi, li = recs[i]
        denom = mp.fsum(mp.e ** (dot(emb[i], emb[j]) / tau) for j in range(n) if j != i)
        sets = {"f": [], "b": [], "c": []}
        for j in range(n):
            if j == i:
                continue
            fj, bj, _ = recs[j]
            if fi == fj:
                sets["f"].append(j)
            if bi == bj:
                sets["b"].append(j)
            if fi != fj and bi != bj and ({fi, bi} & {fj, bj}):
                sets["c"].append(j)
        w = {"f": mp.mpf(li) / mp.mpf("1.5"), "b": (1 - mp.mpf(li)) / mp.mpf("1.5"),
             "c": mp.mpf("0.5") / mp.mpf("1.5")}
        for t, s in sets.items():
            if not s:
                continue
            term = -mp.fsum(mp.log(mp.e ** (dot(emb[i], emb[p]) / tau) / denom) for p in s) / len(s)
            totals[t].append(w[t] * term)
    return mp.fsum(mp.fsum(v) / len(v) for v in totals.values() if v)


recs = [("A", "B", "0.5"), ("A", "C", "0.5"), ("D", "E", "0.5")]
tau = mp.mpf("0.1")
print("smc case 1:", mp.nstr(contrastive_terms([(1, 0), (1, 0), (0, 1)], recs, tau), 20))
print("smc case 2:", mp.nstr(contrastive_terms([(1, 0), (0, 1), (0, 1)], recs, tau), 20))
print("smc case 2, anchor 0 term only:", mp.nstr(mp.log(2) / 3, 20))

print("bce uniform:", mp.nstr(mp.log(2), 20))
print("bce prior:", mp.nstr(-mp.log(mp.mpf("0.1")), 20))
print("IS two-class:", mp.nstr(mp.e ** mp.mpf(-0.5), 20))
print("loss weights 0.8:", [mp.nstr(x, 20) for x in (mp.mpf("0.8") / 1.5, mp.mpf("0.2") / 1.5, mp.mpf("0.5") / 1.5)])
q = [mp.mpf(n) ** -1 for n in (100, 10, 1)]
s = mp.fsum(q)
print("q:", [mp.nstr(x / s, 20) for x in q])
print("counts C=3:", [round(1000 * mp.mpf(100) ** (-mp.mpf(k) / 2)) for k in range(3)])
print("counts C=10:", [int(mp.nint(500 * mp.mpf(100) ** (-mp.mpf(k) / 9))) for k in range(10)])
print("mask 0.5:", round(32 * mp.sqrt(mp.mpf("0.5"))), mp.nstr(mp.mpf(529) / 1024, 20))
