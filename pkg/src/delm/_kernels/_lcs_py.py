"""Pure-Python longest-common-token-run kernel (fallback for the C version)."""


def lcs_run(a, b):
    """Length of the longest common contiguous run between sequences a and b.

    Rolling-row dynamic program, O(len(a) * len(b)) time. Accepts any
    indexable sequences of ints.
    """
    la, lb = len(a), len(b)
    if la == 0 or lb == 0:
        return 0
    if la > lb:
        a, b = b, a
        la, lb = lb, la
    best = 0
    prev = [0] * (la + 1)
    for j in range(lb):
        cur = [0] * (la + 1)
        bj = b[j]
        for i in range(la):
            if a[i] == bj:
                v = prev[i] + 1
                cur[i + 1] = v
                if v > best:
                    best = v
        prev = cur
    return best
