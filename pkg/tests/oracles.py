"""Independent reference implementations shared by several test modules."""

DAY = 86400.0


def brute_force_windows(series, window_days, L):
    """O(n^2) scan: every earlier trip inside the window, most recent L kept."""
    out = []
    st_ = series.start_time
    for j in range(len(st_)):
        prior = [i for i in range(len(st_)) if st_[j] - window_days * DAY <= st_[i] < st_[j]]
        if prior:
            out.append((j, prior[-L:]))
    return out
