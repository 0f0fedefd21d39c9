"""Synthetic interaction logs with two interest clusters and rare-cluster bursts."""

from .corpus import Interaction, build_split
from .seeding import component_rng


def make_burst_dataset(n_users=200, cluster_size=25, niche_size=5, rare_size=10, seq_len=5,
                       burst_seq_len=10, niche_prob=0.9, burst_fraction=0.05, burst_len=5, seed=0):
    """Users live in a niche of cluster A or B; ``burst_fraction`` of them get one burst into rare cluster C.

    Regular users log ``seq_len`` events.  Burst users log ``burst_seq_len``
    events, ``burst_len`` consecutive ones drawn from C.  Returns
    ``(split, truth)`` where ``truth[user]`` records the home niche and the
    burst span (or ``None``).
    """
    if burst_seq_len < burst_len:
        raise ValueError("burst_seq_len must be at least burst_len")
    rng = component_rng(seed, "synthetic")
    clusters = {
        "A": [f"a{i:02d}" for i in range(cluster_size)],
        "B": [f"b{i:02d}" for i in range(cluster_size)],
    }
    rare = [f"c{i:02d}" for i in range(rare_size)]
    category = {item: c for c, items in clusters.items() for item in items}
    category.update({item: "C" for item in rare})
    n_niches = cluster_size // niche_size

    n_burst = int(round(burst_fraction * n_users))
    burst_users = set(rng.choice(n_users, size=n_burst, replace=False).tolist())
    events, truth = [], {}
    for u in range(n_users):
        user = f"u{u:03d}"
        home = "A" if u % 2 == 0 else "B"
        niche = int(rng.integers(n_niches))
        niche_items = clusters[home][niche * niche_size:(niche + 1) * niche_size]
        bursty = u in burst_users
        length = burst_seq_len if bursty else seq_len
        seq = []
        for _ in range(length):
            if rng.random() < niche_prob:
                seq.append(niche_items[int(rng.integers(niche_size))])
            else:
                seq.append(clusters[home][int(rng.integers(cluster_size))])
        burst = None
        if bursty:
            start = int(rng.integers(length - burst_len + 1))
            for pos in range(start, start + burst_len):
                seq[pos] = rare[int(rng.integers(rare_size))]
            burst = (start, start + burst_len)
        t0 = 1_000_000 + int(rng.integers(0, 86_400))
        for pos, item in enumerate(seq):
            events.append(Interaction(user, item, 1.0, t0 + pos * 3_600, category[item]))
        truth[user] = {"cluster": home, "niche": niche, "burst": burst}
    # interleave users the way a global log would be ordered
    events.sort(key=lambda e: (e.timestamp, e.user_id))
    return build_split(events, category), truth
