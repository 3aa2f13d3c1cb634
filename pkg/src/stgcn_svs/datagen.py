"""Synthetic post-fault trajectory generator with topology-local instability.

Each case drops bus voltages by a severity that decays with hop distance from
the fault bus.  Mildly hit buses recover exponentially; buses hit beyond the
collapse threshold settle at a low voltage instead.  The stability label is
the practical criterion applied to the full label window (any bus below the
voltage threshold for longer than the minimum duration), while the emitted
sample contains only the short observation window after clearance - so the
model must predict the outcome, not detect it.

All trajectory constants are generator parameters, not physical claims.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .errors import Infeasible, StgcnError
from .graph import Topology, load_topology, save_topology
from .ioutil import atomic_write_bytes, atomic_write_text
from .model import STABLE, UNSTABLE, SvsSample


@dataclass(frozen=True)
class ScenarioConfig:
    """Per-case drawing rules plus the trajectory-model constants.

    fault_bus None means each case picks a bus uniformly; severity and
    motor_ratio accept either a fixed float or a (lo, hi) range / tuple of
    choices drawn per case from the sample's own derived RNG stream.
    """

    fault_bus: int | None = None
    severity: object = (0.3, 1.0)
    motor_ratio: object = (0.3, 0.5, 0.7, 0.9)
    sample_rate: float = 25.0
    window_seconds: float = 1.0
    label_window_seconds: float = 10.0
    seed: int = 0
    hop_decay: float = 0.6
    collapse_threshold: float = 0.55
    v_low: float = 0.6
    tau_recovery: float = 0.8
    tau_collapse: float = 0.5
    kappa: float = 1.5
    v_threshold: float = 0.8
    min_duration: float = 1.0

    def __post_init__(self):
        if self.sample_rate <= 0:
            raise StgcnError("sample_rate must be > 0")
        if self.window_seconds <= 0 or self.label_window_seconds < self.window_seconds:
            raise StgcnError("need 0 < window_seconds <= label_window_seconds")
        if int(round(self.window_seconds * self.sample_rate)) < 2:
            raise StgcnError("observation window must span at least 2 samples")

    def to_dict(self):
        d = {}
        for key, val in self.__dict__.items():
            d[key] = list(val) if isinstance(val, tuple) else val
        return d

    @classmethod
    def from_dict(cls, d):
        kv = dict(d)
        for key in ("severity", "motor_ratio"):
            if isinstance(kv.get(key), list):
                kv[key] = tuple(kv[key])
        return cls(**kv)


@dataclass
class LabeledDataset:
    """Labeled cases over one grid topology, or a mix of structural variants.

    The common case is a single topology.  For topology-diverse training
    (cases simulated on several grid variants, each fed through the model
    with its own filter bank) `topologies` lists the variants and
    `sample_topology[i]` names each sample's variant; `topology` is then the
    first variant.
    """

    topology: Topology
    samples: list
    provenance: tuple = ()
    seed: int = 0
    cases: list = field(default_factory=list)   # per-case (fault_bus, severity, motor_ratio)
    trajectories: list | None = None            # full label-window V, kept on request
    snr_db: float | None = None
    perturb_changes: int | None = None
    topologies: list | None = None
    sample_topology: np.ndarray | None = None

    def __len__(self):
        return len(self.samples)

    @property
    def n(self):
        return self.topology.n

    @property
    def window_len(self):
        return self.samples[0].window_len if self.samples else 0

    def labels(self):
        return np.array([s.label for s in self.samples], dtype=np.int64)

    def panel(self):
        """(S, 3, N, n) stacked channel panel."""
        return np.stack([s.panel() for s in self.samples])

    def class_balance(self):
        y = self.labels()
        total = max(len(y), 1)
        return {"stable": int((y == STABLE).sum()), "unstable": int((y == UNSTABLE).sum()),
                "unstable_fraction": float((y == UNSTABLE).mean()) if len(y) else 0.0}

    def topology_groups(self):
        """[(topology, sample index array)] with indices covering the dataset."""
        if self.topologies is None:
            return [(self.topology, np.arange(len(self.samples)))]
        ids = np.asarray(self.sample_topology)
        return [(topo, np.flatnonzero(ids == gi))
                for gi, topo in enumerate(self.topologies)]

    def subset(self, indices):
        indices = np.asarray(indices)
        sub_ids = None
        if self.sample_topology is not None:
            sub_ids = np.asarray(self.sample_topology)[indices]
        return LabeledDataset(
            topology=self.topology,
            samples=[self.samples[i] for i in indices],
            provenance=self.provenance,
            seed=self.seed,
            cases=[self.cases[i] for i in indices] if self.cases else [],
            snr_db=self.snr_db,
            perturb_changes=self.perturb_changes,
            topologies=self.topologies,
            sample_topology=sub_ids,
        )


def merge_datasets(parts, seed=None):
    """Concatenate per-topology datasets into one topology-diverse dataset."""
    parts = list(parts)
    if not parts:
        raise StgcnError("merge_datasets needs at least one dataset")
    n = parts[0].n
    win = parts[0].window_len
    topologies, samples, cases, ids = [], [], [], []
    for part in parts:
        if part.n != n or part.window_len != win:
            raise StgcnError("merged datasets must share (N, n)")
        for topo, idx in part.topology_groups():
            gi = len(topologies)
            topologies.append(topo)
            for i in idx:
                samples.append(part.samples[i])
                cases.append(part.cases[i] if part.cases else {})
                ids.append(gi)
    return LabeledDataset(
        topology=topologies[0],
        samples=samples,
        provenance=tuple(cfg for p in parts for cfg in p.provenance),
        seed=parts[0].seed if seed is None else seed,
        cases=cases,
        topologies=topologies,
        sample_topology=np.array(ids, dtype=np.int64),
    )


def hop_distances(topology: Topology, src: int) -> np.ndarray:
    """BFS hop distance from src; np.inf for unreachable buses."""
    adj = topology.W
    dist = np.full(topology.n, np.inf)
    dist[src] = 0.0
    frontier = [src]
    d = 0
    while frontier:
        d += 1
        nxt = []
        for u in frontier:
            for v in adj.indices[adj.indptr[u]:adj.indptr[u + 1]]:
                if dist[v] == np.inf:
                    dist[v] = d
                    nxt.append(int(v))
        frontier = nxt
    return dist


def longest_run_seconds(below: np.ndarray, dt: float) -> float:
    """Duration of the longest consecutive True run, counted as samples * dt."""
    longest = run = 0
    for flag in below:
        run = run + 1 if flag else 0
        longest = max(longest, run)
    return longest * dt


def label_rule(v_traj: np.ndarray, dt: float, v_threshold=0.8, min_duration=1.0) -> int:
    """Practical criterion: unstable iff any bus stays below the threshold
    for more than min_duration seconds."""
    below = v_traj < v_threshold
    for bus in range(v_traj.shape[1]):
        if longest_run_seconds(below[:, bus], dt) > min_duration:
            return UNSTABLE
    return STABLE


def _draw_range(rng, spec):
    """Fixed float, or uniform draw from a (lo, hi) pair."""
    if isinstance(spec, (int, float)):
        return float(spec)
    lo, hi = spec
    return float(rng.uniform(lo, hi))


def _draw_choice(rng, spec):
    """Fixed float, or uniform choice from a tuple of values."""
    if isinstance(spec, (int, float)):
        return float(spec)
    return float(rng.choice(tuple(spec)))


def _case_rng(seed, index):
    return np.random.default_rng(np.random.SeedSequence(entropy=seed, spawn_key=(index,)))


def generate_case(topology: Topology, cfg: ScenarioConfig, index: int):
    """One case from its own derived RNG stream; returns (sample, meta, v_traj)."""
    rng = _case_rng(cfg.seed, index)
    n = topology.n
    if cfg.fault_bus is None:
        fault_bus = int(rng.integers(0, n))
    else:
        if not 0 <= cfg.fault_bus < n:
            raise StgcnError(f"fault_bus {cfg.fault_bus} out of range for n={n}")
        fault_bus = cfg.fault_bus
    severity = _draw_range(rng, cfg.severity)
    motor = _draw_choice(rng, cfg.motor_ratio)
    p0 = rng.uniform(0.5, 1.5, size=n)
    q0 = rng.uniform(0.1, 0.5, size=n)

    dist = hop_distances(topology, fault_bus)
    decay = np.zeros(n)
    finite = np.isfinite(dist)
    decay[finite] = cfg.hop_decay ** dist[finite]
    s = severity * motor * decay

    dt = 1.0 / cfg.sample_rate
    t = np.arange(0.0, cfg.label_window_seconds, dt)
    collapse = s > cfg.collapse_threshold
    v_dip = 1.0 - s
    recover = 1.0 - s[None, :] * np.exp(-t[:, None] / cfg.tau_recovery)
    settle = cfg.v_low + (v_dip[None, :] - cfg.v_low) * np.exp(-t[:, None] / cfg.tau_collapse)
    v = np.where(collapse[None, :], settle, recover)

    label = label_rule(v, dt, cfg.v_threshold, cfg.min_duration)
    n_window = int(round(cfg.window_seconds * cfg.sample_rate))
    vw = v[:n_window]
    pw = p0[None, :] * vw ** 2
    qw = q0[None, :] + cfg.kappa * motor * (1.0 - vw)
    sample = SvsSample(V=vw, P=pw, Q=qw, label=label)
    meta = {"fault_bus": fault_bus, "severity": severity, "motor_ratio": motor, "label": label}
    return sample, meta, v


def generate(topology: Topology, cfg: ScenarioConfig, count: int,
             keep_trajectories=False) -> LabeledDataset:
    """Generate `count` labeled cases, bit-reproducible from (cfg, seed)."""
    samples, cases, trajs = [], [], [] if keep_trajectories else None
    for idx in range(count):
        sample, meta, v = generate_case(topology, cfg, idx)
        samples.append(sample)
        cases.append(meta)
        if keep_trajectories:
            trajs.append(v)
    return LabeledDataset(
        topology=topology, samples=samples, provenance=(cfg,), seed=cfg.seed,
        cases=cases, trajectories=trajs,
    )


def add_noise(dataset: LabeledDataset, snr_db, seed=0) -> LabeledDataset:
    """Zero-mean Gaussian noise per channel at the requested dataset-level SNR.

    snr_db None means no noise (the '--snr none' sentinel).  Labels unchanged.
    """
    if snr_db is None:
        return dataset
    snr_db = float(snr_db)
    if not np.isfinite(snr_db):
        return dataset
    panel = dataset.panel()  # (S, 3, N, n)
    power = (panel ** 2).mean(axis=(0, 2, 3))
    sigma = np.sqrt(power / (10.0 ** (snr_db / 10.0)))
    rng = np.random.default_rng(seed)
    noisy = panel + rng.normal(size=panel.shape) * sigma[None, :, None, None]
    samples = [
        SvsSample(V=noisy[i, 0], P=noisy[i, 1], Q=noisy[i, 2], label=s.label)
        for i, s in enumerate(dataset.samples)
    ]
    return LabeledDataset(
        topology=dataset.topology, samples=samples, provenance=dataset.provenance,
        seed=dataset.seed, cases=list(dataset.cases), snr_db=snr_db,
        perturb_changes=dataset.perturb_changes,
    )


def _splits_graph(topology: Topology, i: int, j: int) -> bool:
    """True if removing edge (i, j) disconnects i from j (bridge test)."""
    adj = {u: set() for u in range(topology.n)}
    coo = topology.W.tocoo()
    for a, b in zip(coo.row, coo.col):
        adj[int(a)].add(int(b))
    adj[i].discard(j)
    adj[j].discard(i)
    seen = {i}
    stack = [i]
    while stack:
        u = stack.pop()
        if u == j:
            return False
        for v in adj[u]:
            if v not in seen:
                seen.add(v)
                stack.append(v)
    return True


def perturb_topology(topology: Topology, n_changes: int, seed=0) -> Topology:
    """Remove n_changes random edges; bridge edges get their weight halved
    instead so no bus is cut off."""
    if n_changes < 0:
        raise StgcnError("n_changes must be >= 0")
    if n_changes == 0:
        return topology
    edges = topology.edges()
    if n_changes > len(edges):
        raise Infeasible(f"{n_changes} changes requested but only {len(edges)} edges")
    rng = np.random.default_rng(seed)
    chosen = rng.choice(len(edges), size=n_changes, replace=False)
    current = topology
    for k in sorted(int(c) for c in chosen):
        i, j, w = edges[k]
        cur_edges = current.edges()
        if _splits_graph(current, i, j):
            new_edges = [(a, b, ww * 0.5 if (a, b) == (i, j) else ww) for a, b, ww in cur_edges]
        else:
            new_edges = [(a, b, ww) for a, b, ww in cur_edges if (a, b) != (i, j)]
        current = Topology.from_edges(current.n, new_edges)
    return current


def spatial_signal_report(dataset: LabeledDataset, bins=6, seed=0) -> dict:
    """Sanity statistic (reported, not asserted): MI between the label and the
    fault neighborhood's mean voltage vs a random remote bus's."""
    if not dataset.cases:
        raise StgcnError("dataset has no per-case metadata")
    rng = np.random.default_rng(seed)
    y = dataset.labels()
    near_stat, far_stat = [], []
    for sample, meta in zip(dataset.samples, dataset.cases):
        fault = meta["fault_bus"]
        dist = hop_distances(dataset.topology, fault)
        near = np.flatnonzero(dist <= 1)
        far = np.flatnonzero(dist >= 3)
        if far.size == 0:
            far = np.array([int(np.argmax(dist[np.isfinite(dist)]))])
        near_stat.append(sample.V[:, near].mean())
        far_stat.append(sample.V[:, int(rng.choice(far))].mean())

    def mutual_information(stat):
        stat = np.asarray(stat)
        edges = np.quantile(stat, np.linspace(0, 1, bins + 1))
        cells = np.clip(np.searchsorted(edges, stat, side="right") - 1, 0, bins - 1)
        mi = 0.0
        total = len(stat)
        for c in range(bins):
            for cls in (STABLE, UNSTABLE):
                joint = np.sum((cells == c) & (y == cls)) / total
                if joint > 0:
                    px = np.sum(cells == c) / total
                    py = np.sum(y == cls) / total
                    mi += joint * np.log(joint / (px * py))
        return float(mi)

    return {
        "fault_neighborhood_mi": mutual_information(near_stat),
        "remote_bus_mi": mutual_information(far_stat),
    }


def save_sample_json(sample: SvsSample, path, label_known=True):
    """Single case as human-readable JSON (the `assess --sample` format)."""
    payload = {
        "window_len": int(sample.window_len),
        "n": int(sample.num_buses),
        "V": sample.V.tolist(),
        "P": sample.P.tolist(),
        "Q": sample.Q.tolist(),
        "label": ("unstable" if sample.label == UNSTABLE else "stable") if label_known else None,
    }
    atomic_write_text(path, json.dumps(payload, sort_keys=True) + "\n")


def load_sample_json(path):
    """Returns (SvsSample, label_or_None); the sample's label falls back to
    stable when the file does not carry one."""
    with open(path, "r", encoding="utf-8") as fh:
        payload = json.load(fh)
    label_txt = payload.get("label")
    label = {None: None, "stable": STABLE, "unstable": UNSTABLE}.get(label_txt, None)
    sample = SvsSample(
        V=np.array(payload["V"], dtype=np.float64),
        P=np.array(payload["P"], dtype=np.float64),
        Q=np.array(payload["Q"], dtype=np.float64),
        label=label if label is not None else STABLE,
    )
    if sample.window_len != payload.get("window_len") or sample.num_buses != payload.get("n"):
        raise StgcnError("sample JSON dims do not match its arrays")
    return sample, label


# ---------------------------------------------------------------------------
# on-disk dataset: manifest.json + samples.bin + topology.txt
# ---------------------------------------------------------------------------

DATASET_FORMAT_VERSION = 1
MANIFEST_NAME = "manifest.json"
SAMPLES_NAME = "samples.bin"
TOPOLOGY_NAME = "topology.txt"


def save_dataset(dataset: LabeledDataset, out_dir):
    import os

    os.makedirs(out_dir, exist_ok=True)
    blob = bytearray()
    for s in dataset.samples:
        blob.append(int(s.label))
        for arr in (s.V, s.P, s.Q):
            blob += np.ascontiguousarray(arr, dtype="<f8").tobytes()
    atomic_write_bytes(os.path.join(out_dir, SAMPLES_NAME), bytes(blob))
    save_topology(dataset.topology, os.path.join(out_dir, TOPOLOGY_NAME))
    manifest = {
        "format_version": DATASET_FORMAT_VERSION,
        "n": dataset.n,
        "window_len": dataset.window_len,
        "sample_count": len(dataset),
        "seed": dataset.seed,
        "topology_file": TOPOLOGY_NAME,
        "samples_file": SAMPLES_NAME,
        "snr_db": dataset.snr_db,
        "perturb_changes": dataset.perturb_changes,
        "config": [cfg.to_dict() for cfg in dataset.provenance],
        "cases": dataset.cases,
        "class_balance": dataset.class_balance(),
    }
    atomic_write_text(
        os.path.join(out_dir, MANIFEST_NAME),
        json.dumps(manifest, sort_keys=True, separators=(",", ":")) + "\n",
    )


def load_dataset(path) -> LabeledDataset:
    import os

    with open(os.path.join(path, MANIFEST_NAME), "r", encoding="utf-8") as fh:
        manifest = json.load(fh)
    if manifest.get("format_version") != DATASET_FORMAT_VERSION:
        raise StgcnError(f"unsupported dataset format {manifest.get('format_version')}")
    topology = load_topology(os.path.join(path, manifest["topology_file"]))
    n, win, count = manifest["n"], manifest["window_len"], manifest["sample_count"]
    rec = 1 + 3 * win * n * 8
    with open(os.path.join(path, manifest["samples_file"]), "rb") as fh:
        raw = fh.read()
    if len(raw) != rec * count:
        raise StgcnError(f"samples file has {len(raw)} bytes, expected {rec * count}")
    samples = []
    for i in range(count):
        off = i * rec
        label = raw[off]
        arrs = np.frombuffer(raw, dtype="<f8", count=3 * win * n, offset=off + 1)
        v, p, q = arrs.reshape(3, win, n)
        samples.append(SvsSample(V=v.copy(), P=p.copy(), Q=q.copy(), label=int(label)))
    provenance = tuple(ScenarioConfig.from_dict(d) for d in manifest.get("config", []))
    return LabeledDataset(
        topology=topology, samples=samples, provenance=provenance,
        seed=manifest["seed"], cases=manifest.get("cases", []),
        snr_db=manifest.get("snr_db"), perturb_changes=manifest.get("perturb_changes"),
    )
