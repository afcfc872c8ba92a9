"""Dataset generation, persistence, normalization, and pair iteration.

A dataset is a directory of trajectory containers plus a plain-text
manifest. Splits are disjoint by trajectory, never by frame, and the
z-score normalization statistics are computed on the training split
only. Generation is deterministic: trajectory i runs with seed + i, so
regenerating with the same master seed reproduces every file byte for
byte.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field, replace

import numpy as np

from . import dns
from .tensor import Tensor


@dataclass
class DatasetManifest:
    regime: str                      # decaying | forced
    files: list                      # relative trajectory paths, seed order
    frames_per_trajectory: int
    n: int
    train: list
    val: list
    test: list
    mean: float
    std: float
    sim: dns.SimConfig
    master_seed: int
    base_dir: str = "."

    def split(self, name: str) -> list:
        if name not in ("train", "val", "test"):
            raise ValueError(f"unknown split {name!r}")
        return getattr(self, name)

    def path(self, index: int) -> str:
        return os.path.join(self.base_dir, self.files[index])


def default_split(n_trajectories: int):
    """Leading indices train, then val, then test; one tenth each for
    val and test (at least one trajectory per split)."""
    n_val = max(1, int(round(0.1 * n_trajectories)))
    n_test = max(1, int(round(0.1 * n_trajectories)))
    n_train = n_trajectories - n_val - n_test
    if n_train < 1:
        raise ValueError(f"{n_trajectories} trajectories leave no training split")
    idx = list(range(n_trajectories))
    return idx[:n_train], idx[n_train:n_train + n_val], idx[n_train + n_val:]


def generate_dataset(regime: str, n_trajectories: int, frames: int,
                     sim_config: dns.SimConfig, seed: int,
                     out_dir: str) -> DatasetManifest:
    """Simulate trajectories and write containers plus the manifest.

    Parameters
    ----------
    regime : "decaying" (unforced) or "forced"
    n_trajectories : at least 3, so every split is nonempty
    frames : saved frames per trajectory (includes the initial frame)
    sim_config : solver settings; forcing and steps are overridden to
        match the regime and frame count
    seed : master seed; trajectory i uses seed + i
    out_dir : directory for trajectory files and manifest.txt
    """
    if regime not in ("decaying", "forced"):
        raise ValueError(f"unknown regime {regime!r}")
    if n_trajectories < 3:
        raise ValueError("need at least 3 trajectories for a split")
    if frames < 2:
        raise ValueError("need at least 2 frames for training pairs")

    forcing = (dns.Forcing("none") if regime == "decaying"
               else dns.Forcing("fixed_low_wavenumber",
                                sim_config.forcing.amplitude,
                                sim_config.forcing.wavenumber))
    steps = (frames - 1) * sim_config.save_every
    os.makedirs(out_dir, exist_ok=True)

    files = []
    for i in range(n_trajectories):
        cfg = replace(sim_config, forcing=forcing, steps=steps, seed=seed + i)
        traj = dns.simulate(cfg)
        name = f"traj_{i:03d}.tl1t"
        dns.save_trajectory(os.path.join(out_dir, name), traj)
        files.append(name)

    train, val, test = default_split(n_trajectories)
    mean, std = _train_stats(out_dir, files, train)
    manifest = DatasetManifest(
        regime=regime, files=files, frames_per_trajectory=frames,
        n=sim_config.n, train=train, val=val, test=test, mean=mean, std=std,
        sim=replace(sim_config, forcing=forcing, steps=steps, seed=seed),
        master_seed=seed, base_dir=out_dir)
    save_manifest(os.path.join(out_dir, "manifest.txt"), manifest)
    return manifest


def _train_stats(base: str, files: list, train_idx: list):
    """Global mean/std over all training frames (population std)."""
    total = 0
    acc = 0.0
    acc2 = 0.0
    for i in train_idx:
        frames = dns.load_trajectory_array(os.path.join(base, files[i]))
        total += frames.size
        acc += frames.sum()
        acc2 += (frames**2).sum()
    mean = acc / total
    var = acc2 / total - mean**2
    std = float(np.sqrt(max(var, 0.0)))
    if std <= 0:
        raise ValueError("training split has zero variance, cannot normalize")
    return float(mean), std


def save_manifest(path: str, m: DatasetManifest) -> None:
    lines = [
        f"regime={m.regime}",
        f"n={m.n}",
        f"frames_per_trajectory={m.frames_per_trajectory}",
        "files=" + ",".join(m.files),
        "train=" + ",".join(map(str, m.train)),
        "val=" + ",".join(map(str, m.val)),
        "test=" + ",".join(map(str, m.test)),
        f"norm_mean={m.mean!r}",
        f"norm_std={m.std!r}",
        f"sim.nu={m.sim.nu!r}",
        f"sim.dt={m.sim.dt!r}",
        f"sim.save_every={m.sim.save_every}",
        f"sim.steps={m.sim.steps}",
        f"sim.forcing.kind={m.sim.forcing.kind}",
        f"sim.forcing.amplitude={m.sim.forcing.amplitude!r}",
        f"sim.forcing.wavenumber={m.sim.forcing.wavenumber}",
        f"master_seed={m.master_seed}",
    ]
    with open(path, "w") as fh:
        fh.write("\n".join(lines) + "\n")


def load_manifest(path: str) -> DatasetManifest:
    kv = {}
    with open(path) as fh:
        for line in fh:
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            key, _, value = line.partition("=")
            kv[key] = value
    ints = lambda s: [int(v) for v in s.split(",")] if s else []
    forcing = dns.Forcing(kv["sim.forcing.kind"],
                          float(kv["sim.forcing.amplitude"]),
                          int(kv["sim.forcing.wavenumber"]))
    sim = dns.SimConfig(n=int(kv["n"]), nu=float(kv["sim.nu"]),
                        dt=float(kv["sim.dt"]), forcing=forcing,
                        save_every=int(kv["sim.save_every"]),
                        steps=int(kv["sim.steps"]),
                        seed=int(kv["master_seed"]))
    return DatasetManifest(
        regime=kv["regime"], files=kv["files"].split(","),
        frames_per_trajectory=int(kv["frames_per_trajectory"]),
        n=int(kv["n"]), train=ints(kv["train"]), val=ints(kv["val"]),
        test=ints(kv["test"]), mean=float(kv["norm_mean"]),
        std=float(kv["norm_std"]), sim=sim,
        master_seed=int(kv["master_seed"]),
        base_dir=os.path.dirname(os.path.abspath(path)))


def normalize(m: DatasetManifest, x: np.ndarray) -> np.ndarray:
    return (x - m.mean) / m.std


def denormalize(m: DatasetManifest, x: np.ndarray) -> np.ndarray:
    return x * m.std + m.mean


def load_split_frames(m: DatasetManifest, split: str) -> list:
    """Raw (denormalized) [T, n, n] frame stacks of a split, index order."""
    return [dns.load_trajectory_array(m.path(i)) for i in m.split(split)]


def pair_batches(stacks, batch_size: int, shuffle_seed=None):
    """Yield (input, target) ndarray batches of consecutive frames.

    `stacks` is a list of [T, n, n] arrays. Every consecutive pair of
    every stack appears exactly once per pass; the final short batch is
    kept. With a shuffle seed the pair order is a fixed permutation,
    otherwise pairs stream in stack order. Batches are [B, 1, n, n].
    """
    if batch_size < 1:
        raise ValueError("batch_size must be at least 1")
    if not stacks:
        raise ValueError("no frame stacks to batch")
    index = [(t, k) for t, stack in enumerate(stacks)
             for k in range(stack.shape[0] - 1)]
    if shuffle_seed is not None:
        order = np.random.default_rng(shuffle_seed).permutation(len(index))
        index = [index[i] for i in order]
    for start in range(0, len(index), batch_size):
        chunk = index[start:start + batch_size]
        xs = np.stack([stacks[t][k] for t, k in chunk])[:, None]
        ys = np.stack([stacks[t][k + 1] for t, k in chunk])[:, None]
        yield xs, ys


def iterate_pairs(m: DatasetManifest, split: str, batch_size: int,
                  shuffle_seed=None):
    """Yield normalized (input, target) Tensor batches for a split.

    Pair order and batching follow pair_batches on the split's
    trajectories; values are normalized with the manifest's training
    statistics. Tensors are [B, 1, n, n].
    """
    stacks = load_split_frames(m, split)
    if not stacks:
        raise ValueError(f"split {split!r} is empty")
    for xs, ys in pair_batches(stacks, batch_size, shuffle_seed):
        yield (Tensor(normalize(m, xs)), Tensor(normalize(m, ys)))


def pair_count(m: DatasetManifest, split: str) -> int:
    return len(m.split(split)) * (m.frames_per_trajectory - 1)
