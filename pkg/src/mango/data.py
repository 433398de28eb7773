"""Synthetic meta-dataset: a hanging 2D mass-spring plate deformed by a
moving rigid circular collider, plus the on-disk dataset format.

Per task a hidden stiffness is drawn log-uniformly; the 16 trials of a task
share that stiffness but vary the collider's horizontal position, radius, and
push depth. The plate is a 9x9 grid pinned along its top row, cross-braced
with diagonal springs, hanging under gravity inside the normalized unit box.
The collider approaches from below along a half-sine vertical path, dents the
plate, and retreats.

Everything is reproducible bit-exactly from the master seed: randomness comes
from counter-based Philox streams keyed by (seed, purpose, task, trial), and
the integrator runs in float64 with a fixed accumulation order on both kernel
backends.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from mango import backend
from mango.graph import EDGE_MESH, EDGE_WORLD, Topology

SCHEMA_VERSION = 1
TASK_MAGIC = b"MGTASK\x00"

TRIAL_ARRAYS = ("p0", "v0", "p_ext", "v_ext", "h", "y_p", "y_v")

# Philox stream purposes (second key word, high bits)
_STREAM_TASK = 1
_STREAM_TRIAL = 2


class DatasetError(Exception):
    """Base class for dataset generation and serialization failures."""


class DatasetVersionError(DatasetError):
    pass


class DatasetTruncatedError(DatasetError):
    pass


class DatasetShapeError(DatasetError):
    pass


class SimulationUnstableError(DatasetError):
    pass


def substream(seed: int, purpose: int, a: int = 0, b: int = 0) -> np.random.Generator:
    """Independent Philox stream; the 128-bit key encodes (seed, purpose, a, b)."""
    key = np.array([seed & 0xFFFFFFFFFFFFFFFF,
                    (purpose << 48) | ((a & 0xFFFFFF) << 24) | (b & 0xFFFFFF)],
                   dtype=np.uint64)
    return np.random.Generator(np.random.Philox(key=key))


@dataclass
class SpringWorld:
    """Full physical configuration of one trial.

    ``stiffness`` is the hidden task parameter; the collider fields vary per
    trial within a task.
    """

    grid: int = 9
    stiffness: float = 1000.0           # hidden parameter rho
    spring_damping: float = 0.3
    viscous_damping: float = 1.0
    mass: float = 0.5
    gravity: float = 0.5                # magnitude, pulls -y
    contact_stiffness: float = 3000.0
    collider_radius: float = 0.08
    collider_x: float = 0.5             # horizontal start
    push_depth: float = 0.09            # how far the half-sine path reaches into the plate
    horizon: int = 50                   # recorded frames after the initial one
    frame_dt: float = 0.02
    substeps: int = 10
    num_external: int = 16              # ring nodes observing the collider
    plate_x: tuple = (0.30, 0.70)
    plate_y: tuple = (0.50, 0.90)

    def validate(self) -> None:
        # explicit-integrator stability bound for the stiffest node
        # (up to 8 incident springs plus the contact penalty)
        omega = np.sqrt((8.0 * self.stiffness + self.contact_stiffness) / self.mass)
        dt = self.frame_dt / self.substeps
        if dt * omega > 0.5:
            raise SimulationUnstableError(
                f"substep dt {dt:.2e} too large for stiffness {self.stiffness:.1f} "
                f"(dt*omega = {dt * omega:.2f}, need < 0.5)")

    @property
    def num_deformable(self) -> int:
        return self.grid * self.grid


def plate_geometry(world: SpringWorld):
    """Rest positions [N, 2], spring pairs [S, 2], rest lengths, fixed mask."""
    n = world.grid
    xs = np.linspace(world.plate_x[0], world.plate_x[1], n)
    ys = np.linspace(world.plate_y[0], world.plate_y[1], n)
    pos = np.stack(np.meshgrid(xs, ys, indexing="xy"), axis=-1).reshape(-1, 2)

    def nid(ix, iy):
        return iy * n + ix

    springs = []
    for iy in range(n):
        for ix in range(n):
            if ix + 1 < n:
                springs.append((nid(ix, iy), nid(ix + 1, iy)))
            if iy + 1 < n:
                springs.append((nid(ix, iy), nid(ix, iy + 1)))
            if ix + 1 < n and iy + 1 < n:
                springs.append((nid(ix, iy), nid(ix + 1, iy + 1)))
                springs.append((nid(ix + 1, iy), nid(ix, iy + 1)))
    springs = np.array(springs, dtype=np.int64)
    rest = np.linalg.norm(pos[springs[:, 1]] - pos[springs[:, 0]], axis=1)
    fixed = np.zeros(n * n, dtype=bool)
    fixed[nid(0, n - 1):nid(n - 1, n - 1) + 1] = True  # top row pinned
    return pos.astype(np.float64), springs, rest, fixed


def build_topology(world: SpringWorld) -> Topology:
    """Message-passing topology: mesh springs plus fixed world edges.

    Every collider ring node connects to every bottom-row plate node, so the
    graph is identical across trials and tasks. World edges carry rest
    length 0; only their one-hot kind and per-step relative positions are
    informative.
    """
    pos, springs, rest, _ = plate_geometry(world)
    n = world.grid
    bottom = np.arange(n)          # iy = 0 row
    ring = world.num_deformable + np.arange(world.num_external)
    world_edges = np.array([(b, r) for r in ring for b in bottom], dtype=np.int64)
    edges = np.concatenate([springs, world_edges], axis=0)
    kind = np.concatenate([
        np.full(len(springs), EDGE_MESH, dtype=np.int64),
        np.full(len(world_edges), EDGE_WORLD, dtype=np.int64),
    ])
    rest_all = np.concatenate([rest, np.zeros(len(world_edges))]).astype(np.float32)
    return Topology.from_undirected(world.num_deformable, world.num_external,
                                    edges, kind, rest_all)


@dataclass
class Trial:
    """One simulation input-output pair.

    Inputs: initial deformable state, known external-object trajectory, and
    static per-node features. Outputs: deformable positions/velocities for
    frames 1..T. All arrays are float32; positions live in the unit box.
    """

    p0: np.ndarray      # [N, d]
    v0: np.ndarray      # [N, d]
    p_ext: np.ndarray   # [T+1, N_ext, d]
    v_ext: np.ndarray   # [T+1, N_ext, d]
    h: np.ndarray       # [N + N_ext, d_h]
    y_p: np.ndarray     # [T, N, d]
    y_v: np.ndarray     # [T, N, d]

    @property
    def horizon(self) -> int:
        return self.y_p.shape[0]

    @property
    def num_deformable(self) -> int:
        return self.p0.shape[0]

    @property
    def dim(self) -> int:
        return self.p0.shape[1]

    def validate(self, topo: Topology) -> None:
        n, d = self.p0.shape
        t = self.horizon
        expected = {
            "p0": (n, d), "v0": (n, d),
            "p_ext": (t + 1, topo.num_external, d),
            "v_ext": (t + 1, topo.num_external, d),
            "h": (topo.num_nodes, self.h.shape[1]),
            "y_p": (t, n, d), "y_v": (t, n, d),
        }
        if n != topo.num_deformable:
            raise DatasetShapeError(
                f"trial has {n} deformable nodes, topology {topo.num_deformable}")
        for name, shape in expected.items():
            arr = getattr(self, name)
            if arr.shape != shape:
                raise DatasetShapeError(f"{name} has shape {arr.shape}, expected {shape}")


@dataclass
class TaskDataset:
    """Trials sharing one hidden parameter vector."""

    rho: np.ndarray            # [d_rho] float64
    trials: list = field(default_factory=list)


@dataclass
class MetaDataset:
    tasks: list
    topology: Topology
    splits: dict
    horizon: int
    seed: int
    trials_per_task: int

    def split_tasks(self, name: str) -> list:
        return [self.tasks[i] for i in self.splits[name]]

    @property
    def dim(self) -> int:
        return self.tasks[0].trials[0].dim


def collider_path(world: SpringWorld) -> tuple[np.ndarray, np.ndarray]:
    """Center positions and velocities at substep resolution.

    Half-sine vertical approach from below: the center rises until the disc
    top reaches ``push_depth`` above the plate's lower edge, then retreats.
    """
    start_y = 0.40 - world.collider_radius
    peak_y = world.plate_y[0] + world.push_depth - world.collider_radius
    amplitude = peak_y - start_y
    total = world.horizon * world.substeps
    tau = np.arange(total + 1, dtype=np.float64) / total
    y = start_y + amplitude * np.sin(np.pi * tau)
    centers = np.stack([np.full(total + 1, world.collider_x), y], axis=1)
    duration = world.horizon * world.frame_dt
    vy = amplitude * np.pi / duration * np.cos(np.pi * tau)
    velocities = np.stack([np.zeros(total + 1), vy], axis=1)
    return centers, velocities


def ring_offsets(world: SpringWorld) -> np.ndarray:
    angles = 2.0 * np.pi * np.arange(world.num_external) / world.num_external
    return world.collider_radius * np.stack([np.cos(angles), np.sin(angles)], axis=1)


def mechanical_energy(world: SpringWorld, pos: np.ndarray, vel: np.ndarray) -> float:
    """Kinetic + elastic + gravitational energy of the plate (no contact terms)."""
    _, springs, rest, _ = plate_geometry(world)
    kinetic = 0.5 * world.mass * float(np.sum(vel * vel))
    delta = pos[springs[:, 1]] - pos[springs[:, 0]]
    length = np.linalg.norm(delta, axis=1)
    elastic = 0.5 * world.stiffness * float(np.sum((length - rest) ** 2))
    potential = world.mass * world.gravity * float(np.sum(pos[:, 1]))
    return kinetic + elastic + potential


def simulate_trial(world: SpringWorld, record_energy: bool = False):
    """Integrate one trial; returns a :class:`Trial` (plus per-frame energies
    when ``record_energy``). Bit-deterministic for a given world."""
    world.validate()
    pos, springs, rest, fixed = plate_geometry(world)
    spring_i = np.ascontiguousarray(springs[:, 0])
    spring_j = np.ascontiguousarray(springs[:, 1])
    gravity = np.array([0.0, -world.gravity])
    vel = np.zeros_like(pos)
    centers, center_vels = collider_path(world)
    offsets = ring_offsets(world)
    dt = world.frame_dt / world.substeps

    t_frames = world.horizon
    y_p = np.zeros((t_frames, world.num_deformable, 2), dtype=np.float32)
    y_v = np.zeros_like(y_p)
    energies = [mechanical_energy(world, pos, vel)] if record_energy else None

    center = centers[0].copy()
    p0 = pos.astype(np.float32)
    v0 = vel.astype(np.float32)
    for frame in range(t_frames):
        base = frame * world.substeps
        # piecewise-constant center velocity per substep reproduces the path
        for s in range(world.substeps):
            cvel = np.ascontiguousarray((centers[base + s + 1] - centers[base + s]) / dt)
            backend.spring_substeps(
                pos, vel, spring_i, spring_j, rest,
                world.stiffness, world.spring_damping, world.viscous_damping,
                world.mass, gravity, fixed,
                center, cvel, world.collider_radius, world.contact_stiffness,
                dt, 1)
        if np.abs(pos).max() > 10.0:
            raise SimulationUnstableError(
                f"positions left the 10x box at frame {frame} "
                f"(stiffness {world.stiffness:.1f}, max |p| = {np.abs(pos).max():.2f})")
        y_p[frame] = pos
        y_v[frame] = vel
        if record_energy:
            energies.append(mechanical_energy(world, pos, vel))

    frame_idx = np.arange(t_frames + 1) * world.substeps
    p_ext = (centers[frame_idx, None, :] + offsets[None, :, :]).astype(np.float32)
    v_ext = np.broadcast_to(center_vels[frame_idx, None, :],
                            p_ext.shape).astype(np.float32)
    h = np.zeros((world.num_deformable + world.num_external, 1), dtype=np.float32)
    h[:world.num_deformable, 0] = fixed.astype(np.float32)
    trial = Trial(p0=p0, v0=v0, p_ext=p_ext, v_ext=np.ascontiguousarray(v_ext),
                  h=h, y_p=y_p, y_v=y_v)
    if record_energy:
        return trial, np.array(energies)
    return trial


def sample_world(seed: int, task: int, trial: int, stiffness: float,
                 base: SpringWorld | None = None) -> SpringWorld:
    """Trial-level variation: collider position, radius, and push depth."""
    rng = substream(seed, _STREAM_TRIAL, task, trial)
    proto = base or SpringWorld()
    return dataclasses.replace(
        proto,
        stiffness=stiffness,
        collider_x=rng.uniform(0.36, 0.64),
        collider_radius=rng.uniform(0.06, 0.10),
        push_depth=rng.uniform(0.06, 0.12),
    )


def sample_stiffness(seed: int, task: int, low: float = 300.0,
                     high: float = 3000.0) -> float:
    rng = substream(seed, _STREAM_TASK, task)
    return float(np.exp(rng.uniform(np.log(low), np.log(high))))


def generate_meta_dataset(num_tasks: int, trials_per_task: int = 16,
                          horizon: int = 50, seed: int = 0,
                          splits: dict | None = None,
                          base_world: SpringWorld | None = None) -> MetaDataset:
    """Generate tasks with log-uniform hidden stiffness and task-level splits.

    Split assignment is by task index so no hidden parameter leaks from the
    training split into validation or test.
    """
    if num_tasks < 1:
        raise ValueError("need at least one task")
    proto = base_world or SpringWorld()
    proto = dataclasses.replace(proto, horizon=horizon)
    tasks = []
    for task_idx in range(num_tasks):
        stiffness = sample_stiffness(seed, task_idx)
        trials = []
        for trial_idx in range(trials_per_task):
            world = sample_world(seed, task_idx, trial_idx, stiffness, proto)
            trials.append(simulate_trial(world))
        tasks.append(TaskDataset(rho=np.array([stiffness], dtype=np.float64),
                                 trials=trials))
    if splits is None:
        n_val = max(1, num_tasks // 10) if num_tasks >= 3 else 0
        n_test = n_val
        n_train = num_tasks - n_val - n_test
        splits = {
            "train": list(range(n_train)),
            "val": list(range(n_train, n_train + n_val)),
            "test": list(range(n_train + n_val, num_tasks)),
        }
    return MetaDataset(tasks=tasks, topology=build_topology(proto), splits=splits,
                       horizon=horizon, seed=seed, trials_per_task=trials_per_task)


# ---------------------------------------------------------------------------
# on-disk format: manifest.json + one binary file per task


def _write_array(buf, name: str, arr: np.ndarray) -> None:
    encoded = name.encode()
    buf.write(struct.pack("<H", len(encoded)))
    buf.write(encoded)
    buf.write(struct.pack("<B", arr.ndim))
    buf.write(np.asarray(arr.shape, dtype="<i8").tobytes())
    buf.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())


def _read_exact(buf, n: int) -> bytes:
    data = buf.read(n)
    if len(data) != n:
        raise DatasetTruncatedError(f"expected {n} bytes, got {len(data)}")
    return data


def _read_array(buf, expected_name: str) -> np.ndarray:
    (name_len,) = struct.unpack("<H", _read_exact(buf, 2))
    try:
        name = _read_exact(buf, name_len).decode()
    except UnicodeDecodeError as err:
        raise DatasetShapeError(f"unreadable array name near {expected_name!r}") from err
    if name != expected_name:
        raise DatasetShapeError(f"expected array {expected_name!r}, found {name!r}")
    (ndim,) = struct.unpack("<B", _read_exact(buf, 1))
    if ndim > 8:
        raise DatasetShapeError(f"{name}: implausible rank {ndim}")
    shape = np.frombuffer(_read_exact(buf, 8 * ndim), dtype="<i8")
    if (shape < 0).any() or (ndim and int(np.prod(shape)) > 10 ** 9):
        raise DatasetShapeError(f"{name}: implausible shape {shape.tolist()}")
    count = int(np.prod(shape)) if ndim else 1
    data = np.frombuffer(_read_exact(buf, 4 * count), dtype="<f4")
    return data.reshape(shape).copy()


def write_dataset(meta: MetaDataset, path) -> None:
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    topo = meta.topology
    sample = meta.tasks[0].trials[0]
    manifest = {
        "schema_version": SCHEMA_VERSION,
        "seed": meta.seed,
        "num_tasks": len(meta.tasks),
        "trials_per_task": meta.trials_per_task,
        "horizon": meta.horizon,
        "num_deformable": topo.num_deformable,
        "num_external": topo.num_external,
        "dim": sample.dim,
        "static_feat_dim": int(sample.h.shape[1]),
        "splits": meta.splits,
        "topology": {
            "senders": topo.senders.tolist(),
            "receivers": topo.receivers.tolist(),
            "edge_static": topo.edge_static.tolist(),
        },
        "tasks": [
            {"file": f"task_{i:04d}.bin", "rho": task.rho.tolist()}
            for i, task in enumerate(meta.tasks)
        ],
    }
    (path / "manifest.json").write_text(json.dumps(manifest, indent=1))
    for i, task in enumerate(meta.tasks):
        with open(path / f"task_{i:04d}.bin", "wb") as fh:
            fh.write(TASK_MAGIC)
            fh.write(struct.pack("<B", SCHEMA_VERSION))
            fh.write(struct.pack("<I", task.rho.size))
            fh.write(np.ascontiguousarray(task.rho, dtype="<f8").tobytes())
            sample = task.trials[0]
            fh.write(struct.pack(
                "<6I", len(task.trials), sample.horizon, sample.num_deformable,
                topo.num_external, sample.dim, sample.h.shape[1]))
            for trial in task.trials:
                for name in TRIAL_ARRAYS:
                    _write_array(fh, name, getattr(trial, name))


def _read_task_file(path, expected_rho) -> TaskDataset:
    with open(path, "rb") as fh:
        magic = _read_exact(fh, len(TASK_MAGIC))
        if magic != TASK_MAGIC:
            raise DatasetVersionError(f"{path}: bad magic {magic!r}")
        (version,) = struct.unpack("<B", _read_exact(fh, 1))
        if version != SCHEMA_VERSION:
            raise DatasetVersionError(
                f"{path}: schema version {version}, expected {SCHEMA_VERSION}")
        (d_rho,) = struct.unpack("<I", _read_exact(fh, 4))
        rho = np.frombuffer(_read_exact(fh, 8 * d_rho), dtype="<f8").copy()
        if expected_rho is not None and not np.array_equal(rho, expected_rho):
            raise DatasetShapeError(f"{path}: rho disagrees with manifest")
        n_trials, t, n, n_ext, d, d_h = struct.unpack("<6I", _read_exact(fh, 24))
        trials = []
        for _ in range(n_trials):
            arrays = {name: _read_array(fh, name) for name in TRIAL_ARRAYS}
            trials.append(Trial(**arrays))
        if fh.read(1):
            raise DatasetShapeError(f"{path}: trailing bytes after last trial")
    task = TaskDataset(rho=rho, trials=trials)
    for trial in trials:
        got = (trial.horizon, trial.num_deformable, trial.dim, trial.h.shape[1])
        if got != (t, n, d, d_h):
            raise DatasetShapeError(f"{path}: trial shapes {got} disagree with header")
    return task


def read_dataset(path) -> MetaDataset:
    path = Path(path)
    try:
        manifest = json.loads((path / "manifest.json").read_text())
    except FileNotFoundError as err:
        raise DatasetError(f"no manifest.json under {path}") from err
    if manifest.get("schema_version") != SCHEMA_VERSION:
        raise DatasetVersionError(
            f"manifest schema {manifest.get('schema_version')}, "
            f"expected {SCHEMA_VERSION}")
    topo_info = manifest["topology"]
    topo = Topology(
        manifest["num_deformable"], manifest["num_external"],
        np.array(topo_info["senders"], dtype=np.int64),
        np.array(topo_info["receivers"], dtype=np.int64),
        np.array(topo_info["edge_static"], dtype=np.float32))
    tasks = []
    for entry in manifest["tasks"]:
        task = _read_task_file(path / entry["file"],
                               np.asarray(entry["rho"], dtype=np.float64))
        for trial in task.trials:
            trial.validate(topo)
            if trial.horizon != manifest["horizon"]:
                raise DatasetShapeError(
                    f"{entry['file']}: horizon {trial.horizon} disagrees with "
                    f"manifest {manifest['horizon']}")
        tasks.append(task)
    return MetaDataset(tasks=tasks, topology=topo,
                       splits={k: list(v) for k, v in manifest["splits"].items()},
                       horizon=manifest["horizon"], seed=manifest["seed"],
                       trials_per_task=manifest["trials_per_task"])


def dataset_digest(path) -> str:
    """SHA-256 over the manifest and every task file, for report traceability."""
    path = Path(path)
    digest = hashlib.sha256()
    digest.update((path / "manifest.json").read_bytes())
    manifest = json.loads((path / "manifest.json").read_text())
    for entry in manifest["tasks"]:
        digest.update((path / entry["file"]).read_bytes())
    return digest.hexdigest()
