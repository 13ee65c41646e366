"""Training drivers that record trajectories, plus a checksummed binary format."""

from __future__ import annotations

import hashlib
import io
import json
import struct
import tempfile
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .autodiff import ModelSpec, forward, loss_and_grad
from .optimizers import BatchSampler, OptimizerConfig, OptimizerState, init_state, sample_batch, step

MAGIC = b"PKTRAJ\x00\x01"
FORMAT_VERSION = 1
MEMORY_BUDGET = 10_000_000  # floats kept in RAM before snapshots spill to a memmap
CHUNK_RUNS = 64  # runs advanced together; fixed so results never depend on thread count


class TrajectoryFormatError(ValueError):
    pass


class VersionError(TrajectoryFormatError):
    pass


class ChecksumError(TrajectoryFormatError):
    pass


@dataclass
class Snapshot:
    step: int
    time: float
    params: np.ndarray
    state: dict  # moment buffers before this step
    applied: dict  # moment buffers produced by this step (empty at the final step)
    batch: np.ndarray | None
    batch_loss: float
    full_loss: float | None


@dataclass
class TrajectoryRecord:
    """Snapshots of one run.

    ``steps`` are the recorded step indices, ``params[i]`` is the parameter
    vector at ``steps[i]``.  ``state`` holds moment buffers *entering* each
    recorded step and ``applied`` the buffers that step produced (the ones
    its update divided by).  Batches, per-step rates and batch losses are
    kept for every step regardless of the stride.
    """

    run_id: str
    model: ModelSpec
    config: OptimizerConfig
    stride: int
    steps: np.ndarray
    params: np.ndarray
    state: dict = field(default_factory=dict)
    applied: dict = field(default_factory=dict)
    batches: np.ndarray = None  # (K, B) int64
    etas: np.ndarray = None  # (K,)
    batch_losses: np.ndarray = None  # (K,)
    full_losses: np.ndarray | None = None  # (K+1,)
    diverged: bool = False
    seed: int = 0
    dataset: str = ""

    @property
    def times(self):
        return self.steps * self.config.eta

    @property
    def n_snapshots(self):
        return len(self.steps)

    @property
    def final_params(self):
        return self.params[-1]

    def index_of(self, k):
        i = int(np.searchsorted(self.steps, k))
        if i >= len(self.steps) or self.steps[i] != k:
            raise KeyError(f"step {k} was not recorded (stride {self.stride})")
        return i

    def snapshot(self, i):
        k = int(self.steps[i])
        has_step = k < len(self.batch_losses)
        return Snapshot(
            k, k * self.config.eta, self.params[i],
            {n: a[i] for n, a in self.state.items()},
            {n: a[i] for n, a in self.applied.items()} if has_step else {},
            self.batches[k] if has_step else None,
            float(self.batch_losses[k]) if has_step else float("nan"),
            None if self.full_losses is None else float(self.full_losses[k]),
        )

    def __iter__(self):
        return (self.snapshot(i) for i in range(self.n_snapshots))

    def equals(self, other):
        """Bitwise equality of every field."""
        if (self.run_id, self.stride, self.diverged, self.seed, self.dataset) != (
            other.run_id, other.stride, other.diverged, other.seed, other.dataset):
            return False
        if self.model != other.model or self.config != other.config:
            return False
        pairs = [(self.steps, other.steps), (self.params, other.params), (self.batches, other.batches),
                 (self.etas, other.etas), (self.batch_losses, other.batch_losses)]
        if (self.full_losses is None) != (other.full_losses is None):
            return False
        if self.full_losses is not None:
            pairs.append((self.full_losses, other.full_losses))
        for name in ("state", "applied"):
            a, b = getattr(self, name), getattr(other, name)
            if a.keys() != b.keys():
                return False
            pairs += [(a[n], b[n]) for n in a]
        return all(x.shape == y.shape and np.array_equal(x, y, equal_nan=True) for x, y in pairs)


def _recorded_steps(K, stride):
    if stride < 1:
        raise ValueError("record stride must be >= 1")
    s = list(range(0, K + 1, stride))
    if s[-1] != K:
        s.append(K)
    return np.array(s, dtype=np.int64)


def _alloc(shape):
    n = int(np.prod(shape))
    if n <= MEMORY_BUDGET:
        return np.empty(shape)
    fh = tempfile.NamedTemporaryFile(prefix="pktraj-", suffix=".bin", delete=False)
    fh.close()
    return np.memmap(fh.name, dtype=np.float64, mode="w+", shape=shape)


def _run_chunk(model, dataset, cfg, seeds, stride, theta0, full_loss):
    X, Y = dataset.inputs, dataset.targets
    N = dataset.n
    K = cfg.steps
    B = cfg.resolve_batch(N)
    P = len(seeds)
    d = model.n_params
    rec_steps = _recorded_steps(K, stride)
    slot = {int(k): i for i, k in enumerate(rec_steps)}
    theta0 = np.asarray(theta0, dtype=np.float64)
    state = init_state(cfg, np.broadcast_to(theta0, (P, d)).copy())
    names = list(state.moments())

    params = [_alloc((len(rec_steps), d)) for _ in range(P)]
    pre = [{n: _alloc((len(rec_steps), d)) for n in names} for _ in range(P)]
    post = [{n: np.full((len(rec_steps), d), np.nan) for n in names} for _ in range(P)]
    batches = np.empty((P, K, B), dtype=np.int64)
    blosses = np.full((P, K), np.nan)
    flosses = np.full((P, K + 1), np.nan) if full_loss else None
    etas = np.array([cfg.step_eta(k) for k in range(K)])
    dead_at = np.full(P, -1)
    samplers = [BatchSampler(N, B, s) for s in seeds]

    def record(k, st):
        i = slot[k]
        for p in range(P):
            if dead_at[p] < 0:
                params[p][i] = st.params[p]
                for n, a in st.moments().items():
                    pre[p][n][i] = a[p]

    def check(k, values):
        bad = ~np.isfinite(values)
        newly = bad & (dead_at < 0)
        dead_at[newly] = k

    with np.errstate(all="ignore"):
        record(0, state)
        if full_loss:
            flosses[:, 0] = _full_loss(model, state.params, X, Y)
        for k in range(K):
            idx = np.stack([sample_batch(s, k) for s in samplers])
            batches[:, k] = idx
            lg = loss_and_grad(model, state.params, X[idx], Y[idx], check_finite=False)
            blosses[:, k] = lg.loss
            new = step(cfg, state, lg.grad, etas[k], check_finite=False)
            if k in slot:
                i = slot[k]
                for p in range(P):
                    for n, a in new.moments().items():
                        post[p][n][i] = a[p]
            check(k + 1, new.params.sum(axis=1) + lg.loss)
            state = new
            if full_loss:
                flosses[:, k + 1] = _full_loss(model, state.params, X, Y)
            if k + 1 in slot:
                record(k + 1, state)

    out = []
    for p, seed in enumerate(seeds):
        keep = rec_steps if dead_at[p] < 0 else rec_steps[rec_steps < dead_at[p]]
        n = len(keep)
        kmax = K if dead_at[p] < 0 else max(int(dead_at[p]) - 1, 0)
        out.append(TrajectoryRecord(
            run_id=f"{cfg.kind}-seed{seed}",
            model=model, config=cfg.with_(seed=int(seed)), stride=stride,
            steps=keep.copy(), params=params[p][:n],
            state={nm: a[:n] for nm, a in pre[p].items()},
            applied={nm: a[:n] for nm, a in post[p].items()},
            batches=batches[p, :kmax].copy(), etas=etas[:kmax].copy(),
            batch_losses=blosses[p, :kmax].copy(),
            full_losses=None if flosses is None else flosses[p, :kmax + 1].copy(),
            diverged=bool(dead_at[p] >= 0), seed=int(seed), dataset=dataset.name,
        ))
    return out


def _full_loss(model, thetas, X, Y):
    f = forward(model, thetas, X, check_finite=False)
    r = f - Y
    per = (r * r).sum(axis=-1)
    return np.cumsum(per, axis=-1)[..., -1] / X.shape[0]


def train_and_record(model, dataset, cfg, record_stride=1, theta0=None, full_loss=True):
    """Run ``cfg.steps`` updates from ``theta0`` and record every ``record_stride``-th snapshot."""
    if theta0 is None:
        raise ValueError("an initial parameter vector is required")
    return _run_chunk(model, dataset, cfg, [cfg.seed], record_stride, theta0, full_loss)[0]


def run_seeds(cfg, n_seeds):
    return [cfg.seed + i for i in range(n_seeds)]


def monte_carlo_runs(model, dataset, cfg, n_seeds, theta0, record_stride=1, full_loss=False, threads=1):
    """Independent runs sharing ``theta0`` whose batch samplers use seeds ``cfg.seed + i``."""
    if n_seeds < 1:
        raise ValueError("n_seeds must be >= 1")
    seeds = run_seeds(cfg, n_seeds)
    chunks = [seeds[i:i + CHUNK_RUNS] for i in range(0, n_seeds, CHUNK_RUNS)]
    job = lambda ch: _run_chunk(model, dataset, cfg, ch, record_stride, theta0, full_loss)  # noqa: E731
    if threads > 1 and len(chunks) > 1:
        with ThreadPoolExecutor(max_workers=threads) as ex:
            parts = list(ex.map(job, chunks))
    else:
        parts = [job(ch) for ch in chunks]
    return [r for part in parts for r in part]


def replay(record, dataset, index):
    """Recompute the snapshot after ``record.steps[index]`` from the stored state and batches.

    Returns ``(step, params, moments)`` at the next recorded step.
    """
    cfg = record.config
    k0 = int(record.steps[index])
    k1 = int(record.steps[index + 1])
    state = OptimizerState(record.params[index].copy(),
                           record.state.get("momentum", [None] * (index + 1))[index],
                           record.state.get("second_moment", [None] * (index + 1))[index], k0)
    if state.momentum is not None:
        state.momentum = state.momentum.copy()
    if state.second_moment is not None:
        state.second_moment = state.second_moment.copy()
    X, Y = dataset.inputs, dataset.targets
    for k in range(k0, k1):
        idx = record.batches[k]
        lg = loss_and_grad(record.model, state.params[None], X[idx][None], Y[idx][None], check_finite=False)
        st = OptimizerState(state.params[None], *(None if a is None else a[None] for a in (state.momentum, state.second_moment)), k)
        new = step(cfg, st, lg.grad, record.etas[k], check_finite=False)
        state = OptimizerState(new.params[0], *(None if a is None else a[0] for a in (new.momentum, new.second_moment)), k + 1)
    return k1, state.params, state.moments()


# --- binary format -----------------------------------------------------------

def _arrays(record):
    arrs = [("steps", record.steps), ("params", np.asarray(record.params)), ("batches", record.batches),
            ("etas", record.etas), ("batch_losses", record.batch_losses)]
    if record.full_losses is not None:
        arrs.append(("full_losses", record.full_losses))
    for n in sorted(record.state):
        arrs.append((f"state.{n}", np.asarray(record.state[n])))
    for n in sorted(record.applied):
        arrs.append((f"applied.{n}", np.asarray(record.applied[n])))
    return arrs


def dumps(record):
    arrs = _arrays(record)
    header = {
        "run_id": record.run_id, "model": record.model.to_dict(), "model_digest": record.model.digest(),
        "config": record.config.to_dict(), "stride": record.stride, "diverged": record.diverged,
        "seed": record.seed, "dataset": record.dataset,
        "arrays": [{"name": n, "dtype": "<i8" if a.dtype.kind in "iu" else "<f8", "shape": list(a.shape)} for n, a in arrs],
    }
    hb = json.dumps(header, sort_keys=True).encode()
    buf = io.BytesIO()
    buf.write(MAGIC)
    buf.write(struct.pack("<IQ", FORMAT_VERSION, len(hb)))
    buf.write(hb)
    for (n, a), spec in zip(arrs, header["arrays"]):
        buf.write(np.ascontiguousarray(a, dtype=spec["dtype"]).tobytes())
    body = buf.getvalue()
    return body + hashlib.sha256(body).digest()


def loads(blob, expected_version=FORMAT_VERSION):
    if len(blob) < len(MAGIC) + 12 + 32 or blob[:len(MAGIC)] != MAGIC:
        raise TrajectoryFormatError("not a trajectory file")
    version, hlen = struct.unpack_from("<IQ", blob, len(MAGIC))
    if version != expected_version:
        raise VersionError(f"trajectory format version {version}, reader expects {expected_version}")
    body, digest = blob[:-32], blob[-32:]
    if hashlib.sha256(body).digest() != digest:
        raise ChecksumError("trajectory checksum mismatch")
    off = len(MAGIC) + 12
    header = json.loads(body[off:off + hlen])
    off += hlen
    arrays = {}
    for spec in header["arrays"]:
        dt = np.dtype(spec["dtype"])
        n = int(np.prod(spec["shape"]))
        arrays[spec["name"]] = np.frombuffer(body, dtype=dt, count=n, offset=off).reshape(spec["shape"]).astype(dt.newbyteorder("="))
        off += n * dt.itemsize
    return TrajectoryRecord(
        run_id=header["run_id"], model=ModelSpec.from_dict(header["model"]),
        config=OptimizerConfig.from_dict(header["config"]), stride=header["stride"],
        steps=arrays["steps"], params=arrays["params"],
        state={k[6:]: v for k, v in arrays.items() if k.startswith("state.")},
        applied={k[8:]: v for k, v in arrays.items() if k.startswith("applied.")},
        batches=arrays["batches"], etas=arrays["etas"], batch_losses=arrays["batch_losses"],
        full_losses=arrays.get("full_losses"), diverged=header["diverged"], seed=header["seed"],
        dataset=header["dataset"],
    )


def save(record, path):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(dumps(record))
    return path


def load(path, expected_version=FORMAT_VERSION):
    return loads(Path(path).read_bytes(), expected_version)
