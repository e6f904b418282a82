"""Demonstration files and windowed sampling.

File layout (all little-endian), see docs/formats.md:

    magic      4 bytes  b"VODP"
    version    u32      1
    episodes   u32
    J          u32
    image_h    u32
    image_w    u32
    t_capable  u32      1 = whole frame sequences stored, any history length can be windowed
    meta_len   u32      then meta_len bytes of UTF-8 JSON (generator settings)
    per episode:
        length u32, then `length` frames of
        {image f32[H*W*3], state f32[J], action f32[J]}
"""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import env as toyenv

MAGIC = b"VODP"
VERSION = 1
_HEADER = struct.Struct("<4sIIIIII")
_U32 = struct.Struct("<I")


class DatasetError(IOError):
    pass


@dataclass
class Episode:
    images: np.ndarray  # (L, H, W, 3) float32
    states: np.ndarray  # (L, J) float32
    actions: np.ndarray  # (L, J) float32

    def __len__(self) -> int:
        return len(self.actions)


@dataclass
class DemoDataset:
    episodes: list[Episode]
    image_hw: tuple[int, int]
    action_dim: int
    meta: dict = field(default_factory=dict)

    @property
    def num_frames(self) -> int:
        return sum(len(e) for e in self.episodes)

    def windows(self) -> np.ndarray:
        """Every valid (episode, offset) pair, one per frame, as an (M, 2) int array."""
        pairs = [(i, t) for i, ep in enumerate(self.episodes) for t in range(len(ep))]
        return np.array(pairs, dtype=np.int64).reshape(-1, 2)

    def all_states(self) -> np.ndarray:
        return np.concatenate([e.states for e in self.episodes])

    def all_actions(self) -> np.ndarray:
        return np.concatenate([e.actions for e in self.episodes])

    def batch(self, pairs: np.ndarray, history: int, horizon: int):
        """Materialise windows: images (B,T,H,W,3), states (B,T,J), actions (B,N,J).

        Observation history before the episode start repeats the first frame;
        action targets past the end repeat the last action.
        """
        images, states, actions = [], [], []
        for ep_idx, t in pairs:
            ep = self.episodes[ep_idx]
            obs_idx = np.clip(np.arange(t - history + 1, t + 1), 0, None)
            act_idx = np.clip(np.arange(t, t + horizon), None, len(ep) - 1)
            images.append(ep.images[obs_idx])
            states.append(ep.states[obs_idx])
            actions.append(ep.actions[act_idx])
        return np.stack(images), np.stack(states), np.stack(actions)


def generate_demos(
    count: int,
    seed0: int,
    robustness: toyenv.RobustnessConfig = toyenv.RobustnessConfig(),
    perturb: bool = False,
) -> DemoDataset:
    """Scripted-expert episodes for seeds ``seed0 .. seed0 + count - 1``."""
    episodes = []
    for seed in range(seed0, seed0 + count):
        images, states, actions, success = toyenv.run_expert(seed, robustness, perturb=perturb)
        if not success:
            raise RuntimeError(f"scripted expert failed on seed {seed}")
        episodes.append(Episode(images.astype(np.float32), states.astype(np.float32), actions.astype(np.float32)))
    meta = {"count": count, "seed0": seed0, "robustness": robustness.to_dict(), "perturb": perturb}
    return DemoDataset(episodes, (toyenv.IMAGE_SIZE, toyenv.IMAGE_SIZE), toyenv.ACTION_DIM, meta)


def _frame_dtype(h: int, w: int, j: int) -> np.dtype:
    return np.dtype([("image", "<f4", (h, w, 3)), ("state", "<f4", (j,)), ("action", "<f4", (j,))])


def save_demos(dataset: DemoDataset, path) -> str:
    """Write ``dataset`` to ``path`` and return the file's SHA-256."""
    path = Path(path)
    h, w = dataset.image_hw
    j = dataset.action_dim
    frame = _frame_dtype(h, w, j)
    meta = json.dumps(dataset.meta, sort_keys=True).encode("utf-8")
    digest = hashlib.sha256()
    try:
        with open(path, "wb") as fh:

            def emit(b: bytes):
                fh.write(b)
                digest.update(b)

            emit(_HEADER.pack(MAGIC, VERSION, len(dataset.episodes), j, h, w, 1))
            emit(_U32.pack(len(meta)))
            emit(meta)
            for ep in dataset.episodes:
                rec = np.empty(len(ep), dtype=frame)
                rec["image"] = ep.images
                rec["state"] = ep.states
                rec["action"] = ep.actions
                emit(_U32.pack(len(ep)))
                emit(rec.tobytes())
    except OSError as exc:
        raise DatasetError(f"cannot write demonstrations to {path}: {exc.strerror or exc}") from exc
    return digest.hexdigest()


def read_header(buf: bytes, path="<buffer>") -> tuple[dict, int]:
    if len(buf) < _HEADER.size + _U32.size:
        raise DatasetError(f"{path}: truncated header")
    magic, version, count, j, h, w, t_capable = _HEADER.unpack_from(buf, 0)
    if magic != MAGIC:
        raise DatasetError(f"{path}: bad magic {magic!r}, expected {MAGIC!r}")
    if version != VERSION:
        raise DatasetError(f"{path}: unsupported version {version}")
    off = _HEADER.size
    (meta_len,) = _U32.unpack_from(buf, off)
    off += _U32.size
    meta = json.loads(buf[off : off + meta_len].decode("utf-8"))
    header = {"version": version, "episodes": count, "J": j, "image_h": h, "image_w": w, "t_capable": t_capable, "meta": meta}
    return header, off + meta_len


def load_demos(path) -> DemoDataset:
    path = Path(path)
    try:
        buf = path.read_bytes()
    except OSError as exc:
        raise DatasetError(f"cannot read demonstrations from {path}: {exc.strerror or exc}") from exc
    header, off = read_header(buf, path)
    h, w, j = header["image_h"], header["image_w"], header["J"]
    frame = _frame_dtype(h, w, j)
    episodes = []
    for i in range(header["episodes"]):
        if off + _U32.size > len(buf):
            raise DatasetError(f"{path}: truncated before episode {i}")
        (length,) = _U32.unpack_from(buf, off)
        off += _U32.size
        end = off + length * frame.itemsize
        if end > len(buf):
            raise DatasetError(f"{path}: episode {i} truncated")
        rec = np.frombuffer(buf, dtype=frame, count=length, offset=off)
        episodes.append(Episode(rec["image"].copy(), rec["state"].copy(), rec["action"].copy()))
        off = end
    if off != len(buf):
        raise DatasetError(f"{path}: {len(buf) - off} trailing bytes")
    return DemoDataset(episodes, (h, w), j, header["meta"])


def file_checksum(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()
