"""On-stream training schedule: sequence sort, split, lane padding, DTSL."""

from __future__ import annotations

import json
from collections import defaultdict
from dataclasses import dataclass, field
from typing import Iterable, Iterator

import numpy as np


@dataclass(frozen=True, order=True)
class SampleIndex:
    sequence_id: str
    frame_index: int
    labeled: bool = field(default=True, compare=False)

    def __post_init__(self):
        if self.frame_index < 0:
            raise ValueError("frame_index must be >= 0")


@dataclass(frozen=True)
class Segment:
    frames: tuple[SampleIndex, ...]
    replicated: bool = False

    @property
    def sequence_id(self) -> str:
        return self.frames[0].sequence_id

    def __len__(self):
        return len(self.frames)

    def resets(self) -> list[bool]:
        return [i == 0 for i in range(len(self.frames))]


@dataclass
class Schedule:
    batch_size: int
    target_len: int
    lanes: list[list[Segment]]

    def lane_frames(self, lane: int) -> list[tuple[SampleIndex, bool]]:
        """Flattened (sample, reset) stream a lane consumes in order."""
        out = []
        for seg in self.lanes[lane]:
            out.extend(zip(seg.frames, seg.resets()))
        return out

    def iterations(self) -> Iterator[list[tuple[SampleIndex, bool] | None]]:
        """Lock-step rows over lanes; exhausted lanes yield ``None``."""
        streams = [self.lane_frames(k) for k in range(self.batch_size)]
        for i in range(max((len(s) for s in streams), default=0)):
            yield [s[i] if i < len(s) else None for s in streams]

    def records(self) -> list[dict]:
        rows = []
        for lane, segs in enumerate(self.lanes):
            for s, seg in enumerate(segs):
                for f, reset in zip(seg.frames, seg.resets()):
                    rows.append({"lane": lane, "segment": s, "seq": f.sequence_id,
                                 "frame": f.frame_index, "reset": reset})
        return rows

    def to_jsonl(self) -> str:
        return "".join(json.dumps(r, separators=(",", ":")) + "\n" for r in self.records())

    def validate(self):
        counts = {len(segs) for segs in self.lanes}
        if len(counts) > 1:
            raise AssertionError(f"lanes have unequal segment counts {counts}")
        for segs in self.lanes:
            for seg in segs:
                if len({f.sequence_id for f in seg.frames}) != 1:
                    raise AssertionError("segment spans sequences")
                idx = [f.frame_index for f in seg.frames]
                if any(b <= a for a, b in zip(idx, idx[1:])):
                    raise AssertionError("frame_index not strictly increasing in segment")


@dataclass(frozen=True)
class DtslConfig:
    l_max: int
    ep_all: int
    ep_cur: int = 0

    def __post_init__(self):
        if self.l_max < 1:
            raise ValueError("l_max must be >= 1")
        if self.ep_all < 1:
            raise ValueError("ep_all must be >= 1")
        if not 0 <= self.ep_cur <= self.ep_all:
            raise ValueError("ep_cur must lie in [0, ep_all]")


def dtsl_length(cfg: DtslConfig) -> int:
    """Segment length for the current epoch.

    max(1, floor(l_max * min(1, max(0, 2 * ep_cur / ep_all - 0.5))))
    """
    return int(dtsl_lengths(cfg.l_max, cfg.ep_all, cfg.ep_cur))


def dtsl_lengths(l_max, ep_all, ep_cur) -> np.ndarray:
    """Vectorized DTSL in exact integer arithmetic.

    The ramp is (4 * ep_cur - ep_all) / (2 * ep_all); clamping its numerator
    to [0, 2 * ep_all] keeps the floor exact where floats would round.
    """
    l_max, ep_all, ep_cur = np.broadcast_arrays(*(np.asarray(a, dtype=np.int64) for a in (l_max, ep_all, ep_cur)))
    num = np.clip(4 * ep_cur - ep_all, 0, 2 * ep_all)
    return np.maximum(1, (l_max * num) // (2 * ep_all))


def sort_sequences(samples: Iterable[SampleIndex]) -> dict[str, list[SampleIndex]]:
    """Group by sequence (first-seen order) with ascending frame index.

    All frames are kept; ``labeled`` only gates the loss downstream.
    """
    groups: dict[str, list[SampleIndex]] = defaultdict(list)
    seen = set()
    for s in samples:
        key = (s.sequence_id, s.frame_index)
        if key in seen:
            raise ValueError(f"duplicate sample {key}")
        seen.add(key)
        groups[s.sequence_id].append(s)
    return {k: sorted(v, key=lambda s: s.frame_index) for k, v in groups.items()}


def split_and_pad(streams: dict[str, list[SampleIndex]], target_len: int, batch_size: int,
                  rng_seed: int) -> Schedule:
    """Cut streams into segments, pad by random replication, deal to lanes."""
    if target_len < 1 or batch_size < 1:
        raise ValueError("target_len and batch_size must be >= 1")
    if not streams or not any(streams.values()):
        raise ValueError("no streams to schedule")
    segments = []
    for seq_id in sorted(streams):
        frames = streams[seq_id]
        for start in range(0, len(frames), target_len):
            segments.append(Segment(tuple(frames[start:start + target_len])))
    rng = np.random.Generator(np.random.PCG64(rng_seed))
    n_unique = len(segments)
    n_pad = (-n_unique) % batch_size
    if n_pad:
        picks = rng.choice(n_unique, size=n_pad, replace=n_pad > n_unique)
        segments.extend(Segment(segments[int(i)].frames, replicated=True) for i in picks)
    order = rng.permutation(len(segments))
    lanes: list[list[Segment]] = [[] for _ in range(batch_size)]
    for k, i in enumerate(order):
        lanes[k % batch_size].append(segments[int(i)])
    return Schedule(batch_size, target_len, lanes)


def epoch_seed(base_seed: int, ep_cur: int) -> int:
    return int(np.random.SeedSequence([base_seed, ep_cur]).generate_state(1)[0])


def epoch_schedule(manifest: Iterable[SampleIndex], cfg: DtslConfig, batch_size: int, seed: int,
                   dtsl: bool = True) -> Schedule:
    """Schedule for one epoch; ``dtsl=False`` pins the length to ``l_max``."""
    target = dtsl_length(cfg) if dtsl else cfg.l_max
    return split_and_pad(sort_sequences(manifest), target, batch_size, epoch_seed(seed, cfg.ep_cur))
