"""Demonstration dataset: generation and the on-disk container.

Container layout (little-endian, see docs/FORMATS.md):

    bytes 0..8       magic b"DRDATA01"
    bytes 8..12      uint32 header length H
    bytes 12..12+H   UTF-8 JSON header:
        {"format_version": 1, "config": {...},
         "episodes": [{"length": T, "instruction": [ids...],
                       "meta": {...}}, ...]}
    data section, per episode in header order, contiguous:
        third  uint8 [T, 3, 16, 16]   (pixel = value * 255)
        wrist  uint8 [T, 3, 16, 16]
        pos    float64 [T, 2]         (expert displacement labels)
        end    uint8 [T]              (expert gripper labels, 0/1)

Keeping images as uint8 makes the file compact and the round trip exact:
rendered values are only ever 0 or 1 per channel.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .env import (
    DEFAULT_LEAD_GAIN,
    GridWorld,
    SUCCESS,
    TaskDistribution,
    TaskSpec,
    run_expert_episode,
)

MAGIC = b"DRDATA01"
FORMAT_VERSION = 1


class DatasetError(RuntimeError):
    pass


@dataclass
class EpisodeRecord:
    instruction: np.ndarray        # [L] int64
    third: np.ndarray              # [T, 3, 16, 16] uint8
    wrist: np.ndarray              # [T, 3, 16, 16] uint8
    pos: np.ndarray                # [T, 2] float64
    end: np.ndarray                # [T] uint8
    meta: dict

    @property
    def length(self) -> int:
        return self.third.shape[0]


@dataclass
class Dataset:
    config: dict
    episodes: list[EpisodeRecord]


def images_to_u8(img: np.ndarray) -> np.ndarray:
    return np.round(np.asarray(img) * 255.0).astype(np.uint8)


def images_to_float(img_u8: np.ndarray) -> np.ndarray:
    return img_u8.astype(np.float64) / 255.0


def generate_dataset(n_episodes: int, distribution: TaskDistribution, seed: int,
                     env: GridWorld | None = None,
                     lead_gain: float = DEFAULT_LEAD_GAIN) -> Dataset:
    """Roll the scripted expert and keep only successful episodes.

    A success yield under 80% means the expert or the task distribution is
    broken, and raises instead of silently producing a thin dataset.
    """
    if n_episodes < 1:
        raise ValueError("need at least one episode")
    env = env or GridWorld()
    task_rng = np.random.default_rng(np.random.SeedSequence([seed, 0xD5]))
    episodes: list[EpisodeRecord] = []
    attempts = 0
    max_attempts = int(np.ceil(n_episodes / 0.8)) + 16
    while len(episodes) < n_episodes:
        if attempts >= max_attempts:
            raise DatasetError(
                f"success yield below 80%: {len(episodes)} successes in {attempts} attempts"
            )
        task = distribution.sample(task_rng)
        ep_seed = np.random.SeedSequence([seed, attempts])
        observations, actions, result = run_expert_episode(env, ep_seed, task, lead_gain)
        attempts += 1
        if result.outcome != SUCCESS:
            continue
        episodes.append(EpisodeRecord(
            instruction=observations[0].instruction,
            third=images_to_u8(np.stack([o.third for o in observations])),
            wrist=images_to_u8(np.stack([o.wrist for o in observations])),
            pos=np.stack([a.a_pos for a in actions]),
            end=np.array([a.a_end for a in actions], dtype=np.uint8),
            meta={
                "episode_index": attempts - 1,
                "target_color": task.target_color,
                "n_distractors": task.n_distractors,
                "target_speed": task.target_speed,
                "steps": result.steps_used,
            },
        ))
    config = {
        "seed": seed,
        "n_episodes": n_episodes,
        "attempts": attempts,
        "lead_gain": lead_gain,
        "distribution": {
            "colors": list(distribution.colors),
            "distractor_counts": list(distribution.distractor_counts),
            "speeds": list(distribution.speeds),
        },
        "env": {
            "max_steps": env.max_steps,
            "grasp_radius": env.grasp_radius,
            "action_clip": env.action_clip,
        },
    }
    return Dataset(config=config, episodes=episodes)


def save_dataset(path, dataset: Dataset):
    header = {
        "format_version": FORMAT_VERSION,
        "config": dataset.config,
        "episodes": [
            {
                "length": ep.length,
                "instruction": [int(i) for i in ep.instruction],
                "meta": ep.meta,
            }
            for ep in dataset.episodes
        ],
    }
    hbytes = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<I", len(hbytes)))
        f.write(hbytes)
        for ep in dataset.episodes:
            f.write(np.ascontiguousarray(ep.third, dtype=np.uint8).tobytes())
            f.write(np.ascontiguousarray(ep.wrist, dtype=np.uint8).tobytes())
            f.write(np.ascontiguousarray(ep.pos, dtype=np.float64).tobytes())
            f.write(np.ascontiguousarray(ep.end, dtype=np.uint8).tobytes())


def load_dataset(path) -> Dataset:
    raw = Path(path).read_bytes()
    if raw[:8] != MAGIC:
        raise DatasetError(f"{path}: not a dataset file (bad magic)")
    (hlen,) = struct.unpack("<I", raw[8:12])
    header = json.loads(raw[12:12 + hlen].decode("utf-8"))
    if header.get("format_version") != FORMAT_VERSION:
        raise DatasetError(f"{path}: unsupported format version")
    offset = 12 + hlen
    episodes = []
    for ent in header["episodes"]:
        t = ent["length"]
        img_n = t * 3 * 16 * 16
        third = np.frombuffer(raw, np.uint8, img_n, offset).reshape(t, 3, 16, 16)
        offset += img_n
        wrist = np.frombuffer(raw, np.uint8, img_n, offset).reshape(t, 3, 16, 16)
        offset += img_n
        pos = np.frombuffer(raw, np.float64, t * 2, offset).reshape(t, 2)
        offset += t * 16
        end = np.frombuffer(raw, np.uint8, t, offset)
        offset += t
        episodes.append(EpisodeRecord(
            instruction=np.array(ent["instruction"], dtype=np.int64),
            third=np.array(third), wrist=np.array(wrist),
            pos=np.array(pos), end=np.array(end),
            meta=ent["meta"],
        ))
    return Dataset(config=header["config"], episodes=episodes)
