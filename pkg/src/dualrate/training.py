"""Behavior-cloning trainer.

Three model modes share one trainer:

* ``hierarchical`` - planner encodes a (possibly past) third-view frame into a
  latent, the fast policy decodes it with the recent frame context; the loss
  gradient flows through both. The planner frame is drawn uniformly from a
  lookback window in async-random sampling mode, so the policy trains against
  the same latent staleness it will see when the planner runs at a low rate.
* ``monolithic`` - the planner backbone feeds an action head directly; no fast
  policy exists.
* ``unconditioned`` - the fast policy alone, all conditioning off; no planner
  exists.

The objective is mean squared displacement error plus binary cross-entropy on
the gripper logit, unweighted.
"""

from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import checkpoint as ckpt
from .dataset import Dataset, images_to_float
from .env import GridWorld, SUCCESS, SPLITS
from .nn import Mlp, Module, collect_state, load_state
from .optim import make_optimizer
from .planner import PlannerConfig, SlowPlanner
from .policy import FastPolicy, PolicyConfig, policy_frame
from .runtime import ScheduleConfig, run_episode
from .tensor import Tensor, add, backward, bce_with_logits, clip, gelu, mean, mul, no_grad, sub, sum_
from .env import Action

log = logging.getLogger(__name__)

MODEL_MODES = ("hierarchical", "monolithic", "unconditioned")
SAMPLING_MODES = ("async-random", "most-recent")


class TrainingDiverged(RuntimeError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    model_mode: str = "hierarchical"
    steps: int = 6000
    batch_size: int = 64
    lr: float = 3e-4
    optimizer: str = "adam"
    seed: int = 0
    context_len: int = 2
    sampling_window: int = 8          # max lookback for the planner frame
    sampling_mode: str = "async-random"
    film: bool = True
    cross_attention: bool = True
    prefix: bool = True
    use_adapters: bool = False
    adapter_rank: int = 4
    eval_every: int = 500
    eval_episodes: int = 25
    eval_interval: int = 1            # planner interval k for eval rollouts
    eval_split: str = "static_seen"
    early_stop_success: float | None = None
    min_steps: int = 0
    planner_overrides: dict = field(default_factory=dict)
    policy_overrides: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.model_mode not in MODEL_MODES:
            raise ValueError(f"unknown model mode '{self.model_mode}'")
        if self.sampling_mode not in SAMPLING_MODES:
            raise ValueError(f"unknown sampling mode '{self.sampling_mode}'")
        if self.sampling_window < 0:
            raise ValueError("sampling window must be >= 0")

    def planner_config(self) -> PlannerConfig:
        overrides = dict(self.planner_overrides)
        if self.model_mode == "monolithic":
            overrides.setdefault("image_channels", 6)
        if self.use_adapters:
            overrides.setdefault("lora_rank", self.adapter_rank)
        return PlannerConfig(**overrides)

    def policy_config(self) -> PolicyConfig:
        overrides = dict(self.policy_overrides)
        flags = {
            "film": self.film, "cross_attention": self.cross_attention,
            "prefix": self.prefix,
        }
        if self.model_mode == "unconditioned":
            flags = {"film": False, "cross_attention": False, "prefix": False}
        return PolicyConfig(context_len=self.context_len, **flags, **overrides)

    def to_dict(self) -> dict:
        return asdict(self)


# ---------------------------------------------------------------------------
# batching


def sample_planner_step(t: int, window: int, mode: str, rng) -> int:
    if mode == "most-recent" or window == 0:
        return t
    lo = max(0, t - window)
    return int(rng.integers(lo, t + 1))


def make_batch(dataset: Dataset, cfg: TrainConfig, rng: np.random.Generator,
               views: str = "both") -> dict:
    """Uniform (trajectory, step) choice plus the planner-frame lookback draw."""
    episodes = [ep for ep in dataset.episodes if ep.length >= 1]
    if not episodes:
        raise ValueError("dataset has no usable episodes")
    if len(episodes) < len(dataset.episodes):
        log.warning("skipped %d empty episodes", len(dataset.episodes) - len(episodes))

    n = cfg.batch_size
    hctx = cfg.context_len
    context, planner_img, instr, pos, end, staleness = [], [], [], [], [], []
    for _ in range(n):
        ep = episodes[int(rng.integers(len(episodes)))]
        t = int(rng.integers(ep.length))
        s = sample_planner_step(t, cfg.sampling_window, cfg.sampling_mode, rng)
        third = images_to_float(ep.third)
        wrist = images_to_float(ep.wrist)
        frames = []
        for j in range(hctx - 1, -1, -1):
            i = max(0, t - j)
            if views == "third":
                frames.append(third[i])
            elif views == "wrist":
                frames.append(wrist[i])
            else:
                frames.append(np.concatenate([third[i], wrist[i]], axis=0))
        context.append(np.stack(frames))
        if cfg.model_mode == "monolithic":
            planner_img.append(np.concatenate([third[t], wrist[t]], axis=0))
        else:
            planner_img.append(third[s])
        instr.append(ep.instruction)
        pos.append(ep.pos[t])
        end.append(float(ep.end[t]))
        staleness.append(t - s)
    return {
        "context": np.stack(context),
        "planner_img": np.stack(planner_img),
        "instr": np.stack(instr),
        "pos": np.stack(pos),
        "end": np.array(end),
        "staleness": np.array(staleness, dtype=np.int64),
    }


def bc_loss(pred_pos: Tensor, pred_logit: Tensor, label_pos: np.ndarray,
            label_end: np.ndarray) -> Tensor:
    """Mean over the batch of squared displacement error plus gripper BCE."""
    diff = sub(pred_pos, Tensor(label_pos))
    mse = mean(sum_(mul(diff, diff), axis=1))
    bce = mean(bce_with_logits(pred_logit, label_end))
    return add(mse, bce)


# ---------------------------------------------------------------------------
# models


class MonolithicModel(Module):
    """Planner backbone driving an action head directly (no fast policy)."""

    def __init__(self, pcfg: PlannerConfig, rng, head_hidden: int = 64,
                 action_dim: int = 2, action_clip: float = 0.1):
        super().__init__()
        self.planner = SlowPlanner(pcfg, rng)
        self.head = Mlp(pcfg.latent_width, head_hidden, rng, out_width=action_dim + 1)
        self.action_dim = action_dim
        self.action_clip = action_clip

    def forward(self, images: np.ndarray, instr: np.ndarray) -> tuple[Tensor, Tensor]:
        z = self.planner.encode_batch(images, instr)
        raw = self.head(gelu(z))
        pos = clip(raw[:, : self.action_dim], -self.action_clip, self.action_clip)
        return pos, raw[:, self.action_dim]

    def act_on(self, obs) -> Action:
        stacked = np.concatenate([obs.third, obs.wrist], axis=0)
        with no_grad():
            pos, logit = self.forward(stacked[None, ...], obs.instruction[None, :])
        return Action.from_logit(pos.data[0].copy(), float(logit.data[0]))


@dataclass
class TrainResult:
    config: TrainConfig
    planner: SlowPlanner | None
    policy: FastPolicy | None
    monolithic: MonolithicModel | None
    curve: list[dict]
    final_loss: float


# ---------------------------------------------------------------------------
# checkpoint plumbing


def model_state(result_or_models) -> dict:
    r = result_or_models
    tensors: dict[str, np.ndarray] = {}
    if r.planner is not None:
        tensors.update(collect_state(r.planner, "planner/", "planner/lora/"))
    if r.policy is not None:
        tensors.update(collect_state(r.policy, "policy/"))
    if r.monolithic is not None:
        tensors.update(collect_state(r.monolithic.planner, "planner/", "planner/lora/"))
        tensors.update(collect_state(r.monolithic.head, "head/"))
    return tensors


def save_model(path, result: TrainResult, extra_meta: dict | None = None):
    meta = {
        "model_mode": result.config.model_mode,
        "train_config": result.config.to_dict(),
        "planner_config": result.config.planner_config().to_dict(),
        "policy_config": result.config.policy_config().to_dict(),
        "conditioning": {
            "film": result.config.policy_config().film,
            "cross_attention": result.config.policy_config().cross_attention,
            "prefix": result.config.policy_config().prefix,
        },
        "final_loss": result.final_loss,
    }
    if extra_meta:
        meta.update(extra_meta)
    ckpt.save_checkpoint(path, model_state(result), meta)


def load_model(path) -> TrainResult:
    """Rebuild models with the topology recorded in the checkpoint header."""
    tensors, meta = ckpt.load_checkpoint(path)
    cfg = TrainConfig(**{**meta["train_config"],
                         "planner_overrides": meta["train_config"]["planner_overrides"],
                         "policy_overrides": meta["train_config"]["policy_overrides"]})
    rng = np.random.default_rng(0)
    planner = policy = mono = None
    if cfg.model_mode == "hierarchical":
        planner = SlowPlanner(PlannerConfig.from_dict(meta["planner_config"]), rng)
        load_state(planner, tensors, "planner/", "planner/lora/")
        policy = FastPolicy(PolicyConfig.from_dict(meta["policy_config"]), rng)
        load_state(policy, tensors, "policy/")
    elif cfg.model_mode == "monolithic":
        mono = MonolithicModel(PlannerConfig.from_dict(meta["planner_config"]), rng)
        load_state(mono.planner, tensors, "planner/", "planner/lora/")
        load_state(mono.head, tensors, "head/")
    else:
        policy = FastPolicy(PolicyConfig.from_dict(meta["policy_config"]), rng)
        load_state(policy, tensors, "policy/")
    return TrainResult(config=cfg, planner=planner, policy=policy, monolithic=mono,
                       curve=[], final_loss=float(meta.get("final_loss", np.nan)))


def write_curve(path, curve: list[dict]):
    with open(path, "w") as f:
        for rec in curve:
            f.write(json.dumps(rec, sort_keys=True) + "\n")


# ---------------------------------------------------------------------------
# the trainer


def evaluate_success(planner, policy, mono, split: str, interval: int,
                     episodes: int, seed_key: list[int],
                     env: GridWorld | None = None,
                     mono_latency: int = 0) -> float:
    """Success rate over seeded rollouts of a fixed task split."""
    from .runtime import run_episode_monolithic

    env = env or GridWorld()
    dist = SPLITS[split]
    wins = 0
    for i in range(episodes):
        ss = np.random.SeedSequence(seed_key + [i])
        task = dist.sample(np.random.default_rng(ss))
        ep_seed = np.random.SeedSequence(seed_key + [i, 1])
        if mono is not None:
            result, _ = run_episode_monolithic(env, mono, mono_latency, ep_seed, task)
        else:
            schedule = ScheduleConfig(interval=interval, latency=0)
            result, _ = run_episode(env, planner, policy, schedule, ep_seed, task)
        wins += result.outcome == SUCCESS
    return 100.0 * wins / episodes


def train(dataset: Dataset, cfg: TrainConfig, dump_dir=None) -> TrainResult:
    init_rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 1]))
    batch_rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 2]))

    planner = policy = mono = None
    named: list[tuple[str, Tensor]] = []
    if cfg.model_mode == "hierarchical":
        planner = SlowPlanner(cfg.planner_config(), init_rng)
        policy = FastPolicy(cfg.policy_config(), init_rng)
        if cfg.use_adapters:
            planner.freeze_base()
        named = planner.trainable_parameters() + list(policy.named_parameters())
        views = policy.cfg.views
    elif cfg.model_mode == "monolithic":
        mono = MonolithicModel(cfg.planner_config(), init_rng)
        named = list(mono.named_parameters())
        views = "both"
    else:
        policy = FastPolicy(cfg.policy_config(), init_rng)
        named = list(policy.named_parameters())
        views = policy.cfg.views

    opt = make_optimizer(cfg.optimizer, named, cfg.lr)
    curve: list[dict] = []
    final_loss = np.nan

    for step in range(cfg.steps):
        batch = make_batch(dataset, cfg, batch_rng, views=views)
        if cfg.model_mode == "hierarchical":
            z = planner.encode_batch(batch["planner_img"], batch["instr"])
            pos, logit = policy.forward(batch["context"], z)
        elif cfg.model_mode == "monolithic":
            pos, logit = mono.forward(batch["planner_img"], batch["instr"])
        else:
            pos, logit = policy.forward(batch["context"], None)
        loss = bc_loss(pos, logit, batch["pos"], batch["end"])
        final_loss = float(loss.data)
        if not np.isfinite(final_loss):
            path = Path(dump_dir or ".") / "diverged_batch.npz"
            np.savez(path, **{k: v for k, v in batch.items()})
            raise TrainingDiverged(f"non-finite loss at step {step}; batch dumped to {path}")
        backward(loss)
        opt.step()

        record = {"step": step + 1, "loss": final_loss, "eval_success": None}
        is_eval = cfg.eval_every and ((step + 1) % cfg.eval_every == 0 or step + 1 == cfg.steps)
        if is_eval:
            rate = evaluate_success(
                planner, policy, mono, cfg.eval_split, cfg.eval_interval,
                cfg.eval_episodes, [cfg.seed, 7],
            )
            record["eval_success"] = rate
            log.info("step %d loss %.5f eval %.1f%%", step + 1, final_loss, rate)
            curve.append(record)
            if (cfg.early_stop_success is not None and rate >= cfg.early_stop_success
                    and step + 1 >= cfg.min_steps):
                break
        else:
            curve.append(record)

    return TrainResult(config=cfg, planner=planner, policy=policy, monolithic=mono,
                       curve=curve, final_loss=final_loss)
