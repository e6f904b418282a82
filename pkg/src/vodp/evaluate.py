"""Closed-loop rollouts with action chunking, success tables and per-cell grids."""

from __future__ import annotations

import json
from collections import deque
from dataclasses import asdict, dataclass, field
from typing import Protocol, Sequence

import numpy as np

from . import env as toyenv
from .env import RobustnessConfig

CHECK, CROSS = "✓", "✗"

SUITES: dict[str, list[tuple[str, RobustnessConfig]]] = {
    "size": [(f"{s}x", RobustnessConfig(size_scale=s)) for s in toyenv.SIZE_SCALES],
    "color": [(c, RobustnessConfig(cube_color=c)) for c in toyenv.CUBE_COLORS],
    "illumination": [(m, RobustnessConfig(lighting=m)) for m in toyenv.LIGHTING],
    "background": [(b, RobustnessConfig(background=b)) for b in toyenv.BACKGROUNDS],
}
SUITE_EPISODES = 20
# steps of each predicted chunk executed before replanning
EXEC_HORIZON = 4


class Planner(Protocol):
    def plan(
        self, states: Sequence[toyenv.EnvState], images: np.ndarray, proprio: np.ndarray, rngs: list
    ) -> np.ndarray:
        """Return (B, N, J) action chunks for the given batch of observations."""


class PolicyPlanner:
    def __init__(self, policy):
        self.policy = policy
        self.history = policy.cfg.history

    def plan(self, states, images, proprio, rngs):
        return self.policy.act(images, proprio, rngs)


class ExpertPlanner:
    """Harness self-test: plays the scripted expert forward for a whole chunk."""

    history = 1

    def __init__(self, horizon: int = 8):
        self.horizon = horizon

    def plan(self, states, images, proprio, rngs):
        chunks = []
        for s in states:
            actions = []
            for _ in range(self.horizon):
                a = toyenv.expert_action(s)
                actions.append(a)
                s, _, _ = toyenv.step(s, a)
            chunks.append(actions)
        return np.asarray(chunks)


def rollout(
    planner,
    seeds: Sequence[int],
    rngs: list,
    robustness: RobustnessConfig = RobustnessConfig(),
    exec_horizon: int = EXEC_HORIZON,
    history: int = 1,
) -> list[dict]:
    """Run one episode per seed in lock-step; returns per-episode outcome dicts."""
    states = [toyenv.reset(s, robustness) for s in seeds]
    frames = []
    for s in states:
        first = toyenv.render(s, robustness)
        frames.append(deque([(first, s.proprio())] * history, maxlen=history))
    done = [False] * len(seeds)
    success = [False] * len(seeds)
    while not all(done):
        active = [i for i, d in enumerate(done) if not d]
        images = np.stack([np.stack([f[0] for f in frames[i]]) for i in active])
        proprio = np.stack([np.stack([f[1] for f in frames[i]]) for i in active])
        chunk = planner.plan([states[i] for i in active], images, proprio, [rngs[i] for i in active])
        steps = min(exec_horizon, chunk.shape[1])
        for row, i in enumerate(active):
            for j in range(steps):
                states[i], done[i], success[i] = toyenv.step(states[i], chunk[row, j])
                frames[i].append((toyenv.render(states[i], robustness), states[i].proprio()))
                if done[i]:
                    break
    return [
        {"seed": int(seed), "cell": toyenv.grid_cell(int(seed)), "success": bool(ok), "steps": st.step_count}
        for seed, ok, st in zip(seeds, success, states)
    ]


@dataclass
class ConditionResult:
    name: str
    robustness: dict
    rates: list[float]  # percent, one per repeat batch
    mean: float
    std: float
    successes: int
    episodes: int
    cells: list[list[str]]  # GRID x GRID, marks ordered by repeat

    @property
    def summary(self) -> str:
        return f"{self.mean:.1f}±{self.std:.1f}"


@dataclass
class EvalReport:
    title: str
    seed_base: int
    episodes: int
    repeats: int
    conditions: list[ConditionResult] = field(default_factory=list)
    provenance: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, indent=2, ensure_ascii=False)

    def to_text(self) -> str:
        lines = [f"# {self.title}", f"episodes/repeat={self.episodes} repeats={self.repeats} seed_base={self.seed_base}", ""]
        name_w = max([len("condition")] + [len(c.name) for c in self.conditions])
        head = f"{'condition':<{name_w}} | success % (mean±std) | " + " | ".join(
            f"rep{r}" for r in range(self.repeats)
        )
        lines += [head, "-" * len(head)]
        for c in self.conditions:
            reps = " | ".join(f"{r:5.1f}" for r in c.rates)
            lines.append(f"{c.name:<{name_w}} | {c.summary:>20} | {reps}")
        if len(self.conditions) > 1:
            avg = float(np.mean([c.mean for c in self.conditions]))
            lines.append(f"{'AVG.':<{name_w}} | {avg:>20.1f} |")
        for c in self.conditions:
            lines += ["", f"per-cell outcomes [{c.name}] ({c.successes}/{c.episodes})"]
            width = max(len(m) for row in c.cells for m in row) or 1
            for row in c.cells:
                lines.append(" ".join(f"[{m:<{width}}]" for m in row))
        return "\n".join(lines)


def evaluate_condition(
    planner,
    name: str,
    episodes: int,
    repeats: int,
    seed_base: int,
    robustness: RobustnessConfig = RobustnessConfig(),
    exec_horizon: int = EXEC_HORIZON,
    history: int = 1,
) -> ConditionResult:
    """Every repeat batch replays the same scenes with fresh sampling streams."""
    seeds = [seed_base + i for i in range(episodes)]
    rates, marks = [], [[[] for _ in range(toyenv.GRID)] for _ in range(toyenv.GRID)]
    successes = 0
    for r in range(repeats):
        rngs = [np.random.default_rng([seed_base, r, i]) for i in range(episodes)]
        outcomes = rollout(planner, seeds, rngs, robustness, exec_horizon, history)
        ok = sum(o["success"] for o in outcomes)
        successes += ok
        rates.append(100.0 * ok / episodes)
        for o in outcomes:
            row, col = divmod(o["cell"], toyenv.GRID)
            marks[row][col].append(CHECK if o["success"] else CROSS)
    cells = [["".join(m) for m in row] for row in marks]
    return ConditionResult(
        name=name,
        robustness=robustness.to_dict(),
        rates=rates,
        mean=float(np.mean(rates)),
        std=float(np.std(rates)),
        successes=successes,
        episodes=episodes * repeats,
        cells=cells,
    )


def evaluate(
    planner,
    conditions: Sequence[tuple[str, RobustnessConfig]],
    episodes: int = 48,
    repeats: int = 3,
    seed_base: int = 10000,
    exec_horizon: int = EXEC_HORIZON,
    history: int = 1,
    title: str = "closed-loop evaluation",
    provenance: dict | None = None,
) -> EvalReport:
    report = EvalReport(title, seed_base, episodes, repeats, provenance=dict(provenance or {}))
    for name, rob in conditions:
        report.conditions.append(
            evaluate_condition(planner, name, episodes, repeats, seed_base, rob, exec_horizon, history)
        )
    return report
