"""Multi-seed robustness run: pretrain, fine-tune two losses, sweep alpha."""

from __future__ import annotations

import time
from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np

from .evalkit import split_metrics
from .model import merge_into
from .synthdata import RecordSet, TaskSpec, TaskWorld, gen_split
from .trainer import TrainConfig, finetune, pretrain, pretrain_defaults

ALPHAS = (0.0, 0.25, 0.5, 0.75, 1.0)
ARMS = ("mpm", "infonce")
EVAL_SPLITS = ("id_test", "ood_test")


@dataclass
class SeedResult:
    seed: int
    # (arm, alpha, split) -> accuracy
    accuracy: dict[tuple[str, float, str], float] = field(default_factory=dict)
    seconds: float = 0.0

    def get(self, arm: str, alpha: float, split: str) -> float:
        return self.accuracy[(arm, float(alpha), split)]


def run_seed(seed: int, spec: TaskSpec | None = None, pretrain_cfg: TrainConfig | None = None,
             finetune_cfg: TrainConfig | None = None, alphas: Sequence[float] = ALPHAS) -> SeedResult:
    """One seed of the experiment; the seed drives data, init, batches and dropping."""
    start = time.perf_counter()
    spec = replace(spec or TaskSpec(), seed=seed)
    pre_cfg = replace(pretrain_cfg or pretrain_defaults(), seed=seed)
    ft_cfg = replace(finetune_cfg or TrainConfig(), seed=seed)
    world = TaskWorld(spec)
    data = {k: RecordSet(v) for k, v in gen_split(spec).items()}
    base = pretrain(data["pretrain"], spec, pre_cfg).model
    result = SeedResult(seed)
    for arm in ARMS:
        res = finetune(base, data["id_train"], spec, replace(ft_cfg, loss=arm))
        for alpha in alphas:
            merged = merge_into(res.model, res.bank, alpha)
            for split in EVAL_SPLITS:
                acc = split_metrics(merged, world, data[split], ("accuracy",))["accuracy"]
                result.accuracy[(arm, float(alpha), split)] = acc
    result.seconds = time.perf_counter() - start
    return result


def median(results: Sequence[SeedResult], arm: str, alpha: float, split: str) -> float:
    return float(np.median([r.get(arm, alpha, split) for r in results]))


def robustness_checks(results: Sequence[SeedResult], arm: str = "mpm") -> dict[str, tuple[bool, str]]:
    """Directional checks over seeds; values are (passed, detail)."""
    id0, id1, id5 = (median(results, arm, a, "id_test") for a in (0.0, 1.0, 0.5))
    ood5, ood1 = median(results, arm, 0.5, "ood_test"), median(results, arm, 1.0, "ood_test")
    wins = sum(r.get("mpm", 1.0, "id_test") >= r.get("infonce", 1.0, "id_test") for r in results)
    return {
        "finetune_helps_id": (id1 >= id0, f"median id alpha=1 {id1:.4f} vs alpha=0 {id0:.4f}"),
        "half_merge_ood": (ood5 >= ood1, f"median ood alpha=0.5 {ood5:.4f} vs alpha=1 {ood1:.4f}"),
        "half_merge_id_close": (abs(id1 - id5) <= 0.05, f"median id alpha=0.5 {id5:.4f} vs alpha=1 {id1:.4f}"),
        "multi_positive_wins": (5 * wins >= 3 * len(results),
                                f"mpm >= infonce on id in {wins}/{len(results)} seeds"),
    }


def format_table(results: Sequence[SeedResult], alphas: Sequence[float] = ALPHAS) -> str:
    lines = ["arm,alpha,split," + ",".join(f"seed{r.seed}" for r in results) + ",median"]
    for arm in ARMS:
        for alpha in alphas:
            for split in EVAL_SPLITS:
                vals = [r.get(arm, alpha, split) for r in results]
                lines.append(f"{arm},{alpha:g},{split}," + ",".join(f"{v:.4f}" for v in vals)
                             + f",{np.median(vals):.4f}")
    return "\n".join(lines) + "\n"
