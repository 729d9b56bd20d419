"""
Quick DualNoise Demo
Desk-scale comparison of the dual method against a cross-entropy baseline, plus the
ablation ladder over a few seeds.
"""

import logging
import os
import sys
from typing import Dict, List, Sequence

import numpy as np
from dotenv import load_dotenv

from config import ABLATION_LADDER, LOG_LEVEL_ENV, ExperimentConfig, ladder_config, load_config
from errors import DualNoiseError, exit_code_for
from trainer import make_dataset, run

# Load environment variables
load_dotenv()


def _final(result) -> Dict:
    return result.summary["final"]


def headline_comparison(base: ExperimentConfig) -> Dict[str, Dict]:
    """Train the full method and the CE baseline on the same task and compare final metrics"""
    dataset = make_dataset(base)
    counts = dataset.counts()
    print(f"📦 Task: {counts['train']} train / {counts['test']} test, "
          f"{counts['closed']} closed-set and {counts['open']} open-set noisy samples")

    results = {}
    for method in ("dual", "ce"):
        config = base.model_copy(update={"method": method})
        print(f"\n🔧 Training {method} ({config.hyper.total_epochs} epochs)...")
        results[method] = _final(run(config, dataset=dataset, run_name=f"demo_{method}"))

    dual, ce = results["dual"], results["ce"]
    print("\n📊 Final epoch")
    print(f"{'metric':<18}{'dual':>10}{'ce':>10}")
    for key in ("accuracy", "auroc", "fpr95"):
        print(f"{key:<18}{_fmt(dual.get(key)):>10}{_fmt(ce.get(key)):>10}")
    print(f"{'clean_precision':<18}{_fmt(dual.get('clean_precision')):>10}{'-':>10}")

    checks = {
        "accuracy above baseline": _gt(dual.get("accuracy"), ce.get("accuracy")),
        "AUROC above baseline MSP": _gt(dual.get("auroc"), ce.get("auroc")),
        "clean precision >= 0.85": (dual.get("clean_precision") or 0.0) >= 0.85,
    }
    print()
    for name, passed in checks.items():
        print(f"{'✅' if passed else '❌'} {name}")
    return results


def run_ablation_ladder(base: ExperimentConfig, seeds: Sequence[int] = (0, 1, 2),
                        rungs: Sequence[str] = tuple(ABLATION_LADDER)) -> Dict[str, List[float]]:
    """
    Train every ladder rung for every seed.

    Returns:
        rung -> list of (accuracy + AUROC) / 2 per seed
    """
    scores: Dict[str, List[float]] = {rung: [] for rung in rungs}
    for seed in seeds:
        dataset = make_dataset(base.model_copy(update={"seed": seed}))
        for rung in rungs:
            config = ladder_config(base, rung, seed=seed)
            final = _final(run(config, dataset=dataset, run_name=f"ladder_{rung.strip('+')}_s{seed}"))
            score = np.mean([final.get("accuracy") or 0.0, final.get("auroc") or 0.0])
            scores[rung].append(float(score))
            print(f"   seed {seed} {rung:<9} (acc+auroc)/2 = {score:.4f}")

    print("\n📈 Ablation ladder (mean over seeds)")
    for rung, values in scores.items():
        print(f"   {rung:<9} {np.mean(values):.4f} ± {np.std(values):.4f}")
    if "full" in scores and "baseline" in scores:
        ok = np.mean(scores["full"]) >= np.mean(scores["baseline"])
        print(f"{'✅' if ok else '❌'} full >= baseline")
    return scores


def _fmt(value) -> str:
    return "null" if value is None else f"{value:.4f}"


def _gt(a, b) -> bool:
    return a is not None and b is not None and a > b


def main():
    logging.basicConfig(level=os.getenv(LOG_LEVEL_ENV, "WARNING").upper())
    print("🌟 DualNoise - Quick Demo")
    print("=" * 60)
    preset = sys.argv[1] if len(sys.argv) > 1 else "desk"
    try:
        base = load_config(preset=preset, overrides={"progress": False})
        headline_comparison(base)
        if "--ladder" in sys.argv:
            print("\n🪜 Running ablation ladder...")
            run_ablation_ladder(base)
    except DualNoiseError as e:
        print(f"❌ {type(e).__name__}: {e}")
        sys.exit(exit_code_for(e))
    except KeyboardInterrupt:
        print("\n⚠️ Demo interrupted by user")


if __name__ == "__main__":
    main()
