"""Scratch calibration driver: 3-seed check of criterion-6 orderings."""
import time

import numpy as np

import clforge
from clforge.metrics import summarize
from clforge.params import AveragingSchedule
from clforge.strategies import StrategyConfig, TrainConfig, run_sequence
from clforge.tasks import SuiteConfig, gen_task_suite

H = AveragingSchedule.harmonic
LAM = 0.15
model_cfg = clforge.ModelConfig(h=20)
tc = TrainConfig(learning_rate=0.5, max_epochs=30, patience=5)
seeds = (1, 2, 3)

print("=== dialect ===", flush=True)
suite = gen_task_suite(SuiteConfig(T=4, n_train=(1200, 400, 400, 400),
                                   frames_per_token=(2, 3), noise_sigma=0.2,
                                   similarity=0.65))
dial = {}
for kind, sched, lam in (("finetune", None, None), ("fta", H(), None),
                         ("lwf", None, LAM), ("lwfa", H(), LAM)):
    strat = StrategyConfig(kind=kind, schedule=sched, lam=lam, train=tc)
    for seed in seeds:
        t0 = time.perf_counter()
        grid, _ = run_sequence(suite, strat, model_cfg, seed=seed)
        m = summarize(grid)
        dial[(kind, seed)] = m
        print(f"{kind} seed {seed}: {time.perf_counter()-t0:.0f}s "
              f"AVG {100*m.avg:.2f} BWT {100*m.bwt:+.2f}", flush=True)

ok = True
for seed in seeds:
    ft, fta = dial[("finetune", seed)], dial[("fta", seed)]
    lwf, lwfa = dial[("lwf", seed)], dial[("lwfa", seed)]
    checks = {
        "6a ft_bwt<0": ft.bwt < 0,
        "fta<ft": fta.avg < ft.avg, "fta<lwf": fta.avg < lwf.avg,
        "lwfa<ft": lwfa.avg < ft.avg, "lwfa<lwf": lwfa.avg < lwf.avg,
        "|bwt fta|<|ft|": abs(fta.bwt) < abs(ft.bwt),
        "|bwt lwfa|<|ft|": abs(lwfa.bwt) < abs(ft.bwt),
    }
    bad = [k for k, v in checks.items() if not v]
    ok &= not bad
    print(f"seed {seed}: {'ALL OK' if not bad else 'FAIL ' + ', '.join(bad)}", flush=True)

print("=== family ===", flush=True)
fam_suite = gen_task_suite(SuiteConfig(kind="language_family", T=4,
                                       n_train=(1200, 400, 400, 400),
                                       frames_per_token=(2, 3), noise_sigma=0.2))
fam = {}
for kind, lam in (("fta", None), ("lwfa", LAM)):
    strat = StrategyConfig(kind=kind, schedule=H(), lam=lam, train=tc)
    for seed in seeds:
        t0 = time.perf_counter()
        grid, _ = run_sequence(fam_suite, strat, model_cfg, seed=seed)
        m = summarize(grid)
        fam[(kind, seed)] = m
        print(f"{kind} seed {seed}: {time.perf_counter()-t0:.0f}s "
              f"AVG {100*m.avg:.2f} BWT {100*m.bwt:+.2f}", flush=True)
fta_mean = np.mean([fam[("fta", s)].avg for s in seeds])
lwfa_mean = np.mean([fam[("lwfa", s)].avg for s in seeds])
print(f"6c seed-mean: LWFA {100*lwfa_mean:.2f} vs FTA {100*fta_mean:.2f} -> "
      f"{'OK' if lwfa_mean <= fta_mean else 'FAIL'}", flush=True)
print("overall:", "PASS" if ok and lwfa_mean <= fta_mean else "NEEDS TUNING")
