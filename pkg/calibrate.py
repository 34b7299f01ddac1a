"""Scratch calibration for the paired-run acceptance experiment (not part
of the package)."""
import sys
import time

import numpy as np

from rdlt import attacks, engine
from rdlt.data import normalization_stats, normalize, synth_spirals
from rdlt.engine import EngineConfig
from rdlt.layers import Network


def rng_for(tag):
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence([0xACC, tag])))


def build(seed, rank):
    return Network(
        [
            engine.init_factorized_linear(64, 2, 2, "relu", rng_for(seed)),
            engine.init_factorized_linear(64, 64, rank, "relu", rng_for(seed + 500)),
            engine.init_factorized_linear(3, 64, 3, "identity", rng_for(seed + 900)),
        ]
    )


def experiment(opt, lr, rank=16, norm=False, seeds=(1, 2, 3), epochs=50, tau=0.1, local=10, bs=64):
    train_set = synth_spirals(3, 100, 0.1, seed=7)
    val_set = synth_spirals(3, 100, 0.1, seed=8, split="validation")
    if norm:
        mean, std = normalization_stats(train_set)
        train_set = normalize(train_set, mean, std)
        val_set = normalize(val_set, mean, std)
    out = {}
    for beta in (0.0, 0.075):
        data = []
        for seed in seeds:
            net = build(seed, rank)
            cfg = EngineConfig(
                seed=seed, reg_strength=beta, optimizer=opt, learning_rate=lr,
                rel_trunc_tol=tau, local_steps=local,
            ).validate()
            result = engine.train(net, train_set, cfg, epochs=epochs, batch_size=bs)
            kappa = result.metrics[-1].max_kappa
            clean = 100 * np.mean(net.predict(val_set.inputs) == val_set.labels)
            adv = attacks.evaluate_under_attack(
                net, val_set, attacks.AttackSpec(kind="fgsm_l2", epsilon=0.1), seed=0
            )
            data.append((kappa, clean, adv))
        ks, cs, advs = zip(*data)
        out[beta] = (float(np.median(ks)), float(np.median(cs)), float(np.median(advs)))
        print(
            f"  beta={beta}: kappa={[round(k, 2) for k in ks]}"
            f" clean={[round(float(c), 1) for c in cs]} adv={[round(a, 1) for a in advs]}"
        )
    k0, c0, a0 = out[0.0]
    k1, c1, a1 = out[0.075]
    verdict = "PASS" if (k1 < k0 and abs(c1 - c0) <= 2.0 and a1 >= a0) else "fail"
    print(f"  medians: beta0 k={k0:.2f} c={c0:.1f} a={a0:.1f} | beta.075 k={k1:.2f} c={c1:.1f} a={a1:.1f} -> {verdict}")


if __name__ == "__main__":
    for label, kwargs in [
        ("sgd lr=0.1 bs32", dict(opt="sgd", lr=0.1, bs=32)),
        ("sgd lr=0.1 bs16", dict(opt="sgd", lr=0.1, bs=16)),
        ("adam lr=1e-3 bs16", dict(opt="adam", lr=1e-3, bs=16)),
    ]:
        print(f"== {label}")
        t0 = time.perf_counter()
        experiment(**kwargs)
        print(f"  ({time.perf_counter() - t0:.0f}s)")
