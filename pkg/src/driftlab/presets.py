"""Shipped run configurations.

``ctta-suite`` / ``ftta-suite`` are the benchmark episodes: eight corruption
domains of ramping severity over a 6-class blob source. ``toy-appendix`` is
the 2-class 2-D setting behind the border-sample demonstration. The three
sweep presets drive the ablation command over component toggles, budgets,
selection strategies, and the perturbation scale grid.
"""

from __future__ import annotations

from .config import ConfigError, RunConfig, parse_config

# Eight domains of ramping severity: a mild opener (absorbs the debias-weight
# warmup from the (1, 1) initialization), two rotation-family domains
# (systematic feature drift the annotations must track), then a noise ramp
# whose severity pushes entropy-only adaptation into error accumulation.
# Class priors are skewed and rotate across domains; that imbalance is what
# gives the class-balance rule its bite.
_BENCH_DOMAINS = """
[domain:opener]
corrupt = noise(0.8)
batches = 50
priors = 0.3,0.22,0.16,0.12,0.1,0.1

[domain:turn1]
corrupt = rotate(0.65)+noise(0.55)
batches = 50
priors = 0.1,0.3,0.22,0.16,0.12,0.1

[domain:turn2]
corrupt = rotate(0.8)+noise(0.6)
batches = 50
priors = 0.1,0.1,0.3,0.22,0.16,0.12

[domain:fuzz1]
corrupt = rotate(0.2)+noise(1.8)
batches = 50
priors = 0.12,0.1,0.1,0.3,0.22,0.16

[domain:fuzz2]
corrupt = rotate(0.25)+noise(2.2)
batches = 50
priors = 0.16,0.12,0.1,0.1,0.3,0.22

[domain:fuzz3]
corrupt = rotate(0.25)+noise(2.6)
batches = 50
priors = 0.22,0.16,0.12,0.1,0.1,0.3

[domain:fuzz4]
corrupt = rotate(0.3)+noise(2.8)
batches = 50
priors = 0.3,0.22,0.16,0.12,0.1,0.1

[domain:fuzz5]
corrupt = rotate(0.3)+noise(3.0)
batches = 50
priors = 0.1,0.3,0.22,0.16,0.12,0.1
"""

_BENCH_BASE = """
[model]
input_dim = 8
hidden = 24,24
classes = 6

[source]
kind = blobs
center_scale = 4.0
cov_scale = 0.8
per_class = 400

[pretrain]
epochs = 40
lr = 0.05
momentum = 0.9
batch_size = 64

[episode]
mode = {mode}
batch_size = 64
domains = opener,turn1,turn2,fuzz1,fuzz2,fuzz3,fuzz4,fuzz5
""" + _BENCH_DOMAINS + """
[selection]
strategy = ours
sigma = 0.02

[budget]
labels_per_batch = 1

[engine]
lr = 0.02
momentum = 0.9
alpha = 0.8
threshold_factor = 0.4
buffer_size = 300
replay_draw = 32

[oracle]
kind = ground_truth

[run]
seed = 0
out = runs
"""

_TOY_APPENDIX = """
[model]
input_dim = 2
hidden = 16
classes = 2

[source]
kind = blobs
center_scale = 2.5
cov_scale = 0.5
per_class = 200

[pretrain]
epochs = 30
lr = 0.05

[episode]
mode = ctta
batch_size = 32
domains = shifted

[domain:shifted]
corrupt = rotate(0.7)+noise(0.3)
batches = 20

[selection]
strategy = ours

[budget]
labels_per_batch = 1

[engine]
lr = 0.02

[oracle]
kind = ground_truth

[run]
seed = 0
out = runs
"""

_SWEEPS = {
    "budget-sweep": "[ablate]\naxis = budget\nvalues = 1:1,3:1,5:1,1:3,1:5\nseeds = 0,1,2,3,4\n",
    "strategy-sweep": "[ablate]\naxis = strategy\n"
                      "values = ours,max_entropy,least_confidence,min_margin,random\n"
                      "seeds = 0,1,2,3,4\n",
    "hyper-sweep": "[ablate]\naxis = sigma\nvalues = 0.01,0.02,0.03,0.1,1.0\n"
                   "seeds = 0,1,2,3,4\n",
}

PRESET_NAMES = ("toy-appendix", "ctta-suite", "ftta-suite", "budget-sweep",
                "strategy-sweep", "hyper-sweep")


def preset_text(name: str) -> str:
    if name == "toy-appendix":
        return _TOY_APPENDIX
    if name == "ctta-suite":
        return _BENCH_BASE.format(mode="ctta")
    if name == "ftta-suite":
        return _BENCH_BASE.format(mode="ftta")
    if name in _SWEEPS:
        return _BENCH_BASE.format(mode="ctta") + _SWEEPS[name]
    raise ConfigError(f"unknown preset {name!r}; expected one of {PRESET_NAMES}")


def preset_config(name: str) -> RunConfig:
    return parse_config(preset_text(name))
