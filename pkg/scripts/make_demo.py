"""Regenerate the bundled demo: environment, pilot samples, fitted kernel, run config."""

import json

from gpcover import demo
from gpcover.cli import write_xy_csv
from gpcover.environment import discretize, save_environment
from gpcover.gp import VARIABLE, save_kernel
from gpcover.harness import SweepConfig, pilot_survey, synthetic_field

SEED = 0


def main():
    env = discretize(demo.BOUNDARY, [demo.OBSTACLE], demo.SPACING, demo.SPACING)
    save_environment(env, demo.ENV)
    field_spec = {"synthetic": "two-zone-lengthscale", "params": {"split_x": demo.SPLIT_X}, "seed": SEED}
    fld = synthetic_field(field_spec["synthetic"], env, field_spec["params"], SEED)
    _, (X, y), model = pilot_survey(env, fld, SweepConfig(seed=SEED, kernel_kind=VARIABLE))
    write_xy_csv(demo.PILOT, X, y)
    save_kernel(model.kernel, model.noise_variance, demo.KERNEL)
    config = {
        "env": "env.json",
        "kernel": "kernel.json",
        "kernel_kind": VARIABLE,
        "pilot_data": "pilot.csv",
        "field": field_spec,
        "target": {"mode": "ratio", "value": 0.5},
        "method": "greedy",
        "budget": None,
        "seed": SEED,
        "sweep": {"ratios": [0.9, 0.8, 0.7, 0.6, 0.5], "methods": ["greedy", "gcb", "gcb-budgeted", "hex"],
                  "budget_margin_m": 20.0, "pilot_waypoints": 10, "pilot_samples": 350,
                  "pilot_noise_sd": 0.05},
    }
    demo.CONFIG.write_text(json.dumps(config, indent=2) + "\n")
    print(f"demo: {env.n_eval} eval points, {env.n_candidates} candidates -> {demo.DIR}")


if __name__ == "__main__":
    main()
