"""Generate the bundled cognitive-function example: two model configs
(gamma / weibull sojourns) and a simulated dataset of the published study's
shape (four graded cognitive states plus death, 21 latent states, four
covariates, biennial visits, exact death times).

Run from the repository root:  python tools/make_cognitive_configs.py
"""

import json
import math
import os

import numpy as np

HERE = os.path.join(os.path.dirname(__file__), "..", "src", "panelmsm",
                    "examples")

LIVING = ["c1", "c2", "c3", "c4"]
COVS = ["age", "male", "educ2", "educ3"]

# population composition: age bands (decades past 50) 4/3/2/1,
# 46% male, education 36/47/17
AGE_W = {0.0: 0.4, 1.0: 0.3, 2.0: 0.2, 3.0: 0.1}
SEX_W = {1.0: 0.46, 0.0: 0.54}
EDU_W = {(0.0, 0.0): 0.36, (1.0, 0.0): 0.47, (0.0, 1.0): 0.17}
N_SUBJECTS = 250


def population_groups():
    cells = []
    for age, wa in AGE_W.items():
        for male, ws in SEX_W.items():
            for (e2, e3), we in EDU_W.items():
                cells.append((wa * ws * we,
                              dict(age=age, male=male, educ2=e2, educ3=e3)))
    raw = [w * N_SUBJECTS for w, _ in cells]
    counts = [int(math.floor(r)) for r in raw]
    rem = N_SUBJECTS - sum(counts)
    order = sorted(range(len(cells)), key=lambda i: raw[i] - counts[i],
                   reverse=True)
    for i in order[:rem]:
        counts[i] += 1
    return [(counts[i], cells[i][1]) for i in range(len(cells))]


def config_yaml(family):
    if family == "weibull":
        shape_prior = "{mean: 0, sd: 0.25, lower: -1.609438, upper: 0.699681}"
    else:
        shape_prior = "{mean: 0, sd: 0.5, lower: -2.302585, upper: 1.607436}"
    lines = [
        "# Cognitive-function example: four graded states of delayed word",
        "# recall plus death, adjacent transitions and death from any state.",
        f"# Living-state sojourns use a 5-phase {family} approximation",
        "# (21 latent states).  Covariates: age (decades past 50, banded),",
        "# male, and two education levels, acting on sojourn scales and",
        "# next-state odds.  Time unit: years; visits every two years;",
        "# death dates recorded exactly.",
        "states: [c1, c2, c3, c4, dead]",
        "transitions:",
        "  - {from: c1, to: c2}",
        "  - {from: c2, to: c1}",
        "  - {from: c2, to: c3}",
        "  - {from: c3, to: c2}",
        "  - {from: c3, to: c4}",
        "  - {from: c4, to: c3}",
        "  - {from: c1, to: dead}",
        "  - {from: c2, to: dead}",
        "  - {from: c3, to: dead}",
        "  - {from: c4, to: dead}",
        "sojourn:",
    ]
    for r in LIVING:
        lines += [
            f"  {r}:",
            f"    family: {family}",
            "    phases: 5",
            f"    scale_covariates: [{', '.join(COVS)}]",
            f"    odds_covariates: [{', '.join(COVS)}]",
        ]
    lines.append("priors:")
    scale_means = {"c1": 1.2, "c2": 0.5, "c3": 1.2, "c4": 0.8}
    for r in LIVING:
        lines.append(f"  shape({r}): {shape_prior}")
        lines.append(f"  scale({r}): {{mean: {scale_means[r]}, sd: 0.5}}")
    for r, dests in [("c1", ["dead"]), ("c2", ["c3", "dead"]),
                     ("c3", ["c4", "dead"]), ("c4", ["dead"])]:
        for s in dests:
            m = -3.0 if s == "dead" else 0.5
            sd = 1.0 if s == "dead" else 1.5
            lines.append(f"  odds({r},{s}): {{mean: {m}, sd: {sd}}}")
    for r in LIVING:
        for c in COVS:
            lines.append(f"  aft({r},{c}): {{mean: 0, sd: 1}}")
    for r, dests in [("c1", ["dead"]), ("c2", ["c3", "dead"]),
                     ("c3", ["c4", "dead"]), ("c4", ["dead"])]:
        for s in dests:
            for c in COVS:
                lines.append(f"  lor({r},{s},{c}): {{mean: 0, sd: 1}}")
    lines.append("population:")
    lines.append("  initial_state: c1")
    lines.append("  groups:")
    for n, x in population_groups():
        if n == 0:
            continue
        kv = ", ".join(f"{k}: {v:g}" for k, v in x.items())
        lines.append(f"    - {{n: {n}, covariates: {{{kv}}}}}")
    lines += [
        "schedule: {start: 0, step: 2, count: 8}   # biennial visits, years",
        "observation: {exact_death: true}",
        "",
    ]
    return "\n".join(lines)


def generating_params(spec):
    from panelmsm.statespace import Params, SemiMarkovStateParams
    shapes = {"c1": 0.70, "c2": 1.10, "c3": 0.78, "c4": 0.75}
    mean_sojourn = {"c1": 3.0, "c2": 1.7, "c3": 3.1, "c4": 2.0}
    next_probs = {
        "c1": {"c2": 0.97, "dead": 0.03},
        "c2": {"c1": 0.30, "c3": 0.67, "dead": 0.03},
        "c3": {"c2": 0.80, "c4": 0.17, "dead": 0.03},
        "c4": {"c3": 0.90, "dead": 0.10},
    }
    aft = {"age": 0.15, "male": 0.05, "educ2": -0.10, "educ3": -0.15}
    lor_dead = {"age": 0.45, "male": 0.20, "educ2": -0.10, "educ3": -0.10}
    lor_prog = {"age": 0.20, "male": 0.00, "educ2": -0.20, "educ3": -0.30}
    semi = {}
    for r in LIVING:
        a = shapes[r]
        b = mean_sojourn[r] / a  # gamma mean = shape * scale
        lor = {}
        for s in next_probs[r]:
            if s == "dead":
                lor[s] = dict(lor_dead)
            elif spec.destinations(r).index(s) > 0:
                lor[s] = dict(lor_prog)
        lor.pop(spec.destinations(r)[0], None)
        semi[r] = SemiMarkovStateParams(a, b, dict(next_probs[r]),
                                        aft=dict(aft), lor=lor)
    return Params(semi=semi)


def main():
    os.makedirs(HERE, exist_ok=True)
    for family in ("gamma", "weibull"):
        path = os.path.join(HERE, f"cognitive_{family}.yaml")
        with open(path, "w") as fh:
            fh.write(config_yaml(family))
        print("wrote", path)

    from panelmsm.cli import parse_study, write_dataset
    from panelmsm.inference import Posterior, coordinates, natural_value
    from panelmsm.likelihood import OutcomeModel
    from panelmsm.simulate import observe_panel, simulate_trajectory
    from panelmsm.statespace import assemble_Q, build_layout
    from panelmsm.likelihood import PanelDataset, Subject

    study = parse_study(os.path.join(HERE, "cognitive_gamma.yaml"))
    spec = study.spec
    params = generating_params(spec)
    layout = build_layout(spec)
    outcome = OutcomeModel(layout)
    rng = np.random.default_rng(20240617)
    subjects = []
    sid = 0
    for count, x in study.population.groups:
        Q = assemble_Q(params, spec, layout, x)
        xrow = np.array([x[c] for c in COVS])
        for _ in range(count):
            traj = simulate_trajectory(Q, layout.first_phase["c1"],
                                       study.schedule.horizon + 1e-9, rng)
            recs = observe_panel(traj, study.schedule.times, outcome, rng,
                                 exact_absorbing=True)
            subjects.append(Subject(
                f"s{sid:04d}", np.array([t for t, _ in recs]),
                [ob for _, ob in recs], np.tile(xrow, (len(recs), 1))))
            sid += 1
    dataset = PanelDataset(list(COVS), subjects)
    out_csv = os.path.join(HERE, "cognitive_sim.csv")
    write_dataset(dataset, out_csv)
    post = Posterior(None, spec)
    truth = {c.name: float(natural_value(c, params, spec))
             for c in coordinates(spec)}
    with open(os.path.join(HERE, "cognitive_sim_truth.json"), "w") as fh:
        json.dump({"natural": truth,
                   "transformed": [float(v) for v in post.transform(params)],
                   "coordinates": post.names, "seed": 20240617}, fh, indent=2)
    n_dead = sum(1 for s in subjects if s.obs[-1].exact_entry)
    print(f"wrote {out_csv}: {len(subjects)} subjects, "
          f"{sum(len(s.times) for s in subjects)} records, {n_dead} deaths")


if __name__ == "__main__":
    main()
