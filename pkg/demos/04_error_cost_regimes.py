"""
Trading false negatives against false positives
===============================================

Trains the same detector under three error-cost regimes and prints their
test metrics side by side. Weighting missed lesions harder (alpha=3)
drives the false negative rate down at the price of extra false alarms;
weighting false alarms harder (beta=3) does the opposite.
"""

from costdet import cli, evaluator, losses, syndata, trainer

slices = syndata.generate(syndata.GenConfig())
test = syndata.split_of(slices, "test")
print(f"default benchmark: {len(slices)} slices, evaluating on {len(test)} test slices")

regimes = (
    losses.CostConfig(),                    # plain cross entropy
    losses.CostConfig(alpha_lesion=3.0),    # misses cost 3x
    losses.CostConfig(beta_lesion=3.0),     # false alarms cost 3x
)

labels, reports = [], []
for cost in regimes:
    cfg = trainer.TrainConfig(epochs=30, seed=0, cost=cost)
    params, _ = trainer.train(slices, cfg)
    rep = evaluator.evaluate_split(test, params, threshold=0.7)
    labels.append(cost.tag())
    reports.append(rep)
    print(f"trained {cost.tag()}")

print()
cli.print_metric_table(labels, reports)
print(
    "\nreading the columns: a3b1 should sit below a1b1 on the FNR rows, "
    "a1b3 below a1b1 on the FP row"
)
