import csv
import matplotlib.pyplot as plt

with open("observables.csv") as f:
    rows = list(csv.DictReader(f))
t = [float(r["t"]) for r in rows]

fig, axes = plt.subplots(1, 3, figsize=(13, 4))
for ax, column in zip(axes, ["duality", "entropy", "distance"]):
    ax.plot(t, [float(r[column]) for r in rows])
    ax.set_xlabel("t")
    ax.set_title(column)
axes[2].set_yscale("log")
fig.tight_layout()
fig.savefig("simulate.png", dpi=150)
