import csv
import matplotlib.pyplot as plt

with open("trajectory.csv") as f:
    rows = list(csv.DictReader(f))
rows = [r for r in rows if float(r["t"]) > 0]
t = [float(r["t"]) for r in rows]

fig, axes = plt.subplots(1, 2, figsize=(11, 4))
axes[0].loglog(t, [float(r["N"]) for r in rows], label="N")
if rows and rows[0]["S2"]:
    axes[0].loglog(t, [float(r["S2"]) for r in rows], label="S2")
axes[0].set_xlabel("t")
axes[0].legend()
axes[1].semilogx(t, [float(r["R"]) for r in rows])
axes[1].set_xlabel("t")
axes[1].set_title("P / (P + Q)")
fig.tight_layout()
fig.savefig("twophase.png", dpi=150)
