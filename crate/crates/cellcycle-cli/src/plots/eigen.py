import csv
import matplotlib.pyplot as plt
import numpy as np


def load(name, column):
    with open(name) as f:
        rows = list(csv.DictReader(f))
    a = np.array([float(r["a"]) for r in rows])
    x = np.array([float(r["x"]) for r in rows])
    v = np.array([float(r[column]) for r in rows])
    na = len(np.unique(a))
    nx = len(np.unique(x))
    return a.reshape(na, nx), x.reshape(na, nx), v.reshape(na, nx)


fig, axes = plt.subplots(1, 2, figsize=(11, 4))
for ax, (name, column) in zip(axes, [("N.csv", "N"), ("phi.csv", "phi")]):
    a, x, v = load(name, column)
    mesh = ax.pcolormesh(x, a, v, shading="auto")
    ax.set_xlabel("x")
    ax.set_ylabel("a")
    ax.set_title(column)
    fig.colorbar(mesh, ax=ax)
fig.tight_layout()
fig.savefig("eigen.png", dpi=150)
