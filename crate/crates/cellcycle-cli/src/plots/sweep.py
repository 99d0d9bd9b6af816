import csv
import matplotlib.pyplot as plt

with open("sweep.csv") as f:
    reader = csv.reader(f)
    header = next(reader)
    rows = [r for r in reader if r[1] == "ok"]

key = header[0]
column = "lambda0" if "lambda0" in header else header[3]
j = header.index(column)
plt.plot([float(r[0]) for r in rows], [float(r[j]) for r in rows], "o-")
plt.xlabel(key)
plt.ylabel(column)
plt.tight_layout()
plt.savefig("sweep.png", dpi=150)
