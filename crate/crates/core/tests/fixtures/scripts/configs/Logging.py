import json
import sys


def read_lines():
    return [l for l in sys.stdin.read().split("\n") if l.strip()]


out = []
for line in read_lines():
    w = line.split()
    if w[0] != "logging" or len(w) < 3:
        continue
    out.append({"kind": w[1], "value": " ".join(w[2:]), "input_data": line})
print(json.dumps(out))
