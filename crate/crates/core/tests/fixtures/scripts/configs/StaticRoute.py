import json
import sys


def read_lines():
    return [l for l in sys.stdin.read().split("\n") if l.strip()]


out = []
for line in read_lines():
    w = line.split()
    if w[:2] == ["ip", "route"] and len(w) >= 5:
        out.append({"prefix": w[2], "mask": w[3], "next_hop": w[4], "input_data": line})
print(json.dumps(out))
