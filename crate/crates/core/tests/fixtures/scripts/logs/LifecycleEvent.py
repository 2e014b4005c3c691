import json
import re
import sys

HEAD = re.compile(r"^(\d{4}-\d\d-\d\d \d\d:\d\d:\d\d\.\d{3}) (\d+) (\w+) (\S+) (\[[^\]]*\]) (.*)$")
INST = re.compile(r"^\[instance: ([0-9a-f-]+)\] (.*)$")


def read_lines():
    return [l for l in sys.stdin.read().split("\n") if l.strip()]


out = []
for line in read_lines():
    m = HEAD.match(line)
    i = INST.match(m.group(6)) if m else None
    e = re.match(r"^VM (\w+) \(Lifecycle Event\)$", i.group(2)) if i else None
    if not e:
        continue
    out.append({"timestamp": m.group(1), "instance_id": i.group(1), "event": e.group(1), "input_data": line})
print(json.dumps(out))
