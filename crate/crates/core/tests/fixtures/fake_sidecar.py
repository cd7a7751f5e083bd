import json
import sys

# Newline-delimited JSON sidecar stand-in. NER finds capitalised words from a
# fixed list; embed returns a 4-dim bag of letters; "crash" exits.
NAMES = {"Alice": "PER", "Bob": "PER", "Paris": "LOC", "Acme": "ORG"}

for line in sys.stdin:
    req = json.loads(line)
    op = req.get("op")
    if op == "health":
        resp = {"ok": True, "status": {"dim": 4, "model": "fake"}}
    elif op == "ner":
        text = req["text"]
        if text == "crash":
            sys.exit(3)
        spans = []
        for name, label in NAMES.items():
            start = text.find(name)
            while start >= 0:
                spans.append({"start": start, "end": start + len(name), "label": label, "surface": name})
                start = text.find(name, start + 1)
        if text == "bad offsets":
            spans.append({"start": 5, "end": 400, "label": "PER"})
        resp = {"ok": True, "spans": spans}
    elif op == "embed":
        vecs = []
        for t in req["texts"]:
            v = [0.0, 0.0, 0.0, 0.0]
            for ch in t.lower():
                if "a" <= ch <= "z":
                    v[(ord(ch) - 97) % 4] += 1.0
            vecs.append(v)
        resp = {"ok": True, "vectors": vecs}
    else:
        resp = {"ok": False, "error": "unknown op"}
    sys.stdout.write(json.dumps(resp) + "\n")
    sys.stdout.flush()
