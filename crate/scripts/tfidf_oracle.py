"""Reference ltc TF-IDF cosine rankings for the 20-document fixture.

Usage: python3 scripts/tfidf_oracle.py > crates/core/tests/fixtures/tfidf_oracle.json
"""
import json
import math
from collections import Counter

TOPICS = ["clock", "bridge", "opera", "river", "castle"]
ADJ = ["old", "tall", "famous", "red", "quiet", "busy", "stone", "golden"]


def documents():
    docs = []
    for i in range(20):
        topic = TOPICS[i % 5]
        words = [ADJ[(i * 3) % 8], topic, "near", ADJ[(i * 5 + 1) % 8], TOPICS[(i + 2) % 5]]
        if i % 4 == 0:
            words += [topic, "tower"]
        if i % 3 == 0:
            words += ["museum", "of", "art"]
        docs.append({"title": f"{topic} place {i // 5}", "text": " ".join(words)})
    return docs


QUERIES = [
    "old clock tower",
    "golden bridge near the river",
    "museum of art",
    "quiet opera castle stone",
    "nothing matches here",
]


def tokens(text):
    return [w.lower() for w in text.split()]


def ltc(counts, idf):
    v = {t: (1 + math.log(c)) * idf[t] for t, c in counts.items() if t in idf}
    v = {t: w for t, w in v.items() if w != 0.0}
    norm = math.sqrt(sum(w * w for w in v.values()))
    return {t: w / norm for t, w in v.items()} if norm > 0 else v


def main():
    docs = documents()
    toks = [tokens(d["title"]) + tokens(d["text"]) for d in docs]
    n = len(docs)
    df = Counter(t for ts in toks for t in set(ts))
    idf = {t: math.log(n / d) for t, d in df.items()}
    dvecs = [ltc(Counter(ts), idf) for ts in toks]
    out = {"documents": docs, "queries": []}
    for q in QUERIES:
        qv = ltc(Counter(tokens(q)), idf)
        scores = [sum(w * dv.get(t, 0.0) for t, w in qv.items()) for dv in dvecs]
        ranking = sorted(range(n), key=lambda i: (-scores[i], i))
        out["queries"].append({"query": q, "scores": scores, "ranking": ranking})
    print(json.dumps(out, indent=1))


if __name__ == "__main__":
    main()
