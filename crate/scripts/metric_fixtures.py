"""Writes reference metric values computed with sacrebleu and rouge-score.

Usage: python3 scripts/metric_fixtures.py > crates/core/tests/fixtures/metric_oracles.json
"""
import json

import sacrebleu
from rouge_score import rouge_scorer

CASES = [
    {"name": "cat_sat", "hyps": ["cat sat"], "refs": ["the cat sat"]},
    {
        "name": "dialogue_pairs",
        "hyps": [
            "the height is tall famous for stone so you love chess",
            "i think the river is long",
            "you love painting",
        ],
        "refs": [
            "the height is tall famous for granite so you love chess",
            "the river is very long and wide",
            "so you love painting and hiking",
        ],
    },
    {
        "name": "punctuation",
        "hyps": ["hello, world! it is (really) nice.", "no match here"],
        "refs": ["hello world, it is really nice!", "completely different words"],
    },
    {
        "name": "repeats",
        "hyps": ["the the the the cat", "a b c d e f g"],
        "refs": ["the cat is on the mat", "a b c d e f g h"],
    },
    {"name": "short_no_4gram", "hyps": ["a b c"], "refs": ["a b c d e"]},
]


def main():
    scorer = rouge_scorer.RougeScorer(["rouge1", "rouge2", "rougeL"], use_stemmer=False)
    out = []
    for case in CASES:
        hyps, refs = case["hyps"], case["refs"]
        chrf = sacrebleu.corpus_chrf(hyps, [refs], word_order=2).score
        bleu_exp = sacrebleu.corpus_bleu(hyps, [refs], tokenize="none").score
        bleu_none = sacrebleu.corpus_bleu(hyps, [refs], tokenize="none", smooth_method="none").score
        bleu_add1 = sacrebleu.corpus_bleu(
            hyps, [refs], tokenize="none", smooth_method="add-k", smooth_value=1
        ).score
        rouge = {"rouge1": 0.0, "rouge2": 0.0, "rougeL": 0.0}
        for h, r in zip(hyps, refs):
            s = scorer.score(r, h)
            for k in rouge:
                rouge[k] += s[k].fmeasure
        for k in rouge:
            rouge[k] = 100.0 * rouge[k] / len(hyps)
        out.append(
            dict(
                case,
                chrf_pp=chrf,
                bleu_exp=bleu_exp,
                bleu_none=bleu_none,
                bleu_add1=bleu_add1,
                **rouge,
            )
        )
    print(json.dumps(out, indent=2))


if __name__ == "__main__":
    main()
