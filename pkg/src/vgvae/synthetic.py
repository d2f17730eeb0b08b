"""Template-generated corpus with known semantics and syntax.

Every sentence realises a *meaning* (agent, verb, patient, adjectives) through
one of a fixed set of bracketed-tree templates. Paraphrase pairs share the
meaning and differ in template, so content words carry the semantics and the
template carries the syntax. STS-style items score the fraction of meaning
slots two sentences share.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import NamedTuple

import numpy as np

from .data import ParseTree, StsItem, parse_bracketed, serialize

NOUNS = (
    "dog cat bird horse farmer doctor teacher child pilot sailor king queen baker painter singer "
    "student lawyer hunter wolf fox tiger lion monkey rabbit soldier nurse judge chef driver poet "
    "dancer miner clerk writer actor guard thief monk priest giant"
).split()
VERBS = (
    "saw helped followed chased found visited called watched pushed pulled praised blamed greeted "
    "thanked warned fed carried lifted kicked hugged painted hired fired taught met bit "
    "admired ignored trusted rescued"
).split()
ADJECTIVES = (
    "old young tall small happy angry quiet loud brave lazy clever tired hungry rich poor kind "
    "strong weak famous proud shy calm wild gentle bold silly grumpy noisy pale curious"
).split()

# {A} expands to one (JJ ...) per adjective; {N1} agent, {V} verb, {N2} patient.
TEMPLATES = (
    "(S (NP (DT the) {A} (NN {N1})) (VP (VBD {V}) (NP (DT the) (NN {N2}))) (. .))",
    "(S (NP (DT the) (NN {N2})) (VP (VBD was) (VP (VBN {V}) (PP (IN by) (NP (DT the) {A} (NN {N1}))))) (. .))",
    "(S (NP (PRP it)) (VP (VBD was) (NP (NP (DT the) {A} (NN {N1})) (SBAR (WHNP (WDT that)) (S (VP (VBD {V}) (NP (DT the) (NN {N2}))))))) (. .))",
    "(S (NP (NP (DT the) (NN {N1})) (, ,) (SBAR (WHNP (WDT which)) (S (VP (VBD was) (ADJP {A})))) (, ,)) (VP (VBD {V}) (NP (DT the) (NN {N2}))) (. .))",
    "(S (NP (DT a) {A} (NN {N1})) (VP (VBD {V}) (NP (DT a) (NN {N2})) (NP (NN yesterday))) (. .))",
    "(S (NP (NN yesterday)) (, ,) (NP (DT the) {A} (NN {N1})) (VP (VBD {V}) (NP (DT the) (NN {N2}))) (. .))",
    "(SQ (VBD did) (NP (DT the) {A} (NN {N1})) (VP (VB {V}) (NP (DT the) (NN {N2}))) (. ?))",
    "(S (NP (DT the) (NN {N2})) (, ,) (NP (DT the) {A} (NN {N1})) (VP (VBD {V}) (NP (PRP it))) (. .))",
    "(S (SBAR (WHNP (WP what)) (S (NP (DT the) {A} (NN {N1})) (VP (VBD {V})))) (VP (VBD was) (NP (DT the) (NN {N2}))) (. .))",
    "(S (NP (NP (DT the) (NN {N1})) (SBAR (WHNP (WDT that)) (S (VP (VBD {V}) (NP (DT the) (NN {N2})))))) (VP (VBD was) (ADJP {A})) (. .))",
    "(S (NP (EX there)) (VP (VBD was) (NP (NP (DT a) {A} (NN {N1})) (SBAR (WHNP (WP who)) (S (VP (VBD {V}) (NP (DT the) (NN {N2}))))))) (. .))",
    "(S (NP (DT the) (NN {N2})) (VP (VBZ is) (SBAR (WHNP (WP what)) (S (NP (DT the) {A} (NN {N1})) (VP (VBD {V}))))) (. .))",
    "(S (NP (DT the) {A} (NN {N1})) (ADVP (RB quickly)) (VP (VBD {V}) (NP (DT the) (NN {N2}))) (. .))",
    "(S (NP (DT the) {A} (NN {N1})) (VP (VBD {V}) (NP (DT the) (NN {N2})) (ADVP (RB again))) (. .))",
    "(S (PP (IN by) (NP (DT the) {A} (NN {N1}))) (, ,) (NP (DT the) (NN {N2})) (VP (VBD was) (VP (VBN {V}))) (. .))",
    "(NP (NP (DT the) (NN {N2})) (SBAR (WHNP (WDT that)) (S (NP (DT the) {A} (NN {N1})) (VP (VBD {V})))) (. .))",
    "(S (CC so) (NP (DT the) {A} (NN {N1})) (VP (VBD {V}) (NP (PRP$ their) (NN {N2}))) (. .))",
    "(S (NP (PRP it)) (VP (VBZ is) (NP (NP (DT the) (NN {N2})) (SBAR (WHNP (WDT that)) (S (NP (DT the) {A} (NN {N1})) (VP (VBD {V})))))) (. .))",
    "(S (ADVP (RB once)) (NP (DT the) {A} (NN {N1})) (VP (VBD {V}) (NP (DT the) (NN {N2})) (PP (IN at) (NP (NN night)))) (. .))",
    "(S (NP (DT the) (NN {N2})) (VP (VBD got) (VP (VBN {V}) (PP (IN by) (NP (DT some) {A} (NN {N1}))) (ADVP (RB today)))) (. !))",
)


class Meaning(NamedTuple):
    agent: str
    verb: str
    patient: str
    adjectives: tuple[str, ...]


def sample_meaning(rng: np.random.Generator, max_adjectives: int = 2) -> Meaning:
    agent, patient = rng.choice(len(NOUNS), size=2, replace=False)
    n_adj = int(rng.integers(1, max_adjectives + 1))
    adjs = tuple(ADJECTIVES[i] for i in rng.choice(len(ADJECTIVES), size=n_adj, replace=False))
    return Meaning(NOUNS[agent], VERBS[int(rng.integers(len(VERBS)))], NOUNS[patient], adjs)


def realize(meaning: Meaning, template: int) -> ParseTree:
    adj = " ".join(f"(JJ {a})" for a in meaning.adjectives)
    text = TEMPLATES[template].format(A=adj, N1=meaning.agent, V=meaning.verb, N2=meaning.patient)
    return parse_bracketed(text)


def perturb(meaning: Meaning, n_changes: int, rng: np.random.Generator) -> Meaning:
    """Replace ``n_changes`` of the four meaning slots with different values."""
    slots = rng.choice(4, size=n_changes, replace=False)
    agent, verb, patient, adjs = meaning
    for s in sorted(int(x) for x in slots):
        if s == 0:
            agent = _other(NOUNS, (agent, patient), rng)
        elif s == 1:
            verb = _other(VERBS, (verb,), rng)
        elif s == 2:
            patient = _other(NOUNS, (agent, patient), rng)
        else:
            pool = [a for a in ADJECTIVES if a not in adjs]
            adjs = tuple(pool[i] for i in rng.choice(len(pool), size=len(adjs), replace=False))
    return Meaning(agent, verb, patient, adjs)


def _other(pool, exclude, rng) -> str:
    choices = [w for w in pool if w not in exclude]
    return choices[int(rng.integers(len(choices)))]


@dataclass
class LabeledSentence:
    tree: ParseTree
    template: int
    meaning: Meaning

    @property
    def tokens(self) -> list[str]:
        return self.tree.leaves()


@dataclass
class SyntheticCorpus:
    pairs: list[tuple[list[str], list[str]]]
    dev: list[StsItem]
    test: list[StsItem]
    candidates: list[LabeledSentence]
    queries: list[LabeledSentence]

    def write(self, directory) -> dict[str, Path]:
        """Write every split in the on-disk formats the loaders read."""
        out = Path(directory)
        out.mkdir(parents=True, exist_ok=True)
        paths = {
            "pairs": out / "pairs.tsv",
            "dev": out / "sts_dev.tsv",
            "test": out / "sts_test.tsv",
            "candidates": out / "candidates.trees",
            "queries": out / "queries.trees",
        }
        _write_lines(paths["pairs"], (f"{' '.join(a)}\t{' '.join(b)}" for a, b in self.pairs))
        for split in ("dev", "test"):
            items = getattr(self, split)
            _write_lines(paths[split], (f"{' '.join(it.sent1)}\t{' '.join(it.sent2)}\t{it.score:g}" for it in items))
        for split in ("candidates", "queries"):
            _write_lines(paths[split], (serialize(x.tree) for x in getattr(self, split)))
        return paths


def _write_lines(path: Path, lines) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for line in lines:
            fh.write(line + "\n")


def _sts_items(n: int, rng: np.random.Generator) -> list[StsItem]:
    items = []
    for _ in range(n):
        base = sample_meaning(rng)
        k = int(rng.integers(0, 5))
        other = perturb(base, k, rng)
        t1, t2 = rng.choice(len(TEMPLATES), size=2, replace=False)
        items.append(StsItem(realize(base, int(t1)).leaves(), realize(other, int(t2)).leaves(), 5.0 * (4 - k) / 4))
    return items


def _labeled(n: int, rng: np.random.Generator) -> list[LabeledSentence]:
    out = []
    for _ in range(n):
        m = sample_meaning(rng)
        t = int(rng.integers(len(TEMPLATES)))
        out.append(LabeledSentence(realize(m, t), t, m))
    return out


def generate_corpus(n_pairs: int = 5000, n_dev: int = 300, n_test: int = 500, n_candidates: int = 2000,
                    n_queries: int = 300, seed: int = 0) -> SyntheticCorpus:
    """Paraphrase pairs realise one meaning through two distinct templates."""
    rng = np.random.default_rng(seed)
    pairs = []
    for _ in range(n_pairs):
        m = sample_meaning(rng)
        t1, t2 = rng.choice(len(TEMPLATES), size=2, replace=False)
        pairs.append((realize(m, int(t1)).leaves(), realize(m, int(t2)).leaves()))
    return SyntheticCorpus(
        pairs=pairs,
        dev=_sts_items(n_dev, rng),
        test=_sts_items(n_test, rng),
        candidates=_labeled(n_candidates, rng),
        queries=_labeled(n_queries, rng),
    )
