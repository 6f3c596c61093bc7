"""Adversarial rewrites of MCQA instances.

Four generators, each a pure function of ``(dataset, seed)``:

* ``adv1``  one wrong option becomes the gold option of a sibling question;
* ``adv2``  two wrong options become the golds of two different siblings;
* ``adv3``  one wrong option becomes a passage sentence that shares no content
  token with the gold option;
* ``adv4``  a wrong option with entities has each entity swapped for another of
  the same type and is appended to the passage as a sentence.

Instances that cannot be attacked pass through unchanged and are counted, so
attacked sets stay index-aligned with their source.
"""

from __future__ import annotations

import json
from collections import defaultdict
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable, Sequence

from .data import Dataset, McqaInstance, Vocabulary, derive_rng, passage_sentences

KINDS = ("adv1", "adv2", "adv3", "adv4")


@dataclass
class AttackRecord:
    index: int
    kind: str
    status: str  # "ok", "degraded" or "skipped"
    slots: list[int] = field(default_factory=list)
    material: list[list[int]] = field(default_factory=list)
    sources: list[int] = field(default_factory=list)
    checks: dict[str, bool] = field(default_factory=dict)
    note: str = ""

    @property
    def passed(self) -> bool:
        return all(self.checks.values())


@dataclass
class AttackReport:
    kind: str
    seed: int
    records: list[AttackRecord]

    @property
    def counts(self) -> dict[str, int]:
        out = {"total": len(self.records), "ok": 0, "degraded": 0, "skipped": 0}
        for r in self.records:
            out[r.status] += 1
        return out

    @property
    def all_passed(self) -> bool:
        return all(r.passed for r in self.records)

    def check_stats(self) -> dict[str, dict[str, int]]:
        stats: dict[str, dict[str, int]] = defaultdict(lambda: {"pass": 0, "fail": 0})
        for r in self.records:
            for name, ok in r.checks.items():
                stats[name]["pass" if ok else "fail"] += 1
        return {k: dict(v) for k, v in sorted(stats.items())}

    def to_json(self) -> dict:
        return {
            "kind": self.kind, "seed": self.seed, "counts": self.counts, "all_passed": self.all_passed,
            "checks": self.check_stats(),
            "records": [
                {"index": r.index, "status": r.status, "slots": r.slots, "material": r.material,
                 "sources": r.sources, "checks": dict(sorted(r.checks.items())), "note": r.note}
                for r in self.records
            ],
        }

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_json(), sort_keys=True, indent=1) + "\n")


def sibling_index(instances: Sequence[McqaInstance]) -> dict[int, list[int]]:
    groups: dict[int, list[int]] = defaultdict(list)
    for i, inst in enumerate(instances):
        groups[inst.passage_id].append(i)
    return groups


def _wrong_slots(inst: McqaInstance) -> list[int]:
    return [k for k in range(inst.K) if k != inst.answer]


def _gold(inst: McqaInstance) -> tuple[int, ...]:
    return inst.options[inst.answer]


def _content(tokens: Sequence[int], vocab: Vocabulary) -> set[int]:
    return {t for t in tokens if vocab.is_content(t)}


def _with_options(inst: McqaInstance, slots: Sequence[int], texts: Sequence[tuple[int, ...]],
                  kind: str) -> McqaInstance:
    opts = list(inst.options)
    for k, text in zip(slots, texts):
        opts[k] = tuple(text)
    return replace(inst, options=tuple(opts), provenance=kind)


def _eligible_siblings(i: int, instances, groups) -> list[int]:
    inst = instances[i]
    seen = set(inst.options)
    out, texts = [], set()
    for j in groups[inst.passage_id]:
        text = _gold(instances[j])
        if j != i and text not in seen and text not in texts:
            out.append(j)
            texts.add(text)
    return out


def _borrow(i: int, instances, groups, seed: int, kind_id: int, want: int):
    """Draw ``want`` siblings first, then as many wrong slots."""
    rng = derive_rng(seed, kind_id, i)
    cands = _eligible_siblings(i, instances, groups)
    n = min(want, len(cands))
    if n == 0:
        return None
    sibs = [cands[j] for j in rng.choice(len(cands), size=n, replace=False)]
    wrong = _wrong_slots(instances[i])
    slots = sorted(int(wrong[j]) for j in rng.choice(len(wrong), size=n, replace=False))
    return sibs, slots


def _truth_attack(dataset: Dataset, seed: int, kind: str, want: int) -> tuple[Dataset, AttackReport]:
    instances = list(dataset.instances)
    groups = sibling_index(instances)
    kind_id = KINDS.index(kind) + 1
    out, records = [], []
    for i, inst in enumerate(instances):
        drawn = _borrow(i, instances, groups, seed, kind_id, want)
        if drawn is None:
            note = "no sibling question" if len(groups[inst.passage_id]) < 2 else "no usable sibling gold"
            out.append(inst)
            records.append(AttackRecord(i, kind, "skipped", note=note))
            continue
        sibs, slots = drawn
        texts = [_gold(instances[j]) for j in sibs]
        new = _with_options(inst, slots, texts, kind)
        status = "ok" if len(sibs) == want else "degraded"
        rec = AttackRecord(i, kind, status, slots, [list(t) for t in texts], sibs,
                           note="" if status == "ok" else f"only {len(sibs)} sibling gold(s) available")
        out.append(new)
        records.append(rec)
    report = AttackReport(kind, seed, records)
    _run_checks(report, instances, out, None)
    return Dataset(out, {**dataset.meta, "attack": kind, "attack_seed": seed}), report


def add1truth2opt(dataset: Dataset, seed: int, vocab: Vocabulary | None = None) -> tuple[Dataset, AttackReport]:
    return _truth_attack(dataset, seed, "adv1", 1)


def add2truth2opt(dataset: Dataset, seed: int, vocab: Vocabulary | None = None) -> tuple[Dataset, AttackReport]:
    return _truth_attack(dataset, seed, "adv2", 2)


def add1pas2opt(dataset: Dataset, seed: int, vocab: Vocabulary) -> tuple[Dataset, AttackReport]:
    instances = list(dataset.instances)
    out, records = [], []
    for i, inst in enumerate(instances):
        rng = derive_rng(seed, 3, i)
        gold = _content(_gold(inst), vocab)
        existing = set(inst.options)
        cands = []
        for s in passage_sentences(inst, vocab):
            if s not in existing and s not in cands and not (_content(s, vocab) & gold):
                cands.append(s)
        if not cands:
            out.append(inst)
            records.append(AttackRecord(i, "adv3", "skipped", note="no admissible passage sentence"))
            continue
        sent = cands[int(rng.integers(len(cands)))]
        wrong = _wrong_slots(inst)
        slot = int(wrong[int(rng.integers(len(wrong)))])
        out.append(_with_options(inst, [slot], [sent], "adv3"))
        records.append(AttackRecord(i, "adv3", "ok", [slot], [list(sent)]))
    report = AttackReport("adv3", seed, records)
    _run_checks(report, instances, out, vocab)
    return Dataset(out, {**dataset.meta, "attack": "adv3", "attack_seed": seed}), report


def add1ent2pas(dataset: Dataset, seed: int, vocab: Vocabulary) -> tuple[Dataset, AttackReport]:
    instances = list(dataset.instances)
    period = vocab.id(".")
    out, records = [], []
    for i, inst in enumerate(instances):
        rng = derive_rng(seed, 4, i)
        cands = [k for k in _wrong_slots(inst) if any(t in vocab.entity_type for t in inst.options[k])]
        if not cands:
            out.append(inst)
            records.append(AttackRecord(i, "adv4", "skipped", note="no wrong option with an entity"))
            continue
        k = int(cands[int(rng.integers(len(cands)))])
        swapped = []
        for t in inst.options[k]:
            typ = vocab.entity_type.get(t)
            if typ is None:
                swapped.append(t)
                continue
            pool = [e for e in vocab.entities_by_type[typ] if e != t]
            swapped.append(int(pool[int(rng.integers(len(pool)))]))
        sentence = tuple(swapped) + (period,)
        out.append(replace(inst, passage=inst.passage + sentence, provenance="adv4"))
        records.append(AttackRecord(i, "adv4", "ok", [k], [list(sentence)]))
    report = AttackReport("adv4", seed, records)
    _run_checks(report, instances, out, vocab)
    return Dataset(out, {**dataset.meta, "attack": "adv4", "attack_seed": seed}), report


GENERATORS: dict[str, Callable] = {
    "adv1": add1truth2opt, "adv2": add2truth2opt, "adv3": add1pas2opt, "adv4": add1ent2pas,
}


def attack(kind: str, dataset: Dataset, seed: int, vocab: Vocabulary) -> tuple[Dataset, AttackReport]:
    if kind not in GENERATORS:
        raise ValueError(f"unknown attack {kind!r}; expected one of {KINDS}")
    return GENERATORS[kind](dataset, seed, vocab)


# ---------------------------------------------------------------------------
# constraint scans (recomputed from the emitted instances, not from the drawing code)


def _run_checks(report: AttackReport, original: Sequence[McqaInstance], attacked: Sequence[McqaInstance],
                vocab: Vocabulary | None) -> None:
    groups = sibling_index(original)
    for rec in report.records:
        rec.checks = check_instance(report.kind, original[rec.index], attacked[rec.index], rec,
                                    [_gold(original[j]) for j in groups[original[rec.index].passage_id]
                                     if j != rec.index], vocab)


def check_instance(kind: str, before: McqaInstance, after: McqaInstance, rec: AttackRecord,
                   sibling_golds: Sequence[tuple[int, ...]], vocab: Vocabulary | None) -> dict[str, bool]:
    checks = {
        "gold_index": after.answer == before.answer,
        "gold_text": _gold(after) == _gold(before),
        "n_options": after.K == before.K,
    }
    if rec.status == "skipped":
        checks["unchanged"] = after == before
        return checks
    changed = [k for k in range(before.K) if after.options[k] != before.options[k]]
    if kind in ("adv1", "adv2"):
        want = 1 if kind == "adv1" or rec.status == "degraded" else 2
        golds = set(sibling_golds)
        checks["replaced_count"] = len(changed) == want and after.passage == before.passage
        checks["sibling_gold"] = all(after.options[k] in golds for k in changed)
        checks["distinct_options"] = len(set(after.options)) == after.K
        inserted = [k for k in _wrong_slots(after) if after.options[k] in golds]
        checks["sibling_count"] = len(inserted) == want
    elif kind == "adv3":
        assert vocab is not None
        sentences = set(passage_sentences(before, vocab))
        checks["replaced_count"] = len(changed) == 1 and after.passage == before.passage
        checks["from_passage"] = all(after.options[k] in sentences for k in changed)
        checks["no_gold_overlap"] = all(
            not (_content(after.options[k], vocab) & _content(_gold(before), vocab)) for k in changed)
    elif kind == "adv4":
        assert vocab is not None
        n = len(before.passage)
        appended = after.passage[n:]
        body = appended[:-1]
        src = before.options[rec.slots[0]] if rec.slots else ()
        checks["options_unchanged"] = after.options == before.options
        checks["prefix_kept"] = after.passage[:n] == before.passage and appended[-1:] == (vocab.id("."),)
        checks["same_types"] = len(body) == len(src) and all(
            (vocab.entity_type.get(a) == vocab.entity_type.get(b)) and
            ((a != b) if b in vocab.entity_type else (a == b)) for a, b in zip(body, src))
        checks["has_entity"] = any(t in vocab.entity_type for t in src)
        checks["not_an_option"] = all(appended != o and body != o for o in before.options)
    return checks


def augment(dataset: Dataset, kinds: Sequence[str], seed: int, vocab: Vocabulary) -> Dataset:
    """Original instances followed by every successfully attacked copy."""
    extra = []
    for kind in kinds:
        ds, report = attack(kind, dataset, seed, vocab)
        extra += [ds.instances[r.index] for r in report.records if r.status != "skipped"]
    return Dataset(list(dataset.instances) + extra, {**dataset.meta, "augment": list(kinds)})
