"""Dataset balancing, instance sampling, hard-negative mining, triplet
construction and annotation-vote aggregation.

The allocation procedure is the iterative redistribution the training
set was built with: each round splits the remaining budget equally
among datasets still in play (floor shares, remainder one-per-dataset
in ascending dataset_id order); datasets whose whole inventory fits
inside their share contribute everything and are frozen, and the
leftover budget is redistributed in the next round.
"""
from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from .bundle import EmbeddingBundle
from .errors import (
    FormatError,
    InsufficientInventory,
    InvalidInput,
    IoError,
    MissingItem,
    NoCandidates,
)
from .records import SOURCE_INSTANCE_KEY, ImageManifest, Triplet, VoteRecord, manifest_index
from .rng import derived_rng

TRIPLET_KINDS = ("REAL_ONLY", "S2A_POSITIVE", "S2B_NEGATIVE")
S2A_PAIRING_MODES = ("EDITED_POSITIVE", "EDITED_ANCHOR", "BOTH_EDITED")


# ---------------------------------------------------------------------------
# inventory, filtering, allocation


def load_inventory(path) -> dict:
    """Inventory JSON: dataset_id -> count, or -> {"instances": n,
    "categories": {name: count, ...}} when category detail exists."""
    try:
        with open(path, "r", encoding="utf-8") as fh:
            raw = json.load(fh)
    except OSError as exc:
        raise IoError(f"cannot read inventory {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise FormatError(f"{path}: invalid JSON: {exc}") from exc
    if not isinstance(raw, dict) or not raw:
        raise FormatError(f"{path}: inventory must be a non-empty object")
    inv: dict = {}
    for name, val in raw.items():
        if isinstance(val, int) and not isinstance(val, bool) and val >= 1:
            inv[name] = val
        elif isinstance(val, dict):
            cats = val.get("categories")
            if cats is not None:
                if not isinstance(cats, dict) or not all(
                    isinstance(c, int) and c >= 0 for c in cats.values()
                ):
                    raise FormatError(f"{path}: bad categories for {name!r}")
            count = val.get("instances", sum(cats.values()) if cats else None)
            if not isinstance(count, int) or count < 1:
                raise FormatError(f"{path}: bad instance count for {name!r}")
            inv[name] = {"instances": count, **({"categories": dict(cats)} if cats else {})}
        else:
            raise FormatError(f"{path}: bad inventory entry for {name!r}")
    return inv


def inventory_counts(inv: dict) -> dict[str, int]:
    return {
        name: (val if isinstance(val, int) else val["instances"]) for name, val in inv.items()
    }


def load_filter_rules(path) -> list[dict]:
    try:
        with open(path, "r", encoding="utf-8") as fh:
            rules = json.load(fh)
    except OSError as exc:
        raise IoError(f"cannot read filter config {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise FormatError(f"{path}: invalid JSON: {exc}") from exc
    if not isinstance(rules, list):
        raise FormatError(f"{path}: filter config must be a JSON array")
    for rule in rules:
        if not isinstance(rule, dict) or "dataset_id" not in rule or "action" not in rule:
            raise FormatError(f"{path}: each rule needs dataset_id and action")
        if rule["action"] not in ("drop", "drop_categories", "keep_categories"):
            raise FormatError(f"{path}: unknown action {rule['action']!r}")
        if rule["action"] != "drop" and not isinstance(rule.get("categories"), list):
            raise FormatError(f"{path}: {rule['action']} needs a categories list")
    return rules


def apply_filters(inv: dict, rules: list[dict]) -> dict:
    """Apply declarative drop/keep rules, returning a new inventory."""
    out = {
        name: (dict(val) if isinstance(val, dict) else val) for name, val in inv.items()
    }
    for rule in rules:
        name = rule["dataset_id"]
        if name not in out:
            raise FormatError(f"filter rule names unknown dataset {name!r}")
        action = rule["action"]
        if action == "drop":
            del out[name]
            continue
        entry = out[name]
        if not isinstance(entry, dict) or "categories" not in entry:
            raise FormatError(f"dataset {name!r} has no category detail to filter")
        cats = entry["categories"]
        wanted = set(rule["categories"])
        missing = wanted - set(cats)
        if missing:
            raise FormatError(f"dataset {name!r} lacks categories {sorted(missing)}")
        if action == "keep_categories":
            kept = {c: n for c, n in cats.items() if c in wanted}
        else:
            kept = {c: n for c, n in cats.items() if c not in wanted}
        total = sum(kept.values())
        if total < 1:
            del out[name]
        else:
            out[name] = {"instances": total, "categories": kept}
    return out


def balanced_allocate(inv: dict, budget: int) -> dict[str, int]:
    """Iterative equal-share allocation with freezing, exact to the budget.

    Rounds divide the remaining budget equally (floor) among active
    datasets, remainder going one-per-dataset in ascending dataset_id;
    any active dataset whose inventory is at or under its round quota is
    frozen at its inventory and the round recomputes with what is left.
    """
    counts = inventory_counts(inv)
    if budget < 1:
        raise InvalidInput(f"budget must be positive, got {budget}")
    if any(c < 1 for c in counts.values()):
        raise InvalidInput("inventory counts must be >= 1")
    if sum(counts.values()) < budget:
        raise InsufficientInventory(
            f"inventory holds {sum(counts.values())} instances, budget is {budget}"
        )
    allocation: dict[str, int] = {}
    active = sorted(counts)
    remaining = budget
    while active and remaining > 0:
        share, extra = divmod(remaining, len(active))
        quotas = {
            name: share + (1 if i < extra else 0) for i, name in enumerate(active)
        }
        frozen = [name for name in active if counts[name] <= quotas[name]]
        if frozen:
            for name in frozen:
                allocation[name] = counts[name]
                remaining -= counts[name]
            active = [name for name in active if name not in frozen]
        else:
            for name in active:
                allocation[name] = quotas[name]
            remaining = 0
            active = []
    for name in counts:
        allocation.setdefault(name, 0)
    return allocation


# ---------------------------------------------------------------------------
# instance sampling and splits


@dataclass(frozen=True)
class InstanceSample:
    instance_id: str
    dataset_id: str
    anchor: str
    positive: str


def sample_instances(
    allocation: dict[str, int], manifests: list[ImageManifest], seed: int
) -> tuple[list[InstanceSample], dict[str, int]]:
    """Pick allocated instances per dataset and two distinct real images
    for each (anchor + positive), uniformly and deterministically.

    Instances with fewer than two S1 images are skipped and replaced
    from the same dataset when possible; exhaustion is reported in the
    returned shortfall map, not raised.
    """
    by_dataset: dict[str, dict[str, list[str]]] = {}
    for rec in manifests:
        if rec.subset != "S1":
            continue
        by_dataset.setdefault(rec.dataset_id, {}).setdefault(rec.instance_id, []).append(
            rec.image_id
        )

    samples: list[InstanceSample] = []
    shortfall: dict[str, int] = {}
    for dataset_id in sorted(allocation):
        want = allocation[dataset_id]
        if want == 0:
            continue
        instances = by_dataset.get(dataset_id, {})
        eligible = sorted(iid for iid, images in instances.items() if len(images) >= 2)
        rng = derived_rng(seed, "instances", dataset_id)
        perm = rng.permutation(len(eligible))
        chosen = [eligible[i] for i in perm[: min(want, len(eligible))]]
        if len(chosen) < want:
            shortfall[dataset_id] = want - len(chosen)
        for instance_id in chosen:
            images = sorted(instances[instance_id])
            pick = derived_rng(seed, "pair", instance_id).permutation(len(images))[:2]
            samples.append(
                InstanceSample(
                    instance_id=instance_id,
                    dataset_id=dataset_id,
                    anchor=images[pick[0]],
                    positive=images[pick[1]],
                )
            )
    samples.sort(key=lambda s: (s.dataset_id, s.instance_id))
    return samples, shortfall


def assign_splits(
    samples: list[InstanceSample], seed: int, ratio: tuple[int, int] = (10, 1)
) -> dict[str, str]:
    """Instance-level train/val assignment, proportional per dataset.

    n_train = floor(n * ratio_train / (ratio_train + ratio_val)) per
    dataset, on a seeded shuffle of its instance ids.
    """
    train_part, val_part = ratio
    if train_part < 1 or val_part < 0:
        raise InvalidInput(f"bad split ratio {ratio}")
    by_dataset: dict[str, list[str]] = {}
    for s in samples:
        by_dataset.setdefault(s.dataset_id, []).append(s.instance_id)
    split: dict[str, str] = {}
    for dataset_id in sorted(by_dataset):
        ids = sorted(set(by_dataset[dataset_id]))
        rng = derived_rng(seed, "split", dataset_id)
        perm = rng.permutation(len(ids))
        n_train = len(ids) * train_part // (train_part + val_part)
        for pos, idx in enumerate(perm):
            split[ids[idx]] = "train" if pos < n_train else "val"
    return split


def save_samples(path, samples: list[InstanceSample], split: dict[str, str] | None = None) -> None:
    """Selected-instance JSONL, one record per sampled instance."""
    try:
        with open(path, "w", encoding="utf-8") as fh:
            for s in sorted(samples, key=lambda x: (x.dataset_id, x.instance_id)):
                obj = {
                    "instance_id": s.instance_id,
                    "dataset_id": s.dataset_id,
                    "anchor": s.anchor,
                    "positive": s.positive,
                }
                if split is not None:
                    obj["split"] = split[s.instance_id]
                fh.write(json.dumps(obj, sort_keys=True, separators=(",", ":")) + "\n")
    except OSError as exc:
        raise IoError(f"cannot write samples {path}: {exc}") from exc


def load_samples(path) -> tuple[list[InstanceSample], dict[str, str]]:
    """Read a selected-instance file back; returns (samples, split map)."""
    samples: list[InstanceSample] = []
    split: dict[str, str] = {}
    try:
        with open(path, "r", encoding="utf-8") as fh:
            for lineno, line in enumerate(fh, start=1):
                line = line.strip()
                if not line:
                    continue
                try:
                    obj = json.loads(line)
                except json.JSONDecodeError as exc:
                    raise FormatError(f"{path}:{lineno}: invalid JSON: {exc}") from exc
                try:
                    samples.append(
                        InstanceSample(
                            instance_id=obj["instance_id"],
                            dataset_id=obj["dataset_id"],
                            anchor=obj["anchor"],
                            positive=obj["positive"],
                        )
                    )
                except KeyError as exc:
                    raise FormatError(f"{path}:{lineno}: missing field {exc}") from exc
                if "split" in obj:
                    split[obj["instance_id"]] = obj["split"]
    except OSError as exc:
        raise IoError(f"cannot read samples {path}: {exc}") from exc
    return samples, split


def save_mined(path, mined: dict[str, list[str]]) -> None:
    try:
        with open(path, "w", encoding="utf-8") as fh:
            for anchor in sorted(mined):
                fh.write(
                    json.dumps(
                        {"anchor": anchor, "negatives": mined[anchor]},
                        sort_keys=True,
                        separators=(",", ":"),
                    )
                    + "\n"
                )
    except OSError as exc:
        raise IoError(f"cannot write mined negatives {path}: {exc}") from exc


def load_mined(path) -> dict[str, list[str]]:
    mined: dict[str, list[str]] = {}
    try:
        with open(path, "r", encoding="utf-8") as fh:
            for lineno, line in enumerate(fh, start=1):
                line = line.strip()
                if not line:
                    continue
                try:
                    obj = json.loads(line)
                    mined[obj["anchor"]] = list(obj["negatives"])
                except (json.JSONDecodeError, KeyError, TypeError) as exc:
                    raise FormatError(f"{path}:{lineno}: bad mined record: {exc}") from exc
    except OSError as exc:
        raise IoError(f"cannot read mined negatives {path}: {exc}") from exc
    return mined


# ---------------------------------------------------------------------------
# hard-negative mining


def mine_hard_negatives(
    query_bundle: EmbeddingBundle,
    pool_bundle: EmbeddingBundle,
    manifests: list[ImageManifest],
    k: int = 1,
) -> dict[str, list[str]]:
    """Exact top-k cosine neighbors from a different instance.

    Brute force over the full pool; ties broken by ascending image_id.
    Every query gets a list (length <= k); an empty eligible pool for
    any query raises NoCandidates.
    """
    if k < 1:
        raise InvalidInput(f"k must be >= 1, got {k}")
    if query_bundle.dim != pool_bundle.dim:
        raise InvalidInput(
            f"bundle dims differ: {query_bundle.dim} vs {pool_bundle.dim}"
        )
    index = manifest_index(manifests)

    def instance_of(image_id: str) -> str:
        if image_id not in index:
            raise MissingItem(f"image {image_id!r} not in manifests")
        return index[image_id].instance_id

    pool_ids = sorted(pool_bundle.items)
    pool_mat = np.stack([pool_bundle.items[i].ravel() for i in pool_ids]).astype(np.float64)
    norms = np.linalg.norm(pool_mat, axis=1)
    if np.any(norms == 0.0):
        raise InvalidInput("zero-norm vector in pool bundle")
    pool_unit = pool_mat / norms[:, None]
    pool_inst = np.array([instance_of(i) for i in pool_ids])

    out: dict[str, list[str]] = {}
    for query_id in sorted(query_bundle.items):
        q = query_bundle.items[query_id].astype(np.float64).ravel()
        qn = np.linalg.norm(q)
        if qn == 0.0:
            raise InvalidInput(f"zero-norm query vector {query_id!r}")
        sims = pool_unit @ (q / qn)
        eligible = (pool_inst != instance_of(query_id)) & (
            np.array(pool_ids) != query_id
        )
        if not eligible.any():
            raise NoCandidates(f"no different-instance pool items for {query_id!r}")
        idx = np.flatnonzero(eligible)
        # pool_ids is sorted, so a stable sort on -sims keeps id order on ties
        order = idx[np.argsort(-sims[idx], kind="stable")]
        out[query_id] = [pool_ids[i] for i in order[:k]]
    return out


# ---------------------------------------------------------------------------
# triplet construction


def _largest_remainder_quotas(mix: tuple[float, float, float], total: int) -> dict[str, int]:
    weights = np.asarray(mix, dtype=np.float64)
    if weights.size != len(TRIPLET_KINDS) or np.any(weights < 0) or weights.sum() <= 0:
        raise InvalidInput(f"mix must be {len(TRIPLET_KINDS)} non-negative weights, not all zero")
    exact = weights / weights.sum() * total
    base = np.floor(exact).astype(int)
    leftover = total - int(base.sum())
    remainders = exact - base
    # ties: kind declaration order
    order = sorted(range(len(TRIPLET_KINDS)), key=lambda i: (-remainders[i], i))
    for i in order[:leftover]:
        base[i] += 1
    return {kind: int(base[i]) for i, kind in enumerate(TRIPLET_KINDS)}


def build_triplets(
    samples: list[InstanceSample],
    mined: dict[str, list[str]],
    manifests: list[ImageManifest],
    mix: tuple[float, float, float] = (1.0, 1.0, 1.0),
    total: int | None = None,
    seed: int = 0,
) -> tuple[list[Triplet], dict[str, int]]:
    """Build triplets of the three kinds in the requested mix.

    REAL_ONLY: the sampled real pair with the mined nearest different-
    instance real image as negative. S2A_POSITIVE: one of three pairing
    modes (edited positive / edited anchor / both edited) drawn
    uniformly from the instance's identity-preserving edits, mined real
    negative. S2B_NEGATIVE: the real pair with an identity-altering
    edit of the same source instance as negative.

    Kind quotas use largest-remainder rounding of the mix over
    ``total`` (default one triplet per sample). Construction passes
    over the samples repeatedly until quotas fill; an exact triplet is
    never emitted twice, instances lacking the material for a kind are
    passed over, and unmet quotas come back in the shortfall map rather
    than raising.
    """
    total = len(samples) if total is None else total
    if total < 0:
        raise InvalidInput(f"total must be >= 0, got {total}")
    quotas = _largest_remainder_quotas(mix, total)
    index = manifest_index(manifests)

    s2a_by_instance: dict[str, list[str]] = {}
    s2b_by_source: dict[str, list[str]] = {}
    for rec in manifests:
        if rec.subset == "S2a":
            s2a_by_instance.setdefault(rec.instance_id, []).append(rec.image_id)
        elif rec.subset == "S2b":
            source = rec.edit_meta.get(SOURCE_INSTANCE_KEY)
            if isinstance(source, str):
                s2b_by_source.setdefault(source, []).append(rec.image_id)
    for lst in s2a_by_instance.values():
        lst.sort()
    for lst in s2b_by_source.values():
        lst.sort()

    def real_negatives(sample: InstanceSample) -> list[str]:
        negs = mined.get(sample.anchor, [])
        return [n for n in negs if index[n].subset != "S2b"] if negs else []

    def feasible(sample: InstanceSample, kind: str) -> bool:
        if kind == "REAL_ONLY":
            return bool(real_negatives(sample))
        if kind == "S2A_POSITIVE":
            return bool(s2a_by_instance.get(sample.instance_id)) and bool(
                real_negatives(sample)
            )
        return bool(s2b_by_source.get(sample.instance_id))

    ordered = sorted(samples, key=lambda s: (s.dataset_id, s.instance_id))
    perm = derived_rng(seed, "triplet-order").permutation(len(ordered))
    ordered = [ordered[i] for i in perm]

    triplets: list[Triplet] = []
    seen: set[Triplet] = set()
    remaining = dict(quotas)
    round_no = 0
    while sum(remaining.values()) > 0:
        progress = False
        for sample in ordered:
            if sum(remaining.values()) == 0:
                break
            candidates = [
                kind for kind in TRIPLET_KINDS if remaining[kind] > 0 and feasible(sample, kind)
            ]
            # keep kinds balanced: prefer the largest outstanding quota
            candidates.sort(key=lambda c: (-remaining[c], TRIPLET_KINDS.index(c)))
            for kind in candidates:
                rng = derived_rng(seed, "build", round_no, kind, sample.instance_id)
                t = _make_triplet(sample, kind, rng, round_no, real_negatives, s2a_by_instance, s2b_by_source)
                if t in seen:
                    continue
                seen.add(t)
                triplets.append(t)
                remaining[kind] -= 1
                progress = True
                break
        round_no += 1
        if not progress:
            break
    return triplets, {k: v for k, v in remaining.items() if v > 0}


def _make_triplet(
    sample: InstanceSample,
    kind: str,
    rng: np.random.Generator,
    round_no: int,
    real_negatives,
    s2a_by_instance: dict[str, list[str]],
    s2b_by_source: dict[str, list[str]],
) -> Triplet:
    if kind == "S2B_NEGATIVE":
        edits = s2b_by_source[sample.instance_id]
        negative = edits[rng.integers(len(edits))]
        return Triplet(sample.anchor, sample.positive, negative, "IDENTITY_EDIT")

    negs = real_negatives(sample)
    negative = negs[round_no % len(negs)]
    if kind == "REAL_ONLY":
        return Triplet(sample.anchor, sample.positive, negative, "MINED_REAL")

    edits = s2a_by_instance[sample.instance_id]
    modes = list(S2A_PAIRING_MODES) if len(edits) >= 2 else ["EDITED_POSITIVE", "EDITED_ANCHOR"]
    mode = modes[rng.integers(len(modes))]
    if mode == "EDITED_POSITIVE":
        anchor, positive = sample.anchor, edits[rng.integers(len(edits))]
    elif mode == "EDITED_ANCHOR":
        anchor, positive = edits[rng.integers(len(edits))], sample.positive
    else:
        pick = rng.choice(len(edits), size=2, replace=False)
        anchor, positive = edits[pick[0]], edits[pick[1]]
    return Triplet(anchor, positive, negative, "MINED_REAL")


# ---------------------------------------------------------------------------
# vote aggregation


@dataclass(frozen=True)
class VoteSummary:
    pair_id: str
    label: float
    agreement: float
    binary: int


def aggregate_votes(records: list[VoteRecord], threshold: float = 0.8) -> list[VoteSummary]:
    """Per-pair continuous label, annotator agreement and strict binary label.

    label = mean of votes; agreement = max(p, 1-p); binary = 1 iff
    label > threshold (strictly, so a 4-of-5 pair stays negative at the
    0.8 default). Results are sorted by pair_id.
    """
    if not 0.0 <= threshold <= 1.0:
        raise InvalidInput(f"threshold must be in [0,1], got {threshold}")
    out: list[VoteSummary] = []
    for rec in sorted(records, key=lambda r: r.pair_id):
        if len(rec.votes) == 0:
            raise InvalidInput(f"pair {rec.pair_id!r} has no votes")
        if any(v not in (0, 1) for v in rec.votes):
            raise InvalidInput(f"pair {rec.pair_id!r} has non-binary votes")
        p = sum(rec.votes) / len(rec.votes)
        out.append(
            VoteSummary(
                pair_id=rec.pair_id,
                label=p,
                agreement=max(p, 1.0 - p),
                binary=1 if p > threshold else 0,
            )
        )
    return out
