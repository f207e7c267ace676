"""Dataset manifests: JSON-lines records and subject-level split assignment."""
from __future__ import annotations

import csv
import json
from dataclasses import dataclass, asdict
from typing import Iterable, Optional

import numpy as np

SPLITS = ("train", "test-internal", "test-external")


@dataclass
class ManifestRecord:
    subject: str
    path: str
    dataset: str
    split: Optional[str] = None
    qa_status: str = "pass"
    qa_reason: Optional[str] = None
    mask_path: Optional[str] = None

    @property
    def qa_passed(self) -> bool:
        return self.qa_status == "pass"


@dataclass
class Manifest:
    records: list[ManifestRecord]

    def __iter__(self):
        return iter(self.records)

    def __len__(self):
        return len(self.records)

    def validate(self) -> None:
        by_subject: dict[str, set[str]] = {}
        for r in self.records:
            if r.split is not None:
                if r.split not in SPLITS:
                    raise ValueError(f"unknown split {r.split!r}")
                by_subject.setdefault(r.subject, set()).add(r.split)
                if r.split == "train" and not r.qa_passed:
                    raise ValueError(f"QA-failed record in train split: {r.path}")
        for subject, splits in by_subject.items():
            if len(splits) > 1:
                raise ValueError(f"subject {subject} straddles splits {sorted(splits)}")

    def save(self, path) -> None:
        with open(path, "w") as f:
            for r in self.records:
                doc = {k: v for k, v in asdict(r).items() if v is not None}
                f.write(json.dumps(doc) + "\n")

    @staticmethod
    def load(path) -> "Manifest":
        records = []
        with open(path) as f:
            for line in f:
                line = line.strip()
                if line:
                    records.append(ManifestRecord(**json.loads(line)))
        return Manifest(records)

    def export_csv(self, path) -> None:
        fields = ["subject", "path", "dataset", "split", "qa_status",
                  "qa_reason", "mask_path"]
        with open(path, "w", newline="") as f:
            w = csv.DictWriter(f, fieldnames=fields)
            w.writeheader()
            for r in self.records:
                w.writerow(asdict(r))


def split_subjects(manifest: Manifest, test_fraction: float = 0.10,
                   withheld_datasets: Iterable[str] = (),
                   seed: int = 0) -> Manifest:
    """Assign subject-level splits per dataset.

    Withheld datasets become test-external wholesale; elsewhere a random
    round(fraction * n_subjects) subjects per dataset become test-internal.
    QA-failed records that would land in train are dropped so the train
    split never contains a failed record.
    """
    withheld = set(withheld_datasets)
    rng = np.random.default_rng(seed)
    by_dataset: dict[str, list[str]] = {}
    for r in manifest:
        subjects = by_dataset.setdefault(r.dataset, [])
        if r.subject not in subjects:
            subjects.append(r.subject)
    split_of: dict[tuple[str, str], str] = {}
    for dataset in sorted(by_dataset):
        subjects = sorted(by_dataset[dataset])
        if dataset in withheld:
            for s in subjects:
                split_of[(dataset, s)] = "test-external"
            continue
        n_test = int(round(test_fraction * len(subjects)))
        test_idx = set(rng.choice(len(subjects), size=n_test, replace=False).tolist())
        for i, s in enumerate(subjects):
            split_of[(dataset, s)] = "test-internal" if i in test_idx else "train"
    out = []
    for r in manifest:
        split = split_of[(r.dataset, r.subject)]
        if split == "train" and not r.qa_passed:
            continue
        out.append(ManifestRecord(**{**asdict(r), "split": split}))
    result = Manifest(out)
    result.validate()
    return result
