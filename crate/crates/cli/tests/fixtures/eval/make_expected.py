"""Regenerates the eval fixtures and the expected report with scikit-learn.

Run from this directory: python3 make_expected.py
"""

import json

from sklearn.metrics import accuracy_score, precision_recall_fscore_support

TRIAL = "T-CARDIO-13"
KINDS = {
    c["criterion_id"]: c["kind"] for c in json.load(open("../trial.json"))["criteria"]
}

LABELS = {
    "p01": {
        "DRUG-ABUSE": "Unmet", "ALCOHOL-ABUSE": "Unmet", "ENGLISH": "Met", "MAKES-DECISIONS": "Met",
        "ABDOMINAL": "Unmet", "MAJOR-DIABETES": "Met", "ADVANCED-CAD": "Met", "MI-6MOS": "Unmet",
        "KETO-1YR": "Unmet", "DIETSUPP-2MOS": "Met", "ASP-FOR-MI": "Met", "HBA1C": "Met", "CREATININE": "Unmet",
    },
    "p02": {
        "DRUG-ABUSE": "Unknown", "ALCOHOL-ABUSE": "Met", "ENGLISH": "Met", "MAKES-DECISIONS": "Unknown",
        "ABDOMINAL": "Met", "MAJOR-DIABETES": "Unmet", "ADVANCED-CAD": "Unmet", "MI-6MOS": "Unmet",
        "KETO-1YR": "Met", "DIETSUPP-2MOS": "Met", "ASP-FOR-MI": "Unmet", "HBA1C": "Unmet", "CREATININE": "Met",
    },
    "p03": {
        "DRUG-ABUSE": "Met", "ALCOHOL-ABUSE": "Unmet", "ENGLISH": "Unmet", "MAKES-DECISIONS": "Unmet",
        "ABDOMINAL": "Met", "MAJOR-DIABETES": "Unmet", "ADVANCED-CAD": "Met", "MI-6MOS": "Met",
        "KETO-1YR": "Unmet", "DIETSUPP-2MOS": "Unmet", "ASP-FOR-MI": "Unmet", "HBA1C": "Unmet", "CREATININE": "Unmet",
    },
}

ERRORS = {
    ("p01", "DIETSUPP-2MOS"): "Unmet",
    ("p01", "HBA1C"): "Unknown",
    ("p02", "ABDOMINAL"): "Unmet",
    ("p02", "DRUG-ABUSE"): "Unmet",
    ("p02", "KETO-1YR"): "Unknown",
    ("p03", "ASP-FOR-MI"): "Met",
    ("p03", "MI-6MOS"): "Unknown",
    ("p03", "ENGLISH"): "Met",
}


def main():
    labels, predictions = [], []
    for patient, by_criterion in LABELS.items():
        for criterion, label in sorted(by_criterion.items()):
            labels.append({
                "patient_id": patient, "trial_id": TRIAL, "criterion_id": criterion,
                "label": label, "provenance": "DirectCriterionReview",
            })
            verdict = ERRORS.get((patient, criterion), label)
            predictions.append({
                "assessment_id": f"asm-{patient}-{criterion.lower()}",
                "patient_id": patient, "trial_id": TRIAL, "criterion_id": criterion,
                "verdict": verdict,
                "rationale": "" if verdict == "Unknown" else "Fixture rationale.",
                "source_page_ids": [], "as_of_date": "2018-06-01",
                "usage": {"input_tokens": 0, "output_tokens": 0, "wall_time": 0.0, "cost": 0.0},
                "strategy": {"variant": "TopKPerGuideline", "k": 3},
            })
    with open("labels.jsonl", "w") as f:
        f.writelines(json.dumps(l) + "\n" for l in labels)
    with open("predictions.jsonl", "w") as f:
        f.writelines(json.dumps(p) + "\n" for p in predictions)

    classes = ["Met", "Unmet"]
    pred = {(p["patient_id"], p["criterion_id"]): p["verdict"] for p in predictions}
    rows = [(l["label"], pred[(l["patient_id"], l["criterion_id"])], KINDS[l["criterion_id"]])
            for l in labels if l["label"] in classes]
    y_true = [r[0] for r in rows]
    y_pred = [r[1] for r in rows]
    p, r, f, s = precision_recall_fscore_support(y_true, y_pred, labels=classes, zero_division=0)
    mp, mr, mf, _ = precision_recall_fscore_support(y_true, y_pred, labels=classes, average="macro", zero_division=0)
    wp, wr, wf, _ = precision_recall_fscore_support(y_true, y_pred, labels=classes, average="weighted", zero_division=0)
    total = len(rows)
    groups = []
    for kind in sorted({r[2] for r in rows}):
        sub = [r for r in rows if r[2] == kind]
        groups.append({"group": kind, "accuracy": accuracy_score([x[0] for x in sub], [x[1] for x in sub]),
                       "samples": len(sub)})
    expected = {
        "classes": [{"class": c, "precision": float(p[i]), "recall": float(r[i]), "f1": float(f[i]),
                     "support": int(s[i])} for i, c in enumerate(classes)],
        "accuracy": accuracy_score(y_true, y_pred),
        "total": total,
        "macro_avg": {"precision": float(mp), "recall": float(mr), "f1": float(mf), "support": total},
        "weighted_avg": {"precision": float(wp), "recall": float(wr), "f1": float(wf), "support": total},
        "dropped": sum(1 for l in labels if l["label"] not in classes),
        "groups_by_kind": groups,
    }
    with open("expected_report.json", "w") as f:
        json.dump(expected, f, indent=2)
        f.write("\n")

    lines = [f"{'':<14}{'precision':>10}{'recall':>10}{'f1-score':>10}{'support':>10}"]
    for c in expected["classes"]:
        lines.append(f"{c['class'].lower():<14}{c['precision']:>10.2f}{c['recall']:>10.2f}{c['f1']:>10.2f}{c['support']:>10}")
    lines.append("")
    lines.append(f"{'accuracy':<14}{'':>10}{'':>10}{expected['accuracy']:>10.2f}{total:>10}")
    for name, key in [("macro avg", "macro_avg"), ("weighted avg", "weighted_avg")]:
        a = expected[key]
        lines.append(f"{name:<14}{a['precision']:>10.2f}{a['recall']:>10.2f}{a['f1']:>10.2f}{a['support']:>10}")
    with open("expected_report.txt", "w") as f:
        f.write("\n".join(lines) + "\n")


if __name__ == "__main__":
    main()
