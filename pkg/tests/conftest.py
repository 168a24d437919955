def rows_to_csv(rows):
    """rows: (student, question, kcs, correct, timestamp) tuples."""
    lines = ["student_id,question_id,kc_ids,correct,timestamp"]
    for r in rows:
        lines.append(",".join(str(x) for x in r))
    return "\n".join(lines) + "\n"


def grid_rows(students, questions, kc_of=None, correct_fn=None):
    """Every student answers every question once, timestamps by question order."""
    kc_of = kc_of or {}
    rows = []
    for s in students:
        for ts, q in enumerate(questions):
            correct = correct_fn(s, q) if correct_fn else 1
            rows.append((s, q, kc_of.get(q, "K0"), int(correct), ts))
    return rows
