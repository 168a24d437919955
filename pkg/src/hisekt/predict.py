"""Structured prompt assembly, LLM invocation, and prediction parsing.

A prompt has three fixed blocks - target student, target question, similar
students - plus a task block that pins the reply format.  Ablation masks
remove the similar-students block (``SimU``) or every ability/difficulty/
discrimination field (``IRT``).  Floats are rendered with ``repr`` so a
parser recovers every field value exactly; the offline mock backend relies
on that to answer prompts deterministically from their text alone.
"""

from __future__ import annotations

import logging
import re
from dataclasses import dataclass
from typing import Mapping, Sequence

from .dataset import Dataset
from .errors import PredictionError
from .irt import IrtModel, Level, probability
from .llm import LlmClient

logger = logging.getLogger(__name__)

MASK_SIMU = "SimU"
MASK_IRT = "IRT"
DEFAULT_WINDOW = 20
PEER_WEIGHT = 0.3
PREDICTION_PROMPT_HEADER = "### ANSWER PREDICTION TASK ###"
REPLY_OPEN = "<<<PREDICTION"
REPLY_CLOSE = "PREDICTION>>>"
_SENTENCE_END = re.compile(r"[.!?](?=\s|$)")


def count_sentences(text: str) -> int:
    """Sentences are delimited by . ! ? followed by whitespace or end of text."""
    return len(_SENTENCE_END.findall(text.strip()))


@dataclass(frozen=True)
class HistoryRow:
    question_id: str
    kcs: tuple[str, ...]
    correct: bool
    timestamp: int
    difficulty: float | None
    discrimination: float | None
    difficulty_level: str | None


@dataclass(frozen=True)
class PeerInfo:
    student_id: str
    theta: float | None
    ability_level: str | None
    target_kc_accuracy: float | None
    overall_accuracy: float
    history: tuple[tuple[str, bool, int], ...]  # (question, correct, timestamp) on the target KC


@dataclass(frozen=True)
class PromptBundle:
    """Structured prompt content; rendering is a pure function of these fields."""

    target_student: str
    theta: float | None
    ability_level: str | None
    history: tuple[HistoryRow, ...]
    question_id: str
    question_kcs: tuple[str, ...]
    target_kc: str
    student_kc_accuracy: float | None
    difficulty: float | None
    discrimination: float | None
    difficulty_level: str | None
    cold_start: bool
    peers: tuple[PeerInfo, ...] | None
    ablation_mask: frozenset[str]

    @property
    def target_block(self) -> str:
        lines = ["=== TARGET STUDENT ===", f"student_id: {self.target_student}"]
        if MASK_IRT not in self.ablation_mask:
            lines.append(f"ability: {self.theta!r}")
            lines.append(f"ability_level: {self.ability_level}")
        lines.append(f"recent_interactions: {len(self.history)}")
        for row in self.history:
            entry = (
                f"  - question: {row.question_id} | kcs: {';'.join(row.kcs)}"
                f" | correct: {int(row.correct)} | timestamp: {row.timestamp}"
            )
            if MASK_IRT not in self.ablation_mask:
                entry += (
                    f" | difficulty: {row.difficulty!r} | discrimination: {row.discrimination!r}"
                    f" | difficulty_level: {row.difficulty_level}"
                )
            lines.append(entry)
        return "\n".join(lines)

    @property
    def question_block(self) -> str:
        lines = [
            "=== TARGET QUESTION ===",
            f"question_id: {self.question_id}",
            f"kcs: {';'.join(self.question_kcs)}",
            f"target_kc: {self.target_kc}",
            f"student_accuracy_on_target_kc: "
            f"{'none' if self.student_kc_accuracy is None else repr(self.student_kc_accuracy)}",
        ]
        if MASK_IRT not in self.ablation_mask:
            lines.append(f"difficulty: {self.difficulty!r}")
            lines.append(f"discrimination: {self.discrimination!r}")
            lines.append(f"difficulty_level: {self.difficulty_level}")
            if self.cold_start:
                lines.append("cold_start: true")
        return "\n".join(lines)

    @property
    def peers_block(self) -> str | None:
        if MASK_SIMU in self.ablation_mask or self.peers is None:
            return None
        lines = ["=== SIMILAR STUDENTS ===", f"peer_count: {len(self.peers)}"]
        for peer in self.peers:
            lines.append(f"peer: {peer.student_id}")
            if MASK_IRT not in self.ablation_mask:
                lines.append(f"  ability: {peer.theta!r}")
                lines.append(f"  ability_level: {peer.ability_level}")
            lines.append(
                f"  target_kc_accuracy: "
                f"{'none' if peer.target_kc_accuracy is None else repr(peer.target_kc_accuracy)}"
            )
            lines.append(f"  overall_accuracy: {peer.overall_accuracy!r}")
            lines.append(f"  target_kc_history: {len(peer.history)}")
            for qid, correct, ts in peer.history:
                lines.append(f"    - question: {qid} | correct: {int(correct)} | timestamp: {ts}")
        return "\n".join(lines)

    @property
    def task_block(self) -> str:
        return "\n".join(
            [
                "=== TASK ===",
                "Decide whether the target student answers the target question correctly,",
                "then explain the decision in a three-sentence report.",
                "Reply with exactly this block:",
                REPLY_OPEN,
                "outcome: correct|wrong",
                "confidence: <number between 0 and 1>",
                "report: <exactly three sentences>",
                REPLY_CLOSE,
            ]
        )

    @property
    def text(self) -> str:
        blocks = [PREDICTION_PROMPT_HEADER, self.target_block, self.question_block]
        peers = self.peers_block
        if peers is not None:
            blocks.append(peers)
        blocks.append(self.task_block)
        return "\n".join(blocks)


@dataclass(frozen=True)
class Prediction:
    outcome: str
    confidence: float
    report: str
    p_correct: float

    def __post_init__(self):
        if self.outcome not in ("correct", "wrong"):
            raise ValueError(f"outcome must be correct/wrong, got {self.outcome!r}")
        if not 0.0 <= self.confidence <= 1.0:
            raise ValueError("confidence must lie in [0, 1]")
        expected = self.confidence if self.outcome == "correct" else 1.0 - self.confidence
        if abs(self.p_correct - expected) > 1e-9:
            raise ValueError("p_correct is inconsistent with outcome/confidence")

    @classmethod
    def build(cls, outcome: str, confidence: float, report: str) -> "Prediction":
        p_correct = confidence if outcome == "correct" else 1.0 - confidence
        return cls(outcome, confidence, report, p_correct)


def is_prediction_prompt(text: str) -> bool:
    return text.startswith(PREDICTION_PROMPT_HEADER)


def _kc_accuracy(rows: Sequence, kc: str) -> float | None:
    hits = [i for i in rows if kc in i.kc_ids]
    if not hits:
        return None
    return sum(1 for i in hits if i.correct) / len(hits)


def build_prompt(
    u: str,
    q: str,
    peers: Sequence[str],
    m: IrtModel,
    d: Dataset,
    mask: frozenset[str] | set[str] = frozenset(),
    window: int = DEFAULT_WINDOW,
) -> PromptBundle:
    """Assemble the three prompt blocks for one (student, question) target.

    ``peers`` is the ordered Top-S list; it may be empty.  A question missing
    from the model gets the population-prior fallback (difficulty 0,
    discrimination 1, level Medium) with a visible flag line.
    """
    mask = frozenset(mask)
    by_student = d.by_student("train")
    question_kcs = d.question_kcs()
    target_kc = min(question_kcs[q])

    history_rows = []
    for i in by_student.get(u, ())[-window:]:
        qid = i.question_id
        known = m.has_question(qid)
        history_rows.append(
            HistoryRow(
                question_id=qid,
                kcs=tuple(sorted(i.kc_ids)),
                correct=i.correct,
                timestamp=i.timestamp,
                difficulty=m.diff[qid] if known else 0.0,
                discrimination=m.disc[qid] if known else 1.0,
                difficulty_level=(m.difficulty_level[qid] if known else Level.MEDIUM).label,
            )
        )

    cold_start = not m.has_question(q)
    if cold_start and MASK_IRT not in mask:
        logger.info("cold-start fallback for question %s", q)

    peer_infos = []
    for peer_id in peers:
        rows = by_student.get(peer_id, ())
        kc_rows = [i for i in rows if target_kc in i.kc_ids]
        peer_infos.append(
            PeerInfo(
                student_id=peer_id,
                theta=m.theta.get(peer_id, 0.0),
                ability_level=m.ability_level.get(peer_id, Level.MEDIUM).label,
                target_kc_accuracy=_kc_accuracy(rows, target_kc),
                overall_accuracy=(
                    sum(1 for i in rows if i.correct) / len(rows) if rows else 0.5
                ),
                history=tuple((i.question_id, i.correct, i.timestamp) for i in kc_rows),
            )
        )

    return PromptBundle(
        target_student=u,
        theta=m.theta.get(u, 0.0),
        ability_level=m.ability_level.get(u, Level.MEDIUM).label,
        history=tuple(history_rows),
        question_id=q,
        question_kcs=tuple(sorted(question_kcs[q])),
        target_kc=target_kc,
        student_kc_accuracy=_kc_accuracy(by_student.get(u, ()), target_kc),
        difficulty=m.diff.get(q, 0.0),
        discrimination=m.disc.get(q, 1.0),
        difficulty_level=m.difficulty_level.get(q, Level.MEDIUM).label,
        cold_start=cold_start,
        peers=tuple(peer_infos),
        ablation_mask=mask,
    )


# -- prompt parsing (round trip + mock backend) ------------------------------


def _parse_scalar(raw: str) -> float | None:
    return None if raw == "none" else float(raw)


def parse_prompt(text: str) -> dict:
    """Recover the field values of a rendered prompt (inverse of the renderers)."""
    fields: dict = {
        "history": [],
        "peers": None,
        "has_irt": False,
    }
    current_peer: dict | None = None
    section = ""
    for line in text.splitlines():
        if line.startswith("=== "):
            section = line.strip("= ").strip()
            if section == "SIMILAR STUDENTS":
                fields["peers"] = []
            continue
        if section == "TARGET STUDENT":
            if line.startswith("student_id: "):
                fields["target_student"] = line.split(": ", 1)[1]
            elif line.startswith("ability: "):
                fields["theta"] = float(line.split(": ", 1)[1])
                fields["has_irt"] = True
            elif line.startswith("ability_level: "):
                fields["ability_level"] = line.split(": ", 1)[1]
            elif line.startswith("  - question: "):
                fields["history"].append(_parse_history_row(line))
        elif section == "TARGET QUESTION":
            if line.startswith("question_id: "):
                fields["question_id"] = line.split(": ", 1)[1]
            elif line.startswith("kcs: "):
                fields["question_kcs"] = tuple(line.split(": ", 1)[1].split(";"))
            elif line.startswith("target_kc: "):
                fields["target_kc"] = line.split(": ", 1)[1]
            elif line.startswith("student_accuracy_on_target_kc: "):
                fields["student_kc_accuracy"] = _parse_scalar(line.split(": ", 1)[1])
            elif line.startswith("difficulty: "):
                fields["difficulty"] = float(line.split(": ", 1)[1])
            elif line.startswith("discrimination: "):
                fields["discrimination"] = float(line.split(": ", 1)[1])
            elif line.startswith("difficulty_level: "):
                fields["difficulty_level"] = line.split(": ", 1)[1]
            elif line == "cold_start: true":
                fields["cold_start"] = True
        elif section == "SIMILAR STUDENTS":
            if line.startswith("peer: "):
                current_peer = {"student_id": line.split(": ", 1)[1], "history": []}
                fields["peers"].append(current_peer)
            elif current_peer is not None:
                stripped = line.strip()
                if stripped.startswith("ability: "):
                    current_peer["theta"] = float(stripped.split(": ", 1)[1])
                elif stripped.startswith("ability_level: "):
                    current_peer["ability_level"] = stripped.split(": ", 1)[1]
                elif stripped.startswith("target_kc_accuracy: "):
                    current_peer["target_kc_accuracy"] = _parse_scalar(stripped.split(": ", 1)[1])
                elif stripped.startswith("overall_accuracy: "):
                    current_peer["overall_accuracy"] = float(stripped.split(": ", 1)[1])
                elif stripped.startswith("- question: "):
                    body = dict(
                        part.split(": ", 1) for part in stripped.lstrip("- ").split(" | ")
                    )
                    current_peer["history"].append(
                        (body["question"], body["correct"] == "1", int(body["timestamp"]))
                    )
    return fields


def _parse_history_row(line: str) -> dict:
    body = dict(part.split(": ", 1) for part in line.strip().lstrip("- ").split(" | "))
    row = {
        "question_id": body["question"],
        "kcs": tuple(body["kcs"].split(";")),
        "correct": body["correct"] == "1",
        "timestamp": int(body["timestamp"]),
    }
    if "difficulty" in body:
        row["difficulty"] = float(body["difficulty"])
        row["discrimination"] = float(body["discrimination"])
        row["difficulty_level"] = body["difficulty_level"]
    return row


# -- prediction backends ------------------------------------------------------


def _mock_probability(fields: Mapping) -> tuple[float, float, float | None, int]:
    """(p_correct, base, peer_mean, peers_used) from parsed or structured fields."""
    theta = fields.get("theta")
    a = fields.get("discrimination")
    b = fields.get("difficulty")
    if theta is not None and a is not None and b is not None:
        base = probability(theta, a, b)
    else:
        kc_acc = fields.get("student_kc_accuracy")
        base = kc_acc if kc_acc is not None else 0.5
    peers = fields.get("peers")
    peer_values = []
    if peers is not None:
        for peer in peers:
            acc = peer.get("target_kc_accuracy")
            if acc is None:
                acc = peer.get("overall_accuracy")
            if acc is not None:
                peer_values.append(acc)
    if peer_values:
        peer_mean = sum(peer_values) / len(peer_values)
        p = (1.0 - PEER_WEIGHT) * base + PEER_WEIGHT * peer_mean
        return p, base, peer_mean, len(peer_values)
    return base, base, None, 0


def _mock_report(fields: Mapping, p: float, base: float, peer_mean: float | None, n_peers: int) -> str:
    student = fields.get("target_student", "?")
    question = fields.get("question_id", "?")
    kc = fields.get("target_kc", "?")
    outcome = "correct" if p >= 0.5 else "wrong"
    confidence = max(p, 1.0 - p)
    first = f"The baseline success estimate for student {student} on question {question} is {base:.4f}."
    if peer_mean is not None:
        second = (
            f"A panel of {n_peers} similar students averages {peer_mean:.4f} accuracy"
            f" on concept {kc}, moving the estimate to {p:.4f}."
        )
    else:
        second = f"No similar-student evidence was available, so the estimate stays at {p:.4f}."
    third = f"The predicted outcome is {outcome} with confidence {confidence:.4f}."
    return f"{first} {second} {third}"


def _fields_from_bundle(p: PromptBundle) -> dict:
    masked_irt = MASK_IRT in p.ablation_mask
    fields: dict = {
        "target_student": p.target_student,
        "question_id": p.question_id,
        "target_kc": p.target_kc,
        "student_kc_accuracy": p.student_kc_accuracy,
        "theta": None if masked_irt else p.theta,
        "discrimination": None if masked_irt else p.discrimination,
        "difficulty": None if masked_irt else p.difficulty,
        "peers": None,
    }
    if MASK_SIMU not in p.ablation_mask and p.peers is not None:
        fields["peers"] = [
            {
                "target_kc_accuracy": peer.target_kc_accuracy,
                "overall_accuracy": peer.overall_accuracy,
            }
            for peer in p.peers
        ]
    return fields


def mock_predict(p: PromptBundle, m: IrtModel | None = None) -> Prediction:
    """Deterministic offline prediction from the bundle's visible fields.

    The base probability is the response-model value for the target pair; the
    mean peer accuracy on the target KC pulls it with weight 0.3 when a peer
    block is present.  With ability/difficulty masked, the student's own
    accuracy on the target KC stands in for the base.  ``m`` is accepted for
    signature parity; all values are read from the bundle, which the model
    populated.
    """
    del m
    fields = _fields_from_bundle(p)
    prob, base, peer_mean, n_peers = _mock_probability(fields)
    outcome = "correct" if prob >= 0.5 else "wrong"
    confidence = max(prob, 1.0 - prob)
    report = _mock_report(fields, prob, base, peer_mean, n_peers)
    return Prediction.build(outcome, confidence, report)


def mock_prediction_reply(prompt: str) -> str:
    """Answer a rendered prediction prompt deterministically (mock transport)."""
    fields = parse_prompt(prompt)
    prob, base, peer_mean, n_peers = _mock_probability(fields)
    outcome = "correct" if prob >= 0.5 else "wrong"
    confidence = max(prob, 1.0 - prob)
    report = _mock_report(fields, prob, base, peer_mean, n_peers)
    return "\n".join(
        [REPLY_OPEN, f"outcome: {outcome}", f"confidence: {confidence!r}", f"report: {report}", REPLY_CLOSE]
    )


_REPLY_BLOCK = re.compile(re.escape(REPLY_OPEN) + r"\s*(.*?)\s*" + re.escape(REPLY_CLOSE), re.S)


def _parse_reply(reply: str) -> Prediction:
    block = _REPLY_BLOCK.search(reply)
    if not block:
        raise ValueError("no prediction block in reply")
    body = block.group(1)
    outcome_m = re.search(r"^outcome:\s*(correct|wrong)\s*$", body, re.M)
    confidence_m = re.search(r"^confidence:\s*([-+0-9.eE]+)\s*$", body, re.M)
    report_m = re.search(r"^report:\s*(.+)$", body, re.M | re.S)
    if not (outcome_m and confidence_m and report_m):
        raise ValueError("prediction block is missing fields")
    confidence = float(confidence_m.group(1))
    if not 0.0 <= confidence <= 1.0:
        logger.warning("confidence %s outside [0, 1]; clamped", confidence)
        confidence = min(max(confidence, 0.0), 1.0)
    report = report_m.group(1).strip()
    if count_sentences(report) != 3:
        raise ValueError(f"report must have exactly 3 sentences, got {count_sentences(report)}")
    return Prediction.build(outcome_m.group(1), confidence, report)


def predict(p: PromptBundle, client: LlmClient) -> Prediction:
    """One-pass prediction + report through the client, retrying malformed replies."""
    prompt = p.text
    transcript: list[str] = []
    for _ in range(max(client.max_retries, 1)):
        reply = client.complete(prompt)
        transcript.append(reply)
        try:
            return _parse_reply(reply)
        except ValueError as exc:
            logger.warning("malformed prediction reply (%s); retrying", exc)
    raise PredictionError(
        "prediction backend returned no parsable reply after retries",
        transcript="\n---\n".join(transcript),
    )
