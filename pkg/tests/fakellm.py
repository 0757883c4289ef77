"""Deterministic stand-in for the synthesizer and trainee models.

Recognises each prompt template by a marker phrase and answers from the
prompt text alone, so the same request always yields the same response.
"""
import hashlib
import math
import re
import threading

from kgsynth.llm import CompletionResult, TransientError

ENTITY_POOL = {
    "Ridgeback Wheat": "object",
    "Aster Valley": "location",
    "Hollin Institute": "organization",
    "Marrow Blight": "event",
    "Tessel Fungicide": "object",
    "Imre Vant": "person",
    "Calder Basin": "location",
    "Spring Drought of 1998": "event",
    "Oriel Barley": "object",
    "Neva Cooperative": "organization",
    "Lume Soil": "concept",
    "Pell Ranges": "location",
    "Dara Kesh": "person",
    "Frostline Rust": "event",
    "Vireo Oats": "object",
    "Quill Research Station": "organization",
    "Gant Irrigation Scheme": "concept",
    "Sorrel Plain": "location",
    "Toma Ilves": "person",
    "Ashfall Harvest": "event",
}

SENTENCES = [
    "{a} was first bred at {b} after years of field trials.",
    "Farmers in {a} rely on {b} to protect their crops.",
    "{a} spread rapidly through {b} and reduced yields.",
    "{a} studied how {b} responds to poor rainfall.",
    "The work of {a} made {b} popular across the region.",
    "{a} partnered with {b} to distribute seed stock.",
    "During {a}, the fields of {b} lost most of their topsoil.",
    "{a} is grown mainly on {b}, which holds water well.",
]


def make_corpus(n_docs=50, seed=7):
    import random
    rng = random.Random(seed)
    names = sorted(ENTITY_POOL)
    docs = []
    for _ in range(n_docs):
        sents = []
        for _ in range(rng.randint(2, 4)):
            a, b = rng.sample(names, 2)
            sents.append(rng.choice(SENTENCES).format(a=a, b=b))
        docs.append(" ".join(sents))
    return docs


def _h(text, mod):
    return int(hashlib.sha256(text.encode("utf-8")).hexdigest()[:8], 16) % mod


def _section(prompt, header):
    m = re.search(re.escape(header) + r"\s*\n(.*?)(?:\n\S[^\n]*:\s*\n|\n-Output-|\Z)", prompt, re.DOTALL)
    return m.group(1).strip() if m else ""


class FakeLLM:
    def __init__(self, garble=()):
        self.garble = set(garble)
        self.calls = 0
        self._lock = threading.Lock()

    def send(self, endpoint, messages, params):
        with self._lock:
            self.calls += 1
        # reprompts append turns; the template marker stays in the first message
        prompt = messages[0][1]
        if "-Goal-" in prompt:
            return self._extract(prompt)
        if "Merge them into one comprehensive" in prompt:
            name = re.search(r'"(.*?)"', prompt).group(1)
            descs = [l[2:] for l in prompt.splitlines() if l.startswith("- ")]
            return CompletionResult(f"{name}: " + " ".join(descs[:2]))
        if "asserts the opposite" in prompt:
            stmt = prompt.rsplit("Statement:", 1)[1].strip()
            return CompletionResult(f"It is false that {stmt[0].lower()}{stmt[1:]}")
        if "meaning is exactly preserved" in prompt:
            stmt = prompt.rsplit("Statement:", 1)[1].strip()
            return CompletionResult(f"Put differently (v{params.seed}): {stmt}")
        if "Answer with a single word" in prompt:
            stmt = prompt.split("Statement:", 1)[1].split("\nAnswer:")[0].strip()
            p = 0.05 + 0.9 * _h(stmt, 1000) / 1000
            q = max(1e-4, (1 - p) * 0.9)
            pairs = (("Yes", math.log(p)), ("No", math.log(q)), (".", math.log(0.01)))
            if stmt.startswith("It is false"):
                pairs = (("No", math.log(p)), ("Yes", math.log(q)), (".", math.log(0.01)))
            return CompletionResult("Yes", pairs[: params.top_logprobs], (20, 1))
        if "Organize all of this knowledge" in prompt:
            ents = re.findall(r"^\d+\. (.+?) \[", prompt, re.MULTILINE)
            rels = re.findall(r"^\d+\. .+? -- .+?: (.+)$", prompt, re.MULTILINE)
            return CompletionResult("Overview of " + ", ".join(ents) + ". " + " ".join(rels))
        if "The passage below is the answer" in prompt:
            head = prompt.split("Passage:", 1)[1].strip().split(".")[0]
            return CompletionResult(f"What does the record say about {head[12:] or 'this topic'}?")
        if "Relationship chain:" in prompt:
            ents = re.findall(r"^\d+\. (.+?) \[", prompt, re.MULTILINE)
            if _h(prompt, 7) == 0 and len(messages) == 1:
                return CompletionResult("I cannot produce that.")
            return CompletionResult(f"Question: How is {ents[0]} linked to {ents[-1]}?\n"
                                    f"Answer: Through {', '.join(ents[1:-1]) or 'a direct link'}.")
        if "answered with a single fact" in prompt:
            ents = re.findall(r"^\d+\. (.+?) \[", prompt, re.MULTILINE)
            return CompletionResult(f"Question: What is {ents[0]}?\nAnswer: {ents[0]} appears in the records.")
        return CompletionResult("")

    def _extract(self, prompt):
        text = prompt.split("-Text-", 1)[1].split("-Output-", 1)[0].strip()
        if _h(text, 1000) in self.garble:
            return CompletionResult("sorry, no records")
        lines = []
        seen = set()
        for sent in re.split(r"(?<=\.)\s+", text):
            found = [n for n in ENTITY_POOL if n in sent]
            for n in found:
                if n not in seen:
                    seen.add(n)
                lines.append(f'("entity"|{n}|{ENTITY_POOL[n]}|{sent})')
            for i in range(len(found)):
                for j in range(i + 1, len(found)):
                    lines.append(f'("relationship"|{found[i]}|{found[j]}|{sent})')
        lines.append("<|COMPLETE|>")
        return CompletionResult("\n".join(lines), (), (len(prompt) // 4, len(lines) * 20))


class ScriptedBackend:
    """Returns queued responses in order; ``Exception`` instances are raised."""

    def __init__(self, responses):
        self.responses = list(responses)
        self.requests = []
        self._lock = threading.Lock()

    def send(self, endpoint, messages, params):
        with self._lock:
            self.requests.append((list(messages), params))
            item = self.responses.pop(0) if self.responses else CompletionResult("")
        if isinstance(item, BaseException):
            raise item
        if isinstance(item, str):
            return CompletionResult(item)
        return item


class FlakyBackend:
    """Fails with a transient error ``failures`` times, then succeeds."""

    def __init__(self, failures, result=CompletionResult("ok")):
        self.failures = failures
        self.result = result
        self.attempts = 0

    def send(self, endpoint, messages, params):
        self.attempts += 1
        if self.attempts <= self.failures:
            raise TransientError("HTTP 429")
        return self.result
