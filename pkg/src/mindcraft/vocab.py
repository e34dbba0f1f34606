"""Closed token vocabulary shared by instructions, queries, answers and actions."""

from __future__ import annotations

ROOM_TYPES = ("kitchen", "bedroom", "living_room", "bathroom", "hallway", "office")
CATEGORIES = (
    "chair", "lamp", "sofa", "sink", "bed", "vase", "shelf", "table",
    "desk", "toilet", "plant", "tv", "fridge", "oven", "bathtub", "cabinet",
)
COLORS = ("red", "blue", "green", "yellow", "white", "black", "brown", "gray")
BEARINGS = ("left", "center", "right")

SPECIALS = ("<PAD>", "<BOS>", "<EOS>", "<MAP>", "<QRY>", "<ANS>")
ACTION_TOKENS = ("<FWD>", "<LEFT>", "<RIGHT>", "<STOP>")

# every word any template can emit; checked against generated text in tests
_TEMPLATE_WORDS = (
    "walk", "into", "the", "to", "pass", "and", "stop", "leave", "ahead", ",", "?",
    "what", "color", "was", "you", "saw", "did", "see", "before", "or", "after",
    "which", "room", "are", "in", "is", "this", "on", "your", "left", "right",
    "next", "does", "connect", "will", "enter", "comes", "seen", "of", "that",
    "yes", "no", "there", "a", "door", "from", "here", "side", "object",
    "spotted", "earlier", "currently", "located", "reach",
)


class Vocabulary:
    def __init__(self):
        words = []
        for w in _TEMPLATE_WORDS + ROOM_TYPES + CATEGORIES + COLORS + BEARINGS:
            if w not in words:
                words.append(w)
        self.itos = list(SPECIALS) + list(ACTION_TOKENS) + words
        self.stoi = {s: i for i, s in enumerate(self.itos)}
        assert len(self.stoi) == len(self.itos)
        self.pad = self.stoi["<PAD>"]
        self.bos = self.stoi["<BOS>"]
        self.eos = self.stoi["<EOS>"]
        self.map = self.stoi["<MAP>"]
        self.qry = self.stoi["<QRY>"]
        self.ans = self.stoi["<ANS>"]
        self.action_ids = [self.stoi[a] for a in ACTION_TOKENS]
        self.word_ids = [self.stoi[w] for w in words]
        # answers are decoded over words plus <EOS>
        self.answer_ids = self.word_ids + [self.eos]

    def __len__(self):
        return len(self.itos)

    def encode(self, tokens):
        try:
            return [self.stoi[t] for t in tokens]
        except KeyError as e:
            raise KeyError(f"out-of-vocabulary token {e.args[0]!r}") from None

    def decode(self, ids):
        return [self.itos[i] for i in ids]


def tokenize(text: str) -> list[str]:
    return text.split(" ")


def detokenize(tokens) -> str:
    return " ".join(tokens)


VOCAB = Vocabulary()
