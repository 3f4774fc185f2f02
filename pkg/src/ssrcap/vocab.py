"""Token vocabulary with reserved ids and frequency thresholding."""
from collections import Counter

PAD, BOS, EOS, UNK = 0, 1, 2, 3
RESERVED = ("<PAD>", "<BOS>", "<EOS>", "<UNK>")


class Vocabulary:
    def __init__(self, tokens, threshold=0):
        self.itos = list(RESERVED) + [t for t in tokens if t not in RESERVED]
        self.stoi = {t: i for i, t in enumerate(self.itos)}
        if len(self.stoi) != len(self.itos):
            raise ValueError("duplicate tokens in vocabulary")
        self.threshold = threshold

    def __len__(self):
        return len(self.itos)

    def __contains__(self, token):
        return token in self.stoi and self.stoi[token] >= len(RESERVED)

    def __eq__(self, other):
        return isinstance(other, Vocabulary) and self.itos == other.itos

    def id(self, token):
        return self.stoi.get(token, UNK)

    def encode(self, tokens):
        return [self.stoi.get(t, UNK) for t in tokens]

    def decode(self, ids):
        out = []
        for i in ids:
            i = int(i)
            if i == EOS:
                break
            if i in (PAD, BOS):
                continue
            out.append(self.itos[i])
        return out

    def to_lines(self):
        return [f"{t}\n" for t in self.itos[len(RESERVED):]]

    @classmethod
    def from_lines(cls, lines, threshold=0):
        return cls([ln.rstrip("\n") for ln in lines if ln.strip()], threshold)


def build_vocab(corpus, threshold=4):
    """Ids for tokens seen more than ``threshold`` times, ordered by (count desc, token asc)."""
    counts = Counter(t for sent in corpus for t in sent if t not in RESERVED)
    kept = sorted((t for t, c in counts.items() if c > threshold), key=lambda t: (-counts[t], t))
    return Vocabulary(kept, threshold)
