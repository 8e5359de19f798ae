"""Phone alphabet and label-side sequence types."""

from __future__ import annotations

from dataclasses import dataclass

N_PHONES = 33
BLANK_ID = 33
SOS_ID = 34
EOS_ID = 35
LABEL_SPACE = 36

BLANK_SYMBOL = "<blk>"
SOS_SYMBOL = "<sos>"
EOS_SYMBOL = "<eos>"

# SAMPA-flavoured French phone inventory, 33 symbols.
DEFAULT_PHONES = (
    "a", "e", "E", "i", "o", "O", "u", "y", "2", "9", "@",
    "a~", "e~", "o~",
    "j", "w",
    "p", "b", "t", "d", "k", "g",
    "f", "v", "s", "z", "S", "Z",
    "m", "n", "J", "l", "R",
)


class PhoneAlphabet:
    """33 phones at indices 0..32, then blank/sos/eos at 33/34/35."""

    def __init__(self, phones):
        phones = tuple(phones)
        if len(phones) != N_PHONES:
            raise ValueError(f"alphabet needs exactly {N_PHONES} phones, got {len(phones)}")
        if len(set(phones)) != N_PHONES:
            raise ValueError("alphabet phones must be distinct")
        if set(phones) & {BLANK_SYMBOL, SOS_SYMBOL, EOS_SYMBOL}:
            raise ValueError("alphabet phones collide with reserved symbols")
        self.phones = phones
        self.blank_id = BLANK_ID
        self.sos_id = SOS_ID
        self.eos_id = EOS_ID
        self.size = LABEL_SPACE
        self._index = {s: i for i, s in enumerate(phones)}

    def id_of(self, symbol: str) -> int:
        try:
            return self._index[symbol]
        except KeyError:
            raise KeyError(f"unknown phone symbol {symbol!r}")

    def symbol_of(self, label_id: int) -> str:
        if 0 <= label_id < N_PHONES:
            return self.phones[label_id]
        return {BLANK_ID: BLANK_SYMBOL, SOS_ID: SOS_SYMBOL, EOS_ID: EOS_SYMBOL}[label_id]

    def __eq__(self, other):
        return isinstance(other, PhoneAlphabet) and self.phones == other.phones

    def __hash__(self):
        return hash(self.phones)


def build_alphabet(seed_list=DEFAULT_PHONES) -> PhoneAlphabet:
    return PhoneAlphabet(seed_list)


@dataclass(frozen=True)
class PhoneSequence:
    """A non-empty run of phone ids; never contains blank/sos/eos."""

    ids: tuple

    def __post_init__(self):
        ids = tuple(int(i) for i in self.ids)
        object.__setattr__(self, "ids", ids)
        if len(ids) == 0:
            raise ValueError("phone sequence must be non-empty")
        bad = [i for i in ids if not 0 <= i < N_PHONES]
        if bad:
            raise ValueError(f"non-phone ids in sequence: {bad}")

    def __len__(self):
        return len(self.ids)

    def __iter__(self):
        return iter(self.ids)

    def symbols(self, alphabet: PhoneAlphabet):
        return [alphabet.phones[i] for i in self.ids]

    @classmethod
    def from_symbols(cls, alphabet: PhoneAlphabet, symbols) -> "PhoneSequence":
        return cls(tuple(alphabet.id_of(s) for s in symbols))
