"""
Pattern condivisi per il parsing di file di configurazione, override da riga di
comando e specifiche dei dati sintetici.
Centralizza le regex per evitare duplicazione fra config, cli e features.
"""
import re
from typing import List, Optional, Tuple

# Righe `chiave = valore`; i commenti iniziano con `#`
CONFIG_LINE_PATTERN = re.compile(r'^\s*([A-Za-z_][A-Za-z0-9_]*)\s*=\s*(.*?)\s*$')
COMMENT_PATTERN = re.compile(r'\s+#.*$')

# Override `--set chiave=valore`
OVERRIDE_PATTERN = re.compile(r'^\s*([A-Za-z_][A-Za-z0-9_]*)\s*=\s*(.+?)\s*$')

# Intervalli interi `400..800` (estremi inclusi)
INT_RANGE_PATTERN = re.compile(r'^\s*(\d+)\s*\.\.\s*(\d+)\s*$')

# Conteggi con suffisso: `3M`, `3.0M`, `500k`, `95_000_000`
COUNT_PATTERN = re.compile(r'^\s*(\d+(?:[._]\d+)*)\s*([kKmM]?)\s*$')

# Voci della specifica sintetica `n=64,len=400..800,d=80`
SYNTH_ITEM_PATTERN = re.compile(r'^\s*(n|len|d|seed|components)\s*=\s*(.+?)\s*$')

_MULTIPLIERS = {'': 1, 'k': 1_000, 'm': 1_000_000}


def strip_comment(line: str) -> str:
    """Rimuove commento finale e spazi; una riga che inizia con `#` diventa vuota."""
    stripped = line.strip()
    if stripped.startswith('#'):
        return ''
    return COMMENT_PATTERN.sub('', stripped)


def parse_config_line(line: str) -> Optional[Tuple[str, str]]:
    """
    Estrae (chiave, valore) da una riga di configurazione.

    Returns:
        None per righe vuote o di commento; solleva ValueError se la riga non è `chiave = valore`
    """
    content = strip_comment(line)
    if not content:
        return None
    match = CONFIG_LINE_PATTERN.match(content)
    if not match:
        raise ValueError(f"riga non nel formato 'chiave = valore': {content!r}")
    return match.group(1).lower(), match.group(2)


def parse_override(text: str) -> Tuple[str, str]:
    match = OVERRIDE_PATTERN.match(text)
    if not match:
        raise ValueError(f"override non nel formato CHIAVE=VALORE: {text!r}")
    return match.group(1).lower(), match.group(2)


def parse_int_range(text: str) -> Tuple[int, int]:
    """`400..800` → (400, 800); un intero singolo `500` → (500, 500)."""
    match = INT_RANGE_PATTERN.match(text)
    if match:
        return int(match.group(1)), int(match.group(2))
    value = text.strip()
    if value.isdigit():
        return int(value), int(value)
    raise ValueError(f"intervallo non valido: {text!r} (atteso 'a..b')")


def parse_int_list(text: str) -> List[int]:
    """`1000,2000,4000` → [1000, 2000, 4000]."""
    items = [item.strip() for item in text.split(',') if item.strip()]
    if not items:
        raise ValueError("lista vuota")
    return [int(item) for item in items]


def parse_name_list(text: str) -> List[str]:
    items = [item.strip().lower() for item in text.split(',') if item.strip()]
    if not items:
        raise ValueError("lista vuota")
    return items


def parse_count(text: str) -> int:
    """
    Converte un conteggio con suffisso in intero.
    Supporta `k` (migliaia) e `M` (milioni), separatori `_` e decimali con `.`.
    """
    match = COUNT_PATTERN.match(text)
    if not match:
        raise ValueError(f"conteggio non valido: {text!r}")
    number = float(match.group(1).replace('_', ''))
    return int(round(number * _MULTIPLIERS[match.group(2).lower()]))


def parse_synthetic_items(text: str) -> List[Tuple[str, str]]:
    """`n=64,len=400..800,d=80` → [('n', '64'), ('len', '400..800'), ('d', '80')]."""
    items = []
    for part in text.split(','):
        if not part.strip():
            continue
        match = SYNTH_ITEM_PATTERN.match(part)
        if not match:
            raise ValueError(f"voce sintetica non riconosciuta: {part.strip()!r}")
        items.append((match.group(1), match.group(2)))
    return items
