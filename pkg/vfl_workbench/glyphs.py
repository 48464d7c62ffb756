"""Built-in bitmaps: a 5x7 lowercase font, object shapes, and the OCR word list."""

from __future__ import annotations

import numpy as np

GLYPH_WIDTH = 5
GLYPH_HEIGHT = 7

_FONT_ROWS: dict[str, tuple[str, ...]] = {
    "a": (".....", ".....", ".###.", "....#", ".####", "#...#", ".####"),
    "b": ("#....", "#....", "#.##.", "##..#", "#...#", "#...#", "####."),
    "c": (".....", ".....", ".###.", "#....", "#....", "#...#", ".###."),
    "d": ("....#", "....#", ".##.#", "#..##", "#...#", "#...#", ".####"),
    "e": (".....", ".....", ".###.", "#...#", "#####", "#....", ".###."),
    "f": ("..##.", ".#..#", ".#...", "###..", ".#...", ".#...", ".#..."),
    "g": (".....", ".####", "#...#", "#...#", ".####", "....#", ".###."),
    "h": ("#....", "#....", "#.##.", "##..#", "#...#", "#...#", "#...#"),
    "i": ("..#..", ".....", ".##..", "..#..", "..#..", "..#..", ".###."),
    "j": ("...#.", ".....", "..##.", "...#.", "...#.", "#..#.", ".##.."),
    "k": ("#....", "#....", "#..#.", "#.#..", "##...", "#.#..", "#..#."),
    "l": (".##..", "..#..", "..#..", "..#..", "..#..", "..#..", ".###."),
    "m": (".....", ".....", "##.#.", "#.#.#", "#.#.#", "#...#", "#...#"),
    "n": (".....", ".....", "#.##.", "##..#", "#...#", "#...#", "#...#"),
    "o": (".....", ".....", ".###.", "#...#", "#...#", "#...#", ".###."),
    "p": (".....", "####.", "#...#", "#...#", "####.", "#....", "#...."),
    "q": (".....", ".####", "#...#", "#...#", ".####", "....#", "....#"),
    "r": (".....", ".....", "#.##.", "##..#", "#....", "#....", "#...."),
    "s": (".....", ".....", ".####", "#....", ".###.", "....#", "####."),
    "t": (".#...", ".#...", "###..", ".#...", ".#...", ".#..#", "..##."),
    "u": (".....", ".....", "#...#", "#...#", "#...#", "#..##", ".##.#"),
    "v": (".....", ".....", "#...#", "#...#", "#...#", ".#.#.", "..#.."),
    "w": (".....", ".....", "#...#", "#...#", "#.#.#", "#.#.#", ".#.#."),
    "x": (".....", ".....", "#...#", ".#.#.", "..#..", ".#.#.", "#...#"),
    "y": (".....", "#...#", "#...#", "#...#", ".####", "....#", ".###."),
    "z": (".....", ".....", "#####", "...#.", "..#..", ".#...", "#####"),
}

# Object shapes for the recognition task, each filling at most one 8x8 cell
_SHAPE_ROWS: dict[str, tuple[str, ...]] = {
    "cross": (
        "........",
        "...##...",
        "...##...",
        ".######.",
        ".######.",
        "...##...",
        "...##...",
        "........",
    ),
    "ring": (
        "........",
        "..####..",
        ".#....#.",
        ".#....#.",
        ".#....#.",
        ".#....#.",
        "..####..",
        "........",
    ),
    "diamond": (
        "...##...",
        "..####..",
        ".######.",
        "########",
        "########",
        ".######.",
        "..####..",
        "...##...",
    ),
    "triangle": (
        "........",
        "...##...",
        "...##...",
        "..####..",
        "..####..",
        ".######.",
        "########",
        "........",
    ),
}

WORDS: tuple[str, ...] = (
    "act", "add", "age", "aim", "air", "arm", "art", "ask", "bad", "bag",
    "bed", "big", "box", "boy", "bus", "buy", "car", "cat", "cup", "cut",
    "day", "dog", "dry", "ear", "eat", "egg", "end", "eye", "fan", "far",
    "fix", "fly", "fox", "fun", "gas", "hat", "hot", "ice", "job", "key",
    "kid", "law", "leg", "map", "mix", "net", "new", "oil", "old", "owl",
    "pen", "pig", "pot", "red", "run", "sea", "sky", "sun", "tax", "top",
    "toy", "van", "war", "web", "win", "zoo", "band", "bird", "blue", "boat",
    "book", "cake", "city", "cold", "door", "duck", "face", "farm", "fish", "frog",
    "gift", "gold", "hand", "jump", "king", "lamp", "leaf", "lion", "milk", "moon",
    "nose", "park", "quiz", "rain", "road", "rock", "ship", "snow", "star", "tree",
    "wind", "wolf", "yard", "zero", "apple", "beach", "bread", "chair", "cloud", "dance",
    "earth", "field", "grape", "house", "juice", "knife", "lemon", "music", "night", "ocean",
    "piano", "queen", "river", "smile", "table", "tiger", "voice", "water", "young", "zebra",
)


def _bitmap(rows: tuple[str, ...]) -> np.ndarray:
    return np.array([[1.0 if ch == "#" else 0.0 for ch in row] for row in rows], dtype=np.float32)


FONT: dict[str, np.ndarray] = {ch: _bitmap(rows) for ch, rows in _FONT_ROWS.items()}
SHAPES: dict[str, np.ndarray] = {name: _bitmap(rows) for name, rows in _SHAPE_ROWS.items()}
SHAPE_KINDS: tuple[str, ...] = tuple(sorted(SHAPES))
