"""Part categories, synthetic vehicle attributes and the fixed word list.

The tokenizer vocabulary is derived from these tables, so every caption the
generator can produce tokenizes without [UNK].
"""

from __future__ import annotations

PART_NAMES = ("windows", "wheels", "doors", "mirrors", "lights", "roof")

BODY_COLORS = {
    "red": (200, 30, 35),
    "blue": (35, 70, 190),
    "white": (235, 235, 235),
    "black": (25, 25, 28),
    "silver": (165, 170, 178),
    "green": (40, 140, 60),
    "yellow": (230, 200, 40),
    "orange": (235, 120, 25),
}
BODY_SHAPES = ("sedan", "suv", "hatchback", "van", "pickup")

# One attribute per part category; each value maps to the pixel colors the
# renderer uses (primary, secondary) so that attributes are visible.
PART_ATTRIBUTES: dict[str, dict[str, tuple[tuple[int, int, int], tuple[int, int, int]]]] = {
    "windows": {
        "tinted": ((30, 32, 45), (50, 52, 70)),
        "clear": ((175, 210, 230), (140, 180, 205)),
        "bronze": ((150, 105, 55), (120, 85, 45)),
    },
    "wheels": {
        "black": ((20, 20, 20), (55, 55, 55)),
        "chrome": ((215, 215, 225), (120, 120, 130)),
        "gold": ((210, 170, 50), (150, 115, 30)),
    },
    "doors": {
        "plain": ((0, 0, 0), (0, 0, 0)),  # body color, see renderer
        "striped": ((250, 250, 250), (0, 0, 0)),
        "checkered": ((20, 20, 20), (0, 0, 0)),
    },
    "mirrors": {
        "matte": ((15, 15, 15), (15, 15, 15)),
        "polished": ((225, 225, 235), (225, 225, 235)),
        "painted": ((180, 40, 160), (180, 40, 160)),
    },
    "lights": {
        "amber": ((255, 160, 0), (255, 200, 60)),
        "bright": ((255, 255, 210), (250, 250, 250)),
        "blue": ((60, 140, 255), (110, 180, 255)),
    },
    "roof": {
        "plain": ((0, 0, 0), (0, 0, 0)),  # darkened body color
        "rack": ((60, 60, 60), (150, 150, 150)),
        "sunroof": ((10, 10, 30), (90, 90, 120)),
    },
}

# Words that anchor each part attribute in captions: "<attribute> <anchor>".
PART_ANCHORS = {
    "windows": "windows",
    "wheels": "wheels",
    "doors": "doors",
    "mirrors": "mirrors",
    "lights": "headlights",
    "roof": "roof",
}

CAPTION_OPENERS = (
    "the image shows a {color} {shape}",
    "this is a {color} {shape}",
    "a {color} {shape} is visible in the frame",
    "the target vehicle is a {color} {shape}",
)

PART_CLAUSES = {
    "windows": ("it has {a} windows", "the car has {a} windows all around", "{a} windows cover the cabin"),
    "wheels": ("it rides on {a} wheels", "the vehicle sits on {a} wheels", "you can see {a} wheels"),
    "doors": ("the side shows {a} doors", "it has {a} doors on the side", "{a} doors are visible"),
    "mirrors": ("it carries {a} mirrors", "there are {a} mirrors near the front", "{a} mirrors stick out"),
    "lights": ("it has {a} headlights", "the front has {a} headlights", "{a} headlights are mounted low"),
    "roof": ("it has a {a} roof", "on top there is a {a} roof", "the body ends in a {a} roof"),
}

FILLERS = (
    "the picture was taken by a traffic camera",
    "the vehicle is driving on a city street",
    "the scene looks like a daytime view",
    "the shot was captured from the side",
    "the vehicle appears clean and well kept",
    "the background is mostly empty",
    "overall the vehicle looks like a common model",
    "the vehicle is moving slowly through the lane",
)

SPECIAL_TOKENS = ("[PAD]", "[BOS]", "[EOS]", "[MASK]", "[UNK]")


def _caption_words() -> list[str]:
    words: set[str] = set()
    texts = list(CAPTION_OPENERS) + list(FILLERS)
    for clauses in PART_CLAUSES.values():
        texts.extend(clauses)
    for text in texts:
        words.update(text.replace("{color}", "").replace("{shape}", "")
                     .replace("{a}", "").split())
    words.update(BODY_COLORS)
    words.update(BODY_SHAPES)
    for values in PART_ATTRIBUTES.values():
        words.update(values)
    words.update(PART_ANCHORS.values())
    words.update(PART_NAMES)
    return sorted(words)


WORDS = tuple(SPECIAL_TOKENS) + tuple(_caption_words())
