"""Fixed layouts behind the prompt golden files."""

from textplace.layout import Element, Layout


def make_example() -> Layout:
    photo = Element.shape("imageElement", (0.0, 0.0, 1.0, 1.0), color=(200, 180, 160))
    target = Element.text_element("Make", (0.3, 0.7, 0.4, 0.1), color=(0, 0, 0))
    return Layout("make", 40, 30, (photo, target), 1)


def target_only() -> Layout:
    return Layout("solo", 20, 20, (Element.text_element("Hello", (0.1, 0.1, 0.5, 0.2)),), 0)


def tie_break() -> Layout:
    bg = Element.shape("coloredBackground", (0.0, 0.0, 1.0, 1.0), color=(250, 250, 245))
    right = Element.shape("svgElement", (0.2, 0.5, 0.2, 0.25), color=(220, 40, 40))
    left = Element.shape("maskElement", (0.1, 0.5, 0.05, 0.1), color=(40, 40, 220))
    title = Element.text_element('Big "Sale"\ncafé', (0.1, 0.05, 0.8, 0.2), color=(10, 10, 10), font_id=2)
    target = Element.text_element("today only", (0.55, 0.8, 0.3, 0.1), color=(0, 0, 0))
    return Layout("ties", 32, 24, (bg, right, target, left, title), 2)


FIXTURES = {"make": make_example, "solo": target_only, "ties": tie_break}
