from wsloc.geometry import Box2D
from wsloc.model import FrameDetections, PartKind


def part(x0, y0, x1, y1, kind, conf=0.9):
    kind = PartKind(kind)
    return (Box2D(x0, y0, x1, y1, conf, kind.value), kind)


def tool(x0, y0, x1, y1, label, conf=0.9):
    return Box2D(x0, y0, x1, y1, conf, label)


def frame(parts=(), tools=(), clip_id="clip", index=0):
    return FrameDetections(clip_id, index, list(parts), list(tools))


TOOL_NAMES = [
    "needle driver",
    "monopolar curved scissors",
    "cadiere forceps",
    "stapler",
    "vessel sealer",
    "suction irrigator",
]


def random_filter_frame(rng, index=0, max_tools=5, max_parts=9):
    """Random frame whose parts often sit near the tools, so overlaps straddle common thresholds."""
    tools = []
    for _ in range(rng.randint(1, max_tools)):
        x, y = rng.uniform(0, 200), rng.uniform(0, 200)
        w, h = rng.uniform(5, 60), rng.uniform(5, 60)
        tools.append(Box2D(x, y, x + w, y + h, rng.uniform(0.0, 1.0), rng.choice(TOOL_NAMES)))
    parts = []
    for _ in range(rng.randint(0, max_parts)):
        kind = rng.choice(["shaft", "clevis", "tip"])
        if tools and rng.random() < 0.7:
            t = rng.choice(tools)
            s = rng.uniform(0, 0.25) * max(t.width, t.height)
            x0, y0 = t.x_min + rng.uniform(-s, s), t.y_min + rng.uniform(-s, s)
            x1 = max(t.x_max + rng.uniform(-s, s), x0 + 0.5)
            y1 = max(t.y_max + rng.uniform(-s, s), y0 + 0.5)
            parts.append(part(x0, y0, x1, y1, kind, rng.uniform(0, 1)))
        else:
            x, y = rng.uniform(0, 200), rng.uniform(0, 200)
            parts.append(part(x, y, x + rng.uniform(1, 60), y + rng.uniform(1, 60), kind, rng.uniform(0, 1)))
    return FrameDetections("rand", index, parts, tools)


def as_plain(frame):
    """(tools, parts) as tuples for the independent oracle."""
    tools = [(t.as_list(), t.label) for t in frame.tools]
    parts = [(b.as_list(), k.value) for b, k in frame.parts]
    return tools, parts
