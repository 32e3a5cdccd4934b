#!/usr/bin/env python3
"""Regenerate the bundled quest specs (egg.json, troll.json).

The troll quest carries inventory and world flags, so its states are the
reachable (location, flags) pairs, enumerated breadth-first from the start.
"""
import json
import os
from collections import deque

HERE = os.path.dirname(os.path.abspath(__file__))

WEST = ("West of House You are standing in an open field west of a white house, "
        "with a boarded front door. There is a small mailbox here.")
NORTH = ("North of House You are facing the north side of a white house. There is no "
         "door here, and all the windows are boarded up. To the north a narrow path "
         "winds through the trees.")
PATH = ("Forest Path This is a path winding through a dimly lit forest. The path heads "
        "north-south here. One particularly large tree with some low branches stands "
        "at the edge of the path.")
TREE = ("Up a Tree You are about 10 feet above the ground nestled among some large "
        "branches. The nearest branch above you is above your reach. Beside you on the "
        "branch is a small bird's nest. In the bird's nest is a large egg encrusted with "
        "precious jewels, apparently scavenged by a childless songbird. The egg is "
        "covered with fine gold inlay, and ornamented in lapis lazuli and "
        "mother-of-pearl. Unlike most eggs, this one is hinged and closed with a "
        "delicate looking clasp. The egg appears extremely fragile.")
SOUTH = ("South of House You are facing the south side of a white house. There is no "
         "door here, and all the windows are boarded.")
BEHIND = ("Behind House You are behind the white house. A path leads into the forest to "
          "the east. In one corner of the house there is a small window which is slightly ajar.")
CLEARING = ("Clearing You are in a small clearing in a well marked forest path that "
            "extends to the east and west.")
FOREST = "Forest This is a forest, with trees in all directions."
NO_WAY = "You can't go that way."


def egg():
    nav = ["go north", "go south", "go east", "go west",
           "go northeast", "go northwest", "go southeast", "go southwest"]
    actions = nav + ["climb tree", "take the egg", "climb down"]
    rooms = {"west": WEST, "north": NORTH, "path": PATH, "tree": TREE, "south": SOUTH,
             "behind": BEHIND, "clearing": CLEARING, "forest": FOREST}
    moves = {
        "west": {"go north": "north", "go south": "south", "go west": "forest"},
        "north": {"go north": "path", "go west": "west", "go east": "behind"},
        "south": {"go west": "west", "go east": "behind", "go south": "forest"},
        "behind": {"go north": "north", "go south": "south", "go east": "clearing"},
        "path": {"go south": "north", "go north": "clearing", "go east": "forest",
                 "go west": "forest", "climb tree": "tree"},
        "clearing": {"go west": "path", "go east": "forest", "go south": "behind"},
        "forest": {"go east": "path", "go north": "clearing", "go south": "south"},
        "tree": {"climb down": "path"},
    }
    transitions = []
    for room, exits in moves.items():
        for action, dest in exits.items():
            transitions.append(branch(room, action, dest, rooms[dest]))
        if room != "tree":
            transitions.append(branch(room, "take the egg", room, "You can't see any egg here."))
            if "climb tree" not in exits:
                transitions.append(branch(room, "climb tree", room, "There is no tree here suitable for climbing."))
            transitions.append(branch(room, "climb down", room, "You can't go down from here."))
    transitions.append(branch("tree", "take the egg", "won", "Taken.", 5))
    transitions.append(branch("tree", "climb tree", "tree", "You cannot climb any higher."))
    states = {r: {"terminal": False} for r in rooms}
    states["won"] = {"terminal": True}
    return {
        "actions": actions,
        "initial_state": "west",
        "initial_master": WEST,
        "default_failure_master": NO_WAY,
        "states": states,
        "transitions": transitions,
    }


def branch(state, action, nxt, master, reward=0, p=1.0):
    return {"state": state, "action": action,
            "branches": [{"p": p, "next": nxt, "master": master, "reward": reward}]}


TROLL_NAV = ["go north", "go south", "go east", "go west",
             "go northeast", "go northwest", "go up", "go down"]
TROLL_PLAN = ["open window", "enter house", "take sword", "take lantern", "move rug",
              "open trap door", "turn on lantern", "kill troll with sword"]
TROLL_EXTRA = ["climb tree", "take the egg", "open mailbox", "read leaflet", "turn off lantern"]

KITCHEN = "Kitchen You are in the kitchen of the white house. A passage leads west. To the east is a small open window."
LIVING = "Living Room You are in the living room. There is a doorway to the east, a trophy case, and a large oriental rug."
CELLAR = "Cellar You are in a dark and damp cellar with a narrow passageway leading north. A staircase leads up."
TROLL = "The Troll Room A nasty-looking troll, brandishing a bloody axe, blocks all passages out of the room."
DARK = "You can't see where you're going without a light."


def troll():
    actions = TROLL_NAV + TROLL_PLAN + TROLL_EXTRA
    assert len(actions) == 21
    # flags: window open, kitchen seen, sword, lantern (0 none, 1 off, 2 on),
    # rug moved, trap open, cellar seen
    start = ("west", False, False, False, 0, False, False, False)

    def name(s):
        loc, w, k, sw, lan, rug, trap, cel = s
        return f"{loc}|w{int(w)}k{int(k)}s{int(sw)}l{lan}r{int(rug)}t{int(trap)}c{int(cel)}"

    def outcomes(s, a):
        """List of (p, next, master, reward), or None for the default failure."""
        loc, w, k, sw, lan, rug, trap, cel = s

        def at(l, **kw):
            d = dict(zip(["w", "k", "sw", "lan", "rug", "trap", "cel"], s[1:]))
            d.update(kw)
            return (l, d["w"], d["k"], d["sw"], d["lan"], d["rug"], d["trap"], d["cel"])

        def one(nxt, master, reward=0):
            return [(1.0, nxt, master, reward)]

        def kitchen():
            return one(at("kitchen", k=True), KITCHEN, 0 if k else 10)

        # actions valid anywhere
        if a == "turn on lantern":
            if lan == 0:
                return one(s, "You don't have the lantern.")
            if lan == 2:
                return one(s, "It is already on.")
            return one(at(loc, lan=2), "The brass lantern is now on.")
        if a == "turn off lantern":
            if lan == 0:
                return one(s, "You don't have the lantern.")
            if lan == 1:
                return one(s, "It is already off.")
            return one(at(loc, lan=1), "The brass lantern is now off.")
        if a == "take the egg":
            return one(s, "You can't see any egg here.")
        if a == "climb tree":
            return one(s, "There is no tree here suitable for climbing.")
        if a == "read leaflet":
            return one(s, "You don't have the leaflet.")
        if a == "kill troll with sword" and loc != "troll":
            return one(s, "You can't see any troll here.")

        if loc == "west":
            table = {"go north": (at("north"), NORTH), "go south": (at("south"), SOUTH)}
            if a in table:
                return one(*table[a])
            if a == "open mailbox":
                return one(s, "Opening the small mailbox reveals a leaflet.")
            if a == "go east":
                return one(s, "The door is boarded and you can't remove the boards.")
        elif loc == "north":
            table = {"go west": (at("west"), WEST), "go east": (at("behind"), BEHIND),
                     "go north": (at("path"), PATH)}
            if a in table:
                return one(*table[a])
        elif loc == "south":
            table = {"go west": (at("west"), WEST), "go east": (at("behind"), BEHIND)}
            if a in table:
                return one(*table[a])
        elif loc == "path":
            if a == "go south":
                return one(at("north"), NORTH)
        elif loc == "behind":
            table = {"go north": (at("north"), NORTH), "go south": (at("south"), SOUTH)}
            if a in table:
                return one(*table[a])
            if a == "open window":
                if w:
                    return one(s, "The window is already open.")
                return one(at("behind", w=True), "With great effort, you open the window far enough to allow entry.")
            if a in ("enter house", "go west"):
                if not w:
                    return one(s, "The kitchen window is closed.")
                return kitchen()
        elif loc == "kitchen":
            if a == "go west":
                return one(at("living"), LIVING)
            if a == "go east":
                return one(at("behind"), BEHIND)
        elif loc == "living":
            if a == "go east":
                return kitchen()
            if a == "take sword":
                return one(s, "You already have that!") if sw else one(at("living", sw=True), "Taken.")
            if a == "take lantern":
                return one(s, "You already have that!") if lan else one(at("living", lan=1), "Taken.")
            if a == "move rug":
                if rug:
                    return one(s, "Having moved the carpet previously, you find it impossible to move it again.")
                return one(at("living", rug=True),
                           "With a great effort, the rug is moved to one side of the room, revealing the dusty cover of a closed trap door.")
            if a == "open trap door":
                if not rug:
                    return one(s, "You can't see any trap door here.")
                if trap:
                    return one(s, "It is already open.")
                return one(at("living", trap=True),
                           "The door reluctantly opens to reveal a rickety staircase descending into darkness.")
            if a == "go down":
                if not trap:
                    return None
                if lan != 2:
                    return one(s, DARK)
                return one(at("cellar", cel=True), CELLAR, 0 if cel else 25)
        elif loc == "cellar":
            if a in ("go north", "go up") and lan != 2:
                return one(s, DARK)
            if a == "go north":
                return one(at("troll"), TROLL)
            if a == "go up":
                return one(at("living"), LIVING)
        elif loc == "troll":
            if a == "go south":
                return one(at("cellar"), CELLAR)
            if a == "kill troll with sword":
                if not sw:
                    return one(s, "You don't have a weapon. Trying to attack a troll with your bare hands is suicidal.")
                return [(0.7, "won", "The troll is slain. A cloud of sinister black fog envelops him, and when the fog lifts, the carcass has disappeared.", 10),
                        (0.3, "dead", "The troll's axe crashes down upon your head. You have died.", 0)]
        if a in TROLL_NAV:
            return None
        return one(s, "You can't do that.")

    seen = {start}
    queue = deque([start])
    transitions = []
    while queue:
        s = queue.popleft()
        for a in actions:
            outs = outcomes(s, a)
            if outs is None:
                continue
            branches = []
            for p, nxt, master, reward in outs:
                if isinstance(nxt, tuple):
                    if nxt not in seen:
                        seen.add(nxt)
                        queue.append(nxt)
                    nxt = name(nxt)
                branches.append({"p": p, "next": nxt, "master": master, "reward": reward})
            transitions.append({"state": name(s), "action": a, "branches": branches})
    states = {name(s): {"terminal": False} for s in seen}
    states["won"] = {"terminal": True}
    states["dead"] = {"terminal": True}
    return {
        "actions": actions,
        "initial_state": name(start),
        "initial_master": WEST,
        "default_failure_master": NO_WAY,
        "states": states,
        "transitions": transitions,
    }


def write(doc, fname):
    with open(os.path.join(HERE, fname), "w") as f:
        head = {k: v for k, v in doc.items() if k != "transitions"}
        text = json.dumps(head, indent=1)[:-2]
        rows = ",\n  ".join(json.dumps(t) for t in doc["transitions"])
        f.write(f'{text},\n "transitions": [\n  {rows}\n ]\n}}\n')
    print(f"{fname}: {len(doc['actions'])} actions, {len(doc['states'])} states, "
          f"{len(doc['transitions'])} transitions")


if __name__ == "__main__":
    write(egg(), "egg.json")
    write(troll(), "troll.json")
