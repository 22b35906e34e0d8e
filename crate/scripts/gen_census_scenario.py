"""Writes scenarios/demo/census_100.scn: 100 claim/dup/drop actions with
census expectations computed by a shadow reference-count model."""

import random
import sys

FRAMES = 64
OPS = 100


def main(path):
    rng = random.Random(20240611)
    refs = [0] * FRAMES
    live = {}  # name -> frame
    n = 0
    out = [
        "# 100 frame-handle operations; every expected value comes from a",
        "# shadow reference-count model (scripts/gen_census_scenario.py).",
        "[config]",
        "frame_size = 4096",
        f"frame_count = {FRAMES}",
        "buddy = off",
        "slab_classes =",
        "",
        "[actions]",
    ]
    for i in range(OPS):
        op = rng.choice(["claim", "claim", "dup", "drop"]) if live else "claim"
        if op == "claim":
            f = rng.randrange(FRAMES) if rng.random() < 0.8 else rng.choice(list(live.values()))
            name = f"h{n}"
            n += 1
            out.append(f"claim {name} {f}")
            if refs[f] == 0:
                refs[f] = 1
                live[name] = f
                out.append("expect last == ok")
            else:
                out.append("expect last == in-use")
        elif op == "dup":
            src = rng.choice(sorted(live))
            name = f"h{n}"
            n += 1
            out.append(f"dup {name} {src}")
            live[name] = live[src]
            refs[live[src]] += 1
        else:
            name = rng.choice(sorted(live))
            out.append(f"drop {name}")
            refs[live.pop(name)] -= 1
        if (i + 1) % 25 == 0:
            claimed = sum(1 for r in refs if r)
            out.append(f"expect census.claimed == {claimed}")
            out.append(f"expect census.unused == {FRAMES - claimed}")
            out.append(f"expect census.refs == {sum(refs)}")
    for f in range(FRAMES):
        out.append(f"expect census.ref.{f} == {refs[f]}")
    with open(path, "w") as fh:
        fh.write("\n".join(out) + "\n")


if __name__ == "__main__":
    main(sys.argv[1] if len(sys.argv) > 1 else "scenarios/demo/census_100.scn")
