"""Switch off one defense at a time and see what the explorer finds.

The explorer walks every interleaving of a hostile REE driver and a
malicious CMA up to a bounded depth. With all defenses on it finds nothing;
each defense removed opens at least one attack, printed as its shortest
trace.
"""
from tzpipe.npu_codriver import DEFENSE_NAMES, Defenses, attack_explore

MEANING = {"S1": "secure window not contiguous", "S2": "job launched twice or out of order",
           "S3": "REE touched the NPU while secure memory was mapped",
           "S4": "unverified plaintext reached the TEE"}


def main():
    stats = {}
    print(f"all defenses: {len(attack_explore(stats=stats))} violations "
          f"({stats['npu_states']} NPU states, {stats['memory_states']} memory states)")
    for name in DEFENSE_NAMES:
        found = attack_explore(defenses=Defenses.without(name))
        first = found[0]
        print(f"\nwithout {name}: {len(found)} violating states, e.g. {first.predicate} "
              f"({MEANING[first.predicate]})")
        for i, step in enumerate(first.steps, 1):
            print(f"  {i:2}. {step}")


if __name__ == "__main__":
    main()
