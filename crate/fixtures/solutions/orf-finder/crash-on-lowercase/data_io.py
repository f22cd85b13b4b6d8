import sys


def read_sequence(stream=sys.stdin):
    lines = [l.strip() for l in stream if not l.startswith(">")]
    return "".join(lines)


def write_report(count, protein):
    print(count)
    print(protein if protein else "-")
