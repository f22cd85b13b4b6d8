import sys

from data_io import read_sequence, write_report
from sequences import open_reading_frames
from transcription import transcribe
from translation import translate

min_codons = 1
if "--min-codons" in sys.argv:
    min_codons = int(sys.argv[sys.argv.index("--min-codons") + 1])

orfs = open_reading_frames(read_sequence(), min_codons)
proteins = [translate(transcribe(o)) for o in orfs]
longest = max(proteins, key=len, default="")
write_report(len(orfs), longest)
