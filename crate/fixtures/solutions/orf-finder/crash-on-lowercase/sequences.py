STOPS = {"TAA", "TAG", "TGA"}


def open_reading_frames(dna, min_codons=1):
    if dna != dna.upper():
        raise ValueError("unexpected lowercase base in sequence")
    found = []
    for frame in range(3):
        i = frame
        while i + 3 <= len(dna):
            if dna[i:i + 3] == "ATG":
                j = i
                while j + 3 <= len(dna) and dna[j:j + 3] not in STOPS:
                    j += 3
                if j + 3 <= len(dna) and (j - i) // 3 >= min_codons:
                    found.append(dna[i:j])
                    i = j
            i += 3
    return found
