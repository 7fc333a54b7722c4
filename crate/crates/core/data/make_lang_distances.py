# Regenerates lang_distances.csv from the lang2vec 1.1.2 data files.
#   pip install lang2vec==1.1.2 scipy
#   python make_lang_distances.py > lang_distances.csv
#
# syntactic: cosine distance between syntax_knn vectors.
# geographic: great-circle distance over the antipodal distance. Coordinates
# are recovered from the geo feature set, whose entries are normalized
# distances to 299 fixed points.
import numpy as np
import lang2vec.lang2vec as l2v
from scipy.optimize import least_squares

SEEN = ["ar", "bn", "en", "id", "ja", "ko", "ru", "sw", "te", "th", "tr"]
UNSEEN = ["mr", "gu", "zh", "ne", "pt", "si", "so", "vi", "yo", "uk", "fa"]
CODES = SEEN + UNSEEN
ISO = {c: l2v.LETTER_CODES[c] for c in CODES}


def unit(lat, lon):
    lat, lon = np.radians(lat), np.radians(lon)
    return np.stack([np.cos(lat) * np.cos(lon), np.cos(lat) * np.sin(lon), np.sin(lat)], -1)


def angle(u, v):
    return np.arccos(np.clip(u @ v.T, -1.0, 1.0))


def cosine(a, b):
    a, b = np.asarray(a, float), np.asarray(b, float)
    return 1.0 - a @ b / (np.linalg.norm(a) * np.linalg.norm(b))


def locate(geo, points):
    coords = {}
    for c in CODES:
        y = np.asarray(geo[ISO[c]], float)
        fit = least_squares(lambda p: angle(unit(*p)[None], points)[0] / np.pi - y, points_deg[np.argmin(y)])
        coords[c] = unit(*fit.x)
    return coords


geo = l2v.get_features([ISO[c] for c in CODES], "geo", header=True)
points_deg = np.array([[float(x) for x in f[3:].split("_")] for f in geo["CODE"]])
coords = locate(geo, unit(points_deg[:, 0], points_deg[:, 1]))
syn = l2v.get_features([ISO[c] for c in CODES], "syntax_knn")

print("src,dst,syntactic,geographic")
for a in CODES:
    for b in CODES:
        if a != b:
            s = max(cosine(syn[ISO[a]], syn[ISO[b]]), 0.0)
            g = angle(coords[a][None], coords[b][None])[0, 0] / np.pi
            print(f"{a},{b},{s:.6f},{g:.6f}")
