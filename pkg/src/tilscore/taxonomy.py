"""Fixed class vocabularies shared across modules.

Order matters: tie-breaks (argmax labeling, confusion axes) use these exact
orders.
"""

# slide region taxonomy; index 0 is the implicit background
REGION_CLASSES = ("background", "necrosis", "stroma", "normal_lung", "tumor")

# patch classifier taxonomy (no background class)
PATCH_CLASSES = ("necrosis", "stroma", "normal_lung", "tumor")

# patch classes whose TIL densities enter prognostic scores
RELEVANT_CLASSES = frozenset({"stroma", "tumor"})

# nucleus taxonomy used by quantification backends
CELL_CLASSES = ("neoplastic", "inflammatory", "connective", "dead", "epithelial")

# TILs are the inflammatory nuclei
TIL_CLASS = "inflammatory"
