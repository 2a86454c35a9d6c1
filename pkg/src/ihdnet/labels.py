"""Class vocabulary shared by every stage."""

import numpy as np

CLASSES = ("epidural", "intraparenchymal", "intraventricular", "subarachnoid", "subdural", "any")
SHORT = ("EDH", "IPH", "IVH", "SAH", "SDH", "any")
NUM_CLASSES = 6
ANY = 5

# competition weighting: 2 on "any", 1 on each subtype
DEFAULT_WEIGHTS = np.array([1.0, 1.0, 1.0, 1.0, 1.0, 2.0])
