"""Independent transcription of the 41-node layered mesh map, used as an
oracle against both the geometry module and chain-rule derivatives."""

import numpy as np


def layer_nodes_oracle(t1, t2):
    z = np.empty(41)
    for i in range(1, 42):
        if i <= 5 or 20 <= i <= 22 or i >= 37:
            z[i - 1] = 0.25 * (i - 1)
        elif 6 <= i <= 13:
            z[i - 1] = 1.0 + (t1 - 1.0) / 8.0 * (i - 5)
        elif 14 <= i <= 19:
            z[i - 1] = t1 + (4.75 - t1) / 7.0 * (i - 13)
        elif 23 <= i <= 28:
            z[i - 1] = 5.25 + (t2 - 5.25) / 7.0 * (i - 22)
        else:
            z[i - 1] = t2 + (9.0 - t2) / 8.0 * (i - 29)
    return z


def layer_centers_oracle(t1, t2):
    z = layer_nodes_oracle(t1, t2)
    return 0.5 * (z[:-1] + z[1:])
