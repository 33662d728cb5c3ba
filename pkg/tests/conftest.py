import numpy as np
import pytest

from cellvar import CapacityTrace, Dataset, Normalization


def linear_trace(cell_id="cell_0", c1=-0.01, n=50, t_end=1000.0, noise=0.0,
                 seed=0, normalization=Normalization.INITIAL):
    """A capacity trace generated exactly from the one-parameter model."""
    times = np.linspace(0.0, t_end, n)
    caps = 100.0 + c1 * times
    if noise:
        caps = caps + noise * np.random.default_rng(seed).standard_normal(n)
    return CapacityTrace(cell_id, times, caps, normalization)


def raw_dataset(name="raw", n_cells=3, n_points=8, seed=0, nominal=2.0):
    """A small raw (ampere-hour) dataset with mild per-cell variation."""
    rng = np.random.default_rng(seed)
    traces = []
    for k in range(n_cells):
        times = np.linspace(0.0, 700.0, n_points)
        caps = nominal * (1.0 - 1e-4 * times) + 0.001 * rng.standard_normal(n_points)
        traces.append(CapacityTrace(f"c{k}", times, np.abs(caps), Normalization.RAW))
    return Dataset(name=name, traces=tuple(traces), nominal_capacity=nominal)


@pytest.fixture
def tmp_csv(tmp_path):
    def write(rows, header="cell_id,time,capacity", name="data.csv"):
        path = tmp_path / name
        path.write_text(header + "\n" + "\n".join(rows) + "\n")
        return path

    return write
