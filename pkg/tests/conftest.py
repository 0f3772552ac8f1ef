import numpy as np
import pytest
import torch

from rdstn.data import save_image


def shapes_image(size: int, seed: int) -> torch.Tensor:
    """Piecewise-constant discs and boxes over a smooth gradient, ``(1, size, size)``."""
    rng = np.random.default_rng(seed)
    yy, xx = np.mgrid[0:size, 0:size] / size
    img = 0.3 + 0.2 * np.sin(2 * np.pi * (xx * rng.uniform(0.5, 1.5) + yy * rng.uniform(0.5, 1.5)))
    for _ in range(12):
        cy, cx = rng.uniform(0, 1, 2)
        r = rng.uniform(0.05, 0.2)
        value = rng.uniform(0, 1)
        if rng.random() < 0.5:
            mask = (yy - cy) ** 2 + (xx - cx) ** 2 < r * r
        else:
            mask = (abs(yy - cy) < r) & (abs(xx - cx) < r * rng.uniform(0.3, 1))
        img[mask] = value
    return torch.from_numpy(np.clip(img, 0, 1)[None]).float()


def write_dataset(root, n: int, size: int = 64, seed: int = 0):
    root.mkdir(parents=True, exist_ok=True)
    paths = []
    for i in range(n):
        p = root / f"img_{i:03d}.png"
        save_image(shapes_image(size, seed + i), p)
        paths.append(p)
    return paths


@pytest.fixture
def dataset_dir(tmp_path):
    root = tmp_path / "data"
    write_dataset(root, 10)
    return root


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


# acceptance criterion number -> (passed, description, detail)
ACCEPTANCE: dict[int, tuple[bool, str, str]] = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in range(1, 11):
        if n in ACCEPTANCE:
            ok, desc, detail = ACCEPTANCE[n]
            status = "SKIP" if ok is None else ("PASS" if ok else "FAIL")
            terminalreporter.write_line(f"[{status}] criterion {n}: {desc} ({detail})")
        else:
            terminalreporter.write_line(f"[FAIL] criterion {n}: not evaluated (test errored or deselected)")
