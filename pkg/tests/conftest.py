import numpy as np
import pytest

SR = 44100


def sawtooth(f0, duration_s, sr=SR, amp=0.5, phase=0.0):
    t = np.arange(int(round(duration_s * sr))) / sr
    return amp * (2.0 * np.mod(f0 * t + phase, 1.0) - 1.0)


def sine(f0, duration_s, sr=SR, amp=0.5):
    t = np.arange(int(round(duration_s * sr))) / sr
    return amp * np.sin(2 * np.pi * f0 * t)


def sine_plus_noise(snr_db, duration_s=2.0, f0=200.0, sr=SR, seed=0, total_amp=0.5):
    """Sine and white noise mixed at an exact empirical power ratio."""
    rng = np.random.default_rng(seed)
    s = np.sin(2 * np.pi * f0 * np.arange(int(round(duration_s * sr))) / sr)
    n = rng.standard_normal(s.size)
    n *= np.sqrt(np.mean(s * s) / np.mean(n * n) / 10 ** (snr_db / 10))
    x = s + n
    return total_amp * x / np.abs(x).max()


def chirp(f_start, f_end, duration_s, sr=SR, amp=0.5):
    t = np.arange(int(round(duration_s * sr))) / sr
    phase = 2 * np.pi * (f_start * t + 0.5 * (f_end - f_start) / duration_s * t * t)
    return amp * np.sin(phase)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


ACCEPTANCE_RESULTS = []


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for line in sorted(ACCEPTANCE_RESULTS, key=lambda s: int(s.split()[0][1:])):
        terminalreporter.write_line(line)
