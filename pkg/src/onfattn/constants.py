"""Fixed signal and label geometry shared across modules."""

SAMPLE_RATE = 16000
N_FFT = 2048
HOP_LENGTH = 512
N_MELS = 229
HOP_SECONDS = HOP_LENGTH / SAMPLE_RATE  # 0.032 s

MIN_MIDI = 21
MAX_MIDI = 108
N_PITCHES = MAX_MIDI - MIN_MIDI + 1  # 88 piano keys

WINDOW_FRAMES = 640
