"""seraug: synthetic-speech data augmentation for speech emotion recognition.

Subpackages cover the full pipeline: emotional text generation (promptgen),
LLM/TTS clients with offline mocks (synthesis), feature corpora and fold
splits (corpus), the hand-derived classifier math (model_core), the training
regimes (strategies), WA/UA evaluation (metrics), and the CLI (cli).
"""

__version__ = "0.1.0"
