"""actground: grounding instructions to pre-learned action representations."""

__version__ = "0.1.0"
